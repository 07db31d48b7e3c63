"""Concurrent-learning adaptation for deep neural network estimators and controllers."""
from .control import (
    ControlEstimator, ControlLaw, GainDefinitenessError, LsGain, ObserverState, control_input,
    dither, dither_signal, ls_gain_step, lyapunov_value, observer_step, settling_time, tracking_errors,
)
from .dnn import (
    ActivationKind, DimensionError, DnnModel, ProjectionError, SearchSpace, clamp_to_ball, flatten,
    forward, forward_and_jacobian, jacobian, project_rate, unflatten,
)
from .history import (
    HistoryStack, StackGatingError, StackMode, StackSample, fe_diagnostic, identifiability_rank,
    regressor_gram,
)
from .monitors import Envelope, fit_envelope
from .regression import (
    DivergenceError, LossEstimate, NreProblem, RegressionEstimator, RegressionLaw, loss_estimate,
    run_regression,
)
from .sim import (
    ExperimentConfig, Plant, RunResult, compare_table, network_plant, off_trajectory_eval,
    plant_f1, plant_f2, reference, run_experiment, run_grid,
)

__version__ = "0.1.0"
