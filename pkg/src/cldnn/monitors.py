"""Falsifiable decay-envelope checks for Lyapunov-style monitors."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np


@dataclass(frozen=True)
class Envelope:
    """``A * exp(-b t) + C`` bounding a nonnegative series from above."""

    A: float
    b: float
    C: float

    @property
    def decays(self) -> bool:
        return self.b > 0

    def __call__(self, t):
        return self.A * np.exp(-self.b * np.asarray(t)) + self.C

    def as_dict(self):
        d = asdict(self)
        d["decays"] = self.decays
        return d


def fit_envelope(t, v, tail_fraction=0.2) -> Envelope:
    """Fit the tightest decay rate given ``A = v(0)`` and a tail-sup offset.

    ``C`` is the largest value over the final ``tail_fraction`` of the series.
    ``b`` is the largest rate for which the envelope still covers every
    sample; it is ``inf`` when no sample rises above ``C`` after ``t0`` and
    non-positive when some sample exceeds ``v(0) + C``.
    """
    t = np.asarray(t, dtype=float)
    v = np.asarray(v, dtype=float)
    if t.shape != v.shape or t.size < 2:
        raise ValueError("need matching series with at least two samples")
    t = t - t[0]
    A = float(v[0])
    n_tail = max(1, int(np.ceil(tail_fraction * v.size)))
    C = float(np.max(v[-n_tail:]))
    excess = v[1:] - C
    tt = t[1:]
    active = excess > 0
    if not np.any(active):
        return Envelope(A, np.inf, C)
    if A <= 0:
        return Envelope(A, -np.inf, C)
    rates = -np.log(excess[active] / A) / tt[active]
    return Envelope(A, float(np.min(rates)), C)
