"""Momentum SGD with delay-compensating update rules.

Every rule here is a special case of one update

    v' = m v + g
    w' = w - eta * (a v' + b g)

with the gradient ``g`` evaluated at delayed, possibly predicted weights.
Plain SGDM is ``a=1, b=0``; Spike Compensation changes ``(a, b)``; Linear
Weight Prediction changes where ``g`` is evaluated (see
:func:`predict_weights`).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

METHODS = ("plain", "gsc", "lwp", "lwp_plus_gsc", "grad_shrink", "weight_stash", "spectrain")
FORMS = ("velocity", "weight_difference")


@dataclass(frozen=True)
class MitigationSpec:
    """Which update rule to use and its coefficients.

    ``a``/``b`` left as ``None`` mean the SC_D defaults for the stage's delay;
    ``T`` left as ``None`` means ``T_scale * D`` (``T_scale=1`` is LWP_D).
    ``gamma < 1`` shrinks each stage's gradient by ``gamma ** D`` on top of
    whatever method is chosen.
    """

    method: str = "plain"
    a: float | None = None
    b: float | None = None
    T: float | None = None
    T_scale: float = 1.0
    form: str = "velocity"
    gamma: float = 1.0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown mitigation method {self.method!r}")
        if self.form not in FORMS:
            raise ValueError(f"unknown prediction form {self.form!r}")
        if self.method == "plain":
            if self.a not in (None, 1, 1.0) or self.b not in (None, 0, 0.0) or self.T not in (None, 0, 0.0):
                raise ValueError("plain SGDM requires a=1, b=0, T=0")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.T is not None and self.T < 0:
            raise ValueError("prediction horizon T must be >= 0")
        if self.T_scale < 0:
            raise ValueError("T_scale must be >= 0")

    @property
    def uses_sc(self) -> bool:
        return self.method in ("gsc", "lwp_plus_gsc")

    @property
    def uses_prediction(self) -> bool:
        return self.method in ("lwp", "lwp_plus_gsc")

    def coefficients(self, m: float, D: int) -> tuple[float, float]:
        """(a, b) for a stage with delay ``D``."""
        if not self.uses_sc:
            return 1.0, 0.0
        da, db = sc_default_coeffs(m, D)
        return (da if self.a is None else self.a), (db if self.b is None else self.b)

    def horizon(self, D: int) -> float:
        if not self.uses_prediction:
            return 0.0
        return self.T_scale * D if self.T is None else self.T

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class OptimizerConfig:
    eta: float
    m: float = 0.0
    mitigation: MitigationSpec = field(default_factory=MitigationSpec)

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"learning rate must be > 0, got {self.eta}")
        if not 0.0 <= self.m < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.m}")


class OptState:
    """Weights, velocity and a bounded history of both.

    ``w_at(k)`` is ``w_{t-k}`` where ``t`` is the number of steps taken.
    Lags reaching before the start clamp to the initial state (the
    pipeline-fill convention); lags beyond the history capacity raise.
    """

    def __init__(self, w, v=None, capacity: int = 2):
        self.w = np.array(w, dtype=np.float64)
        self.v = np.zeros_like(self.w) if v is None else np.array(v, dtype=np.float64)
        if self.v.shape != self.w.shape:
            raise ValueError("w and v must have the same length")
        self.capacity = max(int(capacity), 2)
        self.history_w: deque[np.ndarray] = deque([self.w.copy()], maxlen=self.capacity)
        self.history_v: deque[np.ndarray] = deque([self.v.copy()], maxlen=self.capacity)
        self.step_count = 0

    @classmethod
    def for_delay(cls, w, max_delay: int, v=None) -> "OptState":
        return cls(w, v, capacity=max_delay + 2)

    def __len__(self):
        return self.w.size

    def _index(self, lag: int) -> int:
        if lag < 0:
            raise ValueError("lag must be >= 0")
        if lag >= self.capacity:
            raise IndexError(f"lag {lag} exceeds history capacity {self.capacity}")
        return min(lag, self.step_count)

    def w_at(self, lag: int) -> np.ndarray:
        return self.history_w[-1 - self._index(lag)]

    def v_at(self, lag: int) -> np.ndarray:
        return self.history_v[-1 - self._index(lag)]


def step(state: OptState, g, cfg: OptimizerConfig, a: float = 1.0, b: float = 0.0) -> OptState:
    """One (generalized Spike Compensation) momentum step, in place."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.w.shape:
        raise ValueError(f"gradient length {g.size} != parameter length {state.w.size}")
    v = cfg.m * state.v + g
    if a == 1.0 and b == 0.0:
        w = state.w - cfg.eta * v
    else:
        w = state.w - cfg.eta * (a * v + b * g)
    state.v, state.w = v, w
    state.history_v.append(v)
    state.history_w.append(w)
    state.step_count += 1
    return state


def sc_default_coeffs(m: float, D: int) -> tuple[float, float]:
    """SC_D coefficients ``a = m^D``, ``b = (1 - m^D) / (1 - m)``."""
    if not 0.0 <= m < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    if D < 0:
        raise ValueError("delay must be >= 0")
    if m == 0.0:
        return (1.0, 0.0) if D == 0 else (0.0, 1.0)
    a = m**D
    return a, (1.0 - a) / (1.0 - m)


def predict_weights(state: OptState, D: int, T: float, form: str, eta: float) -> np.ndarray:
    """Linear weight prediction from the state ``D`` steps back.

    velocity form: ``w_{t-D} - eta T v_{t-D}``
    weight_difference form: ``w_{t-D} + T (w_{t-D} - w_{t-D-1})``
    """
    if form == "velocity":
        w = state.w_at(D)
        return w.copy() if T == 0 else w - eta * T * state.v_at(D)
    if form == "weight_difference":
        w = state.w_at(D)
        if T == 0:
            return w.copy()
        return w + T * (w - state.w_at(D + 1))
    raise ValueError(f"unknown prediction form {form!r}")


def gsc_from_lwp(m: float, T: float) -> tuple[float, float]:
    """GSC coefficients that reproduce LWP with horizon ``T`` on a linear gradient."""
    if not 0.0 < m < 1.0:
        raise ValueError("gsc_from_lwp needs 0 < m < 1")
    return 1.0 - (1.0 - m) * T / m, T / m


def lwp_horizon_matching_sc(m: float, D: int) -> float:
    """Horizon for which LWP matches SC_D on a linear gradient: ``m (1 - m^D) / (1 - m)``."""
    return m * sc_default_coeffs(m, D)[1]


def shrink_gradient(g, gamma: float, D: int) -> np.ndarray:
    """Gradient shrinking: scale a stage's gradient by ``gamma ** D``."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    if D < 0:
        raise ValueError("delay must be >= 0")
    g = np.asarray(g, dtype=np.float64)
    return g if gamma == 1.0 or D == 0 else gamma**D * g


def scale_hyperparams(eta_r: float, m_r: float, N_r: int, N: int) -> tuple[float, float]:
    """Rescale (eta, m) from update size ``N_r`` to ``N``.

    Momentum keeps the same decay per sample and the learning rate keeps the
    same total contribution per sample, ``eta / (1 - m)`` scaled by ``N``.
    """
    if not (eta_r > 0 and 0.0 <= m_r < 1.0 and N_r >= 1 and N >= 1):
        raise ValueError("need eta_r > 0, 0 <= m_r < 1, N_r >= 1, N >= 1")
    if m_r == 0.0:
        return eta_r * N / N_r, 0.0
    m = m_r ** (N / N_r)
    # expm1/log1p keep 1 - m accurate when m is very close to 1
    one_minus_m = -math.expm1(N / N_r * math.log(m_r))
    return one_minus_m * N / ((1.0 - m_r) * N_r) * eta_r, m
