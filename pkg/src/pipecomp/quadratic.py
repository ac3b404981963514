"""Linear-recurrence analysis of delayed momentum methods on a convex quadratic.

On ``L(w) = lambda/2 w^2`` the gradient is linear, so every method turns into a
linear recurrence in the expected weights. All four methods are special cases
of the combined rule (weight-difference prediction with horizon ``T`` plus
generalized Spike Compensation ``a, b``) whose weight-only transition is

    w[t+1] = (1+m) w[t] - m w[t-1]
             - h (a+b) ((T+1) w[t-D]   - T w[t-D-1])
             + h m b   ((T+1) w[t-D-1] - T w[t-D-2]),      h = eta * lambda

The gradient term enters with a plus sign in the characteristic polynomial
(``... + h (a+b)(T+1) z^2 ...``); :func:`simulate_recurrence` iterates the
velocity form directly and is the arbiter for that convention.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .optim import sc_default_coeffs

METHODS = ("gdm", "gsc", "lwp", "lwp_w_plus_gsc")


@dataclass(frozen=True)
class QuadraticRecurrence:
    method: str
    m: float
    eta_lambda: float
    D: int = 0
    a: float | None = None
    b: float | None = None
    T: float | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 0.0 <= self.m < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.D < 0:
            raise ValueError("delay must be >= 0")

    def coefficients(self) -> tuple[float, float, float]:
        """Resolved (a, b, T); irrelevant ones are pinned to the plain values."""
        a, b, T = 1.0, 0.0, 0.0
        if self.method in ("gsc", "lwp_w_plus_gsc"):
            da, db = sc_default_coeffs(self.m, self.D)
            a = da if self.a is None else self.a
            b = db if self.b is None else self.b
        if self.method in ("lwp", "lwp_w_plus_gsc"):
            T = float(self.D) if self.T is None else self.T
        return a, b, T


@dataclass
class RootAnalysis:
    coefficients: np.ndarray
    roots: np.ndarray
    r_max: float
    stable: bool


@dataclass
class DecayEstimate:
    rate: float
    diverged: bool
    steps: int


@dataclass
class HalfLifeResult:
    method: str
    kappa: float
    D: int
    half_life: float
    r_star: float
    eta_star: float  # eta * lambda_min of the best interval
    m_star: float
    feasible: bool = True


@dataclass(frozen=True)
class SearchSpec:
    """Grid resolution for the half-life search.

    ``n_eta`` and ``n_lambda`` are lower bounds: the eta*lambda grid is
    log-uniform with a step fine enough for both, every window of the grid
    spanning a factor ``kappa`` is a candidate interval.
    """

    n_eta: int = 200
    n_lambda: int = 200
    n_m: int = 100
    m_max: float = 0.9999
    el_min: float = 1e-3  # smallest upper end eta*lambda_max considered
    el_max: float = 8.0  # largest upper end; every method is unstable beyond 2(1+m) < 4
    max_grid: int = 4000
    n_refine: int = 41  # second pass over the momentum cells adjacent to the coarse optimum
    m_grid: tuple[float, ...] | None = None

    def momenta(self) -> np.ndarray:
        if self.m_grid is not None:
            return np.asarray(self.m_grid, dtype=np.float64)
        return np.linspace(0.0, self.m_max, self.n_m)

    def to_dict(self) -> dict:
        return asdict(self)


def _lag_coefficients(m: float, h, D: int, a: float, b: float, T: float):
    """Coefficients c[k] of w[t-k] in the weight-only transition (k = 0..D+2)."""
    h = np.asarray(h, dtype=np.float64)
    c = np.zeros(h.shape + (D + 3,))
    A, B = a + b, m * b
    c[..., 0] += 1.0 + m
    c[..., 1] -= m
    c[..., D] -= h * A * (T + 1.0)
    c[..., D + 1] += h * (A * T + B * (T + 1.0))
    c[..., D + 2] -= h * B * T
    return c


def _full_poly(m, h, D, a, b, T):
    c = _lag_coefficients(m, h, D, a, b, T)
    lead = np.ones(c.shape[:-1] + (1,))
    return np.concatenate([lead, -c], axis=-1)


def char_poly(rec: QuadraticRecurrence) -> np.ndarray:
    """Characteristic polynomial, descending powers of z, zero roots stripped."""
    a, b, T = rec.coefficients()
    p = _full_poly(rec.m, rec.eta_lambda, rec.D, a, b, T)
    end = len(p)
    while end > 2 and p[end - 1] == 0.0:
        end -= 1
    return p[:end]


def _companion_roots(coeffs: np.ndarray) -> np.ndarray:
    """Roots of a batch of monic-normalisable polynomials via companion eigenvalues."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    n = coeffs.shape[-1] - 1
    comp = np.zeros(coeffs.shape[:-1] + (n, n))
    comp[..., 0, :] = -coeffs[..., 1:] / coeffs[..., :1]
    if n > 1:
        idx = np.arange(n - 1)
        comp[..., idx + 1, idx] = 1.0
    return np.linalg.eigvals(comp)


def max_root_magnitude(coefficients) -> RootAnalysis:
    p = np.trim_zeros(np.asarray(coefficients, dtype=np.float64), "f")
    if p.size < 2:
        raise ValueError("polynomial must have degree >= 1")
    roots = _companion_roots(p)
    r_max = float(np.abs(roots).max())
    return RootAnalysis(p, roots, r_max, r_max < 1.0)


def r_max_grid(method: str, D: int, m_values, eta_lambda_values, a=None, b=None, T=None, chunk: int = 20000) -> np.ndarray:
    """Dominant root magnitude for every (m, eta*lambda) pair, shape (len(m), len(el))."""
    m_values = np.atleast_1d(np.asarray(m_values, dtype=np.float64))
    el = np.atleast_1d(np.asarray(eta_lambda_values, dtype=np.float64))
    out = np.empty((m_values.size, el.size))
    rows_per_chunk = max(1, chunk // max(el.size, 1))
    for start in range(0, m_values.size, rows_per_chunk):
        ms = m_values[start:start + rows_per_chunk]
        polys = []
        for m in ms:
            ca, cb, cT = QuadraticRecurrence(method, float(m), 1.0, D, a, b, T).coefficients()
            polys.append(_full_poly(float(m), el, D, ca, cb, cT))
        roots = _companion_roots(np.stack(polys))
        out[start:start + ms.size] = np.abs(roots).max(axis=-1)
    return out


@dataclass
class Heatmap:
    method: str
    D: int
    m_grid: np.ndarray
    eta_lambda_grid: np.ndarray
    r_max: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def unstable(self) -> np.ndarray:
        return self.r_max >= 1.0

    def rows(self):
        for i, m in enumerate(self.m_grid):
            for j, el in enumerate(self.eta_lambda_grid):
                r = float(self.r_max[i, j])
                yield {"m": float(m), "eta_lambda": float(el), "r_max": r, "stable": r < 1.0}


def stability_heatmap(method: str, D: int, m_grid, eta_lambda_grid, **params) -> Heatmap:
    m_grid = np.asarray(m_grid, dtype=np.float64)
    el = np.asarray(eta_lambda_grid, dtype=np.float64)
    if m_grid.size == 0 or el.size == 0:
        raise ValueError("grids must be nonempty")
    r = r_max_grid(method, D, m_grid, el, params.get("a"), params.get("b"), params.get("T"))
    return Heatmap(method, D, m_grid, el, r, dict(params))


def simulate_recurrence(rec: QuadraticRecurrence, steps: int = 4000, w0: float = 1.0) -> DecayEstimate:
    """Iterate the expected-weight dynamics and estimate the asymptotic decay rate.

    Starts from a constant weight history ``w0`` and zero velocity and runs the
    velocity form of the update (delayed, predicted gradient; GSC weight step).
    The rate is the slope of the line supporting the peaks of ``log|w_t|`` over
    the last half of the run, which stays accurate for oscillating
    (complex-root) trajectories. The state is renormalised as it goes, so
    neither underflow nor overflow stops the iteration; ``diverged`` records
    whether ``|w|`` passed 1e100.
    """
    if steps < 200:
        raise ValueError("need at least 200 steps")
    a, b, T = rec.coefficients()
    m, h, D = rec.m, rec.eta_lambda, rec.D
    hist = [float(w0)] * (D + 3)  # hist[-1] is w_t, hist[-1-k] is w_{t-k}
    u = 0.0  # eta * velocity
    log_scale = 0.0
    log_w = np.full(steps, -np.inf)
    limit = math.log(1e100)
    diverged = False
    for t in range(steps):
        wd = hist[-1 - D]
        hg = h * (wd + T * (wd - hist[-2 - D])) if T else h * wd
        u = m * u + hg
        w = hist[-1] - (a * u + b * hg)
        hist.append(w)
        del hist[0]
        if w != 0.0:
            log_w[t] = log_scale + math.log(abs(w))
            diverged = diverged or log_w[t] > limit
        peak = max(abs(x) for x in hist)
        if peak == 0.0:
            break
        if peak > 1e50 or peak < 1e-50:
            hist = [x / peak for x in hist]
            u /= peak
            log_scale += math.log(peak)
    tail = log_w[steps // 2:]
    if not np.isfinite(tail).any():
        return DecayEstimate(0.0, False, steps)
    return DecayEstimate(math.exp(_peak_slope(tail)), diverged, steps)


def _peak_slope(y: np.ndarray) -> float:
    """Slope of the line through the highest detrended points near both ends of ``y``."""
    n = y.size
    W = max(n // 4, 1)
    x = np.arange(n)
    slope = 0.0
    for _ in range(6):
        d = y - slope * x
        i = int(np.argmax(d[:W]))
        j = n - W + int(np.argmax(d[-W:]))
        new = (y[j] - y[i]) / (j - i)
        if new == slope:
            break
        slope = new
    return float(slope)


def trajectory(rec: QuadraticRecurrence, steps: int, w0: float = 1.0) -> np.ndarray:
    """Raw weight sequence of the velocity-form dynamics (no renormalisation)."""
    a, b, T = rec.coefficients()
    m, h, D = rec.m, rec.eta_lambda, rec.D
    hist = [float(w0)] * (D + 3)
    u = 0.0
    out = np.empty(steps + 1)
    out[0] = w0
    for t in range(steps):
        wd = hist[-1 - D]
        hg = h * (wd + T * (wd - hist[-2 - D]))
        u = m * u + hg
        hist.append(hist[-1] - (a * u + b * hg))
        del hist[0]
        out[t + 1] = hist[-1]
    return out


def _eta_lambda_axis(kappa: float, spec: SearchSpec) -> tuple[np.ndarray, int]:
    """Log-uniform eta*lambda grid anchored at 1 and the window length covering kappa."""
    log_k = math.log(kappa)
    span = math.log(spec.el_max / spec.el_min)
    step = span / (spec.n_eta - 1)
    if log_k > 0:
        step = min(step, log_k / (spec.n_lambda - 1))
    step = max(step, (span + log_k) / spec.max_grid)
    k_hi = math.floor(math.log(spec.el_max) / step + 1e-9)
    k_lo = math.ceil((math.log(spec.el_min) - log_k) / step - 1e-9)
    grid = np.exp(step * np.arange(k_lo, k_hi + 1))
    window = int(round(log_k / step)) + 1
    return grid, window


def _sliding_max(x: np.ndarray, window: int) -> np.ndarray:
    from numpy.lib.stride_tricks import sliding_window_view

    return sliding_window_view(x, window, axis=-1).max(axis=-1)


def _best_per_momentum(method: str, kappa: float, D: int, spec: SearchSpec, params: dict):
    """For every momentum: lowest achievable worst-case root and its eta*lambda_min."""
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    grid, window = _eta_lambda_axis(kappa, spec)
    ms = spec.momenta()
    r = r_max_grid(method, D, ms, grid, params.get("a"), params.get("b"), params.get("T"))
    worst = _sliding_max(r, window)  # worst[i, j]: interval starting at grid[j]
    j_best = worst.argmin(axis=1)
    return ms, worst[np.arange(ms.size), j_best], grid[j_best]


def half_life(r: float) -> float:
    if r <= 0.0:
        return 0.0
    if r >= 1.0:
        return math.inf
    return -math.log(2.0) / math.log(r)


def optimal_halflife(method: str, kappa: float, D: int = 0, params: dict | None = None,
                     search_spec: SearchSpec | None = None) -> HalfLifeResult:
    """Best convergence half-life over (eta, m) for a dense spectrum of condition ``kappa``."""
    spec = search_spec or SearchSpec()
    params = params or {}
    ms, r_best, el_best = _best_per_momentum(method, kappa, D, spec, params)
    i = int(r_best.argmin())
    if spec.n_refine > 1 and spec.m_grid is None and ms.size > 1:
        lo, hi = ms[max(i - 1, 0)], ms[min(i + 1, ms.size - 1)]
        fine = replace(spec, m_grid=tuple(np.linspace(lo, hi, spec.n_refine)))
        ms2, r2, el2 = _best_per_momentum(method, kappa, D, fine, params)
        j = int(r2.argmin())
        if r2[j] < r_best[i]:
            ms, r_best, el_best, i = ms2, r2, el2, j
    r_star = float(r_best[i])
    return HalfLifeResult(method, float(kappa), D, half_life(r_star), r_star, float(el_best[i]),
                          float(ms[i]), r_star < 1.0)


def optimal_momentum_nodelay(kappa: float) -> float:
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    s = math.sqrt(kappa)
    return ((s - 1.0) / (s + 1.0)) ** 2


def heavy_ball_rate(kappa: float) -> float:
    s = math.sqrt(kappa)
    return (s - 1.0) / (s + 1.0)


def momentum_horizon_sweep(kappa: float, D: int, m_grid, T_scale_grid, method: str = "lwp",
                           search_spec: SearchSpec | None = None, params: dict | None = None) -> list[dict]:
    """Best half-life over eta for each (m, T = scale * D)."""
    spec = replace(search_spec or SearchSpec(), m_grid=tuple(float(m) for m in m_grid))
    rows = []
    for scale in T_scale_grid:
        p = dict(params or {}, T=float(scale) * D)
        ms, r_best, el_best = _best_per_momentum(method, kappa, D, spec, p)
        for m, r, el in zip(ms, r_best, el_best):
            rows.append({"m": float(m), "T_scale": float(scale), "half_life": half_life(float(r)),
                         "r_star": float(r), "eta_lambda_min": float(el), "stable": bool(r < 1.0)})
    return rows
