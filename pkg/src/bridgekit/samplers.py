"""Generation procedures over the bridge coefficient layer.

All samplers share one structure: a stochastic *boot step* leaves the pinned
endpoint t = T (where the kernel residual is singular) by drawing

    x_{t_{N−1}} = a x_T + b x̂_T + c ε,      x̂_T = predictor(x_T, T, x_T),

with ε the *booting noise*, the latent variable of deterministic sampling,
and then walk the remaining grid down to t_0:

* first-order implicit updates at any stochasticity level η (``DBIM1``);
* second/third-order exponential-integrator steps in the variable
  λ_t = log(b_t/c_t), with derivatives estimated by finite differences of
  stored predictor outputs (``DBIM2``/``DBIM3``);
* explicit Euler/Heun on the probability-flow ODE and Euler–Maruyama on the
  reverse SDE as baselines.

Randomness is counter-based: every (seed, step, trajectory-chunk) triple
maps to its own Philox counter block, so batch results are bitwise
independent of thread count and scheduling.
"""

from __future__ import annotations

import enum
import functools
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import (
    BridgekitError,
    DegenerateCoefficient,
    DimensionMismatch,
    InitialStepSingularity,
    InvalidGridParams,
    NonpositiveStep,
    ReconstructionInconsistent,
    SingularSystem,
    ZeroVector,
)
from .bridge import make_rhos
from .oracle import score_from_predictor
from .schedule import NoiseSchedule, TimeGrid, coeffs

# fixed trajectory-chunk width; results must not depend on thread count,
# so the chunking itself never varies
_CHUNK = 256
_BOOT_TAG = 1
_STEP_TAG = 2
_SMALL_H = 1e-4


class Method(enum.Enum):
    DBIM1 = "dbim1"
    DBIM2 = "dbim2"
    DBIM3 = "dbim3"
    PF_ODE_EULER = "pf_ode_euler"
    PF_ODE_HEUN = "pf_ode_heun"
    SDE_EULER_MARUYAMA = "sde_euler_maruyama"


_ORDER = {Method.DBIM2: 2, Method.DBIM3: 3}


@dataclass(frozen=True)
class SamplerConfig:
    """Method, stochasticity level, grid, and seed for one sampling run."""

    method: Method
    grid: TimeGrid
    seed: int
    eta: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidGridParams(f"eta must lie in [0, 1], got {self.eta}")
        if self.method is not Method.DBIM1 and self.eta != 0.0:
            warnings.warn(
                f"eta={self.eta} is ignored for method {self.method.value}; "
                "only the boot step is stochastic",
                stacklevel=2,
            )
        order = _ORDER.get(self.method)
        if order is not None and self.grid.n_steps < order:
            raise InvalidGridParams(
                f"{self.method.value} needs at least {order} steps, got {self.grid.n_steps}"
            )


@dataclass
class Trajectory:
    """States (t, x) from t_N down to t_0, the boot noise, and the call count."""

    states: list[tuple[float, np.ndarray]]
    boot_noise: np.ndarray
    predictor_calls: int

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1][1]


# ---------------------------------------------------------------------------
# counter-based noise
# ---------------------------------------------------------------------------


@functools.lru_cache(maxsize=256)
def _philox_key(seed: int) -> tuple[int, int]:
    k = np.random.SeedSequence(seed).generate_state(2, np.uint64)
    return (int(k[0]), int(k[1]))


def _noise(seed: int, tag: int, step: int, chunk: int, shape: tuple[int, ...]) -> np.ndarray:
    bg = np.random.Philox(counter=[0, step, chunk, tag], key=_philox_key(seed))
    return np.random.Generator(bg).standard_normal(shape)


@dataclass(frozen=True)
class _GridCoeffs:
    """Bridge coefficients tabulated at every grid time; lam[N] = −inf."""

    times: tuple[float, ...]
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    lam: np.ndarray

    @classmethod
    def build(cls, schedule: NoiseSchedule, grid: TimeGrid) -> "_GridCoeffs":
        if not math.isclose(grid.t_max, schedule.horizon, rel_tol=0.0, abs_tol=0.0):
            raise InvalidGridParams(
                f"grid t_max={grid.t_max} must equal the schedule horizon {schedule.horizon}"
            )
        ks = [coeffs(schedule, t) for t in grid.times]
        return cls(
            times=grid.times,
            a=np.array([k.a for k in ks]),
            b=np.array([k.b for k in ks]),
            c=np.array([k.c for k in ks]),
            lam=np.array([k.lam for k in ks]),
        )


# ---------------------------------------------------------------------------
# elementary steps
# ---------------------------------------------------------------------------


def boot_step(
    schedule: NoiseSchedule,
    predictor,
    xT: np.ndarray,
    t_target: float,
    eps: np.ndarray,
) -> np.ndarray:
    """Stochastic first step from t = T down to ``t_target``.

    Returns a x_T + b x̂_T + c ε at t_target, where x̂_T is the predictor
    evaluated at the endpoint itself.
    """
    if not t_target < schedule.horizon:
        raise InitialStepSingularity(f"boot target {t_target} must lie below T={schedule.horizon}")
    xT = np.asarray(xT, dtype=float)
    k = coeffs(schedule, t_target)
    x_hat = predictor.predict(xT, schedule.horizon, xT)
    return k.a * xT + k.b * x_hat + k.c * np.asarray(eps, dtype=float)


def _implicit_update(a_n, b_n, c_n, a_m, b_m, c_m, rho_n, x_next, xT, x_hat):
    root = math.sqrt(max(c_n * c_n - rho_n * rho_n, 0.0))
    return a_n * xT + b_n * x_hat + root * (x_next - a_m * xT - b_m * x_hat) / c_m


def dbim_step(
    schedule: NoiseSchedule,
    rho_n: float,
    x_next: np.ndarray,
    xT: np.ndarray,
    x_hat: np.ndarray,
    t_n: float,
    t_next: float,
    eps: np.ndarray | None = None,
) -> np.ndarray:
    """One implicit update from t_{n+1} down to t_n given the prediction x̂.

    With ``eps`` omitted the conditional mean is returned; otherwise the
    ρ_n-scaled noise is added.  The step leaving t = T is singular
    (c_{t_{n+1}} = 0) and must go through :func:`boot_step` instead.
    """
    if t_next >= schedule.horizon:
        raise InitialStepSingularity(
            f"step from t={t_next} >= T is singular; use boot_step for the initial step"
        )
    kn = coeffs(schedule, t_n)
    km = coeffs(schedule, t_next)
    if rho_n > kn.c * (1.0 + 1e-12):
        raise InvalidGridParams(f"rho_n={rho_n} exceeds c_t={kn.c}")
    out = _implicit_update(
        kn.a, kn.b, kn.c, km.a, km.b, km.c, rho_n,
        np.asarray(x_next, dtype=float), np.asarray(xT, dtype=float),
        np.asarray(x_hat, dtype=float),
    )
    if eps is not None and rho_n > 0.0:
        out = out + rho_n * np.asarray(eps, dtype=float)
    return out


# ---------------------------------------------------------------------------
# exponential-integrator pieces
# ---------------------------------------------------------------------------


def _phi1(h: float) -> float:
    return -math.expm1(-h)


def _phi2(h: float) -> float:
    if h < _SMALL_H:
        return h * h / 2.0 - h ** 3 / 6.0 + h ** 4 / 24.0
    return h - 1.0 + math.exp(-h)


def _phi3(h: float) -> float:
    if h < _SMALL_H:
        return h ** 3 / 6.0 - h ** 4 / 24.0 + h ** 5 / 120.0
    return h * h / 2.0 - h + 1.0 - math.exp(-h)


def taylor_integral(
    order: int,
    lam_s: float,
    lam_t: float,
    x_hat: np.ndarray,
    x_hat_d1: np.ndarray,
    x_hat_d2: np.ndarray | None = None,
) -> np.ndarray:
    """Approximate ∫ e^λ x̂(λ) dλ from λ_t up to λ_s by a Taylor step.

    Order 2 uses the value and first λ-derivative of the prediction; order 3
    adds the second derivative.  The weights 1−e⁻ʰ, h−1+e⁻ʰ and
    h²/2−h+1−e⁻ʰ are evaluated by series below h = 1e-4 to avoid
    cancellation.
    """
    h = lam_s - lam_t
    if not h > 0.0:
        raise NonpositiveStep(f"need lam_s > lam_t, got h={h}")
    if order not in (2, 3):
        raise InvalidGridParams(f"order must be 2 or 3, got {order}")
    scale = math.exp(lam_s)
    out = _phi1(h) * np.asarray(x_hat, dtype=float) + _phi2(h) * np.asarray(x_hat_d1, dtype=float)
    if order == 3:
        if x_hat_d2 is None:
            raise InvalidGridParams("order 3 requires x_hat_d2")
        out = out + _phi3(h) * np.asarray(x_hat_d2, dtype=float)
    return scale * out


def _fd_first(lam_t: float, xh_t: np.ndarray, lam_u: float, xh_u: np.ndarray) -> np.ndarray:
    """(x̂_t − x̂_u)/h₁, with a unit effective gap against the boot entry.

    Toward the pinned endpoint every bridge prediction behaves as
    x̂(λ) = x̂_T + e^λ ψ(λ) with ψ smooth, so as the history point recedes
    to λ = −inf the consistent limit of the divided difference is
    x̂_t − x̂_T itself (relative error O(e^{2λ_t})), not zero.
    """
    if lam_u == -math.inf:
        return xh_t - xh_u
    return (xh_t - xh_u) / (lam_t - lam_u)


def _fd_pair(
    lam_t: float, xh_t: np.ndarray,
    lam_u1: float, xh_u1: np.ndarray,
    lam_u2: float, xh_u2: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Divided-difference estimates of the first two λ-derivatives.

    With the older history point at λ = −inf (the boot prediction) the pair
    degenerates continuously to the one-point estimate and zero curvature.
    """
    h1 = lam_t - lam_u1
    d1_near = (xh_t - xh_u1) / h1
    if lam_u2 == -math.inf:
        return d1_near, np.zeros_like(xh_t)
    h2 = lam_u1 - lam_u2
    d1_far = (xh_u1 - xh_u2) / h2
    d1 = (d1_near * (2.0 * h1 + h2) - d1_far * h1) / (h1 + h2)
    d2 = 2.0 * (d1_near - d1_far) / (h1 + h2)
    return d1, d2


# ---------------------------------------------------------------------------
# drifts
# ---------------------------------------------------------------------------


def drift_dbim(schedule: NoiseSchedule, predictor, x: np.ndarray, t: float, xT: np.ndarray) -> np.ndarray:
    """Continuous-time limit drift of the deterministic implicit sampler.

    Uses the closed forms c'/c = f + g²/σ² − g²/(2c²),
    a' − a c'/c = (g²/2c²) a and b' − b c'/c = −(g²/2c²) b.
    """
    k = coeffs(schedule, t)
    if k.c == 0.0:
        raise DegenerateCoefficient(f"drift undefined at t={t} where c=0")
    x = np.asarray(x, dtype=float)
    xT = np.asarray(xT, dtype=float)
    f = schedule.f(t)
    g2 = schedule.g2(t)
    half = g2 / (2.0 * k.c * k.c)
    c_ratio = f + g2 / schedule.sigma2(t) - half
    x_hat = predictor.predict(x, t, xT)
    return c_ratio * x + half * k.a * xT - half * k.b * x_hat


def _h_transform_grad(schedule: NoiseSchedule, k, x: np.ndarray, t: float, xT: np.ndarray) -> np.ndarray:
    """∇ log q_{T|t}(x_T | x_t) = −a ((α_T/α_t) x − x_T)/c²."""
    alpha_ratio = math.exp(schedule.log_alpha(schedule.horizon) - schedule.log_alpha(t))
    return -k.a * (alpha_ratio * x - xT) / (k.c * k.c)


def drift_pfode(schedule: NoiseSchedule, predictor, x: np.ndarray, t: float, xT: np.ndarray) -> np.ndarray:
    """Probability-flow ODE drift assembled from its score and pinning pieces.

    Independently coded from :func:`drift_dbim`:
    f x − g² (½ s(x) − ∇ log q_{T|t}) with the score obtained from the data
    predictor.
    """
    k = coeffs(schedule, t)
    if k.c == 0.0:
        raise DegenerateCoefficient(f"drift undefined at t={t} where c=0")
    x = np.asarray(x, dtype=float)
    xT = np.asarray(xT, dtype=float)
    x_hat = predictor.predict(x, t, xT)
    score = score_from_predictor(schedule, x, t, xT, x_hat)
    h_grad = _h_transform_grad(schedule, k, x, t, xT)
    return schedule.f(t) * x - schedule.g2(t) * (0.5 * score - h_grad)


def _drift_sde(schedule: NoiseSchedule, predictor, x: np.ndarray, t: float, xT: np.ndarray) -> np.ndarray:
    """Reverse-SDE drift: f x − g² (s(x) − ∇ log q_{T|t})."""
    k = coeffs(schedule, t)
    x_hat = predictor.predict(x, t, xT)
    score = score_from_predictor(schedule, x, t, xT, x_hat)
    h_grad = _h_transform_grad(schedule, k, x, t, xT)
    return schedule.f(t) * x - schedule.g2(t) * (score - h_grad)


# ---------------------------------------------------------------------------
# batched engine
# ---------------------------------------------------------------------------


def _chunk_dbim1(gc, rhos, schedule, predictor, xT, seed, chunk, n_rows, record):
    d = xT.shape[0]
    N = len(gc.times) - 1
    eps_boot = _noise(seed, _BOOT_TAG, 0, chunk, (n_rows, d))
    x = gc.a[N - 1] * xT + gc.b[N - 1] * predictor.predict(xT, gc.times[N], xT) + gc.c[N - 1] * eps_boot
    calls = 1
    states = [x.copy()] if record else None
    for n in range(N - 2, -1, -1):
        x_hat = predictor.predict(x, gc.times[n + 1], xT)
        calls += 1
        x = _implicit_update(
            gc.a[n], gc.b[n], gc.c[n], gc.a[n + 1], gc.b[n + 1], gc.c[n + 1],
            rhos[n], x, xT, x_hat,
        )
        if rhos[n] > 0.0:
            x = x + rhos[n] * _noise(seed, _STEP_TAG, n, chunk, (n_rows, d))
        if record:
            states.append(x.copy())
    return x, eps_boot, calls, states


def _chunk_dbim_high(gc, order, schedule, predictor, xT, seed, chunk, n_rows, record):
    d = xT.shape[0]
    N = len(gc.times) - 1
    eps_boot = _noise(seed, _BOOT_TAG, 0, chunk, (n_rows, d))
    x_hat_T = predictor.predict(xT, gc.times[N], xT)
    x = gc.a[N - 1] * xT + gc.b[N - 1] * np.broadcast_to(x_hat_T, (n_rows, d)) + gc.c[N - 1] * eps_boot
    calls = 1
    history: dict[int, np.ndarray] = {N: np.broadcast_to(x_hat_T, (n_rows, d)).copy()}
    states = [x.copy()] if record else None
    for i in range(N - 1, 0, -1):
        lam_s, lam_t = gc.lam[i - 1], gc.lam[i]
        x_hat = predictor.predict(x, gc.times[i], xT)
        calls += 1
        history[i] = x_hat
        if order == 2 or i == N - 1:
            integral = taylor_integral(
                2, lam_s, lam_t, x_hat,
                _fd_first(lam_t, x_hat, gc.lam[i + 1], history[i + 1]),
            )
        else:
            d1, d2 = _fd_pair(
                lam_t, x_hat,
                gc.lam[i + 1], history[i + 1],
                gc.lam[i + 2], history[i + 2],
            )
            integral = taylor_integral(3, lam_s, lam_t, x_hat, d1, d2)
        c_ratio = gc.c[i - 1] / gc.c[i]
        x = c_ratio * x + (gc.a[i - 1] - c_ratio * gc.a[i]) * xT + gc.c[i - 1] * integral
        if record:
            states.append(x.copy())
    return x, eps_boot, calls, states


def _chunk_baseline(gc, method, schedule, predictor, xT, seed, chunk, n_rows, record):
    d = xT.shape[0]
    N = len(gc.times) - 1
    eps_boot = _noise(seed, _BOOT_TAG, 0, chunk, (n_rows, d))
    x = gc.a[N - 1] * xT + gc.b[N - 1] * predictor.predict(xT, gc.times[N], xT) + gc.c[N - 1] * eps_boot
    calls = 1
    states = [x.copy()] if record else None
    for i in range(N - 1, 0, -1):
        t_hi, t_lo = gc.times[i], gc.times[i - 1]
        dt = t_lo - t_hi
        if method is Method.PF_ODE_EULER:
            x = x + dt * drift_pfode(schedule, predictor, x, t_hi, xT)
            calls += 1
        elif method is Method.PF_ODE_HEUN:
            v1 = drift_pfode(schedule, predictor, x, t_hi, xT)
            x_pred = x + dt * v1
            v2 = drift_pfode(schedule, predictor, x_pred, t_lo, xT)
            x = x + 0.5 * dt * (v1 + v2)
            calls += 2
        else:
            v = _drift_sde(schedule, predictor, x, t_hi, xT)
            g = math.sqrt(schedule.g2(t_hi))
            xi = _noise(seed, _STEP_TAG, i, chunk, (n_rows, d))
            x = x + dt * v + g * math.sqrt(-dt) * xi
            calls += 1
        if record:
            states.append(x.copy())
    return x, eps_boot, calls, states


def _run_chunk(config, gc, schedule, predictor, xT, chunk, n_rows, record):
    if config.method is Method.DBIM1:
        rhos = make_rhos(schedule, config.grid, config.eta).rhos
        return _chunk_dbim1(gc, rhos, schedule, predictor, xT, config.seed, chunk, n_rows, record)
    if config.method in _ORDER:
        return _chunk_dbim_high(
            gc, _ORDER[config.method], schedule, predictor, xT, config.seed, chunk, n_rows, record
        )
    return _chunk_baseline(gc, config.method, schedule, predictor, xT, config.seed, chunk, n_rows, record)


def sample_batch(
    config: SamplerConfig,
    schedule: NoiseSchedule,
    predictor,
    xT: np.ndarray,
    n_traj: int,
    n_threads: int = 1,
    record: bool = False,
):
    """Run ``n_traj`` trajectories of the configured sampler.

    Returns ``(terminal, boot_noise, calls_per_traj)`` with shapes
    (n_traj, d) and, when ``record`` is set, additionally the full state
    stack of shape (N, n_traj, d) over grid times below T.  Trajectories
    are processed in fixed-size chunks whose noise is keyed by
    (seed, step, chunk), so results are identical for any thread count.
    """
    xT = np.asarray(xT, dtype=float)
    gc = _GridCoeffs.build(schedule, config.grid)
    chunks = [(ci, min(_CHUNK, n_traj - ci * _CHUNK)) for ci in range((n_traj + _CHUNK - 1) // _CHUNK)]

    def work(item):
        ci, rows = item
        return _run_chunk(config, gc, schedule, predictor, xT, ci, rows, record)

    if n_threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(work, chunks))
    else:
        results = [work(item) for item in chunks]

    terminal = np.concatenate([r[0] for r in results], axis=0)
    boot = np.concatenate([r[1] for r in results], axis=0)
    calls = results[0][2]
    if record:
        stacked = np.concatenate([np.stack(r[3], axis=0) for r in results], axis=1)
        return terminal, boot, calls, stacked
    return terminal, boot, calls


def _single(config, schedule, predictor, xT) -> Trajectory:
    xT = np.asarray(xT, dtype=float)
    gc = _GridCoeffs.build(schedule, config.grid)
    terminal, boot, calls, states = _run_chunk(config, gc, schedule, predictor, xT, 0, 1, True)
    N = config.grid.n_steps
    path = [(config.grid.times[N], xT.copy())]
    for i, s in enumerate(states):
        path.append((config.grid.times[N - 1 - i], s[0]))
    return Trajectory(states=path, boot_noise=boot[0], predictor_calls=calls)


def run_dbim1(config: SamplerConfig, schedule: NoiseSchedule, predictor, xT) -> Trajectory:
    """Boot step followed by N−1 first-order implicit updates down to t_0."""
    if config.method is not Method.DBIM1:
        raise InvalidGridParams(f"run_dbim1 requires method dbim1, got {config.method.value}")
    return _single(config, schedule, predictor, xT)


def run_dbim_high(config: SamplerConfig, schedule: NoiseSchedule, predictor, xT) -> Trajectory:
    """Boot step followed by order-2/3 exponential-integrator updates.

    Derivative histories start at the boot prediction (taken at t = T,
    λ = −inf) and never cross the boot step; the third-order branch falls
    back to the two-point estimate on the first post-boot step.
    """
    if config.method not in _ORDER:
        raise InvalidGridParams(f"run_dbim_high requires dbim2 or dbim3, got {config.method.value}")
    return _single(config, schedule, predictor, xT)


def run_baseline(config: SamplerConfig, schedule: NoiseSchedule, predictor, xT) -> Trajectory:
    """Euler/Heun on the flow ODE or Euler–Maruyama on the reverse SDE.

    Baselines leave t = T through the boot step as well: the raw drifts are
    singular at the pinned endpoint.  The boot counts toward the evaluation
    budget.
    """
    if config.method is Method.DBIM1 or config.method in _ORDER:
        raise InvalidGridParams(f"run_baseline got non-baseline method {config.method.value}")
    return _single(config, schedule, predictor, xT)


def run_sampler(config: SamplerConfig, schedule: NoiseSchedule, predictor, xT) -> Trajectory:
    """Dispatch on the configured method."""
    if config.method is Method.DBIM1:
        return run_dbim1(config, schedule, predictor, xT)
    if config.method in _ORDER:
        return run_dbim_high(config, schedule, predictor, xT)
    return run_baseline(config, schedule, predictor, xT)


# ---------------------------------------------------------------------------
# deterministic encoding / decoding / interpolation
# ---------------------------------------------------------------------------


def decode(
    schedule: NoiseSchedule,
    predictor,
    eps: np.ndarray,
    xT: np.ndarray,
    grid: TimeGrid,
) -> np.ndarray:
    """Deterministic (η = 0) generation from a given booting noise."""
    xT = np.asarray(xT, dtype=float)
    gc = _GridCoeffs.build(schedule, grid)
    N = grid.n_steps
    x = gc.a[N - 1] * xT + gc.b[N - 1] * predictor.predict(xT, grid.times[N], xT) + gc.c[N - 1] * np.asarray(eps, dtype=float)
    for n in range(N - 2, -1, -1):
        x_hat = predictor.predict(x, gc.times[n + 1], xT)
        x = _implicit_update(
            gc.a[n], gc.b[n], gc.c[n], gc.a[n + 1], gc.b[n + 1], gc.c[n + 1], 0.0, x, xT, x_hat
        )
    return x


def encode(
    schedule: NoiseSchedule,
    predictor,
    x0: np.ndarray,
    xT: np.ndarray,
    grid: TimeGrid,
    consistency_tol: float = 1e-2,
) -> np.ndarray:
    """Recover the booting noise whose deterministic decode reproduces ``x0``.

    Each deterministic update is affine in the unknown upper state once the
    predictor's affine map at the upper time is known, so the recursion is
    inverted exactly step by step from t_0 up to t_{N−1}; the booting noise
    is then read off the boot step.  Requires a predictor exposing
    ``linearize`` (all predictors in :mod:`bridgekit.oracle` do).

    Inputs the predictor itself contradicts (its time-t_0 posterior mean
    maps x0 elsewhere, as for x0 off the support of a degenerate problem)
    fail the consistency residual check.
    """
    if not hasattr(predictor, "linearize"):
        raise BridgekitError("encode requires a predictor with a linearize(t, xT) method")
    x = np.asarray(x0, dtype=float).copy()
    xT = np.asarray(xT, dtype=float)
    gc = _GridCoeffs.build(schedule, grid)
    N = grid.n_steps

    residual = np.linalg.norm(predictor.predict(x, grid.times[0], xT) - x)
    if residual > consistency_tol * max(1.0, float(np.linalg.norm(x))):
        raise ReconstructionInconsistent(
            f"x0 is inconsistent with the predictor posterior (residual {residual:.3e})"
        )

    eye = np.eye(x.shape[-1])
    for n in range(N - 1):
        kappa = gc.c[n] / gc.c[n + 1]
        gain = gc.b[n] - kappa * gc.b[n + 1]
        P, q = predictor.linearize(grid.times[n + 1], xT)
        A = kappa * eye + gain * P
        rhs = x - gc.a[n] * xT + kappa * gc.a[n + 1] * xT - gain * q
        try:
            x = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(f"encode step {n} -> {n + 1} is not invertible") from exc

    x_hat_T = predictor.predict(xT, grid.times[N], xT)
    c_boot = gc.c[N - 1]
    if c_boot == 0.0:
        raise DegenerateCoefficient("boot coefficient c vanished; cannot recover noise")
    return (x - gc.a[N - 1] * xT - gc.b[N - 1] * x_hat_T) / c_boot


def slerp_interpolate(eps_a: np.ndarray, eps_b: np.ndarray, w: float) -> np.ndarray:
    """Spherical linear interpolation between two latent noises."""
    eps_a = np.asarray(eps_a, dtype=float)
    eps_b = np.asarray(eps_b, dtype=float)
    if eps_a.shape != eps_b.shape:
        raise DimensionMismatch(f"shapes {eps_a.shape} != {eps_b.shape}")
    na = float(np.linalg.norm(eps_a))
    nb = float(np.linalg.norm(eps_b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("slerp endpoints must be nonzero")
    if w == 0.0:
        return eps_a.copy()
    if w == 1.0:
        return eps_b.copy()
    cos = float(np.clip(np.dot(eps_a, eps_b) / (na * nb), -1.0, 1.0))
    theta = math.acos(cos)
    if theta < 1e-12:
        return (1.0 - w) * eps_a + w * eps_b
    s = math.sin(theta)
    return (math.sin((1.0 - w) * theta) * eps_a + math.sin(w * theta) * eps_b) / s
