"""Analytic Gaussian bridge problems and exact data predictors.

A problem fixes the conditional law of the clean state given the endpoint,

    x₀ | x_T ~ N(m(x_T), S),      m(x_T) = M x_T + m₀,

with affine m so that every deterministic sampler map stays affine and all
pushforward distributions remain exactly Gaussian.  Conditioning the bridge
kernel on this model gives closed forms for the posterior mean

    E[x₀ | x_t = x, x_T] = m + b_t S (b_t² S + c_t² I)⁻¹ (x − a_t x_T − b_t m),

the bridge marginal N(a_t x_T + b_t m, b_t² S + c_t² I), and the bridge
score: everything a sampler would normally obtain from a trained network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from .errors import DegenerateCoefficient, DimensionMismatch, InvalidGridParams, SingularSystem
from .schedule import NoiseSchedule, coeffs

_MAX_DIM = 64
_JITTER = 1e-10


@dataclass(frozen=True)
class GaussianBridgeProblem:
    """Jointly Gaussian endpoint model x₀ | x_T ~ N(M x_T + m₀, S)."""

    mix: np.ndarray
    offset: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mix = np.atleast_2d(np.asarray(self.mix, dtype=float))
        offset = np.atleast_1d(np.asarray(self.offset, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        d = offset.shape[0]
        if d > _MAX_DIM:
            raise InvalidGridParams(f"dimension {d} exceeds supported maximum {_MAX_DIM}")
        if mix.shape != (d, d) or cov.shape != (d, d):
            raise DimensionMismatch(
                f"mix {mix.shape} and cov {cov.shape} must be ({d}, {d})"
            )
        if np.max(np.abs(cov - cov.T), initial=0.0) > 1e-12:
            raise InvalidGridParams("cov must be symmetric to 1e-12")
        eigvals = np.linalg.eigvalsh(cov)
        if eigvals.min() < -1e-12:
            raise InvalidGridParams(f"cov has eigenvalue {eigvals.min()} < -1e-12")
        object.__setattr__(self, "mix", mix)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.offset.shape[0]

    @classmethod
    def scalar(cls, mix: float = 0.0, offset: float = 0.0, var: float = 1.0) -> "GaussianBridgeProblem":
        return cls(mix=np.array([[mix]]), offset=np.array([offset]), cov=np.array([[var]]))

    def mean_given_endpoint(self, xT: np.ndarray) -> np.ndarray:
        """m(x_T) = M x_T + m₀."""
        xT = np.asarray(xT, dtype=float)
        if xT.shape[-1] != self.dim:
            raise DimensionMismatch(f"xT dim {xT.shape[-1]} != {self.dim}")
        return xT @ self.mix.T + self.offset

    def sample_x0(self, xT: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n samples of x₀ | x_T; PSD-safe via eigendecomposition."""
        w, v = np.linalg.eigh(self.cov)
        root = v * np.sqrt(np.clip(w, 0.0, None))
        return self.mean_given_endpoint(xT) + rng.standard_normal((n, self.dim)) @ root.T


def marginal_at(
    problem: GaussianBridgeProblem, schedule: NoiseSchedule, t: float, xT: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact bridge marginal (mean, covariance) at time t given x_T."""
    k = coeffs(schedule, t)
    m = problem.mean_given_endpoint(xT)
    mean = k.a * np.asarray(xT, dtype=float) + k.b * m
    cov = k.b * k.b * problem.cov + k.c * k.c * np.eye(problem.dim)
    return mean, cov


def score_from_predictor(
    schedule: NoiseSchedule,
    x: np.ndarray,
    t: float,
    xT: np.ndarray,
    x_hat: np.ndarray,
) -> np.ndarray:
    """Bridge score implied by a data-predictor output: −(x − a x_T − b x̂)/c²."""
    k = coeffs(schedule, t)
    if k.c == 0.0:
        raise DegenerateCoefficient(f"score undefined at t={t} where c=0")
    x = np.asarray(x, dtype=float)
    return -(x - k.a * np.asarray(xT, dtype=float) - k.b * np.asarray(x_hat, dtype=float)) / (k.c * k.c)


class GaussianOracle:
    """Exact data predictor E[x₀ | x_t, x_T] for a Gaussian bridge problem.

    Deterministic and pure; accepts states of shape (d,) or batched (B, d).
    ``linearize`` exposes the affine map x ↦ P x + q of ``predict`` at a
    fixed (t, x_T), which the deterministic encoder inverts step by step.
    """

    def __init__(self, problem: GaussianBridgeProblem, schedule: NoiseSchedule):
        self.problem = problem
        self.schedule = schedule
        self._gain_cache: dict[tuple[float, float], np.ndarray] = {}

    def predict(self, x: np.ndarray, t: float, xT: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        xT = np.asarray(xT, dtype=float)
        if x.shape[-1] != self.problem.dim:
            raise DimensionMismatch(f"state dim {x.shape[-1]} != {self.problem.dim}")
        m = self.problem.mean_given_endpoint(xT)
        k = coeffs(self.schedule, t)
        if k.c == 0.0:
            # pinned endpoint: x carries no information beyond x_T
            return np.broadcast_to(m, x.shape).copy()
        gain = self._gain(k.b, k.c)
        residual = x - k.a * xT - k.b * m
        return m + residual @ gain.T

    def linearize(self, t: float, xT: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Affine decomposition predict(x) = P x + q at fixed (t, x_T)."""
        xT = np.asarray(xT, dtype=float)
        m = self.problem.mean_given_endpoint(xT)
        k = coeffs(self.schedule, t)
        if k.c == 0.0:
            return np.zeros((self.problem.dim,) * 2), m.copy()
        P = self._gain(k.b, k.c)
        q = m - P @ (k.a * xT + k.b * m)
        return P, q

    def _gain(self, b: float, c: float) -> np.ndarray:
        """b S (b² S + c² I)⁻¹ via Cholesky with jitter on S; cached per (b, c)."""
        cached = self._gain_cache.get((b, c))
        if cached is not None:
            return cached
        d = self.problem.dim
        S = self.problem.cov + _JITTER * np.eye(d)
        A = b * b * S + c * c * np.eye(d)
        try:
            chol = cho_factor(A)
        except LinAlgError as exc:
            raise SingularSystem(f"conditioning system singular at b={b}, c={c}") from exc
        # (A⁻¹ (bS))ᵀ = bS A⁻¹ by symmetry of A and S
        gain = cho_solve(chol, b * S).T
        if len(self._gain_cache) < 65536:
            self._gain_cache[(b, c)] = gain
        return gain


class PerturbedOracle:
    """Exact oracle plus a fixed bias of norm ``eps_bias`` in a seeded direction.

    Used to study how predictor error propagates through samplers; never in
    exactness checks.
    """

    def __init__(self, base: GaussianOracle, eps_bias: float, seed: int = 0):
        self.base = base
        direction = np.random.default_rng(seed).standard_normal(base.problem.dim)
        norm = np.linalg.norm(direction)
        self.bias = eps_bias * direction / norm if norm > 0 else direction
        self.problem = base.problem
        self.schedule = base.schedule

    def predict(self, x: np.ndarray, t: float, xT: np.ndarray) -> np.ndarray:
        return self.base.predict(x, t, xT) + self.bias

    def linearize(self, t: float, xT: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        P, q = self.base.linearize(t, xT)
        return P, q + self.bias
