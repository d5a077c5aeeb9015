"""Symmetric alpha-stable noise: samplers, increments and stationary responses.

All randomness in the package flows through :class:`SeededStream`, which maps a
``(seed, stream_id)`` pair onto an independent numpy ``Generator``.  A stream
has numbered children so that one realization can carry several independent
pieces (the infinite past of the noise and its future on ``[0, T]``) without
any bookkeeping at the call site.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.signal import lfilter

__all__ = [
    "STATIONARY",
    "FORWARD",
    "StableNoiseSpec",
    "SeededStream",
    "StationaryPath",
    "sample_stable",
    "increment",
    "simulate_stationary",
    "spectral_abscissa",
    "default_burn_in",
    "hill_estimator",
    "empirical_cf",
    "linear_recursion",
]

# child indices of a SeededStream: the stationary driving path of the reduced
# system, and the forward increments of the full system
STATIONARY = 0
FORWARD = 1

_U64 = 2**64


@dataclass(frozen=True)
class StableNoiseSpec:
    """Index ``alpha``, intensity ``sigma`` and dimension of the fast noise."""

    alpha: float
    sigma: float = 0.0
    dim: int = 1

    def __post_init__(self) -> None:
        if not (1.0 < float(self.alpha) < 2.0):
            raise ValueError(f"alpha must lie in (1, 2), got {self.alpha}")
        if not (float(self.sigma) >= 0.0) or not np.isfinite(self.sigma):
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim}")


@dataclass(frozen=True)
class SeededStream:
    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if not (0 <= int(self.seed) < _U64):
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")
        if int(self.stream_id) < 0:
            raise ValueError(f"stream_id must be non-negative, got {self.stream_id}")

    def rng(self, child: int = STATIONARY) -> np.random.Generator:
        ss = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id), int(child)))
        return np.random.Generator(np.random.PCG64(ss))

    def shifted(self, offset: int) -> "SeededStream":
        return SeededStream(self.seed, self.stream_id + offset)

    def as_dict(self) -> dict:
        return {"seed": int(self.seed), "stream_id": int(self.stream_id)}


RandomSource = Union[SeededStream, np.random.Generator]


def _generator(source: RandomSource, child: int = STATIONARY) -> np.random.Generator:
    if isinstance(source, np.random.Generator):
        return source
    return source.rng(child)


@dataclass(frozen=True)
class StationaryPath:
    """Values of a stationary linear response on a uniform grid.

    ``values`` has shape ``(len(t_grid), n)``.  ``burn_in`` is the length of the
    warm-up interval that replaced the infinite history.
    """

    t_grid: np.ndarray
    values: np.ndarray
    burn_in: float

    def __post_init__(self) -> None:
        if len(self.values) != len(self.t_grid):
            raise ValueError("values and t_grid must have the same length")
        if not self.burn_in > 0:
            raise ValueError("burn_in must be positive")

    @property
    def dt(self) -> float:
        # from the whole span: adjacent differences far from 0 carry rounding error
        return float((self.t_grid[-1] - self.t_grid[0]) / (len(self.t_grid) - 1))

    def index(self, t: float) -> int:
        """Index of the last grid point at or before ``t`` (cadlag lookup)."""
        k = int(np.floor((t - self.t_grid[0]) / self.dt + 1e-9))
        if k < 0 or k >= len(self.t_grid):
            raise IndexError(f"time {t} outside the path window")
        return k

    def at(self, t: float) -> np.ndarray:
        return self.values[self.index(t)]

    def negated(self) -> "StationaryPath":
        return StationaryPath(self.t_grid, -self.values, self.burn_in)


def sample_stable(spec: StableNoiseSpec, stream: RandomSource, count: int, child: int = STATIONARY) -> np.ndarray:
    """Standard symmetric alpha-stable variates, shape ``(count, spec.dim)``.

    Chambers-Mallows-Stuck transform; each coordinate has characteristic
    function ``exp(-|u|**alpha)`` and coordinates are independent.
    """
    if int(count) != count or count < 1:
        raise ValueError(f"count must be a positive integer, got {count}")
    a = float(spec.alpha)
    rng = _generator(stream, child)
    shape = (int(count), int(spec.dim))
    v = rng.uniform(-0.5 * np.pi, 0.5 * np.pi, size=shape)
    w = rng.standard_exponential(size=shape)
    return (
        np.sin(a * v)
        / np.cos(v) ** (1.0 / a)
        * (np.cos((1.0 - a) * v) / w) ** ((1.0 - a) / a)
    )


def increment(
    spec: StableNoiseSpec, dt: float, stream: RandomSource, count: int = 1, child: int = STATIONARY
) -> np.ndarray:
    """``count`` independent increments of the unit-intensity process over ``dt``."""
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return dt ** (1.0 / spec.alpha) * sample_stable(spec, stream, count, child)


def spectral_abscissa(A: np.ndarray) -> float:
    return float(np.max(np.linalg.eigvals(np.atleast_2d(A)).real))


def default_burn_in(A: np.ndarray, tol: float = 1e-6) -> float:
    """Burn-in length with ``exp(-gamma * burn_in) < tol``."""
    gamma = -spectral_abscissa(A)
    if gamma <= 0:
        raise ValueError("A must have all eigenvalues in the open left half-plane")
    return float(np.log(1.0 / tol) / gamma)


def simulate_stationary(
    A: np.ndarray,
    spec: StableNoiseSpec,
    t_grid: np.ndarray,
    stream: RandomSource,
    *,
    burn_in: float | None = None,
    dt: float | None = None,
    eps: float | None = None,
    increments: np.ndarray | None = None,
    child: int = STATIONARY,
) -> StationaryPath:
    """Stationary solution of ``z' = A z + L'`` observed on ``t_grid``.

    Left-point Euler-Maruyama started from zero at ``t_grid[0] - burn_in``.
    ``t_grid`` must be uniform with a spacing that is a multiple of ``dt``
    (``dt`` defaults to that spacing).  With ``eps`` the scaled response
    ``z' = (A/eps) z + eps**(-1/alpha) L'`` is produced instead.

    ``increments`` overrides the sampled unit increments; it must have shape
    ``(n_steps, dim)`` where ``n_steps`` is the total number of Euler steps.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    n = A.shape[0]
    if A.shape != (n, n) or n != spec.dim:
        raise ValueError("A must be square with size equal to spec.dim")
    t_grid = np.asarray(t_grid, dtype=float)
    if t_grid.ndim != 1 or len(t_grid) < 2 or np.any(np.diff(t_grid) <= 0):
        raise ValueError("t_grid must be strictly increasing with at least two points")
    spacing = float(t_grid[1] - t_grid[0])
    if not np.allclose(np.diff(t_grid), spacing, rtol=1e-9, atol=1e-12):
        raise ValueError("t_grid must be uniformly spaced")

    A_eff = A / eps if eps is not None else A
    if spectral_abscissa(A_eff) >= 0:
        raise ValueError("A is not stable: an eigenvalue has non-negative real part")
    if burn_in is None:
        burn_in = default_burn_in(A_eff)
    if not burn_in > 0:
        raise ValueError(f"burn_in must be positive, got {burn_in}")
    if dt is None:
        dt = spacing
    ratio = spacing / dt
    stride = int(round(ratio))
    if stride < 1 or abs(ratio - stride) > 1e-9 * max(1.0, ratio):
        raise ValueError("t_grid spacing must be an integer multiple of dt")
    if np.max(np.abs(1.0 + dt * np.linalg.eigvals(A_eff))) >= 1.0:
        raise ValueError(f"dt={dt} is too large for a stable Euler step with this A")

    n_burn = int(np.ceil(burn_in / dt - 1e-9))
    n_steps = n_burn + stride * (len(t_grid) - 1)
    if increments is None:
        scale = dt ** (1.0 / spec.alpha)
        if eps is not None:
            scale *= eps ** (-1.0 / spec.alpha)
        dL = scale * sample_stable(spec, stream, n_steps, child)
    else:
        dL = np.asarray(increments, dtype=float)
        if dL.shape != (n_steps, n):
            raise ValueError(f"increments must have shape {(n_steps, n)}, got {dL.shape}")

    z = np.zeros((n_steps + 1, n))
    z[1:] = linear_recursion(np.eye(n) + dt * A_eff, dL)
    out = z[n_burn::stride]
    return StationaryPath(t_grid=t_grid, values=np.ascontiguousarray(out), burn_in=n_burn * dt)


def linear_recursion(M: np.ndarray, forcing: np.ndarray) -> np.ndarray:
    """Run ``z[k+1] = M z[k] + forcing[k]`` from ``z[0] = 0``; returns ``z[1:]``.

    ``forcing`` has shape ``(steps, ..., n)``.  Diagonal ``M`` goes through
    ``scipy.signal.lfilter`` one coordinate at a time; anything else loops.
    """
    M = np.atleast_2d(M)
    forcing = np.asarray(forcing, dtype=float)
    if np.count_nonzero(M - np.diag(np.diag(M))) == 0:
        out = np.empty_like(forcing)
        for i, m in enumerate(np.diag(M)):
            out[..., i] = lfilter([1.0], [1.0, -m], forcing[..., i], axis=0)
        return out
    out = np.empty_like(forcing)
    z = np.zeros(forcing.shape[1:])
    for k in range(forcing.shape[0]):
        z = np.einsum("ij,...j->...i", M, z) + forcing[k]
        out[k] = z
    return out


def hill_estimator(samples: np.ndarray, tail_fraction: float = 1e-3) -> float:
    """Hill estimate of the tail index of ``|samples|`` from the upper order statistics."""
    x = np.sort(np.abs(np.ravel(samples)))[::-1]
    k = int(tail_fraction * len(x))
    if k < 2:
        raise ValueError("too few samples for the requested tail fraction")
    return float(1.0 / np.mean(np.log(x[:k] / x[k])))


def empirical_cf(samples: np.ndarray, u: float) -> float:
    """Real part of the empirical characteristic function (the law is symmetric)."""
    return float(np.mean(np.cos(u * np.ravel(samples))))
