"""Euler-Maruyama integration of the fast-slow system and of its reduction.

The full system is

    x' = (A x + f(x, y)) / eps + sigma * eps**(-1/alpha) * L'
    y' = B y + g(x, y, lambda)

The fast variable is advanced with ``substep_ratio`` substeps per slow step
while ``y`` is held fixed; ``y`` then takes one left-point Euler step.

Model callables are vectorized over leading axes: ``f(x, y)`` takes arrays of
shape ``(..., n)`` and ``(..., m)`` and returns ``(..., n)``; ``f_x`` returns
``(..., n, n)``, ``f_y`` returns ``(..., n, m)``, ``g`` and ``g_lambda`` return
``(..., m)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.linalg import expm

from .levy import FORWARD, SeededStream, StableNoiseSpec, sample_stable

log = logging.getLogger(__name__)

__all__ = [
    "ModelSpec",
    "IntegratorConfig",
    "TrajectorySet",
    "SimulationError",
    "RETRY_STRIDE",
    "propagator",
    "integrate_full",
    "integrate_reduced",
    "apply_transformation",
    "invert_transformation",
    "unit_noise_increments",
]

# stream_id offset between a path and its resampled replacement
RETRY_STRIDE = 1 << 40

Array = np.ndarray


class SimulationError(RuntimeError):
    """A path left the admissible region and could not be resampled."""

    def __init__(self, message: str, time: float | None = None, stream: SeededStream | None = None):
        super().__init__(message)
        self.time = time
        self.stream = stream


@dataclass(frozen=True)
class ModelSpec:
    A: Array
    B: Array
    f: Callable[[Array, Array], Array]
    g: Callable[[Array, Array, float], Array]
    f_x: Callable[[Array, Array], Array]
    f_y: Callable[[Array, Array], Array]
    g_lambda: Callable[[Array, Array, float], Array]
    L_f: float
    L_g: float
    K: float
    gamma: float
    beta: float
    Lambda: tuple[float, float]
    name: str = "custom"

    def __post_init__(self) -> None:
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        B = np.atleast_2d(np.asarray(self.B, dtype=float))
        if A.shape[0] != A.shape[1] or B.shape[0] != B.shape[1]:
            raise ValueError("A and B must be square matrices")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        lo, hi = (float(v) for v in self.Lambda)
        if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
            raise ValueError(f"Lambda must be a bounded nonempty interval, got {self.Lambda}")
        object.__setattr__(self, "Lambda", (lo, hi))
        for name in ("L_f", "L_g", "K", "gamma", "beta"):
            if not float(getattr(self, name)) >= 0:
                raise ValueError(f"{name} must be non-negative")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[0]

    @property
    def contraction_rate(self) -> float:
        """``gamma - K * L_f``; positive exactly when (H2) holds."""
        return float(self.gamma - self.K * self.L_f)

    def contains(self, lam: float) -> bool:
        lo, hi = self.Lambda
        return lo <= lam <= hi

    def with_constants(self, **changes) -> "ModelSpec":
        return replace(self, **changes)

    def constants(self) -> dict:
        return {
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "L_f": self.L_f,
            "L_g": self.L_g,
            "K": self.K,
            "gamma": self.gamma,
            "beta": self.beta,
            "Lambda": list(self.Lambda),
        }


@dataclass(frozen=True)
class IntegratorConfig:
    """Slow step ``dt``, horizon ``T``, scale ratio ``eps`` and fast substeps.

    ``substep_ratio=None`` picks the smallest ratio with ``dt_fast <= eps/10``.
    """

    dt: float = 1e-3
    T: float = 1.0
    eps: float = 0.01
    substep_ratio: int | None = None

    def __post_init__(self) -> None:
        if not self.dt > 0 or not self.T > 0:
            raise ValueError("dt and T must be positive")
        if not (0.0 < self.eps < 1.0):
            raise ValueError(f"eps must lie in (0, 1), got {self.eps}")
        steps = self.T / self.dt
        if abs(steps - round(steps)) > 1e-6 * max(1.0, steps):
            raise ValueError(f"T={self.T} is not a whole number of steps dt={self.dt}")
        if self.substep_ratio is None:
            ratio = max(1, int(np.ceil(10.0 * self.dt / self.eps - 1e-9)))
            object.__setattr__(self, "substep_ratio", ratio)
        elif int(self.substep_ratio) != self.substep_ratio or self.substep_ratio < 1:
            raise ValueError("substep_ratio must be a positive integer")
        if self.dt_fast > self.eps / 10.0 * (1.0 + 1e-9):
            raise ValueError(
                f"dt_fast={self.dt_fast:g} exceeds eps/10={self.eps / 10:g}; raise substep_ratio"
            )

    @property
    def dt_fast(self) -> float:
        return self.dt / self.substep_ratio

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt))

    @property
    def t_grid(self) -> Array:
        return self.dt * np.arange(self.n_steps + 1)


@dataclass
class TrajectorySet:
    """Paths sharing one time grid.

    ``y`` has shape ``(paths, len(t_grid), m)``; ``x`` is ``None`` unless the
    paths came from the full system.
    """

    t_grid: Array
    y: Array
    x: Array | None = None
    seeds: list[SeededStream] = field(default_factory=list)
    lambda_used: float = float("nan")
    aborted: int = 0

    def __post_init__(self) -> None:
        if self.y.ndim != 3 or self.y.shape[1] != len(self.t_grid):
            raise ValueError("y must have shape (paths, len(t_grid), m)")
        if self.x is not None and self.x.shape[:2] != self.y.shape[:2]:
            raise ValueError("x and y paths must share the grid")

    @property
    def n_paths(self) -> int:
        return self.y.shape[0]

    def slow_only(self) -> "TrajectorySet":
        return replace(self, x=None)

    def subsample(self, L_grid: int) -> "TrajectorySet":
        """Keep ``L_grid`` equally spaced grid points including both ends."""
        n = len(self.t_grid) - 1
        if L_grid < 2 or n % (L_grid - 1):
            raise ValueError(f"L_grid={L_grid} does not divide the {n} grid intervals")
        stride = n // (L_grid - 1)
        x = None if self.x is None else self.x[:, ::stride]
        return replace(self, t_grid=self.t_grid[::stride], y=self.y[:, ::stride], x=x)


def propagator(A: Array, t: float) -> Array:
    """``exp(A t)``: closed form for diagonal ``A``, scaling and squaring otherwise."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if np.count_nonzero(A - np.diag(np.diag(A))) == 0:
        return np.diag(np.exp(np.diag(A) * t))
    return expm(A * t)


def apply_transformation(x: Array, eta_value: Array, sigma: float) -> Array:
    """Random change of variables ``x -> x - sigma * eta``."""
    return np.asarray(x) - sigma * np.asarray(eta_value)


def invert_transformation(x_hat: Array, eta_value: Array, sigma: float) -> Array:
    return np.asarray(x_hat) + sigma * np.asarray(eta_value)


def _matvec(M: Array, v: Array) -> Array:
    # per-element arithmetic, independent of how many paths are batched
    return np.einsum("ij,...j->...i", M, v)


def unit_noise_increments(
    noise: StableNoiseSpec, cfg: IntegratorConfig, streams: Sequence[SeededStream]
) -> Array:
    """Fast-equation noise per substep for unit ``sigma``, shape ``(paths, steps, n)``.

    Each entry is ``eps**(-1/alpha) * dt_fast**(1/alpha) * S`` with ``S``
    standard symmetric stable, drawn from the FORWARD child of the stream.
    """
    scale = cfg.eps ** (-1.0 / noise.alpha) * cfg.dt_fast ** (1.0 / noise.alpha)
    count = cfg.n_steps * cfg.substep_ratio
    return np.stack([scale * sample_stable(noise, s, count, FORWARD) for s in streams])


def _check_preconditions(model: ModelSpec, lam: float) -> None:
    if not model.contains(lam):
        raise ValueError(f"lambda={lam} outside Lambda={model.Lambda}")
    if model.contraction_rate <= 0:
        raise ValueError(
            f"(H2) fails for the declared constants: gamma={model.gamma} <= K*L_f={model.K * model.L_f}"
        )
    if np.max(np.linalg.eigvals(model.A).real) >= 0:
        raise ValueError("(H1) fails: A has an eigenvalue with non-negative real part")


def _as_batch(v, paths: int, dim: int, name: str) -> Array:
    arr = np.asarray(v, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.shape == (dim,):
        return np.broadcast_to(arr, (paths, dim)).copy()
    if arr.shape == (paths, dim):
        return arr.copy()
    raise ValueError(f"{name} must have shape ({dim},) or ({paths}, {dim}), got {arr.shape}")


def _integrate_full_batch(model, lam, x0, y0, cfg, noise, streams, cap):
    P = len(streams)
    n, m = model.n, model.m
    dW = unit_noise_increments(noise, cfg, streams)
    sigma = noise.sigma
    N, sub = cfg.n_steps, cfg.substep_ratio
    dtf_over_eps = cfg.dt_fast / cfg.eps

    xs = np.empty((P, N + 1, n))
    ys = np.empty((P, N + 1, m))
    x, y = x0.copy(), y0.copy()
    xs[:, 0], ys[:, 0] = x, y
    abort_time = np.full(P, np.nan)
    alive = np.ones(P, dtype=bool)
    for k in range(N):
        x_left = x
        for s in range(sub):
            x = x + dtf_over_eps * (_matvec(model.A, x) + model.f(x, y)) + sigma * dW[:, k * sub + s]
        y = y + cfg.dt * (_matvec(model.B, y) + model.g(x_left, y, lam))
        bad = ~(np.all(np.isfinite(x), axis=1) & np.all(np.isfinite(y), axis=1))
        bad |= (np.max(np.abs(x), axis=1) > cap) | (np.max(np.abs(y), axis=1) > cap)
        newly = bad & alive
        if newly.any():
            abort_time[newly] = (k + 1) * cfg.dt
            alive &= ~newly
            x[newly] = 0.0
            y[newly] = 0.0
        xs[:, k + 1], ys[:, k + 1] = x, y
    return xs, ys, abort_time


def integrate_full(
    model: ModelSpec,
    lam: float,
    x0,
    y0,
    cfg: IntegratorConfig,
    noise: StableNoiseSpec,
    streams: SeededStream | Sequence[SeededStream],
    *,
    cap: float = 1e6,
    max_retries: int = 10,
) -> TrajectorySet:
    """Simulate the full fast-slow system, one path per stream.

    A path whose state becomes non-finite or exceeds ``cap`` in magnitude is
    discarded and redrawn from ``stream.shifted(RETRY_STRIDE * attempt)``; the
    number of discarded paths is reported in ``aborted``.
    """
    _check_preconditions(model, lam)
    if isinstance(streams, SeededStream):
        streams = [streams]
    streams = list(streams)
    if noise.dim != model.n:
        raise ValueError("noise dimension must match the fast dimension of the model")
    P = len(streams)
    x0 = _as_batch(x0, P, model.n, "x0")
    y0 = _as_batch(y0, P, model.m, "y0")

    xs, ys, abort_time = _integrate_full_batch(model, lam, x0, y0, cfg, noise, streams, cap)
    used = list(streams)
    aborted = 0
    pending = np.flatnonzero(np.isfinite(abort_time))
    attempt = 0
    while pending.size:
        aborted += pending.size
        for i in pending:
            log.warning(
                "path with stream %s aborted at t=%.6g (|state| > %g); resampling",
                used[i].as_dict(), abort_time[i], cap,
            )
        attempt += 1
        if attempt > max_retries:
            i = int(pending[0])
            raise SimulationError(
                f"path {i} still diverging after {max_retries} resamples (t={abort_time[i]:.6g})",
                time=float(abort_time[i]),
                stream=used[i],
            )
        retry = [streams[i].shifted(RETRY_STRIDE * attempt) for i in pending]
        rx, ry, rt = _integrate_full_batch(model, lam, x0[pending], y0[pending], cfg, noise, retry, cap)
        xs[pending], ys[pending] = rx, ry
        for j, i in enumerate(pending):
            used[i] = retry[j]
            abort_time[i] = rt[j]
        pending = pending[np.isfinite(rt)]
    return TrajectorySet(cfg.t_grid, ys, xs, used, float(lam), aborted)


def integrate_reduced(
    model: ModelSpec,
    lam: float,
    y0,
    cfg: IntegratorConfig,
    manifold,
    xi0: Array | None = None,
    *,
    xi_mode: str = "frozen",
) -> TrajectorySet:
    """Euler path of ``y' = B y + g(h(y, theta_t w) + sigma * xi, y, lambda)``.

    ``manifold`` is a :class:`slowfit.manifold.ManifoldApprox` carrying one or
    more noise realizations; one path is produced per realization.  ``xi0``
    defaults to the realizations' own value of xi at time 0; with
    ``xi_mode="moving"`` the shifted value xi(theta_t w) is used instead.
    """
    from .manifold import ManifoldError  # circular at import time

    if not model.contains(lam):
        raise ValueError(f"lambda={lam} outside Lambda={model.Lambda}")
    if xi_mode not in ("frozen", "moving"):
        raise ValueError(f"xi_mode must be 'frozen' or 'moving', got {xi_mode!r}")
    if abs(manifold.lam - lam) > 0 and manifold.order > 0:
        raise ValueError("manifold was built for a different lambda")
    if abs(manifold.eps - cfg.eps) > 1e-15:
        raise ValueError("manifold eps differs from the integrator eps")
    R = manifold.n_realizations
    y = _as_batch(y0, R, model.m, "y0")
    if xi0 is None:
        xi0 = manifold.xi_at(0.0)
    xi0 = _as_batch(xi0, R, model.n, "xi0")
    sigma = manifold.noise.sigma

    N = cfg.n_steps
    ys = np.empty((R, N + 1, model.m))
    ys[:, 0] = y
    for k in range(N):
        t = k * cfg.dt
        try:
            h = manifold.evaluate(y, t)
        except ManifoldError as exc:
            raise ManifoldError(f"manifold evaluation failed at t={t:.6g}: {exc}") from exc
        xi = xi0 if xi_mode == "frozen" else manifold.xi_at(t)
        y = y + cfg.dt * (_matvec(model.B, y) + model.g(h + sigma * xi, y, lam))
        if not np.all(np.isfinite(y)):
            raise SimulationError(f"reduced path became non-finite at t={t + cfg.dt:.6g}", time=t + cfg.dt)
        ys[:, k + 1] = y
    return TrajectorySet(cfg.t_grid, ys, None, list(manifold.streams), float(lam), 0)
