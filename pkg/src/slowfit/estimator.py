"""p-moment trajectory-mismatch objective and its stochastic Nelder-Mead minimizer.

For a candidate ``lambda`` the slow system is reduced onto the first-order
manifold of a few frozen noise realizations (replicas) and integrated from the
observed initial condition.  The objective is

    F(lambda) = mean over (observation j, replica r) of
                sum_i |y_ob[i, j] - y_S[i, r](lambda)|**p * dt_obs

on ``L_grid`` equally spaced observation times.  Each replica carries its
antithetic twin (the negated noise path) unless ``antithetic=False``.
"""

from __future__ import annotations

import json
import logging
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .dynamics import (
    RETRY_STRIDE,
    IntegratorConfig,
    ModelSpec,
    SimulationError,
    TrajectorySet,
    integrate_full,
    integrate_reduced,
)
from .levy import SeededStream, StableNoiseSpec
from .manifold import ManifoldApprox, ManifoldError, QuadratureConfig, Realization

log = logging.getLogger(__name__)

__all__ = [
    "REPLICA_BASE",
    "BATCH_STRIDE",
    "ObjectiveConfig",
    "NMConfig",
    "Vertex",
    "SimplexState",
    "NMResult",
    "EstimationReport",
    "EstimationError",
    "ManifoldFactory",
    "ObjectiveValue",
    "observation_streams",
    "replica_streams",
    "generate_observations",
    "objective",
    "stochastic_nelder_mead",
    "estimate",
    "grid_scan",
    "tracking_error",
    "epsilon_sweep_diagnostic",
]

# stream_id namespaces: observations use 0..K_obs-1, replicas start here
REPLICA_BASE = 1 << 32
# offset between successive fresh replica batches when CRN is off
BATCH_STRIDE = 1 << 20


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectiveConfig:
    p: float = 1.5
    K_obs: int = 10
    M_rep: int = 5
    L_grid: int = 1001
    T: float = 1.0
    crn: bool = True
    antithetic: bool = True
    max_retries: int = 10

    def __post_init__(self) -> None:
        if not self.p > 1:
            raise ValueError(f"p must exceed 1, got {self.p}")
        if self.K_obs < 1 or self.M_rep < 1:
            raise ValueError("K_obs and M_rep must be at least 1")
        if self.L_grid < 2:
            raise ValueError("L_grid must be at least 2")
        if not self.T > 0:
            raise ValueError("T must be positive")

    def check_alpha(self, alpha: float) -> None:
        if not self.p < alpha:
            raise ValueError(f"p={self.p} must be below alpha={alpha} for a finite p-moment")


@dataclass(frozen=True)
class NMConfig:
    """One-dimensional Nelder-Mead settings.

    ``initial_simplex=None`` places the two vertices at 1/4 and 3/4 of Lambda.
    """

    initial_simplex: tuple[float, float] | None = None
    max_iter: int = 100
    tol_lambda: float = 1e-4
    reflect: float = 1.0
    expand: float = 2.0
    contract: float = 0.5
    shrink: float = 0.5

    def __post_init__(self) -> None:
        if self.max_iter < 0:
            raise ValueError("max_iter must be non-negative")
        if not self.tol_lambda > 0:
            raise ValueError("tol_lambda must be positive")
        if self.initial_simplex is not None and len(self.initial_simplex) != 2:
            raise ValueError("initial_simplex must have two vertices")

    def start(self, Lambda: tuple[float, float]) -> tuple[float, float]:
        lo, hi = Lambda
        if self.initial_simplex is None:
            w = hi - lo
            return lo + 0.25 * w, lo + 0.75 * w
        a, b = (float(v) for v in self.initial_simplex)
        if not (lo <= a <= hi and lo <= b <= hi):
            raise ValueError(f"initial simplex {self.initial_simplex} not inside Lambda={Lambda}")
        if a == b:
            raise ValueError("initial simplex vertices must differ")
        return a, b


class ObjectiveValue(NamedTuple):
    f: float
    stderr: float


@dataclass
class Vertex:
    lam: float
    f: float
    stderr: float
    eval_count: int = 1
    samples: list = field(default_factory=list, repr=False)

    def pool(self, value: ObjectiveValue) -> None:
        """Add an independent estimate and recompute the pooled mean and error."""
        self.samples.append(value)
        fs = np.array([s.f for s in self.samples])
        ses = np.array([s.stderr for s in self.samples])
        self.f = float(fs.mean())
        self.stderr = float(np.sqrt(np.sum(ses**2)) / len(ses))
        self.eval_count = len(self.samples)


@dataclass
class SimplexState:
    vertices: list[Vertex]
    iteration: int = 0
    best_history: list[tuple[int, float, float]] = field(default_factory=list)

    def sort(self) -> None:
        self.vertices.sort(key=lambda v: (v.f, v.lam))

    @property
    def best(self) -> Vertex:
        return self.vertices[0]

    @property
    def diameter(self) -> float:
        lams = [v.lam for v in self.vertices]
        return max(lams) - min(lams)


@dataclass
class NMResult:
    state: SimplexState
    trace: list[dict]
    simplex_history: list[list[float]]
    warnings: list[str]
    projections: int
    converged: bool
    evaluations: int


def _project(lam: float, Lambda: tuple[float, float]) -> tuple[float, bool]:
    lo, hi = Lambda
    p = min(max(lam, lo), hi)
    return p, p != lam


def stochastic_nelder_mead(
    func: Callable[[float, int], ObjectiveValue | tuple[float, float] | float],
    Lambda: tuple[float, float],
    nm: NMConfig = NMConfig(),
    *,
    resample: bool = False,
) -> NMResult:
    """Minimize a (possibly noisy) scalar function over an interval.

    ``func(lam, batch)`` returns ``(F, stderr)`` or a bare ``F``.  ``batch``
    numbers independent replica sets; it is always 0 when ``resample`` is off.
    With ``resample`` on, every evaluation gets a fresh batch and whenever the
    simplex diameter halves both vertices are re-estimated and pooled with
    their earlier values.  Trial points are projected onto ``Lambda``.
    """
    Lambda = (float(Lambda[0]), float(Lambda[1]))
    trace: list[dict] = []
    warnings: list[str] = []
    counter = {"batch": 0, "evals": 0}
    projections = 0

    def call(lam: float, iteration: int) -> ObjectiveValue:
        batch = counter["batch"] if resample else 0
        counter["batch"] += 1
        counter["evals"] += 1
        out = func(lam, batch)
        if isinstance(out, tuple):
            val = ObjectiveValue(float(out[0]), float(out[1]))
        else:
            val = ObjectiveValue(float(out), 0.0)
        if not np.isfinite(val.f):
            raise EstimationError(f"objective is not finite at lambda={lam}")
        trace.append({"iteration": iteration, "lambda": lam, "f_hat": val.f, "stderr": val.stderr})
        return val

    def vertex(lam: float, iteration: int) -> Vertex:
        val = call(lam, iteration)
        return Vertex(lam, val.f, val.stderr, 1, [val])

    a, b = nm.start(Lambda)
    state = SimplexState([vertex(a, 0), vertex(b, 0)])
    state.sort()
    state.best_history.append((0, state.best.lam, state.best.f))
    history = [[v.lam for v in state.vertices]]
    last_resample_diam = state.diameter
    converged = state.diameter < nm.tol_lambda

    while not converged and state.iteration < nm.max_iter:
        state.iteration += 1
        it = state.iteration
        best, worst = state.vertices
        c = best.lam

        def trial(lam: float) -> Vertex:
            nonlocal projections
            lam, moved = _project(lam, Lambda)
            projections += moved
            return vertex(lam, it)

        r = trial(c + nm.reflect * (c - worst.lam))
        if r.f < best.f:
            e = trial(c + nm.expand * (r.lam - c))
            new = e if e.f < r.f else r
        elif r.f < worst.f:
            oc = trial(c + nm.contract * (r.lam - c))
            new = oc if oc.f <= r.f else None
        else:
            ic = trial(c + nm.contract * (worst.lam - c))
            new = ic if ic.f < worst.f else None
        if new is None:
            new = vertex(best.lam + nm.shrink * (worst.lam - best.lam), it)
        state.vertices = [best, new]
        state.sort()

        if resample and state.diameter <= 0.5 * last_resample_diam:
            for v in state.vertices:
                v.pool(call(v.lam, it))
            state.sort()
            last_resample_diam = state.diameter

        state.best_history.append((it, state.best.lam, state.best.f))
        history.append([v.lam for v in state.vertices])
        if state.diameter == 0.0:
            warnings.append(f"simplex collapsed to a single point at iteration {it}")
            converged = True
        elif state.diameter < nm.tol_lambda:
            converged = True

    if not converged:
        if nm.max_iter == 0:
            warnings.append("iteration cap is 0; returning the best initial vertex")
        else:
            warnings.append(
                f"iteration cap {nm.max_iter} reached with simplex diameter {state.diameter:.3g} >= tol {nm.tol_lambda:g}"
            )
    return NMResult(state, trace, history, warnings, projections, converged, counter["evals"])


def observation_streams(seed: int, K_obs: int) -> list[SeededStream]:
    return [SeededStream(seed, j) for j in range(K_obs)]


def replica_streams(seed: int, M_rep: int, batch: int = 0) -> list[SeededStream]:
    return [SeededStream(seed, REPLICA_BASE + batch * BATCH_STRIDE + r) for r in range(M_rep)]


def generate_observations(
    model: ModelSpec,
    lambda0: float,
    cfg: IntegratorConfig,
    noise: StableNoiseSpec,
    streams: Sequence[SeededStream],
    *,
    x0=0.0,
    y0=0.0,
    cap: float = 1e6,
) -> TrajectorySet:
    """Full-system paths at the true parameter with the fast components dropped."""
    if not model.contains(lambda0):
        raise ValueError(f"lambda0={lambda0} outside Lambda={model.Lambda}")
    return integrate_full(model, lambda0, x0, y0, cfg, noise, streams, cap=cap).slow_only()


@dataclass
class ManifoldFactory:
    """Builds the reduced-system manifold for a parameter value and replica stream.

    Noise realizations are simulated once per stream and kept, so that their
    lambda-independent quadratures are reused by every evaluation that draws
    on the same stream (common random numbers).
    """

    model: ModelSpec
    noise: StableNoiseSpec
    eps: float
    quad: QuadratureConfig = QuadratureConfig()
    order: int = 1
    zeta_step: float = 1e-2
    shift: bool = True
    xi_mode: str = "frozen"
    antithetic: bool = True
    T_fwd: float = 1.0

    def __post_init__(self) -> None:
        self.quad = self.quad.resolved(self.model)
        self._cache: dict = {}
        self._lock = threading.Lock()

    def realizations(self, stream: SeededStream) -> list[Realization]:
        key = (stream.seed, stream.stream_id)
        with self._lock:
            hit = self._cache.get(key)
        if hit is None:
            base = Realization.simulate(self.model, self.noise, self.quad, self.T_fwd, stream)
            hit = [base, base.mirrored()] if self.antithetic else [base]
            with self._lock:
                hit = self._cache.setdefault(key, hit)
        return hit

    def __call__(self, lam: float, stream: SeededStream) -> ManifoldApprox:
        return ManifoldApprox(
            self.realizations(stream), self.eps, lam, order=self.order, zeta_step=self.zeta_step, shift=self.shift
        )

    def settings(self) -> dict:
        return {
            "order": self.order,
            "zeta_step": self.zeta_step,
            "shift": self.shift,
            "xi_mode": self.xi_mode,
            "antithetic": self.antithetic,
            "quad_dt": self.quad.dt,
            "quad_tol": self.quad.tol,
            "T_trunc": self.quad.T_trunc,
        }


def _obs_grid(observations: TrajectorySet, L_grid: int) -> tuple[np.ndarray, np.ndarray, float]:
    sub = observations.subsample(L_grid)
    return sub.t_grid, sub.y, float(sub.t_grid[1] - sub.t_grid[0])


def _reduced_unit(
    lam, stream, factory, model, y0, red_cfg, max_retries
) -> tuple[np.ndarray, SeededStream, int]:
    """Reduced paths for one replica (and its twin), resampling a diverging replica."""
    s = stream
    for attempt in range(max_retries + 1):
        try:
            manifold = factory(lam, s)
            paths = integrate_reduced(model, lam, y0, red_cfg, manifold, xi_mode=factory.xi_mode)
            return paths.y, s, attempt
        except (SimulationError, ManifoldError) as exc:
            log.warning("reduced replica %s failed (%s); resampling", s.as_dict(), exc)
            s = stream.shifted(RETRY_STRIDE * (attempt + 1))
    raise EstimationError(f"reduced replica {stream.as_dict()} failed after {max_retries} resamples")


def objective(
    lam: float,
    observations: TrajectorySet,
    model: ModelSpec,
    manifold_factory: ManifoldFactory,
    cfg: ObjectiveConfig,
    streams: Sequence[SeededStream],
    *,
    threads: int = 1,
    stats: dict | None = None,
) -> ObjectiveValue:
    """Monte Carlo estimate of the p-moment mismatch at ``lam`` and its standard error.

    The standard error comes from the spread of the per-replica means (a
    replica and its antithetic twin count as one unit), so it is NaN for a
    single replica.
    """
    if not model.contains(lam):
        raise ValueError(f"lambda={lam} outside Lambda={model.Lambda}")
    cfg.check_alpha(manifold_factory.noise.alpha)
    if observations.n_paths != cfg.K_obs:
        raise ValueError(f"expected {cfg.K_obs} observation paths, got {observations.n_paths}")
    y_init = observations.y[:, 0]
    if np.any(y_init != y_init[0]):
        raise ValueError("observation paths must share their initial slow state")
    t_obs, y_obs, dt_obs = _obs_grid(observations, cfg.L_grid)
    dt = float(observations.t_grid[1] - observations.t_grid[0])
    red_cfg = IntegratorConfig(dt=dt, T=float(observations.t_grid[-1]), eps=manifold_factory.eps)
    stride = (len(observations.t_grid) - 1) // (cfg.L_grid - 1)

    def unit(stream):
        return _reduced_unit(lam, stream, manifold_factory, model, y_init[0], red_cfg, cfg.max_retries)

    streams = list(streams)
    if threads > 1 and len(streams) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(unit, streams))
    else:
        results = [unit(s) for s in streams]

    per_unit = []
    retries = 0
    for ys, _, attempts in results:
        retries += attempts
        y_s = ys[:, ::stride]  # (paths in unit, L_grid, m)
        diff = y_obs[:, None] - y_s[None]  # (K_obs, paths, L_grid, m)
        mis = np.sum(np.linalg.norm(diff, axis=-1) ** cfg.p, axis=-1) * dt_obs
        per_unit.append(float(np.mean(mis)))
    if stats is not None:
        stats["replica_retries"] = stats.get("replica_retries", 0) + retries
    per_unit = np.array(per_unit)
    f = float(np.mean(per_unit))
    se = float(np.std(per_unit, ddof=1) / np.sqrt(len(per_unit))) if len(per_unit) > 1 else float("nan")
    return ObjectiveValue(f, se)


def _clean(value):
    """JSON-safe copy: tuples to lists, numpy scalars to Python, NaN to None."""
    if isinstance(value, dict):
        return {str(k): _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    if isinstance(value, np.ndarray):
        return _clean(value.tolist())
    if isinstance(value, (np.floating, float)):
        v = float(value)
        return v if np.isfinite(v) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


@dataclass
class EstimationReport:
    lambda_E: float
    F_at_lambda_E: float
    stderr: float
    iterations: int
    evaluations: int
    converged: bool
    trace: list[dict]
    best_history: list[tuple[int, float, float]]
    simplex_history: list[list[float]]
    seeds: dict
    config: dict
    aborted_path_count: int = 0
    projections: int = 0
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return _clean(
            {
                "lambda_e": self.lambda_E,
                "f_value": self.F_at_lambda_E,
                "stderr": self.stderr,
                "iterations": self.iterations,
                "evaluations": self.evaluations,
                "converged": self.converged,
                "best_history": [list(h) for h in self.best_history],
                "simplex_history": self.simplex_history,
                "seeds": self.seeds,
                "config": self.config,
                "aborted_path_count": self.aborted_path_count,
                "projections": self.projections,
                "warnings": self.warnings,
            }
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def trace_rows(self) -> list[tuple[int, float, float, float]]:
        return [(r["iteration"], r["lambda"], r["f_hat"], r["stderr"]) for r in self.trace]


def estimate(
    model: ModelSpec,
    observations: TrajectorySet,
    Lambda: tuple[float, float],
    cfg: ObjectiveConfig,
    nm_cfg: NMConfig,
    manifold_factory: ManifoldFactory,
    *,
    seed: int = 0,
    threads: int = 1,
    config_snapshot: dict | None = None,
) -> EstimationReport:
    """Stochastic Nelder-Mead minimization of the objective over ``Lambda``.

    With ``cfg.crn`` every evaluation reuses replica batch 0, so the search
    minimizes one fixed sample-average objective.  Without it, each
    evaluation draws a fresh batch and vertices are re-estimated and pooled
    whenever the simplex diameter halves.
    """
    lo, hi = float(Lambda[0]), float(Lambda[1])
    if not lo < hi:
        raise ValueError(f"Lambda must be a nonempty interval, got {Lambda}")
    if lo < model.Lambda[0] or hi > model.Lambda[1]:
        model = model.with_constants(Lambda=(min(lo, model.Lambda[0]), max(hi, model.Lambda[1])))
    stats: dict = {}

    def func(lam: float, batch: int) -> ObjectiveValue:
        streams = replica_streams(seed, cfg.M_rep, batch)
        return objective(lam, observations, model, manifold_factory, cfg, streams, threads=threads, stats=stats)

    try:
        res = stochastic_nelder_mead(func, (lo, hi), nm_cfg, resample=not cfg.crn)
    except (EstimationError, ValueError) as exc:
        raise EstimationError(f"estimation failed: {exc}") from exc
    best = res.state.best
    config = {
        "objective": asdict(cfg),
        "optimizer": {**asdict(nm_cfg), "Lambda": [lo, hi], "start": list(nm_cfg.start((lo, hi)))},
        "manifold": manifold_factory.settings(),
        "noise": asdict(manifold_factory.noise),
        "eps": manifold_factory.eps,
        "model": model.name,
    }
    if config_snapshot is not None:
        config = {**config, "run": config_snapshot}
    seeds = {
        "seed": int(seed),
        "observation_streams": [s.as_dict() for s in observations.seeds],
        "replica_stream_base": REPLICA_BASE,
        "batch_stride": BATCH_STRIDE,
    }
    return EstimationReport(
        lambda_E=best.lam,
        F_at_lambda_E=best.f,
        stderr=best.stderr,
        iterations=res.state.iteration,
        evaluations=res.evaluations,
        converged=res.converged,
        trace=res.trace,
        best_history=res.state.best_history,
        simplex_history=res.simplex_history,
        seeds=seeds,
        config=config,
        aborted_path_count=observations.aborted + stats.get("replica_retries", 0),
        projections=res.projections,
        warnings=res.warnings,
    )


def grid_scan(
    lambdas: Sequence[float],
    observations: TrajectorySet,
    model: ModelSpec,
    manifold_factory: ManifoldFactory,
    cfg: ObjectiveConfig,
    *,
    seed: int = 0,
    batch: int = 0,
    threads: int = 1,
) -> np.ndarray:
    """Objective on a fixed grid; rows ``(lambda, F, stderr)``.

    Every grid point uses replica batch ``batch`` when CRN is on; otherwise
    grid point ``i`` uses batch ``batch + i``.
    """
    rows = []
    for i, lam in enumerate(lambdas):
        b = batch if cfg.crn else batch + i
        val = objective(lam, observations, model, manifold_factory, cfg, replica_streams(seed, cfg.M_rep, b), threads=threads)
        rows.append((float(lam), val.f, val.stderr))
    return np.array(rows)


def tracking_error(
    model: ModelSpec,
    lam: float,
    x0,
    y0,
    cfg: IntegratorConfig,
    noise: StableNoiseSpec,
    streams: Sequence[SeededStream],
    *,
    quad: QuadratureConfig = QuadratureConfig(),
    order: int = 1,
    xi_mode: str = "frozen",
) -> tuple[np.ndarray, TrajectorySet, np.ndarray]:
    """Time-averaged ``|y_full - y_reduced|`` per stream.

    The full path draws its increments from a stream's forward child and the
    reduced path uses the stationary path from the same stream.  Returns the
    per-stream errors, the full trajectories and the reduced slow paths with
    shape ``(paths, len(t_grid), m)``.
    """
    full = integrate_full(model, lam, x0, y0, cfg, noise, streams)
    factory = ManifoldFactory(model, noise, cfg.eps, quad, order=order, xi_mode=xi_mode, antithetic=False, T_fwd=cfg.T)
    reduced = []
    for s in full.seeds:
        red = integrate_reduced(model, lam, y0, cfg, factory(lam, s), xi_mode=xi_mode)
        reduced.append(red.y[0])
    reduced = np.array(reduced)
    diff = np.linalg.norm(full.y - reduced, axis=-1)
    w = np.full(len(cfg.t_grid), cfg.dt)
    w[0] = w[-1] = 0.5 * cfg.dt
    return diff @ w / cfg.T, full, reduced


def epsilon_sweep_diagnostic(
    model: ModelSpec,
    lambda0: float,
    eps_list: Sequence[float],
    cfg: ObjectiveConfig,
    *,
    noise: StableNoiseSpec,
    dt: float = 1e-3,
    x0=0.0,
    y0=0.0,
    nm_cfg: NMConfig = NMConfig(),
    quad: QuadratureConfig = QuadratureConfig(),
    seeds: Sequence[int] = tuple(range(10)),
    threads: int = 1,
) -> list[tuple[float, float]]:
    """Median ``|lambda_E - lambda0|`` over ``seeds`` for each ``eps`` (matched seeds)."""
    eps_list = [float(e) for e in eps_list]
    if any(a < b for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be sorted in descending order")
    rows = []
    for eps in eps_list:
        int_cfg = IntegratorConfig(dt=dt, T=cfg.T, eps=eps)
        errs = []
        for seed in seeds:
            obs = generate_observations(
                model, lambda0, int_cfg, noise, observation_streams(seed, cfg.K_obs), x0=x0, y0=y0
            )
            factory = ManifoldFactory(model, noise, eps, quad, antithetic=cfg.antithetic, T_fwd=cfg.T)
            rep = estimate(model, obs, model.Lambda, cfg, nm_cfg, factory, seed=seed, threads=threads)
            errs.append(abs(rep.lambda_E - lambda0))
        rows.append((eps, float(np.median(errs))))
    return rows
