"""Concrete fast-slow models and numerical spot-checks of their hypotheses.

The worked example is

    x' = -x/eps + cos(y)/(4 eps) + sigma * eps**(-1/alpha) * L'
    y' = y + sin(lambda * x) / 4

with ``A = -1``, ``B = 1``, ``K = gamma = beta = 1`` and ``L_f = L_g = 1/4``.
Its zero-order manifold is ``cos(zeta)/4`` for every noise path, and its
first-order correction has a closed form (:func:`example_h1_explicit`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dynamics import ModelSpec, propagator
from .levy import SeededStream, StationaryPath

__all__ = [
    "example_model",
    "decoupled_example_model",
    "ModelRegistryEntry",
    "REGISTRY",
    "get_model",
    "HypothesisCheck",
    "HypothesisReport",
    "check_hypotheses",
    "example_h0_explicit",
    "example_h1_explicit",
]


def _lead(*arrays) -> tuple:
    return np.broadcast_shapes(*(np.shape(a)[:-1] for a in arrays))


def example_model(Lambda: tuple[float, float] = (0.2, 3.0)) -> ModelSpec:
    def f(x, y):
        return np.broadcast_to(0.25 * np.cos(y), _lead(x, y) + (1,)).copy()

    def g(x, y, lam):
        return np.broadcast_to(0.25 * np.sin(lam * x), _lead(x, y) + (1,)).copy()

    def f_x(x, y):
        return np.zeros(_lead(x, y) + (1, 1))

    def f_y(x, y):
        return np.broadcast_to((-0.25 * np.sin(y))[..., None], _lead(x, y) + (1, 1)).copy()

    def g_lambda(x, y, lam):
        return np.broadcast_to(0.25 * x * np.cos(lam * x), _lead(x, y) + (1,)).copy()

    return ModelSpec(
        A=[[-1.0]], B=[[1.0]], f=f, g=g, f_x=f_x, f_y=f_y, g_lambda=g_lambda,
        L_f=0.25, L_g=0.25, K=1.0, gamma=1.0, beta=1.0, Lambda=Lambda, name="example",
    )


def decoupled_example_model(Lambda: tuple[float, float] = (0.2, 3.0)) -> ModelSpec:
    """The example with ``g = 0``: the slow flow is ``y' = y`` whatever the fast state."""
    base = example_model(Lambda)

    def g(x, y, lam):
        return np.zeros(_lead(x, y) + (1,))

    return base.with_constants(g=g, g_lambda=g, L_g=0.0, name="example_decoupled")


@dataclass(frozen=True)
class ModelRegistryEntry:
    name: str
    factory: Callable[[], ModelSpec]
    documented_properties: tuple[tuple[str, str], ...] = ()

    @property
    def spec(self) -> ModelSpec:
        return self.factory()


REGISTRY: dict[str, ModelRegistryEntry] = {
    e.name: e
    for e in (
        ModelRegistryEntry(
            "example",
            example_model,
            (("H1", "K=gamma=beta=1"), ("H2", "gamma - K*L_f = 0.75"), ("L_g", "1/4 for |lambda| <= 1")),
        ),
        ModelRegistryEntry(
            "example_decoupled",
            decoupled_example_model,
            (("H1", "K=gamma=beta=1"), ("H2", "gamma - K*L_f = 0.75"), ("L_g", "0")),
        ),
    )
}


def get_model(name: str) -> ModelSpec:
    try:
        return REGISTRY[name].spec
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: {sorted(REGISTRY)}") from None


@dataclass(frozen=True)
class HypothesisCheck:
    name: str
    passed: bool
    detail: str
    witness: dict | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "passed", bool(self.passed))

    def to_dict(self) -> dict:
        return {"name": self.name, "passed": self.passed, "detail": self.detail, "witness": self.witness}

    @classmethod
    def from_dict(cls, d: dict) -> "HypothesisCheck":
        return cls(d["name"], bool(d["passed"]), d["detail"], d.get("witness"))


@dataclass(frozen=True)
class HypothesisReport:
    model: str
    checks: tuple[HypothesisCheck, ...] = field(default_factory=tuple)
    seed: dict | None = None

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[HypothesisCheck]:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> HypothesisCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "passed": self.passed,
            "seed": self.seed,
            "checks": [c.to_dict() for c in self.checks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HypothesisReport":
        return cls(d["model"], tuple(HypothesisCheck.from_dict(c) for c in d["checks"]), d.get("seed"))


def _quotient_check(name, declared, points_a, points_b, values_a, values_b, labels):
    """Largest difference quotient over point pairs against a declared Lipschitz constant."""
    num = np.linalg.norm(values_a - values_b, axis=-1)
    den = np.linalg.norm(points_a - points_b, axis=-1)
    q = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    i = int(np.argmax(q))
    worst = float(q[i])
    passed = worst <= declared * (1 + 1e-9) + 1e-12
    witness = None if passed else {labels[0]: points_a[i].tolist(), labels[1]: points_b[i].tolist(), "quotient": worst}
    return HypothesisCheck(name, passed, f"max sampled quotient {worst:.6g} vs declared {declared:g}", witness)


def check_hypotheses(
    spec: ModelSpec,
    sample_count: int = 500,
    stream: SeededStream | None = None,
    *,
    lam_ref: float | None = None,
    box: float = 4.0,
    t_max: float = 10.0,
) -> HypothesisReport:
    """Spot-check (H1), (H2) and the declared Lipschitz constants.

    (H2) is exact arithmetic on the declared constants.  (H1) and the
    Lipschitz bounds are sampled at random points in ``[-box, box]``; a
    failure carries the offending point as its witness.  The Lipschitz
    constant of ``g`` is checked at ``lam_ref`` (default: 1 if it lies in
    Lambda, else the midpoint), since for most models it grows with lambda.
    """
    stream = stream or SeededStream(0, 0)
    rng = stream.rng(0)
    n, m = spec.n, spec.m
    checks = []

    rate = spec.contraction_rate
    checks.append(HypothesisCheck("H2", rate > 0, f"gamma - K*L_f = {rate:.6g}"))

    ts = rng.uniform(0.0, t_max, sample_count)
    xs = rng.standard_normal((sample_count, n))
    ys = rng.standard_normal((sample_count, m))
    worst_a, wa = -np.inf, None
    worst_b, wb = -np.inf, None
    for t, x, y in zip(ts, xs, ys):
        lhs = np.linalg.norm(propagator(spec.A, t) @ x)
        ra = lhs - spec.K * np.exp(-spec.gamma * t) * np.linalg.norm(x)
        if ra > worst_a:
            worst_a, wa = ra, {"t": float(t), "x": x.tolist()}
        lhs = np.linalg.norm(propagator(spec.B, -t) @ y)
        rb = lhs - spec.K * np.exp(-spec.beta * t) * np.linalg.norm(y)
        if rb > worst_b:
            worst_b, wb = rb, {"t": float(-t), "y": y.tolist()}
    tol = 1e-12
    checks.append(
        HypothesisCheck(
            "H1_fast", worst_a <= tol,
            f"max |e^(At)x| - K e^(-gamma t)|x| = {worst_a:.3g}", None if worst_a <= tol else wa,
        )
    )
    checks.append(
        HypothesisCheck(
            "H1_slow", worst_b <= tol,
            f"max |e^(Bt)y| - K e^(beta t)|y| (t<=0) = {worst_b:.3g}", None if worst_b <= tol else wb,
        )
    )

    xa = rng.uniform(-box, box, (sample_count, n))
    xb = rng.uniform(-box, box, (sample_count, n))
    ya = rng.uniform(-box, box, (sample_count, m))
    yb = rng.uniform(-box, box, (sample_count, m))
    pa = np.concatenate([xa, ya], axis=1)
    pb = np.concatenate([xb, yb], axis=1)
    checks.append(_quotient_check("L_f", spec.L_f, pa, pb, spec.f(xa, ya), spec.f(xb, yb), ("point_a", "point_b")))
    lo, hi = spec.Lambda
    if lam_ref is None:
        lam_ref = 1.0 if lo <= 1.0 <= hi else 0.5 * (lo + hi)
    checks.append(
        _quotient_check(
            "L_g", spec.L_g, pa, pb, spec.g(xa, ya, lam_ref), spec.g(xb, yb, lam_ref), ("point_a", "point_b")
        )
    )
    return HypothesisReport(spec.name, tuple(checks), stream.as_dict())


def example_h0_explicit(zeta) -> np.ndarray:
    return 0.25 * np.cos(np.asarray(zeta, dtype=float))


def example_h1_explicit(
    zeta: float, xi_path: StationaryPath, lam: float, sigma: float, T_trunc: float, anchor: float = 0.0
) -> float:
    """Closed-form first-order correction of the example on one frozen path.

        h1 = zeta sin(zeta) / 4
             - sin(zeta)/16 * int_{-inf}^0 e^t [int_0^t sin(lam cos(zeta)/4 + lam sigma xi(s)) ds] dt

    The outer integral is truncated at ``-T_trunc`` and both integrals use
    the trapezoid rule on the grid of ``xi_path``.  The inner integral is
    accumulated from 0 backwards in time.
    """
    dt = xi_path.dt
    end = xi_path.index(anchor)
    nw = int(round(T_trunc / dt))
    if end - nw < 0:
        raise ValueError("xi path too short for the requested truncation")
    xi = xi_path.values[end - nw : end + 1, 0]
    t = dt * np.arange(-nw, 1)
    integrand = np.sin(0.25 * lam * np.cos(zeta) + lam * sigma * xi)
    inner = np.zeros_like(t)
    # inner[k] = int_0^{t_k} integrand ds, built from t = 0 towards the past
    for k in range(nw - 1, -1, -1):
        inner[k] = inner[k + 1] - 0.5 * dt * (integrand[k] + integrand[k + 1])
    outer = np.exp(t) * inner
    outer_int = dt * (outer.sum() - 0.5 * (outer[0] + outer[-1]))
    return float(0.25 * zeta * np.sin(zeta) - np.sin(zeta) / 16.0 * outer_int)
