"""First-order random slow manifold ``h0 + eps * h1`` for a frozen noise path.

Everything here lives on the time axis of the stationary driving process
``xi``.  For a point ``zeta`` of the slow space, the zero-order fast path
``x0`` solves

    x0' = A x0 + f(x0 + sigma * xi(s), zeta)

and the first-order path ``x1`` solves

    x1' = (A + f_x) x1 + f_y [B s zeta + int_0^s g(x0 + sigma * xi, zeta, lambda) dr]

Both are the solutions that stay bounded on ``(-inf, 0]``.  They are found by
starting from zero at ``-T_trunc`` and letting the contraction of the linear
part (rate ``gamma - K L_f``) forget the initial value.  ``h0`` and ``h1`` are
trapezoidal quadratures of

    int_{-inf}^0 exp(-A s) f(...) ds
    int_{-inf}^0 exp(-A s) {f_y [...] + f_x x1} ds

truncated to ``[-T_trunc, 0]``.

The module-level functions (:func:`solve_x0`, :func:`h0`, :func:`solve_x1`,
:func:`h1`) evaluate one point literally.  :class:`ManifoldApprox` tabulates
the same quantities on a quantized ``zeta`` grid and for every shifted window
``theta_t w``, ``t`` in ``[0, T]``, which is what the reduced integrator needs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .dynamics import ModelSpec, propagator
from .levy import STATIONARY, SeededStream, StableNoiseSpec, StationaryPath, linear_recursion, simulate_stationary

__all__ = [
    "ManifoldError",
    "QuadratureConfig",
    "FastPath",
    "Realization",
    "ManifoldApprox",
    "solve_x0",
    "h0",
    "solve_x1",
    "h1",
    "h_tilde",
]


class ManifoldError(RuntimeError):
    pass


@dataclass(frozen=True)
class QuadratureConfig:
    """Truncation horizon, step and tolerance of the manifold integrals.

    ``T_trunc=None`` resolves to ``log(1/tol) / (gamma - K L_f)``, rounded up
    to a whole number of steps.
    """

    dt: float = 0.005
    tol: float = 1e-6
    T_trunc: float | None = None

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("quadrature dt must be positive")
        if not (0.0 < self.tol < 1.0):
            raise ValueError("tol must lie in (0, 1)")
        if self.T_trunc is not None and not self.T_trunc > 0:
            raise ValueError("T_trunc must be positive")

    def resolved(self, model: ModelSpec) -> "QuadratureConfig":
        rate = model.contraction_rate
        if rate <= 0:
            raise ValueError("(H2) fails: the zero-order fast flow is not contracting")
        T = self.T_trunc if self.T_trunc is not None else np.log(1.0 / self.tol) / rate
        T = float(np.ceil(T / self.dt - 1e-9) * self.dt)
        if np.exp(-model.gamma * T) > self.tol * (1 + 1e-9):
            raise ValueError(
                f"T_trunc={T:g} too short: exp(-gamma*T_trunc)={np.exp(-model.gamma * T):.3g} > tol={self.tol:g}"
            )
        return replace(self, T_trunc=T)

    @property
    def n_window(self) -> int:
        if self.T_trunc is None:
            raise ValueError("QuadratureConfig not resolved")
        return int(round(self.T_trunc / self.dt))


@dataclass(frozen=True)
class FastPath:
    """Path of ``x0`` or ``x1`` on ``s`` in ``[-T_trunc, 0]``.

    ``converged`` is ``None`` when the noise window was too short to repeat
    the computation with a doubled truncation horizon.
    """

    s_grid: np.ndarray
    values: np.ndarray
    converged: bool | None = None


def _zeta(zeta, m: int) -> np.ndarray:
    z = np.atleast_1d(np.asarray(zeta, dtype=float))
    if z.shape != (m,):
        raise ValueError(f"zeta must have shape ({m},), got {z.shape}")
    return z


def _window(xi_path: StationaryPath, quad: QuadratureConfig, n_window: int, anchor: float = 0.0):
    if abs(xi_path.dt - quad.dt) > 1e-12 * quad.dt:
        raise ValueError(f"xi path step {xi_path.dt} differs from quadrature step {quad.dt}")
    end = xi_path.index(anchor)
    start = end - n_window
    if start < 0:
        raise ManifoldError(f"xi path does not cover [{anchor} - {n_window * quad.dt:g}, {anchor}]")
    s = quad.dt * np.arange(-n_window, 1)
    return s, xi_path.values[start : end + 1]


def _kernel(A: np.ndarray, s: np.ndarray) -> np.ndarray:
    """``exp(-A s)`` for each ``s`` on a uniform grid ending at 0, shape ``(len(s), n, n)``."""
    n = A.shape[0]
    if np.count_nonzero(A - np.diag(np.diag(A))) == 0:
        out = np.zeros((len(s), n, n))
        idx = np.arange(n)
        out[:, idx, idx] = np.exp(-np.outer(s, np.diag(A)))
        return out
    step = propagator(A, s[1] - s[0])
    out = np.empty((len(s), n, n))
    out[-1] = np.eye(n)
    for k in range(len(s) - 2, -1, -1):
        out[k] = step @ out[k + 1]
    return out


def _trapezoid_weights(count: int, dt: float) -> np.ndarray:
    w = np.full(count, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def _x0_path(model: ModelSpec, sigma: float, dt: float, xi_vals: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    """Euler path of the zero-order fast equation from zero; batch axes after time."""
    x = np.zeros(xi_vals.shape[1:])
    out = np.empty_like(xi_vals)
    out[0] = x
    for k in range(len(xi_vals) - 1):
        x = x + dt * (np.einsum("ij,...j->...i", model.A, x) + model.f(x + sigma * xi_vals[k], zeta))
        out[k + 1] = x
    return out


def solve_x0(
    zeta,
    xi_path: StationaryPath,
    model: ModelSpec,
    quad: QuadratureConfig,
    *,
    sigma: float,
    anchor: float = 0.0,
) -> FastPath:
    quad = quad.resolved(model) if quad.T_trunc is None else quad
    zeta = _zeta(zeta, model.m)
    nw = quad.n_window
    s, xi = _window(xi_path, quad, nw, anchor)
    values = _x0_path(model, sigma, quad.dt, xi, zeta)
    if not np.all(np.isfinite(values)):
        raise ManifoldError("zero-order fast path is not finite")
    converged = None
    try:
        _, xi2 = _window(xi_path, quad, 2 * nw, anchor)
    except ManifoldError:
        pass
    else:
        end2 = _x0_path(model, sigma, quad.dt, xi2, zeta)[-1]
        converged = bool(np.max(np.abs(end2 - values[-1])) <= quad.tol)
    return FastPath(s, values, converged)


def h0(zeta, xi_path: StationaryPath, model: ModelSpec, quad: QuadratureConfig, *, sigma: float, anchor: float = 0.0) -> np.ndarray:
    quad = quad.resolved(model) if quad.T_trunc is None else quad
    z = _zeta(zeta, model.m)
    path = solve_x0(z, xi_path, model, quad, sigma=sigma, anchor=anchor)
    if path.converged is False:
        raise ManifoldError("zero-order path did not converge when T_trunc was doubled")
    _, xi = _window(xi_path, quad, quad.n_window, anchor)
    F = model.f(path.values + sigma * xi, z)
    ker = _kernel(model.A, path.s_grid)
    w = _trapezoid_weights(len(path.s_grid), quad.dt)
    return np.einsum("k,kij,kj->i", w, ker, F)


def _running_g(model: ModelSpec, lam: float, dt: float, xin: np.ndarray, zeta: np.ndarray) -> np.ndarray:
    """``int_0^s g dr`` on the window grid (negative for ``s < 0``)."""
    gv = model.g(xin, zeta, lam)
    G = np.zeros_like(gv)
    for k in range(len(gv) - 2, -1, -1):
        G[k] = G[k + 1] - 0.5 * dt * (gv[k] + gv[k + 1])
    return G


def solve_x1(
    zeta,
    xi_path: StationaryPath,
    model: ModelSpec,
    lam: float,
    quad: QuadratureConfig,
    x0_path: FastPath,
    *,
    sigma: float,
    anchor: float = 0.0,
) -> FastPath:
    quad = quad.resolved(model) if quad.T_trunc is None else quad
    z = _zeta(zeta, model.m)
    s, xi = _window(xi_path, quad, quad.n_window, anchor)
    if len(x0_path.s_grid) != len(s):
        raise ValueError("x0_path is not on the quadrature grid")
    xin = x0_path.values + sigma * xi
    fx = model.f_x(xin, z)
    fy = model.f_y(xin, z)
    bracket = s[:, None] * (model.B @ z)[None, :] + _running_g(model, lam, quad.dt, xin, z)
    x = np.zeros(model.n)
    out = np.empty((len(s), model.n))
    out[0] = x
    for k in range(len(s) - 1):
        x = x + quad.dt * ((model.A + fx[k]) @ x + fy[k] @ bracket[k])
        out[k + 1] = x
    if not np.all(np.isfinite(out)):
        raise ManifoldError("first-order fast path is not finite")
    return FastPath(s, out, x0_path.converged)


def h1(
    zeta,
    xi_path: StationaryPath,
    model: ModelSpec,
    lam: float,
    quad: QuadratureConfig,
    *,
    sigma: float,
    anchor: float = 0.0,
) -> np.ndarray:
    quad = quad.resolved(model) if quad.T_trunc is None else quad
    z = _zeta(zeta, model.m)
    p0 = solve_x0(z, xi_path, model, quad, sigma=sigma, anchor=anchor)
    if p0.converged is False:
        raise ManifoldError("zero-order path did not converge when T_trunc was doubled")
    p1 = solve_x1(z, xi_path, model, lam, quad, p0, sigma=sigma, anchor=anchor)
    s, xi = _window(xi_path, quad, quad.n_window, anchor)
    xin = p0.values + sigma * xi
    bracket = s[:, None] * (model.B @ z)[None, :] + _running_g(model, lam, quad.dt, xin, z)
    integrand = np.einsum("kij,kj->ki", model.f_y(xin, z), bracket)
    integrand += np.einsum("kij,kj->ki", model.f_x(xin, z), p1.values)
    ker = _kernel(model.A, s)
    w = _trapezoid_weights(len(s), quad.dt)
    return np.einsum("k,kij,kj->i", w, ker, integrand)


class Realization:
    """One frozen path of ``xi`` on ``[-T_trunc, T_fwd]`` plus its lambda-free caches.

    ``sign=-1`` gives the antithetic twin (all increments negated).
    """

    def __init__(
        self,
        model: ModelSpec,
        noise: StableNoiseSpec,
        quad: QuadratureConfig,
        xi_path: StationaryPath,
        stream: SeededStream | None = None,
        sign: int = 1,
    ):
        self.model = model
        self.noise = noise
        self.quad = quad.resolved(model) if quad.T_trunc is None else quad
        self.xi_path = xi_path
        self.stream = stream
        self.sign = sign
        nw = self.quad.n_window
        if abs(xi_path.t_grid[nw]) > 1e-9 * max(1.0, self.quad.T_trunc):
            raise ValueError("xi path must start exactly T_trunc before time 0")
        self.n_anchor = len(xi_path.t_grid) - nw
        self._zero: dict = {}
        self._lock = threading.Lock()

    @classmethod
    def simulate(
        cls,
        model: ModelSpec,
        noise: StableNoiseSpec,
        quad: QuadratureConfig,
        T_fwd: float,
        stream: SeededStream,
        sign: int = 1,
    ) -> "Realization":
        quad = quad.resolved(model) if quad.T_trunc is None else quad
        nf = int(round(T_fwd / quad.dt))
        if abs(nf * quad.dt - T_fwd) > 1e-9 * max(1.0, T_fwd):
            raise ValueError(f"T_fwd={T_fwd} is not a multiple of the quadrature step {quad.dt}")
        t = quad.dt * np.arange(-quad.n_window, nf + 1)
        path = simulate_stationary(model.A, noise, t, stream, dt=quad.dt, child=STATIONARY)
        if sign < 0:
            path = path.negated()
        return cls(model, noise, quad, path, stream, sign)

    def mirrored(self) -> "Realization":
        return Realization(self.model, self.noise, self.quad, self.xi_path.negated(), self.stream, -self.sign)

    @property
    def key(self):
        s = self.stream.as_dict() if self.stream is not None else None
        return (None if s is None else (s["seed"], s["stream_id"]), self.sign)

    def xi_at(self, t: float) -> np.ndarray:
        return self.xi_path.at(t)


def _zero_order_block(model, sigma, quad, xi_vals, zetas, k0):
    """x0 + sigma*xi paths and h0 at every anchor for a block of (realization, zeta) pairs."""
    X = _x0_path(model, sigma, quad.dt, xi_vals, zetas[None])
    xin = X + sigma * xi_vals
    F = model.f(xin, zetas[None])
    E = propagator(model.A, quad.dt)
    EF = np.einsum("ij,...j->...i", E, F)
    forcing = 0.5 * quad.dt * (EF[:-1] + F[1:])
    I = np.zeros_like(F)
    I[1:] = linear_recursion(E, forcing)
    return xin, np.moveaxis(I[k0:], 0, 1)


def _first_order_block(model, lam, quad, xin, zetas, k0):
    """h1 at every anchor for a block; ``xin`` has shape ``(K+1, B, n)``."""
    dt = quad.dt
    K1 = xin.shape[0]
    n = model.n
    Z = zetas[None]
    u = dt * (np.arange(K1) - k0)
    FX = model.f_x(xin, Z)
    FY = model.f_y(xin, Z)
    gv = model.g(xin, Z, lam)
    G = np.zeros_like(gv)
    G[1:] = np.cumsum(0.5 * dt * (gv[:-1] + gv[1:]), axis=0)
    G -= G[k0]
    c = u[:, None, None] * np.einsum("ij,...j->...i", model.B, zetas)[None] + G
    FYc = np.einsum("...ij,...j->...i", FY, c)

    U = np.zeros_like(xin)
    V = np.zeros(FY.shape)
    if not np.any(FX):
        M = np.eye(n) + dt * model.A
        U[1:] = linear_recursion(M, dt * FYc[:-1])
        V[1:] = np.swapaxes(linear_recursion(M, dt * np.swapaxes(FY[:-1], -1, -2)), -1, -2)
    else:
        for k in range(K1 - 1):
            Mk = model.A + FX[k]
            U[k + 1] = U[k] + dt * (np.einsum("...ij,...j->...i", Mk, U[k]) + FYc[k])
            V[k + 1] = V[k] + dt * (np.einsum("...ij,...jl->...il", Mk, V[k]) + FY[k])

    p = FYc + np.einsum("...ij,...j->...i", FX, U)
    q = FY + np.einsum("...ij,...jl->...il", FX, V)
    E = propagator(model.A, dt)
    P = np.zeros_like(p)
    P[1:] = linear_recursion(E, 0.5 * dt * (np.einsum("ij,...j->...i", E, p[:-1]) + p[1:]))
    Eq = np.einsum("ij,...jl->...il", E, q)
    Q = np.zeros_like(q)
    Q[1:] = np.swapaxes(
        linear_recursion(E, 0.5 * dt * np.swapaxes(Eq[:-1] + q[1:], -1, -2)), -1, -2
    )
    H1 = P[k0:] - np.einsum("...ij,...j->...i", Q[k0:], c[k0:])
    return np.moveaxis(H1, 0, 1)


class ManifoldApprox:
    """``h0 + eps * h1`` bound to one or more frozen noise realizations.

    Values are tabulated on nodes ``zeta = zeta_step * i`` (integer ``i``, or an
    integer tuple when ``m > 1``) and cached per ``(realization, node)``.  For
    ``m == 1`` evaluation interpolates linearly between the two bracketing
    nodes; for ``m > 1`` it uses the nearest node.  With ``shift=True`` the
    window ends at ``t`` (that is, the manifold of ``theta_t w``); otherwise
    every evaluation uses the window ending at 0.  A cache miss on a scalar
    slow variable also fills the ``prefetch`` nodes on either side, so that a
    slowly drifting path triggers few quadrature batches.
    """

    block_size = 128

    def __init__(
        self,
        realizations: Realization | Sequence[Realization],
        eps: float,
        lam: float,
        *,
        order: int = 1,
        zeta_step: float = 1e-2,
        shift: bool = True,
        prefetch: int = 8,
    ):
        if isinstance(realizations, Realization):
            realizations = [realizations]
        self.realizations = list(realizations)
        if not self.realizations:
            raise ValueError("at least one realization is required")
        first = self.realizations[0]
        for r in self.realizations[1:]:
            if r.model is not first.model or r.noise != first.noise or r.quad != first.quad:
                raise ValueError("realizations must share model, noise and quadrature")
            if r.n_anchor != first.n_anchor:
                raise ValueError("realizations must cover the same forward window")
        if order not in (0, 1):
            raise ValueError(f"order must be 0 or 1, got {order}")
        if not eps >= 0:
            raise ValueError("eps must be non-negative")
        if not zeta_step > 0:
            raise ValueError("zeta_step must be positive")
        self.model = first.model
        self.noise = first.noise
        self.quad = first.quad
        self.eps = float(eps)
        self.lam = float(lam)
        self.order = order
        self.zeta_step = float(zeta_step)
        self.shift = shift
        self.prefetch = int(prefetch)
        self._h1: dict = {}
        self._lock = threading.Lock()

    @property
    def n_realizations(self) -> int:
        return len(self.realizations)

    @property
    def streams(self) -> list:
        return [r.stream for r in self.realizations]

    @property
    def T_fwd(self) -> float:
        return (self.realizations[0].n_anchor - 1) * self.quad.dt

    def anchor(self, t: float) -> int:
        if not self.shift:
            return 0
        a = int(np.floor(t / self.quad.dt + 1e-9))
        if a < 0 or a >= self.realizations[0].n_anchor:
            raise ManifoldError(f"time {t} outside the simulated window [0, {self.T_fwd:g}]")
        return a

    def xi_at(self, t: float) -> np.ndarray:
        return np.stack([r.xi_at(t) for r in self.realizations])

    def _node(self, zeta: np.ndarray):
        q = np.floor(zeta / self.zeta_step) if self.model.m == 1 else np.rint(zeta / self.zeta_step)
        return tuple(int(v) for v in q)

    def _ensure(self, pairs: Iterable[tuple[int, tuple]]) -> None:
        pairs = list(pairs)
        missing0 = {p for p in pairs if p[1] not in self.realizations[p[0]]._zero}
        if missing0:
            missing0 = {p for p in self._expand(missing0) if p[1] not in self.realizations[p[0]]._zero}
        missing0 = sorted(missing0)
        for start in range(0, len(missing0), self.block_size):
            self._compute_zero(missing0[start : start + self.block_size])
        if self.order == 0:
            return
        missing1 = {p for p in pairs if p not in self._h1}
        if missing1:
            missing1 = {p for p in self._expand(missing1) if p not in self._h1}
            self._ensure_zero(missing1)
        missing1 = sorted(missing1)
        for start in range(0, len(missing1), self.block_size):
            self._compute_first(missing1[start : start + self.block_size])

    def _expand(self, pairs) -> set:
        """Add the ``prefetch`` neighbouring nodes on each side (scalar slow variable only)."""
        if self.model.m != 1 or self.prefetch <= 0:
            return set(pairs)
        out = set()
        for r, (i,) in pairs:
            out.update((r, (j,)) for j in range(i - self.prefetch, i + self.prefetch + 1))
        return out

    def _ensure_zero(self, pairs) -> None:
        missing = sorted(p for p in pairs if p[1] not in self.realizations[p[0]]._zero)
        for start in range(0, len(missing), self.block_size):
            self._compute_zero(missing[start : start + self.block_size])

    def _block_inputs(self, block):
        zetas = np.array([self.zeta_step * np.array(node, dtype=float) for _, node in block])
        return zetas

    def _compute_zero(self, block) -> None:
        zetas = self._block_inputs(block)
        xi_vals = np.stack([self.realizations[r].xi_path.values for r, _ in block], axis=1)
        xin, h0a = _zero_order_block(self.model, self.noise.sigma, self.quad, xi_vals, zetas, self.quad.n_window)
        if not (np.all(np.isfinite(xin)) and np.all(np.isfinite(h0a))):
            raise ManifoldError("zero-order manifold quadrature produced non-finite values")
        for j, (r, node) in enumerate(block):
            real = self.realizations[r]
            with real._lock:
                real._zero.setdefault(node, (xin[:, j].copy(), h0a[j].copy()))

    def _compute_first(self, block) -> None:
        zetas = self._block_inputs(block)
        xin = np.stack([self.realizations[r]._zero[node][0] for r, node in block], axis=1)
        h1a = _first_order_block(self.model, self.lam, self.quad, xin, zetas, self.quad.n_window)
        if not np.all(np.isfinite(h1a)):
            raise ManifoldError("first-order manifold quadrature produced non-finite values")
        with self._lock:
            for j, pair in enumerate(block):
                self._h1.setdefault(pair, h1a[j].copy())

    def node_values(self, r: int, node: tuple, a: int) -> tuple[np.ndarray, np.ndarray]:
        """``(h0, h1)`` at a node for anchor index ``a``."""
        self._ensure([(r, node)])
        h0v = self.realizations[r]._zero[node][1][a]
        h1v = self._h1[(r, node)][a] if self.order == 1 else np.zeros_like(h0v)
        return h0v, h1v

    def components(self, Y: np.ndarray, t: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        """``(h0, h1)`` at ``Y[r]`` for every realization ``r``; ``Y`` has shape ``(R, m)``."""
        Y = np.asarray(Y, dtype=float).reshape(self.n_realizations, self.model.m)
        if not np.all(np.isfinite(Y)):
            raise ManifoldError("non-finite slow state")
        a = self.anchor(t)
        if self.model.m == 1:
            u = Y[:, 0] / self.zeta_step
            base = np.floor(u).astype(np.int64)
            lo = [(r, (int(b),)) for r, b in enumerate(base)]
            hi = [(r, (int(b) + 1,)) for r, b in enumerate(base)]
            self._ensure(lo + hi)
            w = (u - base)[:, None]
            zero = [self.realizations[r]._zero for r in range(len(base))]
            lo0 = np.stack([zero[r][k][1][a] for r, k in lo])
            hi0 = np.stack([zero[r][k][1][a] for r, k in hi])
            out0 = (1 - w) * lo0 + w * hi0
            if self.order == 0:
                return out0, np.zeros_like(out0)
            lo1 = np.stack([self._h1[p][a] for p in lo])
            hi1 = np.stack([self._h1[p][a] for p in hi])
            return out0, (1 - w) * lo1 + w * hi1
        nodes = [self._node(y) for y in Y]
        self._ensure(list(enumerate(nodes)))
        vals = [self.node_values(r, node, a) for r, node in enumerate(nodes)]
        return np.stack([v[0] for v in vals]), np.stack([v[1] for v in vals])

    def evaluate(self, Y: np.ndarray, t: float = 0.0) -> np.ndarray:
        c0, c1 = self.components(Y, t)
        if self.order == 0:
            return c0
        return c0 + self.eps * c1

    def h_tilde(self, zeta, t: float = 0.0, realization: int = 0) -> np.ndarray:
        z = _zeta(zeta, self.model.m)
        Y = np.zeros((self.n_realizations, self.model.m))
        Y[:] = z
        return self.evaluate(Y, t)[realization]

    def cross_section(self, zetas, realization: int = 0, t: float = 0.0) -> np.ndarray:
        """Rows ``(zeta..., h0..., h1..., h_tilde...)`` for each requested zeta."""
        rows = []
        for z in np.atleast_1d(np.asarray(zetas, dtype=float)).reshape(-1, self.model.m):
            Y = np.broadcast_to(z, (self.n_realizations, self.model.m))
            c0, c1 = self.components(Y, t)
            c0, c1 = c0[realization], c1[realization]
            ht = c0 + self.eps * c1 if self.order == 1 else c0
            rows.append(np.concatenate([z, c0, c1, ht]))
        return np.array(rows)


def h_tilde(zeta, manifold: ManifoldApprox, t: float = 0.0, realization: int = 0) -> np.ndarray:
    return manifold.h_tilde(zeta, t, realization)
