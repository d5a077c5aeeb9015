"""Run configuration: TOML loading, schema validation, overrides and hashing.

Precedence is command-line flags, then the file, then defaults.  Validation
errors name the field path and, when the value came from the file, its line.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["ConfigError", "RunConfig", "load_config", "SCHEMA", "DEFAULT_SEED"]

DEFAULT_SEED = 0


class ConfigError(ValueError):
    pass


REQUIRED = object()


@dataclass(frozen=True)
class Field:
    default: Any
    kind: type | tuple
    check: Callable[[Any], str | None] | None = None


def _positive(v):
    return None if v > 0 else "must be positive"


def _nonneg(v):
    return None if v >= 0 else "must be non-negative"


def _open_unit(v):
    return None if 0 < v < 1 else "must lie in (0, 1)"


def _alpha(v):
    return None if 1 < v < 2 else "must lie in the open interval (1, 2)"


def _at_least(k):
    return lambda v: None if v >= k else f"must be at least {k}"


def _interval(v):
    if len(v) != 2 or not all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in v):
        return "must be a pair of numbers [lo, hi]"
    return None if v[0] < v[1] else "must satisfy lo < hi"


def _pair_or_none(v):
    if v is None:
        return None
    return _interval(sorted(v)) if len(v) == 2 else "must be a pair of numbers"


def _u64(v):
    return None if 0 <= v < 2**64 else "must be an unsigned 64-bit integer"


def _one_of(*opts):
    return lambda v: None if v in opts else f"must be one of {list(opts)}"


def _x0(v):
    if isinstance(v, str):
        return None if v == "manifold" else "must be a number or \"manifold\""
    return None


NUM = (int, float)

SCHEMA: dict[str, dict[str, Field]] = {
    "model": {
        "name": Field("example", str),
        "Lambda": Field(None, (list, type(None)), lambda v: None if v is None else _interval(v)),
        "L_f": Field(None, NUM + (type(None),)),
        "L_g": Field(None, NUM + (type(None),)),
        "K": Field(None, NUM + (type(None),)),
        "gamma": Field(None, NUM + (type(None),)),
        "beta": Field(None, NUM + (type(None),)),
    },
    "noise": {
        "alpha": Field(REQUIRED, NUM, _alpha),
        "sigma": Field(REQUIRED, NUM, _nonneg),
    },
    "dynamics": {
        "eps": Field(REQUIRED, NUM, _open_unit),
        "dt": Field(1e-3, NUM, _positive),
        "T": Field(1.0, NUM, _positive),
        "substep_ratio": Field(None, (int, type(None)), lambda v: None if v is None else _at_least(1)(v)),
        "lambda0": Field(1.0, NUM),
        "x0": Field("manifold", NUM + (str,), _x0),
        "y0": Field(0.2, NUM),
        "cap": Field(1e6, NUM, _positive),
    },
    "manifold": {
        "order": Field(1, int, _one_of(0, 1)),
        "quad_dt": Field(0.005, NUM, _positive),
        "tol": Field(1e-6, NUM, _open_unit),
        "T_trunc": Field(None, NUM + (type(None),), lambda v: None if v is None else _positive(v)),
        "zeta_step": Field(0.01, NUM, _positive),
        "xi_mode": Field("frozen", str, _one_of("frozen", "moving")),
        "shift": Field(True, bool),
    },
    "objective": {
        "p": Field(1.5, NUM, lambda v: None if v > 1 else "must exceed 1"),
        "K_obs": Field(10, int, _at_least(1)),
        "M_rep": Field(5, int, _at_least(1)),
        "L_grid": Field(1001, int, _at_least(2)),
        "crn": Field(True, bool),
        "antithetic": Field(True, bool),
    },
    "optimizer": {
        "initial_simplex": Field(None, (list, type(None)), _pair_or_none),
        "max_iter": Field(100, int, _nonneg),
        "tol_lambda": Field(1e-4, NUM, _positive),
    },
    "observations": {
        "files": Field([], list),
    },
    "reduce": {
        "zeta_min": Field(-3.141592653589793, NUM),
        "zeta_max": Field(3.141592653589793, NUM),
        "zeta_count": Field(101, int, _at_least(2)),
        "threshold": Field(0.1, NUM, _positive),
    },
    "validate": {
        "samples": Field(1_000_000, int, _at_least(1000)),
        "hill_tail_fraction": Field(1e-3, NUM, _open_unit),
        "hypothesis_samples": Field(500, int, _at_least(1)),
    },
    "run": {
        "seed": Field(DEFAULT_SEED, int, _u64),
        "threads": Field(1, int, _at_least(1)),
        "out": Field("out", str),
    },
}

# fields that locate files rather than define the experiment
_NOT_HASHED = {("observations", "files"), ("run", "out"), ("run", "threads")}


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Line number of every ``key = value`` inside a ``[section]`` of a TOML text."""
    lines: dict[tuple[str, str], int] = {}
    section = ""
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        m = re.match(r"^\[\s*([A-Za-z0-9_.\-]+)\s*\]", line)
        if m:
            section = m.group(1)
            lines.setdefault((section, ""), no)
            continue
        m = re.match(r"^([A-Za-z0-9_\-]+)\s*=", line)
        if m:
            lines.setdefault((section, m.group(1)), no)
    return lines


def _type_ok(value, kind) -> bool:
    kinds = kind if isinstance(kind, tuple) else (kind,)
    if isinstance(value, bool) and bool not in kinds:
        return False
    if isinstance(value, float) and not math.isfinite(value):
        return False
    return isinstance(value, kinds)


def _kind_name(kind) -> str:
    kinds = kind if isinstance(kind, tuple) else (kind,)
    names = {int: "integer", float: "number", str: "string", bool: "boolean", list: "array", type(None): "unset"}
    return " or ".join(dict.fromkeys(names.get(k, k.__name__) for k in kinds))


def parse_override(item: str) -> tuple[str, str, Any]:
    """``section.key=value`` with a TOML-literal value (bare words become strings)."""
    if "=" not in item:
        raise ConfigError(f"--set {item!r}: expected section.key=value")
    path, _, raw = item.partition("=")
    if path.count(".") != 1:
        raise ConfigError(f"--set {item!r}: expected section.key=value")
    section, key = (s.strip() for s in path.split("."))
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return section, key, value


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]
    source: str = "<defaults>"
    origins: dict[tuple[str, str], str] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def snapshot(self) -> dict:
        """Experiment-defining values (no file locations); basis of the hash."""
        return {
            sec: {k: v for k, v in keys.items() if (sec, k) not in _NOT_HASHED}
            for sec, keys in self.values.items()
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @property
    def seed(self) -> int:
        return int(self.values["run"]["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.values["run"]["out"])

    # builders -------------------------------------------------------------

    def model(self):
        from .models import get_model

        sec = self.values["model"]
        try:
            spec = get_model(sec["name"])
        except KeyError as exc:
            raise ConfigError(f"{self._where('model', 'name')}model.name: {exc.args[0]}") from None
        changes = {k: float(sec[k]) for k in ("L_f", "L_g", "K", "gamma", "beta") if sec[k] is not None}
        if sec["Lambda"] is not None:
            changes["Lambda"] = tuple(float(v) for v in sec["Lambda"])
        return spec.with_constants(**changes) if changes else spec

    def noise(self):
        from .levy import StableNoiseSpec

        return StableNoiseSpec(float(self["noise"]["alpha"]), float(self["noise"]["sigma"]), self.model().n)

    def integrator(self, eps: float | None = None):
        from .dynamics import IntegratorConfig

        d = self["dynamics"]
        return IntegratorConfig(
            dt=float(d["dt"]), T=float(d["T"]), eps=float(eps if eps is not None else d["eps"]),
            substep_ratio=d["substep_ratio"],
        )

    def quad(self):
        from .manifold import QuadratureConfig

        m = self["manifold"]
        T = None if m["T_trunc"] is None else float(m["T_trunc"])
        return QuadratureConfig(dt=float(m["quad_dt"]), tol=float(m["tol"]), T_trunc=T)

    def objective(self):
        from .estimator import ObjectiveConfig

        o = self["objective"]
        return ObjectiveConfig(
            p=float(o["p"]), K_obs=o["K_obs"], M_rep=o["M_rep"], L_grid=o["L_grid"],
            T=float(self["dynamics"]["T"]), crn=o["crn"], antithetic=o["antithetic"],
        )

    def optimizer(self):
        from .estimator import NMConfig

        o = self["optimizer"]
        init = None if o["initial_simplex"] is None else tuple(float(v) for v in o["initial_simplex"])
        return NMConfig(initial_simplex=init, max_iter=o["max_iter"], tol_lambda=float(o["tol_lambda"]))

    def factory(self, eps: float | None = None):
        from .estimator import ManifoldFactory

        m = self["manifold"]
        return ManifoldFactory(
            self.model(), self.noise(), float(eps if eps is not None else self["dynamics"]["eps"]), self.quad(),
            order=m["order"], zeta_step=float(m["zeta_step"]), shift=m["shift"], xi_mode=m["xi_mode"],
            antithetic=self["objective"]["antithetic"], T_fwd=float(self["dynamics"]["T"]),
        )

    def initial_state(self):
        """``(x0, y0)``; ``x0 = "manifold"`` puts the fast variable on the noise-free slow manifold."""
        import numpy as np

        from .levy import StationaryPath
        from .manifold import h0

        model = self.model()
        d = self["dynamics"]
        y0 = np.full(model.m, float(d["y0"]))
        if d["x0"] != "manifold":
            return np.full(model.n, float(d["x0"])), y0
        quad = self.quad().resolved(model)
        t = quad.dt * np.arange(-quad.n_window, 1)
        quiet = StationaryPath(t, np.zeros((len(t), model.n)), quad.T_trunc)
        return h0(y0, quiet, model, quad, sigma=0.0), y0

    def _where(self, section: str, key: str) -> str:
        return self.origins.get((section, key), "")

    def validate_objects(self) -> None:
        """Build every object once so that cross-field constraints surface as ConfigError."""
        checks = [
            ("dynamics", "eps", self.integrator),
            ("noise", "alpha", self.noise),
            ("manifold", "tol", lambda: self.quad().resolved(self.model())),
            ("objective", "p", self.objective),
            ("optimizer", "initial_simplex", lambda: self.optimizer().start(self._Lambda())),
        ]
        for section, key, build in checks:
            try:
                build()
            except ConfigError:
                raise
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{self._where(section, key)}{section}: {exc}") from None
        p, alpha = self["objective"]["p"], self["noise"]["alpha"]
        if not p < alpha:
            raise ConfigError(f"{self._where('objective', 'p')}objective.p: must be below noise.alpha={alpha}, got {p}")
        lam0 = self["dynamics"]["lambda0"]
        lo, hi = self._Lambda()
        if not lo <= lam0 <= hi:
            raise ConfigError(
                f"{self._where('dynamics', 'lambda0')}dynamics.lambda0: {lam0} outside Lambda=[{lo}, {hi}]"
            )
        L = self["objective"]["L_grid"]
        n = self.integrator().n_steps
        if n % (L - 1):
            raise ConfigError(
                f"{self._where('objective', 'L_grid')}objective.L_grid: {L - 1} intervals do not divide the {n} time steps"
            )

    def _Lambda(self) -> tuple[float, float]:
        return self.model().Lambda


def _validate(values: dict, origins: dict) -> dict:
    out: dict[str, dict[str, Any]] = {}
    for section, fields in SCHEMA.items():
        given = values.get(section, {})
        if not isinstance(given, dict):
            raise ConfigError(f"{origins.get((section, ''), '')}{section}: must be a table")
        for key in given:
            if key not in fields:
                where = origins.get((section, key), "")
                raise ConfigError(f"{where}{section}.{key}: unknown field (known: {', '.join(fields)})")
        out[section] = {}
        for key, spec in fields.items():
            where = origins.get((section, key), "")
            if key in given:
                value = given[key]
            elif spec.default is REQUIRED:
                raise ConfigError(f"{origins.get((section, ''), '')}{section}.{key}: required field is missing")
            else:
                value = spec.default
            if not _type_ok(value, spec.kind):
                raise ConfigError(f"{where}{section}.{key}: expected {_kind_name(spec.kind)}, got {value!r}")
            if spec.check is not None and value is not None:
                msg = spec.check(value)
                if msg:
                    raise ConfigError(f"{where}{section}.{key}: {msg}, got {value!r}")
            out[section][key] = list(value) if isinstance(value, list) else value
    for section in values:
        if section not in SCHEMA:
            raise ConfigError(f"{origins.get((section, ''), '')}{section}: unknown section (known: {', '.join(SCHEMA)})")
    return out


def load_config(path: str | Path | None = None, overrides: dict[tuple[str, str], Any] | None = None) -> RunConfig:
    """Read, merge and validate a configuration.

    ``overrides`` maps ``(section, key)`` to a value and wins over the file.
    """
    raw: dict = {}
    origins: dict[tuple[str, str], str] = {}
    source = "<defaults>"
    if path is not None:
        p = Path(path)
        source = str(p)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"{p}: cannot read config ({exc.strerror})") from None
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        origins = {k: f"{p}:{line}: " for k, line in _key_lines(text).items()}
    for (section, key), value in (overrides or {}).items():
        raw.setdefault(section, {})
        if not isinstance(raw[section], dict):
            raise ConfigError(f"{section}: must be a table")
        raw[section][key] = value
        origins[(section, key)] = "command line: "
    cfg = RunConfig(_validate(raw, origins), source, origins)
    cfg.validate_objects()
    return cfg
