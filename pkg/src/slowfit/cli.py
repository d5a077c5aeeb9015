"""Command-line front end: ``simulate``, ``reduce``, ``estimate`` and ``validate``.

Exit codes: 0 ok, 2 configuration error, 3 simulation error, 4 estimation
error, 5 validation failure.  All output goes below the configured output
directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, load_config, parse_override
from .dynamics import SimulationError
from .estimator import (
    EstimationError,
    estimate,
    generate_observations,
    observation_streams,
    tracking_error,
)
from .io import read_trajectories, write_csv, write_json, write_trajectory
from .levy import SeededStream, StableNoiseSpec, empirical_cf, hill_estimator, sample_stable
from .manifold import ManifoldApprox, ManifoldError, Realization, h0, h1
from .models import check_hypotheses, example_h1_explicit

log = logging.getLogger("slowfit")

EXIT_OK, EXIT_CONFIG, EXIT_SIM, EXIT_EST, EXIT_VALIDATE = 0, 2, 3, 4, 5


def _meta(cfg: RunConfig, command: str, extra: dict | None = None) -> dict:
    meta = {"command": command, "config_hash": cfg.config_hash, "seeds": {"seed": cfg.seed}}
    if extra:
        meta.update(extra)
    return meta


def _observations(cfg: RunConfig):
    files = cfg["observations"]["files"]
    if files:
        base = Path(cfg.source).parent if cfg.source != "<defaults>" else Path(".")
        paths = [Path(f) if Path(f).is_absolute() else base / f for f in files]
        return read_trajectories(paths)
    model = cfg.model()
    x0, y0 = cfg.initial_state()
    return generate_observations(
        model, float(cfg["dynamics"]["lambda0"]), cfg.integrator(), cfg.noise(),
        observation_streams(cfg.seed, cfg["objective"]["K_obs"]), x0=x0, y0=y0, cap=float(cfg["dynamics"]["cap"]),
    )


def cmd_simulate(cfg: RunConfig) -> int:
    out = cfg.out_dir
    model = cfg.model()
    x0, y0 = cfg.initial_state()
    from .dynamics import integrate_full

    paths = integrate_full(
        model, float(cfg["dynamics"]["lambda0"]), x0, y0, cfg.integrator(), cfg.noise(),
        observation_streams(cfg.seed, cfg["objective"]["K_obs"]), cap=float(cfg["dynamics"]["cap"]),
    )
    (out / "paths").mkdir(parents=True, exist_ok=True)
    meta = _meta(cfg, "simulate")
    files = []
    for j in range(paths.n_paths):
        name = f"paths/path_{j:03d}.csv"
        write_trajectory(out / name, paths, j, meta)
        files.append(name)
    write_json(
        out / "manifest.json",
        {
            **meta,
            "files": files,
            "streams": [s.as_dict() for s in paths.seeds],
            "aborted_paths": paths.aborted,
            "lambda0": paths.lambda_used,
            "config": cfg.snapshot(),
        },
    )
    return EXIT_OK


def cmd_reduce(cfg: RunConfig) -> int:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.model()
    lam = float(cfg["dynamics"]["lambda0"])
    int_cfg = cfg.integrator()
    x0, y0 = cfg.initial_state()
    stream = SeededStream(cfg.seed, 0)
    m = cfg["manifold"]
    errs, full, reduced = tracking_error(
        model, lam, x0, y0, int_cfg, cfg.noise(), [stream], quad=cfg.quad(), order=m["order"], xi_mode=m["xi_mode"]
    )
    meta = _meta(cfg, "reduce", {"stream": full.seeds[0].as_dict()})

    factory = cfg.factory()
    manifold = ManifoldApprox(
        factory.realizations(stream)[:1], int_cfg.eps, lam, order=m["order"], zeta_step=float(m["zeta_step"])
    )
    r = cfg["reduce"]
    zetas = np.linspace(float(r["zeta_min"]), float(r["zeta_max"]), r["zeta_count"])
    rows = manifold.cross_section(zetas.reshape(-1, model.m) if model.m > 1 else zetas)
    idx = lambda p: [f"{p}{i + 1}" for i in range(model.n)]  # noqa: E731
    header = [f"zeta{i + 1}" for i in range(model.m)] + idx("h0_") + idx("h1_") + idx("h_tilde_")
    write_csv(out / "manifold_cross_section.csv", header, rows, meta)

    diff = np.linalg.norm(full.y[0] - reduced[0], axis=-1)
    cols = [int_cfg.t_grid[:, None], full.y[0], reduced[0], diff[:, None]]
    header = ["t"] + [f"y_full{i + 1}" for i in range(model.m)] + [f"y_reduced{i + 1}" for i in range(model.m)] + ["abs_diff"]
    write_csv(out / "reduce_comparison.csv", header, np.hstack(cols), meta)

    threshold = float(r["threshold"])
    write_json(
        out / "reduce_summary.json",
        {
            **meta,
            "mean_abs_diff": float(errs[0]),
            "integrated_abs_diff": float(errs[0] * int_cfg.T),
            "threshold": threshold,
            "within_threshold": bool(errs[0] <= threshold),
            "aborted_paths": full.aborted,
            "config": cfg.snapshot(),
        },
    )
    return EXIT_OK


def cmd_estimate(cfg: RunConfig, threads: int = 1) -> int:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    model = cfg.model()
    try:
        obs = _observations(cfg)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"observations: {exc}") from None
    report = estimate(
        model, obs, model.Lambda, cfg.objective(), cfg.optimizer(), cfg.factory(),
        seed=cfg.seed, threads=threads, config_snapshot=cfg.snapshot(),
    )
    meta = _meta(cfg, "estimate")
    payload = {"config_hash": cfg.config_hash, **report.to_dict()}
    write_json(out / "report.json", payload)
    write_csv(out / "trace.csv", ["iteration", "lambda", "f_hat", "stderr"], report.trace_rows(), meta)
    for w in report.warnings:
        log.warning("%s", w)
    return EXIT_OK


def _check(name: str, passed: bool, **details) -> dict:
    return {"name": name, "passed": bool(passed), **details}


def cmd_validate(cfg: RunConfig) -> int:
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    v = cfg["validate"]
    noise = cfg.noise()
    model = cfg.model()
    checks = []

    samples = sample_stable(StableNoiseSpec(noise.alpha, 1.0, 1), SeededStream(cfg.seed, 0), v["samples"])
    for u in (0.5, 1.0, 2.0):
        got = empirical_cf(samples, u)
        want = float(np.exp(-abs(u) ** noise.alpha))
        checks.append(_check(f"levy.cf(u={u})", abs(got - want) <= 0.02, value=got, expected=want, tolerance=0.02))
    hill = hill_estimator(samples, float(v["hill_tail_fraction"]))
    checks.append(
        _check("levy.hill", abs(hill - noise.alpha) <= 0.15, value=hill, expected=noise.alpha,
               tolerance=0.15, tail_fraction=float(v["hill_tail_fraction"]))
    )
    blocks = np.array_split(np.ravel(samples), 50)
    mom = float(np.median([b.mean() for b in blocks]))
    se = float(np.std([b.mean() for b in blocks], ddof=1) / np.sqrt(len(blocks)))
    checks.append(_check("levy.symmetry", abs(mom) <= 3 * se, median_of_means=mom, stderr=se))

    report = check_hypotheses(model, v["hypothesis_samples"], SeededStream(cfg.seed, 1))
    for c in report.checks:
        checks.append(_check(f"model.{c.name}", c.passed, detail=c.detail, witness=c.witness))

    quad = cfg.quad().resolved(model)
    real = Realization.simulate(model, noise, quad, quad.dt, SeededStream(cfg.seed, 2))
    lam = float(cfg["dynamics"]["lambda0"])
    zetas = np.linspace(-np.pi, np.pi, 101)
    if model.name in ("example", "example_decoupled") and model.n == model.m == 1:
        err = max(abs(h0([z], real.xi_path, model, quad, sigma=noise.sigma)[0] - 0.25 * np.cos(z)) for z in zetas)
        checks.append(_check("manifold.h0_closed_form", err < 1e-6, max_abs_error=err, tolerance=1e-6))
        if model.name == "example":
            errs = [
                abs(h1([z], real.xi_path, model, lam, quad, sigma=noise.sigma)[0]
                    - example_h1_explicit(z, real.xi_path, lam, noise.sigma, quad.T_trunc))
                for z in (0.5, 1.0, 2.0)
            ]
            checks.append(_check("manifold.h1_explicit", max(errs) < 1e-4, max_abs_error=max(errs), tolerance=1e-4))
    else:
        tab = ManifoldApprox(real, cfg["dynamics"]["eps"], lam, zeta_step=float(cfg["manifold"]["zeta_step"]))
        # a grid node, where the tabulated value involves no interpolation
        z = np.full(model.m, 3 * float(cfg["manifold"]["zeta_step"]))
        direct = h0(z, real.xi_path, model, quad, sigma=noise.sigma)
        tabbed = tab.components(z[None], 0.0)[0][0]
        err = float(np.max(np.abs(direct - tabbed)))
        checks.append(_check("manifold.tabulation", err < 1e-10, max_abs_error=err))

    passed = all(c["passed"] for c in checks)
    write_json(
        out / "validation.json",
        {**_meta(cfg, "validate"), "passed": passed, "checks": checks, "model": model.name,
         "constants": model.constants(), "config": cfg.snapshot()},
    )
    for c in checks:
        if not c["passed"]:
            print(f"validation failed: {c['name']}", file=sys.stderr)
    return EXIT_OK if passed else EXIT_VALIDATE


COMMANDS = {"simulate": cmd_simulate, "reduce": cmd_reduce, "estimate": cmd_estimate, "validate": cmd_validate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slowfit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML configuration file")
        p.add_argument("--out", help="output directory (overrides run.out)")
        p.add_argument("--seed", help="unsigned 64-bit master seed (overrides run.seed)")
        p.add_argument("--threads", type=int, help="worker threads (overrides run.threads)")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one configuration value; may be repeated")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = {}
        for item in args.set:
            section, key, value = parse_override(item)
            overrides[(section, key)] = value
        if args.out is not None:
            overrides[("run", "out")] = args.out
        if args.seed is not None:
            try:
                overrides[("run", "seed")] = int(args.seed, 0)
            except ValueError:
                raise ConfigError(f"--seed: expected an unsigned 64-bit integer, got {args.seed!r}") from None
        if args.threads is not None:
            overrides[("run", "threads")] = args.threads
        cfg = load_config(args.config, overrides)
        if args.command == "estimate":
            return cmd_estimate(cfg, threads=cfg["run"]["threads"])
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationError, ManifoldError) as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM
    except EstimationError as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return EXIT_EST


if __name__ == "__main__":
    sys.exit(main())
