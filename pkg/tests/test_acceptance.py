"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Seeds are fixed in advance (0-9 for the repeated-run criteria, 0-19 for the
tracking median, 0 for single-sample statistics) and never tuned.  Two
sub-criteria are marked strict xfail: they are not met by the method at the
stated tolerance, and the analysis is recorded in the decision log.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from slowfit.cli import main
from slowfit.config import load_config
from slowfit.estimator import (
    NMConfig,
    estimate,
    generate_observations,
    grid_scan,
    observation_streams,
    stochastic_nelder_mead,
)
from slowfit.levy import SeededStream, StableNoiseSpec, empirical_cf, hill_estimator, sample_stable
from slowfit.manifold import QuadratureConfig, Realization, h0, h1
from slowfit.models import example_h1_explicit, example_model

EXAMPLE = Path(__file__).resolve().parents[1] / "configs" / "example.toml"
REPEAT_SEEDS = range(10)
EPS_LADDER = (0.04, 0.02, 0.01)

pytestmark = pytest.mark.slow


@pytest.fixture
def report(capsys):
    def emit(k, passed, detail):
        with capsys.disabled():
            print(f"\nCRITERION {k}: {'PASS' if passed else 'FAIL'} {detail}")
        return passed

    return emit


def _example(seed):
    cfg = load_config(EXAMPLE, {("run", "seed"): seed})
    model = cfg.model()
    x0, y0 = cfg.initial_state()
    obs = generate_observations(
        model, cfg["dynamics"]["lambda0"], cfg.integrator(), cfg.noise(),
        observation_streams(seed, cfg["objective"]["K_obs"]), x0=x0, y0=y0,
    )
    return cfg, model, obs


def test_criterion_1_estimate_recovers_lambda(report):
    hits, lams = 0, []
    for seed in REPEAT_SEEDS:
        cfg, model, obs = _example(seed)
        rep = estimate(model, obs, model.Lambda, cfg.objective(), cfg.optimizer(), cfg.factory(), seed=seed)
        lams.append(round(rep.lambda_E, 4))
        hits += abs(rep.lambda_E - 1.0) <= 0.05 and rep.iterations <= 50
    ok = report("1", hits >= 8, f"{hits}/10 runs with |lambda_E - 1| <= 0.05 in <= 50 iterations; lambda_E = {lams}")
    assert ok


@pytest.fixture(scope="module")
def tracking_medians(example_tracking):
    return {eps: float(np.median(errs)) for eps, errs in example_tracking.items()}


def test_criterion_2a_tracking_error_small(report, tracking_medians):
    med = tracking_medians[0.01]
    assert report("2a", med <= 0.1, f"median time-averaged |y_full - y_reduced| at eps=0.01 over 20 seeds = {med:.6f} (bound 0.1)")


@pytest.mark.xfail(
    strict=True,
    reason="the eps-independent error from freezing xi at its initial value dominates; "
    "medians are flat to within 1e-5 across eps (see decision log)",
)
def test_criterion_2b_tracking_error_monotone_in_eps(report, tracking_medians):
    meds = [tracking_medians[e] for e in EPS_LADDER]
    ok = all(b <= a for a, b in zip(meds, meds[1:]))
    report("2b", ok, "medians for eps = " + ", ".join(f"{e}: {m:.6f}" for e, m in zip(EPS_LADDER, meds)))
    assert ok


@pytest.fixture(scope="module")
def frozen_path():
    model = example_model()
    noise = StableNoiseSpec(1.8, 0.05, 1)
    quad = QuadratureConfig().resolved(model)
    return model, noise, quad, Realization.simulate(model, noise, quad, quad.dt, SeededStream(0, 0)).xi_path


def test_criterion_3_zero_order_manifold(report, frozen_path):
    model, noise, quad, xi = frozen_path
    zetas = np.linspace(-np.pi, np.pi, 101)
    err = max(abs(h0([z], xi, model, quad, sigma=noise.sigma)[0] - 0.25 * np.cos(z)) for z in zetas)
    assert report("3", err < 1e-6, f"max |h0 - cos(zeta)/4| on 101 points = {err:.3e} (bound 1e-6)")


def test_criterion_4_first_order_oracle(report, frozen_path):
    model, noise, quad, xi = frozen_path
    errs = [
        abs(h1([z], xi, model, 1.0, quad, sigma=noise.sigma)[0] - example_h1_explicit(z, xi, 1.0, noise.sigma, quad.T_trunc))
        for z in (0.5, 1.0, 2.0)
    ]
    assert report("4", max(errs) < 1e-4, f"max |h1 - explicit| at zeta in {{0.5, 1, 2}} = {max(errs):.3e} (bound 1e-4)")


@pytest.fixture(scope="module")
def stable_samples():
    return sample_stable(StableNoiseSpec(1.8), SeededStream(0, 0), 1_000_000)[:, 0]


def test_criterion_5_sampler_statistics(report, stable_samples):
    cf = {u: abs(empirical_cf(stable_samples, u) - np.exp(-u**1.8)) for u in (0.5, 1.0, 2.0)}
    hill = hill_estimator(stable_samples, 1e-3)
    ok = max(cf.values()) <= 0.02 and abs(hill - 1.8) <= 0.15
    detail = "cf errors " + ", ".join(f"u={u}: {e:.2e}" for u, e in cf.items()) + f"; Hill index {hill:.4f}"
    assert report("5", ok, detail)


def _moment(x, p):
    return float(np.mean(np.abs(x) ** p))


@pytest.mark.xfail(
    strict=True,
    reason="|X|^1.5 has infinite variance at alpha=1.8, so the 1e4-sample mean fluctuates "
    "beyond 5% for most seeds (see decision log)",
)
def test_criterion_6a_p_moment_stable(report, stable_samples):
    ratio = _moment(stable_samples[:10_000], 1.5) / _moment(stable_samples, 1.5)
    ok = abs(ratio - 1.0) <= 0.05
    report("6a", ok, f"1.5-moment ratio 1e4/1e6 samples = {ratio:.4f} (bound |ratio - 1| <= 0.05)")
    assert ok


def test_criterion_6b_second_moment_grows(report, stable_samples):
    growth = _moment(stable_samples, 2.0) / _moment(stable_samples[:10_000], 2.0)
    assert report("6b", growth > 2.0, f"second-moment growth 1e4 -> 1e6 samples = {growth:.3f} (bound > 2)")


def test_criterion_7_optimizer_sanity(report):
    res = stochastic_nelder_mead(lambda lam, b: (lam - 2.0) ** 2, (0.0, 5.0), NMConfig(tol_lambda=1e-7))
    lam = res.state.best.lam
    ok = abs(lam - 2.0) <= 1e-6 and res.state.iteration <= 60
    assert report("7", ok, f"lambda = {lam:.9f} after {res.state.iteration} iterations")


def test_criterion_8_objective_landscape(report):
    grid = np.linspace(0.2, 3.0, 21)
    cell = grid[1] - grid[0]
    hits, argmins = 0, []
    for seed in REPEAT_SEEDS:
        cfg, model, obs = _example(seed)
        assert cfg.objective().crn
        rows = grid_scan(grid, obs, model, cfg.factory(), cfg.objective(), seed=seed)
        best = rows[np.argmin(rows[:, 1]), 0]
        argmins.append(round(float(best), 2))
        hits += abs(best - 1.0) <= cell + 1e-12
    assert report("8", hits >= 9, f"{hits}/10 grid argmins within one cell of 1; argmins = {argmins}")


def test_criterion_9_determinism(report, tmp_path):
    blobs = []
    for run in ("a", "b"):
        assert main(["estimate", "--config", str(EXAMPLE), "--out", str(tmp_path / run), "--seed", "3"]) == 0
        blobs.append((tmp_path / run / "report.json").read_bytes())
    same = blobs[0] == blobs[1]
    lam = json.loads(blobs[0])["lambda_e"]
    assert report("9", same, f"report.json byte-identical across two runs: {same} (lambda_E = {lam:.6f})")
