import json
from pathlib import Path

import numpy as np
import pytest

from slowfit.cli import EXIT_CONFIG, EXIT_EST, EXIT_OK, EXIT_SIM, EXIT_VALIDATE, main
from slowfit.config import ConfigError, load_config, parse_override
from slowfit.io import read_csv, read_trajectories

EXAMPLE = Path(__file__).resolve().parents[1] / "configs" / "example.toml"

SMALL = """
[noise]
alpha = 1.8
sigma = 0.05

[dynamics]
eps = 0.01
T = 0.2

[objective]
K_obs = 3
M_rep = 2
L_grid = 201

[optimizer]
tol_lambda = 0.01
max_iter = 20
"""


def write(tmp_path, text, name="run.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(tmp_path, command, text=SMALL, *extra):
    cfg = write(tmp_path, text)
    return main([command, "--config", str(cfg), "--out", str(tmp_path / "out"), *extra])


# ---------------------------------------------------------------- config


def test_example_config_loads():
    cfg = load_config(EXAMPLE)
    assert cfg["noise"]["alpha"] == 1.8 and cfg["dynamics"]["eps"] == 0.01
    assert cfg.model().name == "example"
    assert len(cfg.config_hash) == 16
    x0, y0 = cfg.initial_state()
    assert abs(x0[0] - 0.25 * np.cos(0.2)) < 1e-6 and y0[0] == 0.2


def test_hash_ignores_locations_but_not_experiment():
    base = load_config(EXAMPLE)
    moved = load_config(EXAMPLE, {("run", "out"): "elsewhere", ("run", "threads"): 4})
    changed = load_config(EXAMPLE, {("objective", "p"): 1.2})
    assert base.config_hash == moved.config_hash
    assert base.config_hash != changed.config_hash


def test_override_precedence(tmp_path):
    p = write(tmp_path, SMALL + "\n[run]\nseed = 5\n")
    assert load_config(p)["run"]["seed"] == 5
    assert load_config(p, {("run", "seed"): 9})["run"]["seed"] == 9
    assert load_config(p)["dynamics"]["dt"] == 1e-3  # default


def test_parse_override():
    assert parse_override("objective.p=1.2") == ("objective", "p", 1.2)
    assert parse_override("manifold.xi_mode=moving") == ("manifold", "xi_mode", "moving")
    assert parse_override("model.Lambda=[0.1, 2]") == ("model", "Lambda", [0.1, 2])
    with pytest.raises(ConfigError):
        parse_override("p=1.2")


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("[noise]\nsigma = 0.05\n[dynamics]\neps = 0.01\n", "run.toml:1: noise.alpha: required field is missing"),
        ("[noise]\nalpha = 2.5\nsigma = 0.05\n[dynamics]\neps = 0.01\n", "run.toml:2: noise.alpha: must lie"),
        ("[noise]\nalpha = 1.8\nsigma = 0.05\nbogus = 1\n[dynamics]\neps = 0.01\n", "run.toml:4: noise.bogus: unknown field"),
        ("[noise]\nalpha = 1.8\nsigma = 0.05\n[dynamics]\neps = 'x'\n", "run.toml:5: dynamics.eps: expected"),
        ("[noise]\nalpha = 1.8\nsigma = 0.05\n[dynamics]\neps = 0.01\n[extra]\na = 1\n", "extra: unknown section"),
        ("[noise]\nalpha = 1.5\nsigma = 0.05\n[dynamics]\neps = 0.01\n[objective]\np = 1.6\n", "objective.p: must be below"),
        ("[noise]\nalpha = 1.8\nsigma = 0.05\n[dynamics]\neps = 0.01\nlambda0 = 7.0\n", "dynamics.lambda0"),
        ("[noise]\nalpha = 1.8\nsigma = 0.05\n[dynamics]\neps = 0.01\n[objective]\nL_grid = 300\n", "L_grid"),
        ("[noise]\nalpha = 1.8\nsigma = -1\n[dynamics]\neps = 0.01\n", "noise.sigma"),
        ("[noise\nalpha = 1.8\n", "run.toml"),
    ],
)
def test_invalid_configs_name_field_and_line(tmp_path, text, fragment):
    p = write(tmp_path, text)
    with pytest.raises(ConfigError) as info:
        load_config(p)
    assert fragment in str(info.value)


def test_missing_file_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


# ---------------------------------------------------------------- CLI


def test_cli_config_error_exit_code(tmp_path, capsys):
    code = run(tmp_path, "simulate", "[noise]\nsigma = 0.05\n[dynamics]\neps = 0.01\n")
    assert code == EXIT_CONFIG
    assert "noise.alpha" in capsys.readouterr().err
    assert main(["simulate", "--config", str(EXAMPLE), "--seed", "-3", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_simulate_writes_paths(tmp_path):
    assert run(tmp_path, "simulate") == EXIT_OK
    out = tmp_path / "out"
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(manifest["files"]) == 3
    meta, header, data = read_csv(out / manifest["files"][0])
    assert header == ["t", "x1", "y1"]
    assert data.shape == (201, 3)
    assert meta["config_hash"] == manifest["config_hash"]
    assert meta["stream"] == {"seed": 0, "stream_id": 0}
    raw = (out / manifest["files"][0]).read_bytes()
    assert b"\r" not in raw and raw.startswith(b"# ")


def test_quiet_simulation_is_byte_identical_across_runs(tmp_path):
    text = SMALL.replace("sigma = 0.05", "sigma = 0.0")
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    run(tmp_path / "a", "simulate", text)
    run(tmp_path / "b", "simulate", text)
    for name in ("path_000.csv", "path_001.csv"):
        a = (tmp_path / "a/out/paths" / name).read_bytes()
        b = (tmp_path / "b/out/paths" / name).read_bytes()
        assert a == b
    _, _, d0 = read_csv(tmp_path / "a/out/paths/path_000.csv")
    _, _, d1 = read_csv(tmp_path / "a/out/paths/path_001.csv")
    assert np.array_equal(d0, d1)


def test_reduce_outputs(tmp_path):
    assert run(tmp_path, "reduce") == EXIT_OK
    out = tmp_path / "out"
    summary = json.loads((out / "reduce_summary.json").read_text())
    assert summary["within_threshold"] and summary["threshold"] == 0.1
    _, header, cs = read_csv(out / "manifold_cross_section.csv")
    assert header == ["zeta1", "h0_1", "h1_1", "h_tilde_1"]
    assert cs.shape == (101, 4)
    assert np.max(np.abs(cs[:, 1] - 0.25 * np.cos(cs[:, 0]))) < 1e-5
    _, header, cmp_ = read_csv(out / "reduce_comparison.csv")
    assert header == ["t", "y_full1", "y_reduced1", "abs_diff"]


def test_reduce_decoupled_model_tracks_exactly(tmp_path):
    text = SMALL + '\n[model]\nname = "example_decoupled"\n'
    assert run(tmp_path, "reduce", text) == EXIT_OK
    _, _, cmp_ = read_csv(tmp_path / "out/reduce_comparison.csv")
    assert np.max(cmp_[:, 3]) == 0.0


def test_reduce_error_does_not_grow_when_eps_halves(tmp_path):
    # worked-example config, pre-declared seed 0
    errs = []
    for eps in (0.04, 0.02, 0.01):
        d = tmp_path / str(eps)
        code = main(["reduce", "--config", str(EXAMPLE), "--out", str(d), "--seed", "0", "--set", f"dynamics.eps={eps}"])
        assert code == EXIT_OK
        errs.append(json.loads((d / "reduce_summary.json").read_text())["integrated_abs_diff"])
    assert errs[0] >= errs[1] >= errs[2]


def test_estimate_outputs_and_determinism(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    assert run(tmp_path / "a", "estimate") == EXIT_OK
    assert run(tmp_path / "b", "estimate") == EXIT_OK
    a = (tmp_path / "a/out/report.json").read_bytes()
    assert a == (tmp_path / "b/out/report.json").read_bytes()
    report = json.loads(a)
    assert 0.2 <= report["lambda_e"] <= 3.0
    _, header, trace = read_csv(tmp_path / "a/out/trace.csv")
    assert header == ["iteration", "lambda", "f_hat", "stderr"]
    assert len(trace) == report["evaluations"]


def test_estimate_threads_and_ingestion_equivalent(tmp_path):
    for d in ("sim", "gen", "ing", "thr"):
        (tmp_path / d).mkdir()
    assert run(tmp_path / "gen", "estimate") == EXIT_OK
    assert run(tmp_path / "thr", "estimate", SMALL, "--threads", "2") == EXIT_OK
    gen = json.loads((tmp_path / "gen/out/report.json").read_text())
    thr = json.loads((tmp_path / "thr/out/report.json").read_text())
    assert gen == thr

    assert run(tmp_path / "sim", "simulate") == EXIT_OK
    files = [str(tmp_path / "sim/out/paths" / f"path_{j:03d}.csv") for j in range(3)]
    ingested = read_trajectories(files)
    assert ingested.x is None and ingested.n_paths == 3
    text = SMALL + "\n[observations]\nfiles = [" + ", ".join(json.dumps(f) for f in files) + "]\n"
    assert run(tmp_path / "ing", "estimate", text) == EXIT_OK
    ing = json.loads((tmp_path / "ing/out/report.json").read_text())
    assert ing["lambda_e"] == gen["lambda_e"] and ing["f_value"] == gen["f_value"]
    assert ing["config_hash"] == gen["config_hash"]


def test_estimate_cap_zero_warns(tmp_path):
    text = SMALL.replace("max_iter = 20", "max_iter = 0")
    assert run(tmp_path, "estimate", text) == EXIT_OK
    report = json.loads((tmp_path / "out/report.json").read_text())
    assert report["iterations"] == 0 and report["warnings"]
    assert min(abs(report["lambda_e"] - v) for v in (0.9, 2.3)) < 1e-12


def test_estimate_bad_observation_file(tmp_path):
    text = SMALL + '\n[observations]\nfiles = ["missing.csv", "b.csv", "c.csv"]\n'
    assert run(tmp_path, "estimate", text) == EXIT_CONFIG


def test_estimation_error_exit_code(tmp_path, monkeypatch):
    import slowfit.cli as cli
    from slowfit.estimator import EstimationError

    def boom(*a, **k):
        raise EstimationError("forced")

    monkeypatch.setattr(cli, "estimate", boom)
    assert run(tmp_path, "estimate") == EXIT_EST


def test_simulation_error_exit_code(tmp_path):
    text = SMALL.replace("T = 0.2", "T = 0.2\ncap = 0.21")
    assert run(tmp_path, "simulate", text) == EXIT_SIM


def test_validate_passes_and_fails(tmp_path):
    text = SMALL + "\n[validate]\nsamples = 200000\n"
    assert run(tmp_path, "validate", text) == EXIT_OK
    report = json.loads((tmp_path / "out/validation.json").read_text())
    assert report["passed"] and {c["name"] for c in report["checks"]} >= {"levy.hill", "manifold.h0_closed_form"}
    bad = text + "\n[model]\nL_f = 0.1\n"
    (tmp_path / "x").mkdir()
    assert run(tmp_path / "x", "validate", bad) == EXIT_VALIDATE
    report = json.loads((tmp_path / "x/out/validation.json").read_text())
    failed = [c for c in report["checks"] if not c["passed"]]
    assert [c["name"] for c in failed] == ["model.L_f"] and failed[0]["witness"]


def test_nothing_written_outside_out_dir(tmp_path, monkeypatch):
    work = tmp_path / "work"
    work.mkdir()
    cfg = write(tmp_path, SMALL)
    monkeypatch.chdir(work)
    assert main(["simulate", "--config", str(cfg), "--out", "o"]) == EXIT_OK
    assert [p.name for p in work.iterdir()] == ["o"]
