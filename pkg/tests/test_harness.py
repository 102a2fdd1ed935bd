import csv
import io
import math
import os
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coptimist import harness
from coptimist.harness import (
    COLUMNS, OUTPUT_ENV_VAR, ConfigError, fmt, load_config, main, parse_config,
    read_log_csv, report_logdir, run_experiment, run_single, sigma_sweep, top_policy_report,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = """
[env]
name = gridworld
slip = 0.1

[algo]
name = {algo}
alpha = 0.1
episodes = {episodes}
sigma = 1.0
box = -5 5
grid_points = {points}
clip = 1.0

[baseline]
mean = 0.0

[run]
seeds = 0 1 2
audit = exact
output_dir = {out}
"""


def small(tmp_path, algo="coptimist", episodes=30, points=11):
    return parse_config(SMALL.format(algo=algo, episodes=episodes, points=points,
                                     out=tmp_path / "runs"), "small")


# --- config ---------------------------------------------------------------------------


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.ini")), ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert cfg.name == path.stem and cfg.seeds


def test_config_values(tmp_path):
    cfg = load_config(CONFIGS / "mountaincar_coptimist2.ini")
    assert cfg.algo.variances == (0.15, 3.0) and cfg.algo.box == ((-1, 1), (0, 20))
    assert cfg.algo.grid_mode == "compact" and cfg.algo.alpha == 0.5
    assert cfg.baseline_mean == (-0.5, 2.0) and cfg.audit == "mc"
    g = small(tmp_path)
    assert g.algo.variances == (1.0,) and g.algo.clip == 1.0


@pytest.mark.parametrize("old,new,field", [
    ("alpha = 0.1", "alpha = 1.5", "algo.alpha"),
    ("alpha = 0.1", "alpha = lots", "algo.alpha"),
    ("episodes = 30", "", "algo.episodes"),
    ("name = gridworld", "name = cartpole", "env.name"),
    ("name = coptimist", "name = sarsa", "algo.name"),
    ("sigma = 1.0", "sigma = -1", "algo.sigma"),
    ("mean = 0.0", "mean = 0.0 1.0", "baseline.mean"),
    ("mean = 0.0", "mean = 9.0", "baseline.mean"),
    ("seeds = 0 1 2", "seeds = ", "run.seeds"),
    ("box = -5 5", "box = -5", "algo.box"),
    ("[run]", "[runs]", "run"),
])
def test_config_errors_name_the_field(tmp_path, old, new, field):
    text = SMALL.format(algo="coptimist", episodes=30, points=11, out=tmp_path).replace(old, new)
    with pytest.raises(ConfigError, match=f"^{field}"):
        parse_config(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "nope.ini")


# --- CSV output --------------------------------------------------------------------------


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_fmt_round_trips(x):
    assert float(fmt(x)) == x


def test_fmt_has_17_significant_digits():
    assert fmt(0.1) == "0.10000000000000001"
    assert fmt(1 / 3) == "0.33333333333333331"


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("small")
    cfg = small(tmp)
    return cfg, run_experiment(cfg, tmp / "out")


def test_csv_schema(small_run):
    cfg, summary = small_run
    for seed in summary.seeds:
        raw = Path(seed.csv_path).read_bytes()
        raw.decode("utf-8")
        rows = list(csv.reader(io.StringIO(raw.decode())))
        assert tuple(rows[0]) == COLUMNS
        assert len(rows) == cfg.algo.episodes + 1
        assert [int(r[0]) for r in rows[1:]] == list(range(1, cfg.algo.episodes + 1))
        for r in rows[1:]:
            assert r[1] in ("opt", "base")
            for v in r[3:]:
                assert v == fmt(float(v))


def test_csv_round_trip(small_run):
    cfg, summary = small_run
    log = run_single(cfg, cfg.seeds[0])
    back = read_log_csv(summary.seeds[0].csv_path)
    for a, b in zip(log.records, back.records):
        assert (a.episode, a.played, a.realized_return, a.cum_regret) == (
            b.episode, b.played, b.realized_return, b.cum_regret)


def test_aggregate_is_mean_over_seeds(small_run):
    cfg, summary = small_run
    per_seed = [read_log_csv(s.csv_path) for s in summary.seeds]
    with open(summary.aggregate_path, encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == cfg.algo.episodes
    for curve in harness.AGG_CURVES:
        a = np.array([lg.column(curve) for lg in per_seed])
        mean = np.array([float(r[f"{curve}_mean"]) for r in rows])
        se = np.array([float(r[f"{curve}_stderr"]) for r in rows])
        assert np.allclose(mean, a.mean(0), atol=1e-12, rtol=0)
        assert np.allclose(se, a.std(0, ddof=1) / math.sqrt(3), atol=1e-12, rtol=0)


def test_single_episode_budget(tmp_path):
    cfg = small(tmp_path, episodes=1)
    cfg = replace(cfg, seeds=(4,))
    summary = run_experiment(cfg, tmp_path / "k1")
    log = read_log_csv(summary.seeds[0].csv_path)
    assert len(log) == 1
    r = log.records[0]
    j_b = run_single(cfg, 4).baseline_value
    assert r.played == "base"
    assert r.budget == pytest.approx(r.true_J - 0.9 * j_b, abs=1e-12)


def test_rerun_is_byte_identical(tmp_path, small_run):
    cfg, summary = small_run
    again = run_experiment(cfg, tmp_path / "again")
    for a, b in zip(summary.seeds, again.seeds):
        assert Path(a.csv_path).read_bytes() == Path(b.csv_path).read_bytes()
    assert Path(summary.aggregate_path).read_bytes() == Path(again.aggregate_path).read_bytes()


def test_parallel_matches_serial(tmp_path, small_run):
    cfg, summary = small_run
    par = run_experiment(cfg, tmp_path / "par", jobs=2)
    assert Path(par.aggregate_path).read_bytes() == Path(summary.aggregate_path).read_bytes()


def test_env_var_overrides_config_dir(tmp_path, monkeypatch):
    cfg = replace(small(tmp_path, episodes=3), seeds=(0,))
    monkeypatch.setenv(OUTPUT_ENV_VAR, str(tmp_path / "from_env"))
    summary = run_experiment(cfg)
    assert Path(summary.aggregate_path).parent == tmp_path / "from_env"
    explicit = run_experiment(cfg, tmp_path / "explicit")
    assert Path(explicit.aggregate_path).parent == tmp_path / "explicit"


def test_cucbvi_through_harness(tmp_path):
    cfg = replace(small(tmp_path, algo="cucbvi", episodes=20), seeds=(0,))
    summary = run_experiment(cfg, tmp_path / "cu")
    assert summary.violations == 0
    assert not (tmp_path / "cu" / "small_seed0_trace.csv").exists()


# --- sweep -------------------------------------------------------------------------------


def test_sigma_sweep_files_and_order(tmp_path):
    cfg = replace(small(tmp_path, episodes=5), seeds=(0,))
    res = sigma_sweep(cfg, [2.0, 0.5], tmp_path / "sw")
    assert list(res) == [2.0, 0.5]
    assert res[2.0].config.algo.variances == (4.0,)
    names = {p.name for p in (tmp_path / "sw").iterdir()}
    assert {"small_sigma2_seed0.csv", "small_sigma0.5_seed0.csv",
            "small_sigma2_aggregate.csv", "small_sigma0.5_aggregate.csv"} <= names


@pytest.mark.parametrize("bad", [[0.0], [1.0, -2.0], []])
def test_sigma_sweep_rejects_bad_values(tmp_path, bad):
    with pytest.raises(ValueError):
        sigma_sweep(small(tmp_path, episodes=5), bad, tmp_path)


# --- report ------------------------------------------------------------------------------


def test_top_policy_report(small_run):
    cfg, _ = small_run
    log = run_single(cfg, 0)
    rep = top_policy_report(log, 3)
    n_opt = int((log.column("played") == "opt").sum())
    assert sum(rep.pulls.values()) == n_opt
    scores = [est + bon for _, est, bon, _ in rep.rows]
    assert scores == sorted(scores, reverse=True) and len(rep.rows) == 3
    final = {p: e + b for p, (e, b) in log.trace[-1].items()}
    assert scores[0] == max(final.values())
    for params, (est, bon) in rep.series.items():
        assert len(est) == len(log) - 1
    assert len(top_policy_report(log, 1000).rows) == 11
    with pytest.raises(ValueError):
        top_policy_report(log, 0)


def test_report_single_vertex_grid(tmp_path):
    cfg = replace(small(tmp_path, episodes=8, points=1), seeds=(0,))
    log = run_single(cfg, 0)
    rep = top_policy_report(log, 5)
    assert [r[0] for r in rep.rows] == [(0.0,)]


def test_report_logdir_reads_back_csvs(small_run, tmp_path):
    _, summary = small_run
    out = io.StringIO()
    reports = report_logdir(Path(summary.aggregate_path).parent, 2, out)
    assert set(reports) == {"small_seed0", "small_seed1", "small_seed2"}
    direct = top_policy_report(run_single(small_run[0], 0), 2)
    assert [r[0] for r in reports["small_seed0"].rows] == [r[0] for r in direct.rows]
    # a second pass must ignore the files written by the first
    again = report_logdir(Path(summary.aggregate_path).parent, 2, io.StringIO())
    assert set(again) == set(reports)


# --- CLI -----------------------------------------------------------------------------------


def _write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_cli_run_and_report(tmp_path, capsys):
    p = _write(tmp_path, SMALL.format(algo="coptimist", episodes=6, points=3, out=tmp_path))
    assert main(["run", str(p), "-o", str(tmp_path / "cli")]) == 0
    assert (tmp_path / "cli" / "c_aggregate.csv").exists()
    assert main(["report", str(tmp_path / "cli"), "--top", "2"]) == 0
    assert "estimate" in capsys.readouterr().out


def test_cli_sweep(tmp_path):
    p = _write(tmp_path, SMALL.format(algo="optimist", episodes=4, points=3, out=tmp_path))
    assert main(["-o", str(tmp_path / "sw"), "sweep", str(p), "--sigma", "1,3"]) == 0
    assert (tmp_path / "sw" / "c_sigma3_aggregate.csv").exists()
    assert main(["sweep", str(p), "--sigma", "1,-3"]) == 1
    assert main(["sweep", str(p), "--sigma", "x"]) == 1


def test_cli_config_errors_exit_1(tmp_path):
    assert main(["run", str(tmp_path / "missing.ini")]) == 1
    bad = _write(tmp_path, SMALL.format(algo="coptimist", episodes=6, points=3,
                                        out=tmp_path).replace("alpha = 0.1", "alpha = 2"))
    assert main(["run", str(bad)]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


def test_cli_runtime_error_exits_2(tmp_path, monkeypatch):
    p = _write(tmp_path, SMALL.format(algo="coptimist", episodes=3, points=3, out=tmp_path))

    def boom(*a, **k):
        raise RuntimeError("simulated failure")

    monkeypatch.setattr(harness, "run_single", boom)
    assert main(["run", str(p)]) == 2
    assert main(["report", str(tmp_path / "empty")]) == 2


def test_cli_subprocess_env_var(tmp_path):
    p = _write(tmp_path, SMALL.format(algo="coptimist", episodes=3, points=3,
                                      out=tmp_path / "cfgdir"))
    env = {**os.environ, OUTPUT_ENV_VAR: str(tmp_path / "envdir")}
    res = subprocess.run([sys.executable, "-m", "coptimist.harness", "run", str(p)],
                         env=env, capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert (tmp_path / "envdir" / "c_aggregate.csv").exists()
    assert not (tmp_path / "cfgdir").exists()
