"""Experiment runner: config parsing, seeded runs, CSV output and reports.

A config is an INI file with the sections ``[env]``, ``[algo]``,
``[baseline]`` and ``[run]``; see ``configs/`` for complete examples.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import math
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import envs
from .algo import COMPACT, DISCRETE, AlgoConfig, EpisodeLog, EpisodeRecord, run_coptimist, run_optimist
from .cucbvi import run_cucbvi
from .envs import UnsupportedEnvironment

OUTPUT_ENV_VAR = "COPTIMIST_OUTPUT_DIR"
ALGORITHMS = ("optimist", "coptimist", "coptimist2", "cucbvi")
ENVIRONMENTS = ("gridworld", "mountaincar")
COLUMNS = ("episode", "played", "params", "realized_return", "true_J", "pessimistic_estimate",
           "bonus", "budget", "cum_regret")
AGG_CURVES = ("cum_regret", "realized_return", "budget")


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the field name."""


def fmt(x) -> str:
    """Float with 17 significant digits (round-trips exactly)."""
    return format(float(x), ".17g")


def _fmt_params(params) -> str:
    return ";".join(fmt(p) for p in params)


def _parse_params(text: str) -> tuple:
    return tuple(float(t) for t in text.split(";")) if text else ()


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    env: str
    algorithm: str
    algo: AlgoConfig
    baseline_mean: tuple
    seeds: tuple
    env_params: dict = field(default_factory=dict)
    audit: str = "exact"
    output_dir: str = "runs"
    name: str = "experiment"

    def __post_init__(self):
        if self.env not in ENVIRONMENTS:
            raise ConfigError(f"env.name: unknown environment {self.env!r}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algo.name: unknown algorithm {self.algorithm!r}")
        if not self.seeds:
            raise ConfigError("run.seeds: at least one seed is required")
        if self.audit not in ("exact", "mc"):
            raise ConfigError("run.audit: must be 'exact' or 'mc'")
        if self.audit == "exact" and self.env != "gridworld":
            raise ConfigError("run.audit: exact evaluation needs a tabular environment")
        if len(self.baseline_mean) != self.algo.dim:
            raise ConfigError("baseline.mean: dimension differs from algo.box")
        try:
            self.algo.hyper(self.baseline_mean)
        except ValueError as exc:
            raise ConfigError(f"baseline.mean: {exc}") from None

    def make_env(self):
        if self.env == "gridworld":
            return envs.gridworld(**self.env_params)
        return envs.MountainCar(**self.env_params)


def _get(section, key, conv, default=None, required=False):
    name = f"{section.name}.{key}"
    if key not in section:
        if required:
            raise ConfigError(f"{name}: missing required field")
        return default
    raw = section[key].strip()
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} ({exc})") from None


def _floats(text: str) -> tuple:
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text: str) -> tuple:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _optional_float(text: str):
    return None if text.lower() in ("none", "inf", "") else float(text)


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _pairs(text: str) -> tuple:
    vals = _floats(text)
    if len(vals) % 2 or not vals:
        raise ValueError("expected lo hi pairs")
    return tuple((vals[i], vals[i + 1]) for i in range(0, len(vals), 2))


def _grid_mode(text: str) -> str:
    if text not in (COMPACT, DISCRETE):
        raise ValueError(f"expected {COMPACT!r} or {DISCRETE!r}")
    return text


def parse_config(text: str, name: str = "experiment") -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config: {exc}") from None
    for sec in ("env", "algo", "baseline", "run"):
        if not cp.has_section(sec):
            raise ConfigError(f"{sec}: missing section")
    env_s, algo_s, base_s, run_s = cp["env"], cp["algo"], cp["baseline"], cp["run"]

    env_name = _get(env_s, "name", str, required=True)
    env_params = {}
    if env_name == "gridworld":
        for key, conv in (("slip", float), ("horizon", int), ("goal_reward", float),
                          ("trap_reward", float)):
            v = _get(env_s, key, conv)
            if v is not None:
                env_params[key] = v
    elif env_name == "mountaincar":
        h = _get(env_s, "horizon", int)
        if h is not None:
            env_params["horizon"] = h

    algorithm = _get(algo_s, "name", str, required=True)
    sigma = _get(algo_s, "sigma", _floats)
    variances = _get(algo_s, "variances", _floats)
    if sigma is not None:
        if any(s <= 0 for s in sigma):
            raise ConfigError("algo.sigma: must be positive")
        variances = tuple(s * s for s in sigma)
    kwargs = dict(
        alpha=_get(algo_s, "alpha", float, 0.1),
        delta=_get(algo_s, "delta", float, 0.2),
        epsilon=_get(algo_s, "epsilon", float, 1.0),
        episodes=_get(algo_s, "episodes", int, required=True),
        variances=variances or (1.0,),
        box=_get(algo_s, "box", _pairs, ((-5.0, 5.0),)),
        grid_mode=_get(algo_s, "grid", _grid_mode,
                       COMPACT if algorithm == "coptimist2" else DISCRETE),
        grid_points=_get(algo_s, "grid_points", int, 11),
        kappa=_get(algo_s, "kappa", float, 3.0),
        clip=_get(algo_s, "clip", _optional_float),
        known_baseline=_get(base_s, "known", _bool, True),
        baseline_value=_get(base_s, "value", _optional_float),
        nodes=_get(algo_s, "nodes", int, 128),
        audit_rollouts=_get(run_s, "audit_rollouts", int, 200),
        baseline_rollouts=_get(base_s, "rollouts", int, 2000),
    )
    try:
        algo = AlgoConfig(**kwargs)
    except ValueError as exc:
        field_name = str(exc).split()[0]
        raise ConfigError(f"algo.{field_name}: {exc}") from None
    return ExperimentConfig(
        env=env_name, algorithm=algorithm, algo=algo,
        baseline_mean=_get(base_s, "mean", _floats, required=True),
        seeds=_get(run_s, "seeds", _ints, required=True),
        env_params=env_params,
        audit=_get(run_s, "audit", str, "exact" if env_name == "gridworld" else "mc"),
        output_dir=_get(run_s, "output_dir", str, "runs"),
        name=_get(run_s, "name", str, name),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path} ({exc.strerror})") from None
    return parse_config(text, name=path.stem)


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


@dataclass
class SeedSummary:
    seed: int
    final_regret: float
    mean_return: float
    min_budget: float
    violations: int
    n_baseline: int
    csv_path: str


@dataclass
class RunSummary:
    config: ExperimentConfig
    seeds: list
    aggregate: dict  # curve name -> (mean, stderr) arrays
    aggregate_path: str

    @property
    def final_regret(self) -> float:
        return float(np.mean([s.final_regret for s in self.seeds]))

    @property
    def violations(self) -> int:
        return sum(s.violations for s in self.seeds)

    @property
    def min_budget(self) -> float:
        return min(s.min_budget for s in self.seeds)

    @property
    def n_baseline(self) -> int:
        return sum(s.n_baseline for s in self.seeds)


def run_single(config: ExperimentConfig, seed: int) -> EpisodeLog:
    env = config.make_env()
    cfg = config.algo
    baseline = cfg.hyper(config.baseline_mean)
    if config.algorithm == "cucbvi":
        return run_cucbvi(env, baseline, cfg, seed)
    if config.algorithm == "optimist":
        return run_optimist(env, cfg, seed, baseline=baseline, track=True)
    return run_coptimist(env, baseline, cfg, seed, track=True)


def write_log_csv(log: EpisodeLog, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in log.records:
            w.writerow([r.episode, r.played, _fmt_params(r.params), fmt(r.realized_return),
                        fmt(r.true_J), fmt(r.pessimistic_estimate), fmt(r.bonus), fmt(r.budget),
                        fmt(r.cum_regret)])


def write_trace_csv(log: EpisodeLog, path) -> None:
    """Per-episode estimate and bonus of every scored hyperpolicy."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("episode", "params", "estimate", "bonus"))
        # the first episode is a bootstrap with no scores
        for k, scores in enumerate(log.trace, start=2):
            for params in sorted(scores):
                est, bonus = scores[params]
                w.writerow([k, _fmt_params(params), fmt(est), fmt(bonus)])


def read_log_csv(path, trace_path=None) -> EpisodeLog:
    log = EpisodeLog()
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        log.records.append(EpisodeRecord(
            int(row["episode"]), row["played"], _parse_params(row["params"]),
            float(row["realized_return"]), float(row["true_J"]),
            float(row["pessimistic_estimate"]), float(row["bonus"]), math.nan,
            float(row["budget"]), float(row["cum_regret"])))
    if trace_path is not None and Path(trace_path).exists():
        by_ep: dict = {}
        with open(trace_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                by_ep.setdefault(int(row["episode"]), {})[_parse_params(row["params"])] = (
                    float(row["estimate"]), float(row["bonus"]))
        log.trace = [by_ep.get(k, {}) for k in range(2, len(log.records) + 1)]
    return log


def aggregate_csvs(paths, out_path) -> dict:
    """Mean and standard error over seeds of each curve, read back from CSV."""
    curves = {c: [] for c in AGG_CURVES}
    for p in paths:
        with open(p, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        for c in AGG_CURVES:
            curves[c].append([float(r[c]) for r in rows])
    out = {}
    for c, vals in curves.items():
        a = np.asarray(vals)
        mean = a.mean(axis=0)
        se = a.std(axis=0, ddof=1) / math.sqrt(a.shape[0]) if a.shape[0] > 1 \
            else np.zeros(a.shape[1])
        out[c] = (mean, se)
    n = len(next(iter(out.values()))[0])
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["episode"] + [f"{c}_{s}" for c in AGG_CURVES for s in ("mean", "stderr")])
        for i in range(n):
            w.writerow([i + 1] + [fmt(out[c][j][i]) for c in AGG_CURVES for j in (0, 1)])
    return out


def _run_seed(args):
    config, seed, out_dir, stem = args
    log = run_single(config, seed)
    path = out_dir / f"{stem}_seed{seed}.csv"
    write_log_csv(log, path)
    if log.trace:
        write_trace_csv(log, out_dir / f"{stem}_seed{seed}_trace.csv")
    budget = log.column("budget")
    return SeedSummary(seed, float(log.records[-1].cum_regret),
                       float(log.column("realized_return").mean()), float(budget.min()),
                       log.violations, log.n_baseline, str(path))


def resolve_output_dir(config: ExperimentConfig, output_dir=None) -> Path:
    out = output_dir or os.environ.get(OUTPUT_ENV_VAR) or config.output_dir
    return Path(out)


def run_experiment(config: ExperimentConfig, output_dir=None, jobs: int = 1,
                   stem: str | None = None) -> RunSummary:
    """Run every seed, write per-seed CSVs and the aggregate CSV.

    The output directory is ``output_dir`` if given, else the value of the
    ``COPTIMIST_OUTPUT_DIR`` environment variable, else ``run.output_dir``.
    """
    if config.algorithm == "cucbvi" and config.env != "gridworld":
        raise UnsupportedEnvironment("cucbvi needs a tabular environment")
    out_dir = resolve_output_dir(config, output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or config.name
    tasks = [(config, s, out_dir, stem) for s in config.seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            seeds = list(ex.map(_run_seed, tasks))
    else:
        seeds = [_run_seed(t) for t in tasks]
    agg_path = out_dir / f"{stem}_aggregate.csv"
    agg = aggregate_csvs([s.csv_path for s in seeds], agg_path)
    return RunSummary(config, seeds, agg, str(agg_path))


def sigma_sweep(config: ExperimentConfig, sigma_values, output_dir=None,
                jobs: int = 1) -> dict:
    """One run-set per hyperpolicy standard deviation, in the given order."""
    if config.algorithm == "cucbvi":
        raise ConfigError("algo.name: the sigma sweep needs a hyperpolicy algorithm")
    sigmas = [float(s) for s in sigma_values]
    if not sigmas:
        raise ValueError("at least one sigma value is required")
    if any(not s > 0 for s in sigmas):
        raise ValueError("sigma values must be positive")
    out = {}
    for s in sigmas:
        cfg = replace(config, algo=replace(config.algo, variances=(s * s,) * config.algo.dim))
        out[s] = run_experiment(cfg, output_dir, jobs, stem=f"{config.name}_sigma{s:g}")
    return out


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------


@dataclass
class PolicyReport:
    rows: list  # (params, final estimate, final bonus, pulls), best first
    series: dict  # params -> (estimates, bonuses) per scored episode, nan when absent
    pulls: dict  # params -> optimistic plays, over every policy played


def top_policy_report(log: EpisodeLog, top_n: int) -> PolicyReport:
    """Top vertices by final estimate + bonus, with their histories and pulls."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    if not log.trace:
        raise ValueError("log has no score trace")
    pulls: dict = {}
    for r in log.records:
        if r.played == "opt":
            pulls[r.params] = pulls.get(r.params, 0) + 1
    final = log.trace[-1]
    if log.grid is not None:
        keep = {tuple(float(x) for x in v) for v in log.grid.vertices}
        final = {p: val for p, val in final.items() if p in keep}
    ranked = sorted(final, key=lambda p: (-(final[p][0] + final[p][1]), p))[:top_n]
    series = {}
    for p in ranked:
        est = np.array([t.get(p, (math.nan, math.nan))[0] for t in log.trace])
        bon = np.array([t.get(p, (math.nan, math.nan))[1] for t in log.trace])
        series[p] = (est, bon)
    rows = [(p, final[p][0], final[p][1], pulls.get(p, 0)) for p in ranked]
    return PolicyReport(rows, series, pulls)


def report_logdir(logdir, top_n: int, out=None) -> dict:
    """Print a top-policy table for each per-seed log found in ``logdir``."""
    out = out or sys.stdout
    logdir = Path(logdir)
    paths = sorted(p for p in logdir.glob("*_seed*.csv") if re.search(r"_seed\d+$", p.stem))
    if not paths:
        raise FileNotFoundError(f"no per-seed logs in {logdir}")
    reports = {}
    for p in paths:
        trace = p.with_name(p.stem + "_trace.csv")
        log = read_log_csv(p, trace)
        if not log.trace:
            print(f"{p.name}: no score trace, skipped", file=out)
            continue
        rep = top_policy_report(log, top_n)
        reports[p.stem] = rep
        print(f"{p.name}  (optimistic plays: {sum(rep.pulls.values())})", file=out)
        print(f"  {'policy':<28}{'estimate':>14}{'bonus':>14}{'pulls':>8}", file=out)
        for params, est, bonus, n in rep.rows:
            print(f"  {_fmt_params(params):<28}{est:>14.6g}{bonus:>14.6g}{n:>8d}", file=out)
        series_path = p.with_name(p.stem + f"_top{top_n}.csv")
        with open(series_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("episode", "rank", "params", "estimate", "bonus"))
            for rank, (params, *_rest) in enumerate(rep.rows, start=1):
                est, bon = rep.series[params]
                for i, (e, b) in enumerate(zip(est, bon)):
                    w.writerow([i + 2, rank, _fmt_params(params), fmt(e), fmt(b)])
    return reports


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _print_summary(label: str, s: RunSummary, out=None) -> None:
    out = out or sys.stdout
    print(f"{label}: final regret {s.final_regret:.6g}, violations {s.violations}, "
          f"min budget {s.min_budget:.6g}, baseline plays {s.n_baseline}", file=out)
    for seed in s.seeds:
        print(f"  seed {seed.seed}: regret {seed.final_regret:.6g} violations {seed.violations}"
              f" -> {seed.csv_path}", file=out)
    print(f"  aggregate -> {s.aggregate_path}", file=out)


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors: exit 1, not argparse's 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("-o", "--output-dir", default=argparse.SUPPRESS,
                        help=f"overrides ${OUTPUT_ENV_VAR} and the config")
    common.add_argument("-j", "--jobs", type=int, default=argparse.SUPPRESS,
                        help="seeds run in parallel")
    p = _Parser(prog="coptimist", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="run one experiment config")
    r.add_argument("config")
    s = sub.add_parser("sweep", parents=[common],
                       help="repeat a config over hyperpolicy standard deviations")
    s.add_argument("config")
    s.add_argument("--sigma", required=True,
                   help="comma-separated standard deviations, e.g. 0.5,1,2")
    t = sub.add_parser("report", help="top policies of each run in a log directory")
    t.add_argument("logdir")
    t.add_argument("--top", type=int, default=5)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args.output_dir = getattr(args, "output_dir", None)
    args.jobs = getattr(args, "jobs", 1)
    try:
        if args.command == "run":
            cfg = load_config(args.config)
            _print_summary(cfg.name, run_experiment(cfg, args.output_dir, args.jobs))
        elif args.command == "sweep":
            cfg = load_config(args.config)
            try:
                sigmas = [float(x) for x in args.sigma.split(",") if x.strip()]
            except ValueError:
                raise ConfigError(f"--sigma: cannot parse {args.sigma!r}") from None
            if not sigmas or any(not x > 0 for x in sigmas):
                raise ConfigError("--sigma: values must be positive")
            for sig, summary in sigma_sweep(cfg, sigmas, args.output_dir, args.jobs).items():
                _print_summary(f"{cfg.name} sigma={sig:g}", summary)
        else:
            report_logdir(args.logdir, args.top)
    except (ConfigError, UnsupportedEnvironment) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure inside a run
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
