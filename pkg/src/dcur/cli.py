"""Train teachers and curriculum students, derive datasets and summarise runs.

Subcommands: ``train-teacher``, ``train-student``, ``analyze {metrics,overlap,qvalues}``,
``transform {reorder,shape-time,rollout-gaussian,rollout-uniform}`` and ``run`` for a
whole experiment described by an INI file. Exit status is 0 on success, 1 on a
runtime failure and 2 on a usage error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .analysis import (AnalysisUsageError, MetricReport, OverlapConfig, TimePredictorConfig,
                       q_diagnostic_table, shape_rewards_time, student_overlap,
                       train_overlap_classifier, train_time_predictor, write_overlap_csv,
                       write_q_table_csv)
from .data import DatasetFormatError, load_dataset, parse_curriculum, reorder_by_reward, save_dataset
from .envs import ConfigError, EnvUsageError, make_env
from .nn import CheckpointFormatError, NonFiniteError
from .pipelines import (EvalLog, RunConfig, generate_rollout_gaussian, generate_rollout_uniform,
                        online_cadence, read_eval_log, train_student, train_teacher, write_eval_log)
from .td3 import Td3Config, load_agent, save_agent

DATASET_FILE = "data.dcur"
CHECKPOINT_DIR = "checkpoint"
EVAL_STEM = "eval"
RUNTIME_ERRORS = (ConfigError, EnvUsageError, DatasetFormatError, CheckpointFormatError,
                  NonFiniteError, AnalysisUsageError, OSError, KeyError, ValueError)


class UsageError(Exception):
    """Bad flags or an ill-formed experiment file (exit status 2)."""


# -- argument types ----------------------------------------------------------------

def _curriculum_arg(text):
    try:
        return parse_curriculum(text)
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None


def _online_pct_arg(text):
    try:
        x = float(text)
        online_cadence(x)
    except ValueError as err:
        raise argparse.ArgumentTypeError(str(err)) from None
    return x


def _env_arg(text):
    try:
        make_env(text)
    except ConfigError as err:
        raise argparse.ArgumentTypeError(str(err)) from None
    return text


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def output_root(default: str = "runs") -> Path:
    return Path(os.environ.get("DCUR_OUT") or default)


# -- commands ----------------------------------------------------------------------

def cmd_train_teacher(args) -> int:
    cfg = RunConfig(args.env, "teacher", total_updates=args.steps, epoch_length=args.epoch_length,
                    random_warmup_steps=args.warmup, test_episodes_per_epoch=args.test_episodes,
                    seed=args.seed)
    out = Path(args.out)
    agent, dataset, log = train_teacher(cfg)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out / DATASET_FILE)
    save_agent(agent, out / CHECKPOINT_DIR)
    write_eval_log(log, out, EVAL_STEM)
    final = float(np.mean(log.returns[-1])) if log.returns else float("nan")
    print(f"teacher env={args.env} seed={args.seed} steps={args.steps} tuples={len(dataset)} "
          f"final_return={final:.2f} out={out}")
    return 0


def _student_config(args, dataset_path: str) -> RunConfig:
    transform = None
    if args.shape_time is not None:
        transform = {"kind": "sparse_time" if args.sparse else "time_shaped",
                     "alpha": args.shape_time}
    td3 = Td3Config(batch_size=args.batch_size)
    return RunConfig(args.env, "student", total_updates=args.updates,
                     epoch_length=args.epoch_length, random_warmup_steps=args.warmup,
                     curriculum=args.curriculum, online_percent=args.online_pct,
                     test_episodes_per_epoch=args.test_episodes, seed=args.seed, td3=td3,
                     dataset_path=dataset_path, reward_transform=transform)


def run_student_cell(cfg: RunConfig, out: Path, overlap_states: int = 0,
                     save_checkpoint: bool = False) -> EvalLog:
    """Train one student seed and write its artifacts into ``out``."""
    dataset = load_dataset(cfg.dataset_path)
    if dataset.env_spec.env_id != cfg.env_id:
        raise ConfigError(f"dataset {cfg.dataset_path} was generated on "
                          f"{dataset.env_spec.env_id!r} but the run asks for {cfg.env_id!r}")
    overlaps = []
    hook = None
    if overlap_states:
        def hook(agent, epoch, window):
            overlaps.append(student_overlap(agent, dataset, window, overlap_states,
                                            OverlapConfig(), seed=cfg.seed * 1000 + epoch))
    log = train_student(cfg, dataset, eval_hook=hook)
    out.mkdir(parents=True, exist_ok=True)
    write_eval_log(log, out, EVAL_STEM)
    if overlaps:
        write_overlap_csv(overlaps, out / "overlap.csv")
    if save_checkpoint:
        save_agent(log.final_agent, out / CHECKPOINT_DIR)
    return log


def cmd_train_student(args) -> int:
    if args.from_manifest:
        meta = json.loads(Path(args.from_manifest).read_text())
        cfg = RunConfig.from_dict(meta["config"])
    else:
        if args.dataset is None or args.curriculum is None:
            raise UsageError("train-student needs --dataset and --curriculum (or --from-manifest)")
        dataset_path = str(Path(args.dataset).resolve())
        if args.env is None:
            args.env = load_dataset(dataset_path).env_spec.env_id
        cfg = _student_config(args, dataset_path)
    try:
        cfg.validate()
    except ConfigError as err:
        raise UsageError(str(err)) from None
    if args.out:
        out = Path(args.out)
    else:
        out = output_root() / args.experiment / cfg.cell_name() / str(cfg.seed)
    log = run_student_cell(cfg, out, args.overlap_states, args.save_checkpoint)
    final = float(np.mean(log.returns[-1])) if log.returns else float("nan")
    print(f"student {cfg.cell_name()} seed={cfg.seed} updates={log.gradient_updates} "
          f"skipped={log.skipped_updates} env_steps={log.training_env_steps} "
          f"final_return={final:.2f} out={out}")
    return 0


def discover_runs(root: Path) -> dict:
    """Map ``(env, curriculum, online_percent)`` to ``{seed: EvalLog}`` under ``root/<cell>/<seed>/``."""
    runs: dict = {}
    for manifest in sorted(root.glob(f"*/*/{EVAL_STEM}.json")):
        config = json.loads(manifest.read_text()).get("config", {})
        if config.get("role") != "student":
            continue
        key = (config["env_id"], config["curriculum"], float(config["online_percent"]))
        runs.setdefault(key, {})[int(config["seed"])] = read_eval_log(manifest.with_suffix(".csv"))
    return runs


def _check_expected(runs: dict, expected: list) -> None:
    missing = [f"{env} {cur} X={x:g} seed={seed}" for env, cur, x, seeds in expected
               for seed in seeds if seed not in runs.get((env, cur, x), {})]
    if missing:
        raise ConfigError("missing runs for: " + "; ".join(missing))


def analyze_metrics(root: Path, out: Path, m1_window: int = 100, expected=None) -> MetricReport:
    runs = discover_runs(root)
    if expected is not None:
        _check_expected(runs, expected)
    if not runs:
        raise ConfigError(f"no student runs found under {root}")
    report = MetricReport.from_runs(
        {k: [v[s] for s in sorted(v)] for k, v in runs.items()}, m1_window)
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "metrics.csv")
    (out / "metrics.txt").write_text(report.to_text())
    return report


def analyze_qvalues(root: Path, out: Path, expected=None) -> list[Path]:
    runs = discover_runs(root)
    if expected is not None:
        _check_expected(runs, expected)
    if not runs:
        raise ConfigError(f"no student runs found under {root}")
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for (env, cur, x), seeds in sorted(runs.items()):
        cfg = RunConfig(env, "student", curriculum=parse_curriculum(cur), online_percent=x)
        path = out / f"qvalues_{cfg.cell_name()}.csv"
        write_q_table_csv(q_diagnostic_table([seeds[s] for s in sorted(seeds)]), path)
        written.append(path)
    return written


def _load_states(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path, allow_pickle=False)
    if path.suffix in (".csv", ".txt"):
        return np.loadtxt(path, delimiter=",", ndmin=2)
    return load_dataset(path).states


def cmd_analyze(args) -> int:
    if args.what == "overlap":
        report = train_overlap_classifier(_load_states(args.a), _load_states(args.b),
                                          OverlapConfig(patience=args.patience), seed=args.seed)
        if args.out:
            Path(args.out).parent.mkdir(parents=True, exist_ok=True)
            write_overlap_csv([report], args.out)
        print(f"overlap f_olap={report.f_olap:.4f} accuracy={report.accuracy:.4f} "
              f"n_per_class={report.class_counts[0]}")
        return 0
    root = Path(args.root)
    out = Path(args.out) if args.out else root / "analysis"
    expected = _read_experiment(args.manifest).expected_cells() if args.manifest else None
    if args.what == "metrics":
        report = analyze_metrics(root, out, args.m1_window, expected)
        print(report.to_text(), end="")
    else:
        for path in analyze_qvalues(root, out, expected):
            print(path)
    return 0


def cmd_transform(args) -> int:
    if args.op == "reorder":
        result = reorder_by_reward(load_dataset(args.inp))
    elif args.op == "shape-time":
        dataset = load_dataset(args.inp)
        predictor = train_time_predictor(dataset, TimePredictorConfig(epochs=args.epochs),
                                         seed=args.seed)
        result = shape_rewards_time(dataset, predictor, args.alpha, args.variant, args.sparse)
    elif args.op == "rollout-gaussian":
        result = generate_rollout_gaussian(load_agent(args.checkpoint), args.max_std, args.xi,
                                           args.tuples, args.seed)
    else:
        result = generate_rollout_uniform(load_agent(args.checkpoint), args.max_prob,
                                          args.tuples, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_dataset(result, args.out)
    print(f"transform {args.op} tuples={len(result)} provenance={result.provenance.name} "
          f"out={args.out}")
    return 0


# -- experiment files ----------------------------------------------------------------

class Experiment:
    """An INI experiment description.

    ``[experiment]`` holds ``name``, ``env`` and optionally ``dataset`` and ``output``;
    ``[teacher]`` holds ``steps`` and ``seed`` (used when no dataset is given);
    ``[student]`` holds defaults for every cell; each ``[cell <label>]`` section
    needs ``curriculum``, ``online_pct`` and an explicit ``seeds`` list and may
    override any ``[student]`` key.
    """

    STUDENT_KEYS = {"updates": 60_000, "epoch_length": 4000, "warmup": 1000,
                    "test_episodes": 10, "batch_size": 100, "overlap_states": 0}

    def __init__(self, parser: configparser.ConfigParser, source: Path):
        self.source = source
        if not parser.has_section("experiment"):
            raise UsageError(f"{source}: missing [experiment] section")
        exp = parser["experiment"]
        try:
            self.name = exp["name"]
            self.env_id = exp["env"]
        except KeyError as err:
            raise UsageError(f"{source}: [experiment] needs {err.args[0]!r}") from None
        try:
            make_env(self.env_id)
        except ConfigError as err:
            raise UsageError(f"{source}: {err}") from None
        self.output = exp.get("output", "runs")
        self.dataset = exp.get("dataset")
        teacher = parser["teacher"] if parser.has_section("teacher") else {}
        self.teacher_steps = int(teacher.get("steps", 60_000))
        self.teacher_seed = int(teacher.get("seed", 40))
        self.teacher_epoch_length = int(teacher.get("epoch_length", 4000))
        self.teacher_warmup = int(teacher.get("warmup", 1000))
        defaults = dict(self.STUDENT_KEYS)
        if parser.has_section("student"):
            defaults.update({k: int(v) for k, v in parser["student"].items()})
        self.cells = []
        for section in parser.sections():
            if not section.startswith("cell "):
                continue
            label = section[len("cell "):].strip()
            body = parser[section]
            if "seeds" not in body:
                raise UsageError(f"{source}: [{section}] must list its seeds explicitly")
            try:
                curriculum = parse_curriculum(body["curriculum"])
                online = float(body.get("online_pct", "0"))
                online_cadence(online)
                seeds = [int(s) for s in body["seeds"].replace(",", " ").split()]
            except (KeyError, ValueError) as err:
                raise UsageError(f"{source}: [{section}]: {err}") from None
            if not seeds:
                raise UsageError(f"{source}: [{section}] has an empty seed list")
            options = dict(defaults)
            options.update({k: int(v) for k, v in body.items()
                            if k not in ("curriculum", "online_pct", "seeds")})
            self.cells.append((label, curriculum, online, seeds, options))
        if not self.cells:
            raise UsageError(f"{source}: no [cell <label>] sections")

    def root(self) -> Path:
        return output_root(self.output) / self.name

    def dataset_path(self) -> Path:
        return Path(self.dataset) if self.dataset else self.root() / "teacher" / DATASET_FILE

    def expected_cells(self) -> list:
        return [(self.env_id, str(cur), x, seeds) for _, cur, x, seeds, _ in self.cells]

    def jobs(self) -> list:
        """One ``(RunConfig, output dir, overlap_states)`` triple per (cell, seed)."""
        data = str(self.dataset_path().resolve())
        out = []
        for label, curriculum, online, seeds, o in self.cells:
            for seed in seeds:
                cfg = RunConfig(self.env_id, "student", total_updates=o["updates"],
                                epoch_length=o["epoch_length"], random_warmup_steps=o["warmup"],
                                curriculum=curriculum, online_percent=online,
                                test_episodes_per_epoch=o["test_episodes"], seed=seed,
                                td3=Td3Config(batch_size=o["batch_size"]), dataset_path=data)
                out.append((cfg, self.root() / label / str(seed), o["overlap_states"]))
        return out


def _read_experiment(path) -> Experiment:
    parser = configparser.ConfigParser()
    path = Path(path)
    if not parser.read(path):
        raise UsageError(f"cannot read experiment file {path}")
    return Experiment(parser, path)


def _student_job(job) -> tuple[str, int, float, int]:
    cfg, out, overlap_states = job
    start = time.perf_counter()
    log = run_student_cell(cfg, Path(out), overlap_states)
    return cfg.cell_name(), cfg.seed, time.perf_counter() - start, log.gradient_updates


def cmd_run(args) -> int:
    exp = _read_experiment(args.config)
    data_path = exp.dataset_path()
    if exp.dataset is None and not data_path.exists():
        cfg = RunConfig(exp.env_id, "teacher", total_updates=exp.teacher_steps,
                        epoch_length=exp.teacher_epoch_length,
                        random_warmup_steps=exp.teacher_warmup, seed=exp.teacher_seed)
        agent, dataset, log = train_teacher(cfg)
        teacher_dir = data_path.parent
        teacher_dir.mkdir(parents=True, exist_ok=True)
        save_dataset(dataset, data_path)
        save_agent(agent, teacher_dir / CHECKPOINT_DIR)
        write_eval_log(log, teacher_dir, EVAL_STEM)
        print(f"teacher written to {teacher_dir}")
    if not data_path.exists():
        raise ConfigError(f"dataset {data_path} does not exist")
    data_env = load_dataset(data_path).env_spec.env_id
    if data_env != exp.env_id:
        raise ConfigError(f"dataset {data_path} was generated on {data_env!r} "
                          f"but the experiment asks for {exp.env_id!r}")
    jobs = exp.jobs()
    start = time.perf_counter()
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_student_job, jobs))
    else:
        results = [_student_job(job) for job in jobs]
    for cell, seed, elapsed, updates in results:
        print(f"student {cell} seed={seed} updates={updates} seconds={elapsed:.1f}")
    print(f"students finished in {time.perf_counter() - start:.1f}s")
    analysis = exp.root() / "analysis"
    report = analyze_metrics(exp.root(), analysis, expected=exp.expected_cells())
    analyze_qvalues(exp.root(), analysis, expected=exp.expected_cells())
    print(report.to_text(), end="")
    return 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcur", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", help="train an online TD3 teacher and log its data")
    p.add_argument("--env", required=True, type=_env_arg)
    p.add_argument("--steps", type=_positive_int, default=60_000)
    p.add_argument("--seed", type=int, default=40)
    p.add_argument("--out", required=True)
    p.add_argument("--epoch-length", type=_positive_int, default=4000)
    p.add_argument("--warmup", type=_nonneg_int, default=1000)
    p.add_argument("--test-episodes", type=_positive_int, default=10)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("train-student", help="train a student from a teacher dataset")
    p.add_argument("--dataset")
    p.add_argument("--curriculum", type=_curriculum_arg,
                   help="add:p=inf,f=50000 | add:p=800,f=0 | scale:c=1.10")
    p.add_argument("--online-pct", type=_online_pct_arg, default=0.0,
                   help="X with 100/X an integer, e.g. 0, 2.5, 5, 10")
    p.add_argument("--seed", type=int, default=90)
    p.add_argument("--env", type=_env_arg, help="must match the dataset's env")
    p.add_argument("--updates", type=_positive_int, default=60_000)
    p.add_argument("--epoch-length", type=_positive_int, default=4000)
    p.add_argument("--warmup", type=_nonneg_int, default=1000)
    p.add_argument("--test-episodes", type=_positive_int, default=10)
    p.add_argument("--batch-size", type=_positive_int, default=100)
    p.add_argument("--shape-time", type=float, metavar="ALPHA",
                   help="shape rewards with a time predictor before training")
    p.add_argument("--sparse", action="store_true", help="with --shape-time, zero rewards first")
    p.add_argument("--overlap-states", type=_nonneg_int, default=0,
                   help="states per class for a per-epoch overlap estimate (0 disables)")
    p.add_argument("--save-checkpoint", action="store_true")
    p.add_argument("--experiment", default="adhoc")
    p.add_argument("--out", help="run directory (default $DCUR_OUT or runs, then "
                                 "<experiment>/<cell>/<seed>)")
    p.add_argument("--from-manifest", help="re-run exactly the config recorded in an eval.json")
    p.set_defaults(func=cmd_train_student)

    p = sub.add_parser("analyze", help="tables from finished runs")
    asub = p.add_subparsers(dest="what", required=True)
    for what in ("metrics", "qvalues"):
        q = asub.add_parser(what)
        q.add_argument("--root", required=True, help="experiment directory holding <cell>/<seed>/")
        q.add_argument("--manifest", help="experiment file listing the cells that must exist")
        q.add_argument("--out", help="output directory (default <root>/analysis)")
        if what == "metrics":
            q.add_argument("--m1-window", type=_positive_int, default=100)
        q.set_defaults(func=cmd_analyze)
    q = asub.add_parser("overlap", help="overlap between two state files (.npy, .csv or .dcur)")
    q.add_argument("--a", required=True)
    q.add_argument("--b", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--patience", type=_positive_int, default=10)
    q.add_argument("--out")
    q.set_defaults(func=cmd_analyze)

    p = sub.add_parser("transform", help="derive a new dataset")
    tsub = p.add_subparsers(dest="op", required=True)
    q = tsub.add_parser("reorder")
    q.add_argument("--in", dest="inp", required=True)
    q.add_argument("--out", required=True)
    q = tsub.add_parser("shape-time")
    q.add_argument("--in", dest="inp", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--alpha", type=float, required=True)
    q.add_argument("--variant", choices=("full", "drop_baseline"), default="full")
    q.add_argument("--sparse", action="store_true")
    q.add_argument("--epochs", type=_positive_int, default=30)
    q.add_argument("--seed", type=int, default=0)
    q = tsub.add_parser("rollout-gaussian")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--lambda", dest="max_std", type=float, required=True)
    q.add_argument("--xi", type=float, required=True)
    q.add_argument("--tuples", type=_positive_int, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q = tsub.add_parser("rollout-uniform")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--max-prob", type=float, required=True)
    q.add_argument("--tuples", type=_positive_int, required=True)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("run", help="run every cell of an experiment file, then analyze")
    p.add_argument("--config", required=True)
    p.add_argument("--jobs", type=_positive_int, default=1)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as err:
        parser.print_usage(sys.stderr)
        print(f"dcur: error: {err}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as err:
        print(f"dcur: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
