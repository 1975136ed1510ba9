"""Command-line entry point.

Every command reads files and flags and writes files; nothing else is shared
between invocations. Option values resolve in this order: command line,
``PREDBAYES_<NAME>`` environment variable, ``--config`` JSON file, built-in
default.

Exit status is 0 on success. Failures print ``error[<category>]: <message>``
to stderr and exit with the category's code (see ``EXIT_CODES``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import io as pio
from .domain import DomainError, DomainSpec, default_domain, load_domain
from .eval import (ALL_METHODS, episode_seed, fit_models, generate_dataset, rows_to_csv, run_generalization,
                   run_offline, run_online, split_two)
from .executor import MANUAL, EstimatorBundle, Policy, PredEstimator, StateEstimator, run_episode
from .filter import belief_trace_csv, filter_trajectory
from .obsmodel import fit_observation_models
from .sensors import TrainConfig
from .sim import HARD_TASKS, NoiseConfig, default_tasks, task_by_id

ENV_PREFIX = "PREDBAYES_"
EXIT_CODES = {"usage": 2, "missing-prerequisite": 3, "invalid-input": 4, "io": 5}
SPLIT = "split.json"

DEFAULTS = {
    "domain": None,
    "seed": 0,
    "out": None,
    "data": "data",
    "models": "models",
    "tasks": "all",
    "episodes": 15,
    "validation_ratio": 0.25,
    "index": 0,
    "task": "dsub",
    "method": "pred",
    "perturbation": 0.002,
    "k": 5,
    "repeats": 3,
    "methods": None,
    "timeout": 60.0,
}
INT_KEYS = {"seed", "episodes", "index", "k", "repeats"}
FLOAT_KEYS = {"validation_ratio", "perturbation", "timeout"}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class Options:
    """Resolves option values from flags, environment and config file."""

    def __init__(self, ns: argparse.Namespace, env=None):
        self.ns = ns
        self.env = os.environ if env is None else env
        self.config = {}
        if getattr(ns, "config", None):
            path = Path(ns.config)
            if not path.exists():
                raise CliError("missing-prerequisite", f"config file {path} does not exist")
            try:
                self.config = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise CliError("invalid-input", f"config file {path}: {exc}") from None

    def get(self, key: str):
        v = getattr(self.ns, key, None)
        if v is None:
            env = self.env.get(ENV_PREFIX + key.upper())
            if env is not None:
                v = env
        if v is None:
            v = self.config.get(key, self.config.get(key.replace("_", "-")))
        if v is None:
            v = DEFAULTS.get(key)
        if v is None:
            return None
        try:
            if key in INT_KEYS:
                return int(v)
            if key in FLOAT_KEYS:
                return float(v)
        except (TypeError, ValueError):
            raise CliError("invalid-input", f"option {key} expects a number, got {v!r}") from None
        return v

    def out(self, fallback: str) -> Path:
        return Path(self.get("out") or fallback)


def _domain(opts: Options) -> DomainSpec:
    path = opts.get("domain")
    if path is None:
        return default_domain()
    if not Path(path).exists():
        raise CliError("missing-prerequisite", f"domain file {path} does not exist")
    return load_domain(path)


def _tasks(opts: Options):
    spec = opts.get("tasks")
    if spec in (None, "all"):
        return default_tasks()
    ids = [t for t in str(spec).split(",") if t]
    try:
        return [task_by_id(t) for t in ids]
    except KeyError as exc:
        raise CliError("invalid-input", str(exc.args[0])) from None


def _noise(opts: Options) -> NoiseConfig:
    cfg = opts.config.get("noise", {})
    return NoiseConfig(**{k: v for k, v in cfg.items() if k in NoiseConfig.__dataclass_fields__})


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# -- commands -----------------------------------------------------------------


def cmd_generate(opts: Options) -> int:
    spec = _domain(opts)
    tasks = _tasks(opts)
    seed, n = opts.get("seed"), opts.get("episodes")
    if n < 1:
        raise CliError("invalid-input", "episodes must be at least 1")
    noise = _noise(opts)
    trajs = generate_dataset(spec, tasks, n, seed, noise)
    out = opts.out(opts.get("data"))
    pio.save_dataset(out, trajs, {"seed": seed, "episodes_per_task": n, "tasks": [t.task_id for t in tasks],
                                  "noise": noise.as_dict()})
    print(f"wrote {len(trajs)} trajectories to {out}")
    return 0


def _load_data(opts: Options):
    try:
        return pio.load_dataset(opts.get("data"))
    except pio.MissingArtifact as exc:
        raise CliError("missing-prerequisite", str(exc)) from None


def cmd_train(opts: Options) -> int:
    spec = _domain(opts)
    trajs, _ = _load_data(opts)
    seed = opts.get("seed")
    r = opts.get("validation_ratio")
    tr_idx, va_idx = split_two(len(trajs), (1.0 - r, r), seed)
    fitted = fit_models([trajs[i] for i in tr_idx], [], spec, seed=seed, methods=("pred", "state"),
                        obs=False)
    out = opts.out(opts.get("models"))
    pio.write_json(out / SPLIT, {"train": tr_idx, "validation": va_idx, "seed": seed})
    cfg = TrainConfig(seed=seed)
    meta = {"seed": seed, "l2": cfg.l2, "iterations": cfg.iterations, "lr": cfg.lr, "train_trajectories": len(tr_idx)}
    pio.write_json(out / pio.SENSORS, pio.sensors_to_dict(fitted.sensors, meta))
    pio.write_json(out / pio.TRANSITIONS, pio.transitions_to_dict(fitted.tm))
    clf = fitted.state_clfs[("motion-force", "visual")]
    pio.write_json(out / pio.STATE_CLASSIFIER, pio.state_classifier_to_dict(clf))
    print(f"trained on {len(tr_idx)} trajectories; models in {out}")
    return 0


def _read(path: Path, hint: str):
    try:
        return pio.read_json(path, hint)
    except pio.MissingArtifact as exc:
        raise CliError("missing-prerequisite", str(exc)) from None


def cmd_fit_obs(opts: Options) -> int:
    spec = _domain(opts)
    trajs, _ = _load_data(opts)
    mdir = Path(opts.get("models"))
    split = _read(mdir / SPLIT, "run `train` first")
    sensors = pio.sensors_from_dict(_read(mdir / pio.SENSORS, "run `train` first"))
    models = fit_observation_models([trajs[i] for i in split["validation"]], sensors, spec, seed=opts.get("seed"))
    out = opts.out(str(mdir))
    pio.write_json(out / pio.OBS_MODELS, pio.obs_models_to_dict(models))
    print(f"fitted observation models {models.tier_counts()} in {out}")
    return 0


def _bundle(opts: Options, spec: DomainSpec) -> EstimatorBundle:
    mdir = Path(opts.get("models"))
    sensors = pio.sensors_from_dict(_read(mdir / pio.SENSORS, "run `train` first"))
    tm = pio.transitions_from_dict(_read(mdir / pio.TRANSITIONS, "run `train` first"))
    models = pio.obs_models_from_dict(_read(mdir / pio.OBS_MODELS, "run `fit-obs` first"))
    return EstimatorBundle(sensors, models, tm, spec)


def cmd_estimate(opts: Options) -> int:
    spec = _domain(opts)
    bundle = _bundle(opts, spec)
    trajs, _ = _load_data(opts)
    i = opts.get("index")
    if not 0 <= i < len(trajs):
        raise CliError("invalid-input", f"trajectory index {i} outside [0, {len(trajs)})")
    traj = trajs[i]
    beliefs = filter_trajectory(traj, bundle.tm, bundle.sensors, bundle.models, spec)
    text = belief_trace_csv(traj, beliefs, spec)
    out = opts.get("out")
    if out:
        _write(Path(out), text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_run(opts: Options) -> int:
    spec = _domain(opts)
    method = opts.get("method")
    task = _tasks_one(opts)
    policy = Policy(timeout=opts.get("timeout"))
    if method == "manual":
        policy = Policy(mode=MANUAL, timeout=opts.get("timeout"))
        make = lambda: None  # noqa: E731
    elif method == "pred":
        bundle = _bundle(opts, spec)
        make = lambda: PredEstimator(bundle)  # noqa: E731
    elif method == "state":
        clf = pio.state_classifier_from_dict(_read(Path(opts.get("models")) / pio.STATE_CLASSIFIER,
                                                   "run `train` first"))
        make = lambda: StateEstimator(clf)  # noqa: E731
    else:
        raise CliError("invalid-input", f"unknown method {method!r}")
    seed, n = opts.get("seed"), opts.get("episodes")
    out = opts.out("run")
    rows = []
    for ep in range(n):
        res = run_episode(task, policy, spec, episode_seed(seed, 7919, ep), make(), _noise(opts),
                          opts.get("perturbation"))
        rows.append({"method": method, "episode": ep, **res.summary()})
        if opts.ns.emit_traces:
            _write(out / "traces" / f"episode_{ep:03d}.csv", _episode_trace(res, spec))
    _write(out / "episodes.csv", rows_to_csv(rows))
    wins = sum(r["success"] for r in rows)
    pio.write_json(out / "summary.json", {"task": task.task_id, "method": method, "successes": wins,
                                          "episodes": n, "rate": wins / n})
    print(f"{task.task_id} {method}: {wins}/{n}")
    return 0


def _tasks_one(opts: Options):
    try:
        return task_by_id(opts.get("task"))
    except KeyError as exc:
        raise CliError("invalid-input", str(exc.args[0])) from None


def _episode_trace(res, spec: DomainSpec) -> str:
    rows = []
    for i, label in enumerate(res.labels):
        row = {"frame": i, "action": res.actions[i]}
        if len(res.beliefs):
            row.update({f"p_{s}": float(res.beliefs[i, j]) for j, s in enumerate(spec.state_ids)})
            row["map"] = res.map_states[i]
        row["truth"] = label
        rows.append(row)
    return rows_to_csv(rows)


def _methods(opts: Options, default):
    m = opts.get("methods")
    if m is None:
        return default
    ms = tuple(x for x in str(m).split(",") if x)
    bad = [x for x in ms if x not in ALL_METHODS]
    if bad:
        raise CliError("invalid-input", f"unknown methods {bad}")
    return ms


def cmd_eval(opts: Options) -> int:
    spec = _domain(opts)
    trajs, _ = _load_data(opts)
    seed = opts.get("seed")
    kind = opts.ns.kind
    out = opts.out(f"reports/{kind}")
    if kind == "offline":
        res = run_offline(trajs, spec, _methods(opts, ALL_METHODS), k=opts.get("k"), seed=seed)
    elif kind == "generalization":
        res = run_generalization(trajs, spec, _methods(opts, ("pred", "state")), repeats=opts.get("repeats"),
                                 seed=seed)
    else:
        res = run_online(trajs, spec, HARD_TASKS, _methods(opts, ("pred", "state", "manual")),
                         episodes=opts.ns.episodes if opts.ns.episodes is not None else 20,
                         perturbation=opts.get("perturbation"), seed=seed,
                         policy=Policy(timeout=opts.get("timeout")), noise=_noise(opts),
                         keep_traces=bool(opts.ns.emit_traces))
        _write(out / "episodes.csv", rows_to_csv(res.episodes))
        if opts.ns.emit_traces:
            for e in res.episodes:
                name = f"{e['task_id']}_{e['method']}_{e['episode']:03d}.csv"
                _write(out / "traces" / name, _episode_trace(e["trace"], spec))
    _write(out / f"{kind}.csv", rows_to_csv(res.rows))
    pio.write_json(out / "summary.json", {"kind": kind, "seed": seed, "summary": res.summary()})
    print(json.dumps(res.summary(), sort_keys=True, indent=1))
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps one from erasing the other
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--domain", default=argparse.SUPPRESS, help="domain file (default: shipped insertion domain)")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output path")
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file of option defaults")

    p = argparse.ArgumentParser(prog="predbayes", parents=[common],
                                description="Predicate-sensor Bayesian state estimation experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="simulate open-loop episodes")
    g.add_argument("--tasks", help="comma-separated task ids or 'all'")
    g.add_argument("--episodes", type=int, help="episodes per task (default 15)")

    t = sub.add_parser("train", parents=[common], help="train predicate sensors, state classifier, transitions")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--validation-ratio", dest="validation_ratio", type=float)

    f = sub.add_parser("fit-obs", parents=[common], help="fit mixture observation models on the validation split")
    f.add_argument("--data")
    f.add_argument("--models", help="model directory")

    e = sub.add_parser("estimate", parents=[common], help="filter one trajectory and emit its belief trace")
    e.add_argument("--data")
    e.add_argument("--models")
    e.add_argument("--index", type=int, help="trajectory index in the dataset")

    r = sub.add_parser("run", parents=[common], help="closed-loop episodes on one task")
    r.add_argument("--models")
    r.add_argument("--task")
    r.add_argument("--method", choices=("pred", "state", "manual"))
    r.add_argument("--episodes", type=int)
    r.add_argument("--perturbation", type=float)
    r.add_argument("--timeout", type=float)
    r.add_argument("--emit-traces", action="store_true")

    v = sub.add_parser("eval", parents=[common], help="offline, generalization or online evaluation")
    v.add_argument("kind", choices=("offline", "generalization", "online"))
    v.add_argument("--data")
    v.add_argument("--methods", help="comma-separated method names")
    v.add_argument("--k", type=int)
    v.add_argument("--repeats", type=int)
    v.add_argument("--episodes", type=int, help="online episodes per task (default 20)")
    v.add_argument("--perturbation", type=float)
    v.add_argument("--timeout", type=float)
    v.add_argument("--emit-traces", action="store_true")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "fit-obs": cmd_fit_obs, "estimate": cmd_estimate,
            "run": cmd_run, "eval": cmd_eval}


def main(argv=None, env=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CODES["usage"]
    try:
        return COMMANDS[ns.command](Options(ns, env))
    except CliError as exc:
        category, msg = exc.category, str(exc)
    except DomainError as exc:
        category, msg = "invalid-input", str(exc)
    except (ValueError, KeyError) as exc:
        category, msg = "invalid-input", str(exc)
    except OSError as exc:
        category, msg = "io", str(exc)
    print(f"error[{category}]: {msg}", file=sys.stderr)
    return EXIT_CODES[category]


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
