"""Evaluation harness: dataset generation, k-fold splits, metrics, offline/generalization/online runs."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .domain import DomainSpec
from .executor import MANUAL, EstimatorBundle, Policy, PredEstimator, StateEstimator, run_episode
from .filter import estimate_transitions, run_filter
from .frames import Trajectory
from .obsmodel import ObservationModelSet, fit_observation_models, log_output
from .sensors import (TrainConfig, build_table, predict_state_features, sensor_outputs, train_predicate_sensors,
                      train_state_classifier)
from .sim import (HARD_TASKS, ManualThresholds, NoiseConfig, RolloutConfig, SimParams, TaskConfig, default_tasks,
                  manual_state_predictions, rollout_openloop)

MODALITIES = {"mf": "motion-force", "image": "visual"}
BASE_METHODS = ("pred", "state", "manual")
ABLATIONS = ("pred-mf", "pred-image", "state-mf", "state-image")
ALL_METHODS = BASE_METHODS + ABLATIONS


def episode_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def generate_dataset(spec: DomainSpec, tasks: list[TaskConfig] | None = None, episodes_per_task: int = 15,
                     seed: int = 0, noise: NoiseConfig = NoiseConfig(), cfg: RolloutConfig = RolloutConfig(),
                     params: SimParams = SimParams()) -> list[Trajectory]:
    """Open-loop threshold-switched rollouts, ``episodes_per_task`` per task, ordered by task then episode."""
    tasks = default_tasks() if tasks is None else tasks
    out = []
    for ti, task in enumerate(tasks):
        for ep in range(episodes_per_task):
            out.append(rollout_openloop(task, spec, episode_seed(seed, ti, ep), noise, cfg=cfg, params=params))
    return out


# -- splits -------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    train: tuple[int, ...]
    validation: tuple[int, ...]
    test: tuple[int, ...]


@dataclass(frozen=True)
class FoldPlan:
    k: int
    ratios: tuple[float, float, float]
    folds: tuple[Fold, ...]
    granularity: str = "trajectory"  # indices refer to trajectories, or to stacked frames

    def frame_indices(self, trajectories: list[Trajectory], i: int) -> Fold:
        """Frame-index sets (over the concatenated dataset) of fold ``i``."""
        if self.granularity == "frame":
            return self.folds[i]
        offs = np.concatenate([[0], np.cumsum([len(t) for t in trajectories])])
        expand = lambda ids: tuple(j for t in ids for j in range(offs[t], offs[t + 1]))  # noqa: E731
        f = self.folds[i]
        return Fold(expand(f.train), expand(f.validation), expand(f.test))


def kfold_split(trajectories: list | int, k: int = 5, ratios=(0.6, 0.2, 0.2), seed: int = 0,
                granularity: str = "trajectory") -> FoldPlan:
    """Rotate a seeded permutation into k test blocks; the rest splits into train/validation by ``ratios``.

    ``granularity="frame"`` partitions stacked frames instead of whole episodes.
    """
    if granularity not in ("trajectory", "frame"):
        raise ValueError(f"unknown granularity {granularity!r}")
    if isinstance(trajectories, int):
        n = trajectories
    elif granularity == "frame":
        n = sum(len(t) for t in trajectories)
    else:
        n = len(trajectories)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of {granularity}s ({n})")
    r = np.asarray(ratios, dtype=float)
    if len(r) != 3 or np.any(r < 0) or r[0] <= 0 or abs(r.sum() - 1.0) > 1e-9:
        raise ValueError(f"invalid split ratios {ratios}")
    perm = np.random.default_rng(seed).permutation(n)
    blocks = np.array_split(perm, k)
    val_share = r[1] / (r[0] + r[1])
    folds = []
    for i in range(k):
        rest = np.concatenate([blocks[j] for j in range(k) if j != i])
        n_val = int(round(val_share * len(rest)))
        if r[1] > 0 and len(rest) > 1:
            n_val = min(max(n_val, 1), len(rest) - 1)
        folds.append(Fold(tuple(sorted(rest[n_val:].tolist())), tuple(sorted(rest[:n_val].tolist())),
                          tuple(sorted(blocks[i].tolist()))))
    return FoldPlan(k, tuple(float(x) for x in r), tuple(folds), granularity)


def split_two(n: int, ratios=(0.75, 0.25), seed: int = 0) -> tuple[list[int], list[int]]:
    """Seeded train/validation split of n items; both parts non-empty when n >= 2."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(ratios[1] / sum(ratios) * n))
    if n >= 2:
        n_val = min(max(n_val, 1), n - 1)
    return sorted(perm[n_val:].tolist()), sorted(perm[:n_val].tolist())


# -- metrics ------------------------------------------------------------------


@dataclass
class MetricsReport:
    states: tuple[str, ...]
    confusion: np.ndarray  # rows: truth, columns: prediction
    accuracy: float
    precision: dict[str, float]
    recall: dict[str, float]
    f1: dict[str, float]
    support: dict[str, int]
    macro_f1: float

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "f1": dict(self.f1),
                "precision": dict(self.precision), "recall": dict(self.recall), "support": dict(self.support),
                "confusion": self.confusion.tolist(), "states": list(self.states)}


def score(predicted, truth, spec: DomainSpec | tuple | list) -> MetricsReport:
    """Accuracy, per-state precision/recall/F1 and macro-F1 over states with non-zero support."""
    states = tuple(spec.state_ids) if isinstance(spec, DomainSpec) else tuple(spec)
    predicted, truth = list(predicted), list(truth)
    if len(predicted) != len(truth):
        raise ValueError(f"length mismatch: {len(predicted)} predictions vs {len(truth)} labels")
    idx = {s: i for i, s in enumerate(states)}
    S = len(states)
    C = np.zeros((S, S), dtype=int)
    if truth:
        np.add.at(C, (np.array([idx[s] for s in truth]), np.array([idx[s] for s in predicted])), 1)
    total = int(C.sum())
    acc = float(np.trace(C) / total) if total else 0.0
    prec, rec, f1, sup = {}, {}, {}, {}
    for i, s in enumerate(states):
        tp = int(C[i, i])
        col, row = int(C[:, i].sum()), int(C[i, :].sum())
        prec[s] = tp / col if col else 0.0
        rec[s] = tp / row if row else 0.0
        f1[s] = 2 * tp / (col + row) if col + row else 0.0
        sup[s] = row
    present = [f1[s] for s in states if sup[s] > 0]
    macro = float(np.mean(present)) if present else 0.0
    return MetricsReport(states, C, acc, prec, rec, f1, sup, macro)


# -- per-fold model fitting ---------------------------------------------------


@dataclass
class FittedModels:
    spec: DomainSpec
    sensors: dict
    models: ObservationModelSet
    tm: object
    state_clfs: dict = field(default_factory=dict)  # modality key -> StateClassifier

    def bundle(self, modality: str | None = None) -> EstimatorBundle:
        spec = self.spec if modality is None else restrict_modality(self.spec, modality)
        return EstimatorBundle(self.sensors, restrict_models(self.models, spec), self.tm, spec)


def restrict_modality(spec: DomainSpec, modality: str) -> DomainSpec:
    return spec.with_predicates([p.id for p in spec.predicates if p.modality == modality])


def restrict_models(models: ObservationModelSet, spec: DomainSpec) -> ObservationModelSet:
    keep = set(spec.predicate_ids)
    return ObservationModelSet(
        models.states, models.actions, tuple(p for p in models.predicates if p in keep),
        {k: v for k, v in models.specific.items() if k[2] in keep},
        {k: v for k, v in models.state_level.items() if k[1] in keep},
        {k: v for k, v in models.global_level.items() if k in keep},
    )


def _state_modalities(method: str) -> tuple[str, ...]:
    suffix = method.partition("-")[2]
    return (MODALITIES[suffix],) if suffix else ("motion-force", "visual")


def fit_models(train: list[Trajectory], validation: list[Trajectory], spec: DomainSpec, seed: int = 0,
               methods=ALL_METHODS, cfg: TrainConfig | None = None, init: FittedModels | None = None,
               obs: bool = True, extra_validation: list[Trajectory] = ()) -> FittedModels:
    """Train sensors and state classifiers on ``train``, mixtures on ``validation``, transitions on ``train``.

    ``init`` warm-starts every classifier (fine-tuning). Mixtures are fitted on ``validation`` plus
    ``extra_validation``; a few task trajectories alone leave rare states on the global tier.
    """
    cfg = TrainConfig(seed=seed) if cfg is None else cfg
    table = build_table(train, spec)
    sensors = train_predicate_sensors(table, spec, cfg, init=None if init is None else init.sensors)
    models = (fit_observation_models([*validation, *extra_validation], sensors, spec, seed=seed) if obs
              else ObservationModelSet(tuple(spec.state_ids), tuple(spec.action_ids), tuple(spec.predicate_ids)))
    tm = estimate_transitions(train, spec)
    clfs = {}
    for m in methods:
        if m.startswith("state"):
            mods = _state_modalities(m)
            prev = None if init is None else init.state_clfs.get(mods)
            clfs[mods] = train_state_classifier(table, spec, cfg, modalities=mods, init=prev)
    return FittedModels(spec, sensors, models, tm, clfs)


def predict_offline(method: str, fitted: FittedModels, trajectories: list[Trajectory],
                    tasks: dict[str, TaskConfig], thresholds: ManualThresholds = ManualThresholds()) -> list[str]:
    """Per-frame state predictions for a list of trajectories, concatenated."""
    spec = fitted.spec
    S = spec.state_ids
    if method == "manual":
        return [s for tr in trajectories for s in manual_state_predictions(tr, tasks[tr.task_id], thresholds)]
    if method.startswith("state"):
        mods = _state_modalities(method)
        clf = fitted.state_clfs[mods]
        table = build_table(trajectories, spec, state_modalities=mods)
        return [S[i] for i in predict_state_features(clf, table.state_features).argmax(axis=1)]
    if method.startswith("pred"):
        suffix = method.partition("-")[2]
        bundle = fitted.bundle(MODALITIES[suffix] if suffix else None)
        cols = [spec.predicate_ids.index(p) for p in bundle.models.predicates]
        out = []
        for tr in trajectories:
            table = build_table([tr], spec, with_state_features=False)
            logs = log_output(sensor_outputs(fitted.sensors, table, spec))[:, cols]
            beliefs = run_filter(bundle.models.log_likelihoods(logs, table.action_idx), table.action_idx, bundle.tm)
            out.extend(S[i] for i in beliefs.argmax(axis=1))
        return out
    raise ValueError(f"unknown method {method!r}")


# -- experiments ----------------------------------------------------------------


def _task_map(tasks: list[TaskConfig] | None) -> dict[str, TaskConfig]:
    return {t.task_id: t for t in (default_tasks() if tasks is None else tasks)}


@dataclass
class OfflineResult:
    rows: list[dict]  # one per (fold, method)
    reports: dict  # (fold, method) -> MetricsReport

    def mean(self, method: str, key: str = "accuracy") -> float:
        return float(np.mean([r[key] for r in self.rows if r["method"] == method]))

    def summary(self) -> dict:
        methods = list(dict.fromkeys(r["method"] for r in self.rows))
        out = {}
        for m in methods:
            acc = [r["accuracy"] for r in self.rows if r["method"] == m]
            f1 = [r["macro_f1"] for r in self.rows if r["method"] == m]
            out[m] = {"accuracy_mean": float(np.mean(acc)), "accuracy_std": float(np.std(acc)),
                      "macro_f1_mean": float(np.mean(f1)), "macro_f1_std": float(np.std(f1))}
        return out


def run_offline(trajectories: list[Trajectory], spec: DomainSpec, methods=ALL_METHODS, k: int = 5,
                ratios=(0.6, 0.2, 0.2), seed: int = 0, tasks: list[TaskConfig] | None = None,
                cfg: TrainConfig | None = None) -> OfflineResult:
    """k-fold comparison; folds are split at trajectory granularity."""
    plan = kfold_split(trajectories, k, ratios, seed)
    tmap = _task_map(tasks)
    rows, reports = [], {}
    for fi, fold in enumerate(plan.folds):
        pick = lambda ids: [trajectories[i] for i in ids]  # noqa: E731
        fitted = fit_models(pick(fold.train), pick(fold.validation), spec, seed=episode_seed(seed, fi),
                            methods=methods, cfg=cfg)
        test = pick(fold.test)
        truth = [s for tr in test for s in tr.states]
        for m in methods:
            rep = score(predict_offline(m, fitted, test, tmap), truth, spec)
            reports[(fi, m)] = rep
            rows.append({"fold": fi, "method": m, "accuracy": rep.accuracy, "macro_f1": rep.macro_f1,
                         **{f"f1_{s}": rep.f1[s] for s in spec.state_ids}})
    return OfflineResult(rows, reports)


@dataclass
class GeneralizationResult:
    rows: list[dict]  # one per (held-out task, repetition, method)

    def mean_drop(self, method: str) -> float:
        return float(np.mean([r["drop"] for r in self.rows if r["method"] == method]))

    def summary(self) -> dict:
        out = {}
        for m in dict.fromkeys(r["method"] for r in self.rows):
            rs = [r for r in self.rows if r["method"] == m]
            out[m] = {"in_distribution": float(np.mean([r["in_distribution"] for r in rs])),
                      "held_out": float(np.mean([r["held_out"] for r in rs])),
                      "drop": float(np.mean([r["drop"] for r in rs]))}
            for t in dict.fromkeys(r["task"] for r in rs):
                out[m][f"held_out[{t}]"] = float(np.mean([r["held_out"] for r in rs if r["task"] == t]))
        return out


def run_generalization(trajectories: list[Trajectory], spec: DomainSpec, methods=("pred", "state"),
                       repeats: int = 3, ratios=(0.6, 0.2, 0.2), seed: int = 0,
                       cfg: TrainConfig | None = None, tasks: list[TaskConfig] | None = None) -> GeneralizationResult:
    """Leave-one-task-out: fit on the other tasks, score on their held-back test split and on the left-out task.

    The accuracy drop is held-out accuracy minus in-distribution accuracy.
    """
    task_ids = list(dict.fromkeys(t.task_id for t in trajectories))
    tmap = _task_map(tasks)
    rows = []
    for ti, held in enumerate(task_ids):
        inside = [t for t in trajectories if t.task_id != held]
        outside = [t for t in trajectories if t.task_id == held]
        for r in range(repeats):
            sd = episode_seed(seed, ti, r)
            perm = np.random.default_rng(sd).permutation(len(inside))
            n_tr = int(round(ratios[0] * len(inside)))
            n_va = int(round(ratios[1] * len(inside)))
            tr = [inside[i] for i in perm[:n_tr]]
            va = [inside[i] for i in perm[n_tr:n_tr + n_va]]
            te = [inside[i] for i in perm[n_tr + n_va:]]
            fitted = fit_models(tr, va, spec, seed=sd, methods=methods, cfg=cfg)
            for m in methods:
                ind = score(predict_offline(m, fitted, te, tmap), [s for x in te for s in x.states], spec)
                out = score(predict_offline(m, fitted, outside, tmap), [s for x in outside for s in x.states], spec)
                rows.append({"task": held, "repeat": r, "method": m, "in_distribution": ind.accuracy,
                             "held_out": out.accuracy, "drop": out.accuracy - ind.accuracy,
                             "held_out_macro_f1": out.macro_f1})
    return GeneralizationResult(rows)


@dataclass
class OnlineResult:
    rows: list[dict]  # one per (task, method)
    episodes: list[dict]

    def rate(self, method: str, task: str | None = None) -> float:
        rs = [r for r in self.rows if r["method"] == method and (task is None or r["task"] == task)]
        return float(sum(r["successes"] for r in rs) / sum(r["episodes"] for r in rs))

    def summary(self) -> dict:
        out = {}
        for m in dict.fromkeys(r["method"] for r in self.rows):
            out[m] = {r["task"]: f"{r['successes']}/{r['episodes']}" for r in self.rows if r["method"] == m}
            out[m]["average"] = self.rate(m)
        return out


def run_online(trajectories: list[Trajectory], spec: DomainSpec, tasks=HARD_TASKS,
               methods=("pred", "state", "manual"), episodes: int = 20, perturbation: float = 0.002,
               seed: int = 0, ratios=(0.75, 0.25), policy: Policy = Policy(), noise: NoiseConfig = NoiseConfig(),
               cfg: TrainConfig | None = None, task_configs: list[TaskConfig] | None = None,
               keep_traces: bool = False) -> OnlineResult:
    """Closed-loop success counts per task; learned methods are fine-tuned on task-only data first."""
    tmap = _task_map(task_configs)
    learned = [m for m in methods if m != "manual"]
    base = None
    if learned:
        tr_idx, va_idx = split_two(len(trajectories), ratios, seed)
        base_val = [trajectories[i] for i in va_idx]
        base = fit_models([trajectories[i] for i in tr_idx], base_val, spec,
                          seed=seed, methods=learned, cfg=cfg)
    rows, eps = [], []
    for ti, tid in enumerate(tasks):
        task = tmap[tid]
        fitted = None
        if learned:
            own = [t for t in trajectories if t.task_id == tid]
            if len(own) < 2:
                raise ValueError(f"task {tid} needs at least 2 trajectories for fine-tuning")
            tr_idx, va_idx = split_two(len(own), ratios, episode_seed(seed, ti))
            fitted = fit_models([own[i] for i in tr_idx], [own[i] for i in va_idx], spec,
                                seed=episode_seed(seed, ti), methods=learned, cfg=cfg, init=base,
                                extra_validation=base_val)
        for m in methods:
            wins = 0
            for ep in range(episodes):
                es = episode_seed(seed, 7919, ti, ep)
                if m == "manual":
                    res = run_episode(task, _manual(policy), spec, es, None, noise, perturbation)
                else:
                    est = (PredEstimator(fitted.bundle()) if m == "pred"
                           else StateEstimator(fitted.state_clfs[_state_modalities(m)]))
                    res = run_episode(task, policy, spec, es, est, noise, perturbation)
                wins += int(res.success)
                rec = {"method": m, "episode": ep, **res.summary()}
                if keep_traces:
                    rec["trace"] = res
                eps.append(rec)
            rows.append({"task": tid, "method": m, "successes": wins, "episodes": episodes,
                         "rate": wins / episodes})
    return OnlineResult(rows, eps)


def _manual(policy: Policy) -> Policy:
    return replace(policy, mode=MANUAL)


# -- report emission ----------------------------------------------------------------


def rows_to_csv(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(dict.fromkeys(k for r in rows for k in r if k != "trace"))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([repr(v) if isinstance(v, float) else v for v in (r.get(c, "") for c in cols)])
    return buf.getvalue()
