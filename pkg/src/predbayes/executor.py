"""Closed-loop execution driven by estimated symbolic states, plus the threshold-switched baseline."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .domain import DomainSpec
from .filter import TransitionModel, correct_with_loglik, predict_step
from .frames import ObservationFrame
from .obsmodel import ObservationModelSet, log_output
from .sensors import WINDOW, PredicateSensor, StateClassifier, _frame_matrix, predict, predict_state, recipe_for
from .sim import (ALIGNED, FALLEN, FREE, INSERTED, ONSURFACE, SEARCHING, ManualController, ManualThresholds,
                  NoiseConfig, RolloutConfig, SimParams, TaskConfig, ground_truth_state, sense, start_state, step,
                  switch_action)

CLOSED_LOOP = "closed-loop"
MANUAL = "manual-thresholds"
MODES = (CLOSED_LOOP, MANUAL)
REASONS = ("inserted", "timeout", "unrecoverable")

DEFAULT_TABLE = {
    FREE: "Prepare",
    ONSURFACE: "Search",
    SEARCHING: "Search",
    ALIGNED: "Insert",
    FALLEN: "Prepare",
    INSERTED: None,
}


@dataclass(frozen=True)
class Policy:
    mode: str = CLOSED_LOOP
    table: dict = field(default_factory=lambda: dict(DEFAULT_TABLE))
    recovery_state: str = FALLEN
    recovery_perturbation: float = 0.001  # m, xy target resampled uniformly within +-this on recovery
    max_recoveries: int = 10
    timeout: float = 60.0  # s
    confirm_frames: int = 10
    terminal_state: str = INSERTED
    thresholds: ManualThresholds = ManualThresholds()

    def validate(self, spec: DomainSpec | None = None) -> list[str]:
        problems = []
        if self.mode not in MODES:
            problems.append(f"unknown mode {self.mode!r}")
        if self.timeout <= 0:
            problems.append("timeout must be positive")
        if self.confirm_frames < 1:
            problems.append("confirmation window must be at least one frame")
        if spec is not None:
            for s in spec.state_ids:
                if s != self.terminal_state and self.table.get(s) is None:
                    problems.append(f"no action for non-terminal state {s}")
            for s, a in self.table.items():
                if a is not None and a not in spec.action_ids:
                    problems.append(f"state {s} maps to unknown action {a}")
        return problems


@dataclass(frozen=True)
class Command:
    action: str | None  # None means terminate
    perturb: bool = False


def next_action(map_state: str, policy: Policy) -> Command:
    """Table lookup from the MAP state; the recovery state additionally requests a perturbed reset."""
    if map_state not in policy.table:
        raise KeyError(f"state {map_state!r} not covered by the policy table")
    return Command(policy.table[map_state], perturb=map_state == policy.recovery_state)


# -- estimators ---------------------------------------------------------------


class Estimator(Protocol):
    calls: int

    def reset(self) -> None: ...

    def observe(self, frame: ObservationFrame) -> np.ndarray: ...


@dataclass
class EstimatorBundle:
    sensors: dict[str, PredicateSensor]
    models: ObservationModelSet
    tm: TransitionModel
    spec: DomainSpec


class PredEstimator:
    """Streams frames through the predicate sensors and the Bayes filter."""

    def __init__(self, bundle: EstimatorBundle):
        self.bundle = bundle
        self.calls = 0
        spec = bundle.spec
        self._preds = [p for p in spec.predicates if p.id in bundle.models.predicates]
        self._cols = [bundle.models.predicates.index(p.id) for p in self._preds]
        self._actions = {a: i for i, a in enumerate(bundle.models.actions)}
        self.reset()

    def reset(self):
        self.history: list[ObservationFrame] = []
        self.belief: np.ndarray | None = None

    def log_likelihood(self, frame: ObservationFrame) -> np.ndarray:
        feats = _frame_matrix(frame, self.history)
        row = np.zeros((1, len(self.bundle.models.predicates)))
        for p, c in zip(self._preds, self._cols):
            row[0, c] = log_output(predict(self.bundle.sensors[p.id], feats(recipe_for(p)[1])))
        return self.bundle.models.log_likelihoods(row, np.array([self._actions[frame.action]]))[0]

    def observe(self, frame: ObservationFrame) -> np.ndarray:
        self.calls += 1
        ll = self.log_likelihood(frame)
        tm = self.bundle.tm
        if self.belief is None:
            b = correct_with_loglik(tm.prior, ll)
        else:
            b = correct_with_loglik(predict_step(self.belief, frame.action, tm), ll)
        self.belief = b
        self.history.append(frame)
        if len(self.history) > WINDOW:
            self.history.pop(0)
        return b


class StateEstimator:
    """Per-frame softmax of the direct state classifier (no temporal filtering)."""

    def __init__(self, clf: StateClassifier):
        self.clf = clf
        self.calls = 0
        self.reset()

    def reset(self):
        self.history: list[ObservationFrame] = []

    def observe(self, frame: ObservationFrame) -> np.ndarray:
        self.calls += 1
        p = predict_state(self.clf, frame, self.history)
        self.history.append(frame)
        if len(self.history) > WINDOW:
            self.history.pop(0)
        return p


# -- episodes -----------------------------------------------------------------


@dataclass
class EpisodeResult:
    task_id: str
    seed: int
    success: bool
    wall_time: float  # simulated seconds
    reason: str
    beliefs: np.ndarray  # (N, |S|); empty in manual mode
    labels: list[str]
    actions: list[str]
    map_states: list[str]
    recoveries: int = 0
    final_state: str = ""

    def summary(self) -> dict:
        return {"task_id": self.task_id, "seed": self.seed, "success": self.success,
                "wall_time": round(self.wall_time, 9), "reason": self.reason, "frames": len(self.labels),
                "recoveries": self.recoveries, "final_state": self.final_state}


def run_episode(task: TaskConfig, policy: Policy, spec: DomainSpec, seed: int,
                estimator: Estimator | None = None, noise: NoiseConfig = NoiseConfig(),
                perturbation: float = 0.0, cfg: RolloutConfig = RolloutConfig(),
                params: SimParams = SimParams()) -> EpisodeResult:
    """Run one episode; the hole is shifted uniformly within +-``perturbation`` per axis."""
    rng = np.random.default_rng(seed)
    if perturbation > 0:
        task = task.perturbed(rng, perturbation)
    s = start_state(rng, cfg)
    n_max = int(round(policy.timeout / params.dt))
    if policy.mode == MANUAL:
        return _run_manual(task, policy, spec, seed, s, rng, noise, params, n_max)
    if estimator is None:
        raise ValueError("closed-loop mode needs an estimator")
    return _run_closed_loop(task, policy, spec, seed, s, rng, noise, params, n_max, estimator)


def _finish(task, seed, s, n, params, reason, beliefs, labels, actions, maps, recoveries, spec) -> EpisodeResult:
    final = labels[-1] if labels else ground_truth_state(s, task)
    success = reason == "inserted" and final == INSERTED
    B = np.array(beliefs) if beliefs else np.zeros((0, len(spec.states)))
    return EpisodeResult(task.task_id, seed, success, n * params.dt, reason, B, labels, actions, maps,
                         recoveries, final)


def _run_manual(task, policy, spec, seed, s, rng, noise, params, n_max) -> EpisodeResult:
    ctrl = ManualController(spec, task, policy.thresholds)
    s = switch_action(s, ctrl.action)
    labels, actions = [], []
    reason = "timeout"
    n = 0
    for n in range(1, n_max + 1):
        a = ctrl.action
        s = step(s, spec.action(a), task, rng, params=params)
        frame = sense(s, task, noise, rng)
        labels.append(ground_truth_state(s, task))
        actions.append(a)
        ctrl.observe(frame)
        if ctrl.done:
            reason = "inserted" if labels[-1] == INSERTED else "unrecoverable"
            break
    return _finish(task, seed, s, n, params, reason, [], labels, actions, [], 0, spec)


def _run_closed_loop(task, policy, spec, seed, s, rng, noise, params, n_max, estimator) -> EpisodeResult:
    estimator.reset()
    action = "Prepare"
    s = switch_action(s, action)
    beliefs, labels, actions, maps = [], [], [], []
    streak = 0
    recoveries = 0
    reason = "timeout"
    n = 0
    for n in range(1, n_max + 1):
        s = step(s, spec.action(action), task, rng, params=params)
        frame = sense(s, task, noise, rng)
        b = estimator.observe(frame)
        m = spec.state_ids[int(np.argmax(b))]
        beliefs.append(np.asarray(b, dtype=float))
        labels.append(ground_truth_state(s, task))
        actions.append(action)
        maps.append(m)

        streak = streak + 1 if m == policy.terminal_state else 0
        if streak >= policy.confirm_frames:
            reason = "inserted"
            break
        cmd = next_action(m, policy)
        if cmd.action is None:
            # awaiting confirmation: keep pushing
            continue
        if cmd.perturb:
            if action == cmd.action:
                continue
            recoveries += 1
            if recoveries > policy.max_recoveries:
                reason = "unrecoverable"
                break
            d = policy.recovery_perturbation
            target = rng.uniform(-d, d, 2)
            action = cmd.action
            s = switch_action(s, action, target_xy=target)
            continue
        nxt = _chain(cmd.action, action, s, spec)
        if nxt != action:
            action = nxt
            s = switch_action(s, action)
    return _finish(task, seed, s, n, params, reason, beliefs, labels, actions, maps, recoveries, spec)


def _chain(wanted: str, current: str, s, spec: DomainSpec) -> str:
    # in free space: hold the approach pose for Prepare's duration, then descend until contact is seen
    if wanted != "Prepare":
        return wanted
    if current == "MakeContact":
        return current
    if current == "Prepare" and s.clock - s.action_t0 >= spec.action("Prepare").max_t - 1e-9:
        return "MakeContact"
    return "Prepare"
