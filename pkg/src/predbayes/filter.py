"""Discrete Bayes filter over symbolic states."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .domain import DomainSpec
from .frames import ObservationFrame, Trajectory
from .obsmodel import ObservationModelSet, log_output
from .sensors import PredicateSensor, build_table, extract_features, predict, sensor_outputs

BELIEF_FLOOR = 1e-12


@dataclass
class TransitionModel:
    T: np.ndarray  # (|S|, |A|, |S|): T[s_prev, a, s]
    prior: np.ndarray
    states: tuple[str, ...]
    actions: tuple[str, ...]

    def validate(self) -> list[str]:
        problems = []
        if not np.allclose(self.T.sum(axis=2), 1.0, atol=1e-9):
            problems.append("transition rows do not sum to 1")
        if abs(self.prior.sum() - 1.0) > 1e-9:
            problems.append("prior does not sum to 1")
        return problems


def estimate_transitions(trajectories: list[Trajectory], spec: DomainSpec, alpha: float = 0.1) -> TransitionModel:
    """Add-alpha smoothed visit counts; the transition into frame t is attributed to frame t's action."""
    S, A = len(spec.states), len(spec.actions)
    counts = np.zeros((S, A, S))
    first = np.zeros(S)
    si = {s: i for i, s in enumerate(spec.state_ids)}
    ai = {a: i for i, a in enumerate(spec.action_ids)}
    for traj in trajectories:
        if len(traj) == 0:
            continue
        s_idx = [si[s] for s in traj.states]
        a_idx = [ai[a] for a in traj.actions]
        first[s_idx[0]] += 1
        for t in range(1, len(s_idx)):
            counts[s_idx[t - 1], a_idx[t], s_idx[t]] += 1
    sm = counts + alpha
    tot = sm.sum(axis=2, keepdims=True)
    T = np.where(tot > 0, sm / np.where(tot > 0, tot, 1.0), 1.0 / S)
    pf = first + alpha
    prior = pf / pf.sum() if pf.sum() > 0 else np.full(S, 1.0 / S)
    return TransitionModel(T, prior, tuple(spec.state_ids), tuple(spec.action_ids))


def _floor(b: np.ndarray) -> np.ndarray:
    b = b / b.sum()
    if b.min() < BELIEF_FLOOR:
        b = np.maximum(b, BELIEF_FLOOR)
        b = b / b.sum()
    return b


def predict_step(b: np.ndarray, action: str | int, tm: TransitionModel) -> np.ndarray:
    a = tm.actions.index(action) if isinstance(action, str) else int(action)
    return _floor(tm.T[:, a, :].T @ np.asarray(b, dtype=float))


def correct_with_loglik(b: np.ndarray, loglik: np.ndarray) -> np.ndarray:
    lw = np.log(np.maximum(b, 1e-300)) + loglik
    lw -= lw.max()
    return _floor(np.exp(lw))


def frame_log_likelihood(frame: ObservationFrame, action: str, sensors: dict[str, PredicateSensor],
                         models: ObservationModelSet, spec: DomainSpec, history=None) -> np.ndarray:
    """Per-state sum over predicates of GMM log-densities of the log sensor outputs."""
    outs = {p.id: float(log_output(predict(sensors[p.id], extract_features(frame, p, history))))
            for p in spec.predicates if p.id in models.predicates}
    ll = np.zeros(len(spec.states))
    for si, s in enumerate(spec.state_ids):
        ll[si] = sum(models.logpdf(s, action, pid, x) for pid, x in outs.items())
    return ll


def correct_step(b: np.ndarray, frame: ObservationFrame, action: str, sensors, models: ObservationModelSet,
                 spec: DomainSpec, history=None) -> np.ndarray:
    return correct_with_loglik(b, frame_log_likelihood(frame, action, sensors, models, spec, history))


def update(b: np.ndarray, action: str, frame: ObservationFrame, tm: TransitionModel, sensors,
           models: ObservationModelSet, spec: DomainSpec, history=None) -> np.ndarray:
    return correct_step(predict_step(b, action, tm), frame, action, sensors, models, spec, history)


def map_state(b: np.ndarray, spec: DomainSpec | None = None):
    """Index (or id, when ``spec`` is given) of the most probable state; ties go to the earlier state."""
    i = int(np.argmax(b))
    return spec.state_ids[i] if spec is not None else i


def run_filter(loglik: np.ndarray, action_idx: np.ndarray, tm: TransitionModel) -> np.ndarray:
    """Beliefs (N, |S|) for a sequence: correct the prior with frame 0, then predict+correct."""
    N, S = loglik.shape
    out = np.empty((N, S))
    if N == 0:
        return out
    b = correct_with_loglik(tm.prior, loglik[0])
    out[0] = b
    Ts = [tm.T[:, a, :].T for a in range(len(tm.actions))]
    for t in range(1, N):
        b = _floor(Ts[action_idx[t]] @ b)
        b = correct_with_loglik(b, loglik[t])
        out[t] = b
    return out


def trajectory_log_likelihoods(traj: Trajectory, sensors, models: ObservationModelSet, spec: DomainSpec):
    table = build_table([traj], spec, with_state_features=False)
    logs = log_output(sensor_outputs(sensors, table, spec))
    return models.log_likelihoods(logs, table.action_idx), table.action_idx


def filter_trajectory(traj: Trajectory, tm: TransitionModel, sensors, models: ObservationModelSet,
                      spec: DomainSpec) -> np.ndarray:
    ll, aidx = trajectory_log_likelihoods(traj, sensors, models, spec)
    return run_filter(ll, aidx, tm)


def belief_trace_csv(traj: Trajectory, beliefs: np.ndarray, spec: DomainSpec) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "action", *[f"p_{s}" for s in spec.state_ids], "map", "truth"])
    for i in range(len(traj)):
        w.writerow([repr(float(traj.t[i])), traj.actions[i], *[repr(float(p)) for p in beliefs[i]],
                    map_state(beliefs[i], spec), traj.states[i]])
    return buf.getvalue()
