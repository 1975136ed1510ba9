"""File formats: datasets as a manifest plus JSON-lines trajectories, models as JSON documents.

Floats are written with their shortest round-trip representation, so equal
inputs always produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .filter import TransitionModel
from .frames import Trajectory
from .obsmodel import UNIFORM_LOGPDF, Gmm1D, ObservationModelSet
from .sensors import PredicateSensor, StateClassifier

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
TRAJECTORIES = "trajectories.jsonl"
SENSORS = "sensors.json"
STATE_CLASSIFIER = "state_classifier.json"
OBS_MODELS = "obs_models.json"
TRANSITIONS = "transitions.json"


class MissingArtifact(FileNotFoundError):
    """A prerequisite file produced by an earlier pipeline stage is absent."""

    def __init__(self, path: Path | str, hint: str = ""):
        self.path = str(path)
        super().__init__(f"missing prerequisite file {self.path}" + (f" ({hint})" if hint else ""))


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json(path: Path | str, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n")


def read_json(path: Path | str, hint: str = ""):
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(path, hint)
    return json.loads(path.read_text())


def _floats(a: np.ndarray) -> list:
    return np.asarray(a, dtype=float).tolist()


# -- trajectories ---------------------------------------------------------------


def trajectory_header(traj: Trajectory) -> dict:
    return {"record": "header", "task_id": traj.task_id, "seed": int(traj.seed), "dt": float(traj.dt),
            "noise": traj.meta.get("noise", {}), "frames": len(traj),
            "meta": {k: v for k, v in traj.meta.items() if k != "noise"}}


def frame_record(traj: Trajectory, i: int) -> dict:
    return {"t": float(traj.t[i]), "action": traj.actions[i], "state": traj.states[i],
            "pos": _floats(traj.position[i]), "vel": _floats(traj.velocity[i]),
            "force": _floats(traj.force[i]), "vis": _floats(traj.visual[i])}


def write_trajectories(fh, trajectories: list[Trajectory]) -> None:
    """One header line per episode followed by one line per frame."""
    for traj in trajectories:
        fh.write(_dump(trajectory_header(traj)) + "\n")
        for i in range(len(traj)):
            fh.write(_dump(frame_record(traj, i)) + "\n")


def read_trajectories(fh) -> list[Trajectory]:
    out: list[Trajectory] = []
    header, frames = None, []

    def flush():
        if header is None:
            return
        if len(frames) != header["frames"]:
            raise ValueError(f"episode {header['task_id']}/{header['seed']}: expected {header['frames']} frames, "
                             f"found {len(frames)}")
        out.append(_assemble(header, frames))

    for lineno, line in enumerate(fh, 1):
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("record") == "header":
            flush()
            header, frames = rec, []
        elif header is None:
            raise ValueError(f"line {lineno}: frame record before any header")
        else:
            frames.append(rec)
    flush()
    return out


def _assemble(header: dict, frames: list[dict]) -> Trajectory:
    n = len(frames)
    col = lambda k, w: np.asarray([f[k] for f in frames], dtype=float).reshape(n, w)  # noqa: E731
    d_v = len(frames[0]["vis"]) if n else 0
    meta = dict(header.get("meta", {}))
    meta["noise"] = header.get("noise", {})
    return Trajectory(
        task_id=header["task_id"], seed=int(header["seed"]), dt=float(header["dt"]),
        t=np.asarray([f["t"] for f in frames], dtype=float), actions=[f["action"] for f in frames],
        states=[f["state"] for f in frames], position=col("pos", 3), velocity=col("vel", 3),
        force=col("force", 3), visual=col("vis", d_v), meta=meta,
    )


def save_dataset(directory: Path | str, trajectories: list[Trajectory], manifest: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / TRAJECTORIES, "w") as fh:
        write_trajectories(fh, trajectories)
    man = dict(manifest)
    man.update({"format": FORMAT_VERSION, "n_trajectories": len(trajectories),
                "frames": int(sum(len(t) for t in trajectories)), "trajectories": TRAJECTORIES})
    write_json(directory / MANIFEST, man)
    return directory


def load_dataset(directory: Path | str) -> tuple[list[Trajectory], dict]:
    directory = Path(directory)
    manifest = read_json(directory / MANIFEST, "run `generate` first")
    path = directory / manifest.get("trajectories", TRAJECTORIES)
    if not path.exists():
        raise MissingArtifact(path, "run `generate` first")
    with open(path) as fh:
        trajs = read_trajectories(fh)
    return trajs, manifest


# -- models -------------------------------------------------------------------


def sensors_to_dict(sensors: dict[str, PredicateSensor], metadata: dict | None = None) -> dict:
    return {"metadata": dict(metadata or {}),
            "sensors": {pid: {"predicate": pid, "weights": _floats(s.weights), "bias": float(s.bias),
                              "recipe": s.recipe, "features": list(s.features), "trained": bool(s.trained)}
                        for pid, s in sensors.items()}}


def sensors_from_dict(d: dict) -> dict[str, PredicateSensor]:
    d = d["sensors"]
    return {pid: PredicateSensor(pid, np.asarray(v["weights"], dtype=float), float(v["bias"]), v.get("recipe", ""),
                                 tuple(v.get("features", ())), bool(v.get("trained", True))) for pid, v in d.items()}


def state_classifier_to_dict(clf: StateClassifier) -> dict:
    return {"states": list(clf.states), "weights": _floats(clf.weights), "bias": _floats(clf.bias),
            "features": list(clf.features)}


def state_classifier_from_dict(d: dict) -> StateClassifier:
    return StateClassifier(tuple(d["states"]), np.asarray(d["weights"], dtype=float),
                           np.asarray(d["bias"], dtype=float), tuple(d["features"]))


def _gmm(g: Gmm1D) -> dict:
    return {"K": g.K, "weights": _floats(g.weights), "means": _floats(g.means), "variances": _floats(g.variances)}


def _gmm_from(d: dict) -> Gmm1D:
    return Gmm1D(*(np.asarray(d[k], dtype=float) for k in ("weights", "means", "variances")))


def obs_models_to_dict(m: ObservationModelSet) -> dict:
    return {
        "states": list(m.states), "actions": list(m.actions), "predicates": list(m.predicates),
        "uniform_logpdf": UNIFORM_LOGPDF,
        "specific": [{"state": s, "action": a, "predicate": p, "tier": "specific", **_gmm(g)}
                     for (s, a, p), g in m.specific.items()],
        "state": [{"state": s, "predicate": p, "tier": "state", **_gmm(g)}
                  for (s, p), g in m.state_level.items()],
        "global": [{"predicate": p, "tier": "global", **_gmm(g)} for p, g in m.global_level.items()],
    }


def obs_models_from_dict(d: dict) -> ObservationModelSet:
    m = ObservationModelSet(tuple(d["states"]), tuple(d["actions"]), tuple(d["predicates"]))
    for r in d["specific"]:
        m.specific[(r["state"], r["action"], r["predicate"])] = _gmm_from(r)
    for r in d["state"]:
        m.state_level[(r["state"], r["predicate"])] = _gmm_from(r)
    for r in d["global"]:
        m.global_level[r["predicate"]] = _gmm_from(r)
    return m


def transitions_to_dict(tm: TransitionModel) -> dict:
    return {"states": list(tm.states), "actions": list(tm.actions), "T": _floats(tm.T), "prior": _floats(tm.prior)}


def transitions_from_dict(d: dict) -> TransitionModel:
    return TransitionModel(np.asarray(d["T"], dtype=float), np.asarray(d["prior"], dtype=float),
                           tuple(d["states"]), tuple(d["actions"]))
