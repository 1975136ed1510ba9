"""Handcrafted features, logistic predicate sensors and the direct state-classifier baseline.

Each predicate is served by a feature *recipe*: a short list of named
channels computed from a frame and a short window of preceding frames.
Units are chosen so that every channel is O(1) in typical operation.

========================  ===============================================
channel                   definition
========================  ===============================================
``fmag``                  force magnitude, N
``fz``                    vertical force, N (negative when pressing down)
``flat``                  lateral force magnitude, N
``speed``                 speed, cm/s
``vz``                    vertical velocity, cm/s
``vlat``                  lateral speed, cm/s
``dz_w``                  z change over the last ``WINDOW`` frames, mm
``dfz_w``                 vertical-force change over the window, N
``v0`` .. ``v5``          visual-proxy components
``vI-vJ``                 pairwise difference of visual components
========================  ===============================================
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .domain import DomainSpec, Predicate, mask_table
from .frames import ObservationFrame, Trajectory

EPS = 1e-6
WINDOW = 10

MF_RECIPES: dict[str, tuple[str, ...]] = {
    "motion-force-in-contact": ("fmag", "fz", "flat", "speed", "vz", "dfz_w"),
    "motion-force-dropping": ("vz", "dz_w", "fz", "dfz_w", "speed"),
    "motion-force-axis-aligned": ("vlat", "flat", "fz", "vz", "dz_w", "speed"),
    "motion-force-fully-inserted": ("fz", "fmag", "flat", "vz", "speed", "dz_w"),
}
MF_DEFAULT = ("fmag", "fz", "flat", "speed", "vz", "vlat", "dz_w", "dfz_w")
VISUAL_DEFAULT = ("v0", "v1", "v2", "v3", "v4", "v5", "v0-v4", "v3-v2")


def recipe_for(predicate: Predicate) -> tuple[str, tuple[str, ...]]:
    """Return ``(tag, channel names)`` for a predicate."""
    if predicate.modality == "visual":
        return "visual-default", VISUAL_DEFAULT
    if predicate.id in MF_RECIPES:
        return f"mf:{predicate.id}", MF_RECIPES[predicate.id]
    return "mf-default", MF_DEFAULT


def modality_channels(modality: str) -> tuple[str, ...]:
    """All channels of a modality, in a fixed order (used by the state classifier)."""
    if modality == "visual":
        return VISUAL_DEFAULT
    return MF_DEFAULT


# -- channel computation -----------------------------------------------------


def _window_delta(x: np.ndarray, w: int) -> np.ndarray:
    idx = np.maximum(np.arange(len(x)) - w, 0)
    return x - x[idx]


def channels(position, velocity, force, visual) -> dict[str, np.ndarray]:
    """Compute every channel for a contiguous block of frames (rows in time order)."""
    position = np.atleast_2d(position)
    velocity = np.atleast_2d(velocity)
    force = np.atleast_2d(force)
    visual = np.atleast_2d(visual)
    ch = {
        "fmag": np.linalg.norm(force, axis=1),
        "fz": force[:, 2],
        "flat": np.hypot(force[:, 0], force[:, 1]),
        "speed": 100.0 * np.linalg.norm(velocity, axis=1),
        "vz": 100.0 * velocity[:, 2],
        "vlat": 100.0 * np.hypot(velocity[:, 0], velocity[:, 1]),
        "dz_w": 1000.0 * _window_delta(position[:, 2], WINDOW),
        "dfz_w": _window_delta(force[:, 2], WINDOW),
    }
    for k in range(visual.shape[1]):
        ch[f"v{k}"] = visual[:, k]
    return ch


def _column(ch: dict[str, np.ndarray], name: str) -> np.ndarray:
    if name in ch:
        return ch[name]
    a, _, b = name.partition("-")
    return ch[a] - ch[b]


def recipe_matrix(ch: dict[str, np.ndarray], names) -> np.ndarray:
    return np.column_stack([_column(ch, n) for n in names])


def trajectory_channels(traj: Trajectory) -> dict[str, np.ndarray]:
    return channels(traj.position, traj.velocity, traj.force, traj.visual)


def extract_features(frame: ObservationFrame, predicate: Predicate,
                     history: list[ObservationFrame] | None = None) -> np.ndarray:
    """Feature vector for one frame; ``history`` holds preceding frames, oldest first."""
    _, names = recipe_for(predicate)
    return _frame_matrix(frame, history)(names)


def _frame_matrix(frame: ObservationFrame, history):
    frames = list(history[-WINDOW:]) if history else []
    frames.append(frame)
    ch = channels(
        np.array([f.position for f in frames]), np.array([f.velocity for f in frames]),
        np.array([f.force for f in frames]), np.array([f.visual for f in frames]),
    )
    return lambda names: recipe_matrix(ch, names)[-1]


# -- predicate sensors -------------------------------------------------------


@dataclass
class PredicateSensor:
    predicate: str
    weights: np.ndarray
    bias: float
    recipe: str = ""
    features: tuple[str, ...] = ()
    trained: bool = True

    def logit(self, X: np.ndarray) -> np.ndarray:
        return X @ self.weights + self.bias


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    return np.exp(-np.logaddexp(0.0, -z))


def predict(sensor: PredicateSensor, x) -> float:
    x = np.asarray(x, dtype=float)
    if x.shape != sensor.weights.shape:
        raise ValueError(f"feature length {x.shape} does not match weights {sensor.weights.shape}")
    if not sensor.trained:
        return 0.5
    return float(np.clip(sigmoid(x @ sensor.weights + sensor.bias), EPS, 1.0 - EPS))


def predict_many(sensor: PredicateSensor, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.shape[1] != sensor.weights.shape[0]:
        raise ValueError(f"feature length {X.shape[1]} does not match weights {sensor.weights.shape}")
    if not sensor.trained:
        return np.full(len(X), 0.5)
    return np.clip(sigmoid(X @ sensor.weights + sensor.bias), EPS, 1.0 - EPS)


def masked_loss(sensors: dict[str, PredicateSensor], frame, spec: DomainSpec, history=None) -> float:
    """Negated masked log-likelihood of one labeled frame (non-negative).

    Only predicates whose truth value is fixed by the frame's state contribute.
    """
    state = spec.state(frame.state)
    total = 0.0
    for p in spec.predicates:
        if p.id not in state.determined:
            continue
        h = predict(sensors[p.id], extract_features(frame.frame, p, history))
        y = 1.0 if state.determined[p.id] else 0.0
        total -= y * np.log(h) + (1.0 - y) * np.log(1.0 - h)
    return float(total)


def masked_loss_and_grad(weights: list[np.ndarray], biases: np.ndarray, features: list[np.ndarray],
                         truth: np.ndarray, mask: np.ndarray):
    """Masked cross-entropy of one frame and its analytic gradient.

    ``features[k]`` is predicate k's feature vector; the loss uses the
    unclamped sigmoid so it is smooth everywhere.
    """
    loss = 0.0
    gw, gb = [], np.zeros(len(weights))
    for k, (w, x) in enumerate(zip(weights, features)):
        if not mask[k]:
            gw.append(np.zeros_like(w))
            continue
        z = float(x @ w + biases[k])
        y = truth[k]
        loss += np.logaddexp(0.0, -z) if y else np.logaddexp(0.0, z)
        r = float(sigmoid(z)) - y
        gw.append(r * x)
        gb[k] = r
    return loss, gw, gb


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.1
    iterations: int = 500
    l2: float = 1e-3
    seed: int = 0
    max_per_state: int = 3000
    balance: bool = True

    def as_dict(self) -> dict:
        return {"lr": self.lr, "iterations": self.iterations, "l2": self.l2, "seed": self.seed,
                "max_per_state": self.max_per_state, "balance": self.balance}


@dataclass
class FeatureTable:
    """Features of a set of trajectories, stacked frame-wise."""

    features: dict[str, np.ndarray]  # predicate id -> (N, d)
    state_idx: np.ndarray
    action_idx: np.ndarray
    traj_idx: np.ndarray
    state_features: np.ndarray | None = None  # (N, D) concatenated modality blocks

    def __len__(self) -> int:
        return len(self.state_idx)

    def subset(self, rows: np.ndarray) -> "FeatureTable":
        return FeatureTable(
            {k: v[rows] for k, v in self.features.items()}, self.state_idx[rows], self.action_idx[rows],
            self.traj_idx[rows], None if self.state_features is None else self.state_features[rows],
        )


def state_feature_names(modalities=("motion-force", "visual")) -> list[str]:
    names: list[str] = []
    for m in modalities:
        names.extend(modality_channels(m))
    return names


def build_table(trajectories: list[Trajectory], spec: DomainSpec, with_state_features: bool = True,
                state_modalities=("motion-force", "visual")) -> FeatureTable:
    feats: dict[str, list[np.ndarray]] = {p.id: [] for p in spec.predicates}
    sfeat, sidx, aidx, tidx = [], [], [], []
    s_names = state_feature_names(state_modalities)
    s_pos = {s: i for i, s in enumerate(spec.state_ids)}
    a_pos = {a: i for i, a in enumerate(spec.action_ids)}
    for ti, traj in enumerate(trajectories):
        ch = trajectory_channels(traj)
        for p in spec.predicates:
            feats[p.id].append(recipe_matrix(ch, recipe_for(p)[1]))
        if with_state_features:
            sfeat.append(recipe_matrix(ch, s_names))
        sidx.append(np.array([s_pos.get(s, -1) for s in traj.states], dtype=int))
        aidx.append(np.array([a_pos[a] for a in traj.actions], dtype=int))
        tidx.append(np.full(len(traj), ti, dtype=int))
    cat = lambda xs: np.concatenate(xs) if xs else np.zeros(0, dtype=int)  # noqa: E731
    return FeatureTable(
        {k: np.vstack(v) for k, v in feats.items()},
        cat(sidx), cat(aidx), cat(tidx),
        np.vstack(sfeat) if with_state_features else None,
    )


def balanced_indices(state_idx: np.ndarray, rng: np.random.Generator, max_per_state: int) -> np.ndarray:
    """Resample rows so every present state contributes the same number of frames."""
    present = [s for s in np.unique(state_idx) if s >= 0]
    counts = [int(np.sum(state_idx == s)) for s in present]
    n = min(max(counts), max_per_state)
    rows = []
    for s in present:
        pool = np.flatnonzero(state_idx == s)
        rows.append(rng.choice(pool, size=n, replace=len(pool) < n))
    return np.concatenate(rows)


def _standardize(X: np.ndarray):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return mu, sd


def _gd_logistic(Z, y, m, lam, lr, iters, w0=None, b0=0.0):
    """Full-batch GD on mean masked cross-entropy + L2 (standardized inputs)."""
    n, d = Z.shape
    w = np.zeros(d) if w0 is None else w0.copy()
    b = float(b0)
    for _ in range(iters):
        r = (sigmoid(Z @ w + b) - y) * m
        gw = Z.T @ r / n + lam * w
        gb = r.sum() / n
        w -= lr * gw
        b -= lr * gb
    return w, b


def _objective(Z, y, m, lam, w, b) -> float:
    z = Z @ w + b
    nll = np.where(y > 0.5, np.logaddexp(0.0, -z), np.logaddexp(0.0, z))
    return float((nll * m).sum() / len(Z) + 0.5 * lam * w @ w)


def train_predicate_sensors(data: list[Trajectory] | FeatureTable, spec: DomainSpec, cfg: TrainConfig = TrainConfig(),
                            init: dict[str, PredicateSensor] | None = None,
                            history: dict | None = None) -> dict[str, PredicateSensor]:
    """Train one logistic sensor per predicate on the masked loss.

    ``init`` warm-starts from existing sensors (fine-tuning). When ``history``
    is a dict it receives per-predicate (initial, final) objective values.
    """
    table = data if isinstance(data, FeatureTable) else build_table(data, spec, with_state_features=False)
    if len(table) == 0:
        raise ValueError("no training frames")
    rng = np.random.default_rng(cfg.seed)
    labeled = np.flatnonzero(table.state_idx >= 0)
    rows = labeled[balanced_indices(table.state_idx[labeled], rng, cfg.max_per_state)] if cfg.balance else labeled
    masks, truths = mask_table(spec)
    s = table.state_idx[rows]
    out: dict[str, PredicateSensor] = {}
    for k, p in enumerate(spec.predicates):
        tag, names = recipe_for(p)
        X = table.features[p.id][rows]
        m = masks[s, k].astype(float)
        y = truths[s, k]
        if m.sum() == 0:
            out[p.id] = PredicateSensor(p.id, np.zeros(X.shape[1]), 0.0, tag, names, trained=False)
            continue
        mu, sd = _standardize(X)
        Z = (X - mu) / sd
        w0, b0 = None, 0.0
        if init is not None and init.get(p.id) is not None and init[p.id].trained:
            w0 = init[p.id].weights * sd
            b0 = init[p.id].bias + float(init[p.id].weights @ mu)
        w_init = np.zeros(X.shape[1]) if w0 is None else w0
        w, b = _gd_logistic(Z, y, m, cfg.l2, cfg.lr, cfg.iterations, w0, b0)
        if history is not None:
            history[p.id] = (_objective(Z, y, m, cfg.l2, w_init, b0), _objective(Z, y, m, cfg.l2, w, b))
        weights = w / sd
        bias = b - float(weights @ mu)
        out[p.id] = PredicateSensor(p.id, weights, bias, tag, names, trained=True)
    return out


def sensor_outputs(sensors: dict[str, PredicateSensor], table: FeatureTable, spec: DomainSpec) -> np.ndarray:
    """(N, |Phi|) matrix of clamped sensor probabilities."""
    return np.column_stack([predict_many(sensors[p.id], table.features[p.id]) for p in spec.predicates])


# -- direct state classifier (baseline) --------------------------------------


@dataclass
class StateClassifier:
    states: tuple[str, ...]
    weights: np.ndarray  # (|S|, D)
    bias: np.ndarray  # (|S|,)
    features: tuple[str, ...] = field(default_factory=tuple)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def train_state_classifier(data: list[Trajectory] | FeatureTable, spec: DomainSpec, cfg: TrainConfig = TrainConfig(),
                           modalities=("motion-force", "visual"), init: StateClassifier | None = None) -> StateClassifier:
    """Softmax regression on concatenated modality features with balanced resampling."""
    names = state_feature_names(modalities)
    if isinstance(data, FeatureTable):
        table = data
        full = state_feature_names()
        cols = [full.index(n) for n in names]
        X_all = table.state_features[:, cols]
    else:
        table = build_table(data, spec, state_modalities=modalities)
        X_all = table.state_features
    rng = np.random.default_rng(cfg.seed)
    labeled = np.flatnonzero(table.state_idx >= 0)
    if len(labeled) == 0:
        raise ValueError("no training frames")
    rows = labeled[balanced_indices(table.state_idx[labeled], rng, cfg.max_per_state)] if cfg.balance else labeled
    X = X_all[rows]
    S = len(spec.states)
    Y = np.eye(S)[table.state_idx[rows]]
    mu, sd = _standardize(X)
    Z = (X - mu) / sd
    n = len(Z)
    if init is not None:
        W = init.weights * sd
        b = init.bias + init.weights @ mu
    else:
        W = np.zeros((S, Z.shape[1]))
        b = np.zeros(S)
    for _ in range(cfg.iterations):
        R = softmax(Z @ W.T + b) - Y
        W -= cfg.lr * (R.T @ Z / n + cfg.l2 * W)
        b -= cfg.lr * R.sum(axis=0) / n
    Wr = W / sd
    br = b - Wr @ mu
    return StateClassifier(tuple(spec.state_ids), Wr, br, tuple(names))


def predict_state_features(clf: StateClassifier, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    return softmax(X @ clf.weights.T + clf.bias)


def predict_state(clf: StateClassifier, frame: ObservationFrame, history=None) -> np.ndarray:
    """Probability vector over states for one frame."""
    x = _frame_matrix(frame, history)(clf.features)
    return predict_state_features(clf, x)[0]
