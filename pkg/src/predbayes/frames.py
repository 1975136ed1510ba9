"""Observation frames and labeled trajectories."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VISUAL_DIM = 6


@dataclass(frozen=True)
class ObservationFrame:
    t: float
    action: str
    position: np.ndarray  # m
    velocity: np.ndarray  # m/s
    force: np.ndarray  # N
    visual: np.ndarray  # dimensionless visual-proxy features

    def is_valid(self) -> bool:
        arrays = (self.position, self.velocity, self.force, self.visual)
        return self.t >= 0 and all(np.all(np.isfinite(a)) for a in arrays)

    @classmethod
    def zeros(cls, action: str = "", visual_dim: int = VISUAL_DIM) -> "ObservationFrame":
        z = np.zeros(3)
        return cls(0.0, action, z, z, z, np.zeros(visual_dim))


@dataclass(frozen=True)
class LabeledFrame:
    frame: ObservationFrame
    state: str


@dataclass
class Trajectory:
    """One episode stored column-wise; row ``i`` is the frame at ``t[i]``."""

    task_id: str
    seed: int
    dt: float
    t: np.ndarray
    actions: list[str]
    states: list[str]
    position: np.ndarray
    velocity: np.ndarray
    force: np.ndarray
    visual: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    def frame(self, i: int) -> ObservationFrame:
        return ObservationFrame(
            float(self.t[i]), self.actions[i], self.position[i], self.velocity[i], self.force[i], self.visual[i]
        )

    def labeled(self, i: int) -> LabeledFrame:
        return LabeledFrame(self.frame(i), self.states[i])

    def frames(self) -> list[ObservationFrame]:
        return [self.frame(i) for i in range(len(self))]

    @classmethod
    def from_frames(cls, frames: list[LabeledFrame], task_id: str = "", seed: int = 0, dt: float = 0.02,
                    meta: dict | None = None) -> "Trajectory":
        fs = [lf.frame for lf in frames]
        return cls(
            task_id=task_id,
            seed=seed,
            dt=dt,
            t=np.array([f.t for f in fs], dtype=float),
            actions=[f.action for f in fs],
            states=[lf.state for lf in frames],
            position=np.array([f.position for f in fs], dtype=float).reshape(-1, 3),
            velocity=np.array([f.velocity for f in fs], dtype=float).reshape(-1, 3),
            force=np.array([f.force for f in fs], dtype=float).reshape(-1, 3),
            visual=np.array([f.visual for f in fs], dtype=float).reshape(len(fs), -1),
            meta=dict(meta or {}),
        )
