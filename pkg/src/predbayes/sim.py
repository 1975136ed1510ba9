"""Deterministic peg-in-hole simulator with impedance-style point dynamics.

The peg tip is a unit-mass point driven by the Cartesian impedance law

    F = -K_P (x - x_d) - K_D (xdot - xdot_d) - F_ff

with a flat support surface, Coulomb friction while sliding, a hole that
captures the tip when it passes inside the clearance box, a jam force that
must be overcome to insert past the chamfer, and a mount edge beyond which
the peg may fall off. Ground-truth symbolic labels are computed from the
simulator state by fixed rules.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .domain import Action, DomainSpec
from .frames import VISUAL_DIM, ObservationFrame, Trajectory

FREE, ONSURFACE, SEARCHING, ALIGNED, INSERTED, FALLEN = (
    "FREE", "ONSURFACE", "SEARCHING", "ALIGNED", "INSERTED", "FALLEN",
)


@dataclass(frozen=True)
class TaskConfig:
    task_id: str
    hole_center: tuple[float, float, float]  # m; z is the surface height at the hole
    hole_half_extent: tuple[float, float]  # capture clearance box, m
    surface_height: float  # m
    board_bounds: tuple[float, float, float, float]  # xmin, xmax, ymin, ymax of the mount, m
    insertion_depth: float  # m
    friction: float
    fall_prob: float  # per frame while in contact outside the mount

    def validate(self) -> list[str]:
        problems = []
        if min(self.hole_half_extent) <= 0:
            problems.append("clearance must be positive")
        if self.insertion_depth <= 0:
            problems.append("insertion depth must be positive")
        x0, x1, y0, y1 = self.board_bounds
        hx, hy, _ = self.hole_center
        if not (x0 < hx < x1 and y0 < hy < y1):
            problems.append("hole lies outside the board bounds")
        if not 0.0 <= self.fall_prob <= 1.0:
            problems.append("fall probability outside [0, 1]")
        return problems

    @property
    def clearance(self) -> float:
        return min(self.hole_half_extent)

    def perturbed(self, rng: np.random.Generator, magnitude: float = 0.002) -> "TaskConfig":
        """Shift hole and surface uniformly within +-magnitude per axis."""
        d = rng.uniform(-magnitude, magnitude, size=3)
        hx, hy, hz = self.hole_center
        x0, x1, y0, y1 = self.board_bounds
        return replace(
            self,
            hole_center=(hx + d[0], hy + d[1], hz + d[2]),
            surface_height=self.surface_height + d[2],
            board_bounds=(x0 + d[0], x1 + d[0], y0 + d[1], y1 + d[1]),
        )


@dataclass(frozen=True)
class NoiseConfig:
    position: float = 5e-5  # m
    velocity: float = 3e-3  # m/s
    force: float = 0.5  # N
    visual: float = 0.15
    seed: int = 0

    def as_dict(self) -> dict:
        return {"position": self.position, "velocity": self.velocity, "force": self.force,
                "visual": self.visual, "seed": self.seed}


@dataclass(frozen=True)
class SimParams:
    dt: float = 0.02
    substeps: int = 5
    prep_height: float = 0.03  # approach height above the nominal surface (z=0)
    descend_speed: float = 0.02
    search_amplitude: tuple[float, float] = (0.005, 0.005)
    search_freq: tuple[float, float] = (1.9, 1.9 * 0.6180339887)  # rad/s, incommensurate
    search_phase: float = 0.0
    chamfer_depth: float = 0.002
    jam_force: float = 5.0
    popout_force: float = 2.5
    fall_drop: float = 0.015
    lift_clear: float = 0.005


@dataclass(frozen=True)
class SimState:
    position: np.ndarray
    velocity: np.ndarray
    contact: bool = False
    aligned: bool = False
    inserted_depth: float = 0.0
    fallen: bool = False
    clock: float = 0.0
    # controller context
    action: str = ""
    action_t0: float = 0.0
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(3))
    target_xy: np.ndarray = field(default_factory=lambda: np.zeros(2))
    search_clock: float = 0.0
    capture_armed: bool = True
    force: np.ndarray = field(default_factory=lambda: np.zeros(3))  # noiseless sensed wrench


def initial_state(position, target_xy=(0.0, 0.0)) -> SimState:
    return SimState(position=np.asarray(position, dtype=float), velocity=np.zeros(3),
                    anchor=np.asarray(position, dtype=float), target_xy=np.asarray(target_xy, dtype=float))


def lissajous_reference(t: float, amplitudes=(0.005, 0.005), freqs=(1.9, 1.9 * 0.6180339887),
                        phase: float = 0.0) -> np.ndarray:
    A, B = amplitudes
    a, b = freqs
    return np.array([A * math.sin(a * t + phase), B * math.sin(b * t)])


def _lissajous_velocity(t, amplitudes, freqs, phase):
    A, B = amplitudes
    a, b = freqs
    return np.array([A * a * math.cos(a * t + phase), B * b * math.cos(b * t)])


def _reference(s: SimState, action: Action, params: SimParams, t: float, search_t: float):
    if action.ref == "hold":
        xd = np.array([s.target_xy[0], s.target_xy[1], params.prep_height])
        vd = np.zeros(3)
    elif action.ref == "descend":
        tau = t - s.action_t0
        xd = s.anchor - np.array([0.0, 0.0, params.descend_speed * tau])
        vd = np.array([0.0, 0.0, -params.descend_speed])
    elif action.ref == "lissajous":
        xy = s.target_xy + lissajous_reference(search_t, params.search_amplitude, params.search_freq,
                                               params.search_phase)
        vxy = _lissajous_velocity(search_t, params.search_amplitude, params.search_freq, params.search_phase)
        xd = np.array([xy[0], xy[1], s.anchor[2]])
        vd = np.array([vxy[0], vxy[1], 0.0])
    else:  # push
        xd = s.anchor.copy()
        vd = np.zeros(3)
    return xd, vd


def _inside_box(xy, center, half) -> bool:
    return abs(xy[0] - center[0]) <= half[0] and abs(xy[1] - center[1]) <= half[1]


def _on_mount(xy, bounds) -> bool:
    x0, x1, y0, y1 = bounds
    return x0 <= xy[0] <= x1 and y0 <= xy[1] <= y1


def switch_action(s: SimState, action_id: str, target_xy=None) -> SimState:
    return replace(
        s, action=action_id, action_t0=s.clock, anchor=s.position.copy(),
        target_xy=s.target_xy if target_xy is None else np.asarray(target_xy, dtype=float),
    )


def step(s: SimState, action: Action, task: TaskConfig, rng: np.random.Generator | None = None,
         dt: float | None = None, params: SimParams = SimParams()) -> SimState:
    """Advance one frame with semi-implicit Euler sub-steps."""
    dt = params.dt if dt is None else dt
    if s.action != action.id:
        s = switch_action(s, action.id)
    kp = np.asarray(action.kp)
    kd = np.asarray(action.kd)
    ff = np.asarray(action.ff)
    hole = np.asarray(task.hole_center[:2])
    half = np.asarray(task.hole_half_extent)
    surface = task.surface_height

    p = s.position.copy()
    v = s.velocity.copy()
    aligned, fallen, armed = s.aligned, s.fallen, s.capture_armed
    searching = action.ref == "lissajous"
    h = dt / params.substeps
    force_acc = np.zeros(3)
    on_floor = False

    for k in range(params.substeps):
        t = s.clock + k * h
        search_t = s.search_clock + (k * h if searching else 0.0)
        xd, vd = _reference(s, action, params, t, search_t)
        F = -kp * (p - xd) - kd * (v - vd) - ff
        seat = surface - params.chamfer_depth
        if fallen:
            floor = surface - params.fall_drop
        elif aligned:
            # the chamfer seat holds the peg unless pushed past the jam force
            committed = p[2] < seat - 1e-9 or -F[2] > params.jam_force
            floor = surface - task.insertion_depth if committed else seat
        else:
            floor = surface
        resting = p[2] <= floor + 1e-9
        reaction = np.zeros(3)  # environment force on the peg

        # lateral
        v_lat = v[:2] + F[:2] * h
        if aligned:
            if p[2] >= seat - 1e-9 and np.hypot(*F[:2]) > params.popout_force:
                aligned, armed = False, False
                p[2] = max(p[2], surface)
                floor = surface
            else:
                p_lat = p[:2] + v_lat * h
                lo, hi = hole - half, hole + half
                clamped = np.clip(p_lat, lo, hi)
                hit = clamped != p_lat
                reaction[:2] = np.where(hit, -F[:2] - v[:2] / h, 0.0)
                v_lat = np.where(hit, 0.0, v_lat)
                p[:2] = clamped
        if not aligned:
            if resting:
                normal = max(0.0, -F[2])
                speed = float(np.hypot(*v_lat))
                fmax = task.friction * normal
                if speed > 0:
                    fr = min(speed / h, fmax)
                    reaction[:2] = -fr * v_lat / speed
                    v_lat = v_lat + reaction[:2] * h
            p[:2] = p[:2] + v_lat * h
        v[:2] = v_lat

        # vertical
        vz = v[2] + F[2] * h
        if aligned and p[2] <= seat + 1e-9 and vz < 0:
            jam = min(-vz / h, params.jam_force)
            vz += jam * h
            reaction[2] += jam
        z = p[2] + vz * h
        if z < floor:
            reaction[2] += -vz / h if vz < 0 else 0.0
            z, vz = floor, 0.0
        p[2], v[2] = z, vz
        on_floor = z <= floor + 1e-9
        force_acc += -reaction

        # capture / fall / recovery bookkeeping
        if not aligned and not fallen:
            inside = _inside_box(p[:2], hole, half)
            if not inside:
                armed = True
            elif on_floor and armed:
                aligned = True
        if fallen and p[2] > surface + params.lift_clear:
            fallen = False

    if not aligned and not fallen and on_floor and not _on_mount(p[:2], task.board_bounds):
        if rng is not None and rng.random() < task.fall_prob:
            fallen = True

    depth = min(max(surface - p[2], 0.0), task.insertion_depth) if aligned else 0.0
    contact = on_floor or aligned
    return replace(
        s, position=p, velocity=v, contact=bool(contact), aligned=bool(aligned),
        inserted_depth=float(depth), fallen=bool(fallen), clock=s.clock + dt,
        search_clock=s.search_clock + (dt if searching else 0.0), capture_armed=bool(armed),
        force=force_acc / params.substeps,
    )


def ground_truth_state(s: SimState, task: TaskConfig) -> str:
    if s.fallen:
        return FALLEN
    if s.aligned and s.inserted_depth >= task.insertion_depth - 1e-9:
        return INSERTED
    if s.aligned:
        return ALIGNED
    if s.contact and s.action == "Search":
        return SEARCHING
    if s.contact:
        return ONSURFACE
    return FREE


def visual_proxy(s: SimState, task: TaskConfig) -> np.ndarray:
    """Noiseless visual-proxy features (cm-scaled geometry and soft flags)."""
    height = (s.position[2] - task.surface_height) * 100.0
    dist = float(np.hypot(*(s.position[:2] - np.asarray(task.hole_center[:2])))) * 100.0
    x0, x1, y0, y1 = task.board_bounds
    x, y = s.position[:2]
    edge = min(x - x0, x1 - x, y - y0, y1 - y) * 100.0
    frac = s.inserted_depth / task.insertion_depth if s.aligned else 0.0
    below = 1.0 / (1.0 + math.exp(min(50.0, height / 0.1)))
    return np.array([height, dist, 1.0 if s.fallen else 0.0, frac, below, edge])


def sense(s: SimState, task: TaskConfig, noise: NoiseConfig, rng: np.random.Generator) -> ObservationFrame:
    pos = s.position + rng.normal(0.0, noise.position, 3) if noise.position else s.position.copy()
    vel = s.velocity + rng.normal(0.0, noise.velocity, 3) if noise.velocity else s.velocity.copy()
    frc = s.force + rng.normal(0.0, noise.force, 3) if noise.force else s.force.copy()
    vis = visual_proxy(s, task)
    if noise.visual:
        vis = vis + rng.normal(0.0, noise.visual, VISUAL_DIM)
    return ObservationFrame(round(s.clock, 9), s.action, pos, vel, frc, vis)


# -- threshold-based open-loop policy ----------------------------------------


@dataclass(frozen=True)
class ManualThresholds:
    contact_force: float = 2.0  # |F_z| above this means contact
    align_drop_fraction: float = 0.5  # z-drop beyond this fraction of the clearance means aligned

    def align_drop(self, task: TaskConfig) -> float:
        return self.align_drop_fraction * task.clearance


class DropDetector:
    """Flags a z-drop below the running sliding height (max of a short moving average)."""

    def __init__(self, threshold: float, window: int = 10):
        self.threshold = threshold
        self.window = window
        self.reset()

    def reset(self):
        self.buf: list[float] = []
        self.ref: float | None = None

    def update(self, z: float) -> bool:
        self.buf.append(z)
        if len(self.buf) > self.window:
            self.buf.pop(0)
        avg = sum(self.buf) / len(self.buf)
        if len(self.buf) == self.window:
            self.ref = avg if self.ref is None else max(self.ref, avg)
        ref = self.ref if self.ref is not None else self.buf[0]
        return ref - z > self.threshold


class ManualController:
    """Prepare -> MakeContact -> Search -> Insert switched by thresholds and duration limits."""

    sequence = ("Prepare", "MakeContact", "Search", "Insert")

    def __init__(self, domain: DomainSpec, task: TaskConfig, thresholds: ManualThresholds = ManualThresholds()):
        self.domain = domain
        self.task = task
        self.th = thresholds
        self.stage = 0
        self.stage_t0 = 0.0
        self.drop = DropDetector(thresholds.align_drop(task))
        self.done = False

    @property
    def action(self) -> str:
        return self.sequence[self.stage]

    def _advance(self, t: float):
        self.stage += 1
        self.stage_t0 = t
        if self.stage >= len(self.sequence):
            self.stage = len(self.sequence) - 1
            self.done = True

    def observe(self, frame: ObservationFrame) -> str:
        """Consume a frame taken under the current action; return the action for the next step."""
        elapsed = frame.t - self.stage_t0
        limit = self.domain.action(self.action).max_t
        name = self.action
        if name == "MakeContact" and abs(frame.force[2]) > self.th.contact_force:
            self._advance(frame.t)
        elif name == "Search" and self.drop.update(float(frame.position[2])):
            self._advance(frame.t)
        elif elapsed >= limit - 1e-9:
            self._advance(frame.t)
        return self.action


def manual_state_predictions(traj: Trajectory, task: TaskConfig,
                             thresholds: ManualThresholds = ManualThresholds()) -> list[str]:
    """Replay threshold rules over a recorded trajectory to produce a state label per frame."""
    out = []
    drop = DropDetector(thresholds.align_drop(task))
    prev_action = None
    z_ref = None
    for i in range(len(traj)):
        a = traj.actions[i]
        fz = traj.force[i, 2]
        z = float(traj.position[i, 2])
        if a != prev_action and a == "Search":
            drop.reset()
        prev_action = a
        if a in ("Prepare", "MakeContact"):
            out.append(ONSURFACE if abs(fz) > thresholds.contact_force else FREE)
        elif a == "Search":
            out.append(ALIGNED if drop.update(z) else SEARCHING)
            z_ref = drop.ref if drop.ref is not None else z
        else:
            depth = (z_ref - z) if z_ref is not None else 0.0
            out.append(INSERTED if depth >= 0.9 * task.insertion_depth else ALIGNED)
    return out


@dataclass(frozen=True)
class RolloutConfig:
    start_jitter: float = 0.01  # m, xy jitter of the start pose
    start_height: tuple[float, float] = (0.02, 0.04)
    hole_jitter: float = 0.001  # m, per-episode grasp/hole offset
    max_time: float = 30.0


def start_state(rng: np.random.Generator, cfg: RolloutConfig = RolloutConfig(), target_xy=(0.0, 0.0)) -> SimState:
    xy = rng.uniform(-cfg.start_jitter, cfg.start_jitter, 2)
    z = rng.uniform(*cfg.start_height)
    return initial_state([xy[0], xy[1], z], target_xy)


def rollout_openloop(task: TaskConfig, domain: DomainSpec, seed: int, noise: NoiseConfig = NoiseConfig(),
                     thresholds: ManualThresholds = ManualThresholds(), cfg: RolloutConfig = RolloutConfig(),
                     params: SimParams = SimParams()) -> Trajectory:
    """Run the threshold-switched open-loop chain and record labeled frames."""
    rng = np.random.default_rng(seed)
    if cfg.hole_jitter > 0:
        task = task.perturbed(rng, cfg.hole_jitter)
    s = start_state(rng, cfg)
    ctrl = ManualController(domain, task, thresholds)
    s = switch_action(s, ctrl.action)
    rows: list[tuple[ObservationFrame, str]] = []
    n_max = int(round(cfg.max_time / params.dt))
    for _ in range(n_max):
        s = step(s, domain.action(ctrl.action), task, rng, params=params)
        frame = sense(s, task, noise, rng)
        rows.append((frame, ground_truth_state(s, task)))
        ctrl.observe(frame)
        if ctrl.done:
            break
    return _to_trajectory(rows, task, seed, noise, params)


def _to_trajectory(rows, task: TaskConfig, seed: int, noise: NoiseConfig, params: SimParams) -> Trajectory:
    frames = [r[0] for r in rows]
    return Trajectory(
        task_id=task.task_id, seed=seed, dt=params.dt,
        t=np.array([f.t for f in frames]),
        actions=[f.action for f in frames],
        states=[r[1] for r in rows],
        position=np.array([f.position for f in frames]).reshape(-1, 3),
        velocity=np.array([f.velocity for f in frames]).reshape(-1, 3),
        force=np.array([f.force for f in frames]).reshape(-1, 3),
        visual=np.array([f.visual for f in frames]).reshape(-1, VISUAL_DIM),
        meta={"noise": noise.as_dict()},
    )


# -- shipped task variants ---------------------------------------------------

_WIDE = 0.05


def default_tasks() -> list[TaskConfig]:
    """Eight variants spanning clearance, surface height, hole offset, friction and mount size."""
    def task(tid, off, half, surf, depth, mu, bounds, pfall):
        x0, x1, y0, y1 = bounds
        return TaskConfig(tid, (off[0], off[1], surf), half, surf, (x0, x1, y0, y1), depth, mu, pfall)

    w = _WIDE
    return [
        task("peg-round-16", (0.0005, -0.0005), (0.002, 0.002), 0.002, 0.020, 0.30, (-w, w, -w, w), 0.0),
        task("peg-round-12", (-0.0010, 0.0008), (0.0015, 0.0015), -0.003, 0.018, 0.35, (-w, w, -w, w), 0.0),
        task("peg-rect-12x8", (0.0012, 0.0010), (0.0015, 0.0010), 0.004, 0.015, 0.40, (-0.0045, w, -w, w), 0.02),
        task("peg-rect-8x7", (-0.0008, -0.0012), (0.0010, 0.0010), -0.005, 0.015, 0.40, (-w, 0.0045, -w, w), 0.012),
        task("waterproof", (0.0010, -0.0015), (0.0012, 0.0010), 0.001, 0.012, 0.50, (-w, w, -0.0045, w), 0.012),
        task("dsub", (0.0015, 0.0012), (0.0006, 0.0005), -0.002, 0.010, 0.50, (-0.0035, w, -w, w), 0.12),
        task("usb", (-0.0012, 0.0015), (0.0005, 0.0006), 0.005, 0.010, 0.55, (-w, w, -w, 0.0035), 0.003),
        task("rj45", (0.0010, -0.0010), (0.0007, 0.0007), -0.004, 0.012, 0.45, (-w, 0.0035, -w, w), 0.005),
    ]


HARD_TASKS = ("dsub", "usb", "rj45")


def task_by_id(task_id: str) -> TaskConfig:
    for t in default_tasks():
        if t.task_id == task_id:
            return t
    raise KeyError(f"unknown task {task_id!r}")
