"""Deterministic kinematic grasp-transfer-release simulator.

World model: a table plane at z=0, one object, and a downward-facing hand
whose palm stays parallel to the table. The five fingertips sit on rays
around the palm center and move radially inward as their joints close;
contact happens when a fingertip ring overlaps the object footprint at
object height, and contact force is a saturating function of penetration.
An object is held once opposing fingers apply enough total force; it slips
if the total grip falls below a mass-proportional threshold while airborne.

The wrist view is a flat-shaded top-down raster. Apparent sizes follow a
pinhole-style 1/(depth) zoom, so table texture scale encodes hand height;
without that cue release timing would be unobservable to the policy.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import Episode, Frame, Phase

TICK_RATE = 30.0
DT = 1.0 / TICK_RATE
RENDER_H, RENDER_W = 240, 320

N_FINGERS = 5
CELLS_PER_FINGER = 6
FINGER_ANGLES_DEG = np.array([60.0, 85.0, 110.0, 135.0])  # index..pinky; thumb is separate
R_OPEN, R_CLOSED = 0.065, 0.006      # fingertip ring radius at closure 0 / 1 (m)
TIP_R = 0.008                        # fingertip pad radius (m)
FINGER_DROP = 0.03                   # tips reach this far below the palm (m)
F_MAX = 8.0                          # per-finger force ceiling (N)
PEN_SCALE = 0.008                    # penetration scale of the force law (m)
MAX_SLEW = 4.0                       # joint slew limit (deg/tick)
ARM_VMAX = 0.5                       # arm speed clamp (m/s)
PUSH_GAIN = 0.04                     # table-slide response to unbalanced poking
JOINT_LO, JOINT_HI = 0.0, 100.0
CELL_PROFILE = np.array([0.30, 0.24, 0.18, 0.12, 0.09, 0.07])


class SimulationFault(RuntimeError):
    """Non-finite command or corrupted state."""


@dataclass(frozen=True)
class ObjectSpec:
    name: str
    shape: str                       # cylinder | sphere | box
    size: float                      # characteristic radius (m)
    mass: float                      # grams
    color: tuple[int, int, int]
    split: str = "train"

    @property
    def slip_threshold(self) -> float:
        """Minimum total grip force (N) to hold; proportional to mass."""
        return 0.02 * self.mass

    @property
    def height(self) -> float:
        return {"sphere": 2.0, "cylinder": 1.6, "box": 1.4}[self.shape] * self.size


@dataclass
class SimState:
    spec: ObjectSpec
    seed: int
    tick: int
    hand: np.ndarray                 # (3,) palm center x, y, z
    q: np.ndarray                    # (6,) joint angles, deg
    targets: np.ndarray              # (6,) joint targets, deg
    f: np.ndarray                    # (30,) true contact forces per FSR cell, N
    obj_pos: np.ndarray              # (3,) object base x, y, z
    grasped: bool
    grasp_offset: np.ndarray | None  # object base relative to palm while held
    phase: int
    dropped: bool                    # a slip-while-airborne happened this episode
    moving_holder: bool = False
    baseline: np.ndarray = field(default=None, repr=False)   # FSR bias, obs only
    noise: np.ndarray = field(default=None, repr=False)      # static render noise


@dataclass
class Observation:
    image: np.ndarray                # (240, 320, 3) uint8
    q: np.ndarray                    # (6,) deg
    f: np.ndarray                    # (30,) N, sensor-biased


# ---------------------------------------------------------------------------
# scenario catalog

def _hsv_to_rgb(h: float, s: float, v: float) -> tuple[int, int, int]:
    i = int(h * 6.0) % 6
    fr = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * fr), v * (1 - s * (1 - fr))
    r, g, b = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return int(r * 255), int(g * 255), int(b * 255)


def default_catalog() -> list[ObjectSpec]:
    """7 training + 18 test objects; radius tracks mass so grip depth is
    inferable from appearance (density band, seeded per-object jitter)."""
    train_masses = [2, 30, 60, 95, 135, 180, 233]
    test_masses = [14, 25, 40, 55, 70, 90, 110, 130, 155, 180,
                   205, 230, 260, 290, 320, 355, 395, 435]
    shapes = ["cylinder", "sphere", "box"]
    rng = np.random.default_rng(20240601)
    specs = []
    for split, masses in (("train", train_masses), ("test", test_masses)):
        for j, mass in enumerate(masses):
            i = len(specs)
            jitter = rng.uniform(-0.10, 0.10)
            radius = np.clip((0.8 + 0.52 * mass ** (1 / 3)) * (1 + jitter), 1.2, 4.8) / 100.0
            color = _hsv_to_rgb((i * 0.381966) % 1.0, 0.72, 0.88)
            specs.append(ObjectSpec(
                name=f"{split}_{j:02d}_{shapes[i % 3]}",
                shape=shapes[i % 3],
                size=round(float(radius), 4),
                mass=float(mass),
                color=color,
                split=split,
            ))
    return specs


def write_catalog(path, specs: list[ObjectSpec]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("# name shape size_m mass_g r g b split\n")
        for s in specs:
            fh.write(f"{s.name} {s.shape} {s.size} {s.mass} "
                     f"{s.color[0]} {s.color[1]} {s.color[2]} {s.split}\n")


def read_catalog(path) -> list[ObjectSpec]:
    specs = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
        name, shape, size, mass, r, g, b, split = parts
        specs.append(ObjectSpec(name, shape, float(size), float(mass),
                                (int(r), int(g), int(b)), split))
    return specs


# ---------------------------------------------------------------------------
# kinematics and contact

def _tip_positions(hand_xy: np.ndarray, q: np.ndarray) -> np.ndarray:
    """(5, 2) fingertip planar positions for the current closure."""
    closure = np.clip(q[:5], JOINT_LO, JOINT_HI) / JOINT_HI
    radius = R_OPEN + (R_CLOSED - R_OPEN) * closure
    thumb_angle = 270.0 + 0.5 * np.clip(q[5], JOINT_LO, JOINT_HI)
    angles = np.deg2rad(np.concatenate([FINGER_ANGLES_DEG, [thumb_angle]]))
    return hand_xy + radius[:, None] * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def _contact(state: SimState) -> tuple[np.ndarray, np.ndarray]:
    """Per-finger force (5,) and per-finger penetration direction (5, 2)."""
    spec = state.spec
    tips = _tip_positions(state.hand[:2], state.q)
    tip_z = max(state.hand[2] - FINGER_DROP, 0.0)
    obj_base, obj_top = state.obj_pos[2], state.obj_pos[2] + spec.height
    forces = np.zeros(N_FINGERS)
    dirs = np.zeros((N_FINGERS, 2))
    if not (obj_base - 0.002 <= tip_z <= obj_top - 0.001):
        return forces, dirs
    rel = tips - state.obj_pos[:2]
    if spec.shape == "box":
        dist = np.abs(rel).max(axis=1)
    else:
        dist = np.hypot(rel[:, 0], rel[:, 1])
    pen = (spec.size + TIP_R) - dist
    hit = pen > 0
    forces[hit] = F_MAX * (1.0 - np.exp(-pen[hit] / PEN_SCALE))
    norm = np.maximum(dist[:, None], 1e-9)
    dirs[hit] = (-rel / norm)[hit] * pen[hit, None]   # poke direction into the object
    return forces, dirs


def _cells_from_fingers(per_finger: np.ndarray) -> np.ndarray:
    return (per_finger[:, None] * CELL_PROFILE[None, :]).reshape(30)


# ---------------------------------------------------------------------------
# reset / step

def reset(spec: ObjectSpec, seed: int, moving_holder: bool = False) -> SimState:
    """Open hand at its home pose, object on the table within reach."""
    rng = np.random.default_rng(seed)
    obj_xy = rng.uniform(-0.03, 0.03, 2)
    home = np.array([-0.16 + rng.uniform(-0.02, 0.02),
                     rng.uniform(-0.03, 0.03),
                     0.14 + rng.uniform(-0.01, 0.01)])
    baseline = rng.uniform(0.05, 0.25, 30)
    noise = rng.integers(-3, 4, (RENDER_H, RENDER_W, 3)).astype(np.int16)
    return SimState(
        spec=spec, seed=seed, tick=0,
        hand=home, q=np.zeros(6), targets=np.zeros(6), f=np.zeros(30),
        obj_pos=np.array([obj_xy[0], obj_xy[1], 0.0]),
        grasped=False, grasp_offset=None, phase=int(Phase.Rest), dropped=False,
        moving_holder=moving_holder, baseline=baseline, noise=noise,
    )


def observe(state: SimState) -> Observation:
    return Observation(image=render(state), q=state.q.copy(),
                       f=state.f + state.baseline)


def step(state: SimState, finger_command: np.ndarray,
         arm_command: np.ndarray) -> tuple[SimState, Observation]:
    """Advance one 30 Hz tick; commands are joint targets (deg) and arm
    velocities (m/s)."""
    fc = np.asarray(finger_command, dtype=np.float64)
    ac = np.asarray(arm_command, dtype=np.float64)
    if not (np.isfinite(fc).all() and np.isfinite(ac).all()):
        raise SimulationFault(f"non-finite command at tick {state.tick}")

    targets = np.clip(fc, JOINT_LO, JOINT_HI)
    q = state.q + np.clip(targets - state.q, -MAX_SLEW, MAX_SLEW)
    vel = np.clip(ac, -ARM_VMAX, ARM_VMAX)
    hand = state.hand + vel * DT
    hand[2] = np.clip(hand[2], 0.02, 0.30)

    new = dataclasses.replace(state, tick=state.tick + 1, hand=hand, q=q,
                              targets=targets, obj_pos=state.obj_pos.copy(),
                              f=state.f)
    if new.moving_holder and not new.grasped and new.obj_pos[2] <= 0.0:
        t = new.tick * DT
        new.obj_pos[0] += 0.0004 * np.sin(0.7 * t)
        new.obj_pos[1] += 0.0004 * np.cos(0.9 * t)

    if new.grasped:
        pos = new.hand + new.grasp_offset
        pos[2] = max(pos[2], 0.0)
        new.obj_pos = pos

    per_finger, dirs = _contact(new)
    total = float(per_finger.sum())
    opposing = per_finger[4] > 0.05 and per_finger[:4].max(initial=0.0) > 0.05
    slip = new.spec.slip_threshold

    if new.grasped:
        airborne = new.obj_pos[2] > 0.002
        if total < slip or not opposing:   # grip needs opposing contacts
            new.grasped = False
            new.grasp_offset = None
            if airborne:
                new.obj_pos = new.obj_pos.copy()
                new.obj_pos[2] = 0.0
                new.dropped = True
    else:
        on_table = new.obj_pos[2] <= 0.002
        if on_table and opposing and total >= slip:
            new.grasped = True
            new.grasp_offset = new.obj_pos - new.hand
        elif on_table and per_finger.max(initial=0.0) > 0:
            # only fingers still closing shove the object; retracting pads
            # slide off without transferring momentum
            closing = (q[:5] > state.q[:5] + 1e-9)[:, None]
            push = PUSH_GAIN * (dirs * closing).sum(axis=0)
            mag = float(np.hypot(*push))
            if mag > 0.0015:
                push *= 0.0015 / mag
            new.obj_pos = new.obj_pos.copy()
            new.obj_pos[:2] -= push

    new.f = _cells_from_fingers(per_finger)
    return new, observe(new)


# ---------------------------------------------------------------------------
# rendering

_COLS = np.arange(RENDER_W, dtype=np.float64) - (RENDER_W - 1) / 2.0
_ROWS = np.arange(RENDER_H, dtype=np.float64) - (RENDER_H - 1) / 2.0


def _px_per_m(depth: float) -> float:
    """Pinhole-style zoom: apparent scale of geometry `depth` below the palm."""
    return (RENDER_H / 2.0) / (0.05 + 0.9 * max(depth, 0.01))


def _paint_disc(img, cx, cy, radius, color, rim_shade=0.75):
    x0, x1 = int(max(0, cx - radius - 1)), int(min(RENDER_W, cx + radius + 2))
    y0, y1 = int(max(0, cy - radius - 1)), int(min(RENDER_H, cy + radius + 2))
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    d2 = (xx - cx) ** 2 + (yy - cy) ** 2
    mask = d2 <= radius * radius
    shade = rim_shade + (1.0 - rim_shade) * np.sqrt(np.maximum(1.0 - d2 / max(radius * radius, 1.0), 0.0))
    for c in range(3):
        img[y0:y1, x0:x1, c][mask] = (color[c] * shade[mask]).astype(np.uint8)


def _paint_square(img, cx, cy, half, color):
    x0, x1 = int(max(0, cx - half)), int(min(RENDER_W, cx + half + 1))
    y0, y1 = int(max(0, cy - half)), int(min(RENDER_H, cy + half + 1))
    if x0 >= x1 or y0 >= y1:
        return
    img[y0:y1, x0:x1] = color
    b = max(1, int(half * 0.12))
    inner = img[y0 + b:y1 - b, x0 + b:x1 - b]
    if inner.size:
        img[y0:y1, x0:x1] = (np.array(color) * 0.8).astype(np.uint8)
        inner[:] = color


def render(state: SimState) -> np.ndarray:
    """Flat-shaded top-down wrist view, deterministic for a given state."""
    img = np.empty((RENDER_H, RENDER_W, 3), dtype=np.uint8)

    # table plane, world-space hash texture (zoom encodes palm height)
    s = 1.0 / _px_per_m(state.hand[2])
    wx = state.hand[0] + _COLS[None, :] * s
    wy = state.hand[1] - _ROWS[:, None] * s
    cx = np.floor(wx / 0.025).astype(np.int64)
    cy = np.floor(wy / 0.025).astype(np.int64)
    h = (cx * 73856093) ^ (cy * 19349663)
    v = ((h >> 8) & 0x3F).astype(np.uint8)
    img[..., 0] = 72 + (v >> 1)
    img[..., 1] = 64 + (v >> 1)
    img[..., 2] = 54 + (v >> 2)

    # object, scaled by its own depth below the palm
    spec = state.spec
    obj_mid = state.obj_pos[2] + 0.5 * spec.height
    depth = state.hand[2] - obj_mid
    if depth > 0.005:
        ppm = _px_per_m(depth)
        ox = (state.obj_pos[0] - state.hand[0]) * ppm + (RENDER_W - 1) / 2.0
        oy = -(state.obj_pos[1] - state.hand[1]) * ppm + (RENDER_H - 1) / 2.0
        r_px = spec.size * ppm
        if spec.shape == "sphere":
            _paint_disc(img, ox, oy, r_px, spec.color, rim_shade=0.55)
        elif spec.shape == "cylinder":
            _paint_disc(img, ox, oy, r_px, spec.color, rim_shade=0.85)
        else:
            _paint_square(img, ox, oy, r_px, spec.color)

    # fingertips ride at fixed depth under the palm
    ppm_f = _px_per_m(FINGER_DROP)
    tips = _tip_positions(state.hand[:2], state.q)
    for tx, ty in tips:
        px = (tx - state.hand[0]) * ppm_f + (RENDER_W - 1) / 2.0
        py = -(ty - state.hand[1]) * ppm_f + (RENDER_H - 1) / 2.0
        _paint_disc(img, px, py, TIP_R * ppm_f, (46, 50, 60), rim_shade=0.8)

    out = img.astype(np.int16) + state.noise
    return np.clip(out, 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# eight-phase trial script (shared by the expert and policy evaluation)

PHASE_SEQ = [Phase.Rest, Phase.Reaching, Phase.Grasping, Phase.Lifting,
             Phase.Holding, Phase.Lowering, Phase.Releasing, Phase.Retrieving]


@dataclass
class TrialScript:
    durations: dict[Phase, int]
    home: np.ndarray
    land: np.ndarray                 # (2,) planar landing point
    grasp_z: float
    lift_z: float

    @property
    def total_ticks(self) -> int:
        return sum(self.durations.values())

    def phase_at(self, tick: int) -> tuple[Phase, float]:
        """(phase, fraction through it) for an absolute tick index."""
        t = tick
        for ph in PHASE_SEQ:
            d = self.durations[ph]
            if t < d:
                return ph, (t + 1) / d
            t -= d
        return Phase.Retrieving, 1.0

    def arm_target(self, phase: Phase, frac: float) -> np.ndarray:
        e = 0.5 * (1.0 - np.cos(np.pi * np.clip(frac, 0.0, 1.0)))
        grasp_pose = np.array([self.land[0], self.land[1], self.grasp_z])
        if phase == Phase.Rest:
            return self.home
        if phase == Phase.Reaching:
            return self.home + (grasp_pose - self.home) * e
        if phase == Phase.Grasping:
            return grasp_pose
        if phase == Phase.Lifting:
            out = grasp_pose.copy()
            out[2] = self.grasp_z + (self.lift_z - self.grasp_z) * e
            return out
        if phase == Phase.Holding:
            out = grasp_pose.copy()
            out[2] = self.lift_z
            return out
        if phase == Phase.Lowering:
            out = grasp_pose.copy()
            out[2] = self.lift_z + (self.grasp_z - self.lift_z) * e
            return out
        if phase == Phase.Releasing:
            return grasp_pose
        return grasp_pose + (self.home - grasp_pose) * e   # Retrieving


def make_script(spec: ObjectSpec, state: SimState, rng: np.random.Generator) -> TrialScript:
    def jit(base, spread):
        return max(4, int(round(base + rng.uniform(-spread, spread))))

    durations = {
        Phase.Rest: 60,                      # exactly two seconds at 30 Hz
        Phase.Reaching: jit(48, 5),
        Phase.Grasping: jit(42, 4),
        Phase.Lifting: jit(30, 3),
        Phase.Holding: jit(60, 6),
        Phase.Lowering: jit(30, 3),
        Phase.Releasing: jit(24, 2),
        Phase.Retrieving: jit(48, 5),
    }
    land = state.obj_pos[:2] + rng.uniform(-0.004, 0.004, 2)
    return TrialScript(
        durations=durations,
        home=state.hand.copy(),
        land=land,
        grasp_z=FINGER_DROP + 0.45 * spec.height,
        lift_z=0.16 + rng.uniform(0.0, 0.01),
    )


class ExpertController:
    """Scripted demonstrator: closes until the grip comfortably exceeds the
    slip threshold (heavier objects get deeper closure), opens on release."""

    CLOSE_STEP = 3.5
    OPEN_STEP = 4.0

    def __init__(self, spec: ObjectSpec):
        self.spec = spec
        self.hold_force = max(0.8, 2.2 * spec.slip_threshold)
        self.rot_target = float(np.clip(10.0 + 500.0 * spec.size, 10.0, 40.0))
        self.closure = 0.0
        self.reached_hold = False

    def command(self, phase: Phase, state: SimState, obs: Observation) -> np.ndarray:
        cmd = np.zeros(6)
        if phase in (Phase.Rest, Phase.Reaching, Phase.Retrieving):
            self.closure = 0.0
            self.reached_hold = False
            return cmd
        if phase == Phase.Grasping:
            # keep closing until the grasp has actually latched (opposition
            # included) with a comfortable force margin over the slip level
            if not self.reached_hold and state.grasped and float(state.f.sum()) >= self.hold_force:
                self.reached_hold = True
            if not self.reached_hold:
                self.closure = min(self.closure + self.CLOSE_STEP, JOINT_HI)
        elif phase == Phase.Releasing:
            self.closure = max(self.closure - self.OPEN_STEP, 0.0)
        cmd[:5] = self.closure
        cmd[5] = self.rot_target if phase != Phase.Releasing or self.closure > 0 else 0.0
        return cmd


@dataclass
class TrialOutcome:
    object_name: str
    trial: int
    seed: int
    r_g: bool
    l_h_l: bool
    r_r: bool

    @property
    def full_success(self) -> bool:
        return self.r_g and self.l_h_l and self.r_r


def run_trial(spec: ObjectSpec, seed: int, controller,
              on_frame=None) -> tuple[Episode, TrialOutcome]:
    """Drive one eight-phase trial: arm follows the script, fingers follow
    `controller.command`. Returns the recorded episode and its outcome."""
    state = reset(spec, seed)
    script = make_script(spec, state, np.random.default_rng(seed + 0x5EED))
    episode = Episode(object_name=spec.name, seed=seed)
    obs = observe(state)

    rose = False
    drop_after_rise = False
    lowered_held = False
    release_spot = None
    prev_phase = Phase.Rest

    for tick in range(script.total_ticks):
        phase, frac = script.phase_at(tick)
        state.phase = int(phase)
        target = script.arm_target(phase, frac)
        arm_vel = (target - state.hand) * TICK_RATE
        cmd = controller.command(phase, state, obs)
        episode.frames.append(Frame(tick, obs.image, obs.q.astype(np.float32),
                                    obs.f.astype(np.float32), np.asarray(cmd, dtype=np.float32)))
        episode.phases.append(int(phase))
        if on_frame is not None:
            on_frame(tick, phase, state, obs, cmd)
        state, obs = step(state, cmd, arm_vel)

        if phase == Phase.Lifting and state.obj_pos[2] > 0.02:
            rose = True
        if rose and state.dropped:
            drop_after_rise = True
        if phase == Phase.Lowering and prev_phase == Phase.Lowering and frac >= 1.0 - 1e-9:
            lowered_held = state.grasped and state.obj_pos[2] <= 0.005 and not drop_after_rise
        if phase == Phase.Releasing and release_spot is None:
            release_spot = state.obj_pos[:2].copy()
        prev_phase = phase

    settled = (not state.grasped and state.obj_pos[2] <= 1e-9
               and float(state.f.sum()) == 0.0)
    displaced = (release_spot is not None
                 and float(np.hypot(*(state.obj_pos[:2] - release_spot))) > 0.05)
    r_g = rose
    l_h_l = r_g and lowered_held
    r_r = l_h_l and settled and not displaced
    outcome = TrialOutcome(spec.name, 0, seed, r_g, l_h_l, r_r)
    return episode, outcome


def run_expert(spec: ObjectSpec, seed: int) -> tuple[Episode, TrialOutcome]:
    """Scripted demonstration; failed scripts are flagged for exclusion."""
    return run_trial(spec, seed, ExpertController(spec))


# ---------------------------------------------------------------------------
# success-rate metrics

def score(outcomes: list[TrialOutcome]) -> dict[str, float | None]:
    """The four success criteria with their conditional denominators.

    A zero denominator yields None (reported as undefined, never 0).
    """
    n = len(outcomes)
    n_rg = sum(1 for o in outcomes if o.r_g)
    n_lhl = sum(1 for o in outcomes if o.l_h_l)
    n_rr = sum(1 for o in outcomes if o.r_r)
    n_full = sum(1 for o in outcomes if o.full_success)
    return {
        "sr_r_g": (n_rg / n) if n else None,
        "sr_l_h_l": (n_lhl / n_rg) if n_rg else None,
        "sr_r_r": (n_rr / n_lhl) if n_lhl else None,
        "sr_trial": (n_full / n) if n else None,
    }
