"""Reference motions: the ``motion/v1`` file format, time lookup and generators.

A motion stores, per control-rate frame, the generalized coordinates and
velocities of the character together with the derived per-link states
(position, orientation, linear and angular velocity).  Keeping the generalized
state lets demonstration replay restore the simulator exactly.

File layout (JSON lines):

    line 1   header {"format": "motion/v1", "character", "links", "fps", "cyclic", "cycle_offset", "n_frames", ...}
    line k+2 frame  {"frame": k, "time", "qpos", "qvel", "links": [{"p", "q", "pdot", "qdot"}, ...], "action"?}

Cyclic motions repeat every ``T_cycle = (n_frames - 1) / fps`` seconds; the
last frame equals the first shifted by ``cycle_offset`` (world translation per
cycle).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import mathcore
from .sim import CONTROL_DT, CharacterSpec, SimState, load_character
from .sim.dynamics import kinematic_features, link_states, simulate

FORMAT = "motion/v1"
POS_TOL = 1e-2  # cyclic boundary tolerance, metres
ANG_TOL = 0.05  # radians
NORM_TOL = 1e-2  # accepted deviation of stored quaternion norms
LINK_TOL = 1e-6  # stored link states vs forward kinematics


class MotionError(ValueError):
    """Invalid motion file or parameters."""


@dataclass(frozen=True)
class ReferenceMotion:
    character: str
    link_names: tuple
    fps: float
    qpos: np.ndarray  # (N, nq)
    qvel: np.ndarray  # (N, nv)
    links: np.ndarray  # (N, L, 13): p, q, pdot, qdot
    cyclic: bool = False
    cycle_offset: np.ndarray = np.zeros(3)
    actions: np.ndarray | None = None  # (N, n_act) targets held from frame k to k + 1
    meta: dict | None = None

    @property
    def n_frames(self) -> int:
        return len(self.qpos)

    @property
    def cycle_time(self) -> float:
        return (self.n_frames - 1) / self.fps

    @property
    def duration(self) -> float:
        return math.inf if self.cyclic else self.cycle_time


# ------------------------------------------------------------------ helpers


def _translation_slots(spec: CharacterSpec):
    """(qpos index, world axis) pairs of the root translation coordinates."""
    if spec.root == "free":
        return [(0, 0), (1, 1), (2, 2)]
    if spec.root == "planar":
        return [(0, 0), (1, 2)]
    return []


def _shift_qpos(spec: CharacterSpec, qpos, offset, k):
    if k == 0:
        return qpos
    qpos = np.array(qpos, dtype=float)
    for i, ax in _translation_slots(spec):
        qpos[..., i] += k * offset[ax]
    return qpos


def _angle_slots(spec: CharacterSpec):
    """qpos indices that are angles (planar pitch and every joint coordinate)."""
    idx = list(range(spec.n_root_q, spec.nq))
    if spec.root == "planar":
        idx.insert(0, 2)
    return idx


def _link_block(spec: CharacterSpec, qpos, qvel) -> np.ndarray:
    ls = link_states(spec, qpos, qvel)
    return np.concatenate([ls.pos, ls.quat, ls.vel, ls.angvel], axis=-1)


def _canonical_qpos(spec: CharacterSpec, qpos):
    qpos = np.array(qpos, dtype=float)
    if spec.root == "free":
        qpos[..., 3:7] = mathcore.quat_normalize(qpos[..., 3:7])
    return qpos


def make_motion(spec: CharacterSpec, qpos, qvel, fps: float = 30.0, cyclic=False, cycle_offset=None, actions=None, meta=None):
    """Build a validated motion from generalized trajectories (N, nq) and (N, nv)."""
    qpos = _canonical_qpos(spec, np.asarray(qpos, float))
    qvel = np.array(qvel, dtype=float)
    motion = ReferenceMotion(
        character=spec.name,
        link_names=tuple(l.name for l in spec.links),
        fps=float(fps),
        qpos=qpos,
        qvel=qvel,
        links=_link_block(spec, qpos, qvel),
        cyclic=bool(cyclic),
        cycle_offset=np.zeros(3) if cycle_offset is None else np.array(cycle_offset, dtype=float),
        actions=None if actions is None else np.array(actions, dtype=float),
        meta=dict(meta or {}),
    )
    validate_motion(motion, spec)
    return motion


def validate_motion(motion: ReferenceMotion, spec: CharacterSpec) -> None:
    if motion.link_names != tuple(l.name for l in spec.links):
        raise MotionError(f"link names {list(motion.link_names)} do not match character {spec.name!r}")
    n = motion.n_frames
    if n < 2:
        raise MotionError("a motion needs at least 2 frames")
    if not (motion.fps > 0 and math.isfinite(motion.fps)):
        raise MotionError(f"fps must be positive, got {motion.fps}")
    if motion.qpos.shape != (n, spec.nq) or motion.qvel.shape != (n, spec.nv):
        raise MotionError(f"expected qpos ({n}, {spec.nq}) and qvel ({n}, {spec.nv})")
    if motion.actions is not None and motion.actions.shape != (n, spec.n_act):
        raise MotionError(f"expected actions ({n}, {spec.n_act})")
    for k in range(n):
        row = [motion.qpos[k], motion.qvel[k], motion.links[k]]
        if motion.actions is not None:
            row.append(motion.actions[k])
        if not all(np.all(np.isfinite(r)) for r in row):
            raise MotionError(f"frame {k}: non-finite value")
    if spec.root == "fixed" and np.any(motion.cycle_offset != 0):
        raise MotionError("a fixed-base character cannot declare a cycle offset")
    derived = _link_block(spec, motion.qpos, motion.qvel)
    for k in range(n):
        d = np.abs(derived[k] - motion.links[k])
        if np.max(d) > LINK_TOL:
            raise MotionError(f"frame {k}: link states disagree with the generalized coordinates by {np.max(d):.3g}")
    if motion.cyclic:
        first = _shift_qpos(spec, motion.qpos[0], motion.cycle_offset, 1)
        last = motion.qpos[-1]
        ang = _angle_slots(spec)
        lin = [i for i, _ in _translation_slots(spec)]
        if lin and np.max(np.abs(first[lin] - last[lin])) > POS_TOL:
            raise MotionError(f"frame {n - 1}: cyclic boundary position mismatch exceeds {POS_TOL} m")
        if ang and np.max(np.abs(first[ang] - last[ang])) > ANG_TOL:
            raise MotionError(f"frame {n - 1}: cyclic boundary joint mismatch exceeds {ANG_TOL} rad")
        if spec.root == "free" and mathcore.quat_geodesic_angle(first[3:7], last[3:7]) > ANG_TOL:
            raise MotionError(f"frame {n - 1}: cyclic boundary orientation mismatch exceeds {ANG_TOL} rad")


# ------------------------------------------------------------------ file io


def _floats(a) -> list:
    return [float(x) for x in np.ravel(a)]


def save_motion(motion: ReferenceMotion, path) -> None:
    header = {
        "format": FORMAT,
        "character": motion.character,
        "links": list(motion.link_names),
        "fps": motion.fps,
        "cyclic": motion.cyclic,
        "cycle_offset": _floats(motion.cycle_offset),
        "n_frames": motion.n_frames,
        "has_actions": motion.actions is not None,
        "meta": motion.meta or {},
    }
    lines = [json.dumps(header)]
    for k in range(motion.n_frames):
        rec = {
            "frame": k,
            "time": k / motion.fps,
            "qpos": _floats(motion.qpos[k]),
            "qvel": _floats(motion.qvel[k]),
            "links": [
                {"p": _floats(r[0:3]), "q": _floats(r[3:7]), "pdot": _floats(r[7:10]), "qdot": _floats(r[10:13])}
                for r in motion.links[k]
            ],
        }
        if motion.actions is not None:
            rec["action"] = _floats(motion.actions[k])
        lines.append(json.dumps(rec))
    Path(path).write_text("\n".join(lines) + "\n")


def load_motion(path, spec: CharacterSpec | None = None) -> ReferenceMotion:
    """Parse and validate a ``motion/v1`` file; quaternions are renormalized to the canonical sign."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"motion file not found: {path}")
    lines = [l for l in path.read_text().splitlines() if l.strip()]
    if not lines:
        raise MotionError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise MotionError(f"{path}: bad header: {e}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise MotionError(f"{path}: expected format {FORMAT!r}")
    if spec is None:
        spec = load_character(header["character"])
    names = [l.name for l in spec.links]
    if list(header.get("links", [])) != names:
        raise MotionError(f"{path}: link header {header.get('links')} does not match character {spec.name!r} {names}")
    fps = float(header.get("fps", 30.0))
    frames = lines[1:]
    if int(header.get("n_frames", len(frames))) != len(frames):
        raise MotionError(f"{path}: header declares {header.get('n_frames')} frames, file has {len(frames)}")
    qpos, qvel, blocks, acts = [], [], [], []
    has_actions = bool(header.get("has_actions", False))
    prev_time = -math.inf
    for k, line in enumerate(frames):
        try:
            rec = json.loads(line)
            if rec.get("frame") != k:
                raise MotionError(f"frame {k}: frame index {rec.get('frame')} out of order")
            t = float(rec.get("time", k / fps))
            if not t > prev_time:
                raise MotionError(f"frame {k}: time {t} is not increasing")
            prev_time = t
            q = np.array(rec["qpos"], dtype=float)
            v = np.array(rec["qvel"], dtype=float)
            if q.shape != (spec.nq,) or v.shape != (spec.nv,):
                raise MotionError(f"frame {k}: qpos/qvel lengths {q.shape}/{v.shape}, expected {spec.nq}/{spec.nv}")
            if len(rec["links"]) != spec.n_links:
                raise MotionError(f"frame {k}: {len(rec['links'])} link records, expected {spec.n_links}")
            rows = []
            for r in rec["links"]:
                p, quat, pd, wd = (np.array(r[key], dtype=float) for key in ("p", "q", "pdot", "qdot"))
                if p.shape != (3,) or quat.shape != (4,) or pd.shape != (3,) or wd.shape != (3,):
                    raise MotionError(f"frame {k}: malformed link record")
                rows.append(np.concatenate([p, quat, pd, wd]))
            block = np.array(rows)
            if not (np.all(np.isfinite(q)) and np.all(np.isfinite(v)) and np.all(np.isfinite(block))):
                raise MotionError(f"frame {k}: non-finite value")
            norms = np.linalg.norm(block[:, 3:7], axis=-1)
            if np.any(np.abs(norms - 1.0) > NORM_TOL):
                raise MotionError(f"frame {k}: link quaternion norm {norms.min():.4g} outside tolerance")
            block[:, 3:7] = mathcore.quat_normalize(block[:, 3:7])
            if spec.root == "free":
                n = np.linalg.norm(q[3:7])
                if abs(n - 1.0) > NORM_TOL:
                    raise MotionError(f"frame {k}: root quaternion norm {n:.4g} outside tolerance")
                q[3:7] = mathcore.quat_normalize(q[3:7])
            if has_actions:
                a = np.array(rec["action"], dtype=float)
                if a.shape != (spec.n_act,) or not np.all(np.isfinite(a)):
                    raise MotionError(f"frame {k}: bad action record")
                acts.append(a)
        except (KeyError, TypeError, json.JSONDecodeError) as e:
            raise MotionError(f"{path}: frame {k}: {e}") from None
        qpos.append(q)
        qvel.append(v)
        blocks.append(block)
    motion = ReferenceMotion(
        character=str(header["character"]),
        link_names=tuple(names),
        fps=fps,
        qpos=np.array(qpos),
        qvel=np.array(qvel),
        links=np.array(blocks),
        cyclic=bool(header.get("cyclic", False)),
        cycle_offset=np.array(header.get("cycle_offset", [0.0, 0.0, 0.0]), dtype=float),
        actions=np.array(acts) if has_actions else None,
        meta=dict(header.get("meta", {})),
    )
    try:
        validate_motion(motion, spec)
    except MotionError as e:
        raise MotionError(f"{path}: {e}") from None
    return motion


# ------------------------------------------------------------------- lookup


def _locate(motion: ReferenceMotion, t: float):
    """(cycle count, frame index, interpolation weight) of time ``t``."""
    if not t >= 0:
        raise ValueError(f"reference time must be >= 0, got {t}")
    pos = t * motion.fps
    near = round(pos)
    if abs(pos - near) < 1e-9:
        pos = float(near)
    seg = motion.n_frames - 1
    if motion.cyclic:
        k = int(pos // seg)
        pos -= k * seg
    else:
        if pos > seg:
            raise ValueError(f"t = {t} s is beyond the motion duration {motion.cycle_time} s")
        k = 0
    i = min(int(math.floor(pos)), seg)
    w = pos - i
    if i == seg:
        i, w = seg - 1, 1.0
    return k, i, w


def phase_at(motion: ReferenceMotion, t: float) -> float:
    T = motion.cycle_time
    if motion.cyclic:
        return (t % T) / T
    return min(t / T, 1.0)


def reference_at(motion: ReferenceMotion, t: float, spec: CharacterSpec | None = None) -> SimState:
    """Reference state at time ``t``; exact at frame times, interpolated between them."""
    spec = spec or load_character(motion.character)
    k, i, w = _locate(motion, t)
    if w == 0.0:
        qpos, qvel = motion.qpos[i].copy(), motion.qvel[i].copy()
    elif w == 1.0:
        qpos, qvel = motion.qpos[i + 1].copy(), motion.qvel[i + 1].copy()
    else:
        qpos = (1.0 - w) * motion.qpos[i] + w * motion.qpos[i + 1]
        qvel = (1.0 - w) * motion.qvel[i] + w * motion.qvel[i + 1]
        if spec.root == "free":
            qpos[3:7] = mathcore.quat_slerp(motion.qpos[i, 3:7], motion.qpos[i + 1, 3:7], w)
    qpos = _shift_qpos(spec, qpos, motion.cycle_offset, k)
    return SimState(qpos, qvel, phase_at(motion, t), motion.cycle_time)


@dataclass(frozen=True)
class ReferenceTable:
    """Reference states sampled at the control rate, ready for batched training."""

    x: np.ndarray  # (K, nx) packed generalized states
    kin: np.ndarray  # (K, L, 15) per-link kinematics
    phase: np.ndarray  # (K,)
    actions: np.ndarray | None  # (K, n_act) open-loop targets if the motion has them


def control_table(motion: ReferenceMotion, spec: CharacterSpec, n_steps: int, start: float = 0.0) -> ReferenceTable:
    """States at ``start + k / 30`` s for k = 0 .. n_steps."""
    xs, ph, acts = [], [], []
    for k in range(n_steps + 1):
        t = start + k * CONTROL_DT
        s = reference_at(motion, t, spec)
        xs.append(np.concatenate([s.qpos, s.qvel]))
        ph.append(s.phase)
        if motion.actions is not None:
            _, i, w = _locate(motion, t)
            acts.append(motion.actions[i + (1 if w == 1.0 else 0)])
    x = np.array(xs)
    kin = kinematic_features(spec, x[:, : spec.nq], x[:, spec.nq :])
    return ReferenceTable(x, kin, np.array(ph), np.array(acts) if acts else None)


def cycle_frames(motion: ReferenceMotion) -> int:
    """Number of distinct control-rate start frames (the cycle length, or all frames)."""
    n = int(round(motion.cycle_time / CONTROL_DT))
    return n if motion.cyclic else n + 1


# --------------------------------------------------------------- generators


def _per_joint(value, n, name):
    a = np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()
    if not np.all(np.isfinite(a)):
        raise MotionError(f"{name} must be finite")
    return a


def _schedule(spec: CharacterSpec, params: dict):
    n = spec.n_act
    center = params.get("center")
    center = spec.default_qpos()[spec.n_root_q :] if center is None else _per_joint(center, n, "center")
    amp = _per_joint(params.get("amplitude", 0.0), n, "amplitude")
    phase = _per_joint(params.get("phase", 0.0), n, "phase")
    period = float(params.get("period", 1.0))
    if not period > 0:
        raise MotionError("period must be positive")
    return center, amp, phase, period


def generate_spline_track(spec: CharacterSpec, params: dict, fps: float = 30.0) -> ReferenceMotion:
    """Sinusoidal joint tracks around ``center``; one cyclic period, analytic velocities.

    params: amplitude, period (s), phase (rad), center (rad); scalars broadcast over joints.
    The root (if any) stays at its rest coordinates.
    """
    center, amp, phase, period = _schedule(spec, params)
    lo, hi = center - np.abs(amp), center + np.abs(amp)
    bad = np.flatnonzero((lo < spec.limit_lo - 1e-12) | (hi > spec.limit_hi + 1e-12))
    if bad.size:
        j = int(bad[0])
        raise MotionError(
            f"joint {j}: track [{lo[j]:.3f}, {hi[j]:.3f}] exceeds limits [{spec.limit_lo[j]:.3f}, {spec.limit_hi[j]:.3f}]"
        )
    n = period * fps
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise MotionError(f"period {period} s must span a whole number of frames at {fps} Hz")
    t = np.arange(int(round(n)) + 1) / fps
    arg = 2.0 * np.pi * t[:, None] / period + phase
    q = center + amp * np.sin(arg)
    qd = amp * (2.0 * np.pi / period) * np.cos(arg)
    qpos = np.tile(spec.default_qpos(), (len(t), 1))
    qvel = np.zeros((len(t), spec.nv))
    qpos[:, spec.n_root_q :] = q
    qvel[:, spec.n_root_v :] = qd
    # close the cycle exactly: the last frame repeats the first
    qpos[-1], qvel[-1] = qpos[0], qvel[0]
    meta = {"generator": "spline-track", **{k: _jsonable(v) for k, v in params.items()}}
    return make_motion(spec, qpos, qvel, fps, cyclic=True, meta=meta)


def scripted_targets(spec: CharacterSpec, params: dict, t):
    center, amp, phase, period = _schedule(spec, params)
    t = np.asarray(t, float)
    return center + amp * np.sin(2.0 * np.pi * t[..., None] / period + phase)


def generate_oracle_pd(spec: CharacterSpec, params: dict, fps: float = 30.0) -> ReferenceMotion:
    """Record the simulator under a scripted sinusoidal PD schedule.

    params: amplitude, period, phase, center as for spline tracks, plus
    ``settle`` (s, rest targets before recording), ``warmup`` (s, scripted
    schedule before recording), ``duration`` (s) and ``cyclic``.  For a cyclic
    motion the duration defaults to one period and the recording must close
    within the cyclic boundary tolerance.
    """
    if abs(fps * CONTROL_DT - 1.0) > 1e-12:
        raise MotionError("oracle-pd motions are recorded at the control rate (30 Hz)")
    center, amp, phase, period = _schedule(spec, params)
    cyclic = bool(params.get("cyclic", False))
    duration = float(params.get("duration", period if cyclic else 2.0))
    settle = float(params.get("settle", 1.0))
    warmup = float(params.get("warmup", 0.0))
    n = duration * fps
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise MotionError(f"duration {duration} s must span a whole number of frames")
    n = int(round(n))
    qpos = spec.default_qpos()
    qvel = np.zeros(spec.nv)
    for _ in range(int(round(settle * fps))):
        qpos, qvel = simulate(spec, qpos, qvel, center)
    n_warm = int(round(warmup * fps))
    for k in range(n_warm):
        qpos, qvel = simulate(spec, qpos, qvel, scripted_targets(spec, params, k / fps))
    qs, vs, acts = [qpos], [qvel], []
    for k in range(n):
        a = scripted_targets(spec, params, (n_warm + k) / fps)
        acts.append(a)
        qpos, qvel = simulate(spec, qpos, qvel, a)
        qs.append(qpos)
        vs.append(qvel)
    acts.append(scripted_targets(spec, params, (n_warm + n) / fps))
    qs, vs = np.array(qs), np.array(vs)
    offset = None
    if cyclic and spec.root != "fixed":
        offset = np.zeros(3)
        for i, ax in _translation_slots(spec):
            if ax != 2:
                offset[ax] = qs[-1, i] - qs[0, i]
    meta = {"generator": "oracle-pd", **{k: _jsonable(v) for k, v in params.items()}}
    return make_motion(spec, qs, vs, fps, cyclic=cyclic, cycle_offset=offset, actions=np.array(acts), meta=meta)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


GENERATORS = {"spline-track": generate_spline_track, "oracle-pd": generate_oracle_pd}


def generate_reference(spec: CharacterSpec, kind: str, params: dict | None = None, fps: float = 30.0) -> ReferenceMotion:
    if kind not in GENERATORS:
        raise MotionError(f"unknown generator {kind!r}; choose from {sorted(GENERATORS)}")
    return GENERATORS[kind](spec, dict(params or {}), fps)


def with_actions(motion: ReferenceMotion, actions) -> ReferenceMotion:
    return replace(motion, actions=np.array(actions, dtype=float))
