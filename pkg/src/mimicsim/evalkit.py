"""Evaluation protocols: pose error with DTW, pose absurdity, samples to success,
push robustness and friction sensitivity."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from . import policy as pol
from .mimic_train import EvalRollout, TrainConfig, evaluate_rollout, train
from .reference import ReferenceMotion, control_table, cycle_frames
from .sim import CONTROL_DT, CharacterSpec
from .sim.dynamics import contact_points_world, link_states

ABSURDITY_FRACTIONS = (0.01, 0.05, 0.10)


# ------------------------------------------------------------------ pose error


def root_relative_positions(spec: CharacterSpec, qpos) -> np.ndarray:
    """Link COM positions (T, L, 3) relative to the root.

    The root is the root link for floating characters and the world anchor of
    the first joint for a fixed base (whose root link would otherwise always
    coincide with itself).
    """
    qpos = np.atleast_2d(np.asarray(qpos, float))
    pos = link_states(spec, qpos, np.zeros(qpos.shape[:-1] + (spec.nv,))).pos
    if spec.floating:
        return pos - pos[..., :1, :]
    return pos - np.asarray(spec.links[0].joint.offset, float)


def frame_errors(sim, ref, sim_root=None, ref_root=None) -> np.ndarray:
    """Per-frame mean over joints of |(p_j - p_root) - (p^_j - p^_root)|, for (T, J, 3) inputs.

    Without explicit roots, joint 0 is the root.
    """
    sim = np.asarray(sim, float)
    ref = np.asarray(ref, float)
    if sim.shape != ref.shape:
        raise ValueError(f"sequence shapes differ: {sim.shape} vs {ref.shape}")
    if sim.ndim != 3 or sim.shape[-1] != 3:
        raise ValueError("expected (T, J, 3) position sequences")
    rs = sim[:, :1] if sim_root is None else np.asarray(sim_root, float).reshape(-1, 1, 3)
    rr = ref[:, :1] if ref_root is None else np.asarray(ref_root, float).reshape(-1, 1, 3)
    rel = (sim - rs) - (ref - rr)
    return np.linalg.norm(rel, axis=-1).mean(-1)


def pose_error(sim, ref, sim_root=None, ref_root=None) -> float:
    """Average over frames of the root-relative joint position error, in metres."""
    return float(frame_errors(sim, ref, sim_root, ref_root).mean())


# ------------------------------------------------------------------------ DTW


@njit(cache=True)
def _dtw_table(cost):
    n, m = cost.shape
    acc = np.full((n, m), np.inf)
    acc[0, 0] = cost[0, 0]
    for i in range(n):
        for j in range(m):
            if i == 0 and j == 0:
                continue
            best = np.inf
            if i > 0 and j > 0:
                best = acc[i - 1, j - 1]
            if i > 0 and acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if j > 0 and acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = cost[i, j] + best
    return acc


def _backtrack(acc):
    i, j = acc.shape[0] - 1, acc.shape[1] - 1
    path = [(i, j)]
    while i > 0 or j > 0:
        # diagonal wins ties, then (i - 1, j), then (i, j - 1)
        options = []
        if i > 0 and j > 0:
            options.append((acc[i - 1, j - 1], i - 1, j - 1))
        if i > 0:
            options.append((acc[i - 1, j], i - 1, j))
        if j > 0:
            options.append((acc[i, j - 1], i, j - 1))
        best = min(o[0] for o in options)
        _, i, j = next(o for o in options if o[0] == best)
        path.append((i, j))
    return path[::-1]


@dataclass
class Alignment:
    path: list  # [(sim index, ref index), ...]
    cost: float
    sim: np.ndarray
    ref: np.ndarray


def dtw_align(sim, ref, metric=None) -> Alignment:
    """Boundary-anchored DTW with steps (1,0), (0,1), (1,1) minimizing the summed frame metric.

    ``metric(a, b)`` maps two stacks of frames (n, ...) and (m, ...) to an (n, m)
    cost matrix; default is the mean Euclidean distance over the last axis.
    """
    sim = np.asarray(sim, float)
    ref = np.asarray(ref, float)
    if len(sim) == 0 or len(ref) == 0:
        raise ValueError("DTW needs non-empty sequences")
    if metric is None:
        metric = _mean_distance_matrix
    cost = np.ascontiguousarray(metric(sim, ref), dtype=float)
    acc = _dtw_table(cost)
    path = _backtrack(acc)
    si = [p[0] for p in path]
    ri = [p[1] for p in path]
    return Alignment(path, float(acc[-1, -1]), sim[si], ref[ri])


def _mean_distance_matrix(a, b):
    a = a.reshape(len(a), -1, a.shape[-1] if a.ndim > 1 else 1)
    b = b.reshape(len(b), -1, b.shape[-1] if b.ndim > 1 else 1)
    d = a[:, None] - b[None, :]
    return np.linalg.norm(d, axis=-1).mean(-1)


def pose_metric(a, b):
    """Frame metric for root-relative (T, J, 3) sequences: mean joint distance."""
    return _mean_distance_matrix(a, b)


# ------------------------------------------------------------------ absurdity


def pose_absurdity(errors, k: float) -> float:
    """Mean of the ceil(k * T) largest per-frame errors."""
    e = np.asarray(errors, float).ravel()
    if e.size == 0:
        raise ValueError("empty error series")
    if not 0 < k <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {k}")
    n = max(1, int(math.ceil(k * e.size - 1e-9)))
    worst = np.sort(e)[::-1][:n]
    return float(worst.mean())


@dataclass
class PoseErrorReport:
    mean: float
    per_frame: np.ndarray
    path: list
    absurdity: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mean_pose_error": self.mean,
            "absurdity": {f"L2@{k:g}": v for k, v in self.absurdity.items()},
            "n_frames": int(len(self.per_frame)),
            "dtw_path_length": len(self.path),
        }


def pose_error_report(spec: CharacterSpec, sim_qpos, ref_qpos, align: bool = True) -> PoseErrorReport:
    """DTW-synchronized pose error between two generalized-coordinate sequences."""
    sim = root_relative_positions(spec, sim_qpos)
    ref = root_relative_positions(spec, ref_qpos)
    if align:
        al = dtw_align(sim, ref, pose_metric)
        path = al.path
        errs = frame_errors(al.sim, al.ref, np.zeros((len(path), 3)), np.zeros((len(path), 3)))
    else:
        path = [(i, i) for i in range(len(sim))]
        errs = frame_errors(sim, ref, np.zeros((len(sim), 3)), np.zeros((len(sim), 3)))
    absurd = {k: pose_absurdity(errs, k) for k in ABSURDITY_FRACTIONS}
    return PoseErrorReport(float(errs.mean()), errs, path, absurd)


def rollout_report(spec: CharacterSpec, motion: ReferenceMotion, ev: EvalRollout, start: int = 0) -> PoseErrorReport:
    """Pose error of an evaluation rollout against the reference over the simulated frames."""
    n = len(ev.states) - 1
    if not motion.cyclic:
        n = min(n, cycle_frames(motion) - 1 - start)
    if n < 1:
        return PoseErrorReport(math.inf, np.array([math.inf]), [], {k: math.inf for k in ABSURDITY_FRACTIONS})
    ref = control_table(motion, spec, n, start * CONTROL_DT).x
    return pose_error_report(spec, ev.states[1:, : spec.nq], ref[1:, : spec.nq])


def rollout_pose_error(spec: CharacterSpec, motion: ReferenceMotion, ev: EvalRollout) -> float:
    if ev.failed_at is not None:
        return math.inf
    return rollout_report(spec, motion, ev).mean


# ------------------------------------------------------------------ falling


def root_height(spec: CharacterSpec, qpos) -> np.ndarray:
    return link_states(spec, qpos, np.zeros(np.shape(qpos)[:-1] + (spec.nv,))).pos[..., 0, 2]


def fall_metrics(spec: CharacterSpec, states) -> dict:
    """Threshold-free summary of a rollout for the fall predicate.

    ``height_ratio`` is the smallest over all sustain windows of the largest
    root height inside the window, relative to rest; a fall under fraction f
    means height_ratio < f.  ``link_contact`` flags ground contact of any
    listed link.
    """
    rule = spec.fall
    states = np.asarray(states, float)
    qpos = states[:, : spec.nq]
    out = {"height_ratio": None, "link_contact": False}
    if rule.root_height_fraction is not None:
        rest = float(root_height(spec, spec.default_qpos()))
        h = root_height(spec, qpos) / rest
        w = max(1, int(round(rule.sustain / CONTROL_DT)))
        if len(h) >= w:
            windows = np.lib.stride_tricks.sliding_window_view(h, w)
            out["height_ratio"] = float(windows.max(-1).min())
        else:
            out["height_ratio"] = float(h.max())
    if rule.contact_links:
        plink = spec.contact_points[0]
        watch = np.isin(plink, [spec.link_index[n] for n in rule.contact_links])
        if watch.any():
            pts = contact_points_world(spec, qpos)
            out["link_contact"] = bool(np.any(pts[:, watch, 2] < 0.0))
    return out


def has_fallen(spec: CharacterSpec, metrics: dict, fraction: float | None = None) -> bool:
    fraction = spec.fall.root_height_fraction if fraction is None else fraction
    if metrics.get("failed"):
        return True
    if metrics["link_contact"]:
        return True
    r = metrics["height_ratio"]
    return r is not None and fraction is not None and r < fraction


def success_record(controller, spec: CharacterSpec, motion: ReferenceMotion, seconds: float = 20.0) -> dict:
    """Deterministic long evaluation used by samples-to-success; one log-entry fragment."""
    steps = int(round(seconds / CONTROL_DT))
    ev = evaluate_rollout(controller, motion, spec, steps)
    m = fall_metrics(spec, ev.states)
    rec = {
        "success_failed": ev.failed_at is not None,
        "success_height_ratio": m["height_ratio"],
        "success_link_contact": m["link_contact"],
    }
    if spec.fall.success_pose_error is not None:
        rec["success_pose_error"] = rollout_pose_error(spec, motion, ev)
    return rec


def is_success(spec: CharacterSpec, rec: dict, fraction: float | None = None, pose_bound: float | None = None) -> bool:
    if rec.get("success_failed"):
        return False
    metrics = {"height_ratio": rec.get("success_height_ratio"), "link_contact": rec.get("success_link_contact", False)}
    if has_fallen(spec, metrics, fraction):
        return False
    bound = spec.fall.success_pose_error if pose_bound is None else pose_bound
    if bound is not None and rec.get("success_pose_error") is not None:
        return rec["success_pose_error"] < bound
    return True


def samples_to_success(log, spec: CharacterSpec, motion: ReferenceMotion | None = None, samples_per_iteration: int = 1,
                       fraction: float | None = None, pose_bound: float | None = None):
    """Environment samples consumed before the first successful long evaluation, or None if never."""
    for entry in log:
        if "success_failed" not in entry:
            raise ValueError("log entries lack success evaluations (train with success_seconds > 0)")
        if is_success(spec, entry, fraction, pose_bound):
            return int(entry["iteration"]) * int(samples_per_iteration)
    return None


# --------------------------------------------------------------- robustness


PUSH_DIRECTIONS = {"forward": np.array([1.0, 0.0, 0.0]), "sideways": np.array([0.0, 1.0, 0.0])}


@dataclass
class PushResult:
    max_force: float
    tested: dict  # magnitude -> survived
    start_step: int
    push_steps: int


def push_survives(controller, spec, motion, direction, magnitude, steps, start_step, push_steps) -> bool:
    force = PUSH_DIRECTIONS[direction] * magnitude

    def push(k):
        return force if start_step <= k < start_step + push_steps else None

    ev = evaluate_rollout(controller, motion, spec, steps, push=push)
    if ev.failed_at is not None:
        return False
    return not has_fallen(spec, fall_metrics(spec, ev.states))


def push_robustness(controller, spec: CharacterSpec, motion: ReferenceMotion, direction: str = "forward",
                    steps: int = 120, duration: float = 0.2, resolution: float = 10.0, max_force: float = 5000.0) -> PushResult:
    """Largest push (multiple of ``resolution`` N) on the root for ``duration`` s from half a cycle that causes no fall."""
    if direction not in PUSH_DIRECTIONS:
        raise ValueError(f"direction must be one of {sorted(PUSH_DIRECTIONS)}")
    start = int(round(0.5 * motion.cycle_time / CONTROL_DT))
    start = min(start, max(steps - 1, 0))
    n_push = max(1, int(round(duration / CONTROL_DT)))
    tested = {}

    def ok(level):
        mag = level * resolution
        if mag not in tested:
            tested[mag] = push_survives(controller, spec, motion, direction, mag, steps, start, n_push)
        return tested[mag]

    if not ok(0):
        return PushResult(0.0, tested, start, n_push)
    # grow geometrically until a level fails, then bisect between the last pass and that failure
    top = int(max_force // resolution)
    lo, hi = 0, 1
    while ok(hi):
        lo = hi
        if hi == top:
            return PushResult(lo * resolution, tested, start, n_push)
        hi = min(2 * hi, top)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            lo = mid
        else:
            hi = mid
    return PushResult(lo * resolution, tested, start, n_push)


# ------------------------------------------------------------------ friction


def friction_sweep(spec: CharacterSpec, motion: ReferenceMotion, mus, controller=None, params=None,
                   cfg: TrainConfig | None = None, steps: int | None = None) -> list[tuple[float, float]]:
    """Pose error per friction coefficient, in input order.

    With ``controller`` the given policy is evaluated under each coefficient;
    otherwise a fresh copy of ``params`` is trained per coefficient with ``cfg``.
    """
    out = []
    for mu in mus:
        mu = float(mu)
        if not mu > 0:
            raise ValueError("friction coefficients must be positive")
        sp = spec.replace(friction=mu)
        if controller is None:
            if params is None or cfg is None:
                raise ValueError("friction_sweep needs a controller or params plus a training config")
            controller_mu = train(params, motion, sp, cfg).params
        else:
            controller_mu = controller
        n = steps or (cfg.eval_steps or cfg.episode_steps if cfg else 120)
        ev = evaluate_rollout(controller_mu, motion, sp, n)
        out.append((mu, rollout_pose_error(sp, motion, ev)))
    return out


# ------------------------------------------------------------------- reports


def write_report(path, report: dict) -> None:
    Path(path).write_text(json.dumps(report, indent=1, default=_json_default) + "\n")


def write_frame_errors(path, errors) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "pose_error"])
        for k, e in enumerate(np.asarray(errors, float)):
            w.writerow([k, repr(float(e))])


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o).__name__)
