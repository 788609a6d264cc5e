"""Policy training by backpropagating a state-matching loss through the simulator.

One iteration rolls out a batch of environments from reference states, records
every transition on a reverse-mode tape (the simulator contributes its exact
per-control-step Jacobians), sums the per-step weighted distances between
simulated and reference link kinematics, and takes one Adam step on the
policy.

Demonstration replay swaps the simulated state for the reference state before
a transition, either at random (``replay="random"``, probability ``gamma``)
or when the current distance reaches ``epsilon`` (``replay="threshold"``).  The
swapped-in state is a constant, so no gradient flows into the earlier
trajectory through it.  The distance of the replaced (simulated) state still
counts in the loss.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import policy as pol
from .reference import ReferenceMotion, ReferenceTable, control_table, cycle_frames, phase_at
from .sim import CONTROL_DT, CharacterSpec, SimulationError
from .sim.dynamics import feature_jacobian, kinematic_features, simulate, state_jacobians

REPLAY_MODES = ("none", "random", "threshold")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, message, iteration=None, diagnostics=None):
        super().__init__(message if iteration is None else f"iteration {iteration}: {message}")
        self.iteration = iteration
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 500
    episode_steps: int = 120  # control steps per rollout (4 s at 30 Hz)
    batch: int = 16
    weights: tuple | None = None  # (position, rotation, velocity, angular velocity); None = character defaults
    replay: str = "none"
    gamma: float = 0.0  # random replay: b ~ Bernoulli(gamma), replay when b != 0
    epsilon: float = 0.2  # threshold replay: replay when distance >= epsilon
    truncation: int | None = None  # cut the state gradient every n steps; None = full horizon
    rsi: bool = False
    seed: int = 0
    lr: float = 3e-4
    max_grad_norm: float = 0.3
    hidden: tuple = (64, 64)
    log_std: float = pol.LOG_STD_INIT
    eval_steps: int | None = None  # deterministic evaluation length; None = episode_steps
    success_seconds: float = 0.0  # > 0 adds a long evaluation per iteration for samples-to-success

    def __post_init__(self):
        if self.iterations < 0 or self.episode_steps < 1 or self.batch < 1:
            raise ConfigError("iterations >= 0, episode_steps >= 1 and batch >= 1 are required")
        if self.replay not in REPLAY_MODES:
            raise ConfigError(f"replay must be one of {REPLAY_MODES}, got {self.replay!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in [0, 1], got {self.gamma}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be > 0, got {self.epsilon}")
        if self.truncation is not None and not 1 <= self.truncation:
            raise ConfigError(f"truncation must be >= 1, got {self.truncation}")
        if self.weights is not None and (len(self.weights) != 4 or min(self.weights) < 0):
            raise ConfigError("weights needs four non-negative entries")
        if not self.lr >= 0 or not self.max_grad_norm > 0:
            raise ConfigError("lr must be >= 0 and max_grad_norm > 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        d["weights"] = None if self.weights is None else list(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("hidden") is not None:
            d["hidden"] = tuple(int(h) for h in d["hidden"])
        if d.get("weights") is not None:
            d["weights"] = tuple(float(w) for w in d["weights"])
        if d.get("epsilon") in ("inf", "Infinity"):
            d["epsilon"] = math.inf
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def loss_weights(self, spec: CharacterSpec) -> tuple:
        return tuple(spec.loss_weights if self.weights is None else self.weights)


# -------------------------------------------------------------------- distance


def weight_vector(spec: CharacterSpec, weights) -> np.ndarray:
    """Per-entry weights over the flattened (L * 15) kinematics, divided by the link count."""
    wp, wr, wv, wa = weights
    per_link = np.concatenate([np.full(3, wp), np.full(6, wr), np.full(3, wv), np.full(3, wa)])
    return np.tile(per_link, spec.n_links) / spec.n_links


def kinematic_distance(kin, kin_ref, weights) -> np.ndarray:
    """(1/|J|) sum_j [w_p |dp|^2 + w_r |d rot6d|^2 + w_v |dv|^2 + w_a |dw|^2] over (..., L, 15) arrays."""
    kin = np.asarray(kin, float)
    kin_ref = np.asarray(kin_ref, float)
    if kin.shape[-2:] != kin_ref.shape[-2:]:
        raise ValueError(f"link layouts differ: {kin.shape[-2:]} vs {kin_ref.shape[-2:]}")
    wp, wr, wv, wa = weights
    d = (kin - kin_ref) ** 2
    per_link = (
        wp * d[..., 0:3].sum(-1) + wr * d[..., 3:9].sum(-1) + wv * d[..., 9:12].sum(-1) + wa * d[..., 12:15].sum(-1)
    )
    return per_link.mean(-1)


def state_distance(spec: CharacterSpec, s, s_ref, weights=None) -> float | np.ndarray:
    """Weighted world-frame distance between two states (SimState or (qpos, qvel) pairs)."""
    weights = spec.loss_weights if weights is None else weights
    a = kinematic_features(spec, *_coords(s))
    b = kinematic_features(spec, *_coords(s_ref))
    return kinematic_distance(a, b, weights)


def _coords(s):
    if hasattr(s, "qpos"):
        return s.qpos, s.qvel
    return s


def replay_decide(mode: str, distance, epsilon: float = math.inf, gamma: float = 0.0, rng: np.random.Generator | None = None):
    """Whether to swap in the reference state before the next transition.

    threshold: replay iff distance >= epsilon.  random: b ~ Bernoulli(gamma),
    replay iff b != 0 (one uniform draw from ``rng``).  none: never.
    """
    if mode == "none":
        return False
    if mode == "threshold":
        return bool(distance >= epsilon)
    if mode == "random":
        return bool(rng.random() < gamma)
    raise ValueError(f"unknown replay mode {mode!r}")


# --------------------------------------------------------------------- rollout


def env_rng(seed: int, iteration: int, env: int) -> np.random.Generator:
    """Independent stream per (iteration, environment), split deterministically from the seed."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=(iteration, env))))


@dataclass
class RolloutRecord:
    tape: ad.Tape
    leaves: list  # parameter leaves, in PolicyParams.arrays() order
    loss: ad.Var  # mean over the batch of the summed per-step distances
    carries: list  # node index of the state fed to step t (None for t = 0)
    states: np.ndarray  # (T + 1, B, nx) simulated states s_0 .. s_T
    actions: np.ndarray  # (T, B, n_act)
    replayed: np.ndarray  # (T, B) whether step t started from the reference state
    step_loss: np.ndarray  # (T, B) distance of s_{t+1} to its reference
    start: np.ndarray  # (B,) reference frame index of s_0

    @property
    def total_loss(self) -> float:
        return float(self.loss.value)

    @property
    def replay_fraction(self) -> float:
        return float(self.replayed.mean())


def _reference_rows(table: ReferenceTable, start: np.ndarray, t: int):
    idx = start + t
    return table.x[idx], table.kin[idx], table.phase[idx]


def training_table(motion: ReferenceMotion, spec: CharacterSpec, cfg: TrainConfig) -> tuple[ReferenceTable, int]:
    """Control-rate reference covering every start frame plus one episode."""
    n_starts = cycle_frames(motion) if cfg.rsi else 1
    if not motion.cyclic:
        n_avail = cycle_frames(motion) - 1
        if cfg.episode_steps > n_avail:
            raise ConfigError(f"motion covers {n_avail} control steps, episode needs {cfg.episode_steps}")
        n_starts = min(n_starts, n_avail - cfg.episode_steps + 1)
    return control_table(motion, spec, n_starts - 1 + cfg.episode_steps), n_starts


def rollout(
    params: pol.PolicyParams,
    motion: ReferenceMotion,
    spec: CharacterSpec,
    cfg: TrainConfig,
    iteration: int = 0,
    table: tuple | None = None,
    deterministic: bool = False,
    envs=None,
) -> RolloutRecord:
    """Batched differentiable rollout of ``cfg.batch`` environments for ``cfg.episode_steps`` steps.

    ``envs`` selects environment indices (default ``range(cfg.batch)``); each
    index owns its random stream, so any subset reproduces its members exactly.
    """
    table, n_starts = table or training_table(motion, spec, cfg)
    envs = list(range(cfg.batch)) if envs is None else [int(b) for b in envs]
    B, T = len(envs), cfg.episode_steps
    weights = cfg.loss_weights(spec)
    wvec = weight_vector(spec, weights)
    P = pol.feature_matrix(spec)
    rngs = [env_rng(cfg.seed, iteration, b) for b in envs]
    start = np.array([r.integers(0, n_starts) if cfg.rsi else 0 for r in rngs], dtype=int)

    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in params.arrays()]
    x_ref, kin_ref, ph = _reference_rows(table, start, 0)
    x = tape.constant(x_ref)
    kin_val, kin_jac = feature_jacobian(spec, x_ref)
    dist = np.zeros(B)

    states = [x_ref]
    actions, flags, step_loss, carries = [], [], [], [None]
    total = None
    for t in range(T):
        # demonstration replay decision on the current simulated state
        use_ref = np.array(
            [replay_decide(cfg.replay, dist[b], cfg.epsilon, cfg.gamma, rngs[b]) for b in range(B)], dtype=bool
        )
        x_ref, kin_ref_t, ph = _reference_rows(table, start, t)
        if use_ref.any():
            x_in = ad.select(use_ref[:, None], tape.constant(x_ref), x)
            feat_val = np.where(use_ref[:, None, None], kin_ref_t, kin_val)
            feat_jac = np.where(use_ref[:, None, None, None], 0.0, kin_jac)
        else:
            x_in, feat_val, feat_jac = x, kin_val, kin_jac
        flags.append(use_ref)

        # policy on root-relative features plus phase
        flat_jac = feat_jac.reshape(B, -1, spec.nx)
        obs_val = feat_val.reshape(B, -1) @ P.T
        obs = ad.linear("features", [x_in], obs_val, [P @ flat_jac])
        obs = ad.concat([obs, tape.constant(ph[:, None])], axis=-1)
        if deterministic:
            a = pol.sample_with(leaves, obs, None)
        else:
            noise = np.stack([r.standard_normal(spec.n_act) for r in rngs])
            a = pol.sample_with(leaves, obs, noise)
        actions.append(a.value)

        # one control step with exact Jacobians
        try:
            x_next, jx, ja = state_jacobians(spec, x_in.value, a.value)
        except SimulationError as e:
            raise SimulationError(f"rollout control step {t}: {e}", e.substep, e.env) from None
        x_new = ad.linear("transition", [x_in, a], x_next, [jx, ja])
        states.append(x_next)

        # loss on the new simulated state against the next reference frame
        _, kin_ref_next, _ = _reference_rows(table, start, t + 1)
        kin_val, kin_jac = feature_jacobian(spec, x_next)
        kin = ad.linear("kinematics", [x_new], kin_val.reshape(B, -1), [kin_jac.reshape(B, -1, spec.nx)])
        diff = kin - kin_ref_next.reshape(B, -1)
        d = (diff * diff * wvec).sum(axis=-1)
        dist = d.value
        step_loss.append(dist)
        term = d.mean()
        total = term if total is None else total + term

        # the state carried into the next step; truncation blocks this node
        if t + 1 < T:
            x = tape.record("carry", [x_new], x_new.value, [ad.Pullback(lambda g: g)])
            carries.append(x.index)

    return RolloutRecord(
        tape=tape,
        leaves=leaves,
        loss=total,
        carries=carries,
        states=np.array(states),
        actions=np.array(actions),
        replayed=np.array(flags),
        step_loss=np.array(step_loss),
        start=start,
    )


def truncation_cuts(record: RolloutRecord, n: int | None) -> list[int]:
    """Carry nodes to block so that state gradients do not cross every n-th step."""
    if n is None:
        return []
    T = len(record.actions)
    if not 1 <= n:
        raise ValueError("truncation length must be >= 1")
    return [record.carries[t] for t in range(n, T, n)]


def truncated_backward(record: RolloutRecord, n: int | None = None) -> list[np.ndarray]:
    """Gradient of the rollout loss wrt the policy parameters, cutting the state path every n steps."""
    return record.tape.backward(record.loss, record.leaves, blocked=truncation_cuts(record, n))


def full_backward(record: RolloutRecord) -> list[np.ndarray]:
    return record.tape.backward(record.loss, record.leaves)


# ------------------------------------------------------------------ evaluation


def _controller_action(controller, feats: np.ndarray, step: int) -> np.ndarray:
    if isinstance(controller, pol.PolicyParams):
        return pol.policy_mean(controller, feats)
    return np.asarray(controller(step, feats), float)


class OpenLoop:
    """Replays a motion's recorded targets from frame 0: cyclic motions repeat
    their cycle, acyclic ones hold the last target past the end."""

    def __init__(self, motion: ReferenceMotion):
        if motion.actions is None:
            raise ValueError("motion has no recorded actions")
        self.actions = motion.actions
        self.cyclic = motion.cyclic

    def __call__(self, step: int, feats):
        n = len(self.actions)
        if self.cyclic:
            return self.actions[step % (n - 1)]
        return self.actions[min(step, n - 1)]


@dataclass
class EvalRollout:
    states: np.ndarray  # (T + 1, nx)
    actions: np.ndarray  # (T, n_act)
    phases: np.ndarray  # (T + 1,)
    failed_at: int | None = None  # control step of a numeric failure


def evaluate_rollout(
    controller,
    motion: ReferenceMotion,
    spec: CharacterSpec,
    steps: int,
    start: int = 0,
    push: Callable[[int], np.ndarray | None] | None = None,
) -> EvalRollout:
    """Deterministic closed-loop rollout from the reference state at frame ``start``.

    ``controller`` is PolicyParams (mean action) or ``f(step, features) -> action``.
    ``push(step)`` optionally returns a world force on the root for that step.
    A numeric blow-up ends the rollout early (``failed_at``).
    """
    t0 = start * CONTROL_DT
    s0 = control_table(motion, spec, 0, t0)
    x = s0.x[0]
    P = pol.feature_matrix(spec)
    states, acts, phases = [x], [], []
    failed = None
    for k in range(steps):
        t = t0 + k * CONTROL_DT
        ph = phase_at(motion, t) if motion.cyclic else min(t / motion.cycle_time, 1.0)
        phases.append(ph)
        kin = kinematic_features(spec, x[: spec.nq], x[spec.nq :])
        feats = np.concatenate([kin.reshape(-1) @ P.T, [ph]])
        a = _controller_action(controller, feats, k)
        f = None if push is None else push(k)
        try:
            qpos, qvel = simulate(spec, x[: spec.nq], x[spec.nq :], a, f)
        except SimulationError:
            failed = k
            break
        x = np.concatenate([qpos, qvel])
        states.append(x)
        acts.append(a)
    t = t0 + len(states[1:]) * CONTROL_DT
    phases.append(phase_at(motion, t) if motion.cyclic else min(t / motion.cycle_time, 1.0))
    return EvalRollout(np.array(states), np.array(acts).reshape(-1, spec.n_act), np.array(phases), failed)


# ---------------------------------------------------------------------- train


@dataclass
class TrainResult:
    params: pol.PolicyParams
    log: list = field(default_factory=list)


def _check_finite_grads(grads) -> bool:
    return all(np.all(np.isfinite(g)) for g in grads)


def train(
    params: pol.PolicyParams,
    motion: ReferenceMotion,
    spec: CharacterSpec,
    cfg: TrainConfig,
    log_path=None,
    on_iteration: Callable[[dict], None] | None = None,
    diagnostics_dir=None,
    stop_when: Callable[[dict], bool] | None = None,
) -> TrainResult:
    """Run ``cfg.iterations`` rounds of rollout, backward and Adam; returns the policy and per-iteration log.

    ``stop_when(entry)`` is checked before each update (the entry holds the
    success evaluation of the current policy); returning True ends training
    with that policy and a log that ends at the entry.
    """
    from . import evalkit

    params = params.copy()
    opt = pol.AdamState(total_iters=cfg.iterations, lr=cfg.lr, max_grad_norm=cfg.max_grad_norm)
    table = training_table(motion, spec, cfg)
    eval_steps = cfg.eval_steps or cfg.episode_steps
    log = []
    fh = open(log_path, "w") if log_path else None
    try:
        for it in range(cfg.iterations):
            entry = {"iteration": it}
            if cfg.success_seconds > 0:
                entry.update(evalkit.success_record(params, spec, motion, cfg.success_seconds))
                if stop_when is not None and stop_when(entry):
                    log.append(entry)
                    if fh:
                        fh.write(json.dumps(entry) + "\n")
                    break
            try:
                rec = rollout(params, motion, spec, cfg, iteration=it, table=table)
            except SimulationError as e:
                raise TrainingError(f"simulation failed: {e}", it, {"error": str(e)}) from None
            loss = rec.total_loss
            grads = truncated_backward(rec, cfg.truncation)
            if not math.isfinite(loss) or not _check_finite_grads(grads):
                diag = {
                    "iteration": it,
                    "loss": loss,
                    "step_loss_max": float(np.max(rec.step_loss)) if rec.step_loss.size else None,
                    "grad_finite": [bool(np.all(np.isfinite(g))) for g in grads],
                }
                if diagnostics_dir is not None:
                    p = Path(diagnostics_dir) / f"diagnostics_iter{it}.json"
                    p.write_text(json.dumps(diag, indent=1, default=str) + "\n")
                    diag["path"] = str(p)
                raise TrainingError("non-finite loss or gradient", it, diag)
            gnorm = pol.global_norm(grads)
            lr = opt.learning_rate()
            ev = evaluate_rollout(params, motion, spec, eval_steps)
            entry.update(
                {
                    "loss": loss,
                    "eval_pose_error": evalkit.rollout_pose_error(spec, motion, ev),
                    "replay_fraction": rec.replay_fraction,
                    "grad_norm": gnorm,
                    "lr": lr,
                }
            )
            params = pol.adam_update(params, grads, opt)
            log.append(entry)
            if fh:
                fh.write(json.dumps(entry) + "\n")
                fh.flush()
            if on_iteration:
                on_iteration(entry)
    finally:
        if fh:
            fh.close()
    return TrainResult(params, log)


# ------------------------------------------------------------- gradient check


@dataclass
class GradCheck:
    coords: list  # (array index, flat index)
    analytic: np.ndarray
    numeric: dict  # h -> finite-difference values
    rel_error: dict  # h -> max relative error
    best_h: float

    @property
    def max_rel_error(self) -> float:
        return self.rel_error[self.best_h]


def relative_error(a, b, atol: float = 1e-8) -> np.ndarray:
    """|a - b| / max(|a|, |b|, atol), elementwise."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), atol)


def gradient_check(
    params: pol.PolicyParams,
    motion: ReferenceMotion,
    spec: CharacterSpec,
    cfg: TrainConfig,
    n_coords: int = 32,
    steps=(1e-4, 1e-5, 1e-6),
    seed: int = 0,
    adjoint_hook=None,
) -> GradCheck:
    """Tape gradient of the rollout loss against central differences on a random parameter subset.

    The rollout noise and replay draws are fixed by ``cfg.seed``, so the loss is
    a deterministic function of the parameters.  Truncation is ignored: a cut
    gradient is not the derivative of the loss.  The verdict uses the step size
    with the smallest worst-case error; all step sizes are reported.
    """
    table = training_table(motion, spec, cfg)
    rec = rollout(params, motion, spec, cfg, table=table)
    rec.tape.adjoint_hook = adjoint_hook
    grads = full_backward(rec)
    arrays = params.arrays()
    sizes = [a.size for a in arrays]
    rng = np.random.default_rng(seed)
    flat = rng.choice(sum(sizes), size=min(n_coords, sum(sizes)), replace=False)
    offsets = np.cumsum([0] + sizes)
    coords = []
    for f in sorted(int(v) for v in flat):
        k = int(np.searchsorted(offsets, f, side="right") - 1)
        coords.append((k, f - int(offsets[k])))
    analytic = np.array([grads[k].ravel()[i] for k, i in coords])

    def loss_at(k, i, d):
        a = [x.copy() for x in arrays]
        a[k].ravel()[i] += d
        return rollout(pol.PolicyParams.from_arrays(a), motion, spec, cfg, table=table).total_loss

    numeric, rel = {}, {}
    for h in steps:
        fd = np.array([(loss_at(k, i, h) - loss_at(k, i, -h)) / (2.0 * h) for k, i in coords])
        numeric[h] = fd
        rel[h] = float(relative_error(analytic, fd).max())
    best = min(steps, key=lambda h: rel[h])
    return GradCheck(coords, analytic, numeric, rel, best)
