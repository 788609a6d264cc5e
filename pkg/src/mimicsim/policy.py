"""Stochastic MLP policy, state features and the Adam optimizer.

The policy maps a per-character feature vector to PD target angles:

    mean = W_out swish(... swish(x W_0 + b_0) ...) + b_out
    a    = mean + sigma * noise,   sigma = exp(max(log_std, ln 1e-4))

Parameters are plain numpy arrays.  The forward functions are written against
the polymorphic helpers of :mod:`mimicsim.autodiff`, so passing tape variables
instead of arrays records the computation for reverse-mode differentiation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .sim import CharacterSpec, kinematic_features

FEATURES_PER_LINK = 15
LOG_STD_INIT = math.log(0.05)
LOG_STD_MIN = math.log(1e-4)
CHECKPOINT_FORMAT = "policy/v1"


# ------------------------------------------------------------------ features


def feature_dim(spec: CharacterSpec) -> int:
    return spec.n_links * FEATURES_PER_LINK + 1


def feature_matrix(spec: CharacterSpec) -> np.ndarray:
    """Linear map from flattened world kinematics (L*15,) to policy features without phase.

    Floating characters see link positions relative to the root link; a fixed
    base is its own reference frame, so its features are world coordinates.
    """
    n = spec.n_links * FEATURES_PER_LINK
    P = np.eye(n)
    if spec.floating:
        for j in range(spec.n_links):
            for x in range(3):
                P[j * FEATURES_PER_LINK + x, x] -= 1.0
    return P


def features_from_kinematics(spec: CharacterSpec, kin, phase):
    """Policy features from per-link kinematics (..., L, 15) and phase (...)."""
    kin = np.asarray(kin, float)
    flat = kin.reshape(kin.shape[:-2] + (-1,)) @ feature_matrix(spec).T
    phase = np.broadcast_to(np.asarray(phase, float), flat.shape[:-1])
    return np.concatenate([flat, phase[..., None]], axis=-1)


def state_features(spec: CharacterSpec, qpos, qvel, phase=0.0) -> np.ndarray:
    """Root-relative link positions, world rot6d, world velocities, then the phase."""
    return features_from_kinematics(spec, kinematic_features(spec, qpos, qvel), phase)


# -------------------------------------------------------------------- params


@dataclass
class PolicyParams:
    weights: list  # (in, out) per layer
    biases: list
    log_std: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def act_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def hidden(self) -> tuple:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def arrays(self) -> list:
        """[W0, b0, W1, b1, ..., log_std]; the order used for gradients and Adam."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.log_std]

    @classmethod
    def from_arrays(cls, arrays) -> "PolicyParams":
        arrays = [np.array(a, dtype=float) for a in arrays]
        return cls(arrays[0:-1:2], arrays[1:-1:2], arrays[-1])

    def copy(self) -> "PolicyParams":
        return PolicyParams.from_arrays(self.arrays())

    def validate(self):
        prev = self.in_dim
        for w, b in zip(self.weights, self.biases):
            if w.ndim != 2 or w.shape[0] != prev or b.shape != (w.shape[1],):
                raise ValueError(f"inconsistent layer shapes {w.shape} / {b.shape}")
            prev = w.shape[1]
        if self.log_std.shape != (prev,):
            raise ValueError(f"log_std shape {self.log_std.shape} does not match action dim {prev}")
        if not all(np.all(np.isfinite(a)) for a in self.arrays()):
            raise ValueError("non-finite policy parameters")


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init_policy(in_dim: int, act_dim: int, hidden=(64, 64), seed: int = 0, log_std: float = LOG_STD_INIT) -> PolicyParams:
    """Orthogonal init, gain 1 on hidden layers and 0.01 on the output layer."""
    rng = np.random.default_rng(seed)
    sizes = [in_dim, *hidden, act_dim]
    weights, biases = [], []
    for k in range(len(sizes) - 1):
        gain = 0.01 if k == len(sizes) - 2 else 1.0
        weights.append(_orthogonal(rng, sizes[k], sizes[k + 1], gain))
        biases.append(np.zeros(sizes[k + 1]))
    return PolicyParams(weights, biases, np.full(act_dim, float(log_std)))


def policy_for(spec: CharacterSpec, hidden=(64, 64), seed: int = 0) -> PolicyParams:
    return init_policy(feature_dim(spec), spec.n_act, hidden, seed)


# ------------------------------------------------------------------- forward


def mlp(arrays, x):
    """MLP forward over ``arrays = [W0, b0, ..., W_out, b_out, (log_std)]``; arrays or tape vars."""
    n_layers = len(arrays) // 2
    h = x
    for k in range(n_layers):
        h = ad.matmul(h, arrays[2 * k]) + arrays[2 * k + 1]
        if k < n_layers - 1:
            h = ad.swish(h)
    return h


def _check_input(params: PolicyParams, features):
    shape = np.shape(ad.value_of(features))
    if not shape or shape[-1] != params.in_dim:
        raise ValueError(f"policy expects {params.in_dim} features, got shape {shape}")


def policy_mean(params: PolicyParams, features):
    _check_input(params, features)
    return mlp(params.arrays(), np.asarray(features, float))


def action_std(log_std):
    return ad.exp(ad.clamp(log_std, LOG_STD_MIN))


def sample_with(arrays, features, noise):
    """Reparameterized sample: the mean plus sigma times fixed noise; arrays or tape vars."""
    mean = mlp(arrays, features)
    if noise is None:
        return mean
    return mean + action_std(arrays[-1]) * noise


def sample_action(params: PolicyParams, features, noise=None):
    """a = mean + exp(log_std) * noise; ``noise=None`` is the deterministic (mean) mode."""
    _check_input(params, features)
    if noise is not None:
        noise = np.asarray(noise, float)
        if noise.shape[-1] != params.act_dim:
            raise ValueError(f"noise has {noise.shape[-1]} entries, action dim is {params.act_dim}")
    return sample_with(params.arrays(), np.asarray(features, float), noise)


# ---------------------------------------------------------------------- adam


@dataclass
class AdamState:
    total_iters: int
    lr: float = 3e-4
    max_grad_norm: float = 0.3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def learning_rate(self, t: int | None = None) -> float:
        """lr0 * (1 - t / I), exactly lr0 at t = 0 and 0 from t = I on."""
        t = self.step if t is None else t
        if self.total_iters <= 0:
            return 0.0
        return self.lr * max(0.0, 1.0 - t / self.total_iters)


def global_norm(grads) -> float:
    return float(math.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_by_global_norm(grads, max_norm: float):
    norm = global_norm(grads)
    if norm > max_norm > 0:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return [np.array(g, dtype=float) for g in grads], norm


def adam_update(params: PolicyParams, grads, opt: AdamState) -> PolicyParams:
    """Clip to the global norm, then one Adam step at the decayed rate; ``opt`` is advanced in place."""
    arrays = params.arrays()
    if len(grads) != len(arrays) or any(np.shape(g) != a.shape for g, a in zip(grads, arrays)):
        raise ValueError("gradient shapes do not match parameters")
    if not opt.m:
        opt.m = [np.zeros_like(a) for a in arrays]
        opt.v = [np.zeros_like(a) for a in arrays]
    grads, _ = clip_by_global_norm(grads, opt.max_grad_norm)
    lr = opt.learning_rate()
    t = opt.step + 1
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    out = []
    for k, (a, g) in enumerate(zip(arrays, grads)):
        opt.m[k] = opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * g
        opt.v[k] = opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * g * g
        mhat = opt.m[k] / c1
        vhat = opt.v[k] / c2
        out.append(a - lr * mhat / (np.sqrt(vhat) + opt.eps))
    opt.step = t
    return PolicyParams.from_arrays(out)


# ---------------------------------------------------------------- checkpoint


def save_checkpoint(params: PolicyParams, path, meta: dict | None = None) -> None:
    """JSON dump of shapes and values; floats are written with round-trip precision."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "meta": dict(meta or {}),
        "in_dim": params.in_dim,
        "act_dim": params.act_dim,
        "hidden": list(params.hidden),
        "activation": "swish",
        "arrays": [{"shape": list(a.shape), "values": a.ravel().tolist()} for a in params.arrays()],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> tuple[PolicyParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: expected format {CHECKPOINT_FORMAT!r}, got {doc.get('format')!r}")
    arrays = [np.array(e["values"], dtype=float).reshape(e["shape"]) for e in doc["arrays"]]
    params = PolicyParams.from_arrays(arrays)
    params.validate()
    return params, doc.get("meta", {})
