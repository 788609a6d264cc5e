"""Character description files (``character/v1``) and their static layout."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import yaml

from .. import mathcore

SCHEMA = "character/v1"
ROOT_KINDS = ("fixed", "planar", "free")
DATA_DIR = Path(__file__).resolve().parent.parent / "data" / "characters"


class SpecError(ValueError):
    """Invalid character file or parameters."""


@dataclass(frozen=True)
class Capsule:
    radius: float
    half_length: float = 0.0
    center: tuple = (0.0, 0.0, 0.0)
    axis: tuple = (0.0, 0.0, 1.0)


@dataclass(frozen=True)
class Joint:
    kind: str  # revolute | spherical
    axes: tuple  # unit axes in the joint frame, applied in order
    offset: tuple  # anchor in the parent link frame (world frame for a fixed root)
    rest: tuple = (1.0, 0.0, 0.0, 0.0)
    lo: tuple = ()
    hi: tuple = ()
    limit_stiffness: float = 0.0
    kp: tuple = ()
    kd: tuple = ()
    armature: tuple = ()  # rotor inertia added to the joint's own mass-matrix diagonal

    @property
    def dof(self) -> int:
        return len(self.axes)


@dataclass(frozen=True)
class Link:
    name: str
    parent: str | None
    mass: float
    inertia: tuple  # principal moments about the COM, link-frame axes
    com: tuple = (0.0, 0.0, 0.0)  # COM in the link frame (origin at the joint)
    capsule: Capsule | None = None
    joint: Joint | None = None


@dataclass(frozen=True)
class FallRule:
    root_height_fraction: float | None = None
    sustain: float = 0.2
    contact_links: tuple = ()
    success_pose_error: float | None = None


@dataclass(frozen=True)
class CharacterSpec:
    name: str
    root: str
    links: tuple
    gravity: float = 9.81
    contact_enabled: bool = True
    contact_stiffness: float = 1e4
    contact_damping: float = 100.0
    friction: float = 1.0
    loss_weights: tuple = (1.0, 0.5, 0.01, 0.01)
    fall: FallRule = field(default_factory=FallRule)
    rest_qpos: tuple | None = None

    def __post_init__(self):
        validate(self)

    def replace(self, **changes) -> "CharacterSpec":
        """Copy with some fields changed (e.g. ``friction=0.8``)."""
        return dataclasses.replace(self, **changes)

    # ------------------------------------------------------------ layout

    @property
    def n_links(self) -> int:
        return len(self.links)

    @cached_property
    def link_index(self) -> dict:
        return {link.name: i for i, link in enumerate(self.links)}

    @cached_property
    def parent(self) -> np.ndarray:
        return np.array([-1 if l.parent is None else self.link_index[l.parent] for l in self.links])

    @property
    def floating(self) -> bool:
        return self.root != "fixed"

    @property
    def n_root_q(self) -> int:
        return {"fixed": 0, "planar": 3, "free": 7}[self.root]

    @property
    def n_root_v(self) -> int:
        return {"fixed": 0, "planar": 3, "free": 6}[self.root]

    @cached_property
    def joint_links(self) -> list:
        return [i for i, l in enumerate(self.links) if l.joint is not None]

    @cached_property
    def n_act(self) -> int:
        return sum(self.links[i].joint.dof for i in self.joint_links)

    @property
    def nq(self) -> int:
        return self.n_root_q + self.n_act

    @property
    def nv(self) -> int:
        return self.n_root_v + self.n_act

    @property
    def nx(self) -> int:
        return self.nq + self.nv

    @cached_property
    def dof_link(self) -> np.ndarray:
        """Link whose joint owns each velocity dof (root dofs map to the root)."""
        out = [0] * self.n_root_v
        for i in self.joint_links:
            out += [i] * self.links[i].joint.dof
        return np.array(out)

    @cached_property
    def translation_dofs(self) -> np.ndarray:
        """(nv,) mask of root translation dofs."""
        m = np.zeros(self.nv, dtype=bool)
        m[: {"fixed": 0, "planar": 2, "free": 3}[self.root]] = True
        return m

    @cached_property
    def translation_axes(self) -> np.ndarray:
        axes = np.zeros((self.nv, 3))
        if self.root == "planar":
            axes[0, 0] = axes[1, 2] = 1.0
        elif self.root == "free":
            axes[:3] = np.eye(3)
        return axes

    @cached_property
    def subtree(self) -> np.ndarray:
        """(L, L) mask: ``subtree[i, j]`` iff link i lies in the subtree of link j."""
        n = self.n_links
        m = np.eye(n, dtype=bool)
        for i in range(n):
            p = self.parent[i]
            while p >= 0:
                m[i, p] = True
                p = self.parent[p]
        return m

    @cached_property
    def moves_link(self) -> np.ndarray:
        """(L, nv) mask: dof k moves link i (translations move every link)."""
        m = self.subtree[:, self.dof_link].copy()
        if self.floating:
            m[:, : self.n_root_v] = True
        return m

    @cached_property
    def frame_rate_dofs(self) -> np.ndarray:
        """(nv, nv) mask: dof l contributes to the angular velocity of the frame carrying axis k."""
        nv = self.nv
        m = np.zeros((nv, nv), dtype=bool)
        rot = ~self.translation_dofs
        start = self.n_root_v
        for i in self.joint_links:
            d = self.links[i].joint.dof
            for a in range(d):
                k = start + a
                p = self.parent[i]
                if p >= 0:
                    m[k] = self.moves_link[p] & rot
                m[k, start : start + a] = True
            start += d
        return m

    @cached_property
    def anchor_parent(self) -> np.ndarray:
        """Parent link of the anchor of each dof (-1 when fixed in the world or root)."""
        out = np.full(self.nv, -1)
        for k in range(self.n_root_v, self.nv):
            out[k] = self.parent[self.dof_link[k]]
        return out

    @cached_property
    def masses(self) -> np.ndarray:
        return np.array([l.mass for l in self.links])

    @cached_property
    def inertias(self) -> np.ndarray:
        return np.array([l.inertia for l in self.links], dtype=float)

    @cached_property
    def coms(self) -> np.ndarray:
        return np.array([l.com for l in self.links], dtype=float)

    @cached_property
    def kp(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.links[i].joint.kp, float) for i in self.joint_links] or [np.zeros(0)])

    @cached_property
    def kd(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.links[i].joint.kd, float) for i in self.joint_links] or [np.zeros(0)])

    @cached_property
    def armature(self) -> np.ndarray:
        """(nv,) diagonal rotor inertia; zero for root dofs."""
        per_joint = [np.asarray(self.links[i].joint.armature, float) for i in self.joint_links]
        return np.concatenate([np.zeros(self.n_root_v)] + per_joint)

    @cached_property
    def limit_lo(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.links[i].joint.lo, float) for i in self.joint_links] or [np.zeros(0)])

    @cached_property
    def limit_hi(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.links[i].joint.hi, float) for i in self.joint_links] or [np.zeros(0)])

    @cached_property
    def limit_stiffness(self) -> np.ndarray:
        return np.concatenate(
            [np.full(self.links[i].joint.dof, self.links[i].joint.limit_stiffness) for i in self.joint_links]
            or [np.zeros(0)]
        )

    @cached_property
    def contact_points(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sphere centers of every capsule end: (link index, local point, radius)."""
        links, pts, radii = [], [], []
        for i, l in enumerate(self.links):
            c = l.capsule
            if c is None:
                continue
            center = np.asarray(c.center, float)
            axis = np.asarray(c.axis, float)
            ends = [center] if c.half_length == 0 else [center - c.half_length * axis, center + c.half_length * axis]
            for e in ends:
                links.append(i)
                pts.append(e)
                radii.append(c.radius)
        return np.array(links, dtype=int), np.array(pts).reshape(-1, 3), np.array(radii)

    def default_qpos(self) -> np.ndarray:
        if self.rest_qpos is not None:
            return np.array(self.rest_qpos, dtype=float)
        q = np.zeros(self.nq)
        if self.root == "free":
            q[3] = 1.0
        return q

    @property
    def actuated_qpos(self) -> np.ndarray:
        """qpos indices of the actuated joint coordinates."""
        return np.arange(self.n_root_q, self.nq)

    @property
    def actuated_qvel(self) -> np.ndarray:
        return np.arange(self.n_root_v, self.nv)


def validate(spec: CharacterSpec) -> None:
    if spec.root not in ROOT_KINDS:
        raise SpecError(f"root must be one of {ROOT_KINDS}, got {spec.root!r}")
    if not spec.links:
        raise SpecError("character has no links")
    names = [l.name for l in spec.links]
    if len(set(names)) != len(names):
        raise SpecError("duplicate link names")
    seen = set()
    roots = 0
    for i, l in enumerate(spec.links):
        if l.mass <= 0:
            raise SpecError(f"link {l.name}: mass must be > 0")
        if len(l.inertia) != 3 or min(l.inertia) <= 0:
            raise SpecError(f"link {l.name}: inertia must be three positive moments")
        if l.parent is None:
            roots += 1
            if i != 0:
                raise SpecError("the root link must be listed first")
            if spec.floating and l.joint is not None:
                raise SpecError(f"link {l.name}: a floating root cannot have a joint")
            if not spec.floating and l.joint is None:
                raise SpecError(f"link {l.name}: a fixed root needs a joint to the world")
        else:
            if l.parent not in seen:
                raise SpecError(f"link {l.name}: parent {l.parent!r} must be listed before it")
            if l.joint is None:
                raise SpecError(f"link {l.name}: missing joint")
        seen.add(l.name)
        j = l.joint
        if j is None:
            continue
        if j.kind not in ("revolute", "spherical"):
            raise SpecError(f"link {l.name}: joint type {j.kind!r}")
        n = j.dof
        if n == 0 or any(len(x) != n for x in (j.lo, j.hi, j.kp, j.kd, j.armature)):
            raise SpecError(f"link {l.name}: per-axis joint fields must have {n} entries")
        if any(lo >= hi for lo, hi in zip(j.lo, j.hi)):
            raise SpecError(f"link {l.name}: joint limits need lo < hi")
        if min(j.kp) < 0 or min(j.kd) < 0 or min(j.armature) < 0 or j.limit_stiffness < 0:
            raise SpecError(f"link {l.name}: gains must be >= 0")
        for a in j.axes:
            if abs(np.linalg.norm(a) - 1.0) > 1e-9:
                raise SpecError(f"link {l.name}: joint axes must be unit vectors")
    if roots != 1:
        raise SpecError("joint graph must have exactly one root")
    if spec.friction < 0 or spec.contact_stiffness <= 0 or spec.contact_damping < 0:
        raise SpecError("contact parameters out of range")
    if min(spec.loss_weights) < 0:
        raise SpecError("loss weights must be >= 0")
    if spec.rest_qpos is not None and len(spec.rest_qpos) != spec.nq:
        raise SpecError(f"rest_qpos needs {spec.nq} entries")


# ------------------------------------------------------------------ loading


def _vec(x, n=3):
    v = tuple(float(a) for a in x)
    if len(v) != n:
        raise SpecError(f"expected {n} numbers, got {x!r}")
    return v


def _joint(d: dict, name: str) -> Joint:
    kind = d.get("type", "revolute")
    if kind == "spherical":
        axes = d.get("axes", [[1, 0, 0], [0, 1, 0], [0, 0, 1]])
    else:
        axes = d["axes"] if "axes" in d else [d["axis"]]
    axes = tuple(_vec(a) for a in axes)
    n = len(axes)
    lim = d.get("limits", {})

    def per_axis(v, default):
        v = default if v is None else v
        return tuple(float(x) for x in (v if isinstance(v, (list, tuple)) else [v] * n))

    rest = d.get("rest", [1.0, 0.0, 0.0, 0.0])
    rest = tuple(mathcore.quat_normalize(np.array(_vec(rest, 4))).tolist())
    return Joint(
        kind=kind,
        axes=axes,
        offset=_vec(d.get("offset", [0, 0, 0])),
        rest=rest,
        lo=per_axis(lim.get("lo"), -np.pi),
        hi=per_axis(lim.get("hi"), np.pi),
        limit_stiffness=float(lim.get("stiffness", 0.0)),
        kp=per_axis(d.get("kp"), 0.0),
        kd=per_axis(d.get("kd"), [0.1 * k for k in per_axis(d.get("kp"), 0.0)]),
        armature=per_axis(d.get("armature"), 0.0),
    )


def spec_from_dict(doc: dict) -> CharacterSpec:
    if not isinstance(doc, dict) or doc.get("format") != SCHEMA:
        raise SpecError(f"expected format: {SCHEMA}")
    try:
        links = []
        for d in doc["links"]:
            cap = d.get("capsule")
            capsule = None
            if cap is not None:
                axis = np.array(_vec(cap.get("axis", [0, 0, 1])))
                capsule = Capsule(
                    radius=float(cap["radius"]),
                    half_length=float(cap.get("half_length", 0.0)),
                    center=_vec(cap.get("center", [0, 0, 0])),
                    axis=tuple((axis / np.linalg.norm(axis)).tolist()),
                )
            links.append(
                Link(
                    name=str(d["name"]),
                    parent=d.get("parent"),
                    mass=float(d["mass"]),
                    inertia=_vec(d["inertia"]),
                    com=_vec(d.get("com", [0, 0, 0])),
                    capsule=capsule,
                    joint=None if d.get("joint") is None else _joint(d["joint"], d["name"]),
                )
            )
        contact = doc.get("contact", {})
        w = doc.get("loss_weights", {})
        fall = doc.get("fall", {})
        rest = doc.get("rest_qpos")
        return CharacterSpec(
            name=str(doc.get("name", "character")),
            root=str(doc.get("root", "fixed")),
            links=tuple(links),
            gravity=float(doc.get("gravity", 9.81)),
            contact_enabled=bool(contact.get("enabled", True)),
            contact_stiffness=float(contact.get("stiffness", 1e4)),
            contact_damping=float(contact.get("damping", 100.0)),
            friction=float(contact.get("friction", 1.0)),
            loss_weights=(
                float(w.get("position", 1.0)),
                float(w.get("rotation", 0.5)),
                float(w.get("velocity", 0.01)),
                float(w.get("angular_velocity", 0.01)),
            ),
            fall=FallRule(
                root_height_fraction=fall.get("root_height_fraction"),
                sustain=float(fall.get("sustain", 0.2)),
                contact_links=tuple(fall.get("contact_links", ())),
                success_pose_error=fall.get("success_pose_error"),
            ),
            rest_qpos=None if rest is None else tuple(float(x) for x in rest),
        )
    except (KeyError, TypeError) as e:
        raise SpecError(f"malformed character file: {e!r}") from e


def load_character(name_or_path) -> CharacterSpec:
    """Load a character by bundled name (``pendulum``) or file path."""
    path = Path(name_or_path)
    if not path.exists():
        bundled = DATA_DIR / f"{name_or_path}.yaml"
        if not bundled.exists():
            raise SpecError(f"character not found: {name_or_path}")
        path = bundled
    with open(path) as f:
        try:
            doc = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise SpecError(f"{path}: {e}") from e
    return spec_from_dict(doc)


def bundled_characters() -> list[str]:
    return sorted(p.stem for p in DATA_DIR.glob("*.yaml"))
