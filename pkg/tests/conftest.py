import numpy as np
import pytest

from mimicsim.reference import generate_reference
from mimicsim.sim import load_character, spec_from_dict

CHARACTERS = ("pendulum", "acrobot", "walker", "hopper")


@pytest.fixture(scope="session")
def specs():
    return {name: load_character(name) for name in CHARACTERS}


def sphere_spec(mass=2.0, radius=0.1, stiffness=1e4, damping=100.0, contact=True, gravity=9.81):
    """One free-floating sphere: a single contact point under its centre."""
    return spec_from_dict(
        {
            "format": "character/v1",
            "name": "sphere",
            "root": "free",
            "gravity": gravity,
            "links": [
                {
                    "name": "ball",
                    "parent": None,
                    "mass": mass,
                    "inertia": [0.4 * mass * radius**2] * 3,
                    "capsule": {"radius": radius, "half_length": 0.0},
                }
            ],
            "contact": {"enabled": contact, "stiffness": stiffness, "damping": damping, "friction": 1.0},
        }
    )


def chain_spec(gravity=0.0, kp=0.0, kd=0.0):
    """Free-floating three-link chain with spherical and revolute joints, no contact."""
    link = {"mass": 1.0, "inertia": [0.02, 0.03, 0.01], "com": [0.0, 0.0, -0.15]}
    return spec_from_dict(
        {
            "format": "character/v1",
            "name": "chain",
            "root": "free",
            "gravity": gravity,
            "links": [
                {"name": "a", "parent": None, "mass": 2.0, "inertia": [0.05, 0.04, 0.03]},
                {
                    **link,
                    "name": "b",
                    "parent": "a",
                    "joint": {"type": "spherical", "offset": [0.1, 0.0, -0.1], "kp": kp, "kd": kd,
                              "limits": {"lo": -3.0, "hi": 3.0, "stiffness": 0.0}},
                },
                {
                    **link,
                    "name": "c",
                    "parent": "b",
                    "joint": {"type": "revolute", "axes": [[1, 0, 0]], "offset": [0.0, 0.0, -0.3], "kp": kp, "kd": kd,
                              "limits": {"lo": -3.0, "hi": 3.0, "stiffness": 0.0}},
                },
            ],
            "contact": {"enabled": False},
        }
    )


def random_states(spec, n, rng, joint_scale=0.2, vel_scale=0.3):
    q = np.tile(spec.default_qpos(), (n, 1))
    q[:, spec.n_root_q :] += joint_scale * rng.standard_normal((n, spec.n_act))
    if spec.root == "free":
        q[:, 3:7] += 0.05 * rng.standard_normal((n, 4))
        q[:, 3:7] /= np.linalg.norm(q[:, 3:7], axis=1, keepdims=True)
    v = vel_scale * rng.standard_normal((n, spec.nv))
    return q, v


# reference motions used across the suite and by the acceptance runs
REFERENCES = {
    "pendulum": ("spline-track", {"amplitude": 1.5, "period": 2.0}),
    "acrobot": ("spline-track", {"amplitude": [1.0, 1.2], "phase": [0.0, 1.0], "period": 2.0}),
    "walker": (
        "oracle-pd",
        {
            "center": [0.35, -0.5, -0.15, -0.5],
            "amplitude": [0.25, -0.4, 0.25, -0.4],
            "period": 2.0,
            "settle": 1.0,
            "warmup": 4.0,
            "cyclic": True,
        },
    ),
    "hopper": (
        "oracle-pd",
        {"amplitude": [0.5, 0.7], "phase": [0.0, 1.0], "period": 2.0, "settle": 1.0, "warmup": 4.0, "cyclic": True},
    ),
}


@pytest.fixture(scope="session")
def motions(specs):
    return {name: generate_reference(specs[name], *REFERENCES[name]) for name in CHARACTERS}


# acceptance verdicts, one line per criterion, repeated in the terminal summary
VERDICTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[VERDICTS] = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
