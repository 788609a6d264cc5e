import json
import math

import numpy as np
import pytest

from mimicsim import evalkit as ek
from mimicsim import mathcore as mc
from mimicsim import reference as rf
from mimicsim.sim import CONTROL_DT, simulate


def _two_frame(spec):
    q = np.tile(spec.default_qpos(), (2, 1))
    return rf.make_motion(spec, q, np.zeros((2, spec.nv)))


def _rewrite(path, k, edit):
    lines = path.read_text().splitlines()
    rec = json.loads(lines[k + 1])
    edit(rec)
    lines[k + 1] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------ file io


def test_minimal_two_frame_file(specs, tmp_path):
    spec = specs["pendulum"]
    rf.save_motion(_two_frame(spec), tmp_path / "m.motion")
    m = rf.load_motion(tmp_path / "m.motion")
    assert m.n_frames == 2
    assert m.cycle_time == pytest.approx(1 / 30, rel=1e-15)


def test_near_unit_quaternions_are_renormalized(specs, tmp_path):
    spec = specs["hopper"]
    p = tmp_path / "h.motion"
    rf.save_motion(_two_frame(spec), p)

    def shrink(rec):
        rec["qpos"][3:7] = [0.999 * x for x in rec["qpos"][3:7]]
        for link in rec["links"]:
            link["q"] = [0.999 * x for x in link["q"]]

    _rewrite(p, 1, shrink)
    m = rf.load_motion(p, spec)
    np.testing.assert_allclose(np.linalg.norm(m.qpos[:, 3:7], axis=1), 1.0, atol=1e-15)
    np.testing.assert_allclose(np.linalg.norm(m.links[..., 3:7], axis=-1), 1.0, atol=1e-15)


@pytest.mark.parametrize(
    "edit, needle",
    [
        (lambda r: r.__setitem__("qvel", [float("nan")]), "frame 1"),
        (lambda r: r.__setitem__("time", 0.0), "frame 1"),
        (lambda r: r.__setitem__("frame", 5), "frame 1"),
        (lambda r: r.__setitem__("qpos", [0.0, 1.0]), "frame 1"),
    ],
)
def test_bad_frames_are_rejected_with_index(specs, tmp_path, edit, needle):
    p = tmp_path / "m.motion"
    rf.save_motion(_two_frame(specs["pendulum"]), p)
    _rewrite(p, 1, edit)
    with pytest.raises(rf.MotionError, match=needle):
        rf.load_motion(p)


def test_header_mismatches_are_rejected(specs, tmp_path):
    p = tmp_path / "m.motion"
    rf.save_motion(_two_frame(specs["pendulum"]), p)
    with pytest.raises(rf.MotionError, match="link"):
        rf.load_motion(p, specs["acrobot"])
    lines = p.read_text().splitlines()
    lines[0] = lines[0].replace("motion/v1", "motion/v0")
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(rf.MotionError, match="format"):
        rf.load_motion(p)
    with pytest.raises(FileNotFoundError, match="nowhere.motion"):
        rf.load_motion(tmp_path / "nowhere.motion")


def test_stored_links_must_match_coordinates(specs, tmp_path):
    p = tmp_path / "m.motion"
    rf.save_motion(_two_frame(specs["pendulum"]), p)
    _rewrite(p, 1, lambda r: r["links"][0].__setitem__("p", [0.0, 0.0, 9.0]))
    with pytest.raises(rf.MotionError, match="frame 1"):
        rf.load_motion(p)


@pytest.mark.parametrize("name", ["pendulum", "walker", "hopper"])
def test_load_save_load_is_a_fixed_point(specs, motions, tmp_path, name):
    rf.save_motion(motions[name], tmp_path / "a.motion")
    m = rf.load_motion(tmp_path / "a.motion", specs[name])
    rf.save_motion(m, tmp_path / "b.motion")
    m2 = rf.load_motion(tmp_path / "b.motion", specs[name])
    rf.save_motion(m2, tmp_path / "c.motion")
    assert (tmp_path / "b.motion").read_bytes() == (tmp_path / "c.motion").read_bytes()
    assert (tmp_path / "a.motion").read_bytes() == (tmp_path / "b.motion").read_bytes()
    np.testing.assert_array_equal(m.qpos, motions[name].qpos)
    assert (m.actions is None) == (motions[name].actions is None)
    if m.actions is not None:
        np.testing.assert_array_equal(m.actions, motions[name].actions)


def test_cyclic_boundary_is_enforced(specs):
    spec = specs["acrobot"]
    q = np.zeros((3, 2))
    q[-1] = [0.2, 0.0]
    with pytest.raises(rf.MotionError, match="cyclic boundary"):
        rf.make_motion(spec, q, np.zeros((3, 2)), cyclic=True)
    q[-1] = [0.04, 0.0]  # inside the 0.05 rad tolerance
    rf.make_motion(spec, q, np.zeros((3, 2)), cyclic=True)


# ------------------------------------------------------------------- lookup


def test_time_zero_is_first_frame(specs, motions):
    for name in ("acrobot", "hopper"):
        s = rf.reference_at(motions[name], 0.0, specs[name])
        np.testing.assert_array_equal(s.qpos, motions[name].qpos[0])
        np.testing.assert_array_equal(s.qvel, motions[name].qvel[0])
        assert s.phase == 0.0


def test_frame_times_are_exact(specs, motions):
    m = motions["walker"]
    for k in (1, 7, 59):
        s = rf.reference_at(m, k / 30, specs["walker"])
        np.testing.assert_array_equal(s.qpos, m.qpos[k])


def test_cyclic_wrap_applies_cycle_offset(specs, motions):
    spec, m = specs["walker"], motions["walker"]
    assert m.cycle_offset[0] != 0.0  # the gait drifts, so the wrap has something to add
    s = rf.reference_at(m, m.cycle_time, spec)
    want = m.qpos[0].copy()
    want[0] += m.cycle_offset[0]
    np.testing.assert_allclose(s.qpos, want, atol=1e-12)
    s3 = rf.reference_at(m, 3 * m.cycle_time + 5 / 30, spec)
    want = m.qpos[5].copy()
    want[0] += 3 * m.cycle_offset[0]
    np.testing.assert_allclose(s3.qpos, want, atol=1e-12)


def test_midpoint_interpolation(specs, motions):
    for name in ("acrobot", "hopper"):
        spec, m = specs[name], motions[name]
        s = rf.reference_at(m, 1.5 / 30, spec)
        lin = list(range(spec.nq)) if spec.root != "free" else [0, 1, 2] + list(range(7, spec.nq))
        np.testing.assert_allclose(s.qpos[lin], 0.5 * (m.qpos[1, lin] + m.qpos[2, lin]), atol=1e-12)
        np.testing.assert_allclose(s.qvel, 0.5 * (m.qvel[1] + m.qvel[2]), atol=1e-12)
        assert s.phase == pytest.approx(1.5 / 30 / m.cycle_time, abs=1e-15)


def test_orientation_interpolation_is_shortest_arc(specs, motions):
    spec, m = specs["hopper"], motions["hopper"]
    s = rf.reference_at(m, 1.5 / 30, spec)
    a, b = m.qpos[1, 3:7], m.qpos[2, 3:7]
    half = mc.quat_geodesic_angle(a, b) / 2
    assert mc.quat_geodesic_angle(a, s.qpos[3:7]) == pytest.approx(half, abs=1e-7)
    assert mc.quat_geodesic_angle(b, s.qpos[3:7]) == pytest.approx(half, abs=1e-7)


@pytest.mark.parametrize("name", ["acrobot", "walker", "hopper"])
def test_reference_is_periodic_in_root_local_coordinates(specs, motions, name):
    spec, m = specs[name], motions[name]
    for t in (0.0, 0.37, 1.1, 1.95):
        a = rf.reference_at(m, t, spec)
        b = rf.reference_at(m, t + m.cycle_time, spec)
        ra = ek.root_relative_positions(spec, a.qpos)
        rb = ek.root_relative_positions(spec, b.qpos)
        np.testing.assert_allclose(ra, rb, atol=1e-9)
        np.testing.assert_allclose(a.qvel, b.qvel, atol=1e-9)


def test_acyclic_lookup_bounds(specs):
    m = _two_frame(specs["pendulum"])
    rf.reference_at(m, 1 / 30)
    with pytest.raises(ValueError, match="beyond"):
        rf.reference_at(m, 2 / 30)
    with pytest.raises(ValueError):
        rf.reference_at(m, -0.1)


def test_lookup_is_deterministic(specs, motions):
    a = rf.control_table(motions["hopper"], specs["hopper"], 90, 0.4)
    b = rf.control_table(motions["hopper"], specs["hopper"], 90, 0.4)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.kin, b.kin)


# --------------------------------------------------------------- generators


def test_zero_amplitude_sinusoid_is_rest_pose(specs):
    spec = specs["pendulum"]
    m = rf.generate_reference(spec, "spline-track", {"amplitude": 0.0, "period": 1.0})
    np.testing.assert_array_equal(m.qpos, np.tile(spec.default_qpos(), (m.n_frames, 1)))
    np.testing.assert_array_equal(m.qvel, 0.0)


def test_spline_velocities_match_central_differences(specs):
    spec = specs["acrobot"]
    amp, period = np.array([1.0, 1.2]), 2.0
    m = rf.generate_reference(spec, "spline-track", {"amplitude": amp.tolist(), "phase": [0.0, 1.0], "period": period})
    dt = 1 / m.fps
    fd = (m.qpos[2:] - m.qpos[:-2]) / (2 * dt)
    w = 2 * math.pi / period
    bound = amp * w**3 * dt**2 / 6  # leading truncation term of the central difference
    err = np.abs(fd - m.qvel[1:-1])
    assert np.all(err <= bound * 1.001 + 1e-12)
    assert err.max() > 0.1 * bound.max()  # the bound is tight, so this is really O(dt^2)


def test_spline_beyond_limits_is_rejected(specs):
    with pytest.raises(rf.MotionError, match="exceeds limits"):
        rf.generate_reference(specs["pendulum"], "spline-track", {"amplitude": 3.5})
    with pytest.raises(rf.MotionError):
        rf.generate_reference(specs["pendulum"], "nope", {})
    with pytest.raises(rf.MotionError, match="period"):
        rf.generate_reference(specs["pendulum"], "spline-track", {"amplitude": 0.5, "period": -1.0})


@pytest.mark.parametrize("name", ["walker", "hopper"])
def test_oracle_pd_replays_itself_open_loop(specs, motions, name):
    spec, m = specs[name], motions[name]
    q, v = m.qpos[0], m.qvel[0]
    for k in range(30):  # 1 s
        q, v = simulate(spec, q, v, m.actions[k])
        np.testing.assert_allclose(q, m.qpos[k + 1], atol=1e-6)
        np.testing.assert_allclose(v, m.qvel[k + 1], atol=1e-6)


def test_oracle_pd_cycle_closes(specs, motions):
    for name in ("walker", "hopper"):
        m = motions[name]
        assert m.cyclic and m.n_frames == 61
        assert m.meta["generator"] == "oracle-pd"


def test_cycle_frames(motions, specs):
    assert rf.cycle_frames(motions["pendulum"]) == 60
    assert rf.cycle_frames(_two_frame(specs["pendulum"])) == 2
    assert CONTROL_DT * 60 == pytest.approx(motions["pendulum"].cycle_time)
