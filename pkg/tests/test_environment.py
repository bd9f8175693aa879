import numpy as np
import pytest

from armplan.environment import (Pose, build_scene, candidate_rewards,
                                 euler_zyx, load_scene, min_clearance, observe,
                                 pose_reward, rot_zyx, sample_goal, step,
                                 uoar_reward, verify_trajectory, wrap_angle)
from armplan.errors import ConfigError
from armplan.geometry import Segment, segment_box_distance
from armplan.kinematics import link_segments, tcp_pose

from conftest import box_dict, make_scene


def goal_at(scene, q):
    """Goal pose placed exactly at the tool pose of config q."""
    pos, rot = tcp_pose(scene.model, q)
    return Pose(pos, rot)


# --- angles ------------------------------------------------------------------

def test_wrap_angle_range():
    xs = np.linspace(-10, 10, 2001)
    w = wrap_angle(xs)
    assert np.all(w > -np.pi - 1e-12) and np.all(w <= np.pi + 1e-12)
    assert np.allclose(np.cos(w), np.cos(xs)) and np.allclose(np.sin(w), np.sin(xs))


def test_euler_round_trip():
    rng = np.random.default_rng(3)
    for _ in range(200):
        e = rng.uniform([-np.pi, -np.pi / 2 + 0.05, -np.pi], [np.pi, np.pi / 2 - 0.05, np.pi])
        back = euler_zyx(rot_zyx(e))
        assert np.max(np.abs(back - e)) < 1e-9


# --- scene construction ------------------------------------------------------

def test_expanded_boxes_use_radius_plus_offset():
    scene = make_scene(boxes=[box_dict([0, 0, 0], [1, 1, 1])], safety_offset=0.05)
    margin = scene.model.link_radius + 0.05
    assert np.allclose(scene.expanded_boxes[0].lo, np.array([0, 0, 0]) - margin)
    assert np.allclose(scene.expanded_boxes[0].hi, np.array([1, 1, 1]) + margin)


def test_default_scales():
    scene = make_scene()
    assert scene.position_scale == pytest.approx(2 * 1.2)
    assert scene.orientation_scale == pytest.approx(3 * np.pi)


def test_config_error_paths():
    with pytest.raises(ConfigError, match="target_region"):
        build_scene({"manipulator": "planar3r", "boxes": []})
    with pytest.raises(ConfigError, match=r"boxes\[0\]"):
        build_scene({"manipulator": "planar3r",
                     "boxes": [{"min": [0, 0, 0]}],
                     "target_region": {"min": [0, 0, 0], "max": [1, 1, 1]}})
    with pytest.raises(ConfigError, match="dq_max"):
        make_scene(dq_max=-1.0)
    with pytest.raises(ConfigError, match="manipulator"):
        build_scene({"target_region": {"min": [0, 0, 0], "max": [1, 1, 1]}})


def test_bundled_scene_presets_load():
    for name in ("desk3r", "desk3r_8box", "desk3r_16box"):
        scene = load_scene(name)
        assert len(scene.raw_boxes) in (4, 8, 16)
        ok, _ = verify_trajectory(scene, [scene.q_home])
        assert ok, f"home config must be collision-free in {name}"


# --- observe -----------------------------------------------------------------

def test_observe_at_goal(empty_scene):
    q = np.array([0.3, 0.4, -0.2])
    goal = goal_at(empty_scene, q)
    s = observe(empty_scene, q, goal)
    assert np.max(np.abs(s.dp)) < 1e-12
    assert np.max(np.abs(s.do)) < 1e-12
    assert s.reached


def test_reached_flag_definition(empty_scene):
    rng = np.random.default_rng(8)
    for _ in range(200):
        q = rng.uniform(-3, 3, 3)
        goal = sample_goal(empty_scene, rng)
        s = observe(empty_scene, q, goal)
        e_p = float(np.linalg.norm(s.dp))
        e_o = float(np.abs(s.do).sum())
        assert s.reached == (e_p <= empty_scene.e_p_max and e_o <= empty_scene.e_o_max)
        assert e_p >= 0 and e_o >= 0


def test_observe_tool_pose_consistency(empty_scene):
    rng = np.random.default_rng(10)
    for _ in range(100):
        q = rng.uniform(-3, 3, 3)
        s = observe(empty_scene, q, sample_goal(empty_scene, rng))
        pos, rot = tcp_pose(empty_scene.model, q)
        assert np.allclose(s.tcp.position, pos)
        assert np.allclose(s.tcp.rotation, rot)


def test_state_vector_layout(empty_scene):
    s = observe(empty_scene, np.zeros(3), sample_goal(empty_scene, np.random.default_rng(0)))
    v = s.vector()
    assert v.shape == (3 + 6 + 6 + 3 + 3 + 1,)
    assert v[-1] in (0.0, 1.0)


# --- uoar_reward -------------------------------------------------------------

def test_uoar_zero_when_clear(boxy_scene):
    assert uoar_reward(boxy_scene, boxy_scene.q_home) == 0.0


def test_uoar_minus_one_when_fully_buried():
    scene = make_scene(boxes=[box_dict([-2, -2, -2], [2, 2, 2])])
    assert uoar_reward(scene, np.zeros(3)) == -1.0


def test_uoar_range_and_mc_oracle():
    scene = make_scene(boxes=[
        box_dict([0.2, -0.3, -0.2], [0.7, 0.4, 0.2]),
        box_dict([-0.9, -0.5, -0.1], [-0.2, 0.5, 0.1]),
        box_dict([0.1, 0.5, -0.3], [0.9, 1.1, 0.3]),
    ])
    rng = np.random.default_rng(14)
    for _ in range(60):
        q = rng.uniform(-3, 3, 3)
        got = uoar_reward(scene, q)
        assert -1.0 <= got <= 0.0
        # Monte-Carlo oracle: per-segment per-box evenly sampled in-box fraction.
        segs = link_segments(scene.model, q)
        total_len = sum(s.length for s in segs)
        overlap = 0.0
        lam = np.linspace(0.0, 1.0, 100_000)
        for s in segs:
            pts = s.start[None, :] + (s.end - s.start)[None, :] * lam[:, None]
            for b in scene.expanded_boxes:
                inside = np.all((pts >= b.lo) & (pts <= b.hi), axis=1)
                overlap += inside.mean() * s.length
        want = -min(overlap / total_len, 1.0)
        assert got == pytest.approx(want, abs=1e-3)


def test_enlarging_boxes_never_raises_uoar():
    rng = np.random.default_rng(15)
    base = [box_dict([0.2, -0.3, -0.2], [0.7, 0.4, 0.2])]
    small = make_scene(boxes=base, safety_offset=0.02)
    big = make_scene(boxes=base, safety_offset=0.30)
    for _ in range(100):
        q = rng.uniform(-3, 3, 3)
        assert uoar_reward(big, q) <= uoar_reward(small, q) + 1e-12


# --- pose_reward -------------------------------------------------------------

def test_pose_reward_at_goal(empty_scene):
    q = np.array([0.5, -0.3, 0.1])
    goal = goal_at(empty_scene, q)
    # e_p = e_o = 0: both aux bands active plus the goal bonus
    assert pose_reward(empty_scene, q, goal) == pytest.approx(0.25 + 0.25 + 1.0)


def test_pose_reward_outside_bands(empty_scene):
    q = np.zeros(3)
    pos, rot = tcp_pose(empty_scene.model, q)
    goal_pos = pos + np.array([0.5 * empty_scene.position_scale, 0.0, 0.0])
    goal_rot = rot @ rot_zyx([0.3 * empty_scene.orientation_scale, 0.0, 0.0])
    r = pose_reward(empty_scene, q, Pose(goal_pos, goal_rot))
    assert r == pytest.approx(-(0.5 + 0.3), abs=1e-9)


def test_pose_reward_monotone_in_position_error(empty_scene):
    q = np.zeros(3)
    pos, rot = tcp_pose(empty_scene.model, q)
    goal_rot = rot @ rot_zyx([0.3 * empty_scene.orientation_scale, 0.0, 0.0])
    values = []
    for e_p in np.linspace(1.0, 0.0, 41):
        goal = Pose(pos + np.array([e_p * empty_scene.position_scale, 0, 0]), goal_rot)
        values.append(pose_reward(empty_scene, q, goal))
    assert np.all(np.diff(values) >= -1e-12)


# --- step --------------------------------------------------------------------

def test_zero_action_keeps_pose(boxy_scene):
    rng = np.random.default_rng(20)
    goal = sample_goal(boxy_scene, rng)
    q = boxy_scene.q_home
    s = observe(boxy_scene, q, goal)
    q2, s2, r, done = step(boxy_scene, q, np.zeros(3), goal, 1)
    assert np.array_equal(q2, q)
    assert np.array_equal(s2.vector(), s.vector())
    assert not done


def test_zeta_zero_reduces_to_pose_reward():
    scene = make_scene(boxes=[box_dict([0.2, -0.3, -0.2], [0.7, 0.4, 0.2])], zeta=0.0)
    rng = np.random.default_rng(21)
    goal = sample_goal(scene, rng)
    q = rng.uniform(-2, 2, 3)
    a = rng.uniform(-0.05, 0.05, 3)
    q2, _, r, _ = step(scene, q, a, goal, 1)
    assert r == pytest.approx(pose_reward(scene, q2, goal), abs=1e-12)


def test_reward_composition_with_unit_weight():
    scene = make_scene(boxes=[box_dict([0.2, -0.3, -0.2], [0.7, 0.4, 0.2])], zeta=1.0)
    rng = np.random.default_rng(22)
    for _ in range(50):
        goal = sample_goal(scene, rng)
        q = rng.uniform(-2, 2, 3)
        a = rng.uniform(-0.05, 0.05, 3)
        q2, _, r, _ = step(scene, q, a, goal, 1)
        assert r == pytest.approx(pose_reward(scene, q2, goal) + uoar_reward(scene, q2), abs=1e-12)


def test_step_is_pure_and_bitwise_repeatable(boxy_scene):
    rng = np.random.default_rng(23)
    goal = sample_goal(boxy_scene, rng)
    q = rng.uniform(-2, 2, 3)
    a = rng.uniform(-0.05, 0.05, 3)
    first = step(boxy_scene, q, a, goal, 5)
    for _ in range(10):
        q2, s2, r, done = step(boxy_scene, q, a, goal, 5)
        assert np.array_equal(q2, first[0])
        assert np.array_equal(s2.vector(), first[1].vector())
        assert r == first[2] and done == first[3]


def test_joint_limits_respected(boxy_scene):
    limits = boxy_scene.model.joint_limits
    q = limits[:, 1].copy()  # start at the upper limits
    goal = sample_goal(boxy_scene, np.random.default_rng(1))
    q2, _, _, _ = step(boxy_scene, q, np.full(3, 0.05), goal, 1)
    assert np.all(q2 <= limits[:, 1]) and np.all(q2 >= limits[:, 0])


def test_action_clipped_to_dq_max(empty_scene):
    goal = sample_goal(empty_scene, np.random.default_rng(2))
    q = np.zeros(3)
    q2, _, _, _ = step(empty_scene, q, np.array([10.0, -10.0, 0.01]), goal, 1)
    assert np.allclose(q2, [0.05, -0.05, 0.01])


def test_done_at_max_steps(empty_scene):
    goal = sample_goal(empty_scene, np.random.default_rng(3))
    *_, done = step(empty_scene, np.zeros(3), np.zeros(3), goal, empty_scene.max_steps)
    assert done
    *_, done = step(empty_scene, np.zeros(3), np.zeros(3), goal, empty_scene.max_steps - 1)
    assert not done


def test_candidate_rewards_match_step(boxy_scene):
    rng = np.random.default_rng(24)
    for _ in range(20):
        goal = sample_goal(boxy_scene, rng)
        q = rng.uniform(-2, 2, 3)
        actions = rng.uniform(-0.06, 0.06, (7, 3))
        rewards, q_next = candidate_rewards(boxy_scene, q, goal, actions)
        for c in range(7):
            q2, _, r, _ = step(boxy_scene, q, actions[c], goal, 1)
            assert np.allclose(q_next[c], q2, atol=1e-15)
            assert rewards[c] == pytest.approx(r, abs=1e-12)


# --- sample_goal -------------------------------------------------------------

def test_goals_inside_region_with_fixed_orientation(boxy_scene):
    rng = np.random.default_rng(25)
    for _ in range(200):
        g = sample_goal(boxy_scene, rng)
        assert np.all(g.position >= boxy_scene.target.lo - 1e-12)
        assert np.all(g.position <= boxy_scene.target.hi + 1e-12)
        assert np.array_equal(g.rotation, boxy_scene.target.orientation)


# --- verify_trajectory / min_clearance ---------------------------------------

def test_verify_single_clear_config(boxy_scene):
    ok, totals = verify_trajectory(boxy_scene, [boxy_scene.q_home])
    assert ok and totals.shape == (1,) and totals[0] == 0.0


def test_verify_detects_pass_through():
    scene = make_scene(boxes=[box_dict([0.5, -0.2, -0.2], [0.9, 0.2, 0.2])])
    # Sweep the straight arm through the box.
    traj = np.stack([np.array([a, 0.0, 0.0]) for a in np.linspace(-1.0, 1.0, 30)])
    ok, totals = verify_trajectory(scene, traj)
    assert not ok
    assert totals.max() > 0


def test_verify_agrees_with_substep_uoar(boxy_scene):
    rng = np.random.default_rng(26)
    for _ in range(10):
        q0 = rng.uniform(-2, 2, 3)
        q1 = rng.uniform(-2, 2, 3)
        traj = np.stack([q0, q1])
        ok, _ = verify_trajectory(boxy_scene, traj)
        # Oracle: uoar_reward at a dense set of interpolated configs.
        n = int(np.ceil(np.max(np.abs(q1 - q0)) / boxy_scene.dq_max))
        clear = all(
            uoar_reward(boxy_scene, q0 + (q1 - q0) * i / n) == 0.0
            for i in range(n + 1)
        )
        assert ok == clear


def test_verify_dimension_mismatch(boxy_scene):
    with pytest.raises(ValueError):
        verify_trajectory(boxy_scene, np.zeros((5, 4)))


def test_min_clearance_zero_when_colliding():
    scene = make_scene(boxes=[box_dict([0.5, -0.2, -0.2], [0.9, 0.2, 0.2])])
    assert min_clearance(scene, [np.zeros(3)]) == pytest.approx(0.0, abs=1e-9)


def test_min_clearance_single_config_matches_geometry(boxy_scene):
    q = boxy_scene.q_home
    got = min_clearance(boxy_scene, [q])
    want = min(
        segment_box_distance(seg, box)
        for seg in link_segments(boxy_scene.model, q)
        for box in boxy_scene.raw_boxes
    )
    assert got == pytest.approx(want, abs=1e-9)


def test_min_clearance_matches_bruteforce_oracle(boxy_scene):
    rng = np.random.default_rng(27)
    traj = rng.uniform(-2, 2, (10, 3))
    got = min_clearance(boxy_scene, traj)
    best = np.inf
    lam = np.linspace(0, 1, 10_000)
    for q in traj:
        for seg in link_segments(boxy_scene.model, q):
            pts = seg.start[None, :] + (seg.end - seg.start)[None, :] * lam[:, None]
            for b in boxy_scene.raw_boxes:
                clamped = np.clip(pts, b.lo, b.hi)
                best = min(best, float(np.linalg.norm(pts - clamped, axis=1).min()))
    assert got == pytest.approx(best, abs=1e-3)
