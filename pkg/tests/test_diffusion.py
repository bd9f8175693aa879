import numpy as np
import pytest

from armplan.diffusion import (NoiseSchedule, TrajectoryCodec, TrajectoryDiffusion,
                               Whitener, bc_from_memory, codec_for_scene,
                               dct_basis, fill_expert_memory, forward_noise,
                               hybrid_action, init_denoiser, make_schedule,
                               predict_noise, sample_trajectory,
                               solve_goal_config, synthesize_demos, train_bc,
                               train_denoiser, train_trajectory_diffusion,
                               trajectory_to_transitions)
from armplan.environment import Pose, load_scene, observe, step, verify_trajectory
from armplan.errors import NoDataError
from armplan.nets import forward, init_mlp

from conftest import make_scene, box_dict


@pytest.fixture(scope="module")
def desk():
    return load_scene("desk3r")


# --- schedule ------------------------------------------------------------

def test_schedule_endpoints_and_range():
    sch = make_schedule(80)
    assert sch.betas[0] == pytest.approx(1e-4)
    assert sch.betas[-1] == pytest.approx(0.02)
    assert np.all((sch.betas > 0) & (sch.betas < 1))
    assert sch.n_steps == 80


def test_alpha_bars_strictly_decreasing():
    sch = make_schedule(80)
    assert np.all(np.diff(sch.alpha_bars) < 0)
    assert sch.alpha_bar(0) == 1.0
    assert sch.alpha_bar(1) == pytest.approx(1 - 1e-4)


def test_posterior_beta_bounds():
    sch = make_schedule(50)
    for t in range(2, 51):
        pb = sch.posterior_beta(t)
        assert 0.0 < pb <= sch.betas[t - 1] + 1e-15


# --- forward_noise -----------------------------------------------------------

def test_forward_noise_identity_at_full_alpha():
    sch = NoiseSchedule(betas=np.array([0.0, 0.5]), alphas=np.array([1.0, 0.5]),
                        alpha_bars=np.array([1.0, 0.5]))
    x0 = np.linspace(-1, 1, 6)
    eps = np.ones(6)
    assert np.allclose(forward_noise(x0, 1, eps, sch), x0)


def test_forward_noise_pure_noise_at_zero_alpha():
    sch = NoiseSchedule(betas=np.array([1.0 - 1e-18]), alphas=np.array([1e-18]),
                        alpha_bars=np.array([1e-18]))
    x0 = np.linspace(-1, 1, 6)
    eps = np.full(6, 0.37)
    assert np.allclose(forward_noise(x0, 1, eps, sch), eps, atol=1e-8)


def test_forward_noise_statistics():
    sch = make_schedule(80)
    rng = np.random.default_rng(0)
    x0 = np.tile(np.linspace(-0.8, 0.8, 12), (10_000, 1))
    for t in (5, 40, 80):
        eps = rng.standard_normal(x0.shape)
        xt = forward_noise(x0, t, eps, sch)
        abar = sch.alpha_bar(t)
        want_mean = np.sqrt(abar) * x0[0]
        se_mean = np.sqrt(1 - abar) / np.sqrt(10_000)
        assert np.all(np.abs(xt.mean(axis=0) - want_mean) < 3 * se_mean + 1e-12)
        var = xt.var(axis=0)
        se_var = (1 - abar) * np.sqrt(2.0 / (10_000 - 1))
        assert np.all(np.abs(var - (1 - abar)) < 3 * se_var)


def test_forward_noise_shape_guard():
    sch = make_schedule(10)
    with pytest.raises(ValueError):
        forward_noise(np.zeros(4), 1, np.zeros(5), sch)


# --- exact-noise reverse step ---------------------------------------------------

def test_reverse_step_with_true_noise_recovers_previous():
    # One deterministic reverse step using the true noise as the model's
    # prediction must invert the marginal means exactly.
    sch = make_schedule(40)
    rng = np.random.default_rng(1)
    x0 = rng.uniform(-1, 1, 24)
    for t in (2, 17, 40):
        eps = rng.standard_normal(24)
        xt = forward_noise(x0, t, eps, sch)
        alpha = sch.alphas[t - 1]
        abar = sch.alpha_bar(t)
        mean = (xt - (1 - alpha) / np.sqrt(1 - abar) * eps) / np.sqrt(alpha)
        want = np.sqrt(sch.alpha_bar(t - 1)) * x0 + \
            np.sqrt(1 - sch.alpha_bar(t - 1)) * eps * _gamma(sch, t)
        assert np.max(np.abs(mean - want)) < 1e-10


def _gamma(sch, t):
    # coefficient of eps in the exact posterior mean when eps_hat == eps
    abar_prev = sch.alpha_bar(t - 1)
    abar = sch.alpha_bar(t)
    alpha = sch.alphas[t - 1]
    return (np.sqrt(1 - abar) - (1 - alpha) / np.sqrt(1 - abar)) / \
        (np.sqrt(alpha) * np.sqrt(1 - abar_prev))


# --- codec ---------------------------------------------------------------------

def test_codec_round_trip(desk):
    codec = codec_for_scene(desk, 80)
    rng = np.random.default_rng(2)
    traj = rng.uniform(desk.model.joint_limits[:, 0], desk.model.joint_limits[:, 1],
                       (80, 3))
    flat = codec.encode(traj)
    assert flat.shape == (240,)
    assert np.all(np.abs(flat) <= 1.0)
    back = codec.decode(flat)
    assert np.max(np.abs(back - traj)) < 1e-12


def test_codec_decode_clips_to_limits(desk):
    codec = codec_for_scene(desk, 4)
    wild = np.full(12, 5.0)
    traj = codec.decode(wild)
    assert np.all(traj <= desk.model.joint_limits[:, 1] + 1e-12)
    assert np.all(traj >= desk.model.joint_limits[:, 0] - 1e-12)


# --- denoiser training -----------------------------------------------------------

def test_initial_loss_near_trajectory_dimension():
    rng = np.random.default_rng(3)
    dim = 60
    demos = rng.uniform(-1, 1, (10, dim))
    model = init_denoiser(dim, hidden=(32, 32), rng=rng)
    sch = make_schedule(20)
    losses = train_denoiser(demos, model, sch, iterations=30, rng=rng)
    # untrained net ~ zero-ish output: E||eps - 0||^2 = dim
    assert abs(np.mean(losses[:5]) - dim) / dim < 0.1


def test_training_reduces_loss():
    rng = np.random.default_rng(4)
    dim = 30
    demos = rng.uniform(-0.8, 0.8, (8, dim))
    model = init_denoiser(dim, hidden=(64, 64), rng=rng)
    sch = make_schedule(16)
    losses = train_denoiser(demos, model, sch, iterations=1200, rng=rng)
    assert np.mean(losses[-100:]) < 0.5 * np.mean(losses[:100])


def test_training_deterministic_under_seed():
    dim = 12
    demos = np.random.default_rng(5).uniform(-1, 1, (4, dim))
    out = []
    for _ in range(2):
        rng = np.random.default_rng(11)
        model = init_denoiser(dim, hidden=(16,), rng=rng)
        losses = train_denoiser(demos, model, make_schedule(8), iterations=50, rng=rng)
        out.append((losses.copy(), forward(model, np.zeros(dim + 16))))
    assert np.array_equal(out[0][0], out[1][0])
    assert np.array_equal(out[0][1], out[1][1])


def test_empty_demos_raise():
    with pytest.raises(NoDataError):
        train_denoiser(np.zeros((0, 8)), init_denoiser(8, hidden=(8,)),
                       make_schedule(4), 10, np.random.default_rng(0))


def test_memorizes_single_demo(desk):
    rng = np.random.default_rng(6)
    line = np.linspace(desk.q_home, desk.q_home + 0.3, 20)
    model, _ = train_trajectory_diffusion(desk, np.tile(line, (4, 1, 1)), rng,
                                          n_steps=20, hidden=(64, 64),
                                          iterations=1500)
    flat = model.codec.encode(line)
    devs = []
    for _ in range(8):
        samp = sample_trajectory(model, rng)
        devs.append(np.abs(model.codec.encode(samp) - flat).mean())
    assert np.mean(devs) < 0.1


def test_sample_shape_and_limits(desk):
    rng = np.random.default_rng(7)
    demos = np.stack([np.linspace(desk.q_home, desk.q_home + 0.2, 10)] * 3)
    model, _ = train_trajectory_diffusion(desk, demos, rng, n_steps=6,
                                          hidden=(16,), iterations=30)
    traj = sample_trajectory(model, rng)
    assert traj.shape == (10, 3)
    assert np.all(traj >= desk.model.joint_limits[:, 0] - 1e-12)
    assert np.all(traj <= desk.model.joint_limits[:, 1] + 1e-12)


def test_whitener_round_trip():
    rng = np.random.default_rng(70)
    w = Whitener.fit(rng.normal(0, 1, (5, 60)), 20, 3)
    x = rng.normal(0, 1, 60)
    assert np.allclose(w.decode(w.encode(x)), x, atol=1e-10)
    xb = rng.normal(0, 1, (7, 60))
    assert np.allclose(w.decode(w.encode(xb)), xb, atol=1e-10)


def test_dct_basis_orthonormal():
    b = dct_basis(24)
    assert np.max(np.abs(b @ b.T - np.eye(24))) < 1e-12


def test_diffusion_bundle_round_trip(tmp_path, desk):
    rng = np.random.default_rng(71)
    demos = np.stack([np.linspace(desk.q_home, desk.q_home + 0.2, 10)] * 3)
    model, _ = train_trajectory_diffusion(desk, demos, rng, n_steps=6,
                                          hidden=(16,), iterations=30)
    path = tmp_path / "ed2.npz"
    model.save(path)
    loaded = TrajectoryDiffusion.load(path)
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    assert np.array_equal(model.sample(r1), loaded.sample(r2))


# --- conversion ------------------------------------------------------------------

def test_constant_trajectory_gives_zero_actions(desk):
    from armplan.environment import tcp_pose_of
    traj = np.tile(desk.q_home, (6, 1))
    goal = Pose(*tcp_pose_of(desk, desk.q_home))
    records = trajectory_to_transitions(desk, traj, goal)
    assert len(records) == 5
    for tr in records:
        assert np.array_equal(tr.a, np.zeros(3))


def test_transitions_chain_and_replay_exactly(desk):
    rng = np.random.default_rng(8)
    line = np.linspace(desk.q_home, desk.q_home + np.array([-0.3, 0.25, 0.2]), 15)
    from armplan.environment import tcp_pose_of
    goal = Pose(*tcp_pose_of(desk, line[-1]))
    records = trajectory_to_transitions(desk, line, goal)
    assert len(records) == 14
    for first, second in zip(records[:-1], records[1:]):
        assert np.array_equal(first.s_next.vector(), second.s.vector())
    # rewards replay bit-exactly through the task space
    for tr in records:
        _, _, r, _ = step(desk, tr.s.q, tr.a, goal)
        assert r == tr.r


def test_colliding_trajectory_rejected():
    scene = make_scene(boxes=[box_dict([0.5, -0.2, -0.2], [0.9, 0.2, 0.2])])
    traj = np.stack([np.array([a, 0.0, 0.0]) for a in np.linspace(-0.5, 0.5, 12)])
    from armplan.environment import tcp_pose_of
    goal = Pose(*tcp_pose_of(scene, traj[-1]))
    with pytest.raises(ValueError):
        trajectory_to_transitions(scene, traj, goal)


# --- BC and hybrid policy ---------------------------------------------------------

def test_bc_overfits_linearly_realizable_pairs():
    rng = np.random.default_rng(9)
    teacher = init_mlp((4, 2), ("tanh",), rng)
    states = rng.normal(0, 1, (3, 4))
    actions = forward(teacher, states)
    net, losses = train_bc(states, actions, rng, hidden=(32,), iterations=4000)
    assert losses[-1] < 1e-4


def test_bc_outputs_bounded():
    rng = np.random.default_rng(10)
    states = rng.normal(0, 1, (50, 4))
    actions = np.clip(rng.normal(0, 0.5, (50, 2)), -0.99, 0.99)
    net, _ = train_bc(states, actions, rng, hidden=(16,), iterations=200)
    out = forward(net, rng.normal(0, 3, (100, 4)))
    assert np.all(np.abs(out) < 1.0)


def test_bc_deterministic_under_seed():
    states = np.random.default_rng(11).normal(0, 1, (10, 3))
    actions = np.random.default_rng(12).uniform(-0.5, 0.5, (10, 2))
    nets = []
    for _ in range(2):
        rng = np.random.default_rng(21)
        net, _ = train_bc(states, actions, rng, hidden=(8,), iterations=100)
        nets.append(net)
    for l0, l1 in zip(nets[0].layers, nets[1].layers):
        assert np.array_equal(l0.w, l1.w)


def test_hybrid_action_regimes():
    bc = np.array([0.3, -0.2])
    drl = np.array([0.5, 0.5])
    early = hybrid_action(bc, drl, step_index=10, base_steps=80, phi=0.1)
    assert np.allclose(early, bc + 0.1 * drl)
    late = hybrid_action(bc, drl, step_index=80, base_steps=80, phi=0.1)
    assert np.allclose(late, 0.1 * drl)
    assert np.max(np.abs(late)) <= 0.1 + 1e-15
    # zero residual: pure base policy before the horizon
    assert np.allclose(hybrid_action(bc, np.zeros(2), 5, 80, 0.1), bc)
    with pytest.raises(ValueError):
        hybrid_action(bc, drl, 0, 80, 0.0)


def test_hybrid_action_clipped():
    out = hybrid_action(np.array([0.99]), np.array([1.0]), 0, 10, 0.5)
    assert out[0] == 1.0


# --- demo synthesis ----------------------------------------------------------------

def test_synthesize_demos_on_desk_scene(desk):
    rng = np.random.default_rng(13)
    demos, goals = synthesize_demos(desk, length=40, rng=rng, grid=2)
    assert demos.shape == (4, 40, 3)
    for demo, goal in zip(demos, goals):
        ok, _ = verify_trajectory(desk, demo)
        assert ok
        s = observe(desk, demo[-1], goal)
        assert s.reached
        assert np.array_equal(demo[0], desk.q_home)


def test_solve_goal_config_lands_on_pose(desk):
    rng = np.random.default_rng(14)
    goal = Pose(np.array([0.65, 0.45, 0.0]), desk.target.orientation)
    q = solve_goal_config(desk, goal, rng)
    assert q is not None
    s = observe(desk, q, goal)
    assert s.reached
