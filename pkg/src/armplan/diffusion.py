"""Trajectory diffusion: multiply a few demonstrations into many.

A DDPM over fixed-length joint-configuration sequences, flattened and
normalized to [-1, 1] by the joint limits.  The denoiser is a
time-conditioned fully-connected network on the flattened trajectory
(sinusoidal time features), which keeps the reverse-process math intact
at small scale.  Generated trajectories are collision-filtered in the
task space, converted to replayable transitions for the expert memory,
and optionally distilled into a behavior-cloning base policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import environment as env
from .agent import ReplayMemory
from .errors import GenerationError, NoDataError
from .nets import (Mlp, adam_init, adam_step, backward_from_cache, forward,
                   forward_cached, init_mlp)

TIME_EMBED_DIM = 16


# ---------------------------------------------------------------------------
# Noise schedule and closed-form forward process
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise scales; index i corresponds to diffusion step t = i + 1."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.betas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative alpha with the t = 0 convention of exactly 1."""
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def posterior_beta(self, t: int) -> float:
        """Reverse-step variance beta_t * (1 - abar_{t-1}) / (1 - abar_t)."""
        return float(self.betas[t - 1] * (1.0 - self.alpha_bar(t - 1))
                     / (1.0 - self.alpha_bar(t)))


def make_schedule(n_steps: int, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule from beta_start to beta_end."""
    if n_steps < 1:
        raise ValueError("need at least one diffusion step")
    betas = np.linspace(beta_start, beta_end, n_steps)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))


def forward_noise(x0: np.ndarray, t, eps: np.ndarray,
                  schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    x0/eps may be a single flat trajectory or a batch; t an int or a
    per-row array of ints in 1..n_steps.
    """
    x0 = np.asarray(x0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {x0.shape}")
    t_idx = np.asarray(t, dtype=int) - 1
    abar = schedule.alpha_bars[t_idx]
    if x0.ndim == 2:
        abar = np.asarray(abar).reshape(-1, 1)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


# ---------------------------------------------------------------------------
# Trajectory normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrajectoryCodec:
    """Maps (length, dof) joint trajectories to flat normalized vectors."""

    length: int
    lo: np.ndarray
    hi: np.ndarray

    @property
    def dof(self) -> int:
        return len(self.lo)

    @property
    def dim(self) -> int:
        return self.length * self.dof

    def encode(self, traj: np.ndarray) -> np.ndarray:
        traj = np.asarray(traj, dtype=float).reshape(self.length, self.dof)
        norm = 2.0 * (traj - self.lo) / (self.hi - self.lo) - 1.0
        return norm.reshape(-1)

    def decode(self, flat: np.ndarray) -> np.ndarray:
        norm = np.clip(np.asarray(flat, dtype=float).reshape(self.length, self.dof),
                       -1.0, 1.0)
        return self.lo + (norm + 1.0) * 0.5 * (self.hi - self.lo)


def codec_for_scene(scene: env.Scene, length: int) -> TrajectoryCodec:
    limits = scene.model.joint_limits
    return TrajectoryCodec(length=int(length), lo=limits[:, 0].copy(),
                           hi=limits[:, 1].copy())


def dct_basis(length: int) -> np.ndarray:
    """Orthonormal DCT-II basis over the time axis, rows = modes."""
    n = np.arange(length)
    k = np.arange(length)[:, None]
    basis = np.cos(np.pi * (n + 0.5) * k / length)
    basis[0] *= np.sqrt(1.0 / length)
    basis[1:] *= np.sqrt(2.0 / length)
    return basis


@dataclass(frozen=True)
class Whitener:
    """Affine + orthonormal map between normalized trajectories and training space.

    Joint-limit normalization leaves demonstrations in a thin slab of
    [-1, 1]^dim, which starves the denoising signal.  Transforming each
    joint's sequence into an orthonormal cosine basis concentrates smooth
    trajectories into low-order coefficients (an isotropic Gaussian is
    invariant under the rotation, so the diffusion math is unchanged),
    and per-dimension standardization with a floor restores unit-order
    data variance where there is data variance at all.
    """

    length: int
    dof: int
    mean: np.ndarray        # (dim,) in coefficient space
    scale: np.ndarray       # (dim,) per-dimension, floored

    def _coeffs(self, flat: np.ndarray) -> np.ndarray:
        flat = np.asarray(flat, dtype=float)
        traj = flat.reshape(*flat.shape[:-1], self.length, self.dof)
        out = np.einsum("kl,...ld->...kd", dct_basis(self.length), traj)
        return out.reshape(*flat.shape[:-1], self.length * self.dof)

    def _from_coeffs(self, coeffs: np.ndarray) -> np.ndarray:
        coeffs = np.asarray(coeffs, dtype=float)
        c = coeffs.reshape(*coeffs.shape[:-1], self.length, self.dof)
        out = np.einsum("kl,...kd->...ld", dct_basis(self.length), c)
        return out.reshape(*coeffs.shape[:-1], self.length * self.dof)

    def encode(self, flat: np.ndarray) -> np.ndarray:
        return (self._coeffs(flat) - self.mean) / self.scale

    def decode(self, z: np.ndarray) -> np.ndarray:
        return self._from_coeffs(np.asarray(z, dtype=float) * self.scale + self.mean)

    @classmethod
    def fit(cls, flats: np.ndarray, length: int, dof: int,
            floor_frac: float = 1e-3) -> "Whitener":
        flats = np.atleast_2d(np.asarray(flats, dtype=float))
        basis = dct_basis(length)
        coeffs = np.stack([
            (basis @ f.reshape(length, dof)).reshape(-1) for f in flats
        ])
        mean = coeffs.mean(axis=0)
        std = coeffs.std(axis=0)
        floor = max(float(std.max()), 1e-9) * floor_frac
        return cls(length=length, dof=dof, mean=mean,
                   scale=np.maximum(std, floor))


# ---------------------------------------------------------------------------
# Denoiser
# ---------------------------------------------------------------------------

def time_embedding(t, n_steps: int) -> np.ndarray:
    """Sinusoidal features of the diffusion step, (TIME_EMBED_DIM,) or batched."""
    t = np.asarray(t, dtype=float)
    half = TIME_EMBED_DIM // 2
    freqs = np.exp(-np.log(10_000.0) * np.arange(half) / max(half - 1, 1))
    angles = t[..., None] * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)


def init_denoiser(traj_dim: int, hidden=(256, 256),
                  rng: np.random.Generator | None = None) -> Mlp:
    rng = rng if rng is not None else np.random.default_rng()
    sizes = (traj_dim + TIME_EMBED_DIM, *hidden, traj_dim)
    acts = ["relu"] * len(hidden) + ["identity"]
    return init_mlp(sizes, acts, rng)


def predict_noise(model: Mlp, x_t: np.ndarray, t, n_steps: int) -> np.ndarray:
    x_t = np.asarray(x_t, dtype=float)
    emb = time_embedding(t, n_steps)
    if x_t.ndim == 2 and emb.ndim == 1:
        emb = np.broadcast_to(emb, (x_t.shape[0], emb.shape[0]))
    return forward(model, np.concatenate([x_t, emb], axis=-1))


def train_denoiser(demos: np.ndarray, model: Mlp, schedule: NoiseSchedule,
                   iterations: int, rng: np.random.Generator,
                   batch_size: int = 32, lr: float = 1e-3) -> np.ndarray:
    """Noise-prediction training on flat normalized demonstrations.

    demos: (D, traj_dim).  Per iteration: sample demos with replacement,
    draw a uniform step t and Gaussian noise per sample, and regress the
    predicted noise to the drawn noise (squared-error summed over
    dimensions, averaged over the batch).  Returns the loss curve.
    """
    demos = np.atleast_2d(np.asarray(demos, dtype=float))
    if demos.shape[0] == 0:
        raise NoDataError("no demonstrations to train on")
    opt = adam_init(model)
    losses = np.empty(iterations)
    n = demos.shape[0]
    for it in range(iterations):
        idx = rng.integers(0, n, batch_size)
        x0 = demos[idx]
        t = rng.integers(1, schedule.n_steps + 1, batch_size)
        eps = rng.standard_normal(x0.shape)
        x_t = forward_noise(x0, t, eps, schedule)
        inp = np.concatenate([x_t, time_embedding(t, schedule.n_steps)], axis=1)
        pred, cache = forward_cached(model, inp)
        resid = pred - eps
        losses[it] = float((resid ** 2).sum(axis=1).mean())
        grads, _ = backward_from_cache(model, cache, 2.0 * resid / batch_size)
        adam_step(opt, model, grads, lr)
    return losses


@dataclass
class TrajectoryDiffusion:
    """Trained trajectory generator: denoiser, schedule, and codecs."""

    net: Mlp
    schedule: NoiseSchedule
    codec: TrajectoryCodec
    whitener: Whitener

    def sample(self, rng: np.random.Generator,
               deterministic: bool = False) -> np.ndarray:
        flat = sample_flat(self.net, self.schedule, self.codec.dim, rng,
                           deterministic)
        return self.codec.decode(self.whitener.decode(flat))

    def save(self, path) -> None:
        from .nets import save_checkpoint
        meta = {
            "kind": "trajectory_diffusion",
            "length": self.codec.length,
            "beta_start": float(self.schedule.betas[0]),
            "beta_end": float(self.schedule.betas[-1]),
            "n_steps": self.schedule.n_steps,
        }
        extra = {
            "codec_lo": self.codec.lo, "codec_hi": self.codec.hi,
            "whitener_mean": self.whitener.mean,
            "whitener_scale": self.whitener.scale,
            "betas": self.schedule.betas,
        }
        save_checkpoint(path, {"denoiser": self.net}, extra_meta=meta,
                        extra_arrays=extra)

    @classmethod
    def load(cls, path) -> "TrajectoryDiffusion":
        from .nets import load_checkpoint
        nets, meta, _, extra = load_checkpoint(path)
        if meta.get("kind") != "trajectory_diffusion":
            raise ValueError(f"{path} is not a trajectory-diffusion bundle")
        betas = extra["betas"]
        schedule = NoiseSchedule(betas=betas, alphas=1.0 - betas,
                                 alpha_bars=np.cumprod(1.0 - betas))
        codec = TrajectoryCodec(length=int(meta["length"]),
                                lo=extra["codec_lo"], hi=extra["codec_hi"])
        whitener = Whitener(length=int(meta["length"]),
                            dof=len(extra["codec_lo"]),
                            mean=extra["whitener_mean"],
                            scale=extra["whitener_scale"])
        return cls(net=nets["denoiser"], schedule=schedule, codec=codec,
                   whitener=whitener)


def train_trajectory_diffusion(scene: env.Scene, demos: np.ndarray,
                               rng: np.random.Generator, n_steps: int = 80,
                               hidden=(256, 256), iterations: int = 12_000,
                               batch_size: int = 32, lr: float = 1e-3,
                               beta_start: float = 1e-4,
                               beta_end: float = 0.02) -> tuple[TrajectoryDiffusion, np.ndarray]:
    """Fit the full generator to (D, length, dof) demonstrations."""
    demos = np.asarray(demos, dtype=float)
    if demos.ndim != 3 or demos.shape[0] == 0:
        raise NoDataError("demos must be a non-empty (D, length, dof) array")
    codec = codec_for_scene(scene, demos.shape[1])
    flats = np.stack([codec.encode(d) for d in demos])
    whitener = Whitener.fit(flats, codec.length, codec.dof)
    z = whitener.encode(flats)
    schedule = make_schedule(n_steps, beta_start, beta_end)
    net = init_denoiser(codec.dim, hidden=hidden, rng=rng)
    losses = train_denoiser(z, net, schedule, iterations, rng,
                            batch_size=batch_size, lr=lr)
    return TrajectoryDiffusion(net=net, schedule=schedule, codec=codec,
                               whitener=whitener), losses


def sample_trajectory(model: TrajectoryDiffusion, rng: np.random.Generator,
                      deterministic: bool = False) -> np.ndarray:
    """Ancestral sampling from pure noise; returns a (length, dof) trajectory.

    Uses the standard noise-parameterized posterior mean; the output is
    clipped to the normalized range and decoded to joint angles.
    """
    return model.sample(rng, deterministic)


def sample_flat(model: Mlp, schedule: NoiseSchedule, dim: int,
                rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
    x = rng.standard_normal(dim)
    for t in range(schedule.n_steps, 0, -1):
        eps_hat = predict_noise(model, x, t, schedule.n_steps)
        alpha = schedule.alphas[t - 1]
        abar = schedule.alpha_bar(t)
        mean = (x - (1.0 - alpha) / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
        if t > 1 and not deterministic:
            mean = mean + np.sqrt(schedule.posterior_beta(t)) * rng.standard_normal(dim)
        x = mean
    return x


# ---------------------------------------------------------------------------
# Conversion to expert transitions
# ---------------------------------------------------------------------------

def trajectory_to_transitions(scene: env.Scene, traj: np.ndarray,
                              goal: env.Pose) -> list:
    """Replay a joint trajectory into (s, a, r, s') records.

    Actions are consecutive joint deltas clipped to the per-step bound;
    states and rewards come from replaying those deltas through the task
    space, so stored rewards are exactly reproducible.  Raises ValueError
    if the trajectory or its replayed path touches an expanded box.
    """
    traj = np.asarray(traj, dtype=float)
    ok, _ = env.verify_trajectory(scene, traj)
    if not ok:
        raise ValueError("trajectory collides; refusing to convert")
    deltas = np.clip(np.diff(traj, axis=0), -scene.dq_max, scene.dq_max)
    q = traj[0]
    replayed = [q]
    states = [env.observe(scene, q, goal)]
    transitions = []
    for a in deltas:
        q, s_next, r, _ = env.step(scene, q, a, goal)
        transitions.append(env.Transition(states[-1], a.copy(), r, s_next, False))
        states.append(s_next)
        replayed.append(q)
    ok, _ = env.verify_trajectory(scene, np.asarray(replayed))
    if not ok:
        raise ValueError("replayed path collides; refusing to convert")
    return transitions


def fill_expert_memory(scene: env.Scene, model: TrajectoryDiffusion, count: int,
                       rng: np.random.Generator,
                       capacity: int | None = None,
                       max_attempts: int | None = None) -> tuple[ReplayMemory, dict]:
    """Sample until `count` collision-free trajectories are stored.

    The goal attached to each trajectory is the tool pose of its final
    configuration.  Returns the memory and acceptance statistics; raises
    GenerationError when acceptance stays under 1% after 10^4 attempts.
    """
    sd = env.state_dim(scene.model)
    mem = ReplayMemory(capacity or 60_000, sd, scene.dof)
    accepted = 0
    attempts = 0
    limit = max_attempts or max(10_000, 100 * count)
    while accepted < count:
        attempts += 1
        traj = model.sample(rng)
        try:
            pos, rot = env.tcp_pose_of(scene, traj[-1])
            records = trajectory_to_transitions(scene, traj, env.Pose(pos, rot))
        except ValueError:
            records = None
        if records:
            for tr in records:
                mem.push_transition(tr)
            accepted += 1
        if attempts >= 10_000 and accepted < 0.01 * attempts:
            raise GenerationError(
                f"acceptance rate {accepted / attempts:.4f} after {attempts} attempts")
        if attempts >= limit and accepted < count:
            raise GenerationError(
                f"exceeded {limit} attempts with {accepted}/{count} accepted")
    stats = {"accepted": accepted, "attempts": attempts,
             "acceptance_rate": accepted / attempts,
             "transitions": len(mem)}
    return mem, stats


# ---------------------------------------------------------------------------
# Behavior cloning and the base+residual hybrid policy
# ---------------------------------------------------------------------------

def train_bc(states: np.ndarray, actions_norm: np.ndarray,
             rng: np.random.Generator, hidden=(256, 256),
             iterations: int = 3000, batch_size: int = 64,
             lr: float = 1e-3) -> tuple[Mlp, np.ndarray]:
    """Supervised regression from states to normalized expert actions.

    Returns (tanh-headed policy, per-iteration loss curve).
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    actions_norm = np.atleast_2d(np.asarray(actions_norm, dtype=float))
    if states.shape[0] == 0:
        raise NoDataError("no state/action pairs for cloning")
    acts = ["relu"] * len(hidden) + ["tanh"]
    net = init_mlp((states.shape[1], *hidden, actions_norm.shape[1]), acts, rng)
    opt = adam_init(net)
    losses = np.empty(iterations)
    n = states.shape[0]
    for it in range(iterations):
        idx = rng.integers(0, n, min(batch_size, n))
        out, cache = forward_cached(net, states[idx])
        resid = out - actions_norm[idx]
        losses[it] = float((resid ** 2).sum(axis=1).mean())
        grads, _ = backward_from_cache(net, cache, 2.0 * resid / len(idx))
        adam_step(opt, net, grads, lr)
    return net, losses


def bc_from_memory(mem: ReplayMemory, action_scale: float,
                   rng: np.random.Generator, **kw) -> tuple[Mlp, np.ndarray]:
    data = mem.to_arrays()
    return train_bc(data["s"], data["a"] / action_scale, rng, **kw)


def hybrid_action(bc_norm: np.ndarray, drl_norm: np.ndarray, step_index: int,
                  base_steps: int, phi: float) -> np.ndarray:
    """Base policy plus a scaled residual for the first base_steps steps.

    After the base policy's fixed horizon only the scaled residual acts,
    in normalized units; the combined action stays within bounds.
    """
    if not (0.0 < phi <= 1.0):
        raise ValueError(f"phi must be in (0, 1], got {phi}")
    drl_norm = np.asarray(drl_norm, dtype=float)
    if step_index < base_steps:
        return np.clip(np.asarray(bc_norm, dtype=float) + phi * drl_norm, -1.0, 1.0)
    return phi * drl_norm


# ---------------------------------------------------------------------------
# Demonstration synthesis
# ---------------------------------------------------------------------------

def solve_goal_config(scene: env.Scene, goal: env.Pose, rng: np.random.Generator,
                      q_init: np.ndarray | None = None,
                      max_steps: int = 800) -> np.ndarray | None:
    """Find a configuration whose tool pose matches `goal`, FK-only.

    Greedy candidate descent on the pose error alone (the search path is
    virtual, so obstacles only constrain the endpoint).  Returns None
    when it stalls outside tolerance or ends inside an expanded box.
    """
    import dataclasses
    free = dataclasses.replace(scene, zeta=0.0)
    q = (scene.q_home if q_init is None else np.asarray(q_init, dtype=float)).copy()
    best_err = np.inf
    stall = 0
    for _ in range(max_steps):
        cands = rng.uniform(-scene.dq_max, scene.dq_max, (12, scene.dof))
        cands[0] = 0.0
        rewards, q_next = env.candidate_rewards(free, q, goal, cands)
        pick = int(np.argmax(rewards))
        q = q_next[pick]
        s = env.observe(scene, q, goal)
        err = float(np.linalg.norm(s.dp)) + float(np.abs(s.do).sum())
        if err < best_err - 1e-9:
            best_err = err
            stall = 0
        else:
            stall += 1
        if s.reached:
            return q if env.uoar_reward(scene, q) == 0.0 else None
        if stall > 80:
            return None
    return None


def synthesize_demos(scene: env.Scene, length: int, rng: np.random.Generator,
                     grid: int = 5, retries: int = 8) -> tuple[np.ndarray, list]:
    """Straight-line joint-space demonstrations, one per target sub-area.

    The target region is split into a grid x grid lattice of goal points;
    for each, a goal configuration is solved FK-only and the demo is the
    linear interpolation home -> goal over `length` configs, kept only if
    collision-free.  Returns (demos (D, length, dof), goal poses).
    """
    lo, hi = scene.target.lo, scene.target.hi
    fracs = (np.arange(grid) + 0.5) / grid
    demos = []
    goals = []
    for fy in fracs:
        for fx in fracs:
            frac = np.array([fx, fy, 0.5])
            point = lo + frac * (hi - lo)
            goal = env.Pose(point, scene.target.orientation)
            demo = None
            for attempt in range(retries):
                q_init = None if attempt == 0 else rng.uniform(
                    scene.model.joint_limits[:, 0], scene.model.joint_limits[:, 1])
                q_goal = solve_goal_config(scene, goal, rng, q_init=q_init)
                if q_goal is None:
                    continue
                line = np.linspace(scene.q_home, q_goal, length)
                ok, _ = env.verify_trajectory(scene, line)
                if ok:
                    demo = line
                    break
            if demo is None:
                raise GenerationError(
                    f"no collision-free straight-line demo for sub-area at {point}")
            demos.append(demo)
            pos, rot = env.tcp_pose_of(scene, demo[-1])
            goals.append(env.Pose(pos, rot))
    return np.asarray(demos), goals
