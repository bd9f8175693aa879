"""Training runs, policy evaluation, trajectory export, and timing benchmarks.

A RunConfig names the scene, the algorithm variant, the seeds, and every
hyperparameter; `run_training` executes the episode loop per seed (in
parallel workers when asked), writing per-episode CSV streams,
windowed-success and reward-fluctuation summaries, checkpoints, and
figures.  Variants:

  ddpg-equivalent   single critic, no candidate pool, no immediate-return
                    blending, Gaussian exploration noise on the executed
                    action (the classic DPG baseline in this codebase)
  ape2              candidate exploration + blended evaluation, K critics
  ape2+bc           ape2 plus a cloned base policy with the trained agent
                    acting as a scaled residual
  ape2+dc-ed2       ape2 plus expert-memory batches generated by a trained
                    trajectory-diffusion model
  ape2+dc-file      ape2 plus expert-memory batches loaded from a file
"""

from __future__ import annotations

import json
import os
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import environment as env
from .agent import Agent, AgentConfig, ReplayMemory, sample_batch
from .diffusion import (TrajectoryDiffusion, bc_from_memory, fill_expert_memory,
                        hybrid_action)
from .errors import ConfigError
from .nets import Mlp, forward, load_checkpoint, save_checkpoint

VARIANTS = ("ddpg-equivalent", "ape2", "ape2+bc", "ape2+dc-ed2", "ape2+dc-file")


@dataclass
class RunConfig:
    scene: str
    variant: str = "ape2"
    seeds: tuple = (0, 1, 2, 3)
    episodes: int = 1000
    out_dir: str = "runs/out"
    # network / optimization
    hidden: tuple = (256, 256)
    n_critics: int = 5
    lr: float = 1e-3
    tau: float = 0.01
    discount: float = 0.98
    batch_size: int = 64
    memory_capacity: int = 60_000
    # exploration / evaluation
    sigmas: tuple = (0.05, 0.2)
    n_per_sigma: int = 3
    blend_steps: float = 2e5
    horizon: int = 1
    w1: float = 0.6
    w2: float = 0.1
    exploration_noise: float = 0.1      # used by ddpg-equivalent only
    # expert data
    dc_interval: float = 2e3
    dc_max: int = 16
    expert_model: str | None = None     # trajectory-diffusion bundle (.npz)
    expert_data: str | None = None      # transitions dump (.npz)
    expert_count: int = 800
    em_capacity: int = 64_000
    bc_iterations: int = 3000
    phi: float = 0.1
    # bookkeeping
    window: int = 250
    checkpoint_every: int = 0           # episodes; 0 = final only
    workers: int = 0                    # 0 = auto
    name: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant: unknown {self.variant!r}; choose from {VARIANTS}")
        if self.episodes < 1:
            raise ConfigError("episodes: must be >= 1")
        self.seeds = tuple(int(s) for s in self.seeds)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.sigmas = tuple(float(s) for s in self.sigmas)

    @property
    def uses_dc(self) -> bool:
        return self.variant in ("ape2+dc-ed2", "ape2+dc-file")

    @property
    def uses_bc(self) -> bool:
        return self.variant == "ape2+bc"


def run_config_from_file(path) -> RunConfig:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    known = {f for f in RunConfig.__dataclass_fields__}
    unknown = set(cfg) - known
    if unknown:
        raise ConfigError(f"run config: unknown fields {sorted(unknown)}")
    return RunConfig(**cfg)


def agent_config_for(run: RunConfig, scene: env.Scene) -> AgentConfig:
    ddpg = run.variant == "ddpg-equivalent"
    return AgentConfig(
        state_dim=env.state_dim(scene.model),
        action_dim=scene.dof,
        action_scale=scene.dq_max,
        hidden=run.hidden,
        n_critics=1 if ddpg else run.n_critics,
        discount=run.discount,
        lr=run.lr,
        tau=run.tau,
        sigmas=run.sigmas,
        n_per_sigma=run.n_per_sigma,
        blend_steps=run.blend_steps,
        horizon=run.horizon,
        w1=run.w1,
        w2=run.w2,
        batch_size=run.batch_size,
        memory_capacity=run.memory_capacity,
        dc_interval=run.dc_interval,
        dc_max=run.dc_max,
        exploration_noise=run.exploration_noise if ddpg else 0.0,
        use_candidates=not ddpg,
        use_immediate=not ddpg,
    )


# ---------------------------------------------------------------------------
# Transition files (the schema shared by expert-memory dumps and dc-file runs)
# ---------------------------------------------------------------------------

def save_transitions(path, mem: ReplayMemory, meta: dict | None = None) -> None:
    data = mem.to_arrays()
    payload = {"format_version": 1, **(meta or {})}
    np.savez(path, meta_json=np.frombuffer(json.dumps(payload).encode(), dtype=np.uint8),
             **data)


def load_transitions(path, capacity: int | None = None) -> tuple[ReplayMemory, dict]:
    with np.load(path) as data:
        arrays = {k: data[k] for k in data.files}
    meta = json.loads(bytes(arrays.pop("meta_json")).decode()) if "meta_json" in arrays else {}
    mem = ReplayMemory.from_arrays(arrays, capacity=capacity)
    return mem, meta


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def window_success(successes, window: int) -> list:
    """Success percentage per consecutive episode window: c/(b-a+1) x 100."""
    successes = np.asarray(successes, dtype=bool)
    out = []
    for start in range(0, len(successes), window):
        chunk = successes[start:start + window]
        out.append({
            "first_episode": start + 1,
            "last_episode": start + len(chunk),
            "successes": int(chunk.sum()),
            "success_pct": 100.0 * chunk.sum() / len(chunk),
        })
    return out


def reward_fluctuation(episode_rewards) -> float:
    """Standard deviation of episode rewards over a training run."""
    return float(np.std(np.asarray(episode_rewards, dtype=float)))


def mean_min_max(values) -> dict:
    arr = np.asarray(list(values), dtype=float)
    if arr.size == 0:
        return {"mean": None, "min": None, "max": None}
    return {"mean": float(arr.mean()), "min": float(arr.min()), "max": float(arr.max())}


# ---------------------------------------------------------------------------
# Expert-data preparation (shared by dc and bc variants)
# ---------------------------------------------------------------------------

def prepare_expert_memory(run: RunConfig, scene: env.Scene,
                          rng: np.random.Generator) -> tuple[ReplayMemory | None, dict]:
    if run.variant == "ape2+dc-file" or (run.uses_bc and run.expert_data):
        if not run.expert_data:
            raise ConfigError("expert_data: required for the dc-file variant")
        mem, meta = load_transitions(run.expert_data, capacity=run.em_capacity)
        return mem, {"source": "file", "path": str(run.expert_data),
                     "transitions": len(mem), **({k: v for k, v in meta.items()
                                                  if k != "format_version"})}
    if run.variant == "ape2+dc-ed2" or run.uses_bc:
        if not run.expert_model:
            raise ConfigError("expert_model: required for dc-ed2 and bc variants")
        model = TrajectoryDiffusion.load(run.expert_model)
        mem, stats = fill_expert_memory(scene, model, run.expert_count, rng,
                                        capacity=run.em_capacity)
        return mem, {"source": "ed2", "path": str(run.expert_model), **stats}
    return None, {}


# ---------------------------------------------------------------------------
# The episode loop
# ---------------------------------------------------------------------------

def train_seed(run: RunConfig, seed: int, out_dir: Path | None = None,
               progress=None) -> dict:
    """Train one seed; returns the per-episode records and file locations."""
    scene = env.load_scene(run.scene)
    rng = np.random.default_rng(seed)
    agent = Agent(agent_config_for(run, scene), rng)

    em, em_info = prepare_expert_memory(run, scene, rng)
    bc_net = None
    if run.uses_bc:
        bc_net, _ = bc_from_memory(em, scene.dq_max, rng, hidden=run.hidden,
                                   iterations=run.bc_iterations)
        em = None       # the hybrid-policy variant uses cloning, not dc batches
    im = ReplayMemory(run.memory_capacity, env.state_dim(scene.model), scene.dof)

    cfg = agent.cfg
    noise = cfg.exploration_noise
    base_steps = None
    if bc_net is not None:
        base_steps = TrajectoryDiffusion.load(run.expert_model).codec.length \
            if run.expert_model else 80

    records = []
    t_env = 0
    for ep in range(1, run.episodes + 1):
        goal = env.sample_goal(scene, rng)
        q = scene.q_home.copy()
        s = env.observe(scene, q, goal)
        total = 0.0
        ever_reached = False
        t0 = time.perf_counter()
        for step_i in range(1, scene.max_steps + 1):
            a_sel, _ = agent.select_action(scene, s, rng)
            a_exec_norm = a_sel / scene.dq_max
            if noise > 0.0:
                a_exec_norm = np.clip(a_exec_norm + rng.normal(0.0, noise, scene.dof),
                                      -1.0, 1.0)
            if bc_net is not None:
                bc_out = forward(bc_net, s.vector())
                a_exec_norm = hybrid_action(bc_out, a_sel / scene.dq_max,
                                            step_i - 1, base_steps, run.phi)
            q, s2, r, done = env.step(scene, q, a_exec_norm * scene.dq_max,
                                      goal, step_i)
            im.push(s.vector(), a_sel, r, s2.vector(), done)
            t_env += 1
            if len(im) >= cfg.batch_size:
                batch = sample_batch(im, em if run.uses_dc else None, t_env,
                                     cfg.batch_size, cfg.dc_interval, cfg.dc_max,
                                     rng)
                agent.optimize(batch[:4])
            total += r
            ever_reached = ever_reached or s2.reached
            s = s2
        elapsed = time.perf_counter() - t0
        final_e_p = float(np.linalg.norm(s.dp))
        final_e_o = float(np.abs(s.do).sum())
        success = s.reached if scene.success_rule == "final" else ever_reached
        records.append({
            "episode": ep,
            "total_reward": total,
            "success": bool(success),
            "final_e_p": final_e_p,
            "final_e_o": final_e_o,
            "steps": scene.max_steps,
            "per_step_us": 1e6 * elapsed / scene.max_steps,
        })
        if progress and ep % progress == 0:
            pct = 100.0 * np.mean([r["success"] for r in records[-progress:]])
            print(f"[seed {seed}] episode {ep}/{run.episodes} "
                  f"recent success {pct:.0f}%", flush=True)
        if out_dir and run.checkpoint_every and ep % run.checkpoint_every == 0:
            _save_agent(out_dir / f"agent_ep{ep}.npz", agent, run, scene, bc_net)

    result = {"seed": seed, "records": records, "em_info": em_info}
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        write_episode_csv(out_dir / "episodes.csv", records)
        _save_agent(out_dir / "agent.npz", agent, run, scene, bc_net)
        result["checkpoint"] = str(out_dir / "agent.npz")
        result["episodes_csv"] = str(out_dir / "episodes.csv")
    return result


def _save_agent(path, agent: Agent, run: RunConfig, scene: env.Scene,
                bc_net: Mlp | None) -> None:
    extra = {"variant": run.variant, "scene": run.scene,
             "scene_name": scene.name, "phi": run.phi}
    agent.save(path, extra_meta=extra)
    if bc_net is not None:
        # bundle the base policy beside the agent nets
        nets, meta, adams, arrays = load_checkpoint(path)
        nets["bc"] = bc_net
        arrays.pop("meta_json", None)
        save_checkpoint(path, nets, extra_meta={k: v for k, v in meta.items()
                                                if k not in ("format_version", "nets", "adam")},
                        extra_arrays=arrays, adam_states=adams)


def write_episode_csv(path, records) -> None:
    cols = ["episode", "total_reward", "success", "final_e_p", "final_e_o",
            "steps", "per_step_us"]
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in records:
            fh.write(",".join(
                (repr(r[c]) if isinstance(r[c], float) else str(int(r[c])))
                for c in cols) + "\n")


def _seed_worker(args):
    run_dict, seed, out_dir, progress = args
    run = RunConfig(**run_dict)
    return train_seed(run, seed, Path(out_dir), progress=progress)


def run_training(run: RunConfig, progress: int | None = None) -> dict:
    """Train every seed, aggregate metrics, and write the report files."""
    out = Path(os.environ.get("ARMPLAN_OUT", "")) / run.out_dir \
        if os.environ.get("ARMPLAN_OUT") else Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(asdict(run), indent=2) + "\n")

    t0 = time.perf_counter()
    jobs = [(asdict(run), seed, str(out / f"seed{seed}"), progress)
            for seed in run.seeds]
    n_workers = run.workers or min(len(run.seeds), os.cpu_count() or 1)
    if n_workers > 1 and len(run.seeds) > 1:
        import multiprocessing as mp
        ctx = mp.get_context("spawn")
        with ctx.Pool(n_workers, initializer=_limit_blas_threads) as pool:
            results = pool.map(_seed_worker, jobs)
    else:
        results = [_seed_worker(j) for j in jobs]
    wall = time.perf_counter() - t0

    summary = aggregate_results(run, results, wall)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_windows_csv(out / "windows.csv", run, results)
    write_rewards_long_csv(out / "rewards_long.csv", results)
    try:
        from .plots import plot_training
        summary["figures"] = plot_training(out, run, results)
    except Exception as exc:   # plotting must never kill a finished run
        warnings.warn(f"figure rendering failed: {exc}")
    return summary


def _limit_blas_threads():
    os.environ.setdefault("OMP_NUM_THREADS", "1")
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")


def aggregate_results(run: RunConfig, results, wall_seconds: float) -> dict:
    per_seed_windows = {}
    per_seed_rf = {}
    for res in results:
        seed = res["seed"]
        successes = [r["success"] for r in res["records"]]
        rewards = [r["total_reward"] for r in res["records"]]
        per_seed_windows[seed] = window_success(successes, run.window)
        per_seed_rf[seed] = reward_fluctuation(rewards)
    n_windows = max(len(w) for w in per_seed_windows.values())
    windows = []
    for i in range(n_windows):
        vals = [per_seed_windows[s][i]["success_pct"] for s in per_seed_windows
                if i < len(per_seed_windows[s])]
        first = next(iter(per_seed_windows.values()))[i]
        windows.append({
            "first_episode": first["first_episode"],
            "last_episode": first["last_episode"],
            "per_seed_pct": {str(s): per_seed_windows[s][i]["success_pct"]
                             for s in per_seed_windows},
            **mean_min_max(vals),
        })
    return {
        "variant": run.variant,
        "scene": run.scene,
        "seeds": list(run.seeds),
        "episodes": run.episodes,
        "window": run.window,
        "windows": windows,
        "reward_fluctuation": {
            "per_seed": {str(s): per_seed_rf[s] for s in per_seed_rf},
            **mean_min_max(per_seed_rf.values()),
        },
        "mean_per_step_us": mean_min_max(
            rec["per_step_us"] for res in results for rec in res["records"]),
        "wall_seconds": wall_seconds,
        "expert_memory": next((r["em_info"] for r in results if r.get("em_info")), {}),
        "checkpoints": {str(r["seed"]): r.get("checkpoint") for r in results},
    }


def write_windows_csv(path, run: RunConfig, results) -> None:
    with open(path, "w") as fh:
        fh.write("first_episode,last_episode,seed,successes,success_pct\n")
        for res in results:
            successes = [r["success"] for r in res["records"]]
            for w in window_success(successes, run.window):
                fh.write(f"{w['first_episode']},{w['last_episode']},{res['seed']},"
                         f"{w['successes']},{w['success_pct']!r}\n")


def write_rewards_long_csv(path, results) -> None:
    with open(path, "w") as fh:
        fh.write("episode,seed,reward,success\n")
        for res in results:
            for r in res["records"]:
                fh.write(f"{r['episode']},{res['seed']},{r['total_reward']!r},"
                         f"{int(r['success'])}\n")


# ---------------------------------------------------------------------------
# Deployment-style rollouts (evaluation, export, replanning)
# ---------------------------------------------------------------------------

def load_policy(checkpoint):
    """Load (agent, bc_net_or_None, meta) from a training checkpoint."""
    agent, meta = Agent.load(checkpoint)
    nets, _, _, _ = load_checkpoint(checkpoint)
    return agent, nets.get("bc"), meta


def rollout(scene: env.Scene, agent: Agent, goal: env.Pose,
            q0: np.ndarray | None = None, bc_net: Mlp | None = None,
            phi: float = 0.1, base_steps: int = 80,
            stop_on_reach: bool = True, max_steps: int | None = None):
    """Deterministic closed-loop rollout; returns (configs, success, steps, seconds)."""
    q = (scene.q_home if q0 is None else np.asarray(q0, dtype=float)).copy()
    s = env.observe(scene, q, goal)
    configs = [q.copy()]
    limit = max_steps or scene.max_steps
    t0 = time.perf_counter()
    reached = s.reached
    for step_i in range(1, limit + 1):
        a_norm = agent.policy_norm(s.vector())
        if bc_net is not None:
            a_norm = hybrid_action(forward(bc_net, s.vector()), a_norm,
                                   step_i - 1, base_steps, phi)
        q, s, r, _ = env.step(scene, q, a_norm * scene.dq_max, goal, step_i)
        configs.append(q.copy())
        if s.reached:
            reached = True
            if stop_on_reach:
                break
    return np.asarray(configs), bool(s.reached or (reached and not stop_on_reach)), \
        len(configs) - 1, time.perf_counter() - t0


def tcp_path_length(scene: env.Scene, configs) -> float:
    pts = np.asarray([env.tcp_pose_of(scene, q)[0] for q in configs])
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def evaluate_policy(scene: env.Scene, checkpoint, n_trials: int = 50,
                    seed: int = 0) -> dict:
    """Success rate, trajectory length, and clearance over random-goal trials.

    Length and clearance aggregate over successful trials only; every
    trial is also collision-verified against the expanded boxes.
    """
    agent, bc_net, meta = load_policy(checkpoint)
    if agent.cfg.state_dim != env.state_dim(scene.model):
        raise ConfigError(
            f"checkpoint state dim {agent.cfg.state_dim} does not match scene "
            f"({env.state_dim(scene.model)})")
    rng = np.random.default_rng(seed)
    trials = []
    for i in range(n_trials):
        goal = env.sample_goal(scene, rng)
        configs, success, steps, seconds = rollout(
            scene, agent, goal, bc_net=bc_net, phi=float(meta.get("phi", 0.1)))
        collision_free, _ = env.verify_trajectory(scene, configs)
        trials.append({
            "trial": i,
            "success": bool(success and collision_free),
            "collision_free": collision_free,
            "steps": steps,
            "seconds": seconds,
            "trajectory_length_m": tcp_path_length(scene, configs),
            "min_clearance_m": env.min_clearance(scene, configs),
            "goal": [float(v) for v in goal.position],
        })
    ok = [t for t in trials if t["success"]]
    return {
        "checkpoint": str(checkpoint),
        "n_trials": n_trials,
        "success_rate_pct": 100.0 * len(ok) / n_trials,
        "trajectory_length_m": mean_min_max(t["trajectory_length_m"] for t in ok),
        "min_clearance_m": mean_min_max(t["min_clearance_m"] for t in ok),
        "generation_seconds": mean_min_max(t["seconds"] for t in trials),
        "trials": trials,
    }


def export_trajectory(scene: env.Scene, checkpoint, goal: env.Pose,
                      csv_path, q0=None) -> dict:
    """Roll the policy to the goal and write the joint sequence as CSV.

    The trajectory is collision-verified before anything is written; a
    failed verification raises instead of exporting.
    """
    agent, bc_net, meta = load_policy(checkpoint)
    t0 = time.perf_counter()
    configs, success, steps, seconds = rollout(
        scene, agent, goal, q0=q0, bc_net=bc_net, phi=float(meta.get("phi", 0.1)))
    collision_free, _ = env.verify_trajectory(scene, configs)
    if not collision_free:
        raise RuntimeError("rollout failed collision verification; not exporting")
    with open(csv_path, "w") as fh:
        fh.write(",".join(f"q{i + 1}" for i in range(scene.dof)) + "\n")
        for q in configs:
            fh.write(",".join(repr(float(v)) for v in q) + "\n")
    return {
        "csv": str(csv_path),
        "success": success,
        "steps": steps,
        "planning_seconds": time.perf_counter() - t0,
        "rollout_seconds": seconds,
        "verified_collision_free": collision_free,
        "trajectory_length_m": tcp_path_length(scene, configs),
        "min_clearance_m": env.min_clearance(scene, configs),
        "goal": [float(v) for v in goal.position],
    }


def replan(scene: env.Scene, checkpoint, q_now, goal: env.Pose, csv_path) -> dict:
    """Plan from the current configuration toward a new goal."""
    return export_trajectory(scene, checkpoint, goal, csv_path, q0=q_now)


# ---------------------------------------------------------------------------
# Reward-path benchmark
# ---------------------------------------------------------------------------

def bench_reward(scene: env.Scene, n_steps: int = 300, seed: int = 0) -> dict:
    """Wall-clock of full interactions: observe + action + step + reward.

    Uses a randomly initialized policy; per-step stats plus the total per
    300 steps for comparison across obstacle counts.
    """
    if n_steps < 300:
        raise ValueError("n_steps must be >= 300")
    rng = np.random.default_rng(seed)
    agent = Agent(agent_config_for(RunConfig(scene=scene.name or "bench",
                                             variant="ddpg-equivalent"), scene), rng)
    goal = env.sample_goal(scene, rng)
    q = scene.q_home.copy()
    s = env.observe(scene, q, goal)
    times = np.empty(n_steps)
    for i in range(n_steps):
        t0 = time.perf_counter()
        a = agent.raw_action(s.vector())
        q, s, r, _ = env.step(scene, q, a, goal, i + 1)
        times[i] = time.perf_counter() - t0
        if (i + 1) % scene.max_steps == 0:
            goal = env.sample_goal(scene, rng)
            q = scene.q_home.copy()
            s = env.observe(scene, q, goal)
    return {
        "scene": scene.name,
        "boxes": len(scene.raw_boxes),
        "n_steps": n_steps,
        "per_step_seconds": mean_min_max(times),
        "seconds_per_300_steps": float(times.mean() * 300.0),
        "samples": times.tolist(),
    }
