"""Deterministic-policy-gradient agent with ensemble critics.

Extends the single-action DPG pattern three ways:
  * exploration proposes a pool of Gaussian-perturbed action candidates at
    several noise scales around the actor's output;
  * each candidate is scored by a blend of the critic-ensemble mean and
    the short-horizon reward computed analytically in the task space; the
    blend weight ramps from pure immediate reward to pure critic value as
    optimization steps accumulate;
  * critics train on a shared loss that mixes each critic's own TD error,
    the ensemble's, and a disagreement penalty.

Replay is a pair of FIFO memories: interaction data plus an optional
expert memory whose share of each batch ramps up on a clipped schedule.
Actions cross this module's boundary in radians; networks internally use
the normalized [-1, 1] range (actor Tanh output times the action scale).
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import environment as env
from .errors import NoDataError
from .nets import (AdamState, Mlp, adam_init, adam_step, backward_from_cache,
                   forward, forward_cached, init_mlp, load_checkpoint,
                   save_checkpoint, soft_update)


@dataclass
class AgentConfig:
    state_dim: int
    action_dim: int
    action_scale: float                 # max joint increment, rad
    hidden: tuple = (256, 256)
    n_critics: int = 5
    discount: float = 0.98
    lr: float = 1e-3
    tau: float = 0.01
    sigmas: tuple = (0.05, 0.2)         # candidate noise scales, normalized units
    n_per_sigma: int = 3
    blend_steps: float = 2e5            # optimizer steps until critics fully trusted
    horizon: int = 1                    # steps of immediate return
    w1: float = 0.6
    w2: float = 0.1
    batch_size: int = 64
    memory_capacity: int = 60_000
    dc_interval: float = 2e3            # env steps per unit of expert batch share
    dc_max: int = 16
    exploration_noise: float = 0.0      # Gaussian on the executed action, normalized
    use_candidates: bool = True
    use_immediate: bool = True

    @property
    def n_candidates(self) -> int:
        return (len(self.sigmas) * self.n_per_sigma + 1) if self.use_candidates else 1


class ReplayMemory:
    """Bounded FIFO ring of transitions stored as flat arrays (actions in radians)."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        self.capacity = int(capacity)
        self.s = np.zeros((self.capacity, state_dim))
        self.a = np.zeros((self.capacity, action_dim))
        self.r = np.zeros(self.capacity)
        self.s2 = np.zeros((self.capacity, state_dim))
        self.done = np.zeros(self.capacity, dtype=bool)
        self.size = 0
        self._head = 0

    def __len__(self) -> int:
        return self.size

    def push(self, s, a, r, s2, done: bool) -> None:
        i = self._head
        self.s[i] = s
        self.a[i] = a
        self.r[i] = r
        self.s2[i] = s2
        self.done[i] = done
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def push_transition(self, tr: env.Transition) -> None:
        self.push(tr.s.vector(), tr.a, tr.r, tr.s_next.vector(), tr.done)

    def gather(self, idx: np.ndarray):
        return (self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.done[idx])

    def to_arrays(self) -> dict:
        n = self.size
        order = (np.arange(n) + (self._head - n)) % self.capacity if n == self.capacity \
            else np.arange(n)
        return {"s": self.s[order], "a": self.a[order], "r": self.r[order],
                "s2": self.s2[order], "done": self.done[order]}

    @classmethod
    def from_arrays(cls, data: dict, capacity: int | None = None) -> "ReplayMemory":
        n, sd = data["s"].shape
        ad = data["a"].shape[1]
        mem = cls(capacity or max(n, 1), sd, ad)
        for i in range(n):
            mem.push(data["s"][i], data["a"][i], data["r"][i], data["s2"][i],
                     bool(data["done"][i]))
        return mem


def expert_batch_size(t: int, dc_interval: float, dc_max: int) -> int:
    """Ramped expert share: clip(floor(t / interval), 0, max)."""
    return int(np.clip(int(t // dc_interval), 0, dc_max))


def sample_batch(im: ReplayMemory, em: ReplayMemory | None, t: int, batch_size: int,
                 dc_interval: float, dc_max: int, rng: np.random.Generator):
    """Draw a batch mixing interaction and expert memories.

    The expert share follows `expert_batch_size`; the interaction share is
    the remainder.  When the interaction memory holds fewer than
    `batch_size` items the batch shrinks to match it.
    """
    em_size = len(em) if em is not None else 0
    if len(im) == 0 and em_size == 0:
        raise NoDataError("both replay memories are empty")
    b = min(batch_size, len(im)) if len(im) > 0 else 0
    n_em = min(expert_batch_size(t, dc_interval, dc_max), em_size, b) if em_size else 0
    n_im = b - n_em
    parts = []
    if n_im > 0:
        parts.append(im.gather(rng.integers(0, len(im), n_im)))
    if n_em > 0:
        parts.append(em.gather(rng.integers(0, em_size, n_em)))
    if not parts:
        raise NoDataError("schedule produced an empty batch")
    s, a, r, s2, d = (np.concatenate(cols) for cols in zip(*parts))
    return s, a, r, s2, d, n_im, n_em


class _Ensemble:
    """K same-shaped networks re-homed into one (K, P) parameter buffer.

    Each member Mlp's arrays become views into its buffer row, so
    per-critic Adam steps stay valid while forward/backward run as
    batched matmuls across all K members at once.
    """

    def __init__(self, nets):
        self.nets = list(nets)
        self._scratch_by_b = {}
        template = self.nets[0]
        K = len(self.nets)
        P = template.flat.size
        self.buf = np.empty((K, P))
        for k, net in enumerate(self.nets):
            self.buf[k] = net.flat
            off = 0
            for l in net.layers:
                l.w = self.buf[k, off:off + l.w.size].reshape(l.w.shape)
                off += l.w.size
                l.b = self.buf[k, off:off + l.b.size]
                off += l.b.size
            net.flat = self.buf[k]
        self.w_stacks, self.b_stacks, self.acts, self.slices = [], [], [], []
        off = 0
        for l in template.layers:
            n_out, n_in = l.w.shape
            self.w_stacks.append(self.buf[:, off:off + n_out * n_in]
                                 .reshape(K, n_out, n_in))
            w_slice = slice(off, off + n_out * n_in)
            off += n_out * n_in
            self.b_stacks.append(self.buf[:, off:off + n_out])
            b_slice = slice(off, off + n_out)
            off += n_out
            self.acts.append(l.activation)
            self.slices.append((w_slice, b_slice))

    def matches(self, nets) -> bool:
        return len(nets) == len(self.nets) and \
            all(a is b for a, b in zip(nets, self.nets))

    def _scratch(self, B: int) -> dict:
        # Per-batch-size reusable buffers; single-writer contract makes
        # reuse across calls safe and removes the allocator from the loop.
        cached = self._scratch_by_b.get(B)
        if cached is not None:
            return cached
        K = self.buf.shape[0]
        widths = [w.shape[1] for w in self.w_stacks]
        s = {
            "h": [np.empty((K, B, n)) for n in widths],
            "g": [np.empty((K, B, n)) for n in widths],
            "dw": [np.empty((K, w.shape[1], w.shape[2])) for w in self.w_stacks],
            "dx": np.empty((K, B, self.w_stacks[0].shape[2])),
            "grads": np.empty((K, self.buf.shape[1])),
        }
        self._scratch_by_b[B] = s
        return s

    def forward(self, x: np.ndarray):
        """x: (B, in). Returns outputs (K, B, out) and per-layer caches.

        Cache arrays are reused scratch; consume them before the next
        forward call on this ensemble.
        """
        s = self._scratch(x.shape[0])
        h = np.broadcast_to(x, (self.buf.shape[0], *x.shape))
        cache = [h]
        for i, (w, b, act) in enumerate(zip(self.w_stacks, self.b_stacks, self.acts)):
            z = np.matmul(h, w.transpose(0, 2, 1), out=s["h"][i])
            z += b[:, None, :]
            if act == "relu":
                np.maximum(z, 0.0, out=z)
            elif act == "tanh":
                np.tanh(z, out=z)
            h = z
            cache.append(h)
        return h, cache

    def backward(self, cache, upstream, param_grads: bool = True):
        """upstream: (K, B, out).  Returns (grads (K, P) or None, dx (K, B, in)).

        Overwrites the forward cache and returned scratch arrays.
        """
        K = self.buf.shape[0]
        s = self._scratch(cache[0].shape[1])
        g = upstream
        grads = s["grads"] if param_grads else None
        for i in range(len(self.w_stacks) - 1, -1, -1):
            out = cache[i + 1]
            if self.acts[i] == "relu":
                np.multiply(g, out > 0.0, out=s["g"][i])
                g = s["g"][i]
            elif self.acts[i] == "tanh":
                np.multiply(out, out, out=out)
                out -= 1.0
                np.multiply(g, out, out=s["g"][i])
                s["g"][i] *= -1.0
                g = s["g"][i]
            if param_grads:
                w_slice, b_slice = self.slices[i]
                dw = np.matmul(g.transpose(0, 2, 1), cache[i], out=s["dw"][i])
                grads[:, w_slice] = dw.reshape(K, -1)
                g.sum(axis=1, out=grads[:, b_slice])
            target = s["dx"] if i == 0 else s["g"][i - 1]
            g = np.matmul(g, self.w_stacks[i], out=target)
        return grads, g


class Agent:
    """Actor plus K online/target critic pairs and their optimizer states."""

    def __init__(self, cfg: AgentConfig, rng: np.random.Generator):
        self.cfg = cfg
        sd, ad, h = cfg.state_dim, cfg.action_dim, tuple(cfg.hidden)
        acts = ["relu"] * len(h)
        self.actor = init_mlp((sd, *h, ad), acts + ["tanh"], rng)
        # Near-zero output head (the classic DPG recipe): early behavior is
        # then driven by the exploration machinery, not by the random net.
        head = self.actor.layers[-1]
        head.w[:] = rng.uniform(-3e-3, 3e-3, head.w.shape)
        self.actor_target = self.actor.clone()
        self.critics = [init_mlp((sd + ad, *h, 1), acts + ["identity"], rng)
                        for _ in range(cfg.n_critics)]
        for c in self.critics:
            c.layers[-1].w[:] = rng.uniform(-3e-3, 3e-3, c.layers[-1].w.shape)
        self.critic_targets = [c.clone() for c in self.critics]
        self.adam_actor = adam_init(self.actor)
        self.adam_critics = [adam_init(c) for c in self.critics]
        self.t_c = 0        # optimization counter
        self._online_ens = None
        self._target_ens = None

    def _ensembles(self) -> tuple[_Ensemble, _Ensemble]:
        if self._online_ens is None or not self._online_ens.matches(self.critics):
            self._online_ens = _Ensemble(self.critics)
        if self._target_ens is None or not self._target_ens.matches(self.critic_targets):
            self._target_ens = _Ensemble(self.critic_targets)
        return self._online_ens, self._target_ens

    # ----------------------------------------------------------- policy side

    def policy_norm(self, s_vec) -> np.ndarray:
        """Actor output in normalized [-1, 1] units."""
        return forward(self.actor, np.asarray(s_vec, dtype=float))

    def raw_action(self, s_vec) -> np.ndarray:
        """Single deterministic action for a state vector, in radians."""
        return self.policy_norm(s_vec) * self.cfg.action_scale

    def action_candidates(self, a_rad, rng: np.random.Generator) -> np.ndarray:
        """Candidate pool: the action itself plus noisy copies, (C, action_dim) radians.

        Noise is Gaussian per scale in normalized units; candidates are
        clipped to the normalized action range.
        """
        scale = self.cfg.action_scale
        a_norm = np.asarray(a_rad, dtype=float) / scale
        cands = [a_norm]
        for sigma in self.cfg.sigmas:
            if sigma <= 0:
                raise ValueError(f"noise scale must be positive, got {sigma}")
            for _ in range(self.cfg.n_per_sigma):
                cands.append(np.clip(a_norm + rng.normal(0.0, sigma, a_norm.shape),
                                     -1.0, 1.0))
        return np.asarray(cands) * scale

    def mean_q(self, s_vec, a_rad) -> float:
        """Ensemble-mean Q for one state/action pair (action in radians)."""
        x = np.concatenate([np.asarray(s_vec, dtype=float),
                            np.asarray(a_rad, dtype=float) / self.cfg.action_scale])
        return float(np.mean([forward(c, x)[0] for c in self.critics]))

    def mean_q_batch(self, s_mat, a_rad_mat) -> np.ndarray:
        x = np.concatenate([s_mat, a_rad_mat / self.cfg.action_scale], axis=1)
        online, _ = self._ensembles()
        out, _ = online.forward(x)
        return out[:, :, 0].mean(axis=0)

    def eta(self) -> float:
        """Blend weight on critic values: ramps 0 -> 1 over blend_steps."""
        return float(np.clip(self.t_c / self.cfg.blend_steps, 0.0, 1.0))

    def hybrid_value(self, q_value, immediate):
        eta = self.eta()
        return eta * np.asarray(q_value) + (1.0 - eta) * np.asarray(immediate)

    def immediate_return(self, scene: env.Scene, s: env.StateVector, a_rad,
                         horizon: int | None = None) -> float:
        """Reward summed over `horizon` analytic steps from state s.

        The first step applies `a_rad`; later steps follow the current
        actor.  Pure: nothing is mutated.
        """
        h = self.cfg.horizon if horizon is None else int(horizon)
        if h < 1:
            raise ValueError("horizon must be >= 1")
        total = 0.0
        q, state, act = s.q, s, np.asarray(a_rad, dtype=float)
        for _ in range(h):
            q, state, r, _ = env.step(scene, q, act, s.goal)
            total += r
            act = self.raw_action(state.vector())
        return total

    def select_action(self, scene: env.Scene, s: env.StateVector,
                      rng: np.random.Generator):
        """Pick the best candidate by blended value; returns (action_rad, info)."""
        a = self.raw_action(s.vector())
        if not self.cfg.use_candidates:
            return a, {"n_candidates": 1, "picked": 0}
        cands = self.action_candidates(a, rng)
        s_mat = np.broadcast_to(s.vector(), (len(cands), self.cfg.state_dim))
        q_vals = self.mean_q_batch(np.ascontiguousarray(s_mat), cands)
        eta = self.eta()
        if self.cfg.use_immediate and eta < 1.0:
            if self.cfg.horizon == 1:
                returns, _ = env.candidate_rewards(scene, s.q, s.goal, cands)
            else:
                returns = np.array([
                    self.immediate_return(scene, s, c) for c in cands
                ])
            values = eta * q_vals + (1.0 - eta) * returns
        else:
            values = q_vals
        picked = int(np.argmax(values))   # ties resolve to the lowest index
        return cands[picked], {"n_candidates": len(cands), "picked": picked}

    # ----------------------------------------------------------- training side

    def td_errors(self, s, a_rad, r, s2) -> np.ndarray:
        """Per-critic TD errors against target networks, (K, B)."""
        s = np.atleast_2d(s)
        a_norm = np.atleast_2d(a_rad) / self.cfg.action_scale
        r = np.atleast_1d(r)
        s2 = np.atleast_2d(s2)
        a2 = forward(self.actor_target, s2)
        x2 = np.concatenate([s2, a2], axis=1)
        x = np.concatenate([s, a_norm], axis=1)
        out = np.empty((self.cfg.n_critics, len(r)))
        for k in range(self.cfg.n_critics):
            q2 = forward(self.critic_targets[k], x2)[:, 0]
            q = forward(self.critics[k], x)[:, 0]
            out[k] = r + self.cfg.discount * q2 - q
        return out

    def td_error(self, k: int, s_vec, a_rad, r, s2_vec) -> float:
        """TD error of critic k on a single transition."""
        return float(self.td_errors(s_vec, a_rad, [r], s2_vec)[k, 0])

    def critic_update(self, s, a_rad, r, s2):
        """One ensemble critic step; returns per-critic losses (None if skipped)."""
        cfg = self.cfg
        B = len(r)
        K = cfg.n_critics
        a_norm = a_rad / cfg.action_scale
        a2 = forward(self.actor_target, s2)
        x2 = np.concatenate([s2, a2], axis=1)
        x = np.concatenate([s, a_norm], axis=1)
        online, target = self._ensembles()

        q2, _ = target.forward(x2)                   # (K, B, 1)
        targets = r[None, :] + cfg.discount * q2[:, :, 0]
        out, caches = online.forward(x)
        qs = out[:, :, 0]                            # (K, B)
        errors = targets - qs                        # L_k per sample
        q_mean = qs.mean(axis=0)
        mean_sq = (errors ** 2).mean(axis=0)         # (1/K) sum_j L_j^2

        losses = (cfg.w1 * (errors ** 2) + (1 - cfg.w1) * mean_sq
                  + cfg.w2 * (qs - q_mean) ** 2).mean(axis=1)
        if not np.all(np.isfinite(losses)):
            warnings.warn("non-finite critic loss; batch skipped")
            return None

        upstream = (2.0 / B) * (
            -(cfg.w1 + (1 - cfg.w1) / K) * errors
            + cfg.w2 * (1.0 - 1.0 / K) * (qs - q_mean)
        )
        grads, _ = online.backward(caches, upstream[:, :, None])
        for k in range(K):
            adam_step(self.adam_critics[k], self.critics[k], grads[k], cfg.lr)
        return losses

    def actor_update(self, s):
        """Ascend the batch-mean ensemble Q at the actor's own actions."""
        cfg = self.cfg
        B = s.shape[0]
        K = cfg.n_critics
        a_norm, actor_cache = forward_cached(self.actor, s)
        x = np.concatenate([s, a_norm], axis=1)
        online, _ = self._ensembles()
        _, caches = online.forward(x)
        ones = np.ones((K, B, 1))
        _, dx = online.backward(caches, ones, param_grads=False)
        dq_da = dx[:, :, cfg.state_dim:].mean(axis=0)
        upstream = -dq_da / B                        # minimize -mean Q
        grads, _ = backward_from_cache(self.actor, actor_cache, upstream)
        adam_step(self.adam_actor, self.actor, grads, cfg.lr)

    def update_targets(self) -> None:
        soft_update(self.actor_target, self.actor, self.cfg.tau)
        online, target = self._ensembles()
        tau = self.cfg.tau
        target.buf *= 1.0 - tau
        target.buf += tau * online.buf

    def optimize(self, batch) -> bool:
        """One full optimization: critics, actor, targets; counts toward eta."""
        s, a, r, s2 = batch[0], batch[1], batch[2], batch[3]
        ok = self.critic_update(s, a, r, s2) is not None
        if ok:
            self.actor_update(s)
            self.update_targets()
        self.t_c += 1
        return ok

    # ----------------------------------------------------------- persistence

    def save(self, path, extra_meta: dict | None = None) -> None:
        nets = {"actor": self.actor, "actor_target": self.actor_target}
        adams = {"actor": self.adam_actor}
        for k, (c, ct) in enumerate(zip(self.critics, self.critic_targets)):
            nets[f"critic{k}"] = c
            nets[f"critic{k}_target"] = ct
            adams[f"critic{k}"] = self.adam_critics[k]
        cfg = asdict(self.cfg)
        cfg["hidden"] = list(cfg["hidden"])
        cfg["sigmas"] = list(cfg["sigmas"])
        meta = {"agent_config": cfg, "t_c": self.t_c}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, nets, extra_meta=meta, adam_states=adams)

    @classmethod
    def load(cls, path) -> tuple["Agent", dict]:
        nets, meta, adams, _ = load_checkpoint(path)
        cfg_dict = dict(meta["agent_config"])
        cfg_dict["hidden"] = tuple(cfg_dict["hidden"])
        cfg_dict["sigmas"] = tuple(cfg_dict["sigmas"])
        cfg = AgentConfig(**cfg_dict)
        agent = cls(cfg, np.random.default_rng(0))
        agent.actor = nets["actor"]
        agent.actor_target = nets["actor_target"]
        agent.critics = [nets[f"critic{k}"] for k in range(cfg.n_critics)]
        agent.critic_targets = [nets[f"critic{k}_target"] for k in range(cfg.n_critics)]
        agent.adam_actor = adams["actor"]
        agent.adam_critics = [adams[f"critic{k}"] for k in range(cfg.n_critics)]
        agent.t_c = int(meta["t_c"])
        return agent, meta
