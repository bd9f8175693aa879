"""Parameterized task space for collision-aware reaching.

A Scene bundles the manipulator model, obstacle boxes (raw and expanded by
link radius + safety offset), the goal-sampling region, and reward
parameters.  Everything is computed analytically: observation, the
overlap-based obstacle reward, the pose reward, stepping, trajectory
verification, and clearance metrics are pure functions with no simulator
behind them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import (Aabb, BoxFrame, Segment, expand_box, overlap_length,
                       overlap_lengths, segment_box_distances)
from .kinematics import (ManipulatorModel, frame_origins, frame_origins_batch,
                         load_manipulator, resolve_preset, total_segment_length)

TWO_PI = 2.0 * np.pi


def wrap_angle(x):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x, dtype=float), TWO_PI)


def rot_zyx(euler) -> np.ndarray:
    """Rotation matrix from intrinsic Z-Y-X Euler angles (yaw, pitch, roll)."""
    a, b, g = [float(v) for v in euler]
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cg, sg = np.cos(g), np.sin(g)
    return np.array([
        [ca * cb, ca * sb * sg - sa * cg, ca * sb * cg + sa * sg],
        [sa * cb, sa * sb * sg + ca * cg, sa * sb * cg - ca * sg],
        [-sb, cb * sg, cb * cg],
    ])


def euler_zyx(rotation: np.ndarray) -> np.ndarray:
    """Intrinsic Z-Y-X Euler angles (yaw, pitch, roll) of a rotation matrix."""
    r = np.asarray(rotation, dtype=float)
    out = euler_zyx_batch(r.reshape(1, 3, 3))
    return out[0]


def euler_zyx_batch(rotations: np.ndarray) -> np.ndarray:
    """Vectorized `euler_zyx` over (B, 3, 3) rotations -> (B, 3)."""
    r = np.asarray(rotations, dtype=float)
    sb = np.clip(-r[:, 2, 0], -1.0, 1.0)
    pitch = np.arcsin(sb)
    gimbal = np.abs(sb) > 1.0 - 1e-12
    yaw = np.where(gimbal,
                   np.arctan2(-r[:, 0, 1], r[:, 1, 1]),
                   np.arctan2(r[:, 1, 0], r[:, 0, 0]))
    roll = np.where(gimbal, 0.0, np.arctan2(r[:, 2, 1], r[:, 2, 2]))
    return np.stack([yaw, pitch, roll], axis=1)


@dataclass(frozen=True)
class Pose:
    """Position plus rotation matrix; Euler form available via `euler_zyx`."""

    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position",
                           np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "rotation",
                           np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "_euler", None)

    @property
    def euler(self) -> np.ndarray:
        if self._euler is None:
            object.__setattr__(self, "_euler", euler_zyx(self.rotation))
        return self._euler


@dataclass(frozen=True)
class TargetRegion:
    """Axis-aligned position box with one fixed goal orientation."""

    lo: np.ndarray
    hi: np.ndarray
    orientation: np.ndarray     # (3, 3)

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float).reshape(3))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float).reshape(3))
        object.__setattr__(self, "orientation",
                           np.asarray(self.orientation, dtype=float).reshape(3, 3))
        if np.any(self.lo > self.hi):
            raise ValueError("target region min exceeds max")


@dataclass(frozen=True)
class Scene:
    model: ManipulatorModel
    raw_boxes: tuple
    expanded_boxes: tuple
    safety_offset: float
    target: TargetRegion
    e_p_max: float
    e_o_max: float
    zeta: float
    max_steps: int
    dq_max: float
    position_scale: float
    orientation_scale: float
    q_home: np.ndarray
    success_rule: str = "final"
    name: str = ""
    # Cached stacked bounds for the vectorized overlap path; only valid
    # when every expanded box is world-axis-aligned (frame is None).
    _fast_lo: np.ndarray | None = None
    _fast_hi: np.ndarray | None = None
    _raw_lo: np.ndarray | None = None
    _raw_hi: np.ndarray | None = None
    _seg_idx: np.ndarray | None = None

    @property
    def dof(self) -> int:
        return self.model.dof


@dataclass(frozen=True)
class StateVector:
    """Observation: configuration, tool pose, goal pose, normalized errors, reach flag."""

    q: np.ndarray
    tcp: Pose
    goal: Pose
    dp: np.ndarray          # (goal - tool position) / position scale
    do: np.ndarray          # wrapped Euler differences / orientation scale
    reached: bool           # within both allowable errors

    def __post_init__(self):
        object.__setattr__(self, "_vec", None)

    def vector(self) -> np.ndarray:
        if self._vec is None:
            object.__setattr__(self, "_vec", np.concatenate([
                self.q,
                self.tcp.position, self.tcp.euler,
                self.goal.position, self.goal.euler,
                self.dp, self.do,
                [1.0 if self.reached else 0.0],
            ]))
        return self._vec


def state_dim(model: ManipulatorModel) -> int:
    return model.dof + 6 + 6 + 3 + 3 + 1


@dataclass(frozen=True)
class Transition:
    s: StateVector
    a: np.ndarray           # joint increments, radians
    r: float
    s_next: StateVector
    done: bool


# ---------------------------------------------------------------------------
# Scene construction
# ---------------------------------------------------------------------------

def _parse_box(entry: dict, idx: int) -> Aabb:
    try:
        lo = entry["min"]
        hi = entry["max"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"boxes[{idx}]: missing min/max ({exc})") from exc
    frame = None
    if entry.get("frame") is not None:
        f = entry["frame"]
        try:
            frame = BoxFrame(np.asarray(f["rotation"], dtype=float),
                             np.asarray(f["translation"], dtype=float))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"boxes[{idx}].frame: {exc}") from exc
    try:
        return Aabb(lo, hi, frame)
    except ValueError as exc:
        raise ConfigError(f"boxes[{idx}]: {exc}") from exc


def build_scene(cfg: dict, base_dir: Path | None = None,
                model: ManipulatorModel | None = None) -> Scene:
    """Build a Scene from a parsed config dict.

    `base_dir` anchors a relative manipulator file reference; a
    pre-loaded model overrides the reference entirely.
    """
    if model is None:
        ref = cfg.get("manipulator")
        if ref is None:
            raise ConfigError("manipulator: missing reference")
        p = Path(ref)
        if base_dir is not None and not p.is_absolute() and (base_dir / p).exists():
            p = base_dir / p
        model = load_manipulator(p if p.exists() else ref)

    raw_boxes = tuple(_parse_box(b, i) for i, b in enumerate(cfg.get("boxes", [])))
    try:
        safety_offset = float(cfg.get("safety_offset", 0.05))
        zeta = float(cfg.get("zeta", 1.0))
        max_steps = int(cfg.get("max_steps", 300))
        dq_max = float(cfg.get("dq_max", 0.05))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"scene scalars: {exc}") from exc
    if safety_offset < 0:
        raise ConfigError("safety_offset: must be non-negative")
    if dq_max <= 0:
        raise ConfigError("dq_max: must be positive")
    if max_steps < 1:
        raise ConfigError("max_steps: must be >= 1")

    margin = model.link_radius + safety_offset
    expanded = tuple(expand_box(b, margin) for b in raw_boxes)

    tr = cfg.get("target_region")
    if tr is None:
        raise ConfigError("target_region: missing")
    try:
        orientation = rot_zyx(tr.get("euler_zyx", [0.0, 0.0, 0.0]))
        target = TargetRegion(tr["min"], tr["max"], orientation)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"target_region: {exc}") from exc

    errs = cfg.get("allowable_errors", {})
    e_p_max = float(errs.get("position", 0.01))
    e_o_max = float(errs.get("orientation", 0.02))
    if e_p_max <= 0 or e_o_max <= 0:
        raise ConfigError("allowable_errors: must be positive")

    scales = cfg.get("norm_scales") or {}
    position_scale = scales.get("position")
    if position_scale is None:
        position_scale = 2.0 * total_segment_length(model)
    orientation_scale = scales.get("orientation")
    if orientation_scale is None:
        orientation_scale = 3.0 * np.pi

    q_home = np.asarray(cfg.get("q_home", np.zeros(model.dof)), dtype=float)
    if q_home.shape != (model.dof,):
        raise ConfigError(f"q_home: expected {model.dof} values, got {q_home.shape}")

    success_rule = cfg.get("success_rule", "final")
    if success_rule not in ("final", "any"):
        raise ConfigError(f"success_rule: unknown value {success_rule!r}")

    all_aligned = all(b.frame is None for b in expanded)
    fast_lo = np.array([b.lo for b in expanded]) if (all_aligned and expanded) else None
    fast_hi = np.array([b.hi for b in expanded]) if (all_aligned and expanded) else None
    raw_aligned = all(b.frame is None for b in raw_boxes)
    raw_lo = np.array([b.lo for b in raw_boxes]) if (raw_aligned and raw_boxes) else None
    raw_hi = np.array([b.hi for b in raw_boxes]) if (raw_aligned and raw_boxes) else None

    return Scene(
        model=model,
        raw_boxes=raw_boxes,
        expanded_boxes=expanded,
        safety_offset=safety_offset,
        target=target,
        e_p_max=e_p_max,
        e_o_max=e_o_max,
        zeta=zeta,
        max_steps=max_steps,
        dq_max=dq_max,
        position_scale=float(position_scale),
        orientation_scale=float(orientation_scale),
        q_home=q_home,
        success_rule=success_rule,
        name=str(cfg.get("name", "")),
        _fast_lo=fast_lo,
        _fast_hi=fast_hi,
        _raw_lo=raw_lo,
        _raw_hi=raw_hi,
        _seg_idx=np.asarray(model.segment_map, dtype=int),
    )


def load_scene(source) -> Scene:
    """Load a scene from a JSON file path or bundled preset name."""
    path = resolve_preset(source, "scenes")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return build_scene(cfg, base_dir=path.parent)


# ---------------------------------------------------------------------------
# Observation and rewards
# ---------------------------------------------------------------------------

def _segments_array(scene: Scene, q) -> tuple[np.ndarray, np.ndarray]:
    """Segment endpoints (J, 3), (J, 3) plus the tool frame for one config."""
    origins, rot = frame_origins(scene.model, q)
    idx = scene._seg_idx
    return origins[idx[:, 0]], origins[idx[:, 1]], origins[-1], rot


def link_segment_points(scene: Scene, q) -> tuple[np.ndarray, np.ndarray]:
    """Collision-segment endpoints at config q: (J, 3) starts and ends."""
    starts, ends, _, _ = _segments_array(scene, q)
    return starts, ends


def tcp_pose_of(scene: Scene, q) -> tuple[np.ndarray, np.ndarray]:
    """Tool position and rotation at config q."""
    origins, rot = frame_origins(scene.model, q)
    return origins[-1], rot


def uoar_reward(scene: Scene, q) -> float:
    """Negative normalized overlap of link segments with expanded boxes.

    Always in [-1, 0]; 0 exactly when nothing overlaps.  The ratio can
    exceed 1 only when one segment lies inside several mutually
    overlapping boxes, so it is clamped.
    """
    starts, ends, _, _ = _segments_array(scene, q)
    total_len = float(np.linalg.norm(ends - starts, axis=1).sum())
    if total_len == 0.0 or not scene.expanded_boxes:
        return 0.0
    overlap = _overlap_total(scene, starts, ends)
    return -min(overlap / total_len, 1.0)


def _overlap_total(scene: Scene, starts, ends) -> float:
    if scene._fast_lo is not None:
        return float(overlap_lengths(starts, ends, scene._fast_lo, scene._fast_hi).sum())
    total = 0.0
    for s, e in zip(starts, ends):
        for box in scene.expanded_boxes:
            total += overlap_length(Segment(s, e), box)
    return total


def _pose_terms(scene: Scene, tcp_pos, tcp_euler, goal: Pose):
    dp_raw = goal.position - tcp_pos
    do_raw = wrap_angle(goal.euler - tcp_euler)
    e_p = float(np.linalg.norm(dp_raw)) / scene.position_scale
    e_o = float(np.abs(do_raw).sum()) / scene.orientation_scale
    return e_p, e_o, dp_raw / scene.position_scale, do_raw / scene.orientation_scale


def _pose_reward_value(scene: Scene, e_p: float, e_o: float) -> float:
    aux = 0.25 * (e_p < 2.0 * scene.e_p_max) + 0.25 * (e_o < 2.0 * scene.e_o_max)
    goal_bonus = 1.0 if (e_p <= scene.e_p_max and e_o <= scene.e_o_max) else 0.0
    return -(e_p + e_o) + aux + goal_bonus


def pose_reward(scene: Scene, q, goal: Pose) -> float:
    """Negative normalized pose error plus near-goal band and goal bonuses."""
    _, _, tcp_pos, tcp_rot = _segments_array(scene, q)
    e_p, e_o, _, _ = _pose_terms(scene, tcp_pos, euler_zyx(tcp_rot), goal)
    return _pose_reward_value(scene, e_p, e_o)


def _state_from(scene: Scene, q, goal: Pose, tcp_pos, tcp_rot) -> StateVector:
    tcp_euler = euler_zyx(tcp_rot)
    e_p, e_o, dp, do = _pose_terms(scene, tcp_pos, tcp_euler, goal)
    reached = bool(e_p <= scene.e_p_max and e_o <= scene.e_o_max)
    tcp = Pose(tcp_pos, tcp_rot)
    object.__setattr__(tcp, "_euler", tcp_euler)
    return StateVector(q=q, tcp=tcp, goal=goal, dp=dp, do=do, reached=reached)


def observe(scene: Scene, q, goal: Pose) -> StateVector:
    q = np.asarray(q, dtype=float).reshape(scene.dof)
    origins, rot = frame_origins(scene.model, q)
    return _state_from(scene, q, goal, origins[-1], rot)


def step(scene: Scene, q, a, goal: Pose, step_index: int | None = None):
    """Apply a bounded joint increment; returns (q', s', r, done).

    Pure: episode step counting is the caller's job, passed in as the
    1-based index of this step so `done` can be reported.
    """
    q = np.asarray(q, dtype=float).reshape(scene.dof)
    dq = np.clip(np.asarray(a, dtype=float).reshape(scene.dof),
                 -scene.dq_max, scene.dq_max)
    limits = scene.model.joint_limits
    q_next = np.clip(q + dq, limits[:, 0], limits[:, 1])
    origins, rot = frame_origins(scene.model, q_next)
    s_next = _state_from(scene, q_next, goal, origins[-1], rot)
    r = _pose_reward_value(scene,
                           float(np.linalg.norm(s_next.dp)),
                           float(np.abs(s_next.do).sum()))
    if scene.expanded_boxes and scene.zeta != 0.0:
        idx = scene._seg_idx
        starts, ends = origins[idx[:, 0]], origins[idx[:, 1]]
        total_len = float(np.linalg.norm(ends - starts, axis=1).sum())
        if total_len > 0.0:
            overlap = _overlap_total(scene, starts, ends)
            r -= scene.zeta * min(overlap / total_len, 1.0)
    done = bool(step_index is not None and step_index >= scene.max_steps)
    return q_next, s_next, float(r), done


def candidate_rewards(scene: Scene, q, goal: Pose, actions: np.ndarray):
    """Vectorized one-step rewards for a batch of candidate increments.

    actions: (C, dof).  Returns (rewards (C,), q_next (C, dof)).  Matches
    `step`'s reward exactly; used for immediate-return candidate scoring.
    """
    q = np.asarray(q, dtype=float).reshape(scene.dof)
    dqs = np.clip(np.asarray(actions, dtype=float).reshape(-1, scene.dof),
                  -scene.dq_max, scene.dq_max)
    limits = scene.model.joint_limits
    q_next = np.clip(q[None, :] + dqs, limits[None, :, 0], limits[None, :, 1])
    origins, rots = frame_origins_batch(scene.model, q_next)      # (C, dof+1, 3)
    idx = scene._seg_idx
    starts = origins[:, idx[:, 0], :]                             # (C, J, 3)
    ends = origins[:, idx[:, 1], :]
    C, J, _ = starts.shape

    # Pose terms.
    tcp_pos = origins[:, -1, :]
    goal_euler = euler_zyx(goal.rotation)
    do_raw = wrap_angle(goal_euler[None, :] - euler_zyx_batch(rots))
    e_p = np.linalg.norm(goal.position[None, :] - tcp_pos, axis=1) / scene.position_scale
    e_o = np.abs(do_raw).sum(axis=1) / scene.orientation_scale
    aux = 0.25 * (e_p < 2.0 * scene.e_p_max) + 0.25 * (e_o < 2.0 * scene.e_o_max)
    goal_bonus = ((e_p <= scene.e_p_max) & (e_o <= scene.e_o_max)).astype(float)
    rewards = -(e_p + e_o) + aux + goal_bonus

    # Obstacle overlap term.
    if scene.expanded_boxes:
        seg_len = np.linalg.norm(ends - starts, axis=2)           # (C, J)
        total_len = seg_len.sum(axis=1)
        if scene._fast_lo is not None:
            ov = overlap_lengths(starts.reshape(C * J, 3), ends.reshape(C * J, 3),
                                 scene._fast_lo, scene._fast_hi)
            overlap = ov.reshape(C, J, -1).sum(axis=(1, 2))
        else:
            overlap = np.array([
                _overlap_total(scene, starts[c], ends[c]) for c in range(C)
            ])
        denom = np.where(total_len > 0.0, total_len, 1.0)
        ratio = np.where(total_len > 0.0, overlap / denom, 0.0)
        rewards -= scene.zeta * np.minimum(ratio, 1.0)
    return rewards, q_next


def sample_goal(scene: Scene, rng: np.random.Generator) -> Pose:
    """Uniform position in the target region with its fixed orientation."""
    pos = rng.uniform(scene.target.lo, scene.target.hi)
    return Pose(pos, scene.target.orientation)


# ---------------------------------------------------------------------------
# Trajectory-level checks
# ---------------------------------------------------------------------------

def _interp_configs(scene: Scene, trajectory: np.ndarray) -> np.ndarray:
    """Trajectory configs plus linear sub-steps bounded by dq_max per joint."""
    configs = [trajectory[0]]
    for q_a, q_b in zip(trajectory[:-1], trajectory[1:]):
        span = float(np.max(np.abs(q_b - q_a)))
        n_sub = max(int(np.ceil(span / scene.dq_max)), 1)
        for i in range(1, n_sub + 1):
            configs.append(q_a + (q_b - q_a) * (i / n_sub))
    return np.asarray(configs)


def verify_trajectory(scene: Scene, trajectory) -> tuple[bool, np.ndarray]:
    """Collision check over a joint trajectory.

    Returns (collision_free, per-config overlap totals for the listed
    configs).  The boolean also accounts for linearly interpolated
    sub-steps so that no joint moves more than dq_max between checks.
    """
    traj = np.atleast_2d(np.asarray(trajectory, dtype=float))
    if traj.shape[1] != scene.dof:
        raise ValueError(f"expected configs of length {scene.dof}, got {traj.shape[1]}")
    listed = _config_overlap_totals(scene, traj)
    if len(traj) > 1:
        checked = _config_overlap_totals(scene, _interp_configs(scene, traj))
        collision_free = bool(np.all(checked == 0.0))
    else:
        collision_free = bool(np.all(listed == 0.0))
    return collision_free, listed


def _config_overlap_totals(scene: Scene, configs: np.ndarray) -> np.ndarray:
    if not scene.expanded_boxes:
        return np.zeros(len(configs))
    origins, _ = frame_origins_batch(scene.model, configs)
    idx = scene._seg_idx
    starts = origins[:, idx[:, 0], :]
    ends = origins[:, idx[:, 1], :]
    T, J, _ = starts.shape
    if scene._fast_lo is not None:
        ov = overlap_lengths(starts.reshape(T * J, 3), ends.reshape(T * J, 3),
                             scene._fast_lo, scene._fast_hi)
        return ov.reshape(T, J, -1).sum(axis=(1, 2))
    return np.array([_overlap_total(scene, starts[t], ends[t]) for t in range(T)])


def min_clearance(scene: Scene, trajectory) -> float:
    """Smallest distance from any link segment to any raw box over a trajectory."""
    traj = np.atleast_2d(np.asarray(trajectory, dtype=float))
    if traj.shape[1] != scene.dof:
        raise ValueError(f"expected configs of length {scene.dof}, got {traj.shape[1]}")
    if not scene.raw_boxes:
        return float("inf")
    origins, _ = frame_origins_batch(scene.model, traj)
    idx = scene._seg_idx
    starts = origins[:, idx[:, 0], :].reshape(-1, 3)
    ends = origins[:, idx[:, 1], :].reshape(-1, 3)
    if scene._raw_lo is not None:
        return float(segment_box_distances(starts, ends, scene._raw_lo, scene._raw_hi).min())
    best = np.inf
    for s, e in zip(starts, ends):
        for box in scene.raw_boxes:
            local = Segment(box.frame.apply(s), box.frame.apply(e)) if box.frame else Segment(s, e)
            d = segment_box_distances(local.start[None], local.end[None],
                                      box.lo[None], box.hi[None])
            best = min(best, float(d[0, 0]))
    return float(best)
