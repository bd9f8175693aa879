"""Forward kinematics for serial manipulators described by DH tables.

Each table row stores (a, alpha, d, q_home); the joint transform is the
classic product Rot_z(q + q_home) * Trans_z(d) * Trans_x(a) * Rot_x(alpha),
so frame i sits at the distal end of link i.  Link geometry for collision
checking is the set of straight segments between the frame origins named
by the model's segment map.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .geometry import Segment


@dataclass(frozen=True)
class DhRow:
    a: float        # link length, m
    alpha: float    # link twist, rad
    d: float        # link offset, m
    q_home: float   # offset added to the commanded joint angle, rad

    def __post_init__(self):
        vals = (self.a, self.alpha, self.d, self.q_home)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite DH row: {vals}")


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid transform: p_world = rotation @ p_local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


@dataclass(frozen=True)
class ManipulatorModel:
    """DH table plus the collision-segment layout and joint limits."""

    dh: tuple
    link_radius: float
    joint_limits: np.ndarray            # (dof, 2) [min, max] in radians
    segment_map: tuple                  # pairs of frame indices, 0 = base
    name: str = ""

    def __post_init__(self):
        if len(self.dh) == 0:
            raise ValueError("DH table is empty")
        limits = np.asarray(self.joint_limits, dtype=float).reshape(len(self.dh), 2)
        if np.any(limits[:, 0] >= limits[:, 1]):
            raise ValueError("joint limits must satisfy min < max")
        object.__setattr__(self, "dh", tuple(self.dh))
        object.__setattr__(self, "joint_limits", limits)
        seg_map = tuple((int(i), int(j)) for i, j in self.segment_map)
        for i, j in seg_map:
            if not (0 <= i < j <= len(self.dh)):
                raise ValueError(f"segment map entry ({i}, {j}) out of range")
        object.__setattr__(self, "segment_map", seg_map)

    @property
    def dof(self) -> int:
        return len(self.dh)


def dh_transform(row: DhRow, q: float) -> RigidTransform:
    """Joint transform for one DH row at commanded angle q."""
    theta = q + row.q_home
    ct, st = np.cos(theta), np.sin(theta)
    ca, sa = np.cos(row.alpha), np.sin(row.alpha)
    rotation = np.array([
        [ct, -st * ca, st * sa],
        [st, ct * ca, -ct * sa],
        [0.0, sa, ca],
    ])
    translation = np.array([row.a * ct, row.a * st, row.d])
    return RigidTransform(rotation, translation)


def forward_kinematics(model: ManipulatorModel, q) -> list[RigidTransform]:
    """Cumulative joint frames, one per DH row, expressed in the base frame."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape[0] != model.dof:
        raise ValueError(f"expected {model.dof} joint angles, got {q.shape[0]}")
    frames = []
    current = RigidTransform.identity()
    for row, qi in zip(model.dh, q):
        current = current.compose(dh_transform(row, float(qi)))
        frames.append(current)
    return frames


def frame_origins(model: ManipulatorModel, q) -> tuple[np.ndarray, np.ndarray]:
    """Fast path: (dof+1, 3) frame origins (base first) and the tool rotation."""
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape[0] != model.dof:
        raise ValueError(f"expected {model.dof} joint angles, got {q.shape[0]}")
    origins = np.zeros((model.dof + 1, 3))
    rot = np.eye(3)
    trans = np.zeros(3)
    for k, (row, qi) in enumerate(zip(model.dh, q)):
        theta = qi + row.q_home
        ct, st = np.cos(theta), np.sin(theta)
        ca, sa = np.cos(row.alpha), np.sin(row.alpha)
        local_rot = np.array([
            [ct, -st * ca, st * sa],
            [st, ct * ca, -ct * sa],
            [0.0, sa, ca],
        ])
        local_trans = np.array([row.a * ct, row.a * st, row.d])
        trans = rot @ local_trans + trans
        rot = rot @ local_rot
        origins[k + 1] = trans
    return origins, rot


def frame_origins_batch(model: ManipulatorModel, qs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized `frame_origins` over a (B, dof) batch of configurations.

    Returns origins (B, dof+1, 3) and tool rotations (B, 3, 3).
    """
    qs = np.atleast_2d(np.asarray(qs, dtype=float))
    B = qs.shape[0]
    if qs.shape[1] != model.dof:
        raise ValueError(f"expected {model.dof} joint angles, got {qs.shape[1]}")
    origins = np.zeros((B, model.dof + 1, 3))
    rot = np.broadcast_to(np.eye(3), (B, 3, 3)).copy()
    trans = np.zeros((B, 3))
    for k, row in enumerate(model.dh):
        theta = qs[:, k] + row.q_home
        ct, st = np.cos(theta), np.sin(theta)
        ca, sa = np.cos(row.alpha), np.sin(row.alpha)
        local_rot = np.zeros((B, 3, 3))
        local_rot[:, 0, 0] = ct
        local_rot[:, 0, 1] = -st * ca
        local_rot[:, 0, 2] = st * sa
        local_rot[:, 1, 0] = st
        local_rot[:, 1, 1] = ct * ca
        local_rot[:, 1, 2] = -ct * sa
        local_rot[:, 2, 1] = sa
        local_rot[:, 2, 2] = ca
        local_trans = np.zeros((B, 3))
        local_trans[:, 0] = row.a * ct
        local_trans[:, 1] = row.a * st
        local_trans[:, 2] = row.d
        trans = np.einsum("bij,bj->bi", rot, local_trans) + trans
        rot = rot @ local_rot
        origins[:, k + 1] = trans
    return origins, rot


def link_segments(model: ManipulatorModel, q) -> list[Segment]:
    """Collision segments between frame origins per the model's segment map."""
    origins, _ = frame_origins(model, q)
    return [Segment(origins[i], origins[j]) for i, j in model.segment_map]


def tcp_pose(model: ManipulatorModel, q) -> tuple[np.ndarray, np.ndarray]:
    """Tool-center-point (position, rotation) — the last joint frame."""
    origins, rot = frame_origins(model, q)
    return origins[-1], rot


def total_segment_length(model: ManipulatorModel) -> float:
    """Sum of collision-segment lengths at the zero configuration."""
    segs = link_segments(model, np.zeros(model.dof))
    return float(sum(s.length for s in segs))


# ---------------------------------------------------------------------------
# Model description files
# ---------------------------------------------------------------------------

def manipulator_from_dict(cfg: dict, name: str = "") -> ManipulatorModel:
    try:
        dh = tuple(
            DhRow(float(r["a"]), float(r["alpha"]), float(r["d"]),
                  float(r.get("q_home", 0.0)))
            for r in cfg["dh"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"manipulator.dh: {exc}") from exc
    try:
        limits = np.asarray(cfg["joint_limits"], dtype=float)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"manipulator.joint_limits: {exc}") from exc
    seg_map = cfg.get("segment_map")
    if seg_map is None:
        seg_map = [(i, i + 1) for i in range(len(dh))]
    try:
        return ManipulatorModel(
            dh=dh,
            link_radius=float(cfg.get("link_radius", 0.0)),
            joint_limits=limits,
            segment_map=seg_map,
            name=str(cfg.get("name", name)),
        )
    except ValueError as exc:
        raise ConfigError(f"manipulator: {exc}") from exc


def load_manipulator(source) -> ManipulatorModel:
    """Load a manipulator from a JSON file path or a bundled preset name."""
    path = resolve_preset(source, "manipulators")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return manipulator_from_dict(cfg, name=path.stem)


def resolve_preset(source, kind: str) -> Path:
    """Resolve a path-or-preset-name to a concrete config file path."""
    p = Path(source)
    if p.exists():
        return p
    bundled = resources.files("armplan").joinpath(f"configs/{kind}/{source}.json")
    if bundled.is_file():
        return Path(str(bundled))
    raise ConfigError(f"no such file or bundled preset: {source!r} (kind={kind})")
