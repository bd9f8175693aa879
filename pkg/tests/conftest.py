import numpy as np
import pytest

from armplan.environment import build_scene
from armplan.kinematics import load_manipulator


@pytest.fixture(scope="session")
def planar2r():
    return load_manipulator("planar2r")


@pytest.fixture(scope="session")
def planar3r():
    return load_manipulator("planar3r")


def make_scene(model_name="planar3r", boxes=None, zeta=1.0, dq_max=0.05,
               max_steps=300, target=None, q_home=None, safety_offset=0.05,
               e_p_max=0.01, e_o_max=0.02):
    model = load_manipulator(model_name)
    cfg = {
        "name": "test",
        "boxes": boxes if boxes is not None else [],
        "safety_offset": safety_offset,
        "zeta": zeta,
        "max_steps": max_steps,
        "dq_max": dq_max,
        "allowable_errors": {"position": e_p_max, "orientation": e_o_max},
        "target_region": target or {
            "min": [0.5, 0.3, 0.0],
            "max": [0.8, 0.6, 0.0],
            "euler_zyx": [0.7853981633974483, 0.0, 0.0],
        },
    }
    if q_home is not None:
        cfg["q_home"] = q_home
    return build_scene(cfg, model=model)


def box_dict(lo, hi):
    return {"min": list(lo), "max": list(hi)}


@pytest.fixture(scope="session")
def empty_scene():
    return make_scene(boxes=[])


@pytest.fixture(scope="session")
def boxy_scene():
    return make_scene(boxes=[
        box_dict([0.2, 0.6, -0.1], [0.4, 0.8, 0.1]),
        box_dict([0.55, 0.0, -0.1], [0.75, 0.12, 0.1]),
    ], q_home=[2.0, -0.7, -0.7])


def random_box(rng, span=2.0):
    from armplan.geometry import Aabb
    center = rng.uniform(-span / 2, span / 2, 3)
    half = rng.uniform(0.05, 0.8, 3)
    return Aabb(center - half, center + half)


def random_segment(rng, span=3.0):
    from armplan.geometry import Segment
    return Segment(rng.uniform(-span / 2, span / 2, 3),
                   rng.uniform(-span / 2, span / 2, 3))
