"""Collision-free motion planning for serial manipulators.

Analytic task-space RL: overlap-based obstacle rewards, candidate-exploration
actor-critic training, and trajectory diffusion from demonstrations.
"""

from .geometry import (Aabb, BoxFrame, Segment, expand_box, overlap_length,
                       segment_box_distance, segment_intersects_box,
                       slab_lambdas)
from .kinematics import (DhRow, ManipulatorModel, RigidTransform, dh_transform,
                         forward_kinematics, link_segments, load_manipulator,
                         tcp_pose)
from .environment import (Pose, Scene, StateVector, Transition, build_scene,
                          load_scene, min_clearance, observe, pose_reward,
                          sample_goal, step, uoar_reward, verify_trajectory)

__version__ = "0.1.0"
