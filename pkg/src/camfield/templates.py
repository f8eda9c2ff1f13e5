"""Canonical scene templates.

Each builder returns (Scene, poses) where poses preserves the authored
position/look_at/up triples for the scene file.  Templates are fully
deterministic: the same arguments always produce the same scene document.
"""

import numpy as np

from .geometry import Camera, look_at_rotation
from .scene import Primitive, Scene

DENSITY = 60.0


def _camera(cam_id, agent_id, position, look_at, width, height, focal):
    R = look_at_rotation(position, look_at)
    cam = Camera(id=cam_id, agent_id=agent_id, position=np.array(position, dtype=np.float64),
                 rotation=R, fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
                 width=width, height=height)
    pose = {"position": list(map(float, position)), "look_at": list(map(float, look_at)),
            "up": [0.0, 0.0, 1.0]}
    return cam, pose


def _rig(specs, width, height, focal):
    agents, poses = {}, {}
    for agent_id, cam_id, pos, target in specs:
        cam, pose = _camera(cam_id, agent_id, pos, target, width, height, focal)
        agents.setdefault(agent_id, []).append(cam)
        poses[cam_id] = pose
    return agents, poses


def static_room(width=64, height=64, focal=None, n_times=3):
    """Closed static scene: ground, three boxes, one sphere, four cameras
    on two agents all looking into the room center.  Several identical
    timestamps so a camera can fail at one of them while its healthy
    frames at the others join training."""
    if focal is None:
        focal = 0.75 * width           # ~67 degree horizontal field of view
    statics = [
        Primitive(shape="ground", density=DENSITY, albedo=[0.52, 0.52, 0.50], height=0.2),
        Primitive(shape="box", density=DENSITY, albedo=[0.82, 0.25, 0.20],
                  center=[-1.6, -1.2, 1.0], size=[1.6, 1.6, 1.6]),
        Primitive(shape="box", density=DENSITY, albedo=[0.22, 0.35, 0.80],
                  center=[1.8, 0.8, 0.8], size=[1.4, 1.4, 1.2]),
        Primitive(shape="box", density=DENSITY, albedo=[0.88, 0.78, 0.25],
                  center=[0.2, 2.0, 0.6], size=[1.2, 1.0, 0.8]),
        Primitive(shape="sphere", density=DENSITY, albedo=[0.25, 0.70, 0.30],
                  center=[0.4, -1.8, 0.9], radius=0.7),
    ]
    specs = [
        ("agent0", "a0_cam0", [-4.4, -4.4, 2.6], [0.3, 0.3, 0.7]),
        ("agent0", "a0_cam1", [-4.4, 4.4, 2.6], [0.3, -0.3, 0.7]),
        ("agent1", "a1_cam0", [4.4, 4.4, 2.6], [-0.3, -0.3, 0.7]),
        ("agent1", "a1_cam1", [4.4, -4.4, 2.6], [-0.3, 0.3, 0.7]),
    ]
    agents, poses = _rig(specs, width, height, focal)
    scene = Scene(static_primitives=statics, dynamic_primitives=[],
                  bounds_min=[-6.0, -6.0, -0.5], bounds_max=[6.0, 6.0, 4.5],
                  background=[0.72, 0.84, 0.95],
                  timestamps=list(range(n_times)),
                  agents=agents, name="static-room")
    return scene, poses


def moving_box(width=64, height=64, focal=None, n_times=5):
    """Static room plus one box translating at constant velocity."""
    scene, poses = static_room(width=width, height=height, focal=focal)
    v = np.array([0.5, 0.25, 0.0])
    start = np.array([-1.1, -0.2, 1.0])
    traj = {t: list(start + t * v) for t in range(n_times)}
    mover = Primitive(shape="box", density=DENSITY, albedo=[0.15, 0.72, 0.70],
                      size=[1.3, 1.3, 1.3], trajectory=traj)
    return Scene(static_primitives=scene.static_primitives,
                 dynamic_primitives=[mover],
                 bounds_min=scene.bounds_min, bounds_max=scene.bounds_max,
                 background=scene.background,
                 timestamps=list(range(n_times)),
                 agents=scene.agents, name="moving-box"), poses


def two_agent_intersection(width=64, height=64, focal=None, n_times=5):
    """Road-crossing scene: drivable ground, four corner buildings, two
    vehicles crossing, two agents with two cameras each at opposite
    corners with strongly overlapping frustums."""
    if focal is None:
        focal = 0.6875 * width         # ~72 degree horizontal field of view
    statics = [
        Primitive(shape="ground", density=DENSITY, albedo=[0.46, 0.46, 0.47], height=0.15),
        Primitive(shape="box", density=DENSITY, albedo=[0.72, 0.38, 0.26],
                  center=[-3.6, -3.6, 1.3], size=[2.6, 2.6, 2.6]),
        Primitive(shape="box", density=DENSITY, albedo=[0.30, 0.42, 0.76],
                  center=[3.6, -3.6, 1.1], size=[2.4, 2.4, 2.2]),
        Primitive(shape="box", density=DENSITY, albedo=[0.80, 0.72, 0.34],
                  center=[-3.6, 3.6, 1.0], size=[2.4, 2.4, 2.0]),
        Primitive(shape="box", density=DENSITY, albedo=[0.58, 0.30, 0.62],
                  center=[3.6, 3.6, 1.4], size=[2.6, 2.6, 2.8]),
    ]
    v1 = np.array([0.55, 0.0, 0.0])
    car1_start = np.array([-1.4, -0.9, 0.65])
    v2 = np.array([0.0, -0.5, 0.0])
    car2_start = np.array([0.9, 1.3, 0.65])
    dynamics = [
        Primitive(shape="box", density=DENSITY, albedo=[0.10, 0.70, 0.66],
                  size=[1.5, 0.9, 1.0],
                  trajectory={t: list(car1_start + t * v1) for t in range(n_times)}),
        Primitive(shape="box", density=DENSITY, albedo=[0.92, 0.52, 0.14],
                  size=[0.9, 1.5, 1.0],
                  trajectory={t: list(car2_start + t * v2) for t in range(n_times)}),
    ]
    specs = [
        ("agent0", "a0_cam0", [-5.2, -1.6, 2.8], [1.2, 0.1, 0.6]),
        ("agent0", "a0_cam1", [-1.6, -5.2, 2.8], [0.1, 1.2, 0.6]),
        ("agent1", "a1_cam0", [5.2, 1.6, 2.8], [-1.2, -0.1, 0.6]),
        ("agent1", "a1_cam1", [1.6, 5.2, 2.8], [-0.1, -1.2, 0.6]),
    ]
    agents, poses = _rig(specs, width, height, focal)
    return Scene(static_primitives=statics, dynamic_primitives=dynamics,
                 bounds_min=[-7.0, -7.0, -0.5], bounds_max=[7.0, 7.0, 4.5],
                 background=[0.70, 0.83, 0.94],
                 timestamps=list(range(n_times)),
                 agents=agents, name="two-agent-intersection"), poses


TEMPLATES = {
    "static-room": static_room,
    "moving-box": moving_box,
    "two-agent-intersection": two_agent_intersection,
}


def build_template(name, **kwargs):
    if name not in TEMPLATES:
        raise KeyError(f"unknown scene template {name!r}; "
                       f"choose from {sorted(TEMPLATES)}")
    return TEMPLATES[name](**kwargs)
