import numpy as np
import pytest

from camfield.geometry import Camera, look_at_rotation
from camfield.scene import Primitive, Scene


def make_camera(cam_id="cam", agent_id="agent0", position=(0.0, 0.0, 1.0),
                target=(0.0, 5.0, 1.0), focal=40.0, width=32, height=32):
    pos = np.asarray(position, dtype=np.float64)
    R = look_at_rotation(pos, np.asarray(target, dtype=np.float64))
    return Camera(id=cam_id, agent_id=agent_id, position=pos, rotation=R,
                  fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
                  width=width, height=height)


def axis_camera(cam_id="axis", position=(0.0, 0.0, 0.0), focal=100.0,
                width=64, height=64):
    """Camera with identity rotation: +z optical axis, +x cols, +y rows."""
    return Camera(id=cam_id, agent_id="agent0",
                  position=np.asarray(position, dtype=np.float64),
                  rotation=np.eye(3), fx=focal, fy=focal,
                  cx=width / 2.0, cy=height / 2.0, width=width, height=height)


@pytest.fixture
def small_scene():
    """Two static solids, one moving box, two cameras, three timestamps."""
    statics = [
        Primitive(shape="ground", density=50.0, albedo=[0.5, 0.5, 0.5], height=0.2),
        Primitive(shape="box", density=50.0, albedo=[0.8, 0.2, 0.2],
                  center=[-1.0, 1.0, 0.8], size=[1.2, 1.2, 1.2]),
    ]
    mover = Primitive(shape="box", density=50.0, albedo=[0.1, 0.7, 0.7],
                      size=[1.0, 1.0, 1.0],
                      trajectory={t: [0.5 + 0.4 * t, -0.5, 0.7] for t in range(3)})
    cams = {
        "agent0": [make_camera("c0", "agent0", (-3.5, -3.5, 2.0), (0.0, 0.0, 0.6),
                               focal=24.0, width=24, height=24)],
        "agent1": [make_camera("c1", "agent1", (3.5, -3.5, 2.0), (0.0, 0.0, 0.6),
                               focal=24.0, width=24, height=24)],
    }
    return Scene(static_primitives=statics, dynamic_primitives=[mover],
                 bounds_min=[-5.0, -5.0, -0.5], bounds_max=[5.0, 5.0, 3.5],
                 background=[0.7, 0.8, 0.9], timestamps=[0, 1, 2],
                 agents=cams, name="small")


@pytest.fixture
def tiny_trainer(small_scene):
    """Small but complete trainer for fast pipeline tests."""
    from camfield.model import FieldModel
    from camfield.train import TrainConfig, TrainData, Trainer

    data = TrainData.from_scene(small_scene, small_scene.cameras(),
                                oracle_steps=96)
    model = FieldModel(small_scene, np.random.default_rng(7), levels=4,
                       base_resolution=8, finest_resolution=48,
                       table_size=2**12, hidden=32, code_dim=8,
                       bev_channels=8, bev_dims=(12, 12, 12))
    cfg = TrainConfig(static_steps=8, dynamic_steps=4, rays_per_batch=96,
                      dynamic_rays_per_batch=48, samples_per_ray=12, seed=3)
    return Trainer(model, data, cfg)
