"""Dev trial: static-room failed-view quality after the static phase.

The failed view is one (camera, timestamp) pair; the same camera's frames
at the other timestamps stay in training, mirroring a camera that fails at
inference time after healthy operation.
"""
import sys
import time

import numpy as np

sys.path.insert(0, "src")

from camfield.model import FieldModel
from camfield.recovery import psnr
from camfield.scene import render_labels
from camfield.templates import build_template
from camfield.train import Trainer, TrainData, TrainConfig

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
scene, _ = build_template("static-room", width=64, height=64)
failed_cam, failed_t = "a1_cam1", 1
print(f"hold out ({failed_cam}, t={failed_t}); timestamps {scene.timestamps}")

t0 = time.time()
data = TrainData.from_scene(scene, scene.cameras(), oracle_steps=512,
                            hold_out=[(failed_cam, failed_t)])
print(f"labels: {time.time()-t0:.0f}s")

model = FieldModel(scene, np.random.default_rng(0))
cfg = TrainConfig(static_steps=steps, dynamic_steps=0, seed=0)
tr = Trainer(model, data, cfg)

t0 = time.time()
for i in range(cfg.static_steps):
    row = tr.train_step("static")
    if (i + 1) % 250 == 0:
        print(f"step {i+1}: loss {row['loss_static']:.5f} "
              f"({(time.time()-t0)/(i+1):.2f}s/step)", flush=True)
train_time = time.time() - t0

cam = scene.camera_by_id(failed_cam)
gt = render_labels(scene, cam, failed_t, steps=512)["image"]
for K in (96, 160):
    img = model.render_image(cam, failed_t, mode="static", K=K)
    print(f"failed-view PSNR (K={K}): {psnr(img, gt):.2f} dB")
print(f"train time: {train_time/60:.1f} min for {steps} steps")
