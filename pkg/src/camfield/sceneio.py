"""File formats: scene documents, images, and raw label grids.

Scene files are YAML mappings (schema documented in the README): bounds,
background, timestamps, static/dynamic primitives, and cameras grouped per
agent (pose given as position + look_at + up).  Images are 8-bit RGB PNG.
Masks and flows are raw little-endian grids with a small self-describing
header: magic ``CFGR``, version, dtype code, ndim, dims.
"""

import numpy as np
import yaml
from PIL import Image

from .geometry import Camera, look_at_rotation
from .scene import Primitive, Scene

GRID_MAGIC = b"CFGR"
GRID_VERSION = 1
_DTYPES = {0: "<f8", 1: "<f4", 2: "<u1"}
_DTYPE_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1, np.dtype("u1"): 2}


# ----------------------------------------------------------------- images

def write_image(path, image):
    """Save a float image in [0, 1] (H, W, 3) as 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path, format="PNG")


def read_image(path):
    """Load an 8-bit image back to float RGB in [0, 1]."""
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


# ------------------------------------------------------------- raw grids

def write_grid(path, array):
    arr = np.ascontiguousarray(array)
    if arr.dtype == np.float64:
        arr = arr.astype("<f8")
    elif arr.dtype == np.float32:
        arr = arr.astype("<f4")
    elif arr.dtype == np.uint8:
        pass
    else:
        arr = arr.astype("<f8")
    code = _DTYPE_CODES[arr.dtype]
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(np.uint8(GRID_VERSION).tobytes())
        fh.write(np.uint8(code).tobytes())
        fh.write(np.uint8(arr.ndim).tobytes())
        fh.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        fh.write(arr.tobytes())


def read_grid(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != GRID_MAGIC:
        raise ValueError("not a grid file")
    version, code, ndim = blob[4], blob[5], blob[6]
    if version != GRID_VERSION:
        raise ValueError(f"grid version {version} != {GRID_VERSION}")
    dims = np.frombuffer(blob[7:7 + 4 * ndim], dtype="<u4").astype(int)
    data = np.frombuffer(blob[7 + 4 * ndim:], dtype=_DTYPES[code])
    if data.size != int(np.prod(dims)):
        raise ValueError("grid payload truncated")
    return data.reshape(tuple(dims)).copy()


# ------------------------------------------------------------ scene files

def _prim_to_doc(p):
    doc = {"shape": p.shape, "density": float(p.density),
           "albedo": [float(v) for v in p.albedo]}
    if p.shape == "ground":
        doc["height"] = float(p.height)
    else:
        if p.trajectory is not None:
            doc["trajectory"] = {int(t): [float(v) for v in pos]
                                 for t, pos in sorted(p.trajectory.items())}
        else:
            doc["center"] = [float(v) for v in p.center]
        if p.shape == "box":
            doc["size"] = [float(v) for v in p.size]
        elif p.shape == "sphere":
            doc["radius"] = float(p.radius)
    return doc


def _prim_from_doc(doc):
    return Primitive(
        shape=doc["shape"], density=float(doc["density"]),
        albedo=np.array(doc["albedo"], dtype=np.float64),
        center=np.array(doc["center"], dtype=np.float64) if "center" in doc else None,
        size=np.array(doc["size"], dtype=np.float64) if "size" in doc else None,
        radius=float(doc.get("radius", 0.0)),
        height=float(doc.get("height", 0.0)),
        trajectory=doc.get("trajectory"),
    )


def _camera_to_doc(cam, pose_doc):
    doc = {"id": cam.id, "fx": float(cam.fx), "fy": float(cam.fy),
           "cx": float(cam.cx), "cy": float(cam.cy),
           "width": int(cam.width), "height": int(cam.height)}
    doc.update(pose_doc)
    return doc


def scene_to_doc(scene, poses=None):
    """Mapping ready for YAML dump.  ``poses`` optionally maps camera id to
    the authored {position, look_at, up}; otherwise rotations are stored
    explicitly."""
    agents = {}
    for aid in sorted(scene.agents):
        cams = []
        for cam in scene.agents[aid]:
            if poses and cam.id in poses:
                pose_doc = {k: [float(v) for v in vec]
                            for k, vec in poses[cam.id].items()}
            else:
                pose_doc = {"position": [float(v) for v in cam.position],
                            "rotation": [float(v) for v in cam.rotation.ravel()]}
            cams.append(_camera_to_doc(cam, pose_doc))
        agents[aid] = cams
    return {
        "name": scene.name,
        "bounds": {"min": [float(v) for v in scene.bounds_min],
                   "max": [float(v) for v in scene.bounds_max]},
        "background": [float(v) for v in scene.background],
        "timestamps": [int(t) for t in scene.timestamps],
        "static_primitives": [_prim_to_doc(p) for p in scene.static_primitives],
        "dynamic_primitives": [_prim_to_doc(p) for p in scene.dynamic_primitives],
        "agents": agents,
    }


def save_scene(path, scene, poses=None):
    with open(path, "w") as fh:
        yaml.safe_dump(scene_to_doc(scene, poses=poses), fh,
                       sort_keys=True, default_flow_style=None)


def scene_from_doc(doc):
    agents = {}
    for aid, cams in doc.get("agents", {}).items():
        out = []
        for c in cams:
            if "rotation" in c:
                R = np.array(c["rotation"], dtype=np.float64).reshape(3, 3)
            else:
                R = look_at_rotation(c["position"], c["look_at"],
                                     c.get("up", (0.0, 0.0, 1.0)))
            out.append(Camera(id=c["id"], agent_id=aid,
                              position=np.array(c["position"], dtype=np.float64),
                              rotation=R, fx=float(c["fx"]), fy=float(c["fy"]),
                              cx=float(c["cx"]), cy=float(c["cy"]),
                              width=int(c["width"]), height=int(c["height"])))
        agents[aid] = out
    return Scene(
        static_primitives=[_prim_from_doc(p) for p in doc.get("static_primitives", [])],
        dynamic_primitives=[_prim_from_doc(p) for p in doc.get("dynamic_primitives", [])],
        bounds_min=np.array(doc["bounds"]["min"], dtype=np.float64),
        bounds_max=np.array(doc["bounds"]["max"], dtype=np.float64),
        background=np.array(doc["background"], dtype=np.float64),
        timestamps=doc["timestamps"],
        agents=agents,
        name=doc.get("name", "scene"),
    )


def load_scene(path):
    with open(path) as fh:
        return scene_from_doc(yaml.safe_load(fh))
