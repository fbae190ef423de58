"""Dataset directory IO.

Layout (all paths relative to the dataset root):

    color/NNNN.png      8-bit RGB
    depth/NNNN.png      16-bit grayscale, millimeters, 0 = invalid
    sem/NNNN.png        8-bit semantic class ids, 255 = unlabeled
    ins/NNNN.png        16-bit instance ids, 0 = none
    poses/NNNN.txt      4x4 row-major camera-to-world transform
    intrinsics.txt      fx fy cx cy W H
    classes.txt         one "<name> <stuff|thing>" line per class id

NNNN is a zero-padded 4-digit frame index shared across subdirectories.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .scene import Camera

VOID_ID = 255  # unlabeled pixels in semantic maps and fused panoptic output


@dataclass
class ClassTable:
    names: list[str]
    is_thing: list[bool]

    def __len__(self) -> int:
        return len(self.names)

    @property
    def thing_ids(self) -> list[int]:
        return [i for i, t in enumerate(self.is_thing) if t]

    @property
    def stuff_ids(self) -> list[int]:
        return [i for i, t in enumerate(self.is_thing) if not t]


@dataclass
class RgbdFrame:
    """One posed RGB-D observation with per-pixel labels."""

    color: np.ndarray     # (H, W, 3) uint8
    depth: np.ndarray     # (H, W) float64 meters, 0 = invalid
    sem: np.ndarray       # (H, W) uint8 class ids, 255 = unlabeled
    ins: np.ndarray       # (H, W) uint16 instance ids, 0 = none
    camera: Camera

    def __post_init__(self):
        shapes = {self.color.shape[:2], self.depth.shape, self.sem.shape, self.ins.shape}
        if len(shapes) != 1:
            raise ValueError(f"frame maps disagree on H x W: {shapes}")


def _frame_name(index: int) -> str:
    return f"{index:04d}"


def write_intrinsics(path, fx, fy, cx, cy, width, height):
    with open(path, "w") as f:
        f.write(f"{fx:.10g} {fy:.10g} {cx:.10g} {cy:.10g} {width} {height}\n")


def read_intrinsics(path):
    vals = open(path).read().split()
    fx, fy, cx, cy = (float(v) for v in vals[:4])
    width, height = int(vals[4]), int(vals[5])
    return fx, fy, cx, cy, width, height


def write_classes(path, table: ClassTable):
    with open(path, "w") as f:
        for name, thing in zip(table.names, table.is_thing):
            f.write(f"{name} {'thing' if thing else 'stuff'}\n")


def read_classes(path) -> ClassTable:
    names, things = [], []
    for line in open(path):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        name, tag = line.split()
        if tag not in ("stuff", "thing"):
            raise ValueError(f"class tag must be stuff/thing, got {tag!r}")
        names.append(name)
        things.append(tag == "thing")
    return ClassTable(names, things)


def write_frame(root, index: int, color, depth_m, sem, ins, cam_to_world):
    """Write one frame's maps and pose. Depth is quantized to millimeters."""
    name = _frame_name(index)
    for sub in ("color", "depth", "sem", "ins", "poses"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    Image.fromarray(np.asarray(color, dtype=np.uint8), "RGB").save(
        os.path.join(root, "color", name + ".png"))
    depth_mm = np.clip(np.round(np.asarray(depth_m) * 1000.0), 0, 65535).astype(np.uint16)
    _save_png16(depth_mm, os.path.join(root, "depth", name + ".png"))
    Image.fromarray(np.asarray(sem, dtype=np.uint8), "L").save(
        os.path.join(root, "sem", name + ".png"))
    _save_png16(np.asarray(ins, dtype=np.uint16), os.path.join(root, "ins", name + ".png"))
    np.savetxt(os.path.join(root, "poses", name + ".txt"),
               np.asarray(cam_to_world, dtype=np.float64), fmt="%.17g")


def _save_png16(arr: np.ndarray, path):
    Image.fromarray(arr.astype(np.int32), "I").convert("I;16").save(path)


def _load_png16(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.uint16)


def list_frame_indices(root) -> list[int]:
    files = sorted(os.listdir(os.path.join(root, "color")))
    return [int(f.split(".")[0]) for f in files if f.endswith(".png")]


def load_frame(root, index: int, near=0.05, far=100.0) -> RgbdFrame:
    name = _frame_name(index)
    color = np.asarray(Image.open(os.path.join(root, "color", name + ".png")), dtype=np.uint8)
    depth = _load_png16(os.path.join(root, "depth", name + ".png")).astype(np.float64) / 1000.0
    sem = np.asarray(Image.open(os.path.join(root, "sem", name + ".png")), dtype=np.uint8)
    ins = _load_png16(os.path.join(root, "ins", name + ".png"))
    cam_to_world = np.loadtxt(os.path.join(root, "poses", name + ".txt")).reshape(4, 4)
    fx, fy, cx, cy, width, height = read_intrinsics(os.path.join(root, "intrinsics.txt"))
    world_to_cam = np.linalg.inv(cam_to_world)
    # re-orthonormalize against inversion round-off
    u, _, vt = np.linalg.svd(world_to_cam[:3, :3])
    world_to_cam[:3, :3] = u @ vt
    camera = Camera(fx, fy, cx, cy, width, height, world_to_cam, near=near, far=far)
    return RgbdFrame(color=color, depth=depth, sem=sem, ins=ins, camera=camera)


def load_dataset(root, near=0.05, far=100.0):
    """Load every frame plus the class table."""
    indices = list_frame_indices(root)
    frames = [load_frame(root, i, near=near, far=far) for i in indices]
    table = read_classes(os.path.join(root, "classes.txt"))
    return frames, table, indices


def split_train_test(indices: list[int], test_every: int) -> tuple[list[int], list[int]]:
    """Hold out every test_every-th frame (0 disables the test split)."""
    if test_every <= 0:
        return list(indices), []
    test = [idx for k, idx in enumerate(indices) if (k + 1) % test_every == 0]
    train = [idx for idx in indices if idx not in test]
    return train, test
