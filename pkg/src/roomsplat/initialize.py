"""Coarse scene bootstrap: depth back-projection, multi-frame fusion, voxel
downsampling, and Gaussian cloud initialization from the labeled points."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial import cKDTree

from .dataset import RgbdFrame, VOID_ID
from .scene import GaussianCloud, inverse_sigmoid, rgb_to_sh_dc

DEFAULT_VOXEL_SIZE = 0.02   # meters, desk scale
LABEL_LOGIT = 5.0           # one-hot logit magnitude for feature init
INIT_OPACITY = 0.1
FALLBACK_SCALE = 0.1        # meters, used when a cloud is too small for kNN


@dataclass
class LabeledPointCloud:
    positions: np.ndarray    # (N, 3) world meters
    colors: np.ndarray       # (N, 3) in [0, 1]
    sem_ids: np.ndarray      # (N,) uint8
    ins_ids: np.ndarray      # (N,) uint16
    view_counts: np.ndarray  # (N,) source-view count per point

    def __post_init__(self):
        n = {len(self.positions), len(self.colors), len(self.sem_ids),
             len(self.ins_ids), len(self.view_counts)}
        if len(n) != 1:
            raise ValueError("point cloud arrays must be parallel")

    def __len__(self) -> int:
        return len(self.positions)


def backproject_depth(frame: RgbdFrame) -> LabeledPointCloud:
    """Lift valid-depth pixels to labeled world points.

    Pixel (u, v) with depth d maps to camera point ((u-cx)d/fx, (v-cy)d/fy, d)
    and then through the inverse pose.
    """
    cam = frame.camera
    h, w = frame.depth.shape
    v, u = np.mgrid[0:h, 0:w]
    valid = frame.depth > 0
    u, v = u[valid].astype(np.float64), v[valid].astype(np.float64)
    d = frame.depth[valid]
    pts_cam = np.stack([(u - cam.cx) * d / cam.fx, (v - cam.cy) * d / cam.fy, d], axis=1)
    c2w = cam.cam_to_world
    pts_world = pts_cam @ c2w[:3, :3].T + c2w[:3, 3]
    return LabeledPointCloud(
        positions=pts_world,
        colors=frame.color[valid].astype(np.float64) / 255.0,
        sem_ids=frame.sem[valid],
        ins_ids=frame.ins[valid],
        view_counts=np.ones(len(pts_world), dtype=np.int64),
    )


def fuse_frames(frames: list[RgbdFrame]) -> LabeledPointCloud:
    """Concatenate the per-frame back-projections."""
    if not frames:
        raise ValueError("fuse_frames needs at least one frame")
    clouds = [backproject_depth(f) for f in frames]
    return LabeledPointCloud(
        positions=np.concatenate([c.positions for c in clouds]),
        colors=np.concatenate([c.colors for c in clouds]),
        sem_ids=np.concatenate([c.sem_ids for c in clouds]),
        ins_ids=np.concatenate([c.ins_ids for c in clouds]),
        view_counts=np.concatenate([c.view_counts for c in clouds]),
    )


def _majority_per_group(group_idx: np.ndarray, ids: np.ndarray, n_groups: int) -> np.ndarray:
    """Per-group most frequent id, ties broken by the lowest id. ids < 2^16."""
    pair = group_idx.astype(np.int64) * 65536 + ids.astype(np.int64)
    upair, counts = np.unique(pair, return_counts=True)
    g = upair >> 16
    i = upair & 0xFFFF
    order = np.lexsort((i, -counts, g))  # by group, then count desc, then id
    first = np.searchsorted(g[order], np.arange(n_groups))
    return i[order][first]


def voxel_downsample(cloud: LabeledPointCloud, voxel_size: float) -> LabeledPointCloud:
    """One point per occupied voxel: centroid position, mean color,
    majority-vote labels."""
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.positions / voxel_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    k = len(uniq)
    counts = np.bincount(inverse, minlength=k)
    positions = np.zeros((k, 3))
    colors = np.zeros((k, 3))
    np.add.at(positions, inverse, cloud.positions)
    np.add.at(colors, inverse, cloud.colors)
    positions /= counts[:, None]
    colors /= counts[:, None]
    views = np.bincount(inverse, weights=cloud.view_counts, minlength=k).astype(np.int64)
    sem_ids = _majority_per_group(inverse, cloud.sem_ids, k).astype(cloud.sem_ids.dtype)
    ins_ids = _majority_per_group(inverse, cloud.ins_ids, k).astype(cloud.ins_ids.dtype)
    return LabeledPointCloud(positions, colors, sem_ids, ins_ids, views)


def mean_knn_distance(positions: np.ndarray, k: int = 3) -> np.ndarray:
    """Mean Euclidean distance to the k nearest neighbors (fewer if the cloud
    is small); FALLBACK_SCALE for a single point."""
    n = len(positions)
    if n < 2:
        return np.full(n, FALLBACK_SCALE)
    k_eff = min(k, n - 1)
    tree = cKDTree(positions)
    dists, _ = tree.query(positions, k=k_eff + 1)
    return dists[:, 1:].mean(axis=1)


def initialize_cloud(cloud: LabeledPointCloud, n_sem: int, n_ins: int) -> GaussianCloud:
    """Build the initial Gaussian cloud from a labeled point cloud.

    Unlabeled points (sem 255 / ins 0) get all-zero feature logits; labeled
    ones a one-hot logit of LABEL_LOGIT at their id's slot.
    """
    if len(cloud) == 0:
        raise ValueError("cannot initialize from an empty point cloud")
    labeled_sem = cloud.sem_ids[cloud.sem_ids != VOID_ID]
    if labeled_sem.size and labeled_sem.max() >= n_sem:
        raise ValueError(f"semantic id {labeled_sem.max()} exceeds n_sem={n_sem}")
    if cloud.ins_ids.size and cloud.ins_ids.max() >= n_ins:
        raise ValueError(f"instance id {cloud.ins_ids.max()} exceeds n_ins={n_ins}")

    n = len(cloud)
    positions = torch.from_numpy(np.ascontiguousarray(cloud.positions, dtype=np.float64))
    scales = mean_knn_distance(cloud.positions)
    log_scales = torch.from_numpy(np.log(scales))[:, None].repeat(1, 3)
    rotations = torch.zeros(n, 4, dtype=torch.float64)
    rotations[:, 0] = 1.0
    sh = torch.zeros(n, 16, 3, dtype=torch.float64)
    sh[:, 0, :] = rgb_to_sh_dc(torch.from_numpy(np.ascontiguousarray(cloud.colors)))
    opacity = torch.full((n,), float(inverse_sigmoid(torch.tensor(INIT_OPACITY))), dtype=torch.float64)

    sem = torch.zeros(n, n_sem, dtype=torch.float64)
    labeled = cloud.sem_ids != VOID_ID
    sem[torch.from_numpy(labeled.nonzero()[0]),
        torch.from_numpy(cloud.sem_ids[labeled].astype(np.int64))] = LABEL_LOGIT
    ins = torch.zeros(n, n_ins, dtype=torch.float64)
    owned = cloud.ins_ids != 0
    ins[torch.from_numpy(owned.nonzero()[0]),
        torch.from_numpy(cloud.ins_ids[owned].astype(np.int64))] = LABEL_LOGIT

    return GaussianCloud(
        positions=positions,
        log_scales=log_scales,
        rotations=rotations,
        sh_coeffs=sh,
        opacity_logits=opacity,
        sem_features=sem,
        ins_features=ins,
    )
