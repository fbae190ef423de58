"""Gaussian scene representation: primitive storage, activations, covariance
construction, density evaluation, and spherical-harmonics color."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# Real spherical-harmonics constants, splatting-ecosystem sign convention.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

SH_DEGREE = 3
N_SH_BASES = (SH_DEGREE + 1) ** 2  # 16

DENSITY_EPS = 1e-9  # diagonal regularizer before covariance inversion


def inverse_sigmoid(x):
    return torch.log(x / (1.0 - x))


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    """Normalize quaternions (..., 4); raises on zero norm."""
    norm = torch.linalg.norm(q, dim=-1, keepdim=True)
    if torch.any(norm == 0):
        raise ValueError("quaternion has zero norm, rotation undefined")
    return q / norm

def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product a*b for (...,4) quaternions in (w,x,y,z) order."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_to_rotmat(q: torch.Tensor) -> torch.Tensor:
    """Unit-normalized (...,4) (w,x,y,z) quaternions to (...,3,3) rotations."""
    q = quat_normalize(q)
    w, x, y, z = q.unbind(-1)
    row0 = torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1)
    row1 = torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1)
    row2 = torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1)
    return torch.stack([row0, row1, row2], dim=-2)


def build_covariance(log_scale: torch.Tensor, rotation: torch.Tensor) -> torch.Tensor:
    """Covariance R S S^T R^T from log scales (...,3) and quaternions (...,4)."""
    R = quat_to_rotmat(rotation)
    s2 = torch.exp(2.0 * log_scale)
    return R @ (s2.unsqueeze(-1) * R.transpose(-1, -2))


def evaluate_density(cov: torch.Tensor, center: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    """Unnormalized Gaussian density exp(-0.5 (x-mu)^T cov^-1 (x-mu)).

    Supports broadcasting: cov (...,3,3), center (...,3), x (...,3).
    The covariance is regularized with DENSITY_EPS * I before inversion so
    degenerate flat Gaussians stay evaluable.
    """
    eye = torch.eye(3, dtype=cov.dtype, device=cov.device)
    cov_reg = cov + DENSITY_EPS * eye
    diff = (x - center).unsqueeze(-1)
    sol = torch.linalg.solve(cov_reg, diff)
    quad = (diff * sol).sum(dim=(-2, -1))
    return torch.exp(-0.5 * quad)


def evaluate_sh(sh_coeffs: torch.Tensor, view_dir: torch.Tensor, degree: int = SH_DEGREE) -> torch.Tensor:
    """Evaluate degree-3 real SH color for unit directions.

    sh_coeffs: (..., 16, 3), view_dir: (..., 3). Returns RGB in [0, 1] after
    the +0.5 DC offset convention.
    """
    if not 0 <= degree <= SH_DEGREE:
        raise ValueError(f"sh degree must be in [0, {SH_DEGREE}], got {degree}")
    sh = sh_coeffs
    result = SH_C0 * sh[..., 0, :]
    if degree >= 1:
        x = view_dir[..., 0:1]
        y = view_dir[..., 1:2]
        z = view_dir[..., 2:3]
        result = result - SH_C1 * y * sh[..., 1, :] + SH_C1 * z * sh[..., 2, :] - SH_C1 * x * sh[..., 3, :]
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        result = (
            result
            + SH_C2[0] * xy * sh[..., 4, :]
            + SH_C2[1] * yz * sh[..., 5, :]
            + SH_C2[2] * (2.0 * zz - xx - yy) * sh[..., 6, :]
            + SH_C2[3] * xz * sh[..., 7, :]
            + SH_C2[4] * (xx - yy) * sh[..., 8, :]
        )
    if degree >= 3:
        result = (
            result
            + SH_C3[0] * y * (3.0 * xx - yy) * sh[..., 9, :]
            + SH_C3[1] * xy * z * sh[..., 10, :]
            + SH_C3[2] * y * (4.0 * zz - xx - yy) * sh[..., 11, :]
            + SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy) * sh[..., 12, :]
            + SH_C3[4] * x * (4.0 * zz - xx - yy) * sh[..., 13, :]
            + SH_C3[5] * z * (xx - yy) * sh[..., 14, :]
            + SH_C3[6] * x * (xx - yy - zz) * sh[..., 15, :]
        )
    return torch.clamp(result + 0.5, 0.0, 1.0)


def rgb_to_sh_dc(rgb: torch.Tensor) -> torch.Tensor:
    """Inverse of the DC convention: coefficients so evaluate_sh returns rgb."""
    return (rgb - 0.5) / SH_C0


@dataclass
class Camera:
    """Pinhole camera: intrinsics in pixels, 4x4 world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not self.near < self.far:
            raise ValueError("near must be less than far")
        R = self.world_to_cam[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6):
            raise ValueError("pose rotation block is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def cam_to_world(self) -> np.ndarray:
        inv = np.eye(4)
        inv[:3, :3] = self.rotation.T
        inv[:3, 3] = self.center
        return inv

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass
class GaussianCloud:
    """Per-primitive parameters of the scene.

    Scales and opacities are stored pre-activation (log / logit); semantic and
    instance features are raw logits consumed by the decoding branches.
    """

    positions: torch.Tensor      # (N, 3) world meters
    log_scales: torch.Tensor     # (N, 3)
    rotations: torch.Tensor      # (N, 4) unit quaternions (w,x,y,z)
    sh_coeffs: torch.Tensor      # (N, 16, 3)
    opacity_logits: torch.Tensor # (N,)
    sem_features: torch.Tensor   # (N, n_sem)
    ins_features: torch.Tensor   # (N, n_ins)

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def n_sem(self) -> int:
        return self.sem_features.shape[1]

    @property
    def n_ins(self) -> int:
        return self.ins_features.shape[1]

    def activated_scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    def activated_opacity(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    def unit_rotations(self) -> torch.Tensor:
        return quat_normalize(self.rotations)

    def covariances(self) -> torch.Tensor:
        return build_covariance(self.log_scales, self.rotations)

    def parameters(self) -> dict[str, torch.Tensor]:
        return {
            "positions": self.positions,
            "log_scales": self.log_scales,
            "rotations": self.rotations,
            "sh_coeffs": self.sh_coeffs,
            "opacity_logits": self.opacity_logits,
            "sem_features": self.sem_features,
            "ins_features": self.ins_features,
        }

    def requires_grad_(self, flag: bool = True) -> "GaussianCloud":
        for p in self.parameters().values():
            p.requires_grad_(flag)
        return self

    def detached_copy(self) -> "GaussianCloud":
        return GaussianCloud(**{k: v.detach().clone() for k, v in self.parameters().items()})

    def renormalize_rotations_(self):
        """In-place quaternion renormalization, applied after optimizer steps."""
        with torch.no_grad():
            self.rotations /= torch.linalg.norm(self.rotations, dim=-1, keepdim=True)

    def validate(self):
        if torch.any(self.activated_scales() <= 0):
            raise ValueError("activated scales must be strictly positive")
        norms = torch.linalg.norm(self.rotations, dim=-1)
        if torch.any((norms - 1.0).abs() > 1e-6):
            raise ValueError("stored quaternions must have unit norm within 1e-6")
        op = self.activated_opacity()
        if torch.any((op <= 0) | (op >= 1)):
            raise ValueError("activated opacities must lie in (0,1)")


# --- PLY export/import (splatting-ecosystem attribute layout) -------------

def _ply_property_names(n_sem: int, n_ins: int) -> list[str]:
    names = ["x", "y", "z"]
    names += [f"f_dc_{i}" for i in range(3)]
    names += [f"f_rest_{i}" for i in range(45)]
    names += ["opacity"]
    names += [f"scale_{i}" for i in range(3)]
    names += [f"rot_{i}" for i in range(4)]
    names += [f"sem_{i}" for i in range(n_sem)]
    names += [f"ins_{i}" for i in range(n_ins)]
    return names


def export_ply(cloud: GaussianCloud, path) -> None:
    """Write the cloud as binary little-endian PLY, float32 attributes.

    f_rest is stored channel-major (15 coefficients of R, then G, then B) to
    match the common splatting attribute layout.
    """
    n = len(cloud)
    names = _ply_property_names(cloud.n_sem, cloud.n_ins)
    with torch.no_grad():
        dc = cloud.sh_coeffs[:, 0, :]                              # (N,3)
        rest = cloud.sh_coeffs[:, 1:, :].transpose(1, 2).reshape(n, 45)
        cols = [
            cloud.positions,
            dc,
            rest,
            cloud.opacity_logits.unsqueeze(1),
            cloud.log_scales,
            cloud.rotations,
            cloud.sem_features,
            cloud.ins_features,
        ]
        data = torch.cat(cols, dim=1).cpu().numpy().astype(np.float32)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.tobytes())


def import_ply(path) -> GaussianCloud:
    """Read a cloud written by export_ply. Values stay bit-identical through
    a float32 round trip."""
    with open(path, "rb") as f:
        names = []
        n = None
        while True:
            line = f.readline().decode("ascii").strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            elif line.startswith("property float"):
                names.append(line.split()[-1])
            elif line == "end_header":
                break
            elif line == "" :
                raise ValueError("truncated PLY header")
        raw = np.frombuffer(f.read(), dtype=np.float32).reshape(n, len(names))
    col = {name: i for i, name in enumerate(names)}
    n_sem = sum(1 for name in names if name.startswith("sem_"))
    n_ins = sum(1 for name in names if name.startswith("ins_"))

    def take(prefix, count):
        idx = [col[f"{prefix}{i}"] for i in range(count)]
        return torch.from_numpy(raw[:, idx].astype(np.float64))

    positions = torch.from_numpy(raw[:, [col["x"], col["y"], col["z"]]].astype(np.float64))
    dc = take("f_dc_", 3)
    rest = take("f_rest_", 45).reshape(n, 3, 15).transpose(1, 2)
    sh = torch.cat([dc.unsqueeze(1), rest], dim=1)
    return GaussianCloud(
        positions=positions,
        log_scales=take("scale_", 3),
        rotations=take("rot_", 4),
        sh_coeffs=sh,
        opacity_logits=torch.from_numpy(raw[:, col["opacity"]].astype(np.float64)),
        sem_features=take("sem_", n_sem),
        ins_features=take("ins_", n_ins),
    )
