"""Tile-based differentiable rasterization of per-Gaussian payloads.

Forward model per pixel x': F(x') = sum_i f_i sigma_i prod_{j<i} (1 - sigma_j)
with sigma_i = alpha_i G_i(x') evaluated from the projected 2D splat,
composited front to back. The payload f can be any concatenation of the
supported channels (color, depth, semantic rows, instance rows); an implicit
all-ones column yields the accumulated alpha map.

`rasterize` is the production tiled path; `brute_force_render` follows the
identical contract with a dense per-pixel global-sort implementation and no
early termination, serving as the equivalence oracle. Reverse-mode gradients
for all contributing parameters are exposed through `rasterize_backward`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image

from .scene import Camera, GaussianCloud, evaluate_sh, SH_DEGREE

TILE_SIZE = 16
BLUR_FLOOR = 0.3          # px^2 added to the 2D covariance diagonal
EXTENT_SIGMA = 3.0        # splat footprint cutoff, Mahalanobis sigmas
TERMINATION = 1e-4        # per-pixel transmittance floor for the tiled path

CHANNELS = ("color", "depth", "sem", "ins")


@dataclass
class Splat2D:
    """A single projected Gaussian (payload optional)."""

    mean2d: torch.Tensor          # (2,) pixels
    cov2d: torch.Tensor           # (2, 2)
    z: torch.Tensor               # view-space depth, meters
    opacity: torch.Tensor         # activated alpha
    payload: torch.Tensor | None = None
    index: int = -1


@dataclass
class RenderOutput:
    """Rendered maps; unrequested channels stay None. aux carries the
    autograd handles and per-tile contributor lists for the backward pass."""

    color: torch.Tensor | None = None   # (H, W, 3)
    depth: torch.Tensor | None = None   # (H, W) alpha-weighted blended z
    alpha: torch.Tensor | None = None   # (H, W)
    sem: torch.Tensor | None = None     # (H, W, n_sem)
    ins: torch.Tensor | None = None     # (H, W, n_ins)
    aux: dict | None = None


def normalized_depth(out: RenderOutput, alpha_floor: float = 1e-3) -> torch.Tensor:
    """Blended depth divided by alpha where alpha exceeds the floor."""
    safe = torch.clamp(out.alpha, min=alpha_floor)
    return torch.where(out.alpha > alpha_floor, out.depth / safe, torch.zeros_like(out.depth))


def _camera_tensors(camera: Camera, dtype, device):
    R = torch.as_tensor(camera.rotation, dtype=dtype, device=device)
    t = torch.as_tensor(camera.translation, dtype=dtype, device=device)
    center = torch.as_tensor(camera.center, dtype=dtype, device=device)
    return R, t, center


def _project(positions, covariances, camera: Camera):
    """EWA projection of world Gaussians to image space.

    Returns per-Gaussian pixel means (N,2), 2D covariances (N,2,2) with the
    blur floor added, view depths z (N,), and the in-range visibility mask.
    """
    R, t, _ = _camera_tensors(camera, positions.dtype, positions.device)
    p_cam = positions @ R.T + t
    x, y, z = p_cam.unbind(-1)
    visible = (z > camera.near) & (z < camera.far)
    z_safe = torch.where(z.abs() > 1e-12, z, torch.full_like(z, 1e-12))
    u = camera.fx * x / z_safe + camera.cx
    v = camera.fy * y / z_safe + camera.cy
    means2d = torch.stack([u, v], dim=-1)

    zero = torch.zeros_like(z_safe)
    j0 = torch.stack([camera.fx / z_safe, zero, -camera.fx * x / z_safe**2], dim=-1)
    j1 = torch.stack([zero, camera.fy / z_safe, -camera.fy * y / z_safe**2], dim=-1)
    J = torch.stack([j0, j1], dim=-2)              # (N, 2, 3)
    M = J @ R                                      # (N, 2, 3)
    cov2d = M @ covariances @ M.transpose(-1, -2)
    eye = torch.eye(2, dtype=positions.dtype, device=positions.device)
    cov2d = cov2d + BLUR_FLOOR * eye
    return means2d, cov2d, z, visible


def project_gaussian(position, covariance, camera: Camera) -> Splat2D | None:
    """Project one Gaussian; returns None when the center is culled by the
    near/far range."""
    position = torch.as_tensor(position, dtype=torch.float64)
    covariance = torch.as_tensor(covariance, dtype=torch.float64)
    means2d, cov2d, z, visible = _project(position[None], covariance[None], camera)
    if not bool(visible[0]):
        return None
    return Splat2D(mean2d=means2d[0], cov2d=cov2d[0], z=z[0],
                   opacity=torch.tensor(1.0, dtype=torch.float64))


def _conic(cov2d):
    a = cov2d[..., 0, 0]
    b = cov2d[..., 0, 1]
    d = cov2d[..., 1, 1]
    det = a * d - b * b
    return d / det, -b / det, a / det


class _Prepared:
    """Projection + payload state shared by the tiled and brute-force paths,
    already restricted to visible Gaussians and sorted front to back."""

    def __init__(self, means2d, cov2d, alpha, z, payload, slices, vis_idx,
                 means2d_full, params, width, height, extent_cut):
        self.means2d = means2d
        self.cov2d = cov2d
        self.alpha = alpha
        self.z = z
        self.payload = payload          # (M, C+1), last column all ones
        self.slices = slices            # channel name -> column slice
        self.vis_idx = vis_idx          # (M,) indices into the cloud
        self.means2d_full = means2d_full
        self.params = params
        self.width = width
        self.height = height
        self.extent_cut = extent_cut


def _prepare(cloud: GaussianCloud, camera: Camera, channels, adjusted,
             sem_probs, ins_probs, sh_degree, extent_sigma) -> _Prepared:
    for ch in channels:
        if ch not in CHANNELS:
            raise ValueError(f"unknown channel {ch!r}")
    if "sem" in channels and sem_probs is None:
        raise ValueError("sem channel requested without per-Gaussian sem rows")
    if "ins" in channels and ins_probs is None:
        raise ValueError("ins channel requested without per-Gaussian ins rows")

    if adjusted is None:
        log_scales, rotations = cloud.log_scales, cloud.rotations
    else:
        log_scales, rotations = adjusted
    from .scene import build_covariance

    positions = cloud.positions
    covs = build_covariance(log_scales, rotations)
    means2d_full, cov2d_full, z_full, visible = _project(positions, covs, camera)
    if means2d_full.requires_grad:
        means2d_full.retain_grad()

    vis = torch.nonzero(visible, as_tuple=False).squeeze(1)
    order = torch.argsort(z_full[vis], stable=True)
    vis_idx = vis[order]

    cols = []
    slices = {}
    start = 0
    if "color" in channels:
        _, _, cam_center = _camera_tensors(camera, positions.dtype, positions.device)
        dirs = positions[vis_idx] - cam_center
        dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)
        n_bases = (sh_degree + 1) ** 2
        sh = torch.zeros_like(cloud.sh_coeffs[vis_idx])
        sh[:, :n_bases, :] = cloud.sh_coeffs[vis_idx][:, :n_bases, :]
        cols.append(evaluate_sh(sh, dirs, degree=sh_degree))
        slices["color"] = slice(start, start + 3)
        start += 3
    if "depth" in channels:
        cols.append(z_full[vis_idx].unsqueeze(1))
        slices["depth"] = slice(start, start + 1)
        start += 1
    if "sem" in channels:
        cols.append(sem_probs[vis_idx])
        slices["sem"] = slice(start, start + sem_probs.shape[1])
        start += sem_probs.shape[1]
    if "ins" in channels:
        cols.append(ins_probs[vis_idx])
        slices["ins"] = slice(start, start + ins_probs.shape[1])
        start += ins_probs.shape[1]
    ones = torch.ones(len(vis_idx), 1, dtype=positions.dtype, device=positions.device)
    cols.append(ones)  # implicit alpha column
    payload = torch.cat(cols, dim=1) if cols else ones

    params = dict(cloud.parameters())
    if adjusted is not None:
        params["adjusted_log_scales"] = log_scales
        params["adjusted_rotations"] = rotations
    if sem_probs is not None:
        params["sem_rows"] = sem_probs
    if ins_probs is not None:
        params["ins_rows"] = ins_probs

    return _Prepared(
        means2d=means2d_full[vis_idx],
        cov2d=cov2d_full[vis_idx],
        alpha=cloud.activated_opacity()[vis_idx],
        z=z_full[vis_idx],
        payload=payload,
        slices=slices,
        vis_idx=vis_idx,
        means2d_full=means2d_full,
        params=params,
        width=camera.width,
        height=camera.height,
        extent_cut=float(extent_sigma) ** 2,
    )


def _sigma_rows(prep: _Prepared, rows, px):
    """Opacity contributions sigma (L, P) of splat rows at pixel coords px."""
    mu = prep.means2d[rows]
    c00, c01, c11 = _conic(prep.cov2d[rows])
    d0 = px[None, :, 0] - mu[:, 0:1]
    d1 = px[None, :, 1] - mu[:, 1:2]
    q = c00[:, None] * d0 * d0 + 2.0 * c01[:, None] * d0 * d1 + c11[:, None] * d1 * d1
    g = torch.where(q <= prep.extent_cut, torch.exp(-0.5 * q), torch.zeros_like(q))
    return prep.alpha[rows][:, None] * g


def _finalize(prep: _Prepared, flat, channels, camera, tiles=None) -> RenderOutput:
    h, w = prep.height, prep.width
    out = RenderOutput()
    out.alpha = flat[:, -1].reshape(h, w)
    if "color" in channels:
        out.color = flat[:, prep.slices["color"]].reshape(h, w, 3)
    if "depth" in channels:
        out.depth = flat[:, prep.slices["depth"]].reshape(h, w)
    if "sem" in channels:
        out.sem = flat[:, prep.slices["sem"]].reshape(h, w, -1)
    if "ins" in channels:
        out.ins = flat[:, prep.slices["ins"]].reshape(h, w, -1)
    out.aux = {
        "params": prep.params,
        "means2d": prep.means2d_full,
        "visible": prep.vis_idx,
        "tiles": tiles,
        "channels": tuple(channels),
        "camera": camera,
    }
    return out


def rasterize(cloud: GaussianCloud, camera: Camera, channels=("color",), *,
              adjusted=None, sem_probs=None, ins_probs=None,
              sh_degree: int = SH_DEGREE, termination: float = TERMINATION,
              extent_sigma: float = EXTENT_SIGMA) -> RenderOutput:
    """Tile-based forward pass over 16x16 tiles, front-to-back blending with
    per-pixel termination once transmittance falls below `termination`.

    `adjusted` optionally supplies (log_scales, rotations) overriding the
    cloud's own covariance parameters (the geometry-adjusted source);
    `sem_probs` / `ins_probs` are per-Gaussian payload rows for the panoptic
    channels.
    """
    prep = _prepare(cloud, camera, channels, adjusted, sem_probs, ins_probs,
                    sh_degree, extent_sigma)
    h, w = prep.height, prep.width
    n_channels = prep.payload.shape[1]
    dtype, device = prep.payload.dtype, prep.payload.device
    flat = torch.zeros(h * w, n_channels, dtype=dtype, device=device)
    m = len(prep.vis_idx)
    if m == 0:
        return _finalize(prep, flat, channels, camera, tiles={})

    ntx = (w + TILE_SIZE - 1) // TILE_SIZE
    nty = (h + TILE_SIZE - 1) // TILE_SIZE
    with torch.no_grad():
        hx = EXTENT_SIGMA_SAFE(prep.extent_cut) * torch.sqrt(prep.cov2d[:, 0, 0])
        hy = EXTENT_SIGMA_SAFE(prep.extent_cut) * torch.sqrt(prep.cov2d[:, 1, 1])
        u, v = prep.means2d[:, 0], prep.means2d[:, 1]
        tx0 = torch.clamp(torch.floor((u - hx) / TILE_SIZE).long(), min=0)
        tx1 = torch.clamp(torch.floor((u + hx) / TILE_SIZE).long(), max=ntx - 1)
        ty0 = torch.clamp(torch.floor((v - hy) / TILE_SIZE).long(), min=0)
        ty1 = torch.clamp(torch.floor((v + hy) / TILE_SIZE).long(), max=nty - 1)
        keep = (tx1 >= tx0) & (ty1 >= ty0)
        rows = torch.nonzero(keep, as_tuple=False).squeeze(1)
        if len(rows) == 0:
            return _finalize(prep, flat, channels, camera, tiles={})
        spans_x = (tx1 - tx0 + 1)[rows]
        spans_y = (ty1 - ty0 + 1)[rows]
        n_pairs = spans_x * spans_y
        pair_row = torch.repeat_interleave(rows, n_pairs)
        cum = torch.cumsum(n_pairs, 0) - n_pairs
        local = torch.arange(int(n_pairs.sum()), device=device) - torch.repeat_interleave(cum, n_pairs)
        sx = torch.repeat_interleave(spans_x, n_pairs)
        ox = local % sx
        oy = local // sx
        tile_id = (ty0[pair_row] + oy) * ntx + (tx0[pair_row] + ox)
        tile_order = torch.argsort(tile_id, stable=True)  # keeps z order per tile
        tile_id = tile_id[tile_order]
        pair_row = pair_row[tile_order]
        uniq_tiles, tile_counts = torch.unique_consecutive(tile_id, return_counts=True)
        seg_ends = torch.cumsum(tile_counts, 0)
        seg_starts = seg_ends - tile_counts

    tile_map = {}
    pix_idx_all, vals_all = [], []
    for t_id, s, e in zip(uniq_tiles.tolist(), seg_starts.tolist(), seg_ends.tolist()):
        rows_t = pair_row[s:e]
        tile_map[t_id] = prep.vis_idx[rows_t]
        ty, tx = divmod(t_id, ntx)
        x0, y0 = tx * TILE_SIZE, ty * TILE_SIZE
        x1, y1 = min(x0 + TILE_SIZE, w), min(y0 + TILE_SIZE, h)
        ys = torch.arange(y0, y1, device=device)
        xs = torch.arange(x0, x1, device=device)
        px = torch.stack(torch.meshgrid(xs, ys, indexing="xy"), dim=-1).reshape(-1, 2).to(dtype)
        sig = _sigma_rows(prep, rows_t, px)
        t_post = torch.cumprod(1.0 - sig, dim=0)
        t_pre = torch.cat([torch.ones_like(t_post[:1]), t_post[:-1]], dim=0)
        wgt = sig * t_pre
        if termination > 0:
            with torch.no_grad():
                include = (t_post >= termination).to(dtype)
            wgt = wgt * include
        vals = torch.einsum("lp,lc->pc", wgt, prep.payload[rows_t])
        pix = (ys[:, None] * w + xs[None, :]).reshape(-1)  # row-major, matches px order
        pix_idx_all.append(pix)
        vals_all.append(vals)

    flat = flat.index_add(0, torch.cat(pix_idx_all), torch.cat(vals_all))
    return _finalize(prep, flat, channels, camera, tiles=tile_map)


def EXTENT_SIGMA_SAFE(extent_cut: float) -> float:
    return float(np.sqrt(extent_cut)) if np.isfinite(extent_cut) else 1e6


def brute_force_render(cloud: GaussianCloud, camera: Camera, channels=("color",), *,
                       adjusted=None, sem_probs=None, ins_probs=None,
                       sh_degree: int = SH_DEGREE, extent_sigma: float = EXTENT_SIGMA,
                       pixel_chunk: int = 2048) -> RenderOutput:
    """Oracle renderer: dense per-pixel blending over the global depth sort,
    no tiling, no early termination. Same contract as `rasterize`."""
    prep = _prepare(cloud, camera, channels, adjusted, sem_probs, ins_probs,
                    sh_degree, extent_sigma)
    h, w = prep.height, prep.width
    dtype, device = prep.payload.dtype, prep.payload.device
    m = len(prep.vis_idx)
    flat = torch.zeros(h * w, prep.payload.shape[1], dtype=dtype, device=device)
    if m == 0:
        return _finalize(prep, flat, channels, camera)
    ys, xs = torch.meshgrid(torch.arange(h, device=device),
                            torch.arange(w, device=device), indexing="ij")
    px_all = torch.stack([xs.reshape(-1), ys.reshape(-1)], dim=-1).to(dtype)
    all_rows = torch.arange(m, device=device)
    chunks = []
    for s in range(0, h * w, pixel_chunk):
        px = px_all[s:s + pixel_chunk]
        sig = _sigma_rows(prep, all_rows, px)
        t_post = torch.cumprod(1.0 - sig, dim=0)
        t_pre = torch.cat([torch.ones_like(t_post[:1]), t_post[:-1]], dim=0)
        wgt = sig * t_pre
        chunks.append(torch.einsum("lp,lc->pc", wgt, prep.payload))
    flat = torch.cat(chunks, dim=0)
    return _finalize(prep, flat, channels, camera)


def rasterize_backward(output: RenderOutput, upstream: dict) -> dict:
    """Reverse-mode gradients of the rendered maps w.r.t. every contributing
    parameter tensor. `upstream` maps channel names to pixel gradients."""
    if output.aux is None:
        raise RuntimeError("forward auxiliaries missing; re-render before backward")
    outs, grads = [], []
    for name in ("color", "depth", "alpha", "sem", "ins"):
        if name in upstream:
            tensor = getattr(output, name)
            if tensor is None:
                raise ValueError(f"upstream gradient given for unrendered channel {name!r}")
            outs.append(tensor)
            grads.append(torch.as_tensor(upstream[name], dtype=tensor.dtype).reshape(tensor.shape))
    if not outs:
        raise ValueError("no upstream gradients supplied")
    params = {k: v for k, v in output.aux["params"].items() if v.requires_grad}
    if not params:
        raise RuntimeError("no parameters require grad; enable requires_grad before rendering")
    gs = torch.autograd.grad(outs, list(params.values()), grad_outputs=grads,
                             retain_graph=True, allow_unused=True)
    return {k: (g if g is not None else torch.zeros_like(p))
            for (k, p), g in zip(params.items(), gs)}


# --- rendered-map export ---------------------------------------------------

GRID_MAGIC = b"RSFG"


def save_color_png(image: torch.Tensor, path) -> None:
    arr = (torch.clamp(image.detach(), 0, 1).cpu().numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr, "RGB").save(path)


def save_float_grid(array, path) -> None:
    """Binary grid: 16-byte header (magic, H, W, C as uint32 LE) + float32."""
    arr = np.asarray(array.detach().cpu().numpy() if torch.is_tensor(array) else array,
                     dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(GRID_MAGIC + struct.pack("<III", h, w, c))
        f.write(np.ascontiguousarray(arr).tobytes())


def load_float_grid(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.read(16)
        if header[:4] != GRID_MAGIC:
            raise ValueError(f"bad float-grid magic in {path}")
        h, w, c = struct.unpack("<III", header[4:])
        data = np.frombuffer(f.read(), dtype=np.float32)
    return data.reshape(h, w, c)
