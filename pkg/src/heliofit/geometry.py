"""Differentiable mesh evaluation: morphable-model deformation, rigid pose,
welded vertex normals, UV texture sampling, and fragment displacement.

Everything here is pure torch so gradients flow to shape/expression/pose
codes, the displacement map, and any sampled texture.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .scene import MorphableModel


def rodrigues(axis_angle: torch.Tensor) -> torch.Tensor:
    """Axis-angle (3,) to rotation matrix, stable near zero angle."""
    theta = torch.linalg.norm(axis_angle)
    theta2 = theta * theta
    small = theta < 1e-8
    # sin(t)/t and (1-cos t)/t^2 with series fallbacks to keep autograd finite
    safe = torch.where(small, torch.ones_like(theta), theta)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(safe) / safe)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(safe)) / (safe * safe))
    x, y, z = axis_angle[0], axis_angle[1], axis_angle[2]
    zero = torch.zeros_like(x)
    k = torch.stack([
        torch.stack([zero, -z, y]),
        torch.stack([z, zero, -x]),
        torch.stack([-y, x, zero]),
    ])
    eye = torch.eye(3, dtype=axis_angle.dtype, device=axis_angle.device)
    return eye + a * k + b * (k @ k)


def weld_groups(template_vertices: np.ndarray) -> np.ndarray:
    """Group vertices that share identical positions (UV seams, poles).

    Returns an int64 array mapping each vertex to a canonical group id. Used
    to accumulate normals across duplicated vertices so shading has no seam.
    """
    keys = np.ascontiguousarray(template_vertices).view(
        [("x", np.float64), ("y", np.float64), ("z", np.float64)]
    ).ravel()
    _, groups = np.unique(keys, return_inverse=True)
    return groups.astype(np.int64)


@dataclass
class TorchModel:
    """Morphable model staged as torch tensors for one compute dtype."""

    template: torch.Tensor       # (n, 3)
    shape_basis: torch.Tensor    # (n*3, K_beta)
    expr_basis: torch.Tensor     # (n*3, K_psi)
    faces: torch.Tensor          # (m, 3) long
    uv: torch.Tensor             # (n, 2)
    landmark_indices: torch.Tensor
    cluster_map: torch.Tensor    # (Hc, Wc) long
    weld: torch.Tensor           # (n,) long
    n_weld_groups: int

    @classmethod
    def from_model(cls, model: MorphableModel, dtype: torch.dtype = torch.float32) -> "TorchModel":
        n = model.n_vertices
        groups = weld_groups(model.template_vertices)
        return cls(
            template=torch.as_tensor(model.template_vertices, dtype=dtype),
            shape_basis=torch.as_tensor(
                model.shape_basis.reshape(n * 3, -1), dtype=dtype
            ),
            expr_basis=torch.as_tensor(
                model.expression_basis.reshape(n * 3, -1), dtype=dtype
            ),
            faces=torch.as_tensor(model.faces, dtype=torch.long),
            uv=torch.as_tensor(model.uv, dtype=dtype),
            landmark_indices=torch.as_tensor(model.landmark_indices, dtype=torch.long),
            cluster_map=torch.as_tensor(model.cluster_map, dtype=torch.long),
            weld=torch.as_tensor(groups),
            n_weld_groups=int(groups.max()) + 1 if groups.size else 0,
        )


def vertex_normals(vertices: torch.Tensor, faces: torch.Tensor,
                   weld: torch.Tensor, n_groups: int) -> torch.Tensor:
    """Area-weighted face-normal accumulation, welded across duplicates."""
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    fn = torch.cross(v1 - v0, v2 - v0, dim=1)  # length 2*area
    acc = vertices.new_zeros((n_groups, 3))
    g = weld[faces].reshape(-1)
    acc = acc.index_add(0, g, fn.repeat_interleave(3, dim=0).reshape(-1, 3))
    acc = acc / torch.linalg.norm(acc, dim=1, keepdim=True).clamp_min(1e-20)
    return acc[weld]


def eval_coarse_mesh(tm: TorchModel, shape: torch.Tensor, expression: torch.Tensor,
                     pose: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Posed morphable mesh and its unit vertex normals.

    vertices = R(pose) @ (template + shape_basis*shape + expr_basis*expression)
    """
    if shape.shape[0] != tm.shape_basis.shape[1]:
        raise ValueError(
            f"shape code has {shape.shape[0]} coefficients, basis expects {tm.shape_basis.shape[1]}"
        )
    if expression.shape[0] != tm.expr_basis.shape[1]:
        raise ValueError(
            f"expression code has {expression.shape[0]} coefficients, "
            f"basis expects {tm.expr_basis.shape[1]}"
        )
    n = tm.template.shape[0]
    offs = (tm.shape_basis @ shape + tm.expr_basis @ expression).reshape(n, 3)
    rot = rodrigues(pose)
    verts = (tm.template + offs) @ rot.T
    normals = vertex_normals(verts, tm.faces, tm.weld, tm.n_weld_groups)
    return verts, normals


def landmarks_3d(tm: TorchModel, vertices: torch.Tensor) -> torch.Tensor:
    return vertices[tm.landmark_indices]


def sample_texture(tex: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Bilinear sample with clamp-to-edge addressing.

    tex: (H, W) or (H, W, C); uv: (k, 2) with texel centers at
    ((i + 0.5) / W, (r + 0.5) / H). Returns (k,) or (k, C).
    """
    squeeze = tex.ndim == 2
    if squeeze:
        tex = tex[:, :, None]
    h, w, _ = tex.shape
    x = uv[:, 0] * w - 0.5
    y = uv[:, 1] * h - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = (x - x0).unsqueeze(1)
    fy = (y - y0).unsqueeze(1)
    x0i = x0.long().clamp(0, w - 1)
    x1i = (x0.long() + 1).clamp(0, w - 1)
    y0i = y0.long().clamp(0, h - 1)
    y1i = (y0.long() + 1).clamp(0, h - 1)
    t00 = tex[y0i, x0i]
    t10 = tex[y0i, x1i]
    t01 = tex[y1i, x0i]
    t11 = tex[y1i, x1i]
    out = (
        t00 * (1 - fx) * (1 - fy)
        + t10 * fx * (1 - fy)
        + t01 * (1 - fx) * fy
        + t11 * fx * fy
    )
    return out[:, 0] if squeeze else out


def sample_nearest_long(tex: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Nearest-texel lookup for integer id textures (cluster map)."""
    h, w = tex.shape
    x = (uv[:, 0] * w - 0.5).round().long().clamp(0, w - 1)
    y = (uv[:, 1] * h - 0.5).round().long().clamp(0, h - 1)
    return tex[y, x]


def displace_positions(positions: torch.Tensor, normals: torch.Tensor,
                       uv: torch.Tensor, displacement: torch.Tensor) -> torch.Tensor:
    """Offset fragment positions along the coarse normal by the sampled map."""
    delta = sample_texture(displacement, uv)
    return positions + delta.unsqueeze(1) * normals


def _screen_space_normals(pos_img: torch.Tensor, covered: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Cross product of horizontal/vertical position differences per pixel.

    Uses central differences where both neighbors are covered, one-sided at
    coverage boundaries. Returns (normals (H,W,3) unnormalized, valid (H,W)).
    """
    h, w, _ = pos_img.shape
    cov = covered

    def shifted(dy: int, dx: int):
        p = torch.zeros_like(pos_img)
        c = torch.zeros_like(cov)
        ys = slice(max(dy, 0), h + min(dy, 0))
        yd = slice(max(-dy, 0), h + min(-dy, 0))
        xs = slice(max(dx, 0), w + min(dx, 0))
        xd = slice(max(-dx, 0), w + min(-dx, 0))
        p[yd, xd] = pos_img[ys, xs]
        c[yd, xd] = cov[ys, xs]
        return p, c

    right, c_r = shifted(0, 1)
    left, c_l = shifted(0, -1)
    down, c_d = shifted(1, 0)
    up, c_u = shifted(-1, 0)

    here = pos_img
    dx_vec = torch.where((c_r & c_l).unsqueeze(-1), right - left,
                         torch.where(c_r.unsqueeze(-1), right - here, here - left))
    dy_vec = torch.where((c_d & c_u).unsqueeze(-1), down - up,
                         torch.where(c_d.unsqueeze(-1), down - here, here - up))
    valid_x = c_r | c_l
    valid_y = c_d | c_u
    n = torch.cross(dy_vec, dx_vec, dim=-1)
    return n, cov & valid_x & valid_y


def displaced_normals(pos_img: torch.Tensor, disp_pos_img: torch.Tensor,
                      coarse_n_img: torch.Tensor, covered: torch.Tensor) -> torch.Tensor:
    """Normals after displacement via screen-space finite differences.

    The finite-difference normal of the displaced surface is compared against
    the finite-difference normal of the undisplaced surface; their difference
    is added to the smooth interpolated coarse normal. The discretization bias
    of the screen-space derivative cancels in the difference, so a zero
    displacement map reproduces the coarse normals exactly. Pixels without
    usable neighbors fall back to the coarse normal.
    """
    n_disp, valid_d = _screen_space_normals(disp_pos_img, covered)
    n_base, valid_b = _screen_space_normals(pos_img, covered)
    valid = valid_d & valid_b

    def unit(v):
        return v / torch.linalg.norm(v, dim=-1, keepdim=True).clamp_min(1e-20)

    n_disp_u = unit(n_disp)
    n_base_u = unit(n_base)
    # orient both toward the coarse normal so the correction has a stable sign
    sign = torch.sign((n_base_u * coarse_n_img).sum(-1, keepdim=True))
    sign = torch.where(sign == 0, torch.ones_like(sign), sign)
    corr = (n_disp_u - n_base_u) * sign
    out = unit(coarse_n_img + torch.where(valid.unsqueeze(-1), corr, torch.zeros_like(corr)))
    return out
