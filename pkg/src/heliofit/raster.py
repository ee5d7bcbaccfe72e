"""Z-buffered triangle rasterization, perspective projection, the orthographic
sun shadow pass, soft shadow comparison, and the soft silhouette.

The rasterization kernel assigns pixels to faces with hard, deterministic
rules (nearest depth, ties to the lowest face index, top-left fill). Those
assignments and barycentrics are treated as constants within an optimization
step; gradients flow through attributes interpolated with them, through the
light-space transform, and through the signed-distance silhouette.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from numba import njit
from scipy import ndimage

from .geometry import sample_texture

# Soft shadow comparison constants (falloff slope, multiplicative tolerance).
SHADOW_K = 800.0
SHADOW_B = 1.0015
# The light camera is pulled back so depths start at a standoff: with the
# multiplicative tolerance, unoccluded fragments then satisfy
# k * (b - 1) * standoff >> 1 and read as fully lit.
SHADOW_STANDOFF = 10.0
SHADOW_MARGIN = 0.05
# Shadow buffer edge = 2x the image resolution.
SHADOW_RES_FACTOR = 2

# Soft silhouette: logistic falloff over ~1.5 px centred on the boundary,
# hard 0/1 beyond BAND_PX so deep interior/exterior pixels carry no graph.
SILH_STEEPNESS = 7.5
SILH_BAND_PX = 3.0


@njit(cache=True)
def _raster_kernel(sx, sy, inv_z, depth_v, valid, faces, height, width,
                   face_id, bary, zbuf):
    for f in range(faces.shape[0]):
        ia, ib, ic = faces[f, 0], faces[f, 1], faces[f, 2]
        if not (valid[ia] and valid[ib] and valid[ic]):
            continue
        x0, y0 = sx[ia], sy[ia]
        x1, y1 = sx[ib], sy[ib]
        x2, y2 = sx[ic], sy[ic]
        area = (x1 - x0) * (y2 - y0) - (y1 - y0) * (x2 - x0)
        if area == 0.0:
            continue
        swapped = False
        if area < 0.0:
            x1, y1, x2, y2 = x2, y2, x1, y1
            area = -area
            swapped = True

        lo_x = int(max(np.floor(min(x0, x1, x2) - 0.5), 0.0))
        hi_x = int(min(np.ceil(max(x0, x1, x2) - 0.5), width - 1.0))
        lo_y = int(max(np.floor(min(y0, y1, y2) - 0.5), 0.0))
        hi_y = int(min(np.ceil(max(y0, y1, y2) - 0.5), height - 1.0))
        if hi_x < lo_x or hi_y < lo_y:
            continue

        # top-left fill: edges are accepted at zero only if top (horizontal,
        # pointing +x) or left (pointing -y); y grows downward
        e0dx, e0dy = x1 - x0, y1 - y0
        e1dx, e1dy = x2 - x1, y2 - y1
        e2dx, e2dy = x0 - x2, y0 - y2
        tl0 = (e0dy == 0.0 and e0dx > 0.0) or e0dy < 0.0
        tl1 = (e1dy == 0.0 and e1dx > 0.0) or e1dy < 0.0
        tl2 = (e2dy == 0.0 and e2dx > 0.0) or e2dy < 0.0

        iza, izb, izc = inv_z[ia], inv_z[ib], inv_z[ic]
        da, db, dc = depth_v[ia], depth_v[ib], depth_v[ic]
        if swapped:
            izb, izc = izc, izb
            db, dc = dc, db

        for py in range(lo_y, hi_y + 1):
            cy = py + 0.5
            for px in range(lo_x, hi_x + 1):
                cx = px + 0.5
                w0 = e1dx * (cy - y1) - e1dy * (cx - x1)
                w1 = e2dx * (cy - y2) - e2dy * (cx - x2)
                w2 = e0dx * (cy - y0) - e0dy * (cx - x0)
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                if (w0 == 0.0 and not tl1) or (w1 == 0.0 and not tl2) or (w2 == 0.0 and not tl0):
                    continue
                b0 = w0 / area
                b1 = w1 / area
                b2 = w2 / area
                denom = b0 * iza + b1 * izb + b2 * izc
                if denom <= 0.0:
                    continue
                depth = (b0 * iza * da + b1 * izb * db + b2 * izc * dc) / denom
                old = zbuf[py, px]
                if depth < old or (depth == old and f < face_id[py, px]):
                    zbuf[py, px] = depth
                    face_id[py, px] = f
                    # store perspective-correct barycentrics in input order
                    pb0 = b0 * iza / denom
                    pb1 = b1 * izb / denom
                    pb2 = b2 * izc / denom
                    if swapped:
                        pb1, pb2 = pb2, pb1
                    bary[py, px, 0] = pb0
                    bary[py, px, 1] = pb1
                    bary[py, px, 2] = pb2


@dataclass
class FragmentBuffer:
    """Per-pixel rasterization output; assignments are autograd constants."""

    face_id: np.ndarray   # (H, W) int32, -1 where empty
    bary: np.ndarray      # (H, W, 3) float64, perspective-corrected
    depth: np.ndarray     # (H, W) float64, +inf where empty
    covered: np.ndarray   # (H, W) bool

    def __post_init__(self):
        self._cache: dict = {}

    @property
    def pixels(self) -> np.ndarray:
        """Linear indices of covered pixels (row-major)."""
        if "pixels" not in self._cache:
            self._cache["pixels"] = np.flatnonzero(self.covered.ravel())
        return self._cache["pixels"]

    def gather(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """(faces (k, 3) long, bary (k, 3)) for covered pixels."""
        key = ("gather", dtype)
        if key not in self._cache:
            flat_faces = self.face_id.ravel()[self.pixels]
            flat_bary = self.bary.reshape(-1, 3)[self.pixels]
            self._cache[key] = (
                torch.as_tensor(flat_faces.astype(np.int64)),
                torch.as_tensor(flat_bary, dtype=dtype),
            )
        return self._cache[key]

    def flat_tensors(self, dtype=torch.float32) -> tuple[torch.Tensor, torch.Tensor]:
        """(face_id (H*W,) long, bary (H*W, 3)) including empty pixels."""
        key = ("flat", dtype)
        if key not in self._cache:
            self._cache[key] = (
                torch.as_tensor(self.face_id.astype(np.int64)).reshape(-1),
                torch.as_tensor(self.bary.reshape(-1, 3), dtype=dtype),
            )
        return self._cache[key]


def rasterize(screen_xy: np.ndarray, cam_z: np.ndarray, depth_values: np.ndarray,
              valid: np.ndarray, faces: np.ndarray, height: int, width: int,
              perspective: bool = True) -> FragmentBuffer:
    """Rasterize faces into a fragment buffer.

    screen_xy: (n, 2) pixel coordinates; cam_z: (n,) camera-space depth used
    for perspective-correct interpolation (pass ones for orthographic);
    depth_values: (n,) value interpolated into the z-buffer.
    """
    if height <= 0 or width <= 0:
        raise ValueError("resolution must be positive")
    face_id = np.full((height, width), -1, dtype=np.int32)
    bary = np.zeros((height, width, 3), dtype=np.float64)
    zbuf = np.full((height, width), np.inf, dtype=np.float64)
    inv_z = 1.0 / cam_z.astype(np.float64) if perspective else np.ones(len(cam_z))
    _raster_kernel(
        screen_xy[:, 0].astype(np.float64), screen_xy[:, 1].astype(np.float64),
        inv_z.astype(np.float64), depth_values.astype(np.float64),
        valid.astype(np.bool_), faces.astype(np.int64), height, width,
        face_id, bary, zbuf,
    )
    return FragmentBuffer(face_id=face_id, bary=bary, depth=zbuf, covered=face_id >= 0)


def project(vertices: torch.Tensor, rotation: torch.Tensor, translation: torch.Tensor,
            scale: torch.Tensor, focal: float, cx: float, cy: float
            ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Perspective projection of world vertices.

    cam = R @ (scale * v) + T; screen = principal + focal * (x, y) / z.
    Returns (screen (n, 2), cam_z (n,), valid (n,) bool). Points at or behind
    the camera plane are flagged invalid and given a safe dummy position.
    """
    cam = (scale * vertices) @ rotation.T + translation
    z = cam[:, 2]
    valid = z > 1e-9
    safe_z = torch.where(valid, z, torch.ones_like(z))
    sx = cx + focal * cam[:, 0] / safe_z
    sy = cy + focal * cam[:, 1] / safe_z
    return torch.stack([sx, sy], dim=1), z, valid


# -- sun shadow pass ----------------------------------------------------------

def light_basis(sun_direction: torch.Tensor) -> torch.Tensor:
    """Orthonormal frame (u, v, w) with w = normalized sun direction."""
    w = sun_direction / torch.linalg.norm(sun_direction)
    helper = torch.tensor(
        [0.0, 1.0, 0.0] if abs(float(w[1].detach())) < 0.9 else [1.0, 0.0, 0.0],
        dtype=w.dtype,
    )
    u = torch.cross(helper, w, dim=0)
    u = u / torch.linalg.norm(u)
    v = torch.cross(w, u, dim=0)
    return torch.stack([u, v, w])


@dataclass
class ShadowBuffer:
    """Orthographic light-space depth buffer plus its (frozen) frustum fit."""

    fragbuf: FragmentBuffer
    basis: torch.Tensor        # (3, 3) rows u, v, w; differentiable in p_sun
    x_min: float
    y_min: float
    span_x: float
    span_y: float
    depth_offset: float        # maps -x.w to standoff-based depth
    far_value: float
    resolution: tuple[int, int]

    def depth_image(self, light_depth_verts: torch.Tensor, faces_t: torch.Tensor) -> torch.Tensor:
        """Differentiable light-space depth per texel (far where empty)."""
        h, w = self.resolution
        fb = self.fragbuf
        faces_g, bary = fb.gather(light_depth_verts.dtype)
        depth = (light_depth_verts[faces_t[faces_g]] * bary).sum(dim=1)
        img = torch.full((h * w,), self.far_value, dtype=light_depth_verts.dtype)
        img = img.index_copy(0, torch.as_tensor(fb.pixels), depth)
        return img.reshape(h, w)


def fit_frustum(world_vertices: torch.Tensor, basis: torch.Tensor
                ) -> tuple[float, float, float, float, float, float]:
    """Light-space xy bounds (5% margin) and depth mapping for a mesh."""
    with torch.no_grad():
        lx = world_vertices @ basis[0]
        ly = world_vertices @ basis[1]
        ld = -(world_vertices @ basis[2])
        x0, x1 = float(lx.min()), float(lx.max())
        y0, y1 = float(ly.min()), float(ly.max())
        d0, d1 = float(ld.min()), float(ld.max())
        mx = SHADOW_MARGIN * max(x1 - x0, 1e-6)
        my = SHADOW_MARGIN * max(y1 - y0, 1e-6)
        depth_offset = SHADOW_STANDOFF - d0
        far = d1 + depth_offset + 0.5 * SHADOW_STANDOFF
        return (x0 - mx, y0 - my, max((x1 - x0) + 2 * mx, 1e-6),
                max((y1 - y0) + 2 * my, 1e-6), depth_offset, far)


def shadow_pass(world_vertices: torch.Tensor, faces: np.ndarray,
                sun_direction: torch.Tensor, resolution: tuple[int, int],
                frustum: tuple[float, float, float, float, float, float] | None = None
                ) -> ShadowBuffer:
    """Render the sun z-buffer from an orthographic camera looking along
    -sun_direction.

    The xy frustum fits the mesh bounds with a 5% margin; depth is measured
    from a pulled-back origin (``SHADOW_STANDOFF``) so the multiplicative
    tolerance of the soft comparison is effective. The frustum fit is frozen
    per step (pass ``frustum`` to reuse one) and carries no gradient.
    """
    basis = light_basis(sun_direction)
    if frustum is None:
        frustum = fit_frustum(world_vertices, basis)
    x_min, y_min, span_x, span_y, depth_offset, far = frustum

    lx = world_vertices @ basis[0]
    ly = world_vertices @ basis[1]
    ld = -(world_vertices @ basis[2]) + depth_offset

    h, w = resolution
    sx = (lx - x_min) / span_x * w
    sy = (ly - y_min) / span_y * h

    fb = rasterize(
        torch.stack([sx, sy], dim=1).detach().cpu().numpy(),
        np.ones(len(lx)),
        ld.detach().cpu().numpy(),
        np.ones(len(lx), dtype=bool),
        faces, h, w, perspective=False,
    )
    return ShadowBuffer(
        fragbuf=fb, basis=basis, x_min=x_min, y_min=y_min,
        span_x=span_x, span_y=span_y, depth_offset=depth_offset,
        far_value=far, resolution=resolution,
    )


def soft_visibility(d_hit: torch.Tensor, d_shadow: torch.Tensor,
                    k: float = SHADOW_K, b: float = SHADOW_B) -> torch.Tensor:
    """V = 1 - sigmoid(k * (d_hit - d_shadow * b))."""
    return 1.0 - torch.sigmoid(k * (d_hit - d_shadow * b))


def hard_visibility(d_hit: torch.Tensor, d_shadow: torch.Tensor,
                    b: float = SHADOW_B) -> torch.Tensor:
    """Hard z-test with the same tolerance; the k -> inf limit of the above."""
    return (d_hit <= d_shadow * b).to(d_hit.dtype)


def sample_shadow(shadow: ShadowBuffer, points: torch.Tensor,
                  world_vertices: torch.Tensor, faces_t: torch.Tensor
                  ) -> tuple[torch.Tensor, torch.Tensor]:
    """(d_hit, d_shadow) for world points against a shadow buffer.

    Both depths are differentiable: d_hit through the light transform of the
    query points, d_shadow through the buffer's interpolated vertex depths and
    the bilinear sample location. Only the four neighbouring shadow texels of
    each query enter the graph; empty texels read as the far value.
    """
    basis = shadow.basis
    lx = points @ basis[0]
    ly = points @ basis[1]
    d_hit = -(points @ basis[2]) + shadow.depth_offset
    light_depth_verts = -(world_vertices @ basis[2]) + shadow.depth_offset

    u = (lx - shadow.x_min) / shadow.span_x
    v = (ly - shadow.y_min) / shadow.span_y
    img = shadow.depth_image(light_depth_verts, faces_t)
    d_shadow = sample_texture(img, torch.stack([u, v], dim=1))
    return d_hit, d_shadow


# -- soft silhouette ----------------------------------------------------------

@njit(cache=True)
def _nearest_edge_kernel(px, py, ax, ay, bx, by):
    """Index of the nearest segment per query point (bbox early rejection)."""
    n_e = ax.shape[0]
    lo_x = np.empty(n_e)
    hi_x = np.empty(n_e)
    lo_y = np.empty(n_e)
    hi_y = np.empty(n_e)
    for e in range(n_e):
        lo_x[e] = min(ax[e], bx[e])
        hi_x[e] = max(ax[e], bx[e])
        lo_y[e] = min(ay[e], by[e])
        hi_y[e] = max(ay[e], by[e])
    out = np.empty(px.shape[0], dtype=np.int64)
    for i in range(px.shape[0]):
        x, y = px[i], py[i]
        best = np.inf
        bi = 0
        for e in range(n_e):
            dx = max(max(lo_x[e] - x, x - hi_x[e]), 0.0)
            dy = max(max(lo_y[e] - y, y - hi_y[e]), 0.0)
            if dx * dx + dy * dy >= best:
                continue
            abx = bx[e] - ax[e]
            aby = by[e] - ay[e]
            apx = x - ax[e]
            apy = y - ay[e]
            denom = abx * abx + aby * aby
            t = 0.0
            if denom > 1e-12:
                t = (apx * abx + apy * aby) / denom
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            ddx = apx - t * abx
            ddy = apy - t * aby
            d2 = ddx * ddx + ddy * ddy
            if d2 < best:
                best = d2
                bi = e
        out[i] = bi
    return out


def edge_adjacency(faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unique undirected edges (E, 2) and their adjacent faces (E, 2), -1 pad."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    e_sorted = np.sort(e, axis=1)
    owner = np.repeat(np.arange(len(faces)), 3)
    edges, inv = np.unique(e_sorted, axis=0, return_inverse=True)
    adj = np.full((len(edges), 2), -1, dtype=np.int64)
    for k in range(len(owner)):
        i = inv[k]
        if adj[i, 0] < 0:
            adj[i, 0] = owner[k]
        elif adj[i, 1] < 0:
            adj[i, 1] = owner[k]
    return edges, adj


def silhouette_edges(screen_xy: np.ndarray, faces: np.ndarray,
                     edges: np.ndarray, adj: np.ndarray) -> np.ndarray:
    """Edges on the projected outline: screen orientation flips across them."""
    v0 = screen_xy[faces[:, 0]]
    v1 = screen_xy[faces[:, 1]]
    v2 = screen_xy[faces[:, 2]]
    area = (v1[:, 0] - v0[:, 0]) * (v2[:, 1] - v0[:, 1]) - (
        (v1[:, 1] - v0[:, 1]) * (v2[:, 0] - v0[:, 0])
    )
    sign = np.sign(area)
    f0, f1 = adj[:, 0], adj[:, 1]
    boundary = f1 < 0
    flip = ~boundary & (sign[f0] * sign[np.where(boundary, 0, f1)] <= 0)
    return edges[boundary | flip]


def soft_silhouette(screen_xy: torch.Tensor, coverage: np.ndarray,
                    sil_edges: np.ndarray,
                    band: np.ndarray | None = None) -> torch.Tensor:
    """Coverage mask softened by a logistic of signed pixel distance to the
    silhouette outline.

    Pixels further than ``SILH_BAND_PX`` from the hard-coverage boundary are
    hard 0/1 constants; only the boundary band carries gradients (through the
    distance to the nearest outline segment). The nearest segment per pixel is
    selected without gradients; the distance to it is differentiable in the
    projected vertices.
    """
    h, w = coverage.shape
    out = torch.zeros((h, w), dtype=screen_xy.dtype)
    if not coverage.any():
        return out
    out[torch.as_tensor(coverage)] = 1.0
    if band is None:
        band = silhouette_band(coverage)
    ys, xs = np.nonzero(band)
    if len(ys) == 0 or len(sil_edges) == 0:
        return out

    sxy = screen_xy.detach().cpu().numpy().astype(np.float64)
    a_np = sxy[sil_edges[:, 0]]
    b_np = sxy[sil_edges[:, 1]]
    nearest = _nearest_edge_kernel(
        xs.astype(np.float64) + 0.5, ys.astype(np.float64) + 0.5,
        a_np[:, 0].copy(), a_np[:, 1].copy(), b_np[:, 0].copy(), b_np[:, 1].copy(),
    )

    # differentiable distance to the frozen nearest segment
    dtype = screen_xy.dtype
    ea = screen_xy[torch.as_tensor(sil_edges[nearest, 0])]
    eb = screen_xy[torch.as_tensor(sil_edges[nearest, 1])]
    p = torch.as_tensor(np.stack([xs + 0.5, ys + 0.5], axis=1), dtype=dtype)
    ab = eb - ea
    denom = (ab * ab).sum(dim=1).clamp_min(1e-12)
    t = (((p - ea) * ab).sum(dim=1) / denom).clamp(0.0, 1.0)
    closest = ea + t.unsqueeze(1) * ab
    dist = torch.linalg.norm(p - closest, dim=1)

    inside = torch.as_tensor(coverage[ys, xs])
    signed = torch.where(inside, dist, -dist)
    vals = torch.sigmoid(SILH_STEEPNESS * signed)
    return out.index_put((torch.as_tensor(ys), torch.as_tensor(xs)), vals)


def silhouette_band(coverage: np.ndarray) -> np.ndarray:
    """Pixels within SILH_BAND_PX of the hard coverage boundary."""
    if coverage.all() or not coverage.any():
        return np.zeros_like(coverage)
    d_in = ndimage.distance_transform_edt(coverage)
    d_out = ndimage.distance_transform_edt(~coverage)
    return (coverage & (d_in <= SILH_BAND_PX)) | (~coverage & (d_out <= SILH_BAND_PX))
