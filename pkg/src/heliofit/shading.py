"""Reflectance and lighting: normalized Blinn-Phong specular, the discretized
sun-plus-environment rendering sum, tone mapping, and the full per-frame
render pipeline.

Radiance model per surface point x with normal n, viewing direction w_o:

    L = sum_w E(w) * (a/pi) * max(w.n, 0) * dOmega(w)          ambient diffuse
      + V * k_sun * c_sun * (a/pi) * max(p.n, 0)               sun diffuse
      + V * k_sun * c_sun * R_spec(p, w_o, n) * max(p.n, 0)    sun specular

with R_spec = k_s * (s+2)/(2pi) * max(h.n, 0)^s, h = normalize(p + w_o).
The ambient term is unshadowed and has no specular counterpart; the sun's
solid angle is folded into k_sun. Fill lights enter exactly like the sun,
each with its own shadow pass and color.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
import torch

from . import raster
from .geometry import (
    TorchModel,
    displace_positions,
    displaced_normals,
    eval_coarse_mesh,
    sample_nearest_long,
    sample_texture,
)
from .raster import project
from .scene import CameraIntrinsics, SceneParams

GAMMA = 2.2


def blinn_phong(w_i: torch.Tensor, w_o: torch.Tensor, n: torch.Tensor,
                k_s: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
    """Normalized Blinn-Phong lobe k_s * (s+2)/(2pi) * max(h.n, 0)^s.

    Inputs broadcast over leading dimensions; unit vectors expected. The
    half-vector is undefined for w_i == -w_o; those configurations return 0.
    """
    hv = w_i + w_o
    norm = torch.linalg.norm(hv, dim=-1, keepdim=True)
    ok = norm.squeeze(-1) > 1e-9
    h = hv / norm.clamp_min(1e-20)
    cos_h = (h * n).sum(-1).clamp_min(0.0)
    # exp(s * log x) keeps d/ds finite; the mask zeroes the grazing tail
    lobe_ok = cos_h > 1e-12
    log_cos = torch.log(cos_h.clamp_min(1e-12))
    lobe = torch.where(lobe_ok, torch.exp(s * log_cos), torch.zeros_like(cos_h))
    return torch.where(ok, k_s * (s + 2.0) / (2.0 * np.pi) * lobe, torch.zeros_like(cos_h))


@lru_cache(maxsize=8)
def _solid_angle_grid_np(rows: int, cols: int) -> np.ndarray:
    cosb = np.cos(np.linspace(0.0, np.pi, rows + 1))
    dphi = 2.0 * np.pi / cols
    w = dphi * (cosb[:-1] - cosb[1:])
    return np.repeat(w[:, None], cols, axis=1)


def solid_angle_grid(rows: int = 16, cols: int = 32) -> np.ndarray:
    """Equirectangular cell solid angles; telescopes to exactly 4*pi."""
    if rows <= 0 or cols <= 0:
        raise ValueError("grid dims must be positive")
    return _solid_angle_grid_np(rows, cols).copy()


@lru_cache(maxsize=8)
def _env_directions_np(rows: int, cols: int) -> np.ndarray:
    theta = np.pi * (np.arange(rows) + 0.5) / rows
    phi = -np.pi + 2.0 * np.pi * (np.arange(cols) + 0.5) / cols
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    return np.stack(
        [np.sin(tt) * np.sin(pp), np.cos(tt), np.sin(tt) * np.cos(pp)], axis=-1
    )


def env_directions(rows: int = 16, cols: int = 32) -> np.ndarray:
    """Unit direction per environment texel (row 0 at the zenith)."""
    return _env_directions_np(rows, cols).copy()


def ambient_diffuse(albedo: torch.Tensor, normals: torch.Tensor,
                    envmap: torch.Tensor) -> torch.Tensor:
    """Environment-sum diffuse term (unshadowed): (a/pi) * sum E cos dOmega."""
    rows, cols, _ = envmap.shape
    dirs = torch.as_tensor(_env_directions_np(rows, cols).reshape(-1, 3),
                           dtype=albedo.dtype)
    dw = torch.as_tensor(_solid_angle_grid_np(rows, cols).reshape(-1, 1),
                         dtype=albedo.dtype)
    cos = (normals @ dirs.T).clamp_min(0.0)           # (k, R*C)
    irradiance = cos @ (envmap.reshape(-1, 3) * dw)   # (k, 3)
    return albedo / np.pi * irradiance


def directional_diffuse(albedo: torch.Tensor, normals: torch.Tensor,
                        light_dir: torch.Tensor, radiance: torch.Tensor,
                        visibility: torch.Tensor) -> torch.Tensor:
    cos = (normals @ light_dir).clamp_min(0.0)
    return visibility.unsqueeze(-1) * radiance * (albedo / np.pi) * cos.unsqueeze(-1)


def directional_specular(normals: torch.Tensor, view_dir: torch.Tensor,
                         light_dir: torch.Tensor, radiance: torch.Tensor,
                         k_s: torch.Tensor, s: torch.Tensor,
                         visibility: torch.Tensor) -> torch.Tensor:
    cos = (normals @ light_dir).clamp_min(0.0)
    lobe = blinn_phong(light_dir, view_dir, normals, k_s, s)
    return visibility.unsqueeze(-1) * radiance * (lobe * cos).unsqueeze(-1)


def tone_map(linear: torch.Tensor) -> torch.Tensor:
    """Reinhard x/(1+x) per channel followed by gamma 1/2.2."""
    safe = linear.clamp_min(1e-20)
    mapped = (safe / (1.0 + safe)) ** (1.0 / GAMMA)
    return torch.where(linear > 0, mapped, torch.zeros_like(linear))


# -- full frame rendering -----------------------------------------------------

@dataclass(frozen=True)
class DirectionalLight:
    direction: np.ndarray  # unit, world space
    color: np.ndarray      # (3,) >= 0, includes intensity


@dataclass(frozen=True)
class RenderConfig:
    """Pipeline switches; defaults reproduce the full method."""

    soft_shadow: bool = True
    use_displacement: bool = True
    sv_specular: bool = True
    shadow_res_factor: int = raster.SHADOW_RES_FACTOR
    sun_color: tuple[float, float, float] = (1.0, 1.0, 1.0)
    sun_enabled: bool = True
    fill_lights: tuple[DirectionalLight, ...] = ()


@dataclass
class RenderSnapshot:
    """Discrete rasterization structure frozen within one optimization step."""

    fragbuf: raster.FragmentBuffer
    shadows: list[raster.ShadowBuffer]
    sil_edges: np.ndarray
    band: np.ndarray


@dataclass
class RenderOutput:
    linear: torch.Tensor        # (H, W, 3) HDR radiance
    tonemapped: torch.Tensor    # (H, W, 3) in [0, 1]
    silhouette: torch.Tensor    # (H, W)
    covered: np.ndarray
    snapshot: RenderSnapshot | None
    # layer decomposition; populated when need_layers=True
    diffuse_sun: torch.Tensor | None = None
    diffuse_ambient: torch.Tensor | None = None
    specular_sun: torch.Tensor | None = None
    fill_layers: tuple[torch.Tensor, ...] = ()
    visibility: torch.Tensor | None = None  # (H, W); 1 where no surface


@dataclass
class TorchScene:
    """All optimizable scene tensors for one compute dtype."""

    tm: TorchModel
    intrinsics: CameraIntrinsics
    cam_rot: torch.Tensor        # (N, 3, 3) fixed
    shape: torch.Tensor          # (K_beta,)
    expressions: torch.Tensor    # (N, K_psi)
    poses: torch.Tensor          # (N, 3)
    cam_trans: torch.Tensor      # (N, 3)
    scene_scale: torch.Tensor    # ()
    displacement: torch.Tensor   # (D, D)
    albedo: torch.Tensor         # (A, A, 3)
    spec_intensity: torch.Tensor # (10,)
    spec_exponent: torch.Tensor  # (10,)
    envmap: torch.Tensor         # (16, 32, 3)
    sun_dir: torch.Tensor        # (3,)
    sun_intensity: torch.Tensor  # ()
    edges: np.ndarray = field(default=None, repr=False)
    adjacency: np.ndarray = field(default=None, repr=False)

    @classmethod
    def from_scene(cls, scene: SceneParams, dtype: torch.dtype = torch.float32) -> "TorchScene":
        tm = TorchModel.from_model(scene.model, dtype)
        t = lambda a: torch.as_tensor(np.asarray(a), dtype=dtype)
        edges, adj = raster.edge_adjacency(scene.model.faces)
        return cls(
            tm=tm,
            intrinsics=scene.intrinsics,
            cam_rot=torch.stack([t(fr.camera_rotation) for fr in scene.frames]),
            shape=t(scene.glob.shape),
            expressions=torch.stack([t(fr.expression) for fr in scene.frames]),
            poses=torch.stack([t(fr.pose) for fr in scene.frames]),
            cam_trans=torch.stack([t(fr.camera_translation) for fr in scene.frames]),
            scene_scale=t(scene.glob.scene_scale),
            displacement=t(scene.glob.displacement),
            albedo=t(scene.glob.albedo),
            spec_intensity=t(scene.glob.specular_intensity),
            spec_exponent=t(scene.glob.specular_exponent),
            envmap=t(scene.glob.envmap),
            sun_dir=t(scene.glob.sun_direction),
            sun_intensity=t(scene.glob.sun_intensity),
            edges=edges,
            adjacency=adj,
        )

    @property
    def n_frames(self) -> int:
        return self.poses.shape[0]

    @property
    def dtype(self) -> torch.dtype:
        return self.shape.dtype


def render_frame(ts: TorchScene, frame: int, resolution: tuple[int, int] | None = None,
                 config: RenderConfig = RenderConfig(),
                 snapshot: RenderSnapshot | None = None,
                 need_layers: bool = True) -> RenderOutput:
    """Render one frame: mesh -> projection -> rasterization -> shadow pass ->
    displacement -> shading -> layers -> tone map."""
    intr = ts.intrinsics
    if resolution is None:
        height, width = intr.height, intr.width
    else:
        height, width = resolution
    sx_scale = width / intr.width
    sy_scale = height / intr.height

    dtype = ts.dtype
    verts, vnormals = eval_coarse_mesh(ts.tm, ts.shape, ts.expressions[frame], ts.poses[frame])
    screen, cam_z, valid = project(
        verts, ts.cam_rot[frame], ts.cam_trans[frame], ts.scene_scale,
        intr.focal, intr.cx, intr.cy,
    )
    screen = screen * torch.tensor([sx_scale, sy_scale], dtype=dtype)
    faces_np = ts.tm.faces.numpy().astype(np.int32)

    if snapshot is None:
        fb = raster.rasterize(
            screen.detach().cpu().numpy(), cam_z.detach().cpu().numpy(),
            cam_z.detach().cpu().numpy(), valid.detach().cpu().numpy(),
            faces_np, height, width,
        )
        sil_edges = raster.silhouette_edges(
            screen.detach().cpu().numpy(), faces_np, ts.edges, ts.adjacency
        )
        band = raster.silhouette_band(fb.covered)
    else:
        fb = snapshot.fragbuf
        sil_edges = snapshot.sil_edges
        band = snapshot.band

    silhouette = raster.soft_silhouette(screen, fb.covered, sil_edges, band)

    lights: list[tuple[torch.Tensor, torch.Tensor]] = []
    sun_w = ts.sun_dir / torch.linalg.norm(ts.sun_dir)
    if config.sun_enabled:
        sun_radiance = ts.sun_intensity * torch.as_tensor(config.sun_color, dtype=dtype)
        lights.append((sun_w, sun_radiance))
    for fl in config.fill_lights:
        d = torch.as_tensor(np.asarray(fl.direction), dtype=dtype)
        lights.append((d / torch.linalg.norm(d), torch.as_tensor(np.asarray(fl.color), dtype=dtype)))

    def zeros_img() -> torch.Tensor:
        return torch.zeros((height, width, 3), dtype=dtype)

    if not fb.covered.any():
        ones = torch.ones((height, width), dtype=dtype)
        return RenderOutput(
            linear=zeros_img(), tonemapped=zeros_img(), silhouette=silhouette,
            covered=fb.covered, snapshot=RenderSnapshot(fb, [], sil_edges, band),
            diffuse_sun=zeros_img(), diffuse_ambient=zeros_img(),
            specular_sun=zeros_img(),
            fill_layers=tuple(zeros_img() for _ in config.fill_lights),
            visibility=ones,
        )

    # shadow buffers share the undisplaced world mesh
    shadow_res = (height * config.shadow_res_factor, width * config.shadow_res_factor)
    if snapshot is None or not snapshot.shadows:
        shadows = [
            raster.shadow_pass(verts, faces_np, d, shadow_res) for d, _ in lights
        ]
    else:
        shadows = [
            raster.shadow_pass(
                verts, faces_np, d, sb.resolution,
                frustum=(sb.x_min, sb.y_min, sb.span_x, sb.span_y, sb.depth_offset, sb.far_value),
            )
            for (d, _), sb in zip(lights, snapshot.shadows)
        ]

    faces_g, bary = fb.gather(dtype)
    tri = ts.tm.faces[faces_g]                       # (k, 3)
    pos = (verts[tri] * bary.unsqueeze(-1)).sum(1)   # (k, 3)
    nrm = (vnormals[tri] * bary.unsqueeze(-1)).sum(1)
    nrm = nrm / torch.linalg.norm(nrm, dim=1, keepdim=True).clamp_min(1e-20)
    uv = (ts.tm.uv[tri] * bary.unsqueeze(-1)).sum(1)

    pix = torch.as_tensor(fb.pixels)

    if config.use_displacement:
        disp_pos = displace_positions(pos, nrm, uv, ts.displacement)
        # displaced-normal estimation runs on the coverage bounding box only
        ys_np, xs_np = np.divmod(fb.pixels, width)
        y0, y1 = int(ys_np.min()), int(ys_np.max()) + 1
        x0, x1 = int(xs_np.min()), int(xs_np.max()) + 1
        bh, bw = y1 - y0, x1 - x0
        bpix = torch.as_tensor((ys_np - y0) * bw + (xs_np - x0))
        cov_crop = torch.as_tensor(fb.covered[y0:y1, x0:x1])

        def crop_img(values: torch.Tensor) -> torch.Tensor:
            img = torch.zeros((bh * bw, 3), dtype=dtype)
            return img.index_copy(0, bpix, values).reshape(bh, bw, 3)

        n_shade = displaced_normals(
            crop_img(pos), crop_img(disp_pos), crop_img(nrm), cov_crop
        ).reshape(-1, 3)[bpix]
        shade_pos = disp_pos
    else:
        n_shade = nrm
        shade_pos = pos

    # view direction from the camera center in world coordinates
    cam_center = -(ts.cam_rot[frame].T @ ts.cam_trans[frame]) / ts.scene_scale
    w_o = cam_center - shade_pos
    w_o = w_o / torch.linalg.norm(w_o, dim=1, keepdim=True).clamp_min(1e-20)

    albedo_f = sample_texture(ts.albedo, uv)
    if config.sv_specular:
        cluster = sample_nearest_long(ts.tm.cluster_map, uv)
        k_s = ts.spec_intensity[cluster]
        s_exp = ts.spec_exponent[cluster]
    else:
        k_s = ts.spec_intensity[0].expand(pos.shape[0])
        s_exp = ts.spec_exponent[0].expand(pos.shape[0])

    amb = ambient_diffuse(albedo_f, n_shade, ts.envmap)

    def scatter3(values: torch.Tensor) -> torch.Tensor:
        img = torch.zeros((height * width, 3), dtype=dtype)
        return img.index_copy(0, pix, values).reshape(height, width, 3)

    frag_linear = amb
    per_light: list[tuple[bool, torch.Tensor, torch.Tensor, torch.Tensor]] = []
    for i, ((ldir, lrad), sb) in enumerate(zip(lights, shadows)):
        d_hit, d_shadow = raster.sample_shadow(sb, pos, verts, ts.tm.faces)
        if config.soft_shadow:
            vis = raster.soft_visibility(d_hit, d_shadow)
        else:
            vis = raster.hard_visibility(d_hit, d_shadow)
        dif = directional_diffuse(albedo_f, n_shade, ldir, lrad, vis)
        spec = directional_specular(n_shade, w_o, ldir, lrad, k_s, s_exp, vis)
        frag_linear = frag_linear + dif + spec
        per_light.append((config.sun_enabled and i == 0, vis, dif, spec))

    out = RenderOutput(
        linear=scatter3(frag_linear),
        tonemapped=scatter3(tone_map(frag_linear)),
        silhouette=silhouette,
        covered=fb.covered,
        snapshot=RenderSnapshot(fb, shadows, sil_edges, band),
    )
    if need_layers:
        out.diffuse_ambient = scatter3(amb)
        out.diffuse_sun = zeros_img()
        out.specular_sun = zeros_img()
        out.visibility = torch.ones((height, width), dtype=dtype)
        fills = []
        for is_sun, vis, dif, spec in per_light:
            if is_sun:
                out.diffuse_sun = scatter3(dif)
                out.specular_sun = scatter3(spec)
                out.visibility = (
                    out.visibility.reshape(-1).index_copy(0, pix, vis).reshape(height, width)
                )
            else:
                fills.append(scatter3(dif + spec))
        out.fill_layers = tuple(fills)
    return out
