"""Synthetic ground-truth captures: a procedural head orbited by the camera
under a fixed sun, with exact landmarks, mattes, and camera orientations, plus
held-out novel-view and relighting frames for evaluation.

The capture emulates the subject-rotating protocol in the camera-relative
sense: the per-frame camera orientation sweeps a full circle, so the sun
direction expressed in camera coordinates (equivalently, relative to the
viewed face) covers the whole rotation while staying fixed in world space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from . import procedural
from .data import (
    Dataset,
    FrameObservation,
    load_capture,
    quantize_like_png,
    save_capture_frames,
    save_image,
)
from .geometry import TorchModel, eval_coarse_mesh
from .optim import rng_stream
from .raster import project
from .scene import (
    CameraIntrinsics,
    FrameParams,
    GlobalParams,
    N_CLUSTERS,
    N_EXPR_COEFFS,
    N_SHAPE_COEFFS,
    SceneParams,
    normalized_sun,
    save_scene,
    load_scene,
)
from .shading import RenderConfig, TorchScene, render_frame


@dataclass(frozen=True)
class CaptureSpec:
    n_frames: int = 48
    resolution: int = 128
    sun_azimuth_deg: float = 35.0
    sun_elevation_deg: float = 35.0
    n_holdout_views: int = 8
    n_holdout_relight: int = 8
    camera_distance: float = 4.5
    camera_elevation_deg: float = 8.0
    scene_scale: float = 2.6e4
    focal_factor: float = 1.25
    landmark_noise_px: float = 0.0


@dataclass
class HoldoutFrame:
    target: np.ndarray          # (H, W, 3) float32, PNG-quantized
    matte: np.ndarray           # (H, W) float32
    frame_params: FrameParams


@dataclass
class SyntheticCapture:
    scene: SceneParams          # ground truth
    dataset: Dataset
    holdout_views: list[HoldoutFrame]
    holdout_relight: list[HoldoutFrame]
    relight_sun_direction: np.ndarray
    relight_sun_intensity: float
    relight_envmap: np.ndarray
    seed: int
    spec: CaptureSpec


def look_at_rotation(cam_pos: np.ndarray, target: np.ndarray | None = None) -> np.ndarray:
    """World-to-camera rotation for a +Z-forward, y-down camera at cam_pos."""
    if target is None:
        target = np.zeros(3)
    fwd = target - cam_pos
    fwd = fwd / np.linalg.norm(fwd)
    up = np.array([0.0, 1.0, 0.0])
    x = np.cross(-up, fwd)
    x = x / np.linalg.norm(x)
    y = np.cross(fwd, x)
    return np.stack([x, y, fwd])


def sun_from_angles(azimuth_deg: float, elevation_deg: float) -> np.ndarray:
    az = np.deg2rad(azimuth_deg)
    el = np.deg2rad(elevation_deg)
    return normalized_sun(np.array([
        np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)
    ]))


def _smooth_uv_field(rng: np.random.Generator, res: int, octaves: int = 4,
                     amplitude: float = 1.0) -> np.ndarray:
    """Band-limited random field on the UV square (u-periodic)."""
    u = (np.arange(res) + 0.5) / res
    v = (np.arange(res) + 0.5) / res
    uu, vv = np.meshgrid(u, v, indexing="xy")
    out = np.zeros((res, res))
    for k in range(1, octaves + 1):
        au, av, ph1, ph2 = rng.uniform(0, 2 * np.pi, size=4)
        out += (amplitude / k) * np.sin(2 * np.pi * k * uu + ph1) * np.cos(
            np.pi * k * vv + av
        ) * np.cos(2 * np.pi * k * uu + ph2)
    return out


def _ground_truth_globals(rng: np.random.Generator, spec: CaptureSpec) -> GlobalParams:
    a_res = 256
    clusters = procedural._cluster_map(a_res)
    base = np.array([0.72, 0.55, 0.46])
    field_r = _smooth_uv_field(rng, a_res, amplitude=0.16)
    field_g = _smooth_uv_field(rng, a_res, amplitude=0.10)
    albedo = np.empty((a_res, a_res, 3), dtype=np.float32)
    tint = np.ones((N_CLUSTERS, 3))
    tint[7] = (1.05, 0.72, 0.66)   # lips warmer
    tint[1] = (0.96, 0.92, 0.90)   # brow slightly pale
    tint[3] = tint[4] = (0.82, 0.80, 0.84)  # eye sockets cooler
    for c in range(3):
        albedo[:, :, c] = base[c] * (1.0 + field_r + (field_g if c == 1 else 0.0))
    albedo *= tint[clusters]
    albedo = np.clip(albedo, 0.05, 0.95).astype(np.float32)

    disp = 0.004 * _smooth_uv_field(rng, 128, octaves=6, amplitude=1.0)
    disp = disp.astype(np.float32)

    rows, cols = 16, 32
    theta = np.pi * (np.arange(rows) + 0.5) / rows
    sky = 0.05 + 0.13 * np.clip(np.cos(theta), 0.0, None)  # brighter zenith
    env = np.zeros((rows, cols, 3), dtype=np.float32)
    env[:, :, 0] = sky[:, None] * 0.9
    env[:, :, 1] = sky[:, None] * 0.95
    env[:, :, 2] = sky[:, None] * 1.15
    env += rng.uniform(0.0, 0.015, size=env.shape).astype(np.float32)
    env = np.clip(env, 0.0, None).astype(np.float32)

    return GlobalParams(
        shape=rng.uniform(-0.25, 0.25, size=N_SHAPE_COEFFS),
        displacement=disp,
        albedo=albedo,
        specular_intensity=rng.uniform(0.05, 0.35, size=N_CLUSTERS),
        specular_exponent=rng.uniform(8.0, 60.0, size=N_CLUSTERS),
        envmap=env,
        sun_direction=sun_from_angles(spec.sun_azimuth_deg, spec.sun_elevation_deg),
        sun_intensity=float(rng.uniform(2.5, 3.5)),
        scene_scale=spec.scene_scale,
    )


def _orbit_frame(azimuth: float, spec: CaptureSpec, rng: np.random.Generator | None
                 ) -> FrameParams:
    el = np.deg2rad(spec.camera_elevation_deg)
    pos = spec.camera_distance * np.array(
        [np.cos(el) * np.sin(azimuth), np.sin(el), np.cos(el) * np.cos(azimuth)]
    )
    rot = look_at_rotation(pos)
    trans = -rot @ (spec.scene_scale * pos)
    pose = np.zeros(3)
    expr = np.zeros(N_EXPR_COEFFS)
    if rng is not None:
        pose = rng.uniform(-np.deg2rad(1.0), np.deg2rad(1.0), size=3)
        expr = rng.uniform(-0.08, 0.08, size=N_EXPR_COEFFS)
        trans = trans + rng.uniform(-0.003, 0.003, size=3) * np.linalg.norm(trans)
    return FrameParams(
        pose=pose, expression=expr, camera_translation=trans, camera_rotation=rot
    )


def _render_groundtruth(scene: SceneParams, frame: int) -> tuple[np.ndarray, np.ndarray]:
    """(quantized sRGB target, soft-silhouette matte) for a scene frame."""
    ts = TorchScene.from_scene(scene)
    with torch.no_grad():
        out = render_frame(ts, frame, need_layers=False)
    img = quantize_like_png(out.tonemapped.numpy())
    return img, out.silhouette.numpy().astype(np.float32)


def make_capture(seed: int, spec: CaptureSpec = CaptureSpec()) -> SyntheticCapture:
    """Generate a deterministic ground-truth capture for one seed."""
    if spec.n_frames < 8:
        raise ValueError("a capture needs at least 8 frames of lighting variation")
    rng_scene = rng_stream(seed, "capture-scene")
    rng_frames = rng_stream(seed, "capture-frames")
    model = procedural.default_head_model()
    glob = _ground_truth_globals(rng_scene, spec)

    res = spec.resolution
    intr = CameraIntrinsics(
        focal=spec.focal_factor * res, cx=res / 2.0, cy=res / 2.0, width=res, height=res
    )
    n = spec.n_frames
    frames = tuple(
        _orbit_frame(2.0 * np.pi * j / n, spec, rng_frames) for j in range(n)
    )
    scene = SceneParams(model=model, glob=glob, frames=frames, intrinsics=intr)

    ts = TorchScene.from_scene(scene)
    tm = ts.tm
    rng_lmk = rng_stream(seed, "capture-landmark-noise")
    observations = []
    for j in range(n):
        with torch.no_grad():
            out = render_frame(ts, j, need_layers=False)
            verts, _ = eval_coarse_mesh(tm, ts.shape, ts.expressions[j], ts.poses[j])
            lm_screen, _, _ = project(
                verts[tm.landmark_indices], ts.cam_rot[j], ts.cam_trans[j],
                ts.scene_scale, intr.focal, intr.cx, intr.cy,
            )
        target = quantize_like_png(out.tonemapped.numpy())
        matte = out.silhouette.numpy().astype(np.float32)
        lmk = lm_screen.numpy().astype(np.float64)
        if spec.landmark_noise_px > 0:
            lmk = lmk + rng_lmk.uniform(
                -spec.landmark_noise_px, spec.landmark_noise_px, size=lmk.shape
            )
        observations.append(FrameObservation(
            target=target,
            matte=matte,
            fg_region=matte >= 1.0,
            bg_region=matte <= 0.0,
            landmarks=lmk,
            lmk_present=np.ones(68, dtype=bool),
            camera_rotation=scene.frames[j].camera_rotation,
        ))
    dataset = Dataset(frames=observations, intrinsics=intr)

    # held-out novel views: between-training azimuths, alternating elevation
    views = []
    for k in range(spec.n_holdout_views):
        az = 2.0 * np.pi * (k + 0.5) / spec.n_holdout_views
        vspec = replace(
            spec,
            camera_elevation_deg=spec.camera_elevation_deg + (12.0 if k % 2 else -8.0),
        )
        fp = _orbit_frame(az, vspec, None)
        view_scene = replace(scene, frames=(fp,))
        target, matte = _render_groundtruth(view_scene, 0)
        views.append(HoldoutFrame(target=target, matte=matte, frame_params=fp))

    # held-out relighting: training poses 0..k-1 under a different sun and sky
    rng_relight = rng_stream(seed, "capture-relight")
    relight_sun = sun_from_angles(
        spec.sun_azimuth_deg + 70.0, min(spec.sun_elevation_deg + 15.0, 80.0)
    )
    relight_env = np.clip(
        glob.envmap[:, ::-1].copy() * np.array([1.2, 0.95, 0.75], dtype=np.float32)
        + rng_relight.uniform(0, 0.01, size=glob.envmap.shape).astype(np.float32),
        0.0, None,
    )
    relight_k = float(glob.sun_intensity) * 0.8
    relight_glob = replace(
        glob, sun_direction=relight_sun, sun_intensity=relight_k, envmap=relight_env
    )
    stride = max(1, n // spec.n_holdout_relight)
    relight = []
    for k in range(spec.n_holdout_relight):
        fp = scene.frames[(k * stride) % n]
        r_scene = SceneParams(
            model=model, glob=relight_glob, frames=(fp,), intrinsics=intr
        )
        target, matte = _render_groundtruth(r_scene, 0)
        relight.append(HoldoutFrame(target=target, matte=matte, frame_params=fp))

    return SyntheticCapture(
        scene=scene, dataset=dataset, holdout_views=views, holdout_relight=relight,
        relight_sun_direction=relight_sun,
        relight_sun_intensity=relight_k,
        relight_envmap=relight_env,
        seed=seed, spec=spec,
    )


# -- initialization for synthetic fits ----------------------------------------

@dataclass(frozen=True)
class PerturbMagnitudes:
    rotation_deg: float = 5.0
    translation_frac: float = 0.02
    sun_tilt_deg: float = 20.0
    shape_guess_noise: float = 0.05
    default_spec_intensity: float = 0.1
    default_spec_exponent: float = 20.0
    gray_albedo: float = 0.5


def _random_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def tilt_direction(direction: np.ndarray, angle_deg: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Rotate a unit vector by exactly angle_deg about a random orthogonal axis."""
    d = normalized_sun(direction)
    axis = np.cross(d, _random_unit(rng))
    nrm = np.linalg.norm(axis)
    while nrm < 1e-8:
        axis = np.cross(d, _random_unit(rng))
        nrm = np.linalg.norm(axis)
    axis = axis / nrm
    ang = np.deg2rad(angle_deg)
    return normalized_sun(
        d * np.cos(ang) + np.cross(axis, d) * np.sin(ang)
    )


def perturb_init(capture: SyntheticCapture,
                 mags: PerturbMagnitudes = PerturbMagnitudes(),
                 seed: int | None = None
                 ) -> tuple[SceneParams, np.ndarray]:
    """Initial guess standing in for single-image predictions: geometry mildly
    perturbed, textures reset, lighting tilted and dimmed.

    Returns (initial scene, per-frame shape-code guesses).
    """
    rng = rng_stream(capture.seed if seed is None else seed, "perturb-init")
    gt = capture.scene
    n = gt.n_frames

    frames = []
    rot_mag = np.deg2rad(mags.rotation_deg)
    for fr in gt.frames:
        axis = _random_unit(rng)
        angle = rng.uniform(0.0, rot_mag) if rot_mag > 0 else 0.0
        pose = fr.pose + axis * angle
        trans = fr.camera_translation + rng.uniform(
            -mags.translation_frac, mags.translation_frac, size=3
        ) * np.linalg.norm(fr.camera_translation)
        frames.append(FrameParams(
            pose=pose, expression=np.zeros_like(fr.expression),
            camera_translation=trans, camera_rotation=fr.camera_rotation,
        ))

    g = gt.glob
    init_glob = GlobalParams(
        shape=np.zeros_like(g.shape),
        displacement=np.zeros_like(g.displacement),
        albedo=np.full_like(g.albedo, mags.gray_albedo),
        specular_intensity=np.full_like(g.specular_intensity, mags.default_spec_intensity),
        specular_exponent=np.full_like(g.specular_exponent, mags.default_spec_exponent),
        envmap=np.zeros_like(g.envmap),
        sun_direction=(
            tilt_direction(g.sun_direction, mags.sun_tilt_deg, rng)
            if mags.sun_tilt_deg > 0 else g.sun_direction.copy()
        ),
        sun_intensity=g.sun_intensity * 0.5,
        scene_scale=g.scene_scale,
    )
    per_frame_shape = rng.uniform(
        -mags.shape_guess_noise, mags.shape_guess_noise, size=(n, N_SHAPE_COEFFS)
    )
    init = SceneParams(
        model=gt.model, glob=init_glob, frames=tuple(frames), intrinsics=gt.intrinsics
    )
    return init, per_frame_shape


# -- image metrics -------------------------------------------------------------

PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class Metrics:
    psnr: float
    ssim: float
    valid: bool


def masked_psnr(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    sel = mask > 0.5
    if not sel.any():
        return float("nan")
    diff = (rendered[sel] - target[sel]).astype(np.float64)
    mse = float((diff * diff).mean())
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def _ssim_single(a: np.ndarray, b: np.ndarray) -> float:
    # 11x11 Gaussian window, sigma 1.5, standard stabilizers on unit range
    sigma, radius = 1.5, 5
    blur = lambda x: ndimage.gaussian_filter(x, sigma, truncate=radius / sigma)
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def metrics(rendered: np.ndarray, target: np.ndarray, mask: np.ndarray) -> Metrics:
    """(masked PSNR with peak 1.0 capped at 99 dB, full-frame SSIM)."""
    if not (mask > 0.5).any():
        return Metrics(psnr=float("nan"), ssim=float("nan"), valid=False)
    a = rendered.astype(np.float64)
    b = target.astype(np.float64)
    psnr = masked_psnr(a, b, mask)
    if a.ndim == 3:
        ssim = float(np.mean([_ssim_single(a[:, :, c], b[:, :, c]) for c in range(a.shape[2])]))
    else:
        ssim = _ssim_single(a, b)
    return Metrics(psnr=psnr, ssim=ssim, valid=True)


# -- capture persistence -------------------------------------------------------

def save_capture(capture: SyntheticCapture, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(capture.scene, out)
    save_capture_frames(out, capture.dataset.frames, capture.dataset.intrinsics)

    def dump_holdouts(name: str, frames: list[HoldoutFrame]) -> list[dict]:
        d = out / name
        d.mkdir(exist_ok=True)
        meta = []
        for k, hf in enumerate(frames):
            save_image(d / f"{k:03d}.png", hf.target)
            np.save(d / f"{k:03d}_matte.npy", hf.matte)
            meta.append({
                "pose": hf.frame_params.pose.tolist(),
                "expression": hf.frame_params.expression.tolist(),
                "camera_translation": hf.frame_params.camera_translation.tolist(),
                "camera_rotation": hf.frame_params.camera_rotation.tolist(),
            })
        return meta

    doc = {
        "seed": capture.seed,
        "spec": {k: getattr(capture.spec, k) for k in CaptureSpec.__dataclass_fields__},
        "views": dump_holdouts("heldout_views", capture.holdout_views),
        "relight": dump_holdouts("heldout_relight", capture.holdout_relight),
        "relight_sun_direction": capture.relight_sun_direction.tolist(),
        "relight_sun_intensity": capture.relight_sun_intensity,
    }
    np.save(out / "relight_envmap.npy", capture.relight_envmap)
    (out / "capture.json").write_text(json.dumps(doc, indent=1))
    return out


def load_capture_bundle(path: str | Path) -> SyntheticCapture:
    base = Path(path)
    doc = json.loads((base / "capture.json").read_text())
    scene = load_scene(base)
    dataset = load_capture(base)

    def read_holdouts(name: str, metas: list[dict]) -> list[HoldoutFrame]:
        from .data import load_image

        frames = []
        for k, meta in enumerate(metas):
            frames.append(HoldoutFrame(
                target=load_image(base / name / f"{k:03d}.png"),
                matte=np.load(base / name / f"{k:03d}_matte.npy"),
                frame_params=FrameParams(
                    pose=np.asarray(meta["pose"]),
                    expression=np.asarray(meta["expression"]),
                    camera_translation=np.asarray(meta["camera_translation"]),
                    camera_rotation=np.asarray(meta["camera_rotation"]),
                ),
            ))
        return frames

    spec = CaptureSpec(**doc["spec"])
    return SyntheticCapture(
        scene=scene,
        dataset=dataset,
        holdout_views=read_holdouts("heldout_views", doc["views"]),
        holdout_relight=read_holdouts("heldout_relight", doc["relight"]),
        relight_sun_direction=np.asarray(doc["relight_sun_direction"]),
        relight_sun_intensity=float(doc["relight_sun_intensity"]),
        relight_envmap=np.load(base / "relight_envmap.npy"),
        seed=int(doc["seed"]),
        spec=spec,
    )


# -- evaluation helpers ---------------------------------------------------------

def render_scene_frame(scene: SceneParams, frame_params: FrameParams,
                       config: RenderConfig = RenderConfig()) -> np.ndarray:
    """Tonemapped render of a scene under explicit frame parameters."""
    one = replace(scene, frames=(frame_params,))
    ts = TorchScene.from_scene(one)
    with torch.no_grad():
        out = render_frame(ts, 0, config=config, need_layers=False)
    return out.tonemapped.numpy()


def evaluate_holdout_views(fitted: SceneParams, capture: SyntheticCapture) -> list[float]:
    """Masked PSNR of fitted re-renders against held-out novel-view targets."""
    vals = []
    for hf in capture.holdout_views:
        img = render_scene_frame(fitted, hf.frame_params)
        vals.append(masked_psnr(img, hf.target, hf.matte >= 0.5))
    return vals


def evaluate_holdout_relight(fitted: SceneParams, capture: SyntheticCapture) -> list[float]:
    """Masked PSNR of fitted geometry/materials re-rendered under the held-out
    lighting, against the ground-truth relit targets.

    Uses the fitted per-frame pose for the corresponding training frames,
    mirroring a lighting swap between two reconstructions.
    """
    n = len(capture.dataset.frames)
    stride = max(1, n // len(capture.holdout_relight))
    relit = replace(
        fitted,
        glob=replace(
            fitted.glob,
            sun_direction=capture.relight_sun_direction,
            sun_intensity=capture.relight_sun_intensity,
            envmap=capture.relight_envmap,
        ),
    )
    vals = []
    for k, hf in enumerate(capture.holdout_relight):
        fp = relit.frames[(k * stride) % n]
        img = render_scene_frame(relit, fp)
        vals.append(masked_psnr(img, hf.target, hf.matte >= 0.5))
    return vals


def sun_view_azimuth_coverage(capture: SyntheticCapture) -> float:
    """Degrees of the circle covered by camera-relative sun azimuths."""
    angs = []
    p = capture.scene.glob.sun_direction
    for fr in capture.scene.frames:
        s_cam = fr.camera_rotation @ p
        angs.append(np.arctan2(s_cam[0], s_cam[2]))
    a = np.sort(np.mod(np.asarray(angs), 2 * np.pi))
    gaps = np.diff(np.concatenate([a, [a[0] + 2 * np.pi]]))
    return float(np.rad2deg(2 * np.pi - gaps.max()))


def sun_angle_error_deg(a: np.ndarray, b: np.ndarray) -> float:
    ca = normalized_sun(a)
    cb = normalized_sun(b)
    return float(np.rad2deg(np.arccos(np.clip(np.dot(ca, cb), -1.0, 1.0))))
