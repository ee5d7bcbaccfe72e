"""Two-stage scene recovery.

Stage 1 (coarse alignment) fits geometry and camera parameters to landmark
and silhouette supervision, one aggregated step over all frames per epoch.
Stage 2 (photometric) frees all twelve parameter groups and steps once per
frame per epoch, visiting frames in a seeded random order, with the learning
rates decaying to 10% every 1000 epochs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from . import raster, rasterio
from .data import Dataset, TorchDataset
from .geometry import eval_coarse_mesh
from .losses import (
    LossTerms,
    LossWeights,
    env_regularizers,
    landmark_loss,
    mask_loss,
    perceptual_surrogate,
)
from .optim import (
    GroupOptimizer,
    project_scene_constraints,
    rng_stream,
)
from .scene import (
    COARSE_LEARNING_RATES,
    PHOTOMETRIC_LEARNING_RATES,
    FrameParams,
    GlobalParams,
    SceneParams,
)
from .shading import RenderConfig, RenderSnapshot, TorchScene, render_frame

TRACE_COLUMNS = ["epoch", "mask", "lmk", "photo", "perc", "env", "env_smooth", "total"]
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100


class FitDivergence(RuntimeError):
    pass


def scene_from_torch(ts: TorchScene, base: SceneParams) -> SceneParams:
    """Write optimized tensors back into an immutable scene description."""
    def arr(t: torch.Tensor) -> np.ndarray:
        return t.detach().cpu().numpy().astype(np.float64)

    def arr32(t: torch.Tensor) -> np.ndarray:
        return t.detach().cpu().numpy().astype(np.float32)

    glob = GlobalParams(
        shape=arr(ts.shape),
        displacement=arr32(ts.displacement),
        albedo=arr32(ts.albedo),
        specular_intensity=arr(ts.spec_intensity),
        specular_exponent=arr(ts.spec_exponent),
        envmap=arr32(ts.envmap),
        sun_direction=arr(ts.sun_dir / torch.linalg.norm(ts.sun_dir)),
        sun_intensity=float(ts.sun_intensity),
        scene_scale=float(ts.scene_scale),
    )
    frames = tuple(
        FrameParams(
            pose=arr(ts.poses[j]),
            expression=arr(ts.expressions[j]),
            camera_translation=arr(ts.cam_trans[j]),
            camera_rotation=base.frames[j].camera_rotation,
        )
        for j in range(ts.n_frames)
    )
    return SceneParams(model=base.model, glob=glob, frames=frames, intrinsics=base.intrinsics)


def _pose_terms(ts: TorchScene, tds: TorchDataset, j: int
                ) -> tuple[torch.Tensor, torch.Tensor]:
    """(mask, landmark) losses for one frame; no shading involved."""
    intr = ts.intrinsics
    verts, _ = eval_coarse_mesh(ts.tm, ts.shape, ts.expressions[j], ts.poses[j])
    screen, cam_z, valid = raster.project(
        verts, ts.cam_rot[j], ts.cam_trans[j], ts.scene_scale,
        intr.focal, intr.cx, intr.cy,
    )
    screen_np = screen.detach().cpu().numpy()
    fb = raster.rasterize(
        screen_np, cam_z.detach().cpu().numpy(), cam_z.detach().cpu().numpy(),
        valid.detach().cpu().numpy(), ts.tm.faces.numpy().astype(np.int32),
        intr.height, intr.width,
    )
    sil_edges = raster.silhouette_edges(
        screen_np, ts.tm.faces.numpy().astype(np.int32), ts.edges, ts.adjacency
    )
    silhouette = raster.soft_silhouette(screen, fb.covered, sil_edges)
    l_mask = mask_loss(silhouette, tds.fg[j], tds.bg[j])
    lm = screen[ts.tm.landmark_indices]
    l_lmk = landmark_loss(lm, tds.landmarks[j], intr.width, tds.lmk_present[j])
    return l_mask, l_lmk


def full_loss_frame(ts: TorchScene, tds: TorchDataset, j: int,
                    weights: LossWeights, config: RenderConfig,
                    snapshot: RenderSnapshot | None = None,
                    use_mask: bool = True, use_lmk: bool = True) -> LossTerms:
    """Photometric-stage loss terms for one frame."""
    intr = ts.intrinsics
    out = render_frame(ts, j, config=config, snapshot=snapshot, need_layers=False)
    zero = torch.zeros((), dtype=ts.dtype)

    if use_lmk:
        verts, _ = eval_coarse_mesh(ts.tm, ts.shape, ts.expressions[j], ts.poses[j])
        lm_screen, _, _ = raster.project(
            verts[ts.tm.landmark_indices], ts.cam_rot[j], ts.cam_trans[j],
            ts.scene_scale, intr.focal, intr.cx, intr.cy,
        )
        l_lmk = landmark_loss(lm_screen, tds.landmarks[j], intr.width, tds.lmk_present[j])
    else:
        l_lmk = zero
    l_mask = mask_loss(out.silhouette, tds.fg[j], tds.bg[j]) if use_mask else zero

    matted_render = out.tonemapped * out.silhouette.unsqueeze(-1)
    matted_target = tds.targets[j] * tds.mattes[j].unsqueeze(-1)
    diff = matted_render - matted_target
    l_photo = (diff * diff).mean()
    l_perc = perceptual_surrogate(matted_render, matted_target)
    l_env, l_env_s = env_regularizers(ts.envmap)
    return LossTerms(
        mask=l_mask, landmark=l_lmk, photo=l_photo,
        perceptual=l_perc, env=l_env, env_smooth=l_env_s,
    )


def _check_divergence(total: float, initial: float, streak: int, stage: str,
                      epoch: int) -> int:
    if initial > 0 and total > DIVERGENCE_FACTOR * initial:
        streak += 1
    else:
        streak = 0
    if streak >= DIVERGENCE_PATIENCE:
        raise FitDivergence(
            f"{stage} diverged: loss {total:.4g} stayed above 10x the initial "
            f"{initial:.4g} for {DIVERGENCE_PATIENCE} epochs (epoch {epoch})"
        )
    return streak


def stage1_optimize(scene_init: SceneParams, dataset: Dataset, *,
                    epochs: int = 2000, per_frame_shape: np.ndarray | None = None,
                    optimize_shape_codes: bool = True,
                    callback=None) -> tuple[SceneParams, list[dict]]:
    """Coarse alignment: minimize mask + landmark loss over geometry/camera.

    ``per_frame_shape`` carries per-frame shape-code guesses; the shared code
    starts from their mean. Photometric parameters are untouched.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    scene = scene_init
    if per_frame_shape is not None:
        scene = scene.with_global(shape=np.mean(per_frame_shape, axis=0))

    ts = TorchScene.from_scene(scene)
    tds = TorchDataset.from_dataset(dataset)
    params = {
        "camera_translation": ts.cam_trans,
        "scene_scale": ts.scene_scale,
    }
    if optimize_shape_codes:
        params.update(shape=ts.shape, expression=ts.expressions, pose=ts.poses)
    for p in params.values():
        p.requires_grad_(True)
    opt = GroupOptimizer(params, COARSE_LEARNING_RATES)

    n = len(dataset)
    trace: list[dict] = []
    initial = None
    streak = 0
    for epoch in range(epochs):
        opt.zero_grad()
        m_sum = torch.zeros(())
        l_sum = torch.zeros(())
        for j in range(n):
            l_mask, l_lmk = _pose_terms(ts, tds, j)
            m_sum = m_sum + l_mask
            l_sum = l_sum + l_lmk
        total = (m_sum + l_sum) / n
        total.backward()
        opt.step()
        tot = float(total)
        if initial is None:
            initial = tot
        streak = _check_divergence(tot, initial, streak, "stage 1", epoch)
        trace.append({
            "epoch": epoch, "mask": float(m_sum) / n, "lmk": float(l_sum) / n,
            "photo": 0.0, "perc": 0.0, "env": 0.0, "env_smooth": 0.0, "total": tot,
        })
        if callback is not None:
            callback(epoch, tot)
    return scene_from_torch(ts, scene), trace


def stage2_groups(ts: TorchScene, *, optimize_shape_codes: bool = True,
                  optimize_displacement: bool = True) -> dict[str, torch.Tensor]:
    groups = {
        "sun_direction": ts.sun_dir,
        "envmap": ts.envmap,
        "sun_intensity": ts.sun_intensity,
        "albedo": ts.albedo,
        "specular_intensity": ts.spec_intensity,
        "specular_exponent": ts.spec_exponent,
        "camera_translation": ts.cam_trans,
        "scene_scale": ts.scene_scale,
    }
    if optimize_shape_codes:
        groups.update(shape=ts.shape, expression=ts.expressions, pose=ts.poses)
    if optimize_displacement:
        groups["displacement"] = ts.displacement
    return groups


def stage2_optimize(scene_init: SceneParams, dataset: Dataset, *,
                    epochs: int = 4000, seed: int = 0,
                    weights: LossWeights = LossWeights(),
                    render_config: RenderConfig = RenderConfig(),
                    optimize_shape_codes: bool = True,
                    use_mask_loss: bool = True, use_lmk_loss: bool = True,
                    decay_every: int = 1000, decay_factor: float = 0.1,
                    callback=None) -> tuple[SceneParams, list[dict]]:
    """Photometric optimization over all parameter groups.

    Each epoch visits every frame once in a seeded random order and takes one
    Adam step per frame.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    ts = TorchScene.from_scene(scene_init)
    tds = TorchDataset.from_dataset(dataset)
    optimize_displacement = render_config.use_displacement
    groups = stage2_groups(
        ts, optimize_shape_codes=optimize_shape_codes,
        optimize_displacement=optimize_displacement,
    )
    for p in groups.values():
        p.requires_grad_(True)
    opt = GroupOptimizer(groups, PHOTOMETRIC_LEARNING_RATES)

    n = len(dataset)
    rng = rng_stream(seed, "stage2-frame-order")
    trace: list[dict] = []
    initial = None
    streak = 0
    for epoch in range(epochs):
        opt.lr_scale = decay_factor ** (epoch // decay_every)
        order = rng.permutation(n)
        acc = {k: 0.0 for k in ("mask", "lmk", "photo", "perc", "env", "env_smooth", "total")}
        for j in order:
            opt.zero_grad()
            terms = full_loss_frame(
                ts, tds, int(j), weights, render_config,
                use_mask=use_mask_loss, use_lmk=use_lmk_loss,
            )
            total = terms.total(weights)
            total.backward()
            opt.step()
            project_scene_constraints(ts)
            for k, v in terms.detached().items():
                acc[k] += v
            acc["total"] += float(total)
        row = {k: v / n for k, v in acc.items()}
        row["epoch"] = epoch
        trace.append(row)
        if initial is None:
            initial = row["total"]
        streak = _check_divergence(row["total"], initial, streak, "stage 2", epoch)
        if callback is not None:
            callback(epoch, row["total"])
    return scene_from_torch(ts, scene_init), trace


def write_trace(path: str | Path, trace: list[dict]) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=TRACE_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in trace:
            w.writerow({k: row.get(k, 0.0) for k in TRACE_COLUMNS})


# -- gradient validation ------------------------------------------------------

GRADCHECK_GROUPS = [
    "sun_direction", "envmap", "sun_intensity", "shape", "expression", "pose",
    "displacement", "specular_intensity", "specular_exponent", "albedo",
    "camera_translation", "scene_scale",
]


def gradient_check(scene: SceneParams, dataset: Dataset, param: str,
                   index: tuple[int, ...] | None = None, frame: int = 0, *,
                   weights: LossWeights = LossWeights(),
                   render_config: RenderConfig = RenderConfig(),
                   fd_step: float = 1e-4) -> dict:
    """Compare the analytic gradient of the total loss against central finite
    differences for one scalar of one parameter group.

    Runs in float64. The discrete rasterization structure (pixel-face
    assignment, shadow frustum, silhouette band and edge set) is frozen at the
    base point, matching the per-step linearization the optimizer uses; both
    the analytic and the finite-difference path evaluate the same frozen
    structure.
    """
    ts = TorchScene.from_scene(scene, dtype=torch.float64)
    tds = TorchDataset.from_dataset(dataset, dtype=torch.float64)
    groups = stage2_groups(ts)
    if param not in groups:
        raise KeyError(f"unknown parameter group {param!r}; one of {sorted(groups)}")
    target = groups[param]
    target.requires_grad_(True)

    base = render_frame(ts, frame, config=render_config, need_layers=False)
    snapshot = base.snapshot

    def evaluate() -> torch.Tensor:
        terms = full_loss_frame(ts, tds, frame, weights, render_config, snapshot=snapshot)
        return terms.total(weights)

    loss = evaluate()
    loss.backward()
    grad = target.grad
    if grad is None:
        grad = torch.zeros_like(target)
    if index is None:
        flat_idx = int(torch.argmax(grad.abs().reshape(-1)))
        index = np.unravel_index(flat_idx, target.shape) if target.ndim else ()
    analytic = float(grad[index]) if target.ndim else float(grad)

    with torch.no_grad():
        x0 = float(target[index]) if target.ndim else float(target)
        h = fd_step * max(abs(x0), 1.0)

        def set_value(v: float) -> None:
            if target.ndim:
                target.data[index] = v
            else:
                target.data.fill_(v)

        set_value(x0 + h)
        loss_p = float(evaluate())
        set_value(x0 - h)
        loss_m = float(evaluate())
        set_value(x0)
    fd = (loss_p - loss_m) / (2.0 * h)
    denom = max(abs(analytic), abs(fd), 1e-12)
    return {
        "param": param, "index": tuple(int(i) for i in np.atleast_1d(index)),
        "analytic": analytic, "fd": fd,
        "abs_error": abs(analytic - fd),
        "rel_error": abs(analytic - fd) / denom,
    }


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(out_dir: str | Path, scene: SceneParams,
                    opt: GroupOptimizer | None, epoch: int) -> None:
    from .scene import save_scene

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_scene(scene, out / "scene")
    meta = {"epoch": epoch, "groups": {}}
    if opt is not None:
        state_dir = out / "optstate"
        state_dir.mkdir(exist_ok=True)
        for name, st in opt.state.items():
            stacked = np.stack([
                st.m.detach().cpu().numpy().astype(np.float32).reshape(-1),
                st.v.detach().cpu().numpy().astype(np.float32).reshape(-1),
            ])
            rasterio.write_raster(state_dir / f"{name}.sstx", stacked[:, :, None])
            meta["groups"][name] = {"step": st.step, "skipped": st.skipped}
    (out / "checkpoint.json").write_text(json.dumps(meta, indent=1))
