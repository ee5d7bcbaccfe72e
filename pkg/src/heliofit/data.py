"""Capture datasets: per-frame targets, mattes, landmark sets and cameras.

Directory layout written by the synthesizer and read by the fitter:

    capture/
      scene.json + rasters      ground-truth scene (synthetic captures only)
      frames/NNN.png            8-bit sRGB targets
      masks/NNN.sstx            3 channels: matte, certain-fg, certain-bg
      landmarks.csv             frame, x0, y0, ..., x67, y67
      cameras.csv               frame, qw, qx, qy, qz, focal, cx, cy, w, h
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.spatial.transform import Rotation

from .scene import CameraIntrinsics


@dataclass
class FrameObservation:
    target: np.ndarray        # (H, W, 3) float32 in [0, 1]
    matte: np.ndarray         # (H, W) float32 soft foreground matte
    fg_region: np.ndarray     # (H, W) bool, certain foreground
    bg_region: np.ndarray     # (H, W) bool, certain background
    landmarks: np.ndarray     # (68, 2) float64 pixel coordinates
    lmk_present: np.ndarray   # (68,) bool
    camera_rotation: np.ndarray  # (3, 3)


@dataclass
class Dataset:
    frames: list[FrameObservation]
    intrinsics: CameraIntrinsics

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class TorchDataset:
    """Dataset staged as torch tensors for loss evaluation."""

    targets: list[torch.Tensor]
    mattes: list[torch.Tensor]
    fg: list[torch.Tensor]
    bg: list[torch.Tensor]
    landmarks: list[torch.Tensor]
    lmk_present: list[torch.Tensor]
    intrinsics: CameraIntrinsics

    @classmethod
    def from_dataset(cls, ds: Dataset, dtype: torch.dtype = torch.float32) -> "TorchDataset":
        return cls(
            targets=[torch.as_tensor(f.target, dtype=dtype) for f in ds.frames],
            mattes=[torch.as_tensor(f.matte, dtype=dtype) for f in ds.frames],
            fg=[torch.as_tensor(f.fg_region) for f in ds.frames],
            bg=[torch.as_tensor(f.bg_region) for f in ds.frames],
            landmarks=[torch.as_tensor(f.landmarks, dtype=dtype) for f in ds.frames],
            lmk_present=[torch.as_tensor(f.lmk_present) for f in ds.frames],
            intrinsics=ds.intrinsics,
        )

    def __len__(self) -> int:
        return len(self.targets)


def save_image(path: str | Path, img: np.ndarray) -> None:
    """Quantize a float [0,1] image to 8-bit PNG."""
    q = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(q).save(path)


def load_image(path: str | Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32)
    return arr / 255.0


def quantize_like_png(img: np.ndarray) -> np.ndarray:
    """The exact value a float image takes after a PNG round trip."""
    q = np.clip(np.rint(np.clip(img, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)
    return q.astype(np.float32) / 255.0


def rotation_to_quat(rot: np.ndarray) -> np.ndarray:
    q = Rotation.from_matrix(rot).as_quat()  # x, y, z, w
    return np.array([q[3], q[0], q[1], q[2]])


def quat_to_rotation(q: np.ndarray) -> np.ndarray:
    return Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()


def save_capture_frames(out_dir: str | Path, frames: list[FrameObservation],
                        intrinsics: CameraIntrinsics) -> None:
    from . import rasterio

    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    lmk_rows = []
    cam_rows = []
    for j, fr in enumerate(frames):
        save_image(out / "frames" / f"{j:03d}.png", fr.target)
        masks = np.stack(
            [fr.matte, fr.fg_region.astype(np.float32), fr.bg_region.astype(np.float32)],
            axis=-1,
        )
        rasterio.write_raster(out / "masks" / f"{j:03d}.sstx", masks)
        lmk_rows.append([j] + [f"{v!r}" for v in fr.landmarks.ravel()])
        q = rotation_to_quat(fr.camera_rotation)
        cam_rows.append(
            [j] + [f"{v!r}" for v in q]
            + [f"{intrinsics.focal!r}", f"{intrinsics.cx!r}", f"{intrinsics.cy!r}",
               str(intrinsics.width), str(intrinsics.height)]
        )
    with open(out / "landmarks.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame"] + [f"{a}{i}" for i in range(68) for a in ("x", "y")])
        w.writerows(lmk_rows)
    with open(out / "cameras.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame", "qw", "qx", "qy", "qz", "focal", "cx", "cy", "width", "height"])
        w.writerows(cam_rows)


def load_capture(path: str | Path) -> Dataset:
    from . import rasterio

    base = Path(path)
    if not (base / "cameras.csv").exists():
        raise FileNotFoundError(f"{base}: not a capture directory (no cameras.csv)")
    with open(base / "cameras.csv") as f:
        cam_rows = list(csv.DictReader(f))
    with open(base / "landmarks.csv") as f:
        lmk_rows = list(csv.DictReader(f))

    intr = None
    frames = []
    for cam, lmk in zip(cam_rows, lmk_rows):
        j = int(cam["frame"])
        if intr is None:
            intr = CameraIntrinsics(
                focal=float(cam["focal"]), cx=float(cam["cx"]), cy=float(cam["cy"]),
                width=int(cam["width"]), height=int(cam["height"]),
            )
        rot = quat_to_rotation(np.array([float(cam[k]) for k in ("qw", "qx", "qy", "qz")]))
        target = load_image(base / "frames" / f"{j:03d}.png")
        masks = rasterio.read_raster(base / "masks" / f"{j:03d}.sstx")
        pts = np.array(
            [[float(lmk[f"x{i}"]), float(lmk[f"y{i}"])] for i in range(68)]
        )
        inside = (
            (pts[:, 0] >= 0) & (pts[:, 0] < intr.width)
            & (pts[:, 1] >= 0) & (pts[:, 1] < intr.height)
        )
        frames.append(FrameObservation(
            target=target,
            matte=masks[:, :, 0],
            fg_region=masks[:, :, 1] >= 0.5,
            bg_region=masks[:, :, 2] >= 0.5,
            landmarks=pts,
            lmk_present=inside,
            camera_rotation=rot,
        ))
    return Dataset(frames=frames, intrinsics=intr)
