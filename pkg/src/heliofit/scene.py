"""Scene parameterization: the morphable head model plus every optimizable unknown.

A scene couples one :class:`MorphableModel` with :class:`GlobalParams` (shared
across frames) and a list of :class:`FrameParams` (one per capture frame).
Scene objects are treated as immutable; optimization produces new arrays rather
than mutating in place, so a scene can be shared freely across workers.

On-disk form is a ``scene.json`` document holding scalars and small vectors,
with relative paths to SSTX rasters for textures and model bases, and an OBJ
for the template mesh.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import meshio, rasterio

# Default dimensions: small enough for CPU experiments, large enough to keep
# every code path (spatially varying maps, per-cluster specular) meaningful.
N_SHAPE_COEFFS = 8
N_EXPR_COEFFS = 8
DISPLACEMENT_RES = 128
ALBEDO_RES = 256
ENV_ROWS, ENV_COLS = 16, 32
N_CLUSTERS = 10
N_LANDMARKS = 68

# Empirical perspective-conversion constants for real captures where only an
# orthographic alignment is available.
DEFAULT_SCENE_SCALE = 2.6e4
DEFAULT_CAMERA_TRANSLATION = (0.0, 0.0, 1.5e5)


@dataclass(frozen=True)
class MorphableModel:
    """Linear morphable head: template plus shape/expression bases, UV atlas,
    landmark indexing and the per-region specular cluster map."""

    template_vertices: np.ndarray  # (n, 3)
    shape_basis: np.ndarray        # (n, 3, K_beta)
    expression_basis: np.ndarray   # (n, 3, K_psi)
    faces: np.ndarray              # (m, 3) int32
    uv: np.ndarray                 # (n, 2) in [0, 1]^2
    landmark_indices: np.ndarray   # (68,) int
    cluster_map: np.ndarray        # (Hc, Wc) int, ids in {0..9}

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[2]


@dataclass(frozen=True)
class FrameParams:
    """Per-frame unknowns plus the fixed, measured camera orientation."""

    pose: np.ndarray                # (3,) axis-angle, radians
    expression: np.ndarray          # (K_psi,)
    camera_translation: np.ndarray  # (3,) scene units
    camera_rotation: np.ndarray     # (3, 3) orthonormal, fixed input


@dataclass(frozen=True)
class GlobalParams:
    shape: np.ndarray               # (K_beta,)
    displacement: np.ndarray        # (D, D) scalar offsets along the normal
    albedo: np.ndarray              # (A, A, 3) in [0, 1]
    specular_intensity: np.ndarray  # (10,) >= 0
    specular_exponent: np.ndarray   # (10,) > 0
    envmap: np.ndarray              # (16, 32, 3) >= 0
    sun_direction: np.ndarray       # (3,) unit
    sun_intensity: float            # >= 0
    scene_scale: float              # > 0


@dataclass(frozen=True)
class CameraIntrinsics:
    focal: float
    cx: float
    cy: float
    width: int
    height: int


@dataclass(frozen=True)
class SceneParams:
    model: MorphableModel
    glob: GlobalParams
    frames: tuple[FrameParams, ...]
    intrinsics: CameraIntrinsics

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def with_global(self, **kwargs) -> "SceneParams":
        return replace(self, glob=replace(self.glob, **kwargs))


@dataclass(frozen=True)
class ParameterGroup:
    name: str
    scope: str          # "global" | "per-frame"
    learning_rate: float
    shape: tuple[int, ...]


# Initial learning rates for the photometric stage, one row per parameter
# group. Shape, pose and expression share one rate.
PHOTOMETRIC_LEARNING_RATES: dict[str, float] = {
    "shape": 1e-4,
    "expression": 1e-4,
    "pose": 1e-4,
    "displacement": 1e-4,
    "scene_scale": 1e2,
    "camera_translation": 1e2,
    "albedo": 1e-2,
    "specular_exponent": 1e-2,
    "specular_intensity": 1e-2,
    "sun_direction": 1e-3,
    "envmap": 1e-3,
    "sun_intensity": 1e-3,
}

# The coarse-alignment stage moves only geometry and camera parameters.
COARSE_LEARNING_RATES: dict[str, float] = {
    "shape": 1e-4,
    "expression": 1e-4,
    "pose": 1e-4,
    "scene_scale": 1e-2,
    "camera_translation": 1e-2,
}


def parameter_groups(scene: SceneParams) -> list[ParameterGroup]:
    """The 12 optimizable parameter groups with their photometric-stage rates."""
    n = scene.n_frames
    g = scene.glob
    specs = [
        ("sun_direction", "global", (3,)),
        ("envmap", "global", g.envmap.shape),
        ("sun_intensity", "global", ()),
        ("shape", "global", g.shape.shape),
        ("expression", "per-frame", (n, scene.model.n_expression)),
        ("pose", "per-frame", (n, 3)),
        ("displacement", "global", g.displacement.shape),
        ("specular_intensity", "global", (N_CLUSTERS,)),
        ("specular_exponent", "global", (N_CLUSTERS,)),
        ("albedo", "global", g.albedo.shape),
        ("camera_translation", "per-frame", (n, 3)),
        ("scene_scale", "global", ()),
    ]
    return [
        ParameterGroup(name, scope, PHOTOMETRIC_LEARNING_RATES[name], shape)
        for name, scope, shape in specs
    ]


def validate_scene(scene: SceneParams) -> list[str]:
    """Check every structural invariant; returns human-readable violations."""
    report: list[str] = []
    m = scene.model
    g = scene.glob
    n = m.n_vertices

    def finite(name: str, arr: np.ndarray) -> None:
        if not np.all(np.isfinite(arr)):
            report.append(f"{name} contains non-finite values")

    finite("template_vertices", m.template_vertices)
    finite("shape_basis", m.shape_basis)
    finite("expression_basis", m.expression_basis)
    if m.faces.size and (m.faces.min() < 0 or m.faces.max() >= n):
        report.append("face index out of range")
    if m.uv.min() < 0.0 or m.uv.max() > 1.0:
        report.append("uv out of [0,1]")
    if m.landmark_indices.shape != (N_LANDMARKS,):
        report.append(f"expected {N_LANDMARKS} landmark indices")
    elif m.landmark_indices.min() < 0 or m.landmark_indices.max() >= n:
        report.append("landmark index out of range")
    ids = np.unique(m.cluster_map)
    if ids.size > N_CLUSTERS or (ids.size and (ids.min() < 0 or ids.max() >= N_CLUSTERS)):
        report.append(f"cluster ids must lie in 0..{N_CLUSTERS - 1}")

    if abs(np.linalg.norm(g.sun_direction) - 1.0) > 1e-9:
        report.append("sun_direction not unit")
    if g.envmap.min() < 0:
        report.append("envmap has negative radiance")
    if g.albedo.min() < 0 or g.albedo.max() > 1:
        report.append("albedo out of [0,1]")
    if np.any(g.specular_intensity < 0):
        report.append("specular_intensity negative")
    if np.any(g.specular_exponent <= 0):
        report.append("specular_exponent not positive")
    if g.sun_intensity < 0:
        report.append("sun_intensity negative")
    if g.scene_scale <= 0:
        report.append("scene_scale not positive")
    finite("displacement", g.displacement)

    for j, fr in enumerate(scene.frames):
        if not np.all(np.isfinite(fr.pose)) or not np.all(np.isfinite(fr.expression)):
            report.append(f"frame {j}: non-finite pose/expression")
        if not np.all(np.isfinite(fr.camera_translation)):
            report.append(f"frame {j}: non-finite camera translation")
        r = fr.camera_rotation
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-6:
            report.append(f"frame {j}: camera rotation not orthonormal")

    k = scene.intrinsics
    if k.focal <= 0:
        report.append("focal not positive")
    if not (0 <= k.cx < k.width and 0 <= k.cy < k.height):
        report.append("principal point outside image")
    return report


def normalized_sun(direction: np.ndarray) -> np.ndarray:
    v = np.asarray(direction, dtype=np.float64)
    return v / np.linalg.norm(v)


# -- serialization -----------------------------------------------------------

def save_scene(scene: SceneParams, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    m, g = scene.model, scene.glob

    meshio.write_obj(out / "template.obj", m.template_vertices, m.uv, m.faces)
    # Bases as rasters: width = n vertices, height = K coefficients, 3 channels.
    rasterio.write_raster(out / "shape_basis.sstx", m.shape_basis.transpose(2, 0, 1))
    rasterio.write_raster(out / "expression_basis.sstx", m.expression_basis.transpose(2, 0, 1))
    rasterio.write_raster(out / "cluster_map.sstx", m.cluster_map.astype(np.float32))
    rasterio.write_raster(out / "displacement.sstx", g.displacement)
    rasterio.write_raster(out / "albedo.sstx", g.albedo)
    rasterio.write_raster(out / "envmap.sstx", g.envmap)

    doc = {
        "format": "heliofit-scene/1",
        "model": {
            "template": "template.obj",
            "shape_basis": "shape_basis.sstx",
            "expression_basis": "expression_basis.sstx",
            "cluster_map": "cluster_map.sstx",
            "landmark_indices": [int(i) for i in m.landmark_indices],
        },
        "global": {
            "shape": g.shape.tolist(),
            "displacement": "displacement.sstx",
            "albedo": "albedo.sstx",
            "envmap": "envmap.sstx",
            "specular_intensity": g.specular_intensity.tolist(),
            "specular_exponent": g.specular_exponent.tolist(),
            "sun_direction": g.sun_direction.tolist(),
            "sun_intensity": float(g.sun_intensity),
            "scene_scale": float(g.scene_scale),
        },
        "intrinsics": {
            "focal": float(scene.intrinsics.focal),
            "cx": float(scene.intrinsics.cx),
            "cy": float(scene.intrinsics.cy),
            "width": int(scene.intrinsics.width),
            "height": int(scene.intrinsics.height),
        },
        "frames": [
            {
                "pose": fr.pose.tolist(),
                "expression": fr.expression.tolist(),
                "camera_translation": fr.camera_translation.tolist(),
                "camera_rotation": fr.camera_rotation.tolist(),
            }
            for fr in scene.frames
        ],
    }
    (out / "scene.json").write_text(json.dumps(doc, indent=1))
    return out / "scene.json"


def load_scene(path: str | Path) -> SceneParams:
    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    base = path.parent
    doc = json.loads(path.read_text())
    if doc.get("format") != "heliofit-scene/1":
        raise ValueError(f"{path}: not a heliofit scene file")

    md = doc["model"]
    verts, uv, faces = meshio.read_obj(base / md["template"])
    # Rasters stay float32 in memory so that save/load round-trips bit-exactly.
    shape_basis = rasterio.read_raster(base / md["shape_basis"]).transpose(1, 2, 0)
    expr_basis = rasterio.read_raster(base / md["expression_basis"]).transpose(1, 2, 0)
    cluster = rasterio.read_raster(base / md["cluster_map"])[:, :, 0].astype(np.int32)
    model = MorphableModel(
        template_vertices=verts,
        shape_basis=shape_basis,
        expression_basis=expr_basis,
        faces=faces,
        uv=uv,
        landmark_indices=np.asarray(md["landmark_indices"], dtype=np.int64),
        cluster_map=cluster,
    )

    gd = doc["global"]
    glob = GlobalParams(
        shape=np.asarray(gd["shape"], dtype=np.float64),
        displacement=rasterio.read_raster(base / gd["displacement"])[:, :, 0],
        albedo=rasterio.read_raster(base / gd["albedo"]),
        envmap=rasterio.read_raster(base / gd["envmap"]),
        specular_intensity=np.asarray(gd["specular_intensity"], dtype=np.float64),
        specular_exponent=np.asarray(gd["specular_exponent"], dtype=np.float64),
        sun_direction=np.asarray(gd["sun_direction"], dtype=np.float64),
        sun_intensity=float(gd["sun_intensity"]),
        scene_scale=float(gd["scene_scale"]),
    )

    kd = doc["intrinsics"]
    intr = CameraIntrinsics(
        focal=float(kd["focal"]), cx=float(kd["cx"]), cy=float(kd["cy"]),
        width=int(kd["width"]), height=int(kd["height"]),
    )
    frames = tuple(
        FrameParams(
            pose=np.asarray(fd["pose"], dtype=np.float64),
            expression=np.asarray(fd["expression"], dtype=np.float64),
            camera_translation=np.asarray(fd["camera_translation"], dtype=np.float64),
            camera_rotation=np.asarray(fd["camera_rotation"], dtype=np.float64),
        )
        for fd in doc["frames"]
    )
    return SceneParams(model=model, glob=glob, frames=frames, intrinsics=intr)
