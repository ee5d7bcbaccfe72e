"""Procedurally generated meshes and morphable bases.

The default subject is a head-like deformed ellipsoid (nose, brow, eye
sockets, chin) built on a lat-long grid, so the repository ships with no
licensed face assets. Any OBJ template with per-vertex UVs can be substituted
via the scene loader; the generators here only fix a concrete default.

Conventions: +Y up, face looks along +Z. UV: u wraps azimuth with the seam at
the back of the head, v runs bottom to top. Seam and pole vertices are exact
positional copies so that normal welding can group them reliably.
"""

from __future__ import annotations

import numpy as np

from .scene import (
    MorphableModel,
    N_CLUSTERS,
    N_EXPR_COEFFS,
    N_LANDMARKS,
    N_SHAPE_COEFFS,
)

HEAD_ROWS = 34
HEAD_COLS = 36


def _grid_mesh(rows: int, cols: int, radial_fn) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Lat-long grid with duplicated seam column and welded-by-copy poles.

    radial_fn(direction (k,3)) -> positions (k,3).
    """
    i = np.arange(rows + 1)
    j = np.arange(cols + 1)
    theta = np.pi * i / rows
    phi = -np.pi + 2.0 * np.pi * j / cols
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    d = np.stack([np.sin(tt) * np.sin(pp), np.cos(tt), np.sin(tt) * np.cos(pp)], axis=-1)
    pos = radial_fn(d.reshape(-1, 3)).reshape(rows + 1, cols + 1, 3)
    pos[:, cols] = pos[:, 0]          # azimuth seam: exact copies
    pos[0, :] = pos[0, 0]             # poles: exact copies
    pos[rows, :] = pos[rows, 0]

    uu = (j / cols)[None, :].repeat(rows + 1, axis=0)
    vv = (1.0 - i / rows)[:, None].repeat(cols + 1, axis=1)
    uv = np.stack([uu, vv], axis=-1)

    def vid(r, c):
        return r * (cols + 1) + c

    faces = []
    for r in range(rows):
        for c in range(cols):
            a, b = vid(r, c), vid(r + 1, c)
            cc, dd = vid(r + 1, c + 1), vid(r, c + 1)
            if r > 0:                  # upper triangle degenerates at the top pole
                faces.append([a, b, dd])
            if r < rows - 1:           # lower triangle degenerates at the bottom pole
                faces.append([b, cc, dd])
    return pos.reshape(-1, 3), uv.reshape(-1, 2), np.asarray(faces, dtype=np.int32)


def _ang_gauss(d: np.ndarray, center: np.ndarray, sigma: float) -> np.ndarray:
    c = center / np.linalg.norm(center)
    ang = np.arccos(np.clip(d @ c, -1.0, 1.0))
    return np.exp(-0.5 * (ang / sigma) ** 2)


def _head_radial(d: np.ndarray) -> np.ndarray:
    base = d * np.array([0.80, 1.00, 0.85])
    bump = (
        0.30 * _ang_gauss(d, np.array([0.0, -0.08, 1.0]), 0.18)      # nose
        + 0.07 * _ang_gauss(d, np.array([0.0, 0.38, 1.0]), 0.38)     # brow ridge
        - 0.06 * _ang_gauss(d, np.array([0.33, 0.18, 1.0]), 0.16)    # eye sockets
        - 0.06 * _ang_gauss(d, np.array([-0.33, 0.18, 1.0]), 0.16)
        + 0.10 * _ang_gauss(d, np.array([0.0, -0.85, 0.9]), 0.30)    # chin
        + 0.04 * _ang_gauss(d, np.array([0.55, -0.25, 0.8]), 0.35)   # cheeks
        + 0.04 * _ang_gauss(d, np.array([-0.55, -0.25, 0.8]), 0.35)
        - 0.05 * _ang_gauss(d, np.array([0.0, -0.35, 1.0]), 0.10)    # philtrum dip
    )
    return base * (1.0 + bump)[:, None]


def sphere_mesh(rows: int = 24, cols: int = 32, radius: float = 1.0):
    """Unit-ish sphere on the same grid layout; used by tests and oracles."""
    return _grid_mesh(rows, cols, lambda d: d * radius)


def _direction_from_uv(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    phi = (u - 0.5) * 2.0 * np.pi
    theta = (1.0 - v) * np.pi
    return np.stack(
        [np.sin(theta) * np.sin(phi), np.cos(theta), np.sin(theta) * np.cos(phi)], axis=-1
    )


def _landmark_uvs() -> np.ndarray:
    """68 canonical targets laid out like the standard facial landmark set."""
    pts = []
    t = np.linspace(-1.0, 1.0, 17)
    pts += [(0.5 + 0.16 * s, 0.40 - 0.13 * (1 - s * s)) for s in t]            # jaw line
    for side in (-1, 1):                                                        # brows
        t5 = np.linspace(0.35, 0.75, 5)
        pts += [(0.5 + side * (0.045 + 0.05 * q), 0.645 + 0.02 * np.sin(q * np.pi)) for q in t5]
    pts += [(0.5, 0.62 - 0.035 * k) for k in range(4)]                          # nose bridge
    pts += [(0.5 + 0.022 * (k - 2), 0.475) for k in range(5)]                   # nostril base
    for side in (-1, 1):                                                        # eyes
        cx = 0.5 + side * 0.075
        pts += [
            (cx - 0.025, 0.60), (cx - 0.012, 0.615), (cx + 0.012, 0.615),
            (cx + 0.025, 0.60), (cx + 0.012, 0.59), (cx - 0.012, 0.59),
        ]


    mouth_t = np.linspace(0, 2 * np.pi, 12, endpoint=False)                     # outer lips
    pts += [(0.5 + 0.055 * np.cos(a), 0.415 + 0.028 * np.sin(a)) for a in mouth_t]
    inner_t = np.linspace(0, 2 * np.pi, 8, endpoint=False)                      # inner lips
    pts += [(0.5 + 0.032 * np.cos(a), 0.415 + 0.012 * np.sin(a)) for a in inner_t]
    return np.asarray(pts, dtype=np.float64)


def _pick_landmarks(uv: np.ndarray) -> np.ndarray:
    targets = _landmark_uvs()
    du = np.abs(uv[None, :, 0] - targets[:, None, 0])
    du = np.minimum(du, 1.0 - du)
    dv = uv[None, :, 1] - targets[:, None, 1]
    idx = np.argmin(du * du + dv * dv, axis=1)
    assert idx.shape == (N_LANDMARKS,)
    return idx.astype(np.int64)


def _cluster_map(res: int = 128) -> np.ndarray:
    """Ten specular-reflectance regions as a UV-space id texture."""
    u, v = np.meshgrid((np.arange(res) + 0.5) / res, (np.arange(res) + 0.5) / res, indexing="xy")
    d = _direction_from_uv(u, v)
    fields = np.stack(
        [
            _ang_gauss(d.reshape(-1, 3), np.array([0.0, -0.08, 1.0]), 0.20),   # nose
            _ang_gauss(d.reshape(-1, 3), np.array([0.0, 0.45, 0.9]), 0.35),    # brow/forehead
            _ang_gauss(d.reshape(-1, 3), np.array([0.0, 0.9, 0.2]), 0.5),      # crown
            _ang_gauss(d.reshape(-1, 3), np.array([0.33, 0.18, 1.0]), 0.18),   # eyes
            _ang_gauss(d.reshape(-1, 3), np.array([-0.33, 0.18, 1.0]), 0.18),
            _ang_gauss(d.reshape(-1, 3), np.array([0.55, -0.25, 0.8]), 0.30),  # cheeks
            _ang_gauss(d.reshape(-1, 3), np.array([-0.55, -0.25, 0.8]), 0.30),
            _ang_gauss(d.reshape(-1, 3), np.array([0.0, -0.45, 1.0]), 0.15),   # lips
            _ang_gauss(d.reshape(-1, 3), np.array([0.0, -0.85, 0.9]), 0.25),   # chin
            np.full(res * res, 0.12),                                          # everything else
        ],
        axis=0,
    )
    return np.argmax(fields, axis=0).reshape(res, res).astype(np.int32)


def _weld_columns(arr: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Copy seam/pole values so duplicated grid vertices carry identical data."""
    a = arr.reshape(rows + 1, cols + 1, *arr.shape[1:])
    a[:, cols] = a[:, 0]
    a[0, :] = a[0, 0]
    a[rows, :] = a[rows, 0]
    return a.reshape(arr.shape)


def _shape_basis(verts: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Smooth global modes; mode 0 is a pure size mode so that scale/depth
    ambiguities during alignment have a geometric outlet."""
    n = verts.shape[0]
    basis = np.zeros((n, 3, N_SHAPE_COEFFS))
    basis[:, :, 0] = 0.25 * verts
    basis[:, 0, 1] = 0.20 * verts[:, 0]                               # width
    basis[:, 1, 2] = 0.20 * verts[:, 1]                               # height
    basis[:, 2, 3] = 0.20 * verts[:, 2]                               # depth
    nose = _ang_gauss(d, np.array([0.0, -0.08, 1.0]), 0.22)
    basis[:, :, 4] = 0.5 * nose[:, None] * d                          # nose size
    brow = _ang_gauss(d, np.array([0.0, 0.38, 1.0]), 0.35)
    basis[:, :, 5] = 0.3 * brow[:, None] * d                          # brow depth
    jaw = np.clip(-verts[:, 1], 0.0, None)
    basis[:, 0, 6] = 0.25 * jaw * np.sign(verts[:, 0]) * np.abs(d[:, 0])  # jaw width
    basis[:, 0, 7] = 0.15 * verts[:, 1]                               # asymmetric shear
    return basis


def _expression_basis(verts: np.ndarray, d: np.ndarray) -> np.ndarray:
    n = verts.shape[0]
    basis = np.zeros((n, 3, N_EXPR_COEFFS))
    mouth = _ang_gauss(d, np.array([0.0, -0.45, 1.0]), 0.25)
    basis[:, 1, 0] = -0.20 * mouth                                    # jaw drop
    corners = _ang_gauss(d, np.array([0.3, -0.4, 1.0]), 0.18) + _ang_gauss(
        d, np.array([-0.3, -0.4, 1.0]), 0.18
    )
    basis[:, 1, 1] = 0.12 * corners                                   # smile
    brow = _ang_gauss(d, np.array([0.0, 0.38, 1.0]), 0.30)
    basis[:, 1, 2] = 0.10 * brow                                      # brow raise
    cheeks = _ang_gauss(d, np.array([0.55, -0.25, 0.8]), 0.28) + _ang_gauss(
        d, np.array([-0.55, -0.25, 0.8]), 0.28
    )
    basis[:, :, 3] = 0.08 * cheeks[:, None] * d                       # cheek puff
    basis[:, 0, 4] = 0.10 * mouth                                     # jaw slide
    basis[:, 2, 5] = 0.10 * mouth                                     # lip pucker
    eyes = _ang_gauss(d, np.array([0.33, 0.18, 1.0]), 0.20) + _ang_gauss(
        d, np.array([-0.33, 0.18, 1.0]), 0.20
    )
    basis[:, 1, 6] = -0.06 * eyes                                     # squint
    basis[:, 1, 7] = -0.08 * brow                                     # frown
    return basis


def default_head_model() -> MorphableModel:
    verts, uv, faces = _grid_mesh(HEAD_ROWS, HEAD_COLS, _head_radial)
    d = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    shape_basis = _weld_columns(_shape_basis(verts, d), HEAD_ROWS, HEAD_COLS)
    expr_basis = _weld_columns(_expression_basis(verts, d), HEAD_ROWS, HEAD_COLS)
    return MorphableModel(
        template_vertices=verts,
        shape_basis=shape_basis.astype(np.float32),
        expression_basis=expr_basis.astype(np.float32),
        faces=faces,
        uv=uv,
        landmark_indices=_pick_landmarks(uv),
        cluster_map=_cluster_map(),
    )


def sphere_model(rows: int = 24, cols: int = 32) -> MorphableModel:
    """Sphere wrapped as a degenerate morphable model (zero bases)."""
    verts, uv, faces = sphere_mesh(rows, cols)
    n = verts.shape[0]
    lm_idx = np.linspace(0, n - 1, N_LANDMARKS).astype(np.int64)
    return MorphableModel(
        template_vertices=verts,
        shape_basis=np.zeros((n, 3, N_SHAPE_COEFFS), dtype=np.float32),
        expression_basis=np.zeros((n, 3, N_EXPR_COEFFS), dtype=np.float32),
        faces=faces,
        uv=uv,
        landmark_indices=lm_idx,
        cluster_map=np.zeros((16, 16), dtype=np.int32),
    )
