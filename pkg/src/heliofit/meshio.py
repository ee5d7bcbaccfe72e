"""OBJ-subset mesh I/O: ``v`` / ``vt`` / ``f`` records, triangles only.

Faces may reference texture coordinates with the ``v/vt`` syntax. Vertices and
UVs are kept in one-to-one correspondence (a vertex on a UV seam must be
duplicated by the asset author); a face referencing vt != v raises.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class MeshFormatError(ValueError):
    pass


def write_obj(path: str | Path, vertices: np.ndarray, uv: np.ndarray, faces: np.ndarray) -> None:
    lines = []
    for v in np.asarray(vertices, dtype=np.float64):
        lines.append(f"v {v[0]!r} {v[1]!r} {v[2]!r}")
    for t in np.asarray(uv, dtype=np.float64):
        lines.append(f"vt {t[0]!r} {t[1]!r}")
    for f in np.asarray(faces, dtype=np.int64):
        lines.append(f"f {f[0] + 1}/{f[0] + 1} {f[1] + 1}/{f[1] + 1} {f[2] + 1}/{f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (vertices n x 3 float64, uv n x 2 float64, faces m x 3 int32)."""
    verts: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[list[int]] = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise MeshFormatError(f"{path}:{lineno}: malformed vertex")
            verts.append([float(x) for x in parts[1:4]])
        elif tag == "vt":
            if len(parts) < 3:
                raise MeshFormatError(f"{path}:{lineno}: malformed uv")
            uvs.append([float(x) for x in parts[1:3]])
        elif tag == "f":
            if len(parts) != 4:
                raise MeshFormatError(f"{path}:{lineno}: only triangles supported")
            idx = []
            for token in parts[1:]:
                fields = token.split("/")
                vi = int(fields[0]) - 1
                if len(fields) > 1 and fields[1] and int(fields[1]) - 1 != vi:
                    raise MeshFormatError(f"{path}:{lineno}: vt index must match v index")
                idx.append(vi)
            faces.append(idx)
        # other record types (vn, o, g, s, usemtl ...) are ignored
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(faces, dtype=np.int32).reshape(-1, 3)
    if uvs:
        t = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
        if t.shape[0] != v.shape[0]:
            raise MeshFormatError(f"{path}: {t.shape[0]} uvs for {v.shape[0]} vertices")
    else:
        t = np.zeros((v.shape[0], 2))
    if f.size and (f.min() < 0 or f.max() >= v.shape[0]):
        raise MeshFormatError(f"{path}: face index out of range")
    return v, t, f
