"""Reading and writing meshes (OBJ, PLY) and point clouds (PLY)."""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import numpy as np

from .geometry import TriangleMesh, edge_counts

log = logging.getLogger(__name__)

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


class MeshFormatError(ValueError):
    pass


def _fan(poly):
    return [(poly[0], poly[i], poly[i + 1]) for i in range(1, len(poly) - 1)]


def _check_manifold(triangles, path):
    if len(triangles) == 0:
        return
    _, counts = edge_counts(triangles)
    bad = int(np.sum(counts > 2))
    if bad:
        log.warning("%s: %d non-manifold edge(s) (shared by more than two triangles)", path, bad)


def load_mesh(path) -> TriangleMesh:
    """Load an ASCII OBJ or ASCII / binary little-endian PLY mesh.

    Polygons are fan-triangulated. Non-manifold edges are reported as a
    warning; watertightness is available as ``mesh.watertight``.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        verts, tris = _read_obj(path)
    elif suffix == ".ply":
        elements = read_ply(path)
        if "vertex" not in elements:
            raise MeshFormatError(f"{path}: no vertex element")
        v = elements["vertex"]
        verts = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
        tris = []
        for poly in elements.get("face", []):
            tris.extend(_fan(list(poly)))
        tris = np.asarray(tris, dtype=np.int64).reshape(-1, 3)
    else:
        raise MeshFormatError(f"unsupported mesh format: {path.suffix}")
    if len(tris) and (tris.min() < 0 or tris.max() >= len(verts)):
        raise MeshFormatError(f"{path}: face index out of range")
    _check_manifold(tris, path)
    return TriangleMesh(verts, tris)


def _read_obj(path):
    verts, tris = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(s) for s in parts[1:4]])
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        i = int(tok.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    if len(idx) < 3:
                        raise MeshFormatError(f"{path}:{lineno}: face with fewer than 3 vertices")
                    tris.extend(_fan(idx))
            except ValueError as exc:
                if isinstance(exc, MeshFormatError):
                    raise
                raise MeshFormatError(f"{path}:{lineno}: {exc}") from None
    return np.asarray(verts, dtype=np.float64).reshape(-1, 3), np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def read_ply(path):
    """Parse a PLY file into ``{element name: data}``.

    Scalar-only elements come back as numpy structured arrays; elements with
    a list property come back as a list of index arrays (first list only).
    """
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise MeshFormatError(f"{path}: not a PLY file")
        fmt = None
        elements = []
        while True:
            raw = fh.readline()
            if not raw:
                raise MeshFormatError(f"{path}: truncated header")
            parts = raw.decode("ascii", "replace").split()
            if not parts or parts[0] in ("comment", "obj_info"):
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                elements.append((parts[1], int(parts[2]), []))
            elif parts[0] == "property":
                if parts[1] == "list":
                    elements[-1][2].append((parts[4], "list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]]))
                else:
                    elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
            elif parts[0] == "end_header":
                break
        if fmt == "ascii":
            return _read_ply_ascii(fh, elements, path)
        if fmt == "binary_little_endian":
            try:
                return _read_ply_binary(fh, elements, path)
            except ValueError as exc:
                if isinstance(exc, MeshFormatError):
                    raise
                raise MeshFormatError(f"{path}: truncated binary payload ({exc})") from None
        raise MeshFormatError(f"{path}: unsupported PLY format {fmt!r}")


def _read_ply_ascii(fh, elements, path):
    out = {}
    lines = [ln for ln in fh.read().decode("ascii").splitlines() if ln.strip()]
    pos = 0
    for name, count, props in elements:
        block = lines[pos:pos + count]
        pos += count
        if len(block) < count:
            raise MeshFormatError(f"{path}: truncated element {name!r}")
        if any(p[1] == "list" for p in props):
            rows = []
            for line in block:
                vals = line.split()
                i = 0
                lst = None
                for p in props:
                    if p[1] == "list":
                        n = int(vals[i])
                        if lst is None:
                            lst = np.asarray([int(v) for v in vals[i + 1:i + 1 + n]], dtype=np.int64)
                        i += 1 + n
                    else:
                        i += 1
                rows.append(lst)
            out[name] = rows
        else:
            dtype = np.dtype([(p[0], p[1]) for p in props])
            arr = np.zeros(count, dtype=dtype)
            if count:
                table = np.loadtxt(block, dtype=np.float64, ndmin=2)
                for j, p in enumerate(props):
                    arr[p[0]] = table[:, j]
            out[name] = arr
    return out


def _read_ply_binary(fh, elements, path):
    out = {}
    data = fh.read()
    pos = 0
    for name, count, props in elements:
        if not any(p[1] == "list" for p in props):
            dtype = np.dtype([(p[0], "<" + p[1]) for p in props])
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=pos)
            pos += dtype.itemsize * count
            out[name] = arr
            continue
        # fast path: a single list property holding triangles throughout
        if len(props) == 1:
            _, _, ctype, itype = props[0]
            tri = np.dtype([("n", "<" + ctype), ("idx", "<" + itype, (3,))])
            if pos + tri.itemsize * count <= len(data):
                arr = np.frombuffer(data, dtype=tri, count=count, offset=pos)
                if np.all(arr["n"] == 3):
                    out[name] = list(arr["idx"].astype(np.int64))
                    pos += tri.itemsize * count
                    continue
        rows = []
        for _ in range(count):
            lst = None
            for p in props:
                if p[1] == "list":
                    ct, it = np.dtype("<" + p[2]), np.dtype("<" + p[3])
                    n = int(np.frombuffer(data, ct, 1, pos)[0])
                    pos += ct.itemsize
                    vals = np.frombuffer(data, it, n, pos).astype(np.int64)
                    pos += it.itemsize * n
                    if lst is None:
                        lst = vals
                else:
                    pos += np.dtype(p[1]).itemsize
            rows.append(lst)
        out[name] = rows
    if pos > len(data):
        raise MeshFormatError(f"{path}: truncated binary payload")
    return out


def save_obj(mesh: TriangleMesh, path):
    path = Path(path)
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for t in mesh.triangles + 1:
            fh.write(f"f {t[0]} {t[1]} {t[2]}\n")


def save_ply(mesh: TriangleMesh, path):
    """Write a binary little-endian PLY mesh (double vertices, int indices)."""
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int vertex_indices\nend_header\n"
    )
    faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f8").tobytes())
        fh.write(faces.tobytes())


def save_mesh(mesh: TriangleMesh, path):
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        save_obj(mesh, path)
    elif suffix == ".ply":
        save_ply(mesh, path)
    else:
        raise MeshFormatError(f"unsupported mesh format: {suffix}")


def write_point_cloud(path, points, normals=None):
    """Write an ASCII PLY point cloud with x,y,z and optional nx,ny,nz."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    props = ["x", "y", "z"]
    cols = pts
    if normals is not None:
        props += ["nx", "ny", "nz"]
        cols = np.hstack([pts, np.asarray(normals, dtype=np.float64).reshape(-1, 3)])
    header = ["ply", "format ascii 1.0", f"element vertex {len(pts)}"]
    header += [f"property double {p}" for p in props]
    header.append("end_header")
    with open(path, "w") as fh:
        fh.write("\n".join(header) + "\n")
        # repr round-trips float64 exactly
        np.savetxt(fh, cols, fmt="%.17g")


def read_point_cloud(path) -> np.ndarray:
    elements = read_ply(path)
    v = elements.get("vertex")
    if v is None:
        raise MeshFormatError(f"{path}: no vertex element")
    return np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)


if __name__ == "__main__":  # pragma: no cover
    m = load_mesh(sys.argv[1])
    print(f"{len(m.vertices)} vertices, {len(m.triangles)} triangles, watertight={m.watertight}")
