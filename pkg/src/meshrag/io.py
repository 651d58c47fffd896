"""PLY / OBJ readers and writers plus small JSON helpers."""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from .geometry import AffineTransform, PointCloud, TriMesh

logger = logging.getLogger(__name__)

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}
_POSITION = ("x", "y", "z")
_NORMAL = ("nx", "ny", "nz")


class PlyFormatError(ValueError):
    pass


def _parse_header(fh):
    if fh.readline().strip() != b"ply":
        raise PlyFormatError("missing 'ply' magic")
    fmt = None
    elements = []  # (name, count, [(prop, dtype) | (prop, ("list", count_t, item_t))])
    while True:
        line = fh.readline()
        if not line:
            raise PlyFormatError("unterminated header")
        tok = line.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyFormatError("property before element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])))
            else:
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        elif tok[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise PlyFormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def _read_binary_element(fh, count, props, endian):
    if all(not isinstance(t, tuple) for _, t in props):
        dtype = np.dtype([(name, endian + t) for name, t in props])
        buf = fh.read(dtype.itemsize * count)
        if len(buf) != dtype.itemsize * count:
            raise PlyFormatError("truncated binary PLY body")
        return np.frombuffer(buf, dtype=dtype)
    # list properties: parse record by record (only used to skip faces etc.)
    for _ in range(count):
        for _, t in props:
            if isinstance(t, tuple):
                cnt_dt = np.dtype(endian + t[1])
                n = int(np.frombuffer(fh.read(cnt_dt.itemsize), dtype=cnt_dt)[0])
                fh.read(np.dtype(t[2]).itemsize * n)
            else:
                fh.read(np.dtype(t).itemsize)
    return None


def read_ply(path) -> PointCloud:
    """Read the vertex element of a PLY file.

    ``x y z`` are required; ``nx ny nz`` become normals when present; every
    other scalar vertex property lands in ``PointCloud.attributes``.
    """
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        vertex = None
        if fmt == "ascii":
            lines = fh.read().decode("ascii").splitlines()
            pos = 0
            for name, count, props in elements:
                rows = lines[pos : pos + count]
                pos += count
                if name == "vertex":
                    if any(isinstance(t, tuple) for _, t in props):
                        raise PlyFormatError("list properties on vertices are not supported")
                    data = np.loadtxt(rows, dtype=np.float64, ndmin=2) if count else np.zeros((0, len(props)))
                    vertex = {p: data[:, i].astype(t) for i, (p, t) in enumerate(props)}
                    break
        else:
            endian = "<" if fmt == "binary_little_endian" else ">"
            for name, count, props in elements:
                arr = _read_binary_element(fh, count, props, endian)
                if name == "vertex":
                    if arr is None:
                        raise PlyFormatError("list properties on vertices are not supported")
                    vertex = {p: np.asarray(arr[p]).astype(arr.dtype[p].newbyteorder("=")) for p, _ in props}
                    break
    if vertex is None or not all(k in vertex for k in _POSITION):
        raise PlyFormatError(f"{path}: no vertex element with x, y, z")
    positions = np.stack([vertex[k] for k in _POSITION], axis=1).astype(np.float64)
    normals = None
    if all(k in vertex for k in _NORMAL):
        normals = np.stack([vertex[k] for k in _NORMAL], axis=1).astype(np.float64)
    extras = {k: v for k, v in vertex.items() if k not in _POSITION + _NORMAL}
    if normals is None:
        return PointCloud(positions, None, extras)
    return PointCloud.from_unnormalized(positions, normals, attributes=extras)


def write_ply(path, cloud: PointCloud, binary: bool = False, labels=None, colors=None) -> None:
    """Write positions (+ normals, + optional int ``part_id`` and uchar colors).

    Other attributes of the cloud are not written.
    """
    fields = [(k, "f8", cloud.positions[:, i]) for i, k in enumerate(_POSITION)]
    if cloud.normals is not None:
        fields += [(k, "f8", cloud.normals[:, i]) for i, k in enumerate(_NORMAL)]
    if labels is not None:
        fields.append(("part_id", "i4", np.asarray(labels)))
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        fields += [(k, "u1", colors[:, i]) for i, k in enumerate(("red", "green", "blue"))]
    ply_name = {"f8": "double", "i4": "int", "u1": "uchar"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(cloud)}"]
    header += [f"property {ply_name[t]} {k}" for k, t, _ in fields]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            rec = np.empty(len(cloud), dtype=[(k, "<" + t) for k, t, _ in fields])
            for k, _, v in fields:
                rec[k] = v
            fh.write(rec.tobytes())
        else:
            fmts = ["%.17g" if t == "f8" else "%d" for _, t, _ in fields]
            table = np.column_stack([np.asarray(v, dtype=np.float64) for _, _, v in fields])
            np.savetxt(fh, table.reshape(len(cloud), len(fields)), fmt=fmts)


def read_obj(path) -> TriMesh:
    """Read ``v`` and ``f`` records; polygons are fan-triangulated.

    ``vn``/``vt`` records are accepted and ignored.  Faces that repeat a
    vertex are dropped.
    """
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = []
                for t in tok[1:]:
                    i = int(t.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for j in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[j], idx[j + 1]))
    mesh = TriMesh.cleaned(np.asarray(verts, dtype=np.float64).reshape(-1, 3),
                           np.asarray(faces, dtype=np.int64).reshape(-1, 3))
    if len(mesh.faces) != len(faces):
        logger.warning("%s: dropped %d degenerate faces", path, len(faces) - len(mesh.faces))
    return mesh


def write_obj(path, mesh: TriMesh, normals: bool = False) -> None:
    """Write 1-based ``v``/``f`` records, optionally with area-weighted ``vn``."""
    out = [f"v {x:.10g} {y:.10g} {z:.10g}" for x, y, z in mesh.vertices]
    if normals:
        vn = np.zeros_like(mesh.vertices)
        cross = mesh.face_cross()
        for k in range(3):
            np.add.at(vn, mesh.faces[:, k], cross)
        n = np.linalg.norm(vn, axis=1, keepdims=True)
        vn = np.divide(vn, n, out=np.zeros_like(vn), where=n > 0)
        out += [f"vn {x:.10g} {y:.10g} {z:.10g}" for x, y, z in vn]
        out += [f"f {a + 1}//{a + 1} {b + 1}//{b + 1} {c + 1}//{c + 1}" for a, b, c in mesh.faces]
    else:
        out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def labels_to_json(labels, n_parts: int) -> dict:
    return {"n_parts": int(n_parts), "labels": [int(x) for x in labels]}


def write_labels(path, labels, n_parts: int) -> None:
    Path(path).write_text(json.dumps(labels_to_json(labels, n_parts)), encoding="utf-8")


def read_labels(path) -> tuple[np.ndarray, int]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return np.asarray(data["labels"], dtype=np.int64), int(data["n_parts"])


def transform_to_json(t: AffineTransform) -> list[float]:
    return t.to_list()


def transform_from_json(values) -> AffineTransform:
    return AffineTransform.from_list(values)
