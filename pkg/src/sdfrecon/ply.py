"""Minimal PLY reader/writer for point clouds and triangle meshes.

Handles ``ascii`` and ``binary_little_endian`` files with a ``vertex`` element
(float ``x y z`` plus optional normals, colors and extra scalar properties)
and an optional ``face`` element with a ``vertex_indices`` list.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
_NAMES = {"i1": "char", "u1": "uchar", "i2": "short", "u2": "ushort",
          "i4": "int", "u4": "uint", "f4": "float", "f8": "double"}


class PlyError(ValueError):
    pass


@dataclass
class PlyData:
    """Vertices ``(N, 3)`` with optional normals, colors, faces and extra per-vertex scalars."""

    vertices: np.ndarray
    normals: np.ndarray | None = None
    colors: np.ndarray | None = None
    faces: np.ndarray | None = None
    extra: dict = field(default_factory=dict)


def _parse_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise PlyError("not a PLY file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("unterminated PLY header")
        tok = line.decode("ascii").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if fmt is not None:
                raise PlyError("multiple format lines")
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyError("property before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], "list", _TYPES[tok[2]], _TYPES[tok[3]]))
            else:
                if tok[1] not in _TYPES:
                    raise PlyError(f"unknown property type {tok[1]!r}")
                elements[-1][2].append((tok[2], _TYPES[tok[1]]))
        else:
            raise PlyError(f"unexpected header line {line!r}")
    if fmt == "binary_big_endian":
        raise PlyError("big-endian PLY is not supported (little-endian or ascii only)")
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported PLY format {fmt!r} (ascii or binary_little_endian only)")
    return fmt, elements


def load_ply(path) -> PlyData:
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        body = fh.read()
    data = {}
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            if any(p[1] == "list" for p in props):
                rows = []
                for _ in range(count):
                    row = []
                    for p in props:
                        if p[1] == "list":
                            n = int(tokens[pos]); pos += 1
                            row.append(np.array(tokens[pos:pos + n], dtype=p[3])); pos += n
                        else:
                            row.append(np.array(tokens[pos], dtype=p[1])); pos += 1
                    rows.append(row)
                data[name] = (props, rows)
            else:
                width = len(props)
                flat = tokens[pos:pos + count * width]
                if len(flat) != count * width:
                    raise PlyError(f"truncated ascii element {name!r}")
                pos += count * width
                arr = np.array(flat, dtype=np.float64).reshape(count, width)
                rec = np.zeros(count, dtype=[(p[0], p[1]) for p in props])
                for j, p in enumerate(props):
                    rec[p[0]] = arr[:, j]
                data[name] = (props, rec)
    else:
        off = 0
        for name, count, props in elements:
            if len(props) == 1 and props[0][1] == "list":
                # fast path: a single list property with all rows of length 3
                ct, it = np.dtype("<" + props[0][2]), np.dtype("<" + props[0][3])
                dt = np.dtype([("n", ct), ("i", it, (3,))])
                if off + count * dt.itemsize <= len(body):
                    rec = np.frombuffer(body, dt, count, off)
                    if np.all(rec["n"] == 3):
                        data[name] = (props, [[r] for r in rec["i"].astype(np.int64)])
                        off += count * dt.itemsize
                        continue
            if any(p[1] == "list" for p in props):
                rows = []
                for _ in range(count):
                    row = []
                    for p in props:
                        if p[1] == "list":
                            ct = np.dtype("<" + p[2])
                            n = int(np.frombuffer(body, ct, 1, off)[0]); off += ct.itemsize
                            it = np.dtype("<" + p[3])
                            row.append(np.frombuffer(body, it, n, off).copy()); off += n * it.itemsize
                        else:
                            it = np.dtype("<" + p[1])
                            row.append(np.frombuffer(body, it, 1, off)[0]); off += it.itemsize
                    rows.append(row)
                data[name] = (props, rows)
            else:
                dt = np.dtype([(p[0], "<" + p[1]) for p in props])
                if off + count * dt.itemsize > len(body):
                    raise PlyError(f"truncated binary element {name!r}")
                rec = np.frombuffer(body, dt, count, off).copy()
                off += count * dt.itemsize
                data[name] = (props, rec)

    if "vertex" not in data:
        raise PlyError("PLY has no vertex element")
    props, rec = data["vertex"]
    names = [p[0] for p in props]
    for req in ("x", "y", "z"):
        if req not in names:
            raise PlyError(f"vertex element lacks required property {req!r}")
    out = PlyData(np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64) if len(rec) else np.zeros((0, 3)))
    used = {"x", "y", "z"}
    if {"nx", "ny", "nz"} <= set(names):
        out.normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(np.float64)
        used |= {"nx", "ny", "nz"}
    if {"red", "green", "blue"} <= set(names):
        out.colors = np.stack([rec["red"], rec["green"], rec["blue"]], axis=1)
        used |= {"red", "green", "blue"}
    for n in names:
        if n not in used:
            out.extra[n] = np.asarray(rec[n])
    if "face" in data:
        fprops, rows = data["face"]
        li = [j for j, p in enumerate(fprops) if p[1] == "list" and p[0] in ("vertex_indices", "vertex_index")]
        if not li:
            raise PlyError("face element lacks vertex_indices")
        tris = [r[li[0]] for r in rows]
        if any(len(t) != 3 for t in tris):
            raise PlyError("only triangle faces are supported")
        out.faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return out


def save_ply(path, vertices, normals=None, colors=None, faces=None, extra=None, binary: bool = True) -> None:
    """Write a point cloud or mesh. Positions are stored as float32 (``extra`` keeps its dtype)."""
    v = np.asarray(vertices, dtype=np.float32).reshape(-1, 3)
    cols = [("x", v[:, 0]), ("y", v[:, 1]), ("z", v[:, 2])]
    if normals is not None:
        nrm = np.asarray(normals, dtype=np.float32).reshape(-1, 3)
        cols += [("nx", nrm[:, 0]), ("ny", nrm[:, 1]), ("nz", nrm[:, 2])]
    if colors is not None:
        c = np.asarray(colors)
        if c.dtype.kind == "f":
            c = np.clip(np.round(c * 255.0), 0, 255)
        c = c.astype(np.uint8).reshape(-1, 3)
        cols += [("red", c[:, 0]), ("green", c[:, 1]), ("blue", c[:, 2])]
    for k, a in (extra or {}).items():
        cols.append((k, np.asarray(a).reshape(-1)))
    dt = np.dtype([(k, a.dtype.newbyteorder("<")) for k, a in cols])
    rec = np.empty(len(v), dtype=dt)
    for k, a in cols:
        rec[k] = a
    f = None if faces is None else np.asarray(faces, dtype=np.int32).reshape(-1, 3)

    lines = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
             f"element vertex {len(v)}"]
    lines += [f"property {_NAMES[dt[k].str[1:]]} {k}" for k, _ in cols]
    if f is not None:
        lines += [f"element face {len(f)}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        if binary:
            fh.write(rec.tobytes())
            if f is not None:
                frec = np.empty(len(f), dtype=[("n", "u1"), ("i", "<i4", (3,))])
                frec["n"] = 3
                frec["i"] = f
                fh.write(frec.tobytes())
        else:
            for row in rec:
                fh.write((" ".join(repr(x.item()) if isinstance(x, np.floating) else str(x) for x in row) + "\n").encode())
            if f is not None:
                for t in f:
                    fh.write(f"3 {t[0]} {t[1]} {t[2]}\n".encode())
    os.replace(tmp, path)

