"""Indexed triangle meshes with optional per-face (category, instance) labels,
plus ASCII/binary PLY and OBJ readers and writers."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FileFormatError, InvalidArgumentError

NO_INSTANCE = -1


@dataclass
class TriangleMesh:
    """Triangle soup in meters. ``categories``/``instances`` label each face;
    both are present or both absent. Instance -1 means "no instance" (stuff).

    Arrays are treated as immutable after construction.
    """

    vertices: np.ndarray
    faces: np.ndarray
    categories: np.ndarray | None = None
    instances: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int32).reshape(-1, 3)
        if (self.categories is None) != (self.instances is None):
            raise InvalidArgumentError("categories and instances must both be given or both omitted")
        if self.categories is not None:
            self.categories = np.ascontiguousarray(self.categories, dtype=np.int32).reshape(-1)
            self.instances = np.ascontiguousarray(self.instances, dtype=np.int32).reshape(-1)
            if len(self.categories) != len(self.faces) or len(self.instances) != len(self.faces):
                raise InvalidArgumentError("per-face labels must match the face count")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise InvalidArgumentError("face index out of range")

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    @property
    def has_labels(self) -> bool:
        return self.categories is not None

    def triangle_corners(self) -> np.ndarray:
        """Per-face corner positions, shape (F, 3, 3)."""
        return self.vertices[self.faces]

    def areas(self) -> np.ndarray:
        tri = self.triangle_corners()
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(cross, axis=1)

    def select_faces(self, keep: np.ndarray) -> "TriangleMesh":
        """Sub-mesh with the selected faces; unreferenced vertices are dropped
        and indices compacted. Vertex order is preserved."""
        faces = self.faces[keep]
        used = np.unique(faces)
        remap = np.full(max(len(self.vertices), 1), -1, dtype=np.int32)
        remap[used] = np.arange(len(used), dtype=np.int32)
        return TriangleMesh(
            vertices=self.vertices[used],
            faces=remap[faces],
            categories=None if self.categories is None else self.categories[keep],
            instances=None if self.instances is None else self.instances[keep],
        )

    @classmethod
    def empty(cls, labeled: bool = False) -> "TriangleMesh":
        z = np.zeros((0,), dtype=np.int32)
        return cls(
            vertices=np.zeros((0, 3)),
            faces=np.zeros((0, 3), dtype=np.int32),
            categories=z if labeled else None,
            instances=z.copy() if labeled else None,
        )

    @classmethod
    def concatenate(cls, meshes) -> "TriangleMesh":
        meshes = [m for m in meshes]
        if not meshes:
            return cls.empty()
        labeled = all(m.has_labels for m in meshes)
        verts, faces, cats, insts = [], [], [], []
        offset = 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + offset)
            offset += m.num_vertices
            if labeled:
                cats.append(m.categories)
                insts.append(m.instances)
        return cls(
            vertices=np.concatenate(verts) if verts else np.zeros((0, 3)),
            faces=np.concatenate(faces) if faces else np.zeros((0, 3), np.int32),
            categories=np.concatenate(cats) if labeled else None,
            instances=np.concatenate(insts) if labeled else None,
        )


# --- PLY -----------------------------------------------------------------

_PLY_SCALARS = {
    "char": ("b", 1), "int8": ("b", 1),
    "uchar": ("B", 1), "uint8": ("B", 1),
    "short": ("h", 2), "int16": ("h", 2),
    "ushort": ("H", 2), "uint16": ("H", 2),
    "int": ("i", 4), "int32": ("i", 4),
    "uint": ("I", 4), "uint32": ("I", 4),
    "float": ("f", 4), "float32": ("f", 4),
    "double": ("d", 8), "float64": ("d", 8),
}


def save_ply(mesh: TriangleMesh, path, binary: bool = True) -> None:
    """Write a PLY file; labeled meshes get per-face int category/instance
    properties (consumed by the evaluator and by external viewers)."""
    path = Path(path)
    lines = [
        "ply",
        "format binary_little_endian 1.0" if binary else "format ascii 1.0",
        "comment panrec surface mesh",
        f"element vertex {mesh.num_vertices}",
        "property float x",
        "property float y",
        "property float z",
        f"element face {mesh.num_faces}",
        "property list uchar int vertex_indices",
    ]
    if mesh.has_labels:
        lines += ["property int category", "property int instance"]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")

    with open(path, "wb") as f:
        f.write(header)
        verts = mesh.vertices.astype("<f4")
        if binary:
            f.write(verts.tobytes())
            if mesh.has_labels:
                rec = np.dtype([("n", "u1"), ("idx", "<i4", (3,)), ("cat", "<i4"), ("inst", "<i4")])
                data = np.empty(mesh.num_faces, dtype=rec)
                data["n"] = 3
                data["idx"] = mesh.faces
                data["cat"] = mesh.categories
                data["inst"] = mesh.instances
            else:
                rec = np.dtype([("n", "u1"), ("idx", "<i4", (3,))])
                data = np.empty(mesh.num_faces, dtype=rec)
                data["n"] = 3
                data["idx"] = mesh.faces
            f.write(data.tobytes())
        else:
            for v in verts:
                f.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n".encode("ascii"))
            for i, face in enumerate(mesh.faces):
                row = f"3 {face[0]} {face[1]} {face[2]}"
                if mesh.has_labels:
                    row += f" {mesh.categories[i]} {mesh.instances[i]}"
                f.write((row + "\n").encode("ascii"))


def _parse_ply_header(f):
    def next_line():
        raw = f.readline()
        if not raw:
            raise FileFormatError("unexpected end of PLY header")
        return raw.decode("ascii", errors="replace").strip()

    if next_line() != "ply":
        raise FileFormatError("not a PLY file")
    fmt = None
    elements = []  # (name, count, [(prop_name, kind)]) kind: scalar code or ("list", count_code, item_code)
    while True:
        line = next_line()
        if line == "end_header":
            break
        tokens = line.split()
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise FileFormatError("PLY property before any element")
            if tokens[1] == "list":
                if tokens[2] not in _PLY_SCALARS or tokens[3] not in _PLY_SCALARS:
                    raise FileFormatError(f"unsupported PLY list types: {line}")
                elements[-1][2].append((tokens[4], ("list", tokens[2], tokens[3])))
            else:
                if tokens[1] not in _PLY_SCALARS:
                    raise FileFormatError(f"unsupported PLY scalar type: {tokens[1]}")
                elements[-1][2].append((tokens[2], tokens[1]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise FileFormatError(f"unsupported PLY format: {fmt}")
    return fmt, elements


def load_ply(path) -> TriangleMesh:
    """Read ASCII or binary little-endian PLY. Vertex x/y/z and face
    vertex_indices are required; int face properties named category/instance
    are picked up as labels; other properties are skipped."""
    path = Path(path)
    with open(path, "rb") as f:
        fmt, elements = _parse_ply_header(f)
        data = {}
        for name, count, props in elements:
            if fmt == "ascii":
                rows = []
                for _ in range(count):
                    line = f.readline().decode("ascii")
                    if not line:
                        raise FileFormatError("unexpected end of PLY data")
                    rows.append(line.split())
                data[name] = _decode_ascii_element(rows, props)
            else:
                data[name] = _decode_binary_element(f, count, props)

    if "vertex" not in data or "face" not in data:
        raise FileFormatError("PLY misses vertex or face element")
    vert = data["vertex"]
    try:
        vertices = np.stack([vert["x"], vert["y"], vert["z"]], axis=1)
    except KeyError as exc:
        raise FileFormatError("PLY vertex element misses x/y/z") from exc
    face = data["face"]
    key = "vertex_indices" if "vertex_indices" in face else "vertex_index"
    if key not in face:
        raise FileFormatError("PLY face element misses vertex_indices")

    faces, cats, insts = [], [], []
    labeled = "category" in face and "instance" in face
    for row_i, idx in enumerate(face[key]):
        if len(idx) < 3:
            raise FileFormatError("PLY face with fewer than 3 indices")
        for a in range(1, len(idx) - 1):  # fan-triangulate polygons
            faces.append((idx[0], idx[a], idx[a + 1]))
            if labeled:
                cats.append(face["category"][row_i])
                insts.append(face["instance"][row_i])
    return TriangleMesh(
        vertices=vertices,
        faces=np.asarray(faces, dtype=np.int32).reshape(-1, 3),
        categories=np.asarray(cats, dtype=np.int32) if labeled else None,
        instances=np.asarray(insts, dtype=np.int32) if labeled else None,
    )


def _decode_ascii_element(rows, props):
    out = {name: [] for name, _ in props}
    for tokens in rows:
        pos = 0
        for name, kind in props:
            if isinstance(kind, tuple):
                n = int(tokens[pos]); pos += 1
                items = [_ascii_scalar(t, kind[2]) for t in tokens[pos:pos + n]]
                pos += n
                out[name].append(items)
            else:
                out[name].append(_ascii_scalar(tokens[pos], kind)); pos += 1
    for name, kind in props:
        if not isinstance(kind, tuple):
            out[name] = np.asarray(out[name])
    return out


def _ascii_scalar(token, kind):
    return float(token) if kind in ("float", "float32", "double", "float64") else int(token)


def _decode_binary_element(f, count, props):
    fixed = all(not isinstance(kind, tuple) for _, kind in props)
    if fixed:
        dtype = np.dtype([(name, "<" + _PLY_SCALARS[kind][0]) for name, kind in props])
        buf = f.read(dtype.itemsize * count)
        if len(buf) != dtype.itemsize * count:
            raise FileFormatError("unexpected end of PLY data")
        arr = np.frombuffer(buf, dtype=dtype)
        return {name: np.array(arr[name]) for name, _ in props}
    out = {name: [] for name, _ in props}
    for _ in range(count):
        for name, kind in props:
            if isinstance(kind, tuple):
                ccode, csize = _PLY_SCALARS[kind[1]]
                icode, isize = _PLY_SCALARS[kind[2]]
                n = struct.unpack("<" + ccode, f.read(csize))[0]
                items = struct.unpack(f"<{n}{icode}", f.read(isize * n))
                out[name].append(list(items))
            else:
                code, size = _PLY_SCALARS[kind]
                out[name].append(struct.unpack("<" + code, f.read(size))[0])
    for name, kind in props:
        if not isinstance(kind, tuple):
            out[name] = np.asarray(out[name])
    return out


# --- OBJ -----------------------------------------------------------------

def save_obj(mesh: TriangleMesh, path) -> None:
    """Write positions and faces; OBJ carries no panoptic labels."""
    with open(path, "w", encoding="ascii") as f:
        f.write("# panrec mesh\n")
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for face in mesh.faces:
            f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")


def load_obj(path) -> TriangleMesh:
    verts, faces = [], []
    with open(path, "r", encoding="ascii", errors="replace") as f:
        for line in f:
            tokens = line.split()
            if not tokens:
                continue
            if tokens[0] == "v":
                if len(tokens) < 4:
                    raise FileFormatError("OBJ vertex with fewer than 3 coordinates")
                verts.append([float(t) for t in tokens[1:4]])
            elif tokens[0] == "f":
                idx = [int(t.split("/")[0]) - 1 for t in tokens[1:]]
                if len(idx) < 3:
                    raise FileFormatError("OBJ face with fewer than 3 indices")
                for a in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[a], idx[a + 1]))
    return TriangleMesh(
        vertices=np.asarray(verts, dtype=np.float64).reshape(-1, 3),
        faces=np.asarray(faces, dtype=np.int32).reshape(-1, 3),
    )


def load_mesh(path) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return load_ply(path)
    if path.suffix.lower() == ".obj":
        return load_obj(path)
    raise FileFormatError(f"unknown mesh extension: {path.suffix}")


def save_mesh(mesh: TriangleMesh, path, **kwargs) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        save_ply(mesh, path, **kwargs)
    elif path.suffix.lower() == ".obj":
        save_obj(mesh, path)
    else:
        raise FileFormatError(f"unknown mesh extension: {path.suffix}")
