"""Sparse voxel containers on an integer grid, voxel-set IoU, occupancy
downsampling, and the binary .spvl on-disk format.

A voxel (i, j, k) occupies the axis-aligned cube
``origin + [i, i+1) x [j, j+1) x [k, k+1) * voxel_size``; its center sits at
``origin + (i+0.5, j+0.5, k+0.5) * voxel_size``. Cells are stored in canonical
order: lexicographic by (k, j, i).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import FileFormatError, InvalidArgumentError, UndefinedIoUError

NO_LABEL = -1
NO_INSTANCE = -1


class PayloadKind(IntEnum):
    OCCUPANCY = 0        # no payload
    DISTANCE = 1         # f32 signed distance, voxel units
    FEATURES = 2         # f32 vector
    LOGITS = 3           # f32 vector
    LABEL_INSTANCE = 4   # i32 (category, instance)
    CHANNEL = 5          # i32 channel / instance id
    PANOPTIC = 6         # f32 sdf + i32 semantic + i32 instance


@dataclass(frozen=True)
class GridSpec:
    """Voxel size (meters), grid origin (camera/world space, meters), and
    per-axis extents in voxels."""

    voxel_size: float
    origin: tuple[float, float, float]
    dims: tuple[int, int, int]

    def __post_init__(self):
        if self.voxel_size <= 0:
            raise InvalidArgumentError(f"voxel_size must be positive, got {self.voxel_size}")
        if len(self.origin) != 3 or len(self.dims) != 3:
            raise InvalidArgumentError("origin and dims must have 3 entries")
        if any(d <= 0 for d in self.dims):
            raise InvalidArgumentError(f"dims must be positive, got {self.dims}")
        object.__setattr__(self, "origin", tuple(float(x) for x in self.origin))
        object.__setattr__(self, "dims", tuple(int(x) for x in self.dims))

    @classmethod
    def centered(cls, voxel_size: float, dims, z0: float = 0.0) -> "GridSpec":
        """Grid centered on the optical axis, starting at depth z0; the usual
        frustum-aligned layout for a +z-forward camera."""
        dims = tuple(int(d) for d in (dims, dims, dims)) if np.isscalar(dims) else tuple(int(d) for d in dims)
        origin = (-0.5 * dims[0] * voxel_size, -0.5 * dims[1] * voxel_size, z0)
        return cls(voxel_size=voxel_size, origin=origin, dims=dims)

    @property
    def num_cells(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def origin_array(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    def dims_array(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=np.int64)

    def voxel_centers(self, coords: np.ndarray) -> np.ndarray:
        return (np.asarray(coords, dtype=np.float64) + 0.5) * self.voxel_size + self.origin_array()

    def world_to_voxel(self, points: np.ndarray) -> np.ndarray:
        g = (np.asarray(points, dtype=np.float64) - self.origin_array()) / self.voxel_size
        return np.floor(g).astype(np.int64)

    def contains_coords(self, coords: np.ndarray) -> np.ndarray:
        c = np.asarray(coords)
        return ((c >= 0) & (c < self.dims_array())).all(axis=-1)

    def linearize(self, coords: np.ndarray) -> np.ndarray:
        """Row index ((k * ny) + j) * nx + i; monotone in canonical order."""
        c = np.asarray(coords, dtype=np.int64)
        nx, ny, _ = self.dims
        return (c[..., 2] * ny + c[..., 1]) * nx + c[..., 0]

    def coarsened(self, factor: int) -> "GridSpec":
        if any(d % factor for d in self.dims):
            raise InvalidArgumentError(f"dims {self.dims} not divisible by factor {factor}")
        return GridSpec(
            voxel_size=self.voxel_size * factor,
            origin=self.origin,
            dims=tuple(d // factor for d in self.dims),
        )

    def approx_equal(self, other: "GridSpec", tol: float = 1e-6) -> bool:
        return (
            self.dims == other.dims
            and abs(self.voxel_size - other.voxel_size) <= tol
            and all(abs(a - b) <= tol for a, b in zip(self.origin, other.origin))
        )


def canonical_order(coords: np.ndarray) -> np.ndarray:
    """Sort permutation for lexicographic (k, j, i) order."""
    c = np.asarray(coords)
    return np.lexsort((c[:, 0], c[:, 1], c[:, 2]))


def pack_coords(coords: np.ndarray) -> np.ndarray:
    """Spec-independent injective int64 key per coordinate (21 bits/axis)."""
    c = np.asarray(coords, dtype=np.int64)
    if len(c) and (np.abs(c).max() >= (1 << 20)):
        raise InvalidArgumentError("coordinate out of packable range")
    base = np.int64(1) << 20
    return ((c[..., 2] + base) << 42) | ((c[..., 1] + base) << 21) | (c[..., 0] + base)


_SCALAR_KINDS = {PayloadKind.DISTANCE: np.float32, PayloadKind.CHANNEL: np.int32}
_VECTOR_KINDS = {PayloadKind.FEATURES: np.float32, PayloadKind.LOGITS: np.float32,
                 PayloadKind.LABEL_INSTANCE: np.int32}


class SparseVolume:
    """Mapping from in-bounds voxel coordinates to one payload per cell.

    ``coords`` is an (M, 3) int32 array in canonical order; ``values`` is
    None for OCCUPANCY, an (M,) array for scalar kinds, and an (M, W) array
    for vector kinds. Treat instances as immutable after construction.
    """

    __slots__ = ("spec", "kind", "coords", "values", "_linear")

    def __init__(self, spec: GridSpec, kind: PayloadKind, coords, values=None, *, _canonical=False):
        coords = np.ascontiguousarray(coords, dtype=np.int32).reshape(-1, 3)
        kind = PayloadKind(kind)
        if kind == PayloadKind.PANOPTIC:
            raise InvalidArgumentError("use PanopticVolume for panoptic payloads")
        if kind == PayloadKind.OCCUPANCY:
            values = None
        elif kind in _SCALAR_KINDS:
            values = np.ascontiguousarray(values, dtype=_SCALAR_KINDS[kind]).reshape(-1)
        else:
            values = np.ascontiguousarray(values, dtype=_VECTOR_KINDS[kind])
            if values.ndim != 2:
                raise InvalidArgumentError(f"{kind.name} payload must be 2-D, got {values.ndim}-D")
        if values is not None and len(values) != len(coords):
            raise InvalidArgumentError("payload row count must match cell count")
        if len(coords) and not spec.contains_coords(coords).all():
            raise InvalidArgumentError("stored coordinate outside grid dims")

        if not _canonical:
            order = canonical_order(coords)
            coords = np.ascontiguousarray(coords[order])
            if values is not None:
                values = np.ascontiguousarray(values[order])
        linear = spec.linearize(coords)
        if len(linear) > 1 and (np.diff(linear) <= 0).any():
            if (np.diff(linear) == 0).any():
                raise InvalidArgumentError("duplicate voxel coordinates")
            raise InvalidArgumentError("coords not in canonical order")
        self.spec = spec
        self.kind = kind
        self.coords = coords
        self.values = values
        self._linear = linear

    @classmethod
    def empty(cls, spec: GridSpec, kind: PayloadKind, width: int = 0) -> "SparseVolume":
        kind = PayloadKind(kind)
        coords = np.zeros((0, 3), dtype=np.int32)
        if kind == PayloadKind.OCCUPANCY:
            return cls(spec, kind, coords)
        if kind in _SCALAR_KINDS:
            return cls(spec, kind, coords, np.zeros((0,), dtype=_SCALAR_KINDS[kind]))
        return cls(spec, kind, coords, np.zeros((0, width), dtype=_VECTOR_KINDS[kind]))

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def is_empty(self) -> bool:
        return len(self.coords) == 0

    @property
    def width(self) -> int:
        if self.kind == PayloadKind.OCCUPANCY:
            return 0
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    @property
    def linear(self) -> np.ndarray:
        return self._linear

    def lookup(self, coords) -> tuple[np.ndarray, np.ndarray]:
        """(found, index) for query coordinates; index is valid where found."""
        q = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        in_bounds = self.spec.contains_coords(q)
        lin = np.where(in_bounds, self.spec.linearize(q), -1)
        idx = np.searchsorted(self._linear, lin)
        idx_c = np.clip(idx, 0, max(len(self._linear) - 1, 0))
        found = in_bounds & (len(self._linear) > 0)
        if len(self._linear):
            found &= self._linear[idx_c] == lin
        return found, idx_c

    def contains(self, coords) -> np.ndarray:
        return self.lookup(coords)[0]

    def occupancy_view(self) -> "SparseVolume":
        return SparseVolume(self.spec, PayloadKind.OCCUPANCY, self.coords, _canonical=True)

    def save(self, path) -> None:
        save_volume(self, path)


class PanopticVolume:
    """Sparse volume whose payload is (sdf in voxel units, semantic category,
    instance id). Semantic uses the category table of the active profile with
    its freespace id standing in for "no surface label"; instance -1 means no
    instance. Canonical cell order, treated as immutable."""

    __slots__ = ("spec", "coords", "sdf", "semantic", "instance", "_linear")

    def __init__(self, spec: GridSpec, coords, sdf, semantic, instance, *, _canonical=False):
        coords = np.ascontiguousarray(coords, dtype=np.int32).reshape(-1, 3)
        sdf = np.ascontiguousarray(sdf, dtype=np.float32).reshape(-1)
        semantic = np.ascontiguousarray(semantic, dtype=np.int32).reshape(-1)
        instance = np.ascontiguousarray(instance, dtype=np.int32).reshape(-1)
        if not (len(coords) == len(sdf) == len(semantic) == len(instance)):
            raise InvalidArgumentError("panoptic payload arrays must align with cells")
        if len(coords) and not spec.contains_coords(coords).all():
            raise InvalidArgumentError("stored coordinate outside grid dims")
        if not _canonical:
            order = canonical_order(coords)
            coords = np.ascontiguousarray(coords[order])
            sdf, semantic, instance = sdf[order], semantic[order], instance[order]
        linear = spec.linearize(coords)
        if len(linear) > 1 and (np.diff(linear) <= 0).any():
            raise InvalidArgumentError("duplicate voxel coordinates")
        self.spec = spec
        self.coords = coords
        self.sdf = sdf
        self.semantic = semantic
        self.instance = instance
        self._linear = linear

    @classmethod
    def empty(cls, spec: GridSpec) -> "PanopticVolume":
        z = np.zeros((0,), dtype=np.float32)
        return cls(spec, np.zeros((0, 3), np.int32), z, z.astype(np.int32), z.astype(np.int32))

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def is_empty(self) -> bool:
        return len(self.coords) == 0

    @property
    def linear(self) -> np.ndarray:
        return self._linear

    def lookup(self, coords):
        return SparseVolume.lookup(self, coords)  # same layout, same search

    def surface_mask(self, tau_s: float) -> np.ndarray:
        return np.abs(self.sdf) < tau_s

    def sdf_volume(self) -> SparseVolume:
        return SparseVolume(self.spec, PayloadKind.DISTANCE, self.coords, self.sdf, _canonical=True)

    def save(self, path) -> None:
        save_volume(self, path)


def volumes_equal(a, b) -> bool:
    """Bit-exact cell equality plus (tolerant) grid-spec equality."""
    if not a.spec.approx_equal(b.spec):
        return False
    if isinstance(a, PanopticVolume) != isinstance(b, PanopticVolume):
        return False
    if len(a) != len(b) or not np.array_equal(a.coords, b.coords):
        return False
    if isinstance(a, PanopticVolume):
        return (
            np.array_equal(a.sdf, b.sdf)
            and np.array_equal(a.semantic, b.semantic)
            and np.array_equal(a.instance, b.instance)
        )
    if a.kind != b.kind:
        return False
    if a.values is None:
        return b.values is None
    return b.values is not None and a.values.shape == b.values.shape and np.array_equal(a.values, b.values)


def iou_voxel_sets(a, b, spec: GridSpec | None = None) -> float:
    """|a & b| / |a | b| over voxel coordinate sets. Raises UndefinedIoUError
    when both sets are empty (the metric never compares two empty segments).

    Accepts (N, 3) coordinate arrays or volumes; volume specs must agree.
    """
    spec_a = getattr(a, "spec", spec)
    spec_b = getattr(b, "spec", spec)
    if spec_a is not None and spec_b is not None and not spec_a.approx_equal(spec_b):
        raise InvalidArgumentError("voxel sets live on different grids")
    ca = a.coords if hasattr(a, "coords") else np.asarray(a, dtype=np.int64).reshape(-1, 3)
    cb = b.coords if hasattr(b, "coords") else np.asarray(b, dtype=np.int64).reshape(-1, 3)
    ka = np.unique(pack_coords(ca))
    kb = np.unique(pack_coords(cb))
    union = len(ka) + len(kb) - len(np.intersect1d(ka, kb, assume_unique=True))
    if union == 0:
        raise UndefinedIoUError("IoU of two empty voxel sets is undefined")
    inter = len(ka) + len(kb) - union
    return inter / union


def downsample_occupancy(volume, factor: int) -> SparseVolume:
    """Coarse voxel occupied iff any of its factor^3 children is occupied."""
    if factor not in (2, 4):
        raise InvalidArgumentError(f"downsample factor must be 2 or 4, got {factor}")
    coarse_spec = volume.spec.coarsened(factor)
    if volume.coords.shape[0] == 0:
        return SparseVolume.empty(coarse_spec, PayloadKind.OCCUPANCY)
    coarse = np.unique(volume.coords // factor, axis=0).astype(np.int32)
    return SparseVolume(coarse_spec, PayloadKind.OCCUPANCY, coarse)


# --- .spvl on-disk format --------------------------------------------------
#
# Header (48 bytes, little endian): magic "SPVL", version u32, voxel_size f32,
# origin 3xf32, dims 3xu32, payload tag u32, cell count u64. The tag packs the
# payload kind in its low byte and the vector width in the remaining bits
# (scalar kinds use width 1), so empty vector volumes round-trip their width.
# Cells follow in canonical order as (3xi32 coords, payload).

_SPVL_MAGIC = b"SPVL"
_SPVL_VERSION = 1
_SPVL_HEADER = struct.Struct("<4sIf3f3IIQ")

_PAYLOAD_FIELDS = {
    PayloadKind.OCCUPANCY: [],
    PayloadKind.DISTANCE: [("v", "<f4")],
    PayloadKind.FEATURES: None,  # width-dependent
    PayloadKind.LOGITS: None,
    PayloadKind.LABEL_INSTANCE: [("v", "<i4", (2,))],
    PayloadKind.CHANNEL: [("v", "<i4")],
    PayloadKind.PANOPTIC: [("sdf", "<f4"), ("sem", "<i4"), ("inst", "<i4")],
}


def _cell_dtype(kind: PayloadKind, width: int) -> np.dtype:
    fields = [("c", "<i4", (3,))]
    if kind in (PayloadKind.FEATURES, PayloadKind.LOGITS):
        if width > 0:
            fields.append(("v", "<f4", (width,)))
    else:
        fields.extend(_PAYLOAD_FIELDS[kind])
    return np.dtype(fields)


def save_volume(volume, path) -> None:
    path = Path(path)
    if isinstance(volume, PanopticVolume):
        kind, width = PayloadKind.PANOPTIC, 3
    else:
        kind = volume.kind
        width = max(volume.width, 0) if kind in (PayloadKind.FEATURES, PayloadKind.LOGITS) else {
            PayloadKind.OCCUPANCY: 0, PayloadKind.DISTANCE: 1,
            PayloadKind.LABEL_INSTANCE: 2, PayloadKind.CHANNEL: 1}[kind]
    tag = int(kind) | (int(width) << 8)
    spec = volume.spec
    header = _SPVL_HEADER.pack(
        _SPVL_MAGIC, _SPVL_VERSION, spec.voxel_size, *spec.origin, *spec.dims, tag, len(volume)
    )
    cells = np.empty(len(volume), dtype=_cell_dtype(kind, width))
    cells["c"] = volume.coords
    if kind == PayloadKind.PANOPTIC:
        cells["sdf"] = volume.sdf
        cells["sem"] = volume.semantic
        cells["inst"] = volume.instance
    elif kind != PayloadKind.OCCUPANCY and not (
        kind in (PayloadKind.FEATURES, PayloadKind.LOGITS) and width == 0
    ):
        cells["v"] = volume.values if volume.values.ndim > 1 or kind in (
            PayloadKind.DISTANCE, PayloadKind.CHANNEL) else volume.values
    with open(path, "wb") as f:
        f.write(header)
        f.write(cells.tobytes())


def load_volume(path):
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(_SPVL_HEADER.size)
        if len(head) != _SPVL_HEADER.size:
            raise FileFormatError(f"{path}: truncated header")
        (magic, version, voxel_size, ox, oy, oz, dx, dy, dz, tag, count) = _SPVL_HEADER.unpack(head)
        if magic != _SPVL_MAGIC:
            raise FileFormatError(f"{path}: bad magic {magic!r}")
        if version != _SPVL_VERSION:
            raise FileFormatError(f"{path}: unsupported version {version}")
        try:
            kind = PayloadKind(tag & 0xFF)
        except ValueError as exc:
            raise FileFormatError(f"{path}: unknown payload kind {tag & 0xFF}") from exc
        width = tag >> 8
        spec = GridSpec(voxel_size=float(voxel_size), origin=(ox, oy, oz), dims=(dx, dy, dz))
        dtype = _cell_dtype(kind, width)
        buf = f.read(dtype.itemsize * count)
        if len(buf) != dtype.itemsize * count:
            raise FileFormatError(f"{path}: truncated cell data")
        cells = np.frombuffer(buf, dtype=dtype)
    coords = np.ascontiguousarray(cells["c"])
    if kind == PayloadKind.PANOPTIC:
        return PanopticVolume(
            spec, coords,
            np.ascontiguousarray(cells["sdf"]),
            np.ascontiguousarray(cells["sem"]),
            np.ascontiguousarray(cells["inst"]),
            _canonical=True,
        )
    if kind == PayloadKind.OCCUPANCY:
        return SparseVolume(spec, kind, coords, _canonical=True)
    if kind in (PayloadKind.FEATURES, PayloadKind.LOGITS) and width == 0:
        values = np.zeros((count, 0), dtype=np.float32)
    else:
        values = np.ascontiguousarray(cells["v"])
    return SparseVolume(spec, kind, coords, values, _canonical=True)
