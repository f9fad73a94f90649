"""Conservative mesh voxelization via separating-axis triangle/cube tests,
and blocky voxel-face surface meshing (the inverse operation)."""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError
from .grid import (
    NO_INSTANCE,
    NO_LABEL,
    GridSpec,
    PanopticVolume,
    PayloadKind,
    SparseVolume,
    canonical_order,
)
from .mesh import TriangleMesh

# Extracted faces are pulled this fraction of a voxel into their cell so that
# re-voxelizing an extracted surface reproduces the exact occupied set (faces
# on shared cube boundaries would otherwise touch the neighbor cell too).
FACE_INSET_REL = 1e-3

_PAIR_BATCH = 1_000_000


def _sat_triangle_cube(v0, v1, v2):
    """Separating-axis test against the cube [-0.5, 0.5]^3 for triangles given
    by per-pair corner arrays (already relative to the cube center, in grid
    units). Touching counts as intersecting. Returns a boolean mask."""
    hit = np.ones(len(v0), dtype=bool)

    # Cube face normals: interval overlap per axis.
    for axis in range(3):
        lo = np.minimum(np.minimum(v0[:, axis], v1[:, axis]), v2[:, axis])
        hi = np.maximum(np.maximum(v0[:, axis], v1[:, axis]), v2[:, axis])
        hit &= (lo <= 0.5) & (hi >= -0.5)

    # Triangle plane.
    e0 = v1 - v0
    e1 = v2 - v1
    e2 = v0 - v2
    n = np.cross(e0, v2 - v0)
    r = 0.5 * np.abs(n).sum(axis=1)
    hit &= np.abs((n * v0).sum(axis=1)) <= r

    # Nine edge cross products e_axis x edge.
    for edge in (e0, e1, e2):
        for axis in range(3):
            a = np.zeros_like(edge)
            u, w = (axis + 1) % 3, (axis + 2) % 3
            a[:, u] = -edge[:, w]
            a[:, w] = edge[:, u]
            p0 = (a * v0).sum(axis=1)
            p1 = (a * v1).sum(axis=1)
            p2 = (a * v2).sum(axis=1)
            r = 0.5 * np.abs(a).sum(axis=1)
            pmin = np.minimum(np.minimum(p0, p1), p2)
            pmax = np.maximum(np.maximum(p0, p1), p2)
            hit &= (pmin <= r) & (pmax >= -r)
    return hit


def _candidate_pairs(tri_grid: np.ndarray, dims: np.ndarray):
    """Expand every triangle to the voxels of its clipped AABB. Returns the
    per-pair triangle index and voxel coordinate arrays."""
    lo_raw = np.floor(tri_grid.min(axis=1)).astype(np.int64)
    hi_raw = np.floor(tri_grid.max(axis=1)).astype(np.int64)
    alive = (hi_raw >= 0).all(axis=1) & (lo_raw < dims).all(axis=1)
    lo = np.clip(lo_raw, 0, dims - 1)
    hi = np.clip(hi_raw, 0, dims - 1)
    ext = np.where(alive[:, None], hi - lo + 1, 0)
    counts = ext.prod(axis=1)
    total = int(counts.sum())
    if total == 0:
        return np.zeros(0, np.int64), np.zeros((0, 3), np.int64)
    tri_idx = np.repeat(np.arange(len(tri_grid), dtype=np.int64), counts)
    offsets = np.repeat(np.concatenate(([0], np.cumsum(counts)[:-1])), counts)
    local = np.arange(total, dtype=np.int64) - offsets
    ex = ext[tri_idx, 0]
    exy = ex * ext[tri_idx, 1]
    dz = local // exy
    rem = local % exy
    voxels = np.stack([lo[tri_idx, 0] + rem % ex,
                       lo[tri_idx, 1] + rem // ex,
                       lo[tri_idx, 2] + dz], axis=1)
    return tri_idx, voxels


def voxelize_mesh(mesh: TriangleMesh, spec: GridSpec) -> SparseVolume:
    """Mark every voxel whose cube intersects a triangle; each occupied voxel
    carries the (category, instance) of an intersecting triangle, breaking
    ties toward the smallest triangle index. Unlabeled meshes yield (-1, -1).
    """
    if mesh.is_empty:
        return SparseVolume.empty(spec, PayloadKind.LABEL_INSTANCE, width=2)

    tri_grid = (mesh.triangle_corners() - spec.origin_array()) / spec.voxel_size
    dims = spec.dims_array()
    tri_idx, voxels = _candidate_pairs(tri_grid, dims)

    hits_tri, hits_vox = [], []
    for start in range(0, len(tri_idx), _PAIR_BATCH):
        t = tri_idx[start:start + _PAIR_BATCH]
        v = voxels[start:start + _PAIR_BATCH]
        center = v.astype(np.float64) + 0.5
        corners = tri_grid[t]
        mask = _sat_triangle_cube(
            corners[:, 0] - center, corners[:, 1] - center, corners[:, 2] - center
        )
        hits_tri.append(t[mask])
        hits_vox.append(v[mask])
    tri_hit = np.concatenate(hits_tri) if hits_tri else np.zeros(0, np.int64)
    vox_hit = np.concatenate(hits_vox) if hits_vox else np.zeros((0, 3), np.int64)
    if len(vox_hit) == 0:
        return SparseVolume.empty(spec, PayloadKind.LABEL_INSTANCE, width=2)

    lin = spec.linearize(vox_hit)
    order = np.lexsort((tri_hit, lin))
    lin, tri_hit, vox_hit = lin[order], tri_hit[order], vox_hit[order]
    first = np.concatenate(([True], lin[1:] != lin[:-1]))
    vox = vox_hit[first].astype(np.int32)
    tri = tri_hit[first]
    if mesh.has_labels:
        values = np.stack([mesh.categories[tri], mesh.instances[tri]], axis=1)
    else:
        values = np.full((len(vox), 2), (NO_LABEL, NO_INSTANCE), dtype=np.int32)
    return SparseVolume(spec, PayloadKind.LABEL_INSTANCE, vox, values, _canonical=True)


# Corner selectors (0 = low corner, 1 = high corner) per outward face
# direction, wound counterclockwise as seen from outside the cube.
_FACE_CORNERS = {
    (1, 0, 0): ((1, 0, 0), (1, 1, 0), (1, 1, 1), (1, 0, 1)),
    (-1, 0, 0): ((0, 0, 0), (0, 0, 1), (0, 1, 1), (0, 1, 0)),
    (0, 1, 0): ((0, 1, 0), (0, 1, 1), (1, 1, 1), (1, 1, 0)),
    (0, -1, 0): ((0, 0, 0), (1, 0, 0), (1, 0, 1), (0, 0, 1)),
    (0, 0, 1): ((0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)),
    (0, 0, -1): ((0, 0, 0), (0, 1, 0), (1, 1, 0), (1, 0, 0)),
}


def extract_surface_mesh(volume: PanopticVolume, tau_s: float = 1.0) -> TriangleMesh:
    """Boundary faces of the voxel set {|sdf| < tau_s} as a blocky labeled
    mesh; each face inherits its voxel's (semantic, instance). An empty
    surface set yields an empty mesh."""
    surf = volume.surface_mask(tau_s)
    coords = volume.coords[surf].astype(np.int64)
    if len(coords) == 0:
        return TriangleMesh.empty(labeled=True)
    semantic = volume.semantic[surf]
    instance = volume.instance[surf]
    spec = volume.spec
    occupied = np.sort(spec.linearize(coords))

    vs = spec.voxel_size
    inset = FACE_INSET_REL * vs
    lo_w = coords * vs + spec.origin_array() + inset
    hi_w = (coords + 1) * vs + spec.origin_array() - inset

    vert_blocks, face_blocks, cat_blocks, inst_blocks = [], [], [], []
    n_verts = 0
    for direction, corners in _FACE_CORNERS.items():
        nbr = coords + np.asarray(direction, dtype=np.int64)
        in_bounds = spec.contains_coords(nbr)
        covered = np.zeros(len(coords), dtype=bool)
        if in_bounds.any():
            nbr_lin = spec.linearize(nbr[in_bounds])
            pos = np.searchsorted(occupied, nbr_lin)
            pos_c = np.clip(pos, 0, len(occupied) - 1)
            covered[in_bounds] = occupied[pos_c] == nbr_lin
        exposed = ~covered
        n = int(exposed.sum())
        if n == 0:
            continue
        lo_e, hi_e = lo_w[exposed], hi_w[exposed]
        quad = np.empty((n, 4, 3))
        for ci, sel in enumerate(corners):
            for axis in range(3):
                quad[:, ci, axis] = hi_e[:, axis] if sel[axis] else lo_e[:, axis]
        vert_blocks.append(quad.reshape(-1, 3))
        base = n_verts + 4 * np.arange(n, dtype=np.int64)[:, None]
        tri = np.concatenate([base + np.array([0, 1, 2]), base + np.array([0, 2, 3])], axis=0)
        face_blocks.append(tri)
        cat_blocks.append(np.tile(semantic[exposed], 2))
        inst_blocks.append(np.tile(instance[exposed], 2))
        n_verts += 4 * n

    if not face_blocks:
        return TriangleMesh.empty(labeled=True)
    return TriangleMesh(
        vertices=np.concatenate(vert_blocks),
        faces=np.concatenate(face_blocks).astype(np.int32),
        categories=np.concatenate(cat_blocks),
        instances=np.concatenate(inst_blocks),
    )
