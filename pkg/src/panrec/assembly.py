"""Fusing the finest-level distance / semantic / instance heads into the
final panoptic surface.

Surface voxels are those with |sdf| < tau_s. A voxel whose semantic argmax is
a stuff category takes that label with no instance id (stuff precedence);
otherwise it takes its predicted instance id and that instance's majority
category. Voxels with neither usable prediction receive the labels of the
nearest labeled voxel by Euclidean voxel-center distance, ties breaking in
canonical coordinate order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .categories import CategoryTable
from .errors import InvalidArgumentError
from .grid import PanopticVolume, PayloadKind, SparseVolume

logger = logging.getLogger(__name__)

DEFAULT_TAU_S = 1.0


@dataclass(frozen=True)
class AssemblyConfig:
    """Surface-band threshold (voxel units) plus the category partition.
    Requires 0 < tau_s <= tau."""

    categories: CategoryTable
    tau_s: float = DEFAULT_TAU_S
    tau: float = 3.0

    def __post_init__(self):
        if not (0 < self.tau_s <= self.tau):
            raise InvalidArgumentError(f"need 0 < tau_s <= tau, got tau_s={self.tau_s}, tau={self.tau}")


def _nearest_labeled(queries: np.ndarray, donors: np.ndarray) -> np.ndarray:
    """Index of the nearest donor per query voxel coordinate. Distances are
    compared as exact integer squares; ties go to the donor earliest in
    canonical order (donors arrive canonically sorted)."""
    tree = cKDTree(donors.astype(np.float64))
    k = min(len(donors), 32)
    _, idx = tree.query(queries.astype(np.float64), k=k)
    idx = np.atleast_2d(idx) if k > 1 else np.atleast_1d(idx)[:, None]
    out = np.empty(len(queries), dtype=np.int64)
    for row in range(len(queries)):
        cand = idx[row]
        delta = donors[cand].astype(np.int64) - queries[row].astype(np.int64)
        d2 = (delta * delta).sum(axis=1)
        best = d2.min()
        if k < len(donors) and (d2 == best).all():
            # Every returned candidate ties: rescan exactly for this voxel.
            delta = donors.astype(np.int64) - queries[row].astype(np.int64)
            d2 = (delta * delta).sum(axis=1)
            out[row] = np.flatnonzero(d2 == d2.min()).min()
        else:
            out[row] = cand[d2 == best].min()
    return out


def assemble_panoptic_surface(sdf: SparseVolume, sem: SparseVolume, inst: SparseVolume,
                              cfg: AssemblyConfig) -> PanopticVolume:
    """Fuse head volumes into a panoptic volume whose support is exactly the
    surface set {|sdf| < tau_s}. ``sem`` holds per-voxel semantic logits and
    ``inst`` per-voxel instance ids (-1 = none)."""
    for other in (sem, inst):
        if not other.spec.approx_equal(sdf.spec):
            raise InvalidArgumentError("assembly heads must share one grid")
    if sdf.kind != PayloadKind.DISTANCE or sem.kind != PayloadKind.LOGITS \
            or inst.kind != PayloadKind.CHANNEL:
        raise InvalidArgumentError("assembly heads have wrong payload kinds")

    table = cfg.categories
    surface = np.abs(sdf.values) < cfg.tau_s
    coords = sdf.coords[surface]
    values = sdf.values[surface]
    n = len(coords)
    if n == 0:
        return PanopticVolume.empty(sdf.spec)

    sem_found, sem_idx = sem.lookup(coords)
    argmax_cat = np.full(n, -1, dtype=np.int64)
    if sem_found.any():
        argmax_cat[sem_found] = np.argmax(sem.values[sem_idx[sem_found]], axis=1)
    inst_found, inst_idx = inst.lookup(coords)
    instance_ids = np.full(n, -1, dtype=np.int32)
    if inst_found.any():
        instance_ids[inst_found] = inst.values[inst_idx[inst_found]]

    stuff_lut = np.zeros(table.num_semantic_channels, dtype=bool)
    thing_lut = np.zeros(table.num_semantic_channels, dtype=bool)
    for cid in table.stuff_ids:
        stuff_lut[cid] = True
    for cid in table.thing_ids:
        thing_lut[cid] = True

    is_stuff_vox = sem_found & (argmax_cat >= 0) & stuff_lut[np.clip(argmax_cat, 0, None)]
    thing_vox = ~is_stuff_vox & (instance_ids >= 0)

    # Majority things-category per instance over its (non-stuff) voxels;
    # ties break to the smallest category id.
    majority: dict[int, int] = {}
    votes_mask = thing_vox & sem_found & (argmax_cat >= 0) & thing_lut[np.clip(argmax_cat, 0, None)]
    for inst_id in np.unique(instance_ids[thing_vox]):
        votes = argmax_cat[votes_mask & (instance_ids == inst_id)]
        if len(votes):
            cats, counts = np.unique(votes, return_counts=True)
            majority[int(inst_id)] = int(cats[np.argmax(counts)])

    semantic_out = np.full(n, -1, dtype=np.int32)
    instance_out = np.full(n, -1, dtype=np.int32)
    semantic_out[is_stuff_vox] = argmax_cat[is_stuff_vox]
    resolved = is_stuff_vox.copy()

    n_disagree = 0
    for inst_id, cat in majority.items():
        member = thing_vox & (instance_ids == inst_id)
        semantic_out[member] = cat
        instance_out[member] = inst_id
        resolved |= member
        n_disagree += int((member & votes_mask & (argmax_cat != cat)).sum())
    if n_disagree:
        logger.debug("assembly: %d voxels where the semantic head disagrees with "
                     "the instance-majority category", n_disagree)

    unresolved = ~resolved
    if unresolved.any():
        donors = np.flatnonzero(resolved)
        if len(donors) == 0:
            raise InvalidArgumentError("no labeled voxel available for the nearest-label fill")
        nearest = _nearest_labeled(coords[unresolved], coords[donors])
        src = donors[nearest]
        semantic_out[unresolved] = semantic_out[src]
        instance_out[unresolved] = instance_out[src]

    return PanopticVolume(sdf.spec, coords, values, semantic_out, instance_out,
                          _canonical=True)
