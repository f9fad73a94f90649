"""Coarse-to-fine sparse generation: occupancy predicted at each level gates
which sparse sites exist at the next finer level, with pluggable per-level
predictors behind the LevelPredictor contract.

The coarsest level is dense over its full grid (new structure must be able to
appear anywhere); every finer level contains exactly the children of accepted
parents. At the finest level (h = 0) the accepted sites are written out as a
panoptic volume: the distance head becomes the sdf, the semantic head gets an
argmax, and the instance channels are decoded and mapped to instance ids.
"""

from __future__ import annotations

import json
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolationError, InvalidArgumentError
from .grid import (
    GridSpec,
    PanopticVolume,
    PayloadKind,
    SparseVolume,
    canonical_order,
    downsample_occupancy,
    load_volume,
)
from .instances import decode_instance_channels
from .lifting import LiftedVolumes

DEFAULT_THETA_OCC = 0.5
DEFAULT_NUM_LEVELS = 3


@dataclass
class LevelOutput:
    """Per-site head outputs at one hierarchy level. ``distance`` is required
    at the finest level only; instance channels are required at every level
    (each level carries an instance loss)."""

    occupancy: np.ndarray
    semantic_logits: np.ndarray
    instance_logits: np.ndarray
    distance: np.ndarray | None = None


class LevelPredictor(ABC):
    """Evaluator mapping (level, sites) to per-site outputs. Implementations
    here are deterministic test predictors and the file-backed replay
    predictor; trained evaluators plug in behind the same contract."""

    @abstractmethod
    def evaluate(self, level: int, sites: np.ndarray) -> LevelOutput:
        """Outputs defined exactly on ``sites`` (one row per site)."""

    def channel_instance_ids(self) -> np.ndarray | None:
        """Instance id per channel (channel 0 -> -1); None means channels
        decode to their own index with 0 meaning no instance."""
        return None


@dataclass
class LevelRecord:
    level: int
    spec: GridSpec
    sites: np.ndarray
    output: LevelOutput
    accepted: np.ndarray


@dataclass
class HierarchyState:
    """Per-level site sets and head outputs, coarsest first."""

    records: list[LevelRecord]

    def record(self, level: int) -> LevelRecord:
        for rec in self.records:
            if rec.level == level:
                return rec
        raise InvalidArgumentError(f"no record for level {level}")

    def level0_heads(self) -> tuple[SparseVolume, SparseVolume, SparseVolume]:
        """Finest-level (sdf, semantic-logit, instance-id) volumes on the
        accepted site set, ready for panoptic assembly."""
        rec = self.record(0)
        coords = rec.sites[rec.accepted].astype(np.int32)
        sdf = SparseVolume(rec.spec, PayloadKind.DISTANCE, coords,
                           rec.output.distance[rec.accepted], _canonical=True)
        sem = SparseVolume(rec.spec, PayloadKind.LOGITS, coords,
                           rec.output.semantic_logits[rec.accepted], _canonical=True)
        inst_logits = SparseVolume(rec.spec, PayloadKind.LOGITS, coords,
                                   rec.output.instance_logits[rec.accepted], _canonical=True)
        return sdf, sem, inst_logits


def occupancy_to_sites(sites: np.ndarray, occupancy: np.ndarray, theta_occ: float,
                       child_spec: GridSpec) -> np.ndarray:
    """Sites with occupancy >= theta_occ (boundary accepted), each expanded to
    its 8 children at the next finer level, clipped to the child grid."""
    if not (0 < theta_occ < 1):
        raise InvalidArgumentError(f"theta_occ must lie in (0, 1), got {theta_occ}")
    accepted = np.asarray(sites, dtype=np.int64)[np.asarray(occupancy) >= theta_occ]
    if len(accepted) == 0:
        return np.zeros((0, 3), dtype=np.int32)
    offsets = np.array([[dx, dy, dz] for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)],
                       dtype=np.int64)
    children = (accepted[:, None, :] * 2 + offsets[None, :, :]).reshape(-1, 3)
    children = children[child_spec.contains_coords(children)]
    children = np.unique(children, axis=0).astype(np.int32)
    return children[canonical_order(children)]


def _dense_sites(spec: GridSpec) -> np.ndarray:
    nx, ny, nz = spec.dims
    kk, jj, ii = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    return np.stack([ii.reshape(-1), jj.reshape(-1), kk.reshape(-1)], axis=1).astype(np.int32)


def _validate_output(level: int, sites: np.ndarray, out: LevelOutput) -> None:
    m = len(sites)
    if out.occupancy is None or len(np.atleast_1d(out.occupancy)) != m:
        raise ContractViolationError(f"level {level}: occupancy not defined on the site set")
    occ = np.asarray(out.occupancy, dtype=np.float64)
    if m and (occ.min() < 0 or occ.max() > 1):
        raise ContractViolationError(f"level {level}: occupancy outside [0, 1]")
    for name, arr in (("semantic_logits", out.semantic_logits),
                      ("instance_logits", out.instance_logits)):
        if arr is None or arr.ndim != 2 or len(arr) != m:
            raise ContractViolationError(f"level {level}: {name} not defined on the site set")
    if level == 0:
        if out.distance is None or len(np.atleast_1d(out.distance)) != m:
            raise ContractViolationError("level 0 must output a distance per site")


def run_coarse_to_fine(seed_volume, predictor: LevelPredictor,
                       theta_occ: float = DEFAULT_THETA_OCC,
                       num_levels: int = DEFAULT_NUM_LEVELS) -> tuple[PanopticVolume, HierarchyState]:
    """Iterate levels coarse to fine, applying the predictor and occupancy
    gating; returns the decoded finest-level panoptic volume plus per-level
    intermediates for loss evaluation.

    ``seed_volume`` fixes the finest grid (a LiftedVolumes or any volume).
    """
    seed = seed_volume.tsdf if isinstance(seed_volume, LiftedVolumes) else seed_volume
    fine_spec = seed.spec
    if num_levels < 1:
        raise InvalidArgumentError("need at least one hierarchy level")
    scale = 2 ** (num_levels - 1)
    if any(d % scale for d in fine_spec.dims):
        raise InvalidArgumentError(f"dims {fine_spec.dims} not divisible by 2^{num_levels - 1}")

    specs = {h: fine_spec.coarsened(2 ** h) if h else fine_spec for h in range(num_levels)}
    sites = _dense_sites(specs[num_levels - 1])

    records: list[LevelRecord] = []
    for level in range(num_levels - 1, -1, -1):
        out = predictor.evaluate(level, sites)
        _validate_output(level, sites, out)
        occ = np.asarray(out.occupancy, dtype=np.float64)
        accepted = occ >= theta_occ
        records.append(LevelRecord(level=level, spec=specs[level], sites=sites,
                                   output=out, accepted=accepted))
        if level > 0:
            sites = occupancy_to_sites(sites, occ, theta_occ, specs[level - 1])

    state = HierarchyState(records=records)
    rec0 = state.record(0)
    coords = rec0.sites[rec0.accepted].astype(np.int32)
    sdf = np.asarray(rec0.output.distance, dtype=np.float32)[rec0.accepted]
    semantic = (np.argmax(rec0.output.semantic_logits[rec0.accepted], axis=1).astype(np.int32)
                if len(coords) else np.zeros(0, np.int32))
    inst_vol = SparseVolume(fine_spec, PayloadKind.LOGITS, coords,
                            rec0.output.instance_logits[rec0.accepted], _canonical=True)
    channels = decode_instance_channels(inst_vol).values
    table = predictor.channel_instance_ids()
    if table is not None:
        table = np.asarray(table, dtype=np.int32)
        if len(channels) and int(channels.max()) >= len(table):
            raise ContractViolationError("instance channel exceeds the predictor's channel table")
        instance = table[channels] if len(channels) else np.zeros(0, np.int32)
    else:
        instance = np.where(channels == 0, -1, channels).astype(np.int32)
    volume = PanopticVolume(fine_spec, coords, sdf, semantic, instance, _canonical=True)
    return volume, state


def instance_ids_volume(state: HierarchyState, predictor: LevelPredictor) -> SparseVolume:
    """Decoded per-voxel instance ids at the finest level (-1 = none)."""
    _, _, inst_logits = state.level0_heads()
    channels = decode_instance_channels(inst_logits).values
    table = predictor.channel_instance_ids()
    if table is not None:
        table = np.asarray(table, dtype=np.int32)
        ids = table[channels] if len(channels) else np.zeros(0, np.int32)
    else:
        ids = np.where(channels == 0, -1, channels).astype(np.int32)
    return SparseVolume(inst_logits.spec, PayloadKind.CHANNEL, inst_logits.coords, ids,
                        _canonical=True)


class ConstantPredictor(LevelPredictor):
    """Fixed outputs everywhere; the saturation/empty test predictor."""

    def __init__(self, occupancy: float, num_categories: int, num_channels: int,
                 distance: float = 0.0, label: int = 0, channel: int = 0):
        self.occupancy = float(occupancy)
        self.num_categories = num_categories
        self.num_channels = num_channels
        self.distance = float(distance)
        self.label = label
        self.channel = channel

    def evaluate(self, level: int, sites: np.ndarray) -> LevelOutput:
        m = len(sites)
        sem = np.zeros((m, self.num_categories), dtype=np.float32)
        sem[:, self.label] = 1.0
        inst = np.zeros((m, self.num_channels), dtype=np.float32)
        inst[:, self.channel] = 1.0
        return LevelOutput(
            occupancy=np.full(m, self.occupancy),
            semantic_logits=sem,
            instance_logits=inst,
            distance=np.full(m, self.distance, dtype=np.float32) if level == 0 else None,
        )


class ReplayPredictor(LevelPredictor):
    """Replays stored per-level outputs from a directory; sites absent from
    the store read as unoccupied. Backing a replay with a ground-truth
    hierarchy makes the engine lossless end to end."""

    def __init__(self, occupancy_sets: dict[int, SparseVolume], sdf: SparseVolume,
                 semantic: SparseVolume, instances: SparseVolume,
                 channel_ids: np.ndarray):
        self.occupancy_sets = occupancy_sets
        self.sdf = sdf
        self.semantic = semantic
        self.instances = instances
        self._channel_ids = np.asarray(channel_ids, dtype=np.int32)

    def channel_instance_ids(self) -> np.ndarray:
        return self._channel_ids

    def evaluate(self, level: int, sites: np.ndarray) -> LevelOutput:
        if level not in self.occupancy_sets:
            raise InvalidArgumentError(f"replay store has no level {level}")
        m = len(sites)
        occ = self.occupancy_sets[level].contains(sites).astype(np.float64)
        sem = np.zeros((m, self.semantic.width), dtype=np.float32)
        inst = np.zeros((m, self.instances.width), dtype=np.float32)
        dist = None
        if level == 0:
            found, idx = self.sdf.lookup(sites)
            dist = np.zeros(m, dtype=np.float32)
            dist[found] = self.sdf.values[idx[found]]
            f2, i2 = self.semantic.lookup(sites)
            sem[f2] = self.semantic.values[i2[f2]]
            f3, i3 = self.instances.lookup(sites)
            inst[f3] = self.instances.values[i3[f3]]
        else:
            inst[:, 0] = 1.0
        return LevelOutput(occupancy=occ, semantic_logits=sem, instance_logits=inst,
                           distance=dist)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for level, vol in self.occupancy_sets.items():
            vol.save(directory / f"occupancy_l{level}.spvl")
        self.sdf.save(directory / "sdf.spvl")
        self.semantic.save(directory / "semantic.spvl")
        self.instances.save(directory / "instances.spvl")
        (directory / "channels.json").write_text(
            json.dumps({"instance_ids": self._channel_ids.tolist()}) + "\n")

    @classmethod
    def load(cls, directory) -> "ReplayPredictor":
        directory = Path(directory)
        occupancy_sets = {}
        for path in sorted(directory.glob("occupancy_l*.spvl")):
            level = int(path.stem.split("_l")[1])
            occupancy_sets[level] = load_volume(path)
        if not occupancy_sets:
            raise InvalidArgumentError(f"no occupancy levels found in {directory}")
        channel_ids = json.loads((directory / "channels.json").read_text())["instance_ids"]
        return cls(
            occupancy_sets=occupancy_sets,
            sdf=load_volume(directory / "sdf.spvl"),
            semantic=load_volume(directory / "semantic.spvl"),
            instances=load_volume(directory / "instances.spvl"),
            channel_ids=np.asarray(channel_ids, dtype=np.int32),
        )


def build_oracle_hierarchy(gt: PanopticVolume, num_categories: int,
                           num_levels: int = DEFAULT_NUM_LEVELS,
                           margin: float = 10.0) -> ReplayPredictor:
    """Replay predictor that reproduces ``gt`` exactly: per-level occupancy is
    the downsampled ground-truth support, and the finest-level heads replay
    the stored sdf with one-hot semantic and instance-channel logits. Channel
    k maps to the k-th smallest ground-truth instance id."""
    ids = np.unique(gt.instance[gt.instance >= 0])
    channel_ids = np.concatenate(([-1], ids)).astype(np.int32)
    id_to_channel = {int(v): c for c, v in enumerate(channel_ids) if c > 0}

    occupancy_sets = {0: SparseVolume(gt.spec, PayloadKind.OCCUPANCY, gt.coords, _canonical=True)}
    for level in range(1, num_levels):
        occupancy_sets[level] = downsample_occupancy(occupancy_sets[level - 1], 2)

    sem = np.zeros((len(gt), num_categories), dtype=np.float32)
    if len(gt):
        if int(gt.semantic.max(initial=0)) >= num_categories or int(gt.semantic.min(initial=0)) < 0:
            raise InvalidArgumentError("ground-truth semantic id outside the category table")
        sem[np.arange(len(gt)), gt.semantic] = margin
    inst = np.zeros((len(gt), len(channel_ids)), dtype=np.float32)
    channels = np.zeros(len(gt), dtype=np.int64)
    for gid, ch in id_to_channel.items():
        channels[gt.instance == gid] = ch
    if len(gt):
        inst[np.arange(len(gt)), channels] = margin

    return ReplayPredictor(
        occupancy_sets=occupancy_sets,
        sdf=gt.sdf_volume(),
        semantic=SparseVolume(gt.spec, PayloadKind.LOGITS, gt.coords, sem, _canonical=True),
        instances=SparseVolume(gt.spec, PayloadKind.LOGITS, gt.coords, inst, _canonical=True),
        channel_ids=channel_ids,
    )
