"""2D-to-3D instance propagation: matching predicted masks to ground-truth
masks, assigning channel ids, building 3D channel targets, and decoding
(N+1)-channel logit volumes back to per-voxel instance ids.

Matched (prediction, ground truth) pairs require pixel IoU > 0.5; matching is
greedy in descending IoU with (pred index, gt index) breaking exact ties, so
the assignment is deterministic. Matched pairs receive channels in match
order, unmatched predictions receive fresh channels, unmatched ground-truth
instances receive none. Channel 0 is reserved for "no association".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FileFormatError, InvalidArgumentError
from .grid import PanopticVolume, PayloadKind, SparseVolume

NO_ASSOCIATION = 0


@dataclass
class MaskSet2D:
    """Binary masks over one image grid with per-mask (category, score) and,
    for ground-truth sets, the instance id each mask belongs to (-1 when
    unknown, e.g. for predictions)."""

    masks: np.ndarray        # (N, H, W) bool
    categories: np.ndarray   # (N,)
    scores: np.ndarray       # (N,)
    instance_ids: np.ndarray | None = None

    def __post_init__(self):
        self.masks = np.ascontiguousarray(self.masks, dtype=bool)
        if self.masks.ndim != 3:
            raise InvalidArgumentError("masks must be (N, H, W)")
        n = self.masks.shape[0]
        self.categories = np.ascontiguousarray(self.categories, dtype=np.int32).reshape(-1)
        self.scores = np.ascontiguousarray(self.scores, dtype=np.float64).reshape(-1)
        if self.instance_ids is None:
            self.instance_ids = np.full(n, -1, dtype=np.int32)
        else:
            self.instance_ids = np.ascontiguousarray(self.instance_ids, dtype=np.int32).reshape(-1)
        if not (len(self.categories) == len(self.scores) == len(self.instance_ids) == n):
            raise InvalidArgumentError("per-mask metadata must match the mask count")
        if n and not self.masks.reshape(n, -1).any(axis=1).all():
            raise InvalidArgumentError("every mask must be non-empty")

    def __len__(self) -> int:
        return self.masks.shape[0]

    @property
    def height(self) -> int:
        return self.masks.shape[1]

    @property
    def width(self) -> int:
        return self.masks.shape[2]


def mask_iou_matrix(pred: MaskSet2D, gt: MaskSet2D) -> np.ndarray:
    """Pixel IoU for every (pred, gt) pair, shape (P, G)."""
    if (pred.height, pred.width) != (gt.height, gt.width):
        raise InvalidArgumentError("mask sets live on different image grids")
    p = pred.masks.reshape(len(pred), -1).astype(np.int64)
    g = gt.masks.reshape(len(gt), -1).astype(np.int64)
    inter = p @ g.T
    union = p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] - inter
    with np.errstate(invalid="ignore"):
        return np.where(union > 0, inter / union, 0.0)


@dataclass
class ChannelAssignment:
    """Injective channel assignment produced by 2D matching.

    ``pred_to_channel`` covers every prediction; ``gt_to_channel`` covers only
    matched ground-truth instances (keyed by instance id)."""

    pred_to_channel: dict[int, int]
    gt_to_channel: dict[int, int]
    matched_pairs: list[tuple[int, int, float]] = field(default_factory=list)
    num_channels: int = 0

    def __post_init__(self):
        channels = list(self.pred_to_channel.values())
        if len(set(channels)) != len(channels):
            raise InvalidArgumentError("channel assignment must be injective")
        if any(ch < 1 for ch in channels):
            raise InvalidArgumentError("channel 0 is reserved for no-association")

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({
            "pred_to_channel": {str(k): v for k, v in self.pred_to_channel.items()},
            "gt_to_channel": {str(k): v for k, v in self.gt_to_channel.items()},
            "matched_pairs": [[p, g, iou] for p, g, iou in self.matched_pairs],
            "num_channels": self.num_channels,
        }, indent=2) + "\n")

    @classmethod
    def from_json(cls, path) -> "ChannelAssignment":
        try:
            raw = json.loads(Path(path).read_text())
            return cls(
                pred_to_channel={int(k): int(v) for k, v in raw["pred_to_channel"].items()},
                gt_to_channel={int(k): int(v) for k, v in raw["gt_to_channel"].items()},
                matched_pairs=[(int(p), int(g), float(i)) for p, g, i in raw.get("matched_pairs", [])],
                num_channels=int(raw["num_channels"]),
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise FileFormatError(f"bad channel assignment file {path}: {exc}") from exc


def match_masks_2d(pred: MaskSet2D, gt: MaskSet2D) -> ChannelAssignment:
    """Greedy descending-IoU matching at IoU > 0.5 with one-to-one pairs."""
    iou = mask_iou_matrix(pred, gt)
    if gt.instance_ids is None or (len(gt) and (gt.instance_ids < 0).any()):
        raise InvalidArgumentError("ground-truth mask set needs instance ids")

    flat = [(-iou[p, g], p, g) for p in range(len(pred)) for g in range(len(gt)) if iou[p, g] > 0.5]
    flat.sort()
    pred_matched = np.zeros(len(pred), dtype=bool)
    gt_matched = np.zeros(len(gt), dtype=bool)
    pred_to_channel: dict[int, int] = {}
    gt_to_channel: dict[int, int] = {}
    pairs: list[tuple[int, int, float]] = []
    next_channel = 1
    for neg, p, g in flat:
        if pred_matched[p] or gt_matched[g]:
            continue
        pred_matched[p] = True
        gt_matched[g] = True
        pred_to_channel[p] = next_channel
        gt_to_channel[int(gt.instance_ids[g])] = next_channel
        pairs.append((p, g, -neg))
        next_channel += 1
    for p in range(len(pred)):
        if not pred_matched[p]:
            pred_to_channel[p] = next_channel
            next_channel += 1
    return ChannelAssignment(
        pred_to_channel=pred_to_channel,
        gt_to_channel=gt_to_channel,
        matched_pairs=pairs,
        num_channels=next_channel - 1,
    )


def build_3d_instance_targets(gt_vol: PanopticVolume, assign: ChannelAssignment) -> SparseVolume:
    """Per-voxel channel targets: matched instances get their channel, stuff
    voxels and unmatched instances get channel 0."""
    present = set(int(i) for i in np.unique(gt_vol.instance) if i >= 0)
    unknown = set(assign.gt_to_channel) - present
    if unknown:
        raise InvalidArgumentError(f"assignment references unknown GT instance ids {sorted(unknown)}")
    targets = np.zeros(len(gt_vol), dtype=np.int32)
    for gt_id, channel in assign.gt_to_channel.items():
        targets[gt_vol.instance == gt_id] = channel
    return SparseVolume(gt_vol.spec, PayloadKind.CHANNEL, gt_vol.coords, targets, _canonical=True)


def decode_instance_channels(volume: SparseVolume) -> SparseVolume:
    """Argmax over channels per voxel; channel 0 decodes to "no instance" and
    exact ties break to the lowest channel index."""
    if volume.kind != PayloadKind.LOGITS:
        raise InvalidArgumentError("expected an (N+1)-channel logit volume")
    if volume.is_empty:
        decoded = np.zeros(0, dtype=np.int32)
    else:
        decoded = np.argmax(volume.values, axis=1).astype(np.int32)
    return SparseVolume(volume.spec, PayloadKind.CHANNEL, volume.coords, decoded, _canonical=True)


def one_hot_channel_logits(targets: SparseVolume, num_channels: int,
                           margin: float = 10.0) -> SparseVolume:
    """Channel targets to one-hot logits (margin on the target channel);
    the inverse fixture of decode_instance_channels for oracles and tests."""
    if targets.kind != PayloadKind.CHANNEL:
        raise InvalidArgumentError("expected a channel-id volume")
    if len(targets) and int(targets.values.max()) >= num_channels:
        raise InvalidArgumentError("channel target exceeds the channel count")
    logits = np.zeros((len(targets), num_channels), dtype=np.float32)
    if len(targets):
        logits[np.arange(len(targets)), targets.values] = margin
    return SparseVolume(targets.spec, PayloadKind.LOGITS, targets.coords, logits, _canonical=True)
