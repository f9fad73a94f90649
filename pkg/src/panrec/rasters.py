"""Binary raster formats for depth maps and multi-channel feature / mask-logit
images, plus run-length-encoded 2D instance masks with a JSON manifest.

Raster container (little endian): 16-byte header of magic, width u32,
height u32, channels u32, followed by row-major data. "DPTH" holds float32
(depth maps are channels=1, invalid marked by values <= 0); "DP16" is the
PNG-free fallback holding uint16 millimeters with 0 as the invalid marker.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .camera import DepthMap
from .errors import FileFormatError, InvalidArgumentError

_HEADER = struct.Struct("<4sIII")
_MAGIC_F32 = b"DPTH"
_MAGIC_MM16 = b"DP16"
_MAGIC_RLE = b"MRLE"


def save_raster(values: np.ndarray, path) -> None:
    """Write an (H, W) or (H, W, C) float32 raster."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise InvalidArgumentError("raster must be (H, W) or (H, W, C)")
    h, w, c = arr.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC_F32, w, h, c))
        f.write(arr.tobytes())


def load_raster(path) -> np.ndarray:
    """Read a float32 raster as (H, W, C)."""
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise FileFormatError(f"{path}: truncated raster header")
        magic, w, h, c = _HEADER.unpack(head)
        if magic != _MAGIC_F32:
            raise FileFormatError(f"{path}: bad raster magic {magic!r}")
        buf = f.read(4 * w * h * c)
    if len(buf) != 4 * w * h * c:
        raise FileFormatError(f"{path}: truncated raster data")
    return np.frombuffer(buf, dtype="<f4").reshape(h, w, c).copy()


def save_depth(depth: DepthMap, path) -> None:
    save_raster(depth.values, path)


def load_depth(path) -> DepthMap:
    arr = load_raster(path)
    if arr.shape[2] != 1:
        raise FileFormatError(f"{path}: depth raster must have 1 channel, got {arr.shape[2]}")
    return DepthMap(values=arr[:, :, 0])


def save_depth_mm(depth: DepthMap, path) -> None:
    """16-bit millimeter fallback; depths above 65.535 m saturate."""
    mm = np.zeros(depth.values.shape, dtype="<u2")
    valid = depth.valid_mask
    mm[valid] = np.clip(np.round(depth.values[valid] * 1000.0), 1, 65535).astype("<u2")
    h, w = mm.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC_MM16, w, h, 1))
        f.write(mm.tobytes())


def load_depth_mm(path) -> DepthMap:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise FileFormatError(f"{path}: truncated raster header")
        magic, w, h, c = _HEADER.unpack(head)
        if magic != _MAGIC_MM16 or c != 1:
            raise FileFormatError(f"{path}: not a 16-bit depth raster")
        buf = f.read(2 * w * h)
    if len(buf) != 2 * w * h:
        raise FileFormatError(f"{path}: truncated raster data")
    mm = np.frombuffer(buf, dtype="<u2").reshape(h, w)
    return DepthMap(values=mm.astype(np.float32) / 1000.0)


# --- 2D instance masks ------------------------------------------------------

def _rle_encode(mask: np.ndarray) -> np.ndarray:
    """Row-major run lengths, alternating runs starting with zeros."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    if flat.size == 0:
        return np.zeros(0, dtype=np.uint32)
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate(([0], edges, [flat.size]))
    runs = np.diff(bounds)
    if flat[0]:
        runs = np.concatenate(([0], runs))
    return runs.astype(np.uint32)


def _rle_decode(runs: np.ndarray, height: int, width: int) -> np.ndarray:
    total = int(np.sum(runs, dtype=np.int64))
    if total != height * width:
        raise FileFormatError("RLE runs do not cover the image")
    flat = np.zeros(height * width, dtype=bool)
    pos = 0
    value = False
    for run in runs:
        if value:
            flat[pos:pos + int(run)] = True
        pos += int(run)
        value = not value
    return flat.reshape(height, width)


def save_mask_rle(mask: np.ndarray, path) -> None:
    runs = _rle_encode(mask)
    h, w = mask.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC_RLE, w, h, len(runs)))
        f.write(runs.astype("<u4").tobytes())


def load_mask_rle(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise FileFormatError(f"{path}: truncated RLE header")
        magic, w, h, n = _HEADER.unpack(head)
        if magic != _MAGIC_RLE:
            raise FileFormatError(f"{path}: bad RLE magic {magic!r}")
        buf = f.read(4 * n)
    if len(buf) != 4 * n:
        raise FileFormatError(f"{path}: truncated RLE data")
    return _rle_decode(np.frombuffer(buf, dtype="<u4"), h, w)


def save_mask_set(mask_set, manifest_path) -> None:
    """Write masks as sibling .rle files plus a JSON manifest holding each
    mask's (category, score, instance id)."""
    manifest_path = Path(manifest_path)
    stem = manifest_path.stem
    entries = []
    for idx in range(len(mask_set.categories)):
        rle_name = f"{stem}_{idx:03d}.rle"
        save_mask_rle(mask_set.masks[idx], manifest_path.parent / rle_name)
        entries.append({
            "category": int(mask_set.categories[idx]),
            "score": float(mask_set.scores[idx]),
            "instance_id": int(mask_set.instance_ids[idx]),
            "rle": rle_name,
        })
    manifest = {
        "width": int(mask_set.width),
        "height": int(mask_set.height),
        "masks": entries,
    }
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")


def load_mask_set(manifest_path):
    from .instances import MaskSet2D  # local import to avoid a cycle

    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
        width, height = int(manifest["width"]), int(manifest["height"])
        entries = manifest["masks"]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FileFormatError(f"{manifest_path}: bad mask manifest: {exc}") from exc
    masks = np.zeros((len(entries), height, width), dtype=bool)
    categories = np.zeros(len(entries), dtype=np.int32)
    scores = np.zeros(len(entries), dtype=np.float64)
    instance_ids = np.zeros(len(entries), dtype=np.int32)
    for i, entry in enumerate(entries):
        mask = load_mask_rle(manifest_path.parent / entry["rle"])
        if mask.shape != (height, width):
            raise FileFormatError(f"{manifest_path}: mask {i} has wrong shape")
        masks[i] = mask
        categories[i] = entry["category"]
        scores[i] = entry["score"]
        instance_ids[i] = entry.get("instance_id", -1)
    return MaskSet2D(masks=masks, categories=categories, scores=scores, instance_ids=instance_ids)
