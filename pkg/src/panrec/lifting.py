"""Back-projection of depth, per-pixel features, and 2D instance mask logits
into frustum-aligned sparse volumes.

The distance volume is a truncated signed distance field measured along each
view ray: positive in front of the observed surface, zero at the surface,
negative behind it (the unseen side). Rays are sampled at half-voxel steps
inside the truncation band; multiple samples landing in one voxel keep the
value smallest in magnitude, and the pixel whose features/logits a voxel
receives is drawn by a counter-based generator keyed on (seed, voxel), so
results are reproducible regardless of traversal order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, DepthMap
from .errors import CapacityError, InvalidArgumentError
from .grid import GridSpec, PayloadKind, SparseVolume

DEFAULT_TAU = 3.0
DEFAULT_N_MAX = 20
# Logit threshold deciding "no instance mask association" (probability 0.5).
SIGMA_FG = 0.0


@dataclass(frozen=True)
class TruncationConfig:
    """Truncation distance in voxel units."""

    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if self.tau <= 0:
            raise InvalidArgumentError(f"tau must be positive, got {self.tau}")


@dataclass
class LiftedVolumes:
    """The three lifted volumes on one shared support: distance field,
    copied image features, and (N+1)-channel instance logits."""

    tsdf: SparseVolume
    features: SparseVolume | None = None
    instances: SparseVolume | None = None

    def __post_init__(self):
        for other in (self.features, self.instances):
            if other is None:
                continue
            if not other.spec.approx_equal(self.tsdf.spec):
                raise InvalidArgumentError("lifted volumes must share one grid")
            if not np.array_equal(other.coords, self.tsdf.coords):
                raise InvalidArgumentError("lifted volumes must share one support")


# --- keyed counter-based sampling -------------------------------------------

_SM_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_SM_M1 = np.uint64(0xBF58476D1CE4E5B9)
_SM_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + _SM_GAMMA).astype(np.uint64)
    x ^= x >> np.uint64(30)
    x *= _SM_M1
    x ^= x >> np.uint64(27)
    x *= _SM_M2
    x ^= x >> np.uint64(31)
    return x


def keyed_uniform(seed: int, coords: np.ndarray) -> np.ndarray:
    """Deterministic uniform in [0, 1) per voxel coordinate, independent of
    array order: splitmix64 over (seed, i, j, k)."""
    c = np.asarray(coords, dtype=np.int64).reshape(-1, 3).astype(np.uint64)
    with np.errstate(over="ignore"):
        h = _splitmix64(np.full(len(c), np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
        for axis in range(3):
            h = _splitmix64(h ^ c[:, axis])
    return h.astype(np.float64) / float(2**64)


# --- lifting core ------------------------------------------------------------

@dataclass
class _LiftSupport:
    cells: np.ndarray        # (M, 3) canonical
    tsdf: np.ndarray         # (M,) float32
    chosen_pixel: np.ndarray  # (M,) flat pixel index chosen per cell


def _lift_support(depth: DepthMap, intrinsics: CameraIntrinsics, spec: GridSpec,
                  tau: float, seed: int) -> _LiftSupport:
    if tau <= 0:
        raise InvalidArgumentError(f"tau must be positive, got {tau}")
    valid = depth.valid_mask
    vi, ui = np.nonzero(valid)
    empty = _LiftSupport(
        cells=np.zeros((0, 3), np.int32),
        tsdf=np.zeros(0, np.float32),
        chosen_pixel=np.zeros(0, np.int64),
    )
    if len(ui) == 0:
        return empty

    d = depth.values[vi, ui].astype(np.float64)
    xn = (ui - intrinsics.cx) / intrinsics.fx
    yn = (vi - intrinsics.cy) / intrinsics.fy
    norm = np.sqrt(xn * xn + yn * yn + 1.0)
    unit = np.stack([xn / norm, yn / norm, 1.0 / norm], axis=1)
    d_ray = d * norm  # along-ray distance of the surface sample
    pixel_id = (vi.astype(np.int64) * depth.width + ui).astype(np.int64)

    vs = spec.voxel_size
    # Half-voxel steps strictly inside the open band (-tau, tau) so no cell of
    # the band is skipped and no sample reaches the truncation boundary.
    k_max = int(np.ceil(2 * tau))
    ks = np.arange(-k_max, k_max + 1, dtype=np.float64)
    offsets = ks * (vs / 2.0)
    offsets = offsets[np.abs(offsets) < tau * vs]

    t = d_ray[:, None] + offsets[None, :]
    points = t[:, :, None] * unit[:, None, :]
    vox = np.floor((points - spec.origin_array()) / vs).astype(np.int64)
    values = np.broadcast_to(-offsets / vs, t.shape)
    pix = np.broadcast_to(pixel_id[:, None], t.shape)

    keep = (t > 0) & spec.contains_coords(vox)
    if not keep.any():
        return empty
    vox = vox[keep]
    values = np.clip(values[keep], -tau, tau)
    pix = pix[keep]

    lin = spec.linearize(vox)
    # Per-cell distance: the sample smallest in |value|; ties prefer the
    # positive side, then the lower pixel id, so reduction order cannot leak.
    order = np.lexsort((pix, -values, np.abs(values), lin))
    lin_s, vox_s, val_s = lin[order], vox[order], values[order]
    first = np.concatenate(([True], lin_s[1:] != lin_s[:-1]))
    cells = vox_s[first].astype(np.int32)
    tsdf = val_s[first].astype(np.float32)

    # Contributing pixels per cell (unique), then one keyed draw per cell.
    pair_order = np.lexsort((pix, lin))
    lin_p, pix_p = lin[pair_order], pix[pair_order]
    new_pair = np.concatenate(([True], (lin_p[1:] != lin_p[:-1]) | (pix_p[1:] != pix_p[:-1])))
    lin_u, pix_u = lin_p[new_pair], pix_p[new_pair]
    cell_start = np.concatenate(([True], lin_u[1:] != lin_u[:-1]))
    starts = np.flatnonzero(cell_start)
    counts = np.diff(np.concatenate((starts, [len(lin_u)])))
    u = keyed_uniform(seed, cells)
    pick = starts + np.minimum((u * counts).astype(np.int64), counts - 1)
    chosen = pix_u[pick]
    return _LiftSupport(cells=cells, tsdf=tsdf, chosen_pixel=chosen)


def backproject_depth_to_tsdf(depth: DepthMap, intrinsics: CameraIntrinsics,
                              spec: GridSpec, tau: float = DEFAULT_TAU) -> SparseVolume:
    """Lift a depth map to the sparse view-direction TSDF: cells within tau
    voxels (along the ray) of a depth sample hold (d_surface - d_cell) /
    voxel_size, clamped to [-tau, tau]. An all-invalid map lifts to an empty
    volume."""
    if not depth.matches(intrinsics):
        raise InvalidArgumentError("depth dimensions do not match intrinsics")
    support = _lift_support(depth, intrinsics, spec, tau, seed=0)
    return SparseVolume(spec, PayloadKind.DISTANCE, support.cells, support.tsdf, _canonical=True)


def lift_features(depth: DepthMap, intrinsics: CameraIntrinsics, spec: GridSpec,
                  tau: float, features: np.ndarray, seed: int = 0) -> SparseVolume:
    """Copy per-pixel feature vectors along each ray within the truncation;
    a cell fed by several pixels takes the vector of its keyed draw. The
    feature raster must already be at full image resolution."""
    features = np.asarray(features)
    if features.ndim == 2:
        features = features[:, :, None]
    if features.shape[:2] != (depth.height, depth.width):
        raise InvalidArgumentError(
            f"feature raster {features.shape[:2]} does not match depth {(depth.height, depth.width)}")
    support = _lift_support(depth, intrinsics, spec, tau, seed)
    flat = features.reshape(-1, features.shape[2]).astype(np.float32)
    return SparseVolume(spec, PayloadKind.FEATURES, support.cells,
                        flat[support.chosen_pixel], _canonical=True)


def lift_instance_logits(depth: DepthMap, intrinsics: CameraIntrinsics, spec: GridSpec,
                         tau: float, masks: np.ndarray, n_max: int = DEFAULT_N_MAX,
                         seed: int = 0, sigma_fg: float = SIGMA_FG) -> SparseVolume:
    """Lift N per-pixel mask-logit rasters into an (N+1)-channel volume.
    Channels 1..N carry the chosen pixel's detection logits; a pixel whose
    logits all fall below sigma_fg has no association and stores a one-hot
    on channel 0."""
    masks = np.asarray(masks, dtype=np.float32)
    if masks.ndim == 2:
        masks = masks[None]
    if masks.ndim != 3:
        masks = masks.reshape(0, depth.height, depth.width) if masks.size == 0 else masks
    n = masks.shape[0]
    if n > n_max:
        raise CapacityError(f"{n} detections exceed the channel capacity {n_max}")
    if n and masks.shape[1:] != (depth.height, depth.width):
        raise InvalidArgumentError("mask rasters do not match depth dimensions")
    support = _lift_support(depth, intrinsics, spec, tau, seed)
    m = len(support.cells)
    out = np.zeros((m, n + 1), dtype=np.float32)
    if n == 0:
        out[:, 0] = 1.0
    else:
        flat = masks.reshape(n, -1).T  # (H*W, N)
        logits = flat[support.chosen_pixel]
        associated = (logits >= sigma_fg).any(axis=1)
        out[associated, 1:] = logits[associated]
        out[~associated, 0] = 1.0
    return SparseVolume(spec, PayloadKind.LOGITS, support.cells, out, _canonical=True)


def lift_all(depth: DepthMap, intrinsics: CameraIntrinsics, spec: GridSpec,
             tau: float = DEFAULT_TAU, features: np.ndarray | None = None,
             masks: np.ndarray | None = None, n_max: int = DEFAULT_N_MAX,
             seed: int = 0) -> LiftedVolumes:
    """Compute the full lifted triple on one shared support."""
    tsdf = backproject_depth_to_tsdf(depth, intrinsics, spec, tau)
    feats = None
    if features is not None:
        feats = lift_features(depth, intrinsics, spec, tau, features, seed=seed)
    inst = None
    if masks is not None:
        inst = lift_instance_logits(depth, intrinsics, spec, tau, masks, n_max=n_max, seed=seed)
    return LiftedVolumes(tsdf=tsdf, features=feats, instances=inst)
