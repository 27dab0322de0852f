"""Keypoint detection, index-map transfer, and coordinate rescaling.

Keypoints are detected once on the original slice and carried through
augmentations by writing their indices into an integer image (the index
map) that is warped together with the slice.  Decoding the warped map
recovers the surviving keypoints at their new positions.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import cv2
import numpy as np

log = logging.getLogger(__name__)

DESCRIPTOR_DIM = 128

CACHE_MAGIC = b"KPC1"


@dataclass
class SiftConfig:
    """Standard SIFT parameters (OpenCV naming)."""

    octave_layers: int = 3
    contrast_threshold: float = 0.04
    edge_threshold: float = 10.0
    sigma: float = 1.6


@dataclass
class DetectorConfig:
    """Selects a registered detector; `kind` must be a registry key."""

    kind: str = "sift"
    sift: SiftConfig = field(default_factory=SiftConfig)


@dataclass(frozen=True)
class Keypoint:
    position: tuple[float, float]  # (row, col), image pixel units
    descriptor: np.ndarray  # (DESCRIPTOR_DIM,)
    index: int  # unique within a slice, >= 1
    synthetic: bool = False  # grid backfill; excluded from match ground truth


class KeypointSet:
    """Ordered keypoints of one slice, stored as parallel arrays.

    The list order follows ascending index (detection assigns indices by
    response rank, so index order == strength order for fresh detections).
    """

    def __init__(
        self,
        positions: np.ndarray,
        descriptors: np.ndarray,
        indices: np.ndarray,
        synthetic: np.ndarray,
        source_dims: tuple[int, int],
    ):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        self.descriptors = np.asarray(descriptors, dtype=np.float64).reshape(
            -1, DESCRIPTOR_DIM
        )
        self.indices = np.asarray(indices, dtype=np.int64).reshape(-1)
        self.synthetic = np.asarray(synthetic, dtype=bool).reshape(-1)
        self.source_dims = (int(source_dims[0]), int(source_dims[1]))
        n = len(self.indices)
        if not (len(self.positions) == len(self.descriptors) == len(self.synthetic) == n):
            raise ValueError("keypoint arrays have inconsistent lengths")
        if n and len(np.unique(self.indices)) != n:
            raise ValueError("keypoint indices must be distinct within a slice")
        if n and self.indices.min() < 1:
            raise ValueError("keypoint indices start at 1")

    @classmethod
    def empty(cls, source_dims: tuple[int, int]) -> "KeypointSet":
        return cls(
            np.zeros((0, 2)),
            np.zeros((0, DESCRIPTOR_DIM)),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=bool),
            source_dims,
        )

    def __len__(self) -> int:
        return len(self.indices)

    def __iter__(self) -> Iterator[Keypoint]:
        for i in range(len(self)):
            yield Keypoint(
                position=(float(self.positions[i, 0]), float(self.positions[i, 1])),
                descriptor=self.descriptors[i],
                index=int(self.indices[i]),
                synthetic=bool(self.synthetic[i]),
            )

    def real_mask(self) -> np.ndarray:
        return ~self.synthetic

    def take(self, rows: np.ndarray) -> "KeypointSet":
        return KeypointSet(
            self.positions[rows],
            self.descriptors[rows],
            self.indices[rows],
            self.synthetic[rows],
            self.source_dims,
        )


def round_half_up(values: np.ndarray) -> np.ndarray:
    """Half-away-from-zero rounding for nonnegative coordinates."""
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5).astype(np.int64)


def cells_of(positions: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    """Rounded grid cells of positions, clamped into `dims`."""
    cells = round_half_up(positions)
    hi = np.asarray(dims, dtype=np.int64) - 1
    return np.clip(cells, 0, hi)


# --- detection ------------------------------------------------------------

_DETECTORS: dict[str, Callable] = {}


def register_detector(name: str, fn: Callable) -> None:
    """Register an alternative detector.

    `fn(image, config) -> (positions (N,2) row/col, descriptors (N,128),
    responses (N,))`.  Lets learned detectors plug in without touching the
    rest of the pipeline.
    """
    _DETECTORS[name] = fn


def _sift_detect(image: np.ndarray, config: DetectorConfig):
    sift = cv2.SIFT_create(
        nOctaveLayers=config.sift.octave_layers,
        contrastThreshold=config.sift.contrast_threshold,
        edgeThreshold=config.sift.edge_threshold,
        sigma=config.sift.sigma,
    )
    img8 = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    img8 = np.round(img8 * 255.0).astype(np.uint8)
    kps, desc = sift.detectAndCompute(img8, None)
    if not kps:
        return (
            np.zeros((0, 2)),
            np.zeros((0, DESCRIPTOR_DIM)),
            np.zeros(0),
        )
    positions = np.array([(kp.pt[1], kp.pt[0]) for kp in kps], dtype=np.float64)
    responses = np.array([kp.response for kp in kps], dtype=np.float64)
    return positions, np.asarray(desc, dtype=np.float64), responses


register_detector("sift", _sift_detect)


def detect(image: np.ndarray, config: DetectorConfig | None = None) -> KeypointSet:
    """Detect keypoints, sorted by response descending, indices 1..N."""
    config = config or DetectorConfig()
    if config.kind not in _DETECTORS:
        raise ValueError(f"unknown detector kind: {config.kind!r}")
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"expected a 2D image, got shape {image.shape}")
    positions, descriptors, responses = _DETECTORS[config.kind](image, config)
    n = len(responses)
    if n == 0:
        return KeypointSet.empty(image.shape)
    # response descending; position then input order break exact ties
    order = np.lexsort(
        (np.arange(n), positions[:, 1], positions[:, 0], -responses)
    )
    return KeypointSet(
        positions[order],
        descriptors[order],
        np.arange(1, n + 1),
        np.zeros(n, dtype=bool),
        image.shape,
    )


def cap_or_backfill(
    kset: KeypointSet,
    n_max: int,
    n_min: int,
    image_dims: tuple[int, int],
    seed: int,
) -> KeypointSet:
    """Clamp the keypoint count into [n_min, n_max].

    Overfull sets keep the n_max strongest (lowest indices).  Underfull
    sets are padded with synthetic grid points carrying zero descriptors;
    those never enter match ground truth.
    """
    if n_min > n_max:
        raise ValueError(f"n_min ({n_min}) must be <= n_max ({n_max})")
    if len(kset) > n_max:
        order = np.argsort(kset.indices)[:n_max]
        return kset.take(np.sort(order))
    if len(kset) >= n_min:
        return kset
    need = n_min - len(kset)
    h, w = image_dims
    g = int(np.ceil(np.sqrt(need)))
    rows, cols = np.meshgrid(np.arange(g), np.arange(g), indexing="ij")
    centers = np.stack(
        [(rows.ravel() + 0.5) * h / g, (cols.ravel() + 0.5) * w / g], axis=1
    )
    rng = np.random.default_rng(seed)
    chosen = centers[rng.permutation(len(centers))[:need]]
    next_index = int(kset.indices.max()) + 1 if len(kset) else 1
    fill = KeypointSet(
        chosen,
        np.zeros((need, DESCRIPTOR_DIM)),
        np.arange(next_index, next_index + need),
        np.ones(need, dtype=bool),
        image_dims,
    )
    return KeypointSet(
        np.concatenate([kset.positions, fill.positions]),
        np.concatenate([kset.descriptors, fill.descriptors]),
        np.concatenate([kset.indices, fill.indices]),
        np.concatenate([kset.synthetic, fill.synthetic]),
        image_dims,
    )


# --- index maps -----------------------------------------------------------


def encode_index_map(kset: KeypointSet, dims: tuple[int, int]) -> np.ndarray:
    """Write each keypoint's index at its rounded cell; 0 is background.

    Cell collisions keep the smaller index; the other keypoint is dropped.
    """
    grid = np.zeros(dims, dtype=np.int32)
    cells = cells_of(kset.positions, dims)
    order = np.argsort(kset.indices)
    for i in order:
        r, c = cells[i]
        if grid[r, c] == 0:
            grid[r, c] = kset.indices[i]
        else:
            log.debug(
                "index-map collision at (%d, %d): keeping %d, dropping %d",
                r, c, grid[r, c], kset.indices[i],
            )
    return grid


def decode_index_map(index_map: np.ndarray, original: KeypointSet) -> KeypointSet:
    """Recover keypoints from a (possibly warped) index map.

    Each surviving index's new position is the mean of all cells holding
    it; absent indices are dropped.  Descriptors, indices, and synthetic
    flags carry over from the original set.
    """
    index_map = np.asarray(index_map)
    rr, cc = np.nonzero(index_map)
    values = index_map[rr, cc]
    known = set(int(v) for v in np.unique(values))
    extra = known - set(int(i) for i in original.indices)
    if extra:
        raise ValueError(f"index map holds unknown indices: {sorted(extra)}")
    sums: dict[int, np.ndarray] = {}
    counts: dict[int, int] = {}
    for r, c, v in zip(rr, cc, values):
        v = int(v)
        if v in sums:
            sums[v] += (r, c)
            counts[v] += 1
        else:
            sums[v] = np.array([r, c], dtype=np.float64)
            counts[v] = 1
    keep = np.array([int(i) in sums for i in original.indices], dtype=bool)
    rows = np.flatnonzero(keep)
    out = original.take(rows)
    new_positions = np.array(
        [sums[int(i)] / counts[int(i)] for i in out.indices], dtype=np.float64
    ).reshape(-1, 2)
    return KeypointSet(
        new_positions, out.descriptors, out.indices, out.synthetic, index_map.shape
    )


def rescale(
    kset: KeypointSet, from_dims: tuple[int, int], to_dims: tuple[int, int]
) -> KeypointSet:
    """Scale positions by the per-axis resolution ratio, clamped to range."""
    if to_dims[0] < 1 or to_dims[1] < 1:
        raise ValueError(f"target dims must be >= 1, got {to_dims}")
    ratio = np.array(
        [to_dims[0] / from_dims[0], to_dims[1] / from_dims[1]], dtype=np.float64
    )
    hi = np.nextafter(np.asarray(to_dims, dtype=np.float64), 0.0)
    positions = np.clip(kset.positions * ratio, 0.0, hi)
    return KeypointSet(
        positions, kset.descriptors, kset.indices, kset.synthetic, to_dims
    )


# --- per-slice binary cache -------------------------------------------------


def save_cache(path: Path | str, kset: KeypointSet) -> None:
    """Write a slice's detections: N, positions f32, descriptors f32, indices i32."""
    if kset.synthetic.any():
        raise ValueError("caches hold raw detections only, not backfill points")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<IHH", len(kset), *kset.source_dims))
        fh.write(kset.positions.astype("<f4").tobytes())
        fh.write(kset.descriptors.astype("<f4").tobytes())
        fh.write(kset.indices.astype("<i4").tobytes())


def load_cache(path: Path | str) -> KeypointSet:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CACHE_MAGIC:
            raise ValueError(f"{path}: not a keypoint cache file")
        n, h, w = struct.unpack("<IHH", fh.read(8))
        positions = np.frombuffer(fh.read(n * 2 * 4), dtype="<f4").reshape(n, 2)
        descriptors = np.frombuffer(
            fh.read(n * DESCRIPTOR_DIM * 4), dtype="<f4"
        ).reshape(n, DESCRIPTOR_DIM)
        indices = np.frombuffer(fh.read(n * 4), dtype="<i4")
    return KeypointSet(
        positions.astype(np.float64),
        descriptors.astype(np.float64),
        indices.astype(np.int64),
        np.zeros(n, dtype=bool),
        (h, w),
    )


def cache_path(cache_dir: Path | str, volume_id: str, slice_index: int) -> Path:
    return Path(cache_dir) / volume_id / f"{slice_index:04d}.kpc"
