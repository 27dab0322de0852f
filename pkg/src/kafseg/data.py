"""Volumetric slice datasets: synthetic generation, ingestion, splits, sampling.

Volumes live on disk as `<root>/<volume_id>/image.raw` (C-order binary)
plus a `meta.json` sidecar recording dtype and (D, H, W) shape, with an
optional `label.raw`.  A `manifest.json` at the root enumerates volumes
and cross-validation folds.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


@dataclass
class SliceRecord:
    """One axial slice with its provenance inside the volume."""

    image: np.ndarray  # (H, W) float in [0, 1]
    label: np.ndarray | None  # (H, W) integer class ids, 0 = background
    volume_id: str
    slice_index: int
    normalized_position: float

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 2:
            raise ValueError(f"slice image must be 2D, got shape {self.image.shape}")
        if self.label is not None:
            self.label = np.asarray(self.label)
            if self.label.shape != self.image.shape:
                raise ValueError(
                    f"label shape {self.label.shape} != image shape {self.image.shape}"
                )
        if not 0.0 <= self.normalized_position <= 1.0:
            raise ValueError(
                f"normalized_position {self.normalized_position} outside [0, 1]"
            )
        if self.slice_index < 0:
            raise ValueError("slice_index must be >= 0")


@dataclass
class VolumeInfo:
    volume_id: str
    num_slices: int
    modality: str = "synthetic"


@dataclass
class DatasetManifest:
    root: Path
    volumes: list[VolumeInfo]
    folds: list[list[str]]

    def __post_init__(self):
        self.root = Path(self.root)
        ids = [v.volume_id for v in self.volumes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate volume ids in manifest")
        seen: set[str] = set()
        for fold in self.folds:
            overlap = seen.intersection(fold)
            if overlap:
                raise ValueError(f"volumes in multiple folds: {sorted(overlap)}")
            unknown = set(fold) - set(ids)
            if unknown:
                raise ValueError(f"fold references unknown volumes: {sorted(unknown)}")
            seen.update(fold)

    def volume_ids(self) -> list[str]:
        return [v.volume_id for v in self.volumes]

    def save(self, path: Path | str | None = None) -> Path:
        path = Path(path) if path else self.root / MANIFEST_NAME
        payload = {
            "volumes": [
                {"volume_id": v.volume_id, "num_slices": v.num_slices,
                 "modality": v.modality}
                for v in self.volumes
            ],
            "folds": self.folds,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=True))
        return path

    @classmethod
    def load(cls, root: Path | str) -> "DatasetManifest":
        root = Path(root)
        path = root if root.name == MANIFEST_NAME else root / MANIFEST_NAME
        payload = json.loads(path.read_text())
        return cls(
            root=path.parent,
            volumes=[VolumeInfo(**v) for v in payload["volumes"]],
            folds=[list(f) for f in payload["folds"]],
        )


@dataclass
class SyntheticConfig:
    num_volumes: int = 12
    slices_per_volume: int = 8
    height: int = 64
    width: int = 64
    num_classes: int = 3
    structure_drift: float = 1.5
    noise_std: float = 0.03

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.height < 32 or self.width < 32:
            raise ValueError(
                f"volume dims {self.height}x{self.width} too small; "
                "need >= 32 for four downsampling stages"
            )


# --- volume files -----------------------------------------------------------


def write_volume(
    out_dir: Path | str,
    image: np.ndarray,
    label: np.ndarray | None,
    modality: str = "synthetic",
) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image = np.ascontiguousarray(image, dtype=np.float32)
    meta = {
        "dtype": "float32",
        "shape": list(image.shape),
        "modality": modality,
    }
    image.tofile(out_dir / "image.raw")
    if label is not None:
        label = np.ascontiguousarray(label, dtype=np.uint8)
        meta["label_dtype"] = "uint8"
        label.tofile(out_dir / "label.raw")
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_volume(vol_dir: Path | str) -> tuple[np.ndarray, np.ndarray | None, dict]:
    vol_dir = Path(vol_dir)
    meta = json.loads((vol_dir / "meta.json").read_text())
    shape = tuple(meta["shape"])
    image = np.fromfile(vol_dir / "image.raw", dtype=meta["dtype"]).reshape(shape)
    label = None
    label_path = vol_dir / "label.raw"
    if label_path.exists():
        label = np.fromfile(label_path, dtype=meta.get("label_dtype", "uint8"))
        label = label.reshape(-1, *shape[1:]) if label.size else label
    return image, label, meta


def ingest_volume(
    path: Path | str, manifest: DatasetManifest | None = None
) -> list[SliceRecord]:
    """Load one volume directory as per-slice records.

    Intensities are min-max normalized per volume; normalized_position is
    slice_index / (num_slices - 1), or 0 for single-slice volumes.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"volume directory not found: {path}")
    image, label, meta = read_volume(path)
    if image.ndim != 3 or image.shape[0] == 0 or image[0].size == 0:
        raise ValueError(f"{path}: expected a nonempty 3D volume, got shape {image.shape}")
    if label is not None and label.shape != image.shape:
        raise ValueError(
            f"{path}: label shape {label.shape} does not match image shape {image.shape}"
        )
    volume_id = path.name
    if manifest is not None:
        declared = {v.volume_id: v.num_slices for v in manifest.volumes}
        if volume_id in declared and declared[volume_id] != image.shape[0]:
            raise ValueError(
                f"{volume_id}: manifest declares {declared[volume_id]} slices, "
                f"file holds {image.shape[0]}"
            )
    image = image.astype(np.float64)
    lo, hi = image.min(), image.max()
    if hi > lo:
        image = (image - lo) / (hi - lo)
    else:
        image = np.zeros_like(image)
    d = image.shape[0]
    records = []
    for s in range(d):
        records.append(
            SliceRecord(
                image=image[s],
                label=None if label is None else label[s].astype(np.int64),
                volume_id=volume_id,
                slice_index=s,
                normalized_position=(s / (d - 1)) if d > 1 else 0.0,
            )
        )
    return records


def load_slices(
    manifest: DatasetManifest, volume_ids: list[str] | None = None
) -> list[SliceRecord]:
    ids = volume_ids if volume_ids is not None else manifest.volume_ids()
    records: list[SliceRecord] = []
    for vid in ids:
        records.extend(ingest_volume(manifest.root / vid, manifest))
    return records


# --- synthetic generator ----------------------------------------------------


def _smooth_noise(rng: np.random.Generator, dims, sigma: float) -> np.ndarray:
    from scipy import ndimage

    field_ = rng.standard_normal(dims)
    field_ = ndimage.gaussian_filter(field_, sigma)
    span = field_.max() - field_.min()
    return (field_ - field_.min()) / span if span > 0 else field_


def generate_synthetic(
    config: SyntheticConfig,
    out_root: Path | str,
    seed: int,
    num_folds: int = 5,
) -> DatasetManifest:
    """Write a desk-scale dataset of drifting textured structures.

    Each volume embeds num_classes - 1 ellipses whose integer-quantized
    centers drift by at most `structure_drift` pixels per axis per slice;
    label grids mark ellipse interiors.  Byte-identical given the seed.
    """
    out_root = Path(out_root)
    rng = np.random.default_rng(seed)
    h, w, d = config.height, config.width, config.slices_per_volume
    n_struct = config.num_classes - 1
    drift = int(np.floor(config.structure_drift))
    volumes: list[VolumeInfo] = []
    for v in range(config.num_volumes):
        vid = f"vol{v:03d}"
        image = np.zeros((d, h, w), dtype=np.float64)
        label = np.zeros((d, h, w), dtype=np.uint8)
        background = 0.10 + 0.08 * _smooth_noise(rng, (h, w), sigma=8.0)
        # one textured ellipse per foreground class, anchored on a ring
        radii = []
        centers = []
        bounds = []
        textures = []
        for k in range(n_struct):
            a = rng.uniform(h / 10.0, h / 7.0)
            b = rng.uniform(w / 10.0, w / 7.0)
            lo = np.array([int(np.ceil(a)) + drift + 1, int(np.ceil(b)) + drift + 1])
            hi = np.array([h - 1, w - 1]) - lo
            angle = 2.0 * np.pi * (k + rng.uniform(-0.1, 0.1)) / max(n_struct, 1)
            cr = h / 2.0 + (h / 4.2) * np.sin(angle)
            cc = w / 2.0 + (w / 4.2) * np.cos(angle)
            center = np.clip(np.array([round(cr), round(cc)], dtype=np.int64), lo, hi)
            radii.append((a, b))
            bounds.append((lo, hi))
            centers.append(center)
            # speckle texture sampled in structure-local coordinates so the
            # appearance translates rigidly with the drifting center
            tex = _smooth_noise(rng, (2 * h + 1, 2 * w + 1), sigma=1.2)
            textures.append(0.36 * (tex - 0.5))
        rows, cols = np.mgrid[0:h, 0:w]
        for s in range(d):
            img = background + rng.normal(0.0, config.noise_std, size=(h, w))
            lab = np.zeros((h, w), dtype=np.uint8)
            for k in range(n_struct):
                a, b = radii[k]
                if s > 0:
                    step = rng.integers(-drift, drift + 1, size=2)
                    lo, hi = bounds[k]
                    centers[k] = np.clip(centers[k] + step, lo, hi)
                cr, cc = centers[k]
                mask = ((rows - cr) / a) ** 2 + ((cols - cc) / b) ** 2 <= 1.0
                base = 0.45 + 0.5 * (k + 1) / config.num_classes
                tex = textures[k][rows - cr + h, cols - cc + w]
                img[mask] = base + tex[mask]
                lab[mask] = k + 1
            image[s] = np.clip(img, 0.0, 1.0)
            label[s] = lab
        write_volume(out_root / vid, image.astype(np.float32), label)
        volumes.append(VolumeInfo(vid, d))
    folds: list[list[str]] = [[] for _ in range(num_folds)]
    for i, vol in enumerate(volumes):
        folds[i % num_folds].append(vol.volume_id)
    manifest = DatasetManifest(root=out_root, volumes=volumes, folds=folds)
    manifest.save()
    return manifest


# --- sampling and splits ------------------------------------------------------


def sample_positive_pair(
    records: list[SliceRecord],
    anchor: SliceRecord,
    delta_pos: float,
    rng: np.random.Generator,
) -> tuple[SliceRecord, SliceRecord]:
    """Pick a partner slice within `delta_pos` normalized volume depth.

    `records` must come from training volumes only.  Falls back to pairing
    the anchor with itself (the caller augments both sides independently).
    """
    if not 0.0 < delta_pos <= 1.0:
        raise ValueError(f"delta_pos must lie in (0, 1], got {delta_pos}")
    candidates = [
        r for r in records
        if r is not anchor
        and abs(r.normalized_position - anchor.normalized_position) <= delta_pos
    ]
    if not candidates:
        log.info(
            "no positive partner for %s[%d]; falling back to an augmented self-pair",
            anchor.volume_id, anchor.slice_index,
        )
        return anchor, anchor
    return anchor, candidates[int(rng.integers(len(candidates)))]


def fewshot_split(
    manifest: DatasetManifest, fold: int, num_subjects: int, seed: int
) -> tuple[list[str], list[str]]:
    """Few-shot split: the fold's volumes validate, M sampled volumes train."""
    if not 0 <= fold < len(manifest.folds):
        raise ValueError(f"fold {fold} outside 0..{len(manifest.folds) - 1}")
    val_ids = sorted(manifest.folds[fold])
    pool = sorted(set(manifest.volume_ids()) - set(val_ids))
    if num_subjects > len(pool):
        raise ValueError(
            f"requested {num_subjects} training subjects but the fold-{fold} "
            f"pool holds only {len(pool)}"
        )
    rng = np.random.default_rng([seed, fold, num_subjects])
    chosen = rng.choice(len(pool), size=num_subjects, replace=False)
    train_ids = sorted(pool[i] for i in chosen)
    return train_ids, val_ids
