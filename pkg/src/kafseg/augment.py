"""Augmentations that co-transform images, label grids, and keypoint index maps.

Geometric ops warp all three inputs with the same coordinate map; images
interpolate bilinearly, labels and index maps use nearest-neighbor so
class ids and keypoint indices stay integral.  Intensity ops touch the
image only.  Every geometric op records an exact inverse description.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

GEOMETRIC_KINDS = ("translate", "rotate", "scale", "crop", "embed", "hflip")
INTENSITY_KINDS = ("intensity",)


@dataclass(frozen=True)
class AugmentationOp:
    kind: str
    params: tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in GEOMETRIC_KINDS + INTENSITY_KINDS:
            raise ValueError(f"unknown augmentation op: {self.kind!r}")

    def inverse(self) -> "AugmentationOp":
        k, p = self.kind, self.params
        if k == "translate":
            return AugmentationOp("translate", (-p[0], -p[1]))
        if k == "rotate":
            return AugmentationOp("rotate", (-p[0],))
        if k == "scale":
            return AugmentationOp("scale", (1.0 / p[0],))
        if k == "crop":
            return AugmentationOp("embed", p)
        if k == "embed":
            return AugmentationOp("crop", p)
        if k == "hflip":
            return AugmentationOp("hflip", ())
        return AugmentationOp("intensity", (1.0 / p[0],))


def translate(dx: float, dy: float) -> AugmentationOp:
    """Shift content by dx columns and dy rows."""
    return AugmentationOp("translate", (float(dx), float(dy)))


def rotate(degrees: float) -> AugmentationOp:
    return AugmentationOp("rotate", (float(degrees),))


def scale(factor: float) -> AugmentationOp:
    if factor <= 0:
        raise ValueError("scale factor must be positive")
    return AugmentationOp("scale", (float(factor),))


def crop(r0: int, c0: int, h: int, w: int) -> AugmentationOp:
    """Crop the (r0, c0, h, w) box and resize it back to the input dims."""
    if h < 1 or w < 1:
        raise ValueError("crop box must be at least 1x1")
    return AugmentationOp("crop", (float(r0), float(c0), float(h), float(w)))


def hflip() -> AugmentationOp:
    return AugmentationOp("hflip", ())


def intensity_jitter(gamma: float) -> AugmentationOp:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return AugmentationOp("intensity", (float(gamma),))


@dataclass(frozen=True)
class AugmentationSpec:
    """Deterministic, ordered op list; `seed` names the draw that produced it."""

    seed: int = 0
    ops: tuple[AugmentationOp, ...] = ()

    @classmethod
    def identity(cls) -> "AugmentationSpec":
        return cls(seed=0, ops=())

    @classmethod
    def random(
        cls,
        seed: int,
        max_translate: int = 5,
        max_rotate: float = 15.0,
        flip_prob: float = 0.5,
        gamma_range: float = 0.25,
    ) -> "AugmentationSpec":
        """Sample a spec from the default menu, deterministic per seed."""
        rng = np.random.default_rng(seed)
        ops: list[AugmentationOp] = []
        if max_translate > 0:
            dx = int(rng.integers(-max_translate, max_translate + 1))
            dy = int(rng.integers(-max_translate, max_translate + 1))
            if dx or dy:
                ops.append(translate(dx, dy))
        if max_rotate > 0:
            theta = float(rng.uniform(-max_rotate, max_rotate))
            ops.append(rotate(theta))
        if rng.random() < flip_prob:
            ops.append(hflip())
        if gamma_range > 0:
            lo, hi = 1.0 / (1.0 + gamma_range), 1.0 + gamma_range
            ops.append(intensity_jitter(float(rng.uniform(lo, hi))))
        return cls(seed=seed, ops=tuple(ops))

    def inverse_ops(self) -> tuple[AugmentationOp, ...]:
        return tuple(op.inverse() for op in reversed(self.ops))


def _warp(arr: np.ndarray, op: AugmentationOp, order: int) -> np.ndarray:
    """Apply one geometric op; `order` 0 = nearest, 1 = bilinear."""
    h, w = arr.shape
    k, p = op.kind, op.params
    if k == "hflip":
        return arr[:, ::-1].copy()
    if k == "translate":
        dx, dy = p
        if dx == int(dx) and dy == int(dy):
            out = np.zeros_like(arr)
            dyi, dxi = int(dy), int(dx)
            src_r = slice(max(0, -dyi), min(h, h - dyi))
            src_c = slice(max(0, -dxi), min(w, w - dxi))
            dst_r = slice(max(0, dyi), min(h, h + dyi))
            dst_c = slice(max(0, dxi), min(w, w + dxi))
            out[dst_r, dst_c] = arr[src_r, src_c]
            return out
        return ndimage.shift(
            arr, (dy, dx), order=order, mode="constant", cval=0.0, prefilter=False
        )
    if k == "rotate":
        return ndimage.rotate(
            arr, p[0], reshape=False, order=order, mode="constant", cval=0.0,
            prefilter=False,
        )
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    if k == "scale":
        s = p[0]
        matrix = np.diag([1.0 / s, 1.0 / s])
        offset = center - matrix @ center
    elif k == "crop":
        r0, c0, ch, cw = p
        matrix = np.diag([ch / h, cw / w])
        offset = np.array([r0, c0], dtype=np.float64)
    else:  # embed: paste full content back into the (r0, c0, ch, cw) box
        r0, c0, ch, cw = p
        matrix = np.diag([h / ch, w / cw])
        offset = -matrix @ np.array([r0, c0], dtype=np.float64)
    return ndimage.affine_transform(
        arr, matrix, offset=offset, order=order, mode="constant", cval=0.0,
        output_shape=(h, w), prefilter=False,
    )


def transform_image(image: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    out = np.asarray(image, dtype=np.float64)
    for op in spec.ops:
        if op.kind == "intensity":
            out = np.clip(out, 0.0, 1.0) ** op.params[0]
        else:
            out = _warp(out, op, order=1)
    return out


def transform_grid(grid: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    """Nearest-neighbor path shared by labels and index maps."""
    dtype = grid.dtype
    out = np.asarray(grid)
    for op in spec.ops:
        if op.kind == "intensity":
            continue
        out = _warp(out.astype(np.float64), op, order=0)
    return np.round(out).astype(dtype)


def transform_point(
    point: tuple[float, float], op: AugmentationOp, dims: tuple[int, int]
) -> tuple[float, float]:
    """Forward-map a (row, col) point through one geometric op."""
    h, w = dims
    r, c = float(point[0]), float(point[1])
    k, p = op.kind, op.params
    if k == "translate":
        return r + p[1], c + p[0]
    if k == "hflip":
        return r, (w - 1) - c
    if k == "rotate":
        # inverse of the ndimage.rotate output->input map
        theta = np.deg2rad(p[0])
        cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
        ca, sa = np.cos(theta), np.sin(theta)
        dr, dc = r - cr, c - cc
        return cr + ca * dr - sa * dc, cc + sa * dr + ca * dc
    if k == "scale":
        s = p[0]
        cr, cc = (h - 1) / 2.0, (w - 1) / 2.0
        return cr + (r - cr) * s, cc + (c - cc) * s
    if k == "crop":
        r0, c0, ch, cw = p
        return (r - r0) * h / ch, (c - c0) * w / cw
    if k == "embed":
        r0, c0, ch, cw = p
        return r0 + r * ch / h, c0 + c * cw / w
    return r, c


def transform_point_spec(
    point: tuple[float, float], spec: AugmentationSpec, dims: tuple[int, int]
) -> tuple[float, float]:
    for op in spec.ops:
        point = transform_point(point, op, dims)
    return point


def augment(
    image: np.ndarray,
    label: np.ndarray | None,
    index_map: np.ndarray,
    spec: AugmentationSpec,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray]:
    """Co-transform an image, its optional label grid, and a keypoint index map."""
    index_map = np.asarray(index_map)
    if index_map.shape != np.asarray(image).shape:
        raise ValueError(
            f"index map shape {index_map.shape} != image shape {np.asarray(image).shape}"
        )
    out_image = transform_image(image, spec)
    out_label = None if label is None else transform_grid(label, spec)
    out_map = transform_grid(index_map, spec)
    return out_image, out_label, out_map
