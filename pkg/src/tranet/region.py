"""Face alignment, horizontal hard masks and the AU-to-branch grouping."""

from __future__ import annotations

import enum
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from tranet import numcore as nc
from tranet.numcore import Tensor

NUM_LANDMARKS = 66
# 66-point AAM layout: 8 is the chin tip, 28 sits between nose root (27) and tip (30)
DEFAULT_NOSE_MID_INDEX = 28
DEFAULT_JAW_BOTTOM_INDEX = 8
JAW_TARGET_FRACTION = 15 / 16


# ---------------------------------------------------------------------------
# AU grouping

AU_ORDER: tuple[int, ...] = (1, 2, 4, 6, 9, 12, 25, 26)


@dataclass(frozen=True)
class AUGrouping:
    upper: tuple[int, ...] = (1, 2, 4)
    middle: tuple[int, ...] = (6, 9)
    lower: tuple[int, ...] = (12, 25, 26)

    def __post_init__(self):
        groups = self.upper + self.middle + self.lower
        if len(set(groups)) != len(groups):
            raise ValueError(f"AU groups overlap: {self}")

    def branches(self) -> dict[str, tuple[int, ...]]:
        return {"upper": self.upper, "middle": self.middle, "lower": self.lower}

    @property
    def all_aus(self) -> tuple[int, ...]:
        return self.upper + self.middle + self.lower

    def columns(self, branch: str, order: tuple[int, ...] = AU_ORDER) -> list[int]:
        """Indices into an ``order``-ed label vector for one branch."""
        return [order.index(au) for au in self.branches()[branch]]


# ---------------------------------------------------------------------------
# landmarks and alignment


@dataclass
class LandmarkSet:
    points: np.ndarray  # (66, 2) as (x, y) pixels, y grows downward
    nose_mid_index: int = DEFAULT_NOSE_MID_INDEX
    jaw_bottom_index: int = DEFAULT_JAW_BOTTOM_INDEX

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if self.points.shape[0] != NUM_LANDMARKS:
            raise ValueError(f"expected {NUM_LANDMARKS} landmarks, got {self.points.shape[0]}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark coordinates must be finite")

    @property
    def nose_mid(self) -> np.ndarray:
        return self.points[self.nose_mid_index]

    @property
    def jaw_bottom(self) -> np.ndarray:
        return self.points[self.jaw_bottom_index]

    def with_points(self, points: np.ndarray) -> "LandmarkSet":
        return LandmarkSet(points, self.nose_mid_index, self.jaw_bottom_index)


@dataclass(frozen=True)
class Similarity:
    """``q = a * p + b`` on points encoded as complex ``x + iy``."""

    a: complex
    b: complex

    @property
    def scale(self) -> float:
        return abs(self.a)

    @property
    def angle(self) -> float:
        return math.atan2(self.a.imag, self.a.real)

    def apply(self, points: np.ndarray) -> np.ndarray:
        z = points[:, 0] + 1j * points[:, 1]
        q = self.a * z + self.b
        return np.stack([q.real, q.imag], axis=1)

    def inverse(self) -> "Similarity":
        return Similarity(1 / self.a, -self.b / self.a)


def estimate_similarity(src: np.ndarray, dst: np.ndarray) -> Similarity:
    """The unique similarity sending ``src[0] -> dst[0]`` and ``src[1] -> dst[1]``."""
    p1, p2 = (complex(*pt) for pt in np.asarray(src, dtype=float))
    q1, q2 = (complex(*pt) for pt in np.asarray(dst, dtype=float))
    if p1 == p2:
        raise ValueError("anchor landmarks coincide; the similarity transform is degenerate")
    a = (q2 - q1) / (p2 - p1)
    return Similarity(a, q1 - a * p1)


def alignment_targets(out_size: int) -> np.ndarray:
    c = out_size / 2
    return np.array([[c, c], [c, out_size * JAW_TARGET_FRACTION]])


def bilinear_warp(image: np.ndarray, inverse: Similarity, out_size: int) -> np.ndarray:
    """Sample ``image`` (C, H, W) at ``inverse(q)`` for every output pixel ``q``; zero outside."""
    c, h, w = image.shape
    ys, xs = np.mgrid[0:out_size, 0:out_size].astype(np.float64)
    src = inverse.apply(np.stack([xs.ravel(), ys.ravel()], axis=1))
    sx, sy = src[:, 0], src[:, 1]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    out = np.zeros((c, out_size * out_size), dtype=np.float64)
    for dy, dx, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        yy, xx = y0 + dy, x0 + dx
        ok = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w) & (wgt != 0)
        out[:, ok] += image[:, yy[ok], xx[ok]] * wgt[ok]
    return out.reshape(c, out_size, out_size)


def similarity_align(image: np.ndarray, landmarks: LandmarkSet, out_size: int) -> tuple[np.ndarray, LandmarkSet]:
    """Rotate, scale and shift so the nose anchor lands at the frame centre and the jaw anchor near the bottom.

    ``image`` is (C, H, W).  The jaw anchor target is ``(out/2, out*15/16)`` so
    the chin is not clipped.
    """
    src = np.stack([landmarks.nose_mid, landmarks.jaw_bottom])
    transform = estimate_similarity(src, alignment_targets(out_size))
    aligned = bilinear_warp(np.asarray(image, dtype=np.float64), transform.inverse(), out_size)
    return aligned, landmarks.with_points(transform.apply(landmarks.points))


# ---------------------------------------------------------------------------
# hard masks


class Region(enum.Enum):
    UPPER = "upper"
    MIDDLE = "middle"
    LOWER = "lower"


@dataclass
class HardMask:
    region: Region
    grid: np.ndarray = field(repr=False)  # (H, W) of 0/1
    center_row: int

    @property
    def rows(self) -> np.ndarray:
        return np.flatnonzero(self.grid[:, 0])


def band_rows(region: Region, h: int, center_row: int) -> tuple[int, int]:
    """Half-open row range ``[start, stop)`` covered by one region; row 0 is the top."""
    quarter = h // 4
    if region is Region.UPPER:
        return 0, center_row
    if region is Region.LOWER:
        return center_row, h
    return max(0, center_row - quarter), min(h, center_row + quarter)


def _check_geometry(h: int, center_row: int) -> None:
    if h % 4:
        raise ValueError(f"mask height {h} must be divisible by 4")
    if not 0 < center_row < h:
        raise ValueError(f"center row {center_row} outside (0, {h})")


def make_hard_masks(h: int, w: int, center_row: int) -> tuple[HardMask, HardMask, HardMask]:
    """Upper ``[0, y)``, middle ``[y - h/4, y + h/4)`` (clipped) and lower ``[y, h)`` row bands."""
    _check_geometry(h, center_row)
    masks = []
    for region in Region:
        start, stop = band_rows(region, h, center_row)
        grid = np.zeros((h, w), dtype=np.uint8)
        grid[start:stop] = 1
        masks.append(HardMask(region, grid, center_row))
    return tuple(masks)


def apply_hard_mask(mask: HardMask, feat: Tensor) -> Tensor:
    """Zero every row outside the band, in all samples and channels."""
    if feat.ndim != 4 or feat.shape[2:] != mask.grid.shape:
        raise nc.ShapeError(f"mask resolution {mask.grid.shape} does not match feature map {feat.shape}")
    return nc.mul(feat, nc.constant(mask.grid[None, None].astype(nc.get_dtype())))


def mask_batch(region: Region, h: int, w: int, center_rows: Iterable[int]) -> np.ndarray:
    """Per-sample masks stacked to (N, 1, H, W), one center row per sample."""
    rows = list(center_rows)
    out = np.zeros((len(rows), 1, h, w), dtype=nc.get_dtype())
    for i, y in enumerate(rows):
        _check_geometry(h, int(y))
        start, stop = band_rows(region, h, int(y))
        out[i, 0, start:stop] = 1
    return out


def feature_center_row(landmarks: LandmarkSet, feature_h: int, image_h: int) -> int:
    """Nose-anchor row rescaled to a feature map, rounded half up and kept inside ``[1, feature_h - 1]``."""
    if image_h % feature_h:
        raise ValueError(f"feature height {feature_h} does not divide image height {image_h}")
    row = math.floor(landmarks.nose_mid[1] * feature_h / image_h + 0.5)
    return int(min(max(row, 1), feature_h - 1))


# ---------------------------------------------------------------------------
# landmark files


def write_landmarks(path: str | os.PathLike, table: Mapping[str, np.ndarray]) -> None:
    """One line per sample: id then x1 y1 ... x66 y66."""
    with open(path, "w") as fh:
        for sample_id, pts in table.items():
            flat = np.asarray(pts, dtype=float).reshape(-1)
            fh.write(sample_id + " " + " ".join(repr(float(v)) for v in flat) + "\n")


def read_landmarks(path: str | os.PathLike) -> dict[str, np.ndarray]:
    table: dict[str, np.ndarray] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 1 + 2 * NUM_LANDMARKS:
                raise ValueError(f"{path}:{lineno}: expected id + {2 * NUM_LANDMARKS} floats, got {len(parts) - 1}")
            table[parts[0]] = np.array([float(v) for v in parts[1:]]).reshape(NUM_LANDMARKS, 2)
    return table
