"""Dataset ingestion (manifest, landmarks, PPM images) and the synthetic region-localized face generator."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from tranet.numcore.init import substream
from tranet.region import (
    AU_ORDER,
    DEFAULT_JAW_BOTTOM_INDEX,
    DEFAULT_NOSE_MID_INDEX,
    NUM_LANDMARKS,
    AUGrouping,
    LandmarkSet,
    Similarity,
    alignment_targets,
    bilinear_warp,
    read_landmarks,
    similarity_align,
    write_landmarks,
)
from tranet.training import MAX_INTENSITY, LabeledSample, SampleSet, binarize

MANIFEST_HEADER = ["id", "path", "subject"] + [f"au{a}" for a in AU_ORDER]
LANDMARKS_FILE = "landmarks.txt"
MANIFEST_FILE = "manifest.csv"
MAX_SKIP_FRACTION = 0.10


class DataError(ValueError):
    """Unreadable or invalid dataset input."""


# ---------------------------------------------------------------------------
# PPM / PGM


def write_ppm(path: str | os.PathLike, gray: np.ndarray) -> None:
    """Binary P6 with the 8-bit gray image replicated into R, G and B."""
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError("write_ppm expects a 2-D uint8 array")
    h, w = gray.shape
    rgb = np.repeat(gray[:, :, None], 3, axis=2)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PPM header")
        tokens.append(buf[start:pos])
    return tokens, pos + 1  # one whitespace byte ends the header


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    """Decode binary P6 or P5 (8-bit) into a (3, H, W) uint8 array; gray input is replicated."""
    buf = Path(path).read_bytes()
    tokens, pos = _header_tokens(buf, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DataError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    channels = 3 if magic == b"P6" else 1
    need = w * h * channels
    body = buf[pos : pos + need]
    if len(body) != need:
        raise DataError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    pix = np.frombuffer(body, dtype=np.uint8).reshape(h, w, channels)
    if channels == 1:
        pix = np.repeat(pix, 3, axis=2)
    return np.ascontiguousarray(pix.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestRow:
    sample_id: str
    path: str
    subject: str
    intensities: list[int]
    bad: bool = False
    line: int = 0


@dataclass
class DatasetManifest:
    rows: list[ManifestRow]
    root: Path
    landmarks_path: Path


def read_manifest(path: str | os.PathLike, landmarks_path: str | os.PathLike | None = None) -> DatasetManifest:
    """Parse the CSV manifest; image paths are relative to its directory.

    An optional trailing ``bad`` column (0/1) marks frames with known-bad
    annotations.  Intensity values are parsed here but range-checked at load.
    """
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            header = MANIFEST_HEADER
        header = [h.strip() for h in header]
        if header not in (MANIFEST_HEADER, MANIFEST_HEADER + ["bad"]):
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}[,bad], got {','.join(header)}")
        has_bad = header[-1] == "bad"
        rows, seen = [], set()
        for lineno, rec in enumerate(reader, 2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            sid, img, subject = (c.strip() for c in rec[:3])
            if sid in seen:
                raise DataError(f"{path}:{lineno}: duplicate sample id {sid!r}")
            seen.add(sid)
            try:
                ints = [int(c) for c in rec[3 : 3 + len(AU_ORDER)]]
                bad = bool(int(rec[-1])) if has_bad else False
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            rows.append(ManifestRow(sid, img, subject, ints, bad, lineno))
    lm = Path(landmarks_path) if landmarks_path is not None else path.parent / LANDMARKS_FILE
    return DatasetManifest(rows, path.parent, lm)


def write_manifest(path: str | os.PathLike, rows: Iterable[ManifestRow], with_bad: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_HEADER + (["bad"] if with_bad else []))
        for r in rows:
            w.writerow([r.sample_id, r.path, r.subject, *r.intensities] + ([int(r.bad)] if with_bad else []))


@dataclass
class LoadResult:
    samples: list[LabeledSample]
    skipped: list[tuple[str, str]]  # (sample id, reason) for invalid rows
    flagged_bad: int

    @property
    def data(self) -> SampleSet:
        return SampleSet.from_samples(self.samples)


def _load_row(row: ManifestRow, root: Path, landmarks: dict, size: int) -> LabeledSample:
    if any(not 0 <= v <= MAX_INTENSITY for v in row.intensities):
        raise DataError(f"intensity out of range 0..{MAX_INTENSITY}: {row.intensities}")
    if row.sample_id not in landmarks:
        raise DataError("no landmarks for this sample")
    img_path = root / row.path
    if not img_path.is_file():
        raise DataError(f"image not found: {img_path}")
    image = read_ppm(img_path).astype(np.float64) / 255.0
    aligned, lm = similarity_align(image, LandmarkSet(landmarks[row.sample_id]), size)
    return LabeledSample(row.sample_id, np.clip(aligned, 0.0, 1.0), row.intensities, row.subject, lm)


def load_dataset(
    manifest_path: str | os.PathLike,
    input_size: int = 64,
    landmarks_path: str | os.PathLike | None = None,
    log: Callable[[str], None] | None = None,
    max_skip_fraction: float = MAX_SKIP_FRACTION,
) -> LoadResult:
    """Decode, align and scale every manifest row.

    Invalid rows are skipped with a diagnostic; more than ``max_skip_fraction``
    of them is fatal.  Rows flagged ``bad`` are dropped silently and only counted.
    """
    log = log or (lambda msg: None)
    manifest = read_manifest(manifest_path, landmarks_path)
    if not manifest.rows:
        return LoadResult([], [], 0)
    try:
        landmarks = read_landmarks(manifest.landmarks_path)
    except OSError as exc:
        raise DataError(f"cannot read landmark file {manifest.landmarks_path}: {exc}") from exc
    except ValueError as exc:
        raise DataError(str(exc)) from exc

    samples, skipped, flagged = [], [], 0
    for row in manifest.rows:
        if row.bad:
            flagged += 1
            continue
        try:
            samples.append(_load_row(row, manifest.root, landmarks, input_size))
        except (DataError, ValueError, OSError) as exc:
            skipped.append((row.sample_id, str(exc)))
            log(f"{manifest_path}:{row.line}: skipping {row.sample_id}: {exc}")
    considered = len(manifest.rows) - flagged
    if considered and len(skipped) / considered > max_skip_fraction:
        raise DataError(
            f"{len(skipped)} of {considered} rows could not be loaded (limit {max_skip_fraction:.0%}); "
            f"first problem: {skipped[0][0]}: {skipped[0][1]}"
        )
    if flagged:
        log(f"dropped {flagged} row(s) flagged as bad annotations")
    return LoadResult(samples, skipped, flagged)


# ---------------------------------------------------------------------------
# statistics


@dataclass
class DatasetStats:
    positive_counts: np.ndarray
    rates: np.ndarray
    frames_per_subject: dict[str, int]
    total: int

    def format(self) -> str:
        lines = [f"{self.total} frames, {len(self.frames_per_subject)} subjects"]
        for au, n, r in zip(AU_ORDER, self.positive_counts, self.rates):
            lines.append(f"AU{au:<3d} positives {int(n):6d}  rate {r:.3f}")
        return "\n".join(lines)


def dataset_stats(data: SampleSet | Sequence[LabeledSample], threshold: int = 2) -> DatasetStats:
    if not isinstance(data, SampleSet):
        if not data:
            raise ValueError("dataset_stats needs at least one sample")
        data = SampleSet.from_samples(data)
    labels = binarize(data.intensities, threshold)
    subjects, counts = np.unique(data.subjects, return_counts=True)
    return DatasetStats(
        labels.sum(axis=0), labels.mean(axis=0), dict(zip(subjects.tolist(), counts.tolist())), len(data)
    )


# ---------------------------------------------------------------------------
# synthetic faces


DEFAULT_AU_PROBS = [0.25, 0.2, 0.35, 0.3, 0.15, 0.4, 0.45, 0.3]
ACTIVE_INTENSITY = 3


@dataclass
class SynthSpec:
    num_subjects: int = 9
    frames_per_subject: int = 200
    size: int = 64
    seed: int = 0
    au_probs: list = field(default_factory=lambda: list(DEFAULT_AU_PROBS))  # AU_ORDER
    signal: float = 70.0  # gray levels added by an active pattern
    noise_sigma: float = 6.0
    texture_amplitude: float = 25.0
    jitter: float = 0.5  # px, standard deviation of the anchor jitter

    def violations(self) -> list[str]:
        out = []
        if self.num_subjects < 1 or self.frames_per_subject < 1:
            out.append("num_subjects and frames_per_subject must be >= 1")
        if not (isinstance(self.seed, int) and self.seed >= 0):
            out.append(f"seed must be a non-negative integer, got {self.seed!r}")
        if self.size < 32 or self.size % 8:
            out.append(f"size must be a multiple of 8 and >= 32, got {self.size}")
        if len(self.au_probs) != len(AU_ORDER):
            out.append(f"au_probs needs {len(AU_ORDER)} entries (AU order {AU_ORDER})")
        elif not all(0 <= p <= 1 for p in self.au_probs):
            out.append("au_probs must lie in [0, 1]")
        if self.signal <= 0:
            out.append("signal must be > 0")
        if self.noise_sigma < 0 or self.texture_amplitude < 0 or self.jitter < 0:
            out.append("noise_sigma, texture_amplitude and jitter must be >= 0")
        return out

    def validate(self) -> None:
        problems = self.violations()
        if problems:
            from tranet.network import ConfigError

            raise ConfigError("invalid synth spec: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        from tranet.network import ConfigError

        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synth spec field(s): {sorted(unknown)}")
        spec = cls(**data)
        spec.validate()
        return spec

    @classmethod
    def load(cls, path: str | os.PathLike) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# Pattern blocks on a 64-px canvas: (row0, row1, col0, col1, texture).  Every
# block is mirrored left-right so a horizontal flip maps a pattern onto itself.
# Rows keep a 3-px margin from the band edges (upper [0,32), middle [16,48),
# lower [32,64)) to absorb jitter and interpolation.
_PATTERNS = {
    1: [(4, 12, 24, 40, "hstripe")],
    2: [(4, 12, 4, 18, "vstripe")],
    4: [(16, 28, 22, 42, "vstripe")],
    6: [(30, 40, 4, 18, "checker")],
    9: [(28, 38, 24, 40, "hstripe")],
    12: [(40, 50, 6, 20, "diag")],
    25: [(44, 52, 24, 40, "vstripe")],
    26: [(54, 61, 22, 42, "hstripe")],
}
BAND_OF = {au: band for band, aus in AUGrouping().branches().items() for au in aus}


def _texture(kind: str, h: int, w: int, mirror: bool | None) -> np.ndarray:
    """Binary texture; ``mirror=None`` folds columns about the block centre."""
    r, c = np.mgrid[0:h, 0:w]
    if mirror is None:
        c = np.minimum(c, w - 1 - c)
    elif mirror:
        c = c[:, ::-1]
    if kind == "hstripe":
        t = (r // 2) % 2 == 0
    elif kind == "vstripe":
        t = (c // 2) % 2 == 0
    elif kind == "checker":
        t = ((r // 2) + (c // 2)) % 2 == 0
    else:
        t = ((r + c) // 2) % 2 == 0
    return t.astype(np.float64)


def pattern_mask(au: int, size: int = 64) -> np.ndarray:
    """(size, size) intensity map in [0, 1] stamped by one active AU."""
    s = size / 64
    out = np.zeros((size, size))
    for r0, r1, c0, c1, kind in _PATTERNS[au]:
        r0, r1 = round(r0 * s), round(r1 * s)
        spans = [(c0, c1, None)] if c0 == 64 - c1 else [(c0, c1, False), (64 - c1, 64 - c0, True)]
        for a, b, mirror in spans:
            a, b = round(a * s), round(b * s)
            out[r0:r1, a:b] = np.maximum(out[r0:r1, a:b], _texture(kind, r1 - r0, b - a, mirror))
    return out


def image_band_rows(band: str, size: int = 64) -> tuple[int, int]:
    """Band rows in image coordinates for a centred nose anchor."""
    y, q = size // 2, size // 4
    return {"upper": (0, y), "middle": (y - q, y + q), "lower": (y, size)}[band]


def canonical_landmarks(size: int = 64) -> np.ndarray:
    """A 66-point face outline with the nose anchor at the centre and the jaw anchor at 15/16 height."""
    s = size / 64
    pts = np.zeros((NUM_LANDMARKS, 2))
    # jaw 0..16, chin tip at 8
    t = np.linspace(-1, 1, 17)
    pts[0:17, 0] = 32 + 26 * np.sin(t * 1.25) / np.sin(1.25)
    pts[0:17, 1] = 60 - 30 * (1 - np.cos(t * 1.25)) / (1 - np.cos(1.25))
    # brows 17..26
    pts[17:27, 0] = np.r_[np.linspace(9, 27, 5), np.linspace(37, 55, 5)]
    pts[17:27, 1] = np.tile(14 - 2 * np.sin(np.linspace(0, np.pi, 5)), 2)
    # nose bridge 27..30, base 31..35
    pts[27:31, 0] = 32
    pts[27:31, 1] = [26, 32, 36, 39]
    pts[31:36, 0] = np.linspace(27, 37, 5)
    pts[31:36, 1] = [41, 42, 42.5, 42, 41]
    # eyes 36..47
    ang = np.linspace(0, 2 * np.pi, 6, endpoint=False)
    for start, cx in ((36, 19), (42, 45)):
        pts[start : start + 6, 0] = cx + 5 * np.cos(ang)
        pts[start : start + 6, 1] = 22 + 2 * np.sin(ang)
    # mouth outer 48..59, inner 60..65
    ang = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    pts[48:60, 0] = 32 - 10 * np.cos(ang)
    pts[48:60, 1] = 50 + 4 * np.sin(ang)
    ang = np.linspace(0, 2 * np.pi, 6, endpoint=False)
    pts[60:66, 0] = 32 - 6 * np.cos(ang)
    pts[60:66, 1] = 50 + 1.5 * np.sin(ang)
    pts *= s
    pts[DEFAULT_NOSE_MID_INDEX], pts[DEFAULT_JAW_BOTTOM_INDEX] = alignment_targets(size)
    return pts


def identity_texture(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    """Smooth per-subject face appearance: a coarse random field upsampled bilinearly."""
    coarse = rng.normal(size=(1, 9, 9))
    step = 8 / (size - 1)
    inv = Similarity(complex(step, 0), 0j)
    field_ = bilinear_warp(coarse, inv, size)[0]
    return 110 + rng.normal(0, 10) + amplitude * field_ / max(1e-9, np.abs(field_).max())


def render_frame(
    base: np.ndarray,
    active: Sequence[bool],
    signal: float,
    noise: np.ndarray | None = None,
    warp: Similarity | None = None,
) -> np.ndarray:
    """Compose one 8-bit frame: identity texture + active patterns (+ noise), optionally moved by ``warp``."""
    size = base.shape[0]
    img = base.copy()
    for au, on in zip(AU_ORDER, active):
        if on:
            img = img + signal * pattern_mask(au, size)
    if warp is not None:
        img = bilinear_warp(img[None], warp.inverse(), size)[0]
    if noise is not None:
        img = img + noise
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def frame_jitter(rng: np.random.Generator, size: int, sigma: float) -> Similarity:
    """A small random similarity about the image centre (sub-pixel shift, under a degree of rotation, 1% scale)."""
    if sigma == 0:
        return Similarity(1 + 0j, 0j)
    shift = np.clip(rng.normal(0, sigma, size=2), -2 * sigma, 2 * sigma)
    angle = np.clip(rng.normal(0, 0.005), -0.01, 0.01)
    scale = 1 + np.clip(rng.normal(0, 0.003), -0.006, 0.006)
    a = scale * complex(math.cos(angle), math.sin(angle))
    c = complex(size / 2, size / 2)
    return Similarity(a, c - a * c + complex(*shift))


@dataclass
class SynthRecord:
    manifest: Path
    active: np.ndarray  # (N, 8) bool, AU_ORDER
    ids: list[str]


def generate_synthetic(spec: SynthSpec, out_dir: str | os.PathLike) -> SynthRecord:
    """Write ``<out>/<subject>/<frame>.ppm``, ``manifest.csv`` and ``landmarks.txt``; deterministic per seed."""
    spec.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = spec.size
    template = canonical_landmarks(size)
    probs = np.asarray(spec.au_probs, dtype=np.float64)
    rows, table, active_all = [], {}, []
    for si in range(spec.num_subjects):
        subject = f"S{si + 1:02d}"
        rng = substream(spec.seed, f"subject/{subject}")
        base = identity_texture(rng, size, spec.texture_amplitude)
        (out / subject).mkdir(exist_ok=True)
        for fi in range(spec.frames_per_subject):
            active = rng.random(len(AU_ORDER)) < probs
            noise = rng.normal(0, spec.noise_sigma, size=(size, size)) if spec.noise_sigma > 0 else None
            warp = frame_jitter(rng, size, spec.jitter)
            frame = render_frame(base, active, spec.signal, noise, warp)
            rel = f"{subject}/{fi:04d}.ppm"
            write_ppm(out / rel, frame)
            sid = f"{subject}_{fi:04d}"
            rows.append(ManifestRow(sid, rel, subject, [ACTIVE_INTENSITY if a else 0 for a in active]))
            table[sid] = warp.apply(template)
            active_all.append(active)
    write_manifest(out / MANIFEST_FILE, rows)
    write_landmarks(out / LANDMARKS_FILE, table)
    return SynthRecord(out / MANIFEST_FILE, np.array(active_all, dtype=bool).reshape(-1, len(AU_ORDER)), [r.sample_id for r in rows])
