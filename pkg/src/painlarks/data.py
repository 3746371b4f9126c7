"""Landmark and feature datasets: file formats, synthetic clips, SMOTE, splits, augmentation."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import NUM_LANDMARKS

logger = logging.getLogger(__name__)

N_FRAMES = 20
CSV_HEADER = ["clip_id", "frame_idx", "label"] + [
    f"{axis}{i}" for i in range(NUM_LANDMARKS) for axis in ("x", "y")
]


class DataError(ValueError):
    """Malformed or unusable input data."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class LandmarkClip:
    clip_id: str
    frames: np.ndarray  # [20, 68, 2]
    label: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (NUM_LANDMARKS, 2):
            raise DataError(f"clip {self.clip_id}: frames must be [T, 68, 2], got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise DataError(f"clip {self.clip_id}: non-finite coordinates")
        if self.label not in (0, 1):
            raise DataError(f"clip {self.clip_id}: label must be 0 or 1, got {self.label}")


@dataclass
class FeatureClip:
    """A clip of per-frame features: ``[T, D]`` vectors or ``[T, 3, S, S]`` images."""

    clip_id: str
    frames: np.ndarray
    label: int

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim < 2:
            raise DataError(f"clip {self.clip_id}: features must be at least [T, D]")
        if not np.all(np.isfinite(self.frames)):
            raise DataError(f"clip {self.clip_id}: non-finite features")
        if self.label not in (0, 1):
            raise DataError(f"clip {self.clip_id}: label must be 0 or 1, got {self.label}")


@dataclass
class Dataset:
    clips: list
    rejected: list[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [c.clip_id for c in self.clips]
        if len(set(ids)) != len(ids):
            dup = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"duplicate clip ids: {dup[:5]}")

    def __len__(self) -> int:
        return len(self.clips)

    def __iter__(self):
        return iter(self.clips)

    def __getitem__(self, i):
        return self.clips[i]

    @property
    def class_counts(self) -> dict[int, int]:
        counts = {0: 0, 1: 0}
        for c in self.clips:
            counts[c.label] += 1
        return counts

    @property
    def X(self) -> np.ndarray:
        return np.stack([c.frames for c in self.clips])

    @property
    def y(self) -> np.ndarray:
        return np.array([c.label for c in self.clips], dtype=np.int64)

    @property
    def clip_ids(self) -> list[str]:
        return [c.clip_id for c in self.clips]

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset([self.clips[i] for i in indices])

    @classmethod
    def from_arrays(cls, X, y, clip_ids: Sequence[str] | None = None) -> "Dataset":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y).astype(np.int64)
        ids = clip_ids if clip_ids is not None else [f"clip{i:05d}" for i in range(len(X))]
        kind = LandmarkClip if X.shape[2:] == (NUM_LANDMARKS, 2) else FeatureClip
        return cls([kind(str(i), x, int(l)) for i, x, l in zip(ids, X, y)])


# ---------------------------------------------------------------- normalization


def normalize_clip(frames: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-RMS-radius coordinates using one transform per clip."""
    frames = np.asarray(frames, dtype=np.float64)
    centred = frames - frames.reshape(-1, 2).mean(axis=0)
    rms = math.sqrt(float(np.mean(np.sum(centred ** 2, axis=-1))))
    if rms == 0.0:
        raise DataError("degenerate clip: all landmarks coincide")
    return centred / rms


# ---------------------------------------------------------------- landmark CSV


def load_landmark_csv(path, normalize: bool = True, n_frames: int = N_FRAMES) -> Dataset:
    """Read the per-frame landmark CSV into one clip per ``clip_id``.

    Clips without exactly ``n_frames`` frames are skipped with a warning and
    listed in ``Dataset.rejected``. Malformed rows and duplicate
    ``(clip_id, frame_idx)`` pairs raise :class:`DataError` with the line.
    """
    path = Path(path)
    rows: dict[str, list[tuple[int, int, np.ndarray, int]]] = {}
    seen: dict[tuple[str, int], int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file", line=1) from None
        if header != CSV_HEADER:
            raise DataError("header does not match clip_id,frame_idx,label,x0,y0,...,x67,y67", line=1)
        for row in reader:
            line = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(CSV_HEADER):
                raise DataError(f"expected {len(CSV_HEADER)} columns, got {len(row)}", line=line)
            clip_id = row[0]
            try:
                frame_idx = int(row[1])
                label = int(row[2])
                coords = np.array([float(v) for v in row[3:]], dtype=np.float64)
            except ValueError as exc:
                raise DataError(f"unparseable value ({exc})", line=line) from None
            if label not in (0, 1):
                raise DataError(f"label must be 0 or 1, got {label}", line=line)
            if not np.all(np.isfinite(coords)):
                raise DataError("non-finite coordinate", line=line)
            key = (clip_id, frame_idx)
            if key in seen:
                raise DataError(f"duplicate frame {frame_idx} for clip {clip_id!r} "
                                f"(first seen on line {seen[key]})", line=line)
            seen[key] = line
            rows.setdefault(clip_id, []).append((frame_idx, line, coords.reshape(NUM_LANDMARKS, 2), label))

    clips, rejected = [], []
    for clip_id in sorted(rows):
        entries = sorted(rows[clip_id], key=lambda r: r[0])
        labels = {e[3] for e in entries}
        if len(labels) != 1:
            raise DataError(f"clip {clip_id!r} mixes labels {sorted(labels)}", line=entries[0][1])
        if len(entries) != n_frames:
            logger.warning("rejecting clip %r: %d frames, expected %d", clip_id, len(entries), n_frames)
            rejected.append(clip_id)
            continue
        frames = np.stack([e[2] for e in entries])
        if normalize:
            try:
                frames = normalize_clip(frames)
            except DataError:
                logger.warning("rejecting clip %r: degenerate coordinates", clip_id)
                rejected.append(clip_id)
                continue
        clips.append(LandmarkClip(clip_id, frames, labels.pop()))
    return Dataset(clips, rejected)


def write_landmark_csv(dataset: Dataset, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for clip in dataset:
            for t, frame in enumerate(clip.frames):
                w.writerow([clip.clip_id, t, clip.label] + [repr(float(v)) for v in frame.reshape(-1)])


# ---------------------------------------------------------------- feature clips


def write_feature_clips(dataset: Dataset, path) -> None:
    """Concatenated ``FEATCLIP v1 <id> <label> <T> <D>`` blocks in one file."""
    with open(path, "w", encoding="utf-8") as fh:
        for clip in dataset:
            feats = clip.frames.reshape(clip.frames.shape[0], -1)
            steps, dim = feats.shape
            fh.write(f"FEATCLIP v1 {clip.clip_id} {clip.label} {steps} {dim}\n")
            for row in feats:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def load_feature_clips(path) -> Dataset:
    """Read one feature-clip file (possibly several blocks) or a directory of them."""
    path = Path(path)
    files = sorted(p for p in path.iterdir() if p.is_file()) if path.is_dir() else [path]
    clips = []
    for f in files:
        lines = f.read_text(encoding="utf-8").splitlines()
        i = 0
        while i < len(lines):
            if not lines[i].strip():
                i += 1
                continue
            parts = lines[i].split()
            if len(parts) != 6 or parts[0] != "FEATCLIP" or parts[1] != "v1":
                raise DataError(f"{f.name}: expected 'FEATCLIP v1 <clip_id> <label> <T> <D>'", line=i + 1)
            try:
                label, steps, dim = int(parts[3]), int(parts[4]), int(parts[5])
            except ValueError:
                raise DataError(f"{f.name}: non-integer header field", line=i + 1) from None
            block = []
            for j in range(steps):
                ln = i + 1 + j
                if ln >= len(lines):
                    raise DataError(f"{f.name}: clip {parts[2]!r} truncated", line=ln + 1)
                try:
                    vals = [float(v) for v in lines[ln].split()]
                except ValueError:
                    raise DataError(f"{f.name}: unparseable feature value", line=ln + 1) from None
                if len(vals) != dim:
                    raise DataError(f"{f.name}: expected {dim} values, got {len(vals)}", line=ln + 1)
                block.append(vals)
            clips.append(FeatureClip(parts[2], np.array(block), label))
            i += 1 + steps
    return Dataset(clips)


def load_dataset(path, normalize: bool = True) -> Dataset:
    """Landmark CSV for ``*.csv``, feature-clip file(s) otherwise."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"data path {path} does not exist")
    if path.suffix.lower() == ".csv":
        return load_landmark_csv(path, normalize=normalize)
    return load_feature_clips(path)


def as_feature_dataset(dataset: Dataset) -> Dataset:
    """Flatten each landmark frame to a 136-d vector for the precomputed-feature path."""
    return Dataset([FeatureClip(c.clip_id, c.frames.reshape(c.frames.shape[0], -1), c.label)
                    for c in dataset])


def render_landmark_images(dataset: Dataset, size: int = 32, extent: float = 2.5) -> Dataset:
    """Rasterise normalized landmarks into ``[T, 3, size, size]`` frames.

    Channel 0 holds every landmark, channel 1 brows and eyes, channel 2 the mouth.
    """
    groups = [np.arange(68), np.r_[17:27, 36:48], np.arange(48, 68)]
    out = []
    for clip in dataset:
        steps = clip.frames.shape[0]
        img = np.zeros((steps, 3, size, size))
        pix = np.clip(((clip.frames + extent) / (2 * extent) * (size - 1)).round().astype(int), 0, size - 1)
        for ch, idx in enumerate(groups):
            for t in range(steps):
                img[t, ch, pix[t, idx, 1], pix[t, idx, 0]] = 1.0
        out.append(FeatureClip(clip.clip_id, img, clip.label))
    return Dataset(out)


# ---------------------------------------------------------------- synthetic clips


def _template() -> np.ndarray:
    """Neutral 68-point face in a unit box centred at the origin, y pointing down."""
    pts = np.zeros((68, 2))
    a = np.linspace(np.pi * 0.95, np.pi * 0.05, 17)
    pts[0:17] = np.c_[0.45 * np.cos(a), 0.05 + 0.5 * np.sin(a)]
    pts[17:22] = np.c_[np.linspace(-0.38, -0.08, 5), -0.22 - 0.04 * np.sin(np.linspace(0, np.pi, 5))]
    pts[22:27] = np.c_[np.linspace(0.08, 0.38, 5), -0.22 - 0.04 * np.sin(np.linspace(0, np.pi, 5))]
    pts[27:31] = np.c_[np.zeros(4), np.linspace(-0.14, 0.08, 4)]
    pts[31:36] = np.c_[np.linspace(-0.08, 0.08, 5), 0.13 + 0.02 * np.sin(np.linspace(0, np.pi, 5))]

    def eye(cx):
        t = np.linspace(np.pi, -np.pi, 6, endpoint=False)
        return np.c_[cx + 0.09 * np.cos(t), -0.12 + 0.035 * np.sin(t)]

    pts[36:42] = eye(-0.2)
    pts[42:48] = eye(0.2)
    t = np.linspace(np.pi, -np.pi, 12, endpoint=False)
    pts[48:60] = np.c_[0.18 * np.cos(t), 0.3 + 0.07 * np.sin(t)]
    t = np.linspace(np.pi, -np.pi, 8, endpoint=False)
    pts[60:68] = np.c_[0.12 * np.cos(t), 0.3 + 0.025 * np.sin(t)]
    return pts


def _pain_displacement(base: np.ndarray, progress: float, amplitude: float) -> np.ndarray:
    """Offsets for brow lowering, mouth-corner stretch and eye narrowing."""
    d = np.zeros_like(base)
    a = progress * amplitude
    d[17:27, 1] += 0.15 * a
    d[48, 0] -= 0.08 * a
    d[54, 0] += 0.08 * a
    d[48, 1] -= 0.05 * a
    d[54, 1] -= 0.05 * a
    for lo in (36, 42):
        eye = base[lo:lo + 6]
        centre = eye.mean(axis=0)
        d[lo:lo + 6, 1] += -(eye[:, 1] - centre[1]) * 0.6 * a
    return d


def generate_synthetic(n_per_class: int, seed: int = 0, noise: float = 0.004,
                       n_frames: int = N_FRAMES, normalize: bool = True) -> Dataset:
    """Balanced synthetic landmark clips.

    Class 0 is a static neutral face with per-frame jitter. Class 1 starts from
    the same kind of face and deforms progressively (brows down, mouth corners
    out and up, eyes narrowing) so the label depends on temporal progression.
    Each clip gets its own head shape, scale and position in pixel space.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    template = _template()
    clips = []
    for label in (0, 1):
        for k in range(n_per_class):
            shape = template + rng.normal(0.0, 0.01, size=template.shape)
            scale = rng.uniform(80.0, 140.0)
            centre = rng.uniform(60.0, 160.0, size=2)
            amplitude = rng.uniform(0.7, 1.3)
            frames = np.empty((n_frames, 68, 2))
            for t in range(n_frames):
                pts = shape.copy()
                if label == 1:
                    pts += _pain_displacement(shape, t / (n_frames - 1), amplitude)
                pts += rng.normal(0.0, noise, size=pts.shape)
                frames[t] = pts * scale + centre
            if normalize:
                frames = normalize_clip(frames)
            clips.append(LandmarkClip(f"synth{label}_{k:04d}", frames, label))
    return Dataset(clips)


# ---------------------------------------------------------------- SMOTE


def smote_arrays(X: np.ndarray, y: np.ndarray, k: int = 5, seed=0):
    """Oversample the minority class of flattened samples to exact balance.

    Returns ``(X_new, y_new, base_index)`` for the synthetic rows only, where
    ``base_index`` gives the minority sample each one was grown from.
    """
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise DataError("SMOTE needs samples from both classes")
    minority = classes[np.argmin(counts)]
    n_min, n_maj = counts.min(), counts.max()
    need = int(n_maj - n_min)
    if need == 0:
        return np.empty((0, X.shape[1])), np.empty(0, dtype=y.dtype), np.empty(0, dtype=np.int64)
    if n_min < 2:
        raise DataError("SMOTE needs at least 2 minority samples to find a neighbour")
    k_eff = min(k, n_min - 1)
    idx = np.flatnonzero(y == minority)
    P = X[idx]
    sq = np.sum(P * P, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * P @ P.T
    np.fill_diagonal(d2, np.inf)
    neighbours = np.argsort(d2, axis=1, kind="stable")[:, :k_eff]
    base = rng.integers(0, n_min, size=need)
    pick = neighbours[base, rng.integers(0, k_eff, size=need)]
    u = rng.uniform(0.0, 1.0, size=(need, 1))
    synth = P[base] + u * (P[pick] - P[base])
    return synth, np.full(need, minority, dtype=y.dtype), idx[base]


def smote_oversample(dataset: Dataset, k: int = 5, seed=0) -> Dataset:
    """Append SMOTE clips so both classes have the majority count."""
    counts = dataset.class_counts
    if min(counts.values()) == 0:
        raise DataError(f"SMOTE cannot balance an empty class: {counts}")
    synth, labels, base = smote_arrays(dataset.X, dataset.y, k=k, seed=seed)
    if len(synth) == 0:
        return dataset
    shape = dataset.clips[0].frames.shape
    kind = type(dataset.clips[0])
    extra = [kind(f"{dataset.clips[b].clip_id}_smote{j}", s.reshape(shape), int(l))
             for j, (s, l, b) in enumerate(zip(synth, labels, base))]
    return Dataset(list(dataset.clips) + extra)


# ---------------------------------------------------------------- splits


def _by_class(dataset: Dataset) -> dict[int, np.ndarray]:
    y = dataset.y
    return {c: np.flatnonzero(y == c) for c in (0, 1)}


def split_dataset(dataset: Dataset, seed=0, fractions=(0.8, 0.1, 0.1)):
    """Stratified train/val/test split; rounding remainders go to train."""
    if len(dataset) < 10:
        raise DataError(f"need at least 10 clips to split, got {len(dataset)}")
    groups = _by_class(dataset)
    for c, members in groups.items():
        if len(members) == 0:
            raise DataError(f"class {c} is absent from the dataset")
    rng = np.random.default_rng(seed)
    parts = ([], [], [])
    for c in (0, 1):
        members = rng.permutation(groups[c])
        n = len(members)
        n_val = int(math.floor(n * fractions[1]))
        n_test = int(math.floor(n * fractions[2]))
        parts[1].extend(members[:n_val])
        parts[2].extend(members[n_val:n_val + n_test])
        parts[0].extend(members[n_val + n_test:])
    return tuple(dataset.subset(sorted(p)) for p in parts)


def holdout_split(dataset: Dataset, fraction: float, seed=0):
    """Stratified ``(rest, held_out)`` with ``floor(n_c * fraction)`` per class held out."""
    rng = np.random.default_rng(seed)
    rest, held = [], []
    for c, members in _by_class(dataset).items():
        members = rng.permutation(members)
        n_h = int(math.floor(len(members) * fraction))
        held.extend(members[:n_h])
        rest.extend(members[n_h:])
    return dataset.subset(sorted(rest)), dataset.subset(sorted(held))


def kfold_partitions(dataset: Dataset, k: int = 5, seed=0) -> list[tuple[Dataset, Dataset]]:
    """Stratified k folds: each class is shuffled and dealt round-robin."""
    groups = _by_class(dataset)
    for c, members in groups.items():
        if len(members) < k:
            raise DataError(f"class {c} has {len(members)} clips, fewer than k={k}")
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(dataset), dtype=np.int64)
    for c in (0, 1):
        members = rng.permutation(groups[c])
        fold_of[members] = np.arange(len(members)) % k
    out = []
    for f in range(k):
        test = np.flatnonzero(fold_of == f)
        train = np.flatnonzero(fold_of != f)
        out.append((dataset.subset(train), dataset.subset(test)))
    return out


# ---------------------------------------------------------------- augmentation


def _bilinear_rotate(image: np.ndarray, angle_deg: float) -> np.ndarray:
    C, H, W = image.shape
    theta = math.radians(angle_deg)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    # inverse mapping: output pixel -> source location
    cos, sin = math.cos(theta), math.sin(theta)
    sx = cos * (xx - cx) + sin * (yy - cy) + cx
    sy = -sin * (xx - cx) + cos * (yy - cy) + cy
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    out = np.zeros_like(image)
    for dy, dx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                      (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + dy, x0 + dx
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W) & (w != 0)
        vals = np.zeros_like(image)
        vals[:, valid] = image[:, yi[valid], xi[valid]]
        out += vals * w
    return out


def augment_image(image: np.ndarray, seed=0, crop_area: float = 0.875, max_angle: float = 15.0,
                  angle: float | None = None, crop_offset: tuple[int, int] | None = None) -> np.ndarray:
    """Random crop (``crop_area`` of the area, resized back with nearest
    neighbour) followed by a bilinear rotation in ``[-max_angle, max_angle]``
    degrees with zero fill. ``angle``/``crop_offset`` override the draws."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[1] != image.shape[2]:
        raise DataError(f"augment_image expects [C, S, S], got {image.shape}")
    rng = np.random.default_rng(seed)
    S = image.shape[1]
    side = max(1, min(S, int(round(S * math.sqrt(crop_area)))))
    if crop_offset is None:
        oy, ox = rng.integers(0, S - side + 1, size=2)
    else:
        oy, ox = crop_offset
    crop = image[:, oy:oy + side, ox:ox + side]
    src = np.minimum((np.arange(S) * side) // S, side - 1)
    resized = crop[:, src][:, :, src]
    if angle is None:
        angle = rng.uniform(-max_angle, max_angle)
    return _bilinear_rotate(resized, angle)
