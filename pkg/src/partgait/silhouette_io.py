"""Silhouette frames: normalization, sequence loading, manifests and occlusion masks."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import EmptySilhouette, ManifestError, MissingFrames, ShapeMismatch

FRAME_SIZE = 64
SPLITS = ("Training", "Gallery", "Probe")
MANIFEST_FIELDS = ("path", "subject", "view", "condition", "seq_index", "split")
FRAME_SUFFIXES = (".png", ".pgm")


@dataclass(frozen=True, eq=False)
class SilhouetteFrame:
    pixels: np.ndarray  # (64, 64) float, background 0 / body 1
    source_dims: tuple = (FRAME_SIZE, FRAME_SIZE)


@dataclass(eq=False)
class SilhouetteSequence:
    frames: list
    subject_id: str
    view: float
    condition: str = "NM"
    sequence_index: int = 1

    def __post_init__(self):
        if len(self.frames) < 1:
            raise MissingFrames("a sequence needs at least one frame")
        shapes = {f.pixels.shape for f in self.frames}
        if len(shapes) != 1:
            raise ShapeMismatch(f"frames of one sequence differ in size: {sorted(shapes)}")

    @property
    def key(self):
        return (self.subject_id, self.view, self.condition, self.sequence_index)

    def __len__(self):
        return len(self.frames)

    def array(self):
        """Frames stacked as a ``(T, 64, 64)`` array."""
        return np.stack([f.pixels for f in self.frames])

    def with_frames(self, frames):
        return SilhouetteSequence(list(frames), self.subject_id, self.view, self.condition,
                                  self.sequence_index)


def _to_unit(raw):
    arr = np.asarray(raw)
    if arr.ndim == 3:
        arr = arr[..., 0] if arr.shape[-1] in (1, 2) else arr[..., :3].mean(axis=-1)
    if arr.ndim != 2:
        raise ShapeMismatch(f"expected a single-channel image, got shape {arr.shape}")
    if np.issubdtype(arr.dtype, np.integer):
        return arr.astype(np.float64) / np.iinfo(arr.dtype).max
    if arr.dtype == bool:
        return arr.astype(np.float64)
    return np.clip(arr.astype(np.float64), 0.0, 1.0)


def _resize_bilinear(img, size):
    if img.shape == (size, size):
        return img
    pil = Image.fromarray(img.astype(np.float32), mode="F")
    return np.asarray(pil.resize((size, size), Image.BILINEAR), dtype=np.float64)


def preprocess_frame(raw, out_size=FRAME_SIZE):
    """Crop, center and resize one silhouette to an ``out_size`` square.

    The body is cropped tightly between its top and bottom foreground rows,
    centered horizontally on its pixel-centroid column inside a square of the
    crop height (background-padded where the square leaves the image), resized
    bilinearly and binarized at 0.5.
    """
    img = _to_unit(raw)
    rows = np.flatnonzero(img.any(axis=1))
    if rows.size == 0:
        raise EmptySilhouette()
    top, bottom = rows[0], rows[-1] + 1
    crop = img[top:bottom]
    side = crop.shape[0]

    cols = np.arange(crop.shape[1])
    mass = crop.sum(axis=0)
    cx = float((mass * cols).sum() / mass.sum())
    left = int(np.floor(cx - (side - 1) / 2.0 + 0.5))

    square = np.zeros((side, side), dtype=np.float64)
    src_lo, src_hi = max(left, 0), min(left + side, crop.shape[1])
    if src_hi > src_lo:
        square[:, src_lo - left : src_hi - left] = crop[:, src_lo:src_hi]

    resized = _resize_bilinear(square, out_size)
    pixels = (resized >= 0.5).astype(np.float64)
    return SilhouetteFrame(pixels=pixels, source_dims=tuple(img.shape))


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im)


def _numeric_key(path):
    nums = re.findall(r"\d+", path.stem)
    return (int(nums[-1]) if nums else float("inf"), path.name)


def list_frame_files(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingFrames(f"sequence directory not found: {directory}")
    files = [p for p in directory.iterdir() if p.suffix.lower() in FRAME_SUFFIXES]
    if not files:
        raise MissingFrames(f"no PNG/PGM frames in {directory}")
    return sorted(files, key=_numeric_key)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    subject: str
    view: float
    condition: str
    seq_index: int
    split: str = ""

    @property
    def key(self):
        return (self.subject, self.view, self.condition, self.seq_index)


@dataclass
class DatasetManifest:
    entries: list = field(default_factory=list)
    root: Path = None

    def resolve(self, entry):
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = Path(self.root) / p
        return p

    def by_split(self, split):
        return [e for e in self.entries if e.split == split]

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def format_view(view):
    v = float(view)
    return str(int(v)) if v.is_integer() else repr(v)


def validate_entries(entries, require_split=False, row_numbers=None):
    """Return (row_number, reason) problems; row numbers count the header as row 1."""
    problems = []
    seen = {}
    row_numbers = range(2, len(entries) + 2) if row_numbers is None else row_numbers
    for n, e in zip(row_numbers, entries):
        if e.key in seen:
            problems.append((n, f"duplicate key {e.key} (first at row {seen[e.key]})"))
        else:
            seen[e.key] = n
        if e.split and e.split not in SPLITS:
            problems.append((n, f"unknown split {e.split!r}"))
        elif require_split and not e.split:
            problems.append((n, "missing split tag"))
    return problems


def read_manifest(path, check_paths=True):
    """Parse a manifest CSV; raises :class:`ManifestError` listing bad rows."""
    path = Path(path)
    manifest = DatasetManifest(root=path.parent)
    problems = []
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(h.strip() for h in (reader.fieldnames or ()))
        missing = [f for f in MANIFEST_FIELDS if f not in header]
        if missing:
            raise ManifestError([(1, f"missing columns {missing}")])
        for n, row in enumerate(reader, start=2):
            try:
                entry = ManifestEntry(
                    path=row["path"].strip(),
                    subject=row["subject"].strip(),
                    view=float(row["view"]),
                    condition=row["condition"].strip(),
                    seq_index=int(row["seq_index"]),
                    split=(row["split"] or "").strip(),
                )
            except (TypeError, ValueError) as exc:
                problems.append((n, f"unparseable row: {exc}"))
                continue
            if not entry.subject or not entry.path:
                problems.append((n, "empty path or subject"))
                continue
            manifest.entries.append(entry)
            rows.append(n)
            if check_paths and not manifest.resolve(entry).is_dir():
                problems.append((n, f"missing sequence directory {entry.path}"))
    problems.extend(validate_entries(manifest.entries, row_numbers=rows))
    if problems:
        raise ManifestError(sorted(problems))
    return manifest


def write_manifest(path, entries):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_FIELDS)
        for e in entries:
            w.writerow([e.path, e.subject, format_view(e.view), e.condition, e.seq_index, e.split])


def load_sequence(entry, root=None, out_size=FRAME_SIZE):
    """Load and normalize every frame of one manifest entry."""
    directory = Path(entry.path)
    if root is not None and not directory.is_absolute():
        directory = Path(root) / directory
    frames = []
    for t, f in enumerate(list_frame_files(directory)):
        try:
            frames.append(preprocess_frame(read_image(f), out_size))
        except EmptySilhouette:
            raise EmptySilhouette(f"empty silhouette in {f}", frame_index=t) from None
    return SilhouetteSequence(frames, entry.subject, entry.view, entry.condition, entry.seq_index)


def load_manifest_sequences(manifest, entries=None):
    entries = manifest.entries if entries is None else entries
    return [load_sequence(e, manifest.root) for e in entries]


# --------------------------------------------------------------------------
# occlusion


@dataclass(frozen=True)
class OcclusionSpec:
    """Background-colored band: rows (``axis=0``) or columns (``axis=1``) in [lo, hi)."""

    kind: str
    k: int
    lo: int
    hi: int
    axis: int

    @property
    def band(self):
        return (self.lo, self.hi)

    @property
    def name(self):
        return self.kind if self.kind == "none" else f"{self.kind}_{self.k}"

    @classmethod
    def small_horizontal(cls, k):
        if k not in (1, 2, 3, 4):
            raise ValueError("small_horizontal k must be in 1..4")
        return cls("small_horizontal", k, 16 * (k - 1), 16 * k, 0)

    @classmethod
    def large_horizontal(cls, k):
        if k not in (1, 2):
            raise ValueError("large_horizontal k must be 1 or 2")
        return cls("large_horizontal", k, 32 * (k - 1), 32 * k, 0)

    @classmethod
    def large_vertical(cls, k):
        if k not in (1, 2):
            raise ValueError("large_vertical k must be 1 or 2")
        return cls("large_vertical", k, 32 * (k - 1), 32 * k, 1)

    @classmethod
    def null(cls):
        return cls("none", 0, 0, 0, 0)

    @classmethod
    def parse(cls, text):
        """Inverse of :attr:`name`, e.g. ``"small_horizontal_3"``."""
        if text == "none":
            return cls.null()
        kind, _, k = text.rpartition("_")
        makers = {"small_horizontal": cls.small_horizontal, "large_horizontal": cls.large_horizontal,
                  "large_vertical": cls.large_vertical}
        if kind not in makers or not k.isdigit():
            raise ValueError(f"unknown occlusion spec {text!r}")
        return makers[kind](int(k))


def enumerate_occlusion_specs():
    """The eight occlusion variants, in reporting order."""
    return [
        OcclusionSpec.large_horizontal(1),
        OcclusionSpec.large_horizontal(2),
        OcclusionSpec.small_horizontal(1),
        OcclusionSpec.small_horizontal(2),
        OcclusionSpec.small_horizontal(3),
        OcclusionSpec.small_horizontal(4),
        OcclusionSpec.large_vertical(1),
        OcclusionSpec.large_vertical(2),
    ]


def apply_occlusion(frame, spec):
    pixels = frame.pixels if isinstance(frame, SilhouetteFrame) else np.asarray(frame)
    if pixels.shape != (FRAME_SIZE, FRAME_SIZE):
        raise ShapeMismatch(f"occlusion expects a 64x64 frame, got {pixels.shape}")
    out = pixels.copy()
    if spec.axis == 0:
        out[spec.lo : spec.hi, :] = 0
    else:
        out[:, spec.lo : spec.hi] = 0
    if isinstance(frame, SilhouetteFrame):
        return SilhouetteFrame(out, frame.source_dims)
    return out


def occlude_sequence(seq, spec):
    return seq.with_frames(apply_occlusion(f, spec) for f in seq.frames)
