"""Synthetic longitudinal cohorts, PGM/manifest I/O, and patient-wise folds.

Each patient contributes a (Prior, Current) exam pair. Priors are always
lesion-free; cancer Currents add a bright Gaussian blob on top of the shared
background texture and benign temporal drift, so the pixel (and, after
training, feature) distance between exams is larger for cancer pairs by
construction.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ExamPair",
    "Manifest",
    "SyntheticConfig",
    "generate_synthetic_cohort",
    "load_manifest",
    "normalize_image",
    "denormalize_image",
    "orient_flip",
    "read_pgm",
    "write_pgm",
    "save_cohort",
    "split_folds",
]

MANIFEST_HEADER = ["patient_id", "prior_path", "current_path", "label", "side"]


@dataclass
class ExamPair:
    """One patient's longitudinal record; images are (c, h, w) in [-1, 1]."""

    patient_id: str
    prior: np.ndarray
    current: np.ndarray
    label: int  # 0=control, 1=cancer
    side: str  # "L" or "R"


@dataclass
class SyntheticConfig:
    """Knobs for the cohort generator.

    Amplitudes must keep pixels inside [-1, 1]:
    |base| + background + drift + max lesion intensity <= 1. The lesion must
    be brighter than the background texture so the classification signal is
    real.
    """

    n_cancer: int = 200
    n_control: int = 200
    image_shape: tuple = (1, 32, 32)
    lesion_intensity: tuple = (0.15, 0.25)
    lesion_radius: tuple = (2.0, 4.0)
    background_scale: float = 0.12
    drift_scale: float = 0.05
    seed: int = 0

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        self.lesion_intensity = tuple(float(v) for v in self.lesion_intensity)
        self.lesion_radius = tuple(float(v) for v in self.lesion_radius)
        if self.n_cancer < 1 or self.n_control < 1:
            raise ValueError("need at least one cancer and one control patient")
        if len(self.image_shape) != 3 or self.image_shape[0] != 1:
            raise ValueError(f"image_shape must be (1, h, w), got {self.image_shape}")
        lo, hi = self.lesion_intensity
        if not 0 < lo <= hi:
            raise ValueError(f"bad lesion intensity range {self.lesion_intensity}")
        if lo <= self.background_scale:
            raise ValueError(
                f"lesion intensity {lo} must exceed background texture "
                f"amplitude {self.background_scale}"
            )
        rlo, rhi = self.lesion_radius
        if not 0 < rlo <= rhi:
            raise ValueError(f"bad lesion radius range {self.lesion_radius}")
        total = self.background_scale + self.drift_scale + hi
        if total > 1.0:
            raise ValueError(
                f"background + drift + lesion amplitudes sum to {total:.3f} > 1; "
                "pixels would leave [-1, 1]"
            )
        if self.drift_scale < 0 or self.background_scale < 0:
            raise ValueError("amplitudes must be nonnegative")


def _smooth_field(rng, h, w, amplitude, coarse=5):
    """Low-frequency random field with max |value| == amplitude."""
    grid = rng.normal(0.0, 1.0, (coarse, coarse))
    ys = np.linspace(0, coarse - 1, h)
    xs = np.linspace(0, coarse - 1, w)
    y0 = np.clip(ys.astype(int), 0, coarse - 2)
    x0 = np.clip(xs.astype(int), 0, coarse - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    fld = (g00 * (1 - fy) * (1 - fx) + g01 * (1 - fy) * fx
           + g10 * fy * (1 - fx) + g11 * fy * fx)
    peak = np.abs(fld).max()
    if peak > 0 and amplitude > 0:
        fld *= amplitude / peak
    else:
        fld[:] = 0.0
    return fld


def _lesion_blob(rng, h, w, intensity_range, radius_range):
    amp = rng.uniform(*intensity_range)
    radius = rng.uniform(*radius_range)
    margin = int(np.ceil(radius))
    cy = rng.uniform(margin, h - 1 - margin)
    cx = rng.uniform(margin, w - 1 - margin)
    yy, xx = np.mgrid[0:h, 0:w]
    return amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * radius**2))


def generate_synthetic_cohort(cfg: SyntheticConfig) -> list:
    """Deterministically generate a case-control cohort of exam pairs."""
    _, h, w = cfg.image_shape
    pairs = []
    total = cfg.n_cancer + cfg.n_control
    for i in range(total):
        label = 1 if i < cfg.n_cancer else 0
        rng = np.random.default_rng([int(cfg.seed), 11, i])
        background = _smooth_field(rng, h, w, cfg.background_scale)
        drift = _smooth_field(rng, h, w, cfg.drift_scale)
        prior = background
        current = background + drift
        if label == 1:
            current = current + _lesion_blob(rng, h, w, cfg.lesion_intensity, cfg.lesion_radius)
        side = "R" if rng.uniform() < 0.5 else "L"
        pairs.append(ExamPair(
            patient_id=f"P{i:04d}",
            prior=prior[None].copy(),
            current=current[None].copy(),
            label=label,
            side=side,
        ))
    return pairs


def normalize_image(raw) -> np.ndarray:
    """Map 16-bit samples [0, 65535] linearly onto [-1, 1]."""
    return 2.0 * np.asarray(raw, dtype=np.float64) / 65535.0 - 1.0


def denormalize_image(img) -> np.ndarray:
    """Inverse of :func:`normalize_image`, rounded to uint16."""
    raw = np.rint((np.asarray(img, dtype=np.float64) + 1.0) / 2.0 * 65535.0)
    return np.clip(raw, 0, 65535).astype(np.uint16)


def orient_flip(image: np.ndarray, side: str) -> np.ndarray:
    """Mirror right-side exams horizontally so every breast faces the same way."""
    if side not in ("L", "R"):
        raise ValueError(f"side must be 'L' or 'R', got {side!r}")
    if side == "L":
        return image
    return np.ascontiguousarray(image[..., ::-1])


def write_pgm(path, raw: np.ndarray):
    """Write a 2D uint16 array as binary PGM (P5, maxval 65535, big-endian)."""
    raw = np.asarray(raw)
    if raw.ndim != 2 or raw.dtype != np.uint16:
        raise ValueError(f"write_pgm needs a 2D uint16 array, got {raw.dtype} {raw.shape}")
    h, w = raw.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(raw.astype(">u2").tobytes())


class _PgmReader:
    """Tracks byte offsets so header errors can name the exact position."""

    def __init__(self, path):
        self.path = str(path)
        with open(path, "rb") as fh:
            self.buf = fh.read()
        self.pos = 0

    def error(self, msg):
        raise ValueError(f"{self.path}: {msg} at byte {self.pos}")

    def token(self) -> bytes:
        # skip whitespace and '#' comment lines per the PGM convention
        while self.pos < len(self.buf):
            c = self.buf[self.pos : self.pos + 1]
            if c.isspace():
                self.pos += 1
            elif c == b"#":
                while self.pos < len(self.buf) and self.buf[self.pos : self.pos + 1] != b"\n":
                    self.pos += 1
            else:
                break
        start = self.pos
        while self.pos < len(self.buf) and not self.buf[self.pos : self.pos + 1].isspace():
            self.pos += 1
        if start == self.pos:
            self.error("unexpected end of header")
        return self.buf[start : self.pos]


def read_pgm(path) -> np.ndarray:
    """Read a 16-bit binary PGM into a 2D uint16 array."""
    r = _PgmReader(path)
    if r.token() != b"P5":
        r.pos = 0
        r.error("not a binary PGM (expected magic 'P5')")
    dims = []
    for name in ("width", "height", "maxval"):
        tok = r.token()
        try:
            dims.append(int(tok))
        except ValueError:
            r.error(f"invalid {name} {tok!r}")
    w, h, maxval = dims
    if w <= 0 or h <= 0:
        r.error(f"invalid dimensions {w}x{h}")
    if maxval != 65535:
        r.error(f"expected 16-bit maxval 65535, got {maxval}")
    r.pos += 1  # single whitespace after maxval
    expected = w * h * 2
    data = r.buf[r.pos : r.pos + expected]
    if len(data) != expected:
        r.error(f"expected {expected} sample bytes, found {len(data)}")
    return np.frombuffer(data, dtype=">u2").reshape(h, w).astype(np.uint16)


def save_cohort(pairs, out_dir) -> Path:
    """Write a cohort as PGM files plus a manifest CSV; returns the manifest path.

    Images are stored in capture orientation: right-side exams are mirrored
    back before writing, so loading (which re-applies the orientation flip)
    round-trips.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.csv"
    rows = []
    for pair in pairs:
        names = {}
        for role, img in (("prior", pair.prior), ("current", pair.current)):
            stored = orient_flip(img, pair.side)  # flip is an involution
            fname = f"{pair.patient_id}_{role}.pgm"
            write_pgm(img_dir / fname, denormalize_image(stored[0]))
            names[role] = f"images/{fname}"
        rows.append([pair.patient_id, names["prior"], names["current"],
                     str(pair.label), pair.side])
    with open(manifest_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return manifest_path


@dataclass
class Manifest:
    """Parsed manifest rows prior to image loading."""

    rows: list = field(default_factory=list)


def load_manifest(path) -> list:
    """Load exam pairs listed in a manifest CSV.

    Paths are resolved relative to the manifest location; images are
    normalized to [-1, 1] and right-side exams flipped to the canonical
    orientation. Malformed rows and missing files are reported with their
    row numbers.
    """
    path = Path(path)
    base = path.parent
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty manifest (missing header)") from None
        if header != MANIFEST_HEADER:
            raise ValueError(f"{path}: bad header {header!r}, expected {MANIFEST_HEADER!r}")
        rows = list(reader)

    seen = {}
    problems = []
    pairs = []
    for lineno, row in enumerate(rows, start=2):
        if len(row) != 5:
            problems.append(f"row {lineno}: expected 5 fields, got {len(row)}")
            continue
        pid, prior_rel, current_rel, label_s, side = row
        if pid in seen:
            raise ValueError(f"{path}: duplicate patient_id {pid!r} "
                             f"(rows {seen[pid]} and {lineno})")
        seen[pid] = lineno
        if label_s not in ("0", "1"):
            problems.append(f"row {lineno}: label must be 0 or 1, got {label_s!r}")
            continue
        if side not in ("L", "R"):
            problems.append(f"row {lineno}: side must be L or R, got {side!r}")
            continue
        missing = [rel for rel in (prior_rel, current_rel) if not (base / rel).is_file()]
        if missing:
            problems.append(f"row {lineno}: missing file(s) {missing}")
            continue
        prior = normalize_image(read_pgm(base / prior_rel))[None]
        current = normalize_image(read_pgm(base / current_rel))[None]
        if prior.shape != current.shape:
            problems.append(f"row {lineno}: prior shape {prior.shape} != "
                            f"current shape {current.shape}")
            continue
        pairs.append(ExamPair(
            patient_id=pid,
            prior=orient_flip(prior, side),
            current=orient_flip(current, side),
            label=int(label_s),
            side=side,
        ))
    if problems:
        raise ValueError(f"{path}: " + "; ".join(problems))
    return pairs


def split_folds(pairs, k: int, seed: int) -> list:
    """Patient-wise stratified k-fold split.

    Every patient lands in exactly one test fold, fold sizes differ by at
    most one, and each class is spread across folds round-robin after a
    seeded shuffle.
    """
    n = len(pairs)
    if k < 2 or k > n:
        raise ValueError(f"k must lie in [2, {n}], got {k}")
    rng = np.random.default_rng([int(seed), 17])
    by_class = {0: [], 1: []}
    for idx, pair in enumerate(pairs):
        by_class[int(pair.label)].append(idx)
    fold_of = np.empty(n, dtype=int)
    slot = 0
    for label in (1, 0):  # deal cancer first, controls continue the round-robin
        order = [by_class[label][j] for j in rng.permutation(len(by_class[label]))]
        for idx in order:
            fold_of[idx] = slot % k
            slot += 1
    folds = []
    for f in range(k):
        test = [pairs[i] for i in range(n) if fold_of[i] == f]
        train = [pairs[i] for i in range(n) if fold_of[i] != f]
        folds.append((train, test))
    return folds
