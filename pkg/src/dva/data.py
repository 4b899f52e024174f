"""Dataset ingestion, ground-truth construction and map file I/O.

Manifest format (UTF-8, one record per line, ``#`` starts a comment)::

    split<TAB>image_path<TAB>fixation_path[<TAB>gt_path]

Relative paths resolve against the manifest's directory.  Fixations are
either a grayscale image (non-zero pixel = fixation) or a text file of
``x y`` pixel coordinates (0-based, one per line, comma or whitespace
separated).
"""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InputError
from .tensor import make_rng
from .weights import atomic_write_bytes

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_MEANS = (0.485, 0.456, 0.406)
_COORD_SUFFIXES = {".txt", ".csv", ".tsv"}


@dataclass(frozen=True)
class Record:
    split: str
    image_path: Path
    fixation_path: Path
    gt_path: Path | None = None

    @property
    def image_id(self) -> str:
        return self.image_path.stem


@dataclass
class DatasetManifest:
    records: list[Record]
    path: Path | None = None

    def split(self, name: str) -> list[Record]:
        return [r for r in self.records if r.split == name]

    def __len__(self) -> int:
        return len(self.records)


@dataclass
class PrepareConfig:
    max_side: int = 256
    multiple: int = 16
    blur_sigma: float | None = None  # None -> max_side / 32
    channel_means: tuple = DEFAULT_MEANS

    def sigma(self) -> float:
        return self.blur_sigma if self.blur_sigma is not None else self.max_side / 32


@dataclass
class PreparedSample:
    image: np.ndarray  # (1, 3, h, w), mean-centred
    fixation: np.ndarray  # (h, w) uint8 in {0, 1}
    gt: np.ndarray  # (h, w) in [0, 1], max 1
    original_dims: tuple
    image_id: str = ""
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# manifest


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent
    records, missing = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) not in (3, 4):
            raise InputError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields, got {len(cols)}")
        split = cols[0].strip()
        if split not in SPLITS:
            raise InputError(f"{path}:{lineno}: unknown split {split!r}")
        paths = [base / c.strip() for c in cols[1:]]
        missing.extend(str(p) for p in paths if not p.exists())
        records.append(Record(split, paths[0], paths[1], paths[2] if len(paths) == 3 else None))
    if not records:
        raise InputError(f"{path}: empty manifest")
    if missing:
        raise InputError(f"{path}: missing files: {', '.join(missing)}")
    return DatasetManifest(records, path)


def write_manifest(path, records) -> None:
    path = Path(path)
    lines = []
    for r in records:
        cols = [r.split, _rel(r.image_path, path.parent), _rel(r.fixation_path, path.parent)]
        if r.gt_path is not None:
            cols.append(_rel(r.gt_path, path.parent))
        lines.append("\t".join(cols))
    atomic_write_bytes(path, ("\n".join(lines) + "\n").encode("utf-8"))


def _rel(p: Path, base: Path) -> str:
    try:
        return str(Path(p).relative_to(base))
    except ValueError:
        return str(p)


# ---------------------------------------------------------------------------
# images and maps


def load_image(path) -> np.ndarray:
    """8-bit RGB image as a ``(h, w, 3)`` uint8 array."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc


def load_fixations(path, dims) -> np.ndarray:
    """Binary fixation map at ``dims`` = (h, w) of the source image."""
    path = Path(path)
    h, w = dims
    if path.suffix.lower() in _COORD_SUFFIXES:
        fix = np.zeros((h, w), dtype=np.uint8)
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                x, y = (float(v) for v in line.replace(",", " ").split()[:2])
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad fixation coordinate line") from None
            r, c = int(round(y)), int(round(x))
            if 0 <= r < h and 0 <= c < w:
                fix[r, c] = 1
    else:
        arr = _read_gray_raw(path)[0]
        if arr.shape != (h, w):
            arr = rescale_fixations((arr > 0).astype(np.uint8), (h, w))
        fix = (arr > 0).astype(np.uint8)
    if not fix.any():
        raise InputError(f"{path}: fixation map has zero fixations")
    return fix


def rescale_fixations(fix: np.ndarray, dims) -> np.ndarray:
    """Map fixation pixels to a new grid; collisions merge into one fixation."""
    h, w = fix.shape
    nh, nw = dims
    rows, cols = np.nonzero(fix)
    r = np.minimum(np.floor((rows + 0.5) * nh / h).astype(int), nh - 1)
    c = np.minimum(np.floor((cols + 0.5) * nw / w).astype(int), nw - 1)
    out = np.zeros((nh, nw), dtype=np.uint8)
    out[r, c] = 1
    return out


def gaussian_gt(fix: np.ndarray, sigma: float) -> np.ndarray:
    """Fixations blurred by an untruncated isotropic Gaussian, peak-normalised.

    Zero padding outside the image; computed as ``Ky @ Q @ Kx.T`` with dense
    Gaussian matrices so a single fixation yields the closed form exactly.
    """
    h, w = fix.shape
    ky = np.exp(-((np.arange(h)[:, None] - np.arange(h)[None, :]) ** 2) / (2 * sigma**2))
    kx = np.exp(-((np.arange(w)[:, None] - np.arange(w)[None, :]) ** 2) / (2 * sigma**2))
    g = ky @ fix.astype(np.float64) @ kx.T
    peak = g.max()
    if peak <= 0:
        raise InputError("cannot build ground truth from an empty fixation map")
    return g / peak


def resize_map(m: np.ndarray, dims) -> np.ndarray:
    """Bilinear resize of a float map to ``dims`` = (h, w)."""
    if m.shape == tuple(dims):
        return np.array(m, dtype=np.float64)
    im = Image.fromarray(np.asarray(m, dtype=np.float32), mode="F")
    return np.asarray(im.resize((dims[1], dims[0]), Image.BILINEAR), dtype=np.float64)


def prepared_dims(h: int, w: int, max_side: int = 256, multiple: int = 16) -> tuple[int, int]:
    big = max(h, w)
    nh = max(multiple, (h * max_side // big) // multiple * multiple)
    nw = max(multiple, (w * max_side // big) // multiple * multiple)
    return nh, nw


def normalize_image(rgb: np.ndarray, means=DEFAULT_MEANS) -> np.ndarray:
    x = rgb.astype(np.float64) / 255.0 - np.asarray(means, dtype=np.float64)
    return np.ascontiguousarray(x.transpose(2, 0, 1)[None])


def prepare_image(path, config: PrepareConfig) -> tuple[np.ndarray, tuple]:
    rgb = load_image(path)
    h, w = rgb.shape[:2]
    nh, nw = prepared_dims(h, w, config.max_side, config.multiple)
    if (nh, nw) != (h, w):
        rgb = np.asarray(Image.fromarray(rgb).resize((nw, nh), Image.BILINEAR))
    return normalize_image(rgb, config.channel_means), (h, w)


def prepare(record: Record, config: PrepareConfig | None = None) -> PreparedSample:
    config = config or PrepareConfig()
    image, (h, w) = prepare_image(record.image_path, config)
    nh, nw = image.shape[2:]
    fix = rescale_fixations(load_fixations(record.fixation_path, (h, w)), (nh, nw))
    if record.gt_path is not None:
        g = resize_map(read_saliency(record.gt_path), (nh, nw))
        g = np.clip(g, 0.0, None)
        if g.max() <= 0:
            raise InputError(f"{record.gt_path}: ground-truth map is all zero")
        g = g / g.max()
    else:
        g = gaussian_gt(fix, config.sigma())
    return PreparedSample(image, fix, g, (h, w), record.image_id)


def load_original_gt(record: Record, sigma_fraction: float = 1 / 32):
    """Fixations and continuous ground truth at the source image resolution."""
    with Image.open(record.image_path) as im:
        w, h = im.size
    fix = load_fixations(record.fixation_path, (h, w))
    if record.gt_path is not None:
        g = resize_map(read_saliency(record.gt_path), (h, w))
    else:
        g = gaussian_gt(fix, max(h, w) * sigma_fraction)
    return fix, g


# ---------------------------------------------------------------------------
# saliency map files


def _read_gray_raw(path):
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode == "L" or mode == "1":
                return np.asarray(im.convert("L"), dtype=np.float64), 255.0
            if mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.asarray(im, dtype=np.float64)
                return arr, 65535.0
    except OSError as exc:
        raise InputError(f"cannot read map {path}: {exc}") from exc
    raise InputError(f"{path}: expected grayscale image, got mode {mode}")


def read_saliency(path) -> np.ndarray:
    arr, scale = _read_gray_raw(path)
    return arr / scale


def quantize(m: np.ndarray, bits: int = 16) -> np.ndarray:
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    top = 2**bits - 1
    m = np.asarray(m, dtype=np.float64)
    if m.size and (not np.all(np.isfinite(m)) or m.min() < 0 or m.max() > 1):
        raise InputError("saliency map values must be finite and in [0, 1]")
    return np.round(m * top).astype(np.uint16 if bits == 16 else np.uint8)


def encode_saliency(m: np.ndarray, fmt: str = "png", bits: int = 16) -> bytes:
    q = quantize(m, bits)
    if fmt == "pgm":
        h, w = q.shape
        header = f"P5\n{w} {h}\n{2**bits - 1}\n".encode("ascii")
        return header + q.astype(">u2" if bits == 16 else "u1").tobytes()
    buf = io.BytesIO()
    Image.fromarray(q).save(buf, format="PNG")
    return buf.getvalue()


def write_saliency(m: np.ndarray, path, bits: int = 16) -> None:
    path = Path(path)
    fmt = "pgm" if path.suffix.lower() == ".pgm" else "png"
    atomic_write_bytes(path, encode_saliency(m, fmt, bits))


def write_rgb(rgb: np.ndarray, path) -> None:
    buf = io.BytesIO()
    Image.fromarray(rgb.astype(np.uint8), mode="RGB").save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


# ---------------------------------------------------------------------------
# synthetic data


def synth_images(n: int, dims, blob_count_range=(1, 3), seed: int = 0):
    """Yield ``(rgb uint8 (h, w, 3), [(row, col), ...])`` pairs.

    Each image is low-contrast grey noise with 1..k high-contrast coloured
    Gaussian blobs; the listed points are the blob centres.
    """
    h, w = dims
    lo, hi = blob_count_range
    radius = max(2.0, min(h, w) / 12)
    yy, xx = np.mgrid[:h, :w]
    for i in range(n):
        rng = make_rng(seed, 2, i)
        img = 0.45 + 0.05 * rng.standard_normal((h, w, 3))
        centres = []
        for _ in range(int(rng.integers(lo, hi + 1))):
            m = int(radius)
            r = int(rng.integers(m, h - m))
            c = int(rng.integers(m, w - m))
            colour = rng.uniform(0.0, 1.0, size=3)
            colour[rng.integers(3)] = 1.0
            blob = np.exp(-((yy - r) ** 2 + (xx - c) ** 2) / (2 * radius**2))[..., None]
            img = img * (1 - blob) + colour * blob
            centres.append((r, c))
        yield (np.clip(img, 0, 1) * 255).round().astype(np.uint8), centres


def synth_dataset(out_dir, n: int = 8, dims=(64, 64), blob_count_range=(1, 3), seed: int = 0,
                  sigma: float | None = None, val_count: int = 0) -> DatasetManifest:
    """Write a synthetic dataset plus ``manifest.tsv`` under ``out_dir``."""
    h, w = dims
    if h % 16 or w % 16:
        raise InputError(f"synthetic dims must be multiples of 16, got {dims}")
    out = Path(out_dir)
    sigma = sigma if sigma is not None else max(h, w) / 32
    records = []
    for i, (rgb, centres) in enumerate(synth_images(n, dims, blob_count_range, seed)):
        stem = f"synth_{i:04d}"
        fix = np.zeros((h, w), dtype=np.uint8)
        for r, c in centres:
            fix[r, c] = 1
        paths = [out / "images" / f"{stem}.png", out / "fixations" / f"{stem}.png", out / "maps" / f"{stem}.png"]
        write_rgb(rgb, paths[0])
        write_saliency(fix.astype(np.float64), paths[1], bits=8)
        write_saliency(gaussian_gt(fix, sigma), paths[2])
        split = "val" if i >= n - val_count else "train"
        records.append(Record(split, *paths))
    write_manifest(out / "manifest.tsv", records)
    return DatasetManifest(records, out / "manifest.tsv")
