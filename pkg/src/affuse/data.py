"""CIFAR binary ingestion, synthetic multi-scale scenes, the FSDS container, and metrics."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .tensor import InputError

__all__ = [
    "FormatError",
    "LabeledImage",
    "Dataset",
    "SyntheticSceneConfig",
    "SHAPES",
    "CIFAR_VARIANTS",
    "load_cifar_binary",
    "load_cifar_dataset",
    "encode_cifar_record",
    "gen_synthetic_classification",
    "gen_synthetic_segmentation",
    "shape_mask",
    "shape_area_fraction",
    "save_container",
    "load_container",
    "write_blobs",
    "read_blobs",
    "metric_accuracy",
    "metric_miou",
]

MAGIC = b"FSDS"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    """Malformed binary input."""


@dataclass
class LabeledImage:
    pixels: np.ndarray  # 1 x 3 x H x W in [0, 1]
    label: int
    mask: Optional[np.ndarray] = None


@dataclass
class Dataset:
    """Images stored as bytes (``N x 3 x H x W`` uint8) with labels and optional masks."""

    images: np.ndarray
    labels: np.ndarray
    masks: Optional[np.ndarray] = None
    num_classes: int = 0

    def __len__(self) -> int:
        return len(self.labels)

    def pixels(self, dtype=np.float64) -> np.ndarray:
        return self.images.astype(dtype) / 255.0

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx],
                       None if self.masks is None else self.masks[idx], self.num_classes)

    def items(self) -> List[LabeledImage]:
        px = self.pixels()
        return [LabeledImage(px[i:i + 1], int(self.labels[i]),
                             None if self.masks is None else self.masks[i])
                for i in range(len(self))]


# ---------------------------------------------------------------------------
# CIFAR

CIFAR_VARIANTS = {
    # variant: (label byte count, which label byte, number of classes)
    "cifar10": (1, 0, 10),
    "cifar100_coarse": (2, 0, 20),
    "cifar100_fine": (2, 1, 100),
}
_CIFAR_PIXELS = 3 * 32 * 32


def _cifar_layout(variant: str):
    try:
        return CIFAR_VARIANTS[variant]
    except KeyError:
        raise InputError(f"unknown CIFAR variant {variant!r}; expected one of {sorted(CIFAR_VARIANTS)}")


def _decode_cifar(raw: bytes, variant: str) -> Dataset:
    n_label, which, n_classes = _cifar_layout(variant)
    rec = n_label + _CIFAR_PIXELS
    if len(raw) % rec:
        whole = len(raw) // rec
        raise FormatError(
            f"truncated CIFAR file: {len(raw)} bytes is not a multiple of the {rec}-byte record; "
            f"partial record starts at byte offset {whole * rec}")
    buf = np.frombuffer(raw, dtype=np.uint8).reshape(-1, rec)
    labels = buf[:, which].astype(np.int64)
    bad = np.nonzero(labels >= n_classes)[0]
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"label {labels[i]} >= {n_classes} in record {i} (byte offset {i * rec + which})")
    images = buf[:, n_label:].reshape(-1, 3, 32, 32).copy()
    return Dataset(images, labels, None, n_classes)


def load_cifar_dataset(path: Union[str, Path], variant: str = "cifar100_coarse") -> Dataset:
    return _decode_cifar(Path(path).read_bytes(), variant)


def load_cifar_binary(path: Union[str, Path], variant: str = "cifar100_coarse") -> List[LabeledImage]:
    """Decode a CIFAR-10/100 binary batch file.

    Records are ``[label byte(s)][1024 R][1024 G][1024 B]``; CIFAR-100 has a
    coarse then a fine label byte. Pixels come back as ``byte / 255``.
    """
    return load_cifar_dataset(path, variant).items()


def encode_cifar_record(img: LabeledImage, variant: str = "cifar100_coarse", other_label: int = 0) -> bytes:
    """Serialize one image back to record bytes (inverse of the loader).

    For CIFAR-100 ``other_label`` fills the label byte the variant does not read.
    """
    n_label, which, n_classes = _cifar_layout(variant)
    px = np.asarray(img.pixels).reshape(3, 32, 32)
    data = np.rint(px * 255.0).astype(np.uint8).tobytes()
    labels = [other_label] * n_label
    labels[which] = img.label
    return bytes(labels) + data


# ---------------------------------------------------------------------------
# synthetic scenes

SHAPES = ("square", "circle", "triangle", "diamond", "cross", "ring")

# analytic area of each shape relative to its bounding square
_FILL = {
    "square": 1.0,
    "circle": np.pi / 4,
    "triangle": 0.5,
    "diamond": 0.5,
    "cross": 5.0 / 9.0,
    "ring": 0.75 * np.pi / 4,
}


@dataclass
class SyntheticSceneConfig:
    """Generator settings. ``scale_range`` is the bounding-box area as a fraction of the image."""

    n_samples: int = 1000
    image_size: int = 16
    scale_range: Tuple[float, float] = (0.04, 0.5)
    shapes: Tuple[str, ...] = SHAPES
    noise: float = 0.1
    min_contrast: float = 0.25
    objects_per_image: Tuple[int, int] = (1, 3)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi <= 1):
            raise InputError(f"scale_range must satisfy 0 < lo <= hi <= 1, got {self.scale_range}")
        if not (0 <= self.min_contrast < 0.45):
            raise InputError(f"min_contrast must lie in [0, 0.45), got {self.min_contrast}")
        for s in self.shapes:
            if s not in SHAPES:
                raise InputError(f"unknown shape {s!r}")


def shape_mask(shape: str, size: int, cx: float, cy: float, half: float) -> np.ndarray:
    """Rasterize ``shape`` by testing pixel centers; ``half`` is half the bounding side."""
    coords = np.arange(size) + 0.5
    dy = (coords[:, None] - cy) / half
    dx = (coords[None, :] - cx) / half
    adx, ady = np.abs(dx), np.abs(dy)
    if shape == "square":
        m = (adx <= 1) & (ady <= 1)
    elif shape == "circle":
        m = dx * dx + dy * dy <= 1
    elif shape == "triangle":
        # apex at the top edge, base along the bottom edge
        m = (ady <= 1) & (adx <= (dy + 1) / 2)
    elif shape == "diamond":
        m = adx + ady <= 1
    elif shape == "cross":
        m = ((adx <= 1 / 3) & (ady <= 1)) | ((ady <= 1 / 3) & (adx <= 1))
    elif shape == "ring":
        rr = dx * dx + dy * dy
        m = (rr <= 1) & (rr >= 0.25)
    else:
        raise InputError(f"unknown shape {shape!r}")
    return m


def shape_area_fraction(shape: str, scale: float) -> float:
    """Analytic shape area as a fraction of the image for bounding-box fraction ``scale``."""
    return _FILL[shape] * scale


def _place(rng, size, scale):
    side = np.sqrt(scale) * size
    half = side / 2
    lo, hi = half, size - half
    cx = rng.uniform(lo, hi) if hi > lo else size / 2
    cy = rng.uniform(lo, hi) if hi > lo else size / 2
    return cx, cy, half


def _render(rng, cfg: SyntheticSceneConfig, objects):
    """objects: list of (class index, scale). Returns (uint8 image, mask)."""
    s = cfg.image_size
    bg = rng.uniform(0, 1, 3)
    img = np.broadcast_to(bg[:, None, None], (3, s, s)).copy()
    mask = np.zeros((s, s), np.uint8)
    for cls, scale in objects:
        while True:
            fg = rng.uniform(0, 1, 3)
            if abs(fg.mean() - bg.mean()) >= cfg.min_contrast:
                break
        cx, cy, half = _place(rng, s, scale)
        m = shape_mask(cfg.shapes[cls], s, cx, cy, half)
        img[:, m] = fg[:, None]
        mask[m] = cls + 1
    if cfg.noise > 0:
        img = img + rng.normal(0.0, cfg.noise, img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.rint(img * 255).astype(np.uint8), mask


def _sample_scale(rng, cfg):
    lo, hi = cfg.scale_range
    # log-uniform so small objects are as common as large ones
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi)))) if hi > lo else lo


def _balanced_labels(rng, n, k):
    labels = np.arange(n) % k
    rng.shuffle(labels)
    return labels


def gen_synthetic_classification(cfg: SyntheticSceneConfig) -> Dataset:
    """One shape per image on a noisy background; the label is the shape type.

    Class counts are balanced exactly; the whole dataset is a pure function of ``cfg``.
    """
    rng = np.random.default_rng(cfg.seed)
    k = len(cfg.shapes)
    labels = _balanced_labels(rng, cfg.n_samples, k)
    images = np.empty((cfg.n_samples, 3, cfg.image_size, cfg.image_size), np.uint8)
    for i, lab in enumerate(labels):
        images[i], _ = _render(rng, cfg, [(int(lab), _sample_scale(rng, cfg))])
    return Dataset(images, labels.astype(np.int64), None, k)


def gen_synthetic_segmentation(cfg: SyntheticSceneConfig) -> Dataset:
    """Scenes of several shapes with per-pixel masks (0 = background, shape index + 1 otherwise).

    The image-level label is the class of the largest object (0 for empty scenes).
    """
    rng = np.random.default_rng(cfg.seed)
    k = len(cfg.shapes)
    s = cfg.image_size
    images = np.empty((cfg.n_samples, 3, s, s), np.uint8)
    masks = np.empty((cfg.n_samples, s, s), np.uint8)
    labels = np.zeros(cfg.n_samples, np.int64)
    lo, hi = cfg.objects_per_image
    for i in range(cfg.n_samples):
        n_obj = int(rng.integers(lo, hi + 1))
        objs = [(int(rng.integers(k)), _sample_scale(rng, cfg)) for _ in range(n_obj)]
        images[i], masks[i] = _render(rng, cfg, objs)
        if objs:
            labels[i] = max(objs, key=lambda o: o[1])[0] + 1
    return Dataset(images, labels, masks, k + 1)


# ---------------------------------------------------------------------------
# FSDS container


def save_container(ds: Dataset, path: Union[str, Path]) -> None:
    """Write ``ds`` as a FSDS file: 16-byte header then fixed-size records.

    Record = label (u16 LE), mask bytes if present (H*W), pixel bytes (3*H*W).
    """
    n, c, h, w = ds.images.shape
    if c != 3 or h != w:
        raise InputError(f"container stores square 3-channel images, got {ds.images.shape}")
    rec_len = 2 + (h * w if ds.masks is not None else 0) + 3 * h * w
    parts = [_HEADER.pack(MAGIC, VERSION, n, rec_len)]
    for i in range(n):
        parts.append(struct.pack("<H", int(ds.labels[i])))
        if ds.masks is not None:
            parts.append(ds.masks[i].astype(np.uint8).tobytes())
        parts.append(ds.images[i].tobytes())
    Path(path).write_bytes(b"".join(parts))


def _read_header(raw: bytes):
    if len(raw) < _HEADER.size:
        raise FormatError(f"file too short for header: {len(raw)} bytes")
    magic, version, count, rec_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version} at byte offset 4")
    return count, rec_len


def load_container(path: Union[str, Path], num_classes: int = 0) -> Dataset:
    raw = Path(path).read_bytes()
    count, rec_len = _read_header(raw)
    body = len(raw) - _HEADER.size
    if body != count * rec_len:
        raise FormatError(
            f"container declares {count} records of {rec_len} bytes but body is {body} bytes "
            f"(data ends at byte offset {len(raw)})")
    # Square images make the mask/no-mask layouts unambiguous: 3*s^2 vs 4*s^2.
    payload = rec_len - 2
    has_mask = False
    side = int(round(np.sqrt(payload / 3)))
    if 3 * side * side != payload:
        side = int(round(np.sqrt(payload / 4)))
        has_mask = True
        if 4 * side * side != payload:
            raise FormatError(f"record length {rec_len} does not match a square 3-channel image")
    buf = np.frombuffer(raw, np.uint8, offset=_HEADER.size).reshape(count, rec_len)
    labels = buf[:, 0].astype(np.int64) | (buf[:, 1].astype(np.int64) << 8)
    off = 2
    masks = None
    if has_mask:
        masks = buf[:, off:off + side * side].reshape(count, side, side).copy()
        off += side * side
    images = buf[:, off:].reshape(count, 3, side, side).copy()
    k = num_classes or (int(labels.max()) + 1 if count else 0)
    return Dataset(images, labels, masks, k)


def write_blobs(path: Union[str, Path], blobs: Sequence[Tuple[str, np.ndarray]]) -> None:
    """Named float64 arrays under the FSDS header (``record_len`` = 0, variable records).

    Each blob: name length (u32), UTF-8 name, shape as 4 x u32 (left-padded
    with 1s), then little-endian f64 data.
    """
    parts = [_HEADER.pack(MAGIC, VERSION, len(blobs), 0)]
    for name, arr in blobs:
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim > 4:
            raise InputError(f"blob {name!r} has rank {arr.ndim} > 4")
        shape = (1,) * (4 - arr.ndim) + arr.shape
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<4I", *shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_blobs(path: Union[str, Path]) -> List[Tuple[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    count, _ = _read_header(raw)
    off = _HEADER.size
    out = []
    for _ in range(count):
        if off + 4 > len(raw):
            raise FormatError(f"truncated blob header at byte offset {off}")
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + nlen + 16 > len(raw):
            raise FormatError(f"truncated blob name/shape at byte offset {off}")
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        shape = struct.unpack_from("<4I", raw, off)
        off += 16
        nbytes = 8 * int(np.prod(shape))
        if off + nbytes > len(raw):
            raise FormatError(f"truncated data for blob {name!r} at byte offset {off}")
        out.append((name, np.frombuffer(raw, "<f8", count=nbytes // 8, offset=off).reshape(shape).copy()))
        off += nbytes
    if off != len(raw):
        raise FormatError(f"trailing bytes after last blob at byte offset {off}")
    return out


# ---------------------------------------------------------------------------
# metrics


def metric_accuracy(predictions, labels) -> float:
    p, t = np.asarray(predictions), np.asarray(labels)
    if p.size == 0 or p.shape != t.shape:
        raise InputError(f"need equal, non-empty prediction/label arrays, got {p.shape} and {t.shape}")
    return float((p == t).mean())


def metric_miou(pred_masks, masks, num_classes: int) -> float:
    """Mean IoU over classes present in the prediction or the truth."""
    p, t = np.asarray(pred_masks).ravel(), np.asarray(masks).ravel()
    if p.size == 0 or p.shape != t.shape:
        raise InputError(f"need equal, non-empty mask arrays, got {np.shape(pred_masks)} and {np.shape(masks)}")
    conf = np.bincount(t.astype(np.int64) * num_classes + p.astype(np.int64),
                       minlength=num_classes * num_classes).reshape(num_classes, num_classes)
    inter = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - inter
    present = union > 0
    return float((inter[present] / union[present]).mean())
