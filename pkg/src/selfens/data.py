"""Datasets: IDX I/O, preparation transforms and synthetic two-domain generators."""
from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np


class IdxFormatError(ValueError):
    pass


@dataclass
class DomainDataset:
    """Images are N x H x W x C float32.

    When ``mean``/``std`` are set the stored images are
    ``(raw - mean) / std`` per channel.
    """

    name: str
    images: np.ndarray
    labels: np.ndarray | None = None
    class_count: int = 10
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ValueError(f"{self.name}: images must be N x H x W x C, got shape {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise ValueError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
                raise ValueError(
                    f"{self.name}: labels must lie in [0, {self.class_count}), "
                    f"found range [{self.labels.min()}, {self.labels.max()}]"
                )

    def __len__(self) -> int:
        return len(self.images)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "DomainDataset":
        return replace(self, images=self.images[idx], labels=None if self.labels is None else self.labels[idx])


@dataclass
class Domain:
    """Train and held-out splits of one domain."""

    train: DomainDataset
    test: DomainDataset


# ---------------------------------------------------------------------------
# IDX files

_IDX_TYPES = {0x08: np.dtype(">u1"), 0x0D: np.dtype(">f4")}
_IDX_CODES = {np.dtype("u1"): 0x08, np.dtype("f4"): 0x0D}


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    """Parse an IDX file into an array (uint8 or float32 payloads)."""
    with _open(path) as f:
        data = f.read()
    if len(data) < 4:
        raise IdxFormatError(f"{path}: offset 0: file too short for the magic number")
    zero, code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise IdxFormatError(f"{path}: offset 0: bad magic 0x{int.from_bytes(data[:4], 'big'):08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError(f"{path}: offset 4: truncated dimension table")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    dtype = _IDX_TYPES[code]
    need = int(np.prod(dims)) * dtype.itemsize
    if len(data) - header < need:
        raise IdxFormatError(
            f"{path}: offset {header}: truncated payload, expected {need} bytes, found {len(data) - header}"
        )
    arr = np.frombuffer(data, dtype=dtype, count=int(np.prod(dims)), offset=header)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    code = _IDX_CODES.get(arr.dtype)
    if code is None:
        raise TypeError(f"IDX writer supports uint8 and float32, got {arr.dtype}")
    with open(path, "wb") as f:
        f.write(struct.pack(">HBB", 0, code, arr.ndim))
        f.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        f.write(arr.astype(_IDX_TYPES[code]).tobytes())


def load_idx(
    images_path,
    labels_path=None,
    class_count: int | None = None,
    name: str | None = None,
    standardize_images: bool = True,
) -> DomainDataset:
    """Load an IDX image file (and optional label file).

    uint8 pixels are scaled to [0, 1]; float32 payloads are taken as is.
    3-D files are treated as single-channel.
    """
    raw = read_idx(images_path)
    if raw.ndim == 3:
        raw = raw[..., None]
    if raw.ndim != 4:
        raise IdxFormatError(f"{images_path}: expected a 3-D or 4-D image array, got {raw.ndim}-D")
    images = raw.astype(np.float32) / 255.0 if raw.dtype == np.uint8 else raw.astype(np.float32)
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path)
        if labels.ndim != 1:
            raise IdxFormatError(f"{labels_path}: label file must be 1-D")
        if len(labels) != len(images):
            raise IdxFormatError(f"{labels_path}: {len(labels)} labels for {len(images)} images")
        labels = labels.astype(np.int64)
    if class_count is None:
        class_count = int(labels.max()) + 1 if labels is not None and len(labels) else 10
    ds = DomainDataset(name or Path(images_path).name, images, labels, class_count)
    return standardize(ds) if standardize_images else ds


def save_idx(ds: DomainDataset, images_path, labels_path=None) -> None:
    """Write raw (de-standardised) float32 pixels, plus uint8 labels."""
    write_idx(images_path, destandardize(ds).images.astype(np.float32))
    if labels_path is not None and ds.labels is not None:
        write_idx(labels_path, ds.labels.astype(np.uint8))


# ---------------------------------------------------------------------------
# preparation transforms


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64).reshape(-1, images.shape[-1])
    std = x.std(axis=0)
    return x.mean(axis=0), np.where(std > 0, std, 1.0)


def destandardize(ds: DomainDataset) -> DomainDataset:
    if ds.mean is None:
        return ds
    raw = (ds.images.astype(np.float64) * ds.std + ds.mean).astype(np.float32)
    return replace(ds, images=raw, mean=None, std=None)


def standardize(ds: DomainDataset, mean=None, std=None) -> DomainDataset:
    """Standardise per channel with the given stats, or the dataset's own."""
    raw = destandardize(ds)
    if mean is None:
        mean, std = channel_stats(raw.images)
    mean = np.asarray(mean, dtype=np.float64)
    std = np.asarray(std, dtype=np.float64)
    z = ((raw.images.astype(np.float64) - mean) / std).astype(np.float32)
    return replace(raw, images=z, mean=mean, std=std)


@dataclass(frozen=True)
class PadTo:
    h: int
    w: int


@dataclass(frozen=True)
class ResizeBilinear:
    h: int
    w: int


@dataclass(frozen=True)
class ReplicateChannels:
    c: int


@dataclass(frozen=True)
class FilterClasses:
    keep: tuple[int, ...]


@dataclass(frozen=True)
class Standardize:
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None


def resize_bilinear(images: np.ndarray, h: int, w: int) -> np.ndarray:
    """Align-corners bilinear resize of N x H x W x C images."""
    n, h0, w0, c = images.shape
    if (h0, w0) == (h, w):
        return images.copy()
    ys = np.linspace(0, h0 - 1, h) if h > 1 else np.zeros(1)
    xs = np.linspace(0, w0 - 1, w) if w > 1 else np.zeros(1)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h0 - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w0 - 2, 0))
    y1 = np.minimum(y0 + 1, h0 - 1)
    x1 = np.minimum(x0 + 1, w0 - 1)
    fy = (ys - y0)[None, :, None, None]
    fx = (xs - x0)[None, None, :, None]
    top = images[:, y0][:, :, x0] * (1 - fx) + images[:, y0][:, :, x1] * fx
    bot = images[:, y1][:, :, x0] * (1 - fx) + images[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(images.dtype)


def prepare(ds: DomainDataset, steps: Sequence) -> DomainDataset:
    """Apply preparation steps in order.

    Geometric and channel steps act on raw pixels, so a standardised input is
    de-standardised first and the result stays raw until a ``Standardize``.
    """
    for step in steps:
        if isinstance(step, Standardize):
            ds = standardize(ds, step.mean, step.std)
            continue
        if isinstance(step, FilterClasses):
            if ds.labels is None:
                raise ValueError("filter_classes needs a labelled dataset")
            keep = sorted(set(step.keep))
            if any(k < 0 or k >= ds.class_count for k in keep):
                raise ValueError(f"filter_classes: classes {keep} outside [0, {ds.class_count})")
            remap = np.full(ds.class_count, -1)
            remap[keep] = np.arange(len(keep))
            sel = np.isin(ds.labels, keep)
            ds = replace(ds, images=ds.images[sel], labels=remap[ds.labels[sel]], class_count=len(keep))
            continue
        ds = destandardize(ds)
        n, h, w, c = ds.images.shape
        if isinstance(step, PadTo):
            if step.h < h or step.w < w:
                raise ValueError(f"pad_to({step.h},{step.w}) smaller than current {h}x{w}")
            top, left = (step.h - h) // 2, (step.w - w) // 2
            out = np.zeros((n, step.h, step.w, c), dtype=ds.images.dtype)
            out[:, top:top + h, left:left + w] = ds.images
            ds = replace(ds, images=out)
        elif isinstance(step, ResizeBilinear):
            ds = replace(ds, images=resize_bilinear(ds.images, step.h, step.w))
        elif isinstance(step, ReplicateChannels):
            if c != 1:
                raise ValueError(f"replicate_channels needs a single-channel image, got {c} channels")
            ds = replace(ds, images=np.repeat(ds.images, step.c, axis=-1))
        else:
            raise ValueError(f"unknown preparation step {step!r}")
    return ds


def parse_step(d: dict):
    """Build a step from ``{"op": "pad_to", "h": 32, "w": 32}``-style dicts."""
    d = dict(d)
    op = d.pop("op")
    table = {
        "pad_to": PadTo,
        "resize_bilinear": ResizeBilinear,
        "replicate_channels": ReplicateChannels,
        "filter_classes": lambda keep: FilterClasses(tuple(keep)),
        "standardize": Standardize,
    }
    if op not in table:
        raise ValueError(f"unknown preparation op {op!r}")
    return table[op](**d)


# ---------------------------------------------------------------------------
# synthetic domains

CANVAS = 16
GLYPH_RADIUS = 5.0
STROKE_HALF_WIDTH = 0.8
POS_JITTER = 2.0
ROT_JITTER_DEG = 10.0
STROKE_RANGE = (0.7, 1.0)

_B = 0.8
GLYPHS: list[list[tuple[tuple[float, float], tuple[float, float]]]] = [
    [((-1, 0), (1, 0))],                                            # horizontal bar
    [((0, -1), (0, 1))],                                            # vertical bar
    [((-1, 0), (1, 0)), ((0, -1), (0, 1))],                         # plus
    [((-1, -1), (1, 1)), ((-1, 1), (1, -1))],                       # cross
    [((-_B, -_B), (_B, -_B)), ((_B, -_B), (_B, _B)),
     ((_B, _B), (-_B, _B)), ((-_B, _B), (-_B, -_B))],               # box
    [((-1, 1), (1, -1))],                                           # slash
    [((-1, -1), (1, 1))],                                           # backslash
    [((-_B, -1), (-_B, 1)), ((-_B, 1), (_B, 1))],                   # L
    [((-1, -1), (1, -1)), ((0, -1), (0, 1))],                       # T
    [((0, -1), (1, _B)), ((1, _B), (-1, _B)), ((-1, _B), (0, -1))],  # triangle
    [((-_B, -1), (-_B, 1)), ((_B, -1), (_B, 1)), ((-_B, 0), (_B, 0))],  # H
    [((-1, -1), (1, -1)), ((1, -1), (-1, 1)), ((-1, 1), (1, 1))],   # Z
]


@dataclass(frozen=True)
class Shift:
    rotation_deg: float = 0.0
    intensity_invert: bool = False
    noise_sigma: float = 0.0
    class_weights: tuple[float, ...] | None = None


DEFAULT_SHIFT = Shift(rotation_deg=25.0, intensity_invert=True, noise_sigma=0.1)


@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "glyphs"
    n_train: int = 2000
    n_test: int = 500
    class_count: int = 10
    shift: Shift = field(default_factory=lambda: DEFAULT_SHIFT)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("glyphs", "blobs"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.kind == "glyphs" and self.class_count > len(GLYPHS):
            raise ValueError(f"glyph inventory has {len(GLYPHS)} shapes, {self.class_count} classes requested")
        w = self.shift.class_weights
        if w is not None:
            if len(w) != self.class_count or abs(sum(w) - 1.0) > 1e-6 or min(w) < 0:
                raise ValueError("class_weights must be a probability vector of length class_count")


def _balanced_labels(n: int, c: int, rng: np.random.Generator) -> np.ndarray:
    return rng.permutation(np.arange(n) % c)


def _render_glyphs(labels, rot_deg, rng) -> np.ndarray:
    n = len(labels)
    ang = np.deg2rad(rot_deg + rng.uniform(-ROT_JITTER_DEG, ROT_JITTER_DEG, n))
    shift = rng.uniform(-POS_JITTER, POS_JITTER, (n, 2))
    stroke = rng.uniform(*STROKE_RANGE, n)
    c = (CANVAS - 1) / 2.0
    ys, xs = np.mgrid[0:CANVAS, 0:CANVAS].astype(np.float64)
    pix = np.stack([xs - c, ys - c], axis=-1).reshape(-1, 2)
    out = np.zeros((n, CANVAS * CANVAS))
    for i in range(n):
        cs, sn = np.cos(ang[i]), np.sin(ang[i])
        rot = np.array([[cs, -sn], [sn, cs]])
        segs = np.asarray(GLYPHS[labels[i]], dtype=np.float64) * GLYPH_RADIUS
        a = segs[:, 0] @ rot.T + shift[i]
        b = segs[:, 1] @ rot.T + shift[i]
        ab = b - a
        ap = pix[:, None, :] - a[None]
        t = np.clip((ap * ab).sum(-1) / (ab * ab).sum(-1), 0, 1)
        d = np.linalg.norm(ap - t[..., None] * ab, axis=-1).min(axis=1)
        out[i] = stroke[i] * np.clip(STROKE_HALF_WIDTH + 0.5 - d, 0, 1)
    return out.reshape(n, CANVAS, CANVAS, 1)


def _render_blobs(labels, rot_deg, class_count, rng) -> np.ndarray:
    n = len(labels)
    theta = 2 * np.pi * labels / class_count + np.deg2rad(rot_deg)
    centre = (CANVAS - 1) / 2.0 + 4.0 * np.stack([np.cos(theta), np.sin(theta)], axis=-1)
    centre = centre + rng.uniform(-1, 1, (n, 2))
    amp = rng.uniform(*STROKE_RANGE, n)
    ys, xs = np.mgrid[0:CANVAS, 0:CANVAS].astype(np.float64)
    d2 = (xs[None] - centre[:, 0, None, None]) ** 2 + (ys[None] - centre[:, 1, None, None]) ** 2
    return (amp[:, None, None] * np.exp(-d2 / (2 * 1.5 ** 2)))[..., None]


def _render(spec: SyntheticSpec, labels, rot_deg, rng):
    if spec.kind == "glyphs":
        return _render_glyphs(labels, rot_deg, rng)
    return _render_blobs(labels, rot_deg, spec.class_count, rng)


def synthetic_raw(spec: SyntheticSpec) -> dict[str, DomainDataset]:
    """Un-standardised source/target train/test splits.

    Intensity inversion reflects target pixels about the source training
    mean, i.e. negation in source-standardised units.
    """
    root = np.random.SeedSequence(spec.seed)
    s_train, s_test, t_train, t_test = (np.random.default_rng(s) for s in root.spawn(4))
    c = spec.class_count
    out = {}
    for split, rng, n in (("train", s_train, spec.n_train), ("test", s_test, spec.n_test)):
        labels = _balanced_labels(n, c, rng)
        out[f"source_{split}"] = DomainDataset(
            f"{spec.kind}-source-{split}", _render(spec, labels, 0.0, rng).astype(np.float32), labels, c
        )
    src_mean = out["source_train"].images.astype(np.float64).mean()
    sh = spec.shift
    for split, rng, n in (("train", t_train, spec.n_train), ("test", t_test, spec.n_test)):
        if sh.class_weights is not None and split == "train":
            labels = rng.choice(c, size=n, p=np.asarray(sh.class_weights))
        else:
            labels = _balanced_labels(n, c, rng)
        img = _render(spec, labels, sh.rotation_deg, rng)
        if sh.intensity_invert:
            img = 2.0 * src_mean - img
        if sh.noise_sigma > 0:
            img = img + rng.normal(0.0, sh.noise_sigma, img.shape)
        out[f"target_{split}"] = DomainDataset(f"{spec.kind}-target-{split}", img.astype(np.float32), labels, c)
    return out


def standardize_pair(raw: dict[str, DomainDataset]) -> tuple[Domain, Domain]:
    """Standardise all four splits with the source training statistics."""
    mean, std = channel_stats(raw["source_train"].images)
    z = {k: standardize(v, mean, std) for k, v in raw.items()}
    return Domain(z["source_train"], z["source_test"]), Domain(z["target_train"], z["target_test"])


def gen_synthetic(spec: SyntheticSpec) -> tuple[Domain, Domain]:
    return standardize_pair(synthetic_raw(spec))


# ---------------------------------------------------------------------------
# batching


def batch_iter(
    n_or_ds, batch_size: int, rng: np.random.Generator, epoch_size: int | None = None
) -> Iterator[np.ndarray]:
    """Shuffled index batches; cycles through fresh permutations up to ``epoch_size`` indices."""
    n = n_or_ds if isinstance(n_or_ds, (int, np.integer)) else len(n_or_ds)
    if n == 0:
        raise ValueError("cannot batch an empty dataset")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    total = n if epoch_size is None else epoch_size
    perms = [rng.permutation(n) for _ in range(-(-total // n))]
    order = np.concatenate(perms)[:total]
    for start in range(0, total, batch_size):
        yield order[start:start + batch_size]
