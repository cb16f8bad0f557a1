"""Seeded stochastic augmentation for student and teacher views.

All functions take an explicit ``numpy.random.Generator``; a disabled
component draws nothing from it, so an all-off config is an exact identity.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.0
    translate_range: int = 0
    hflip: bool = False
    affine_sigma: float = 0.0
    intensity_flip_prob: float = 0.0
    intensity_scale_range: tuple[float, float] = (1.0, 1.0)
    intensity_offset_range: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.noise_sigma < 0 or self.affine_sigma < 0 or self.translate_range < 0:
            raise ValueError("noise_sigma, affine_sigma and translate_range must be >= 0")
        if not 0.0 <= self.intensity_flip_prob <= 1.0:
            raise ValueError("intensity_flip_prob must lie in [0, 1]")
        lo, hi = self.intensity_scale_range
        if lo > hi:
            raise ValueError("intensity_scale_range needs lo <= hi")
        lo, hi = self.intensity_offset_range
        if lo > hi:
            raise ValueError("intensity_offset_range needs lo <= hi")
        object.__setattr__(self, "intensity_scale_range", tuple(float(v) for v in self.intensity_scale_range))
        object.__setattr__(self, "intensity_offset_range", tuple(float(v) for v in self.intensity_offset_range))

    @property
    def uses_geometry(self) -> bool:
        return self.affine_sigma > 0 or self.translate_range > 0

    @property
    def uses_intensity(self) -> bool:
        return (
            self.intensity_flip_prob > 0
            or self.intensity_scale_range != (1.0, 1.0)
            or self.intensity_offset_range != (0.0, 0.0)
        )


OFF = AugmentConfig()
MINIMAL = AugmentConfig(noise_sigma=0.1)
TF = replace(MINIMAL, translate_range=2)
TFA = replace(TF, affine_sigma=0.1)
INTENSITY = dict(
    intensity_flip_prob=0.5,
    intensity_scale_range=(0.25, 1.5),
    intensity_offset_range=(-0.5, 0.5),
)

AUGMENT_PRESETS = ("off", "minimal", "tf", "tfa", "tfa_intensity")


def preset(name: str, hflip: bool = False) -> tuple[AugmentConfig, AugmentConfig]:
    """``(source_config, target_config)`` for a named scheme.

    ``tfa_intensity`` adds the intensity flip/scale/offset jitter to the
    source domain only.
    """
    base = {"off": OFF, "minimal": MINIMAL, "tf": TF, "tfa": TFA, "tfa_intensity": TFA}
    if name not in base:
        raise ValueError(f"unknown augmentation preset {name!r}; choose from {AUGMENT_PRESETS}")
    cfg = base[name]
    if hflip and name not in ("off", "minimal"):
        cfg = replace(cfg, hflip=True)
    if name == "tfa_intensity":
        return replace(cfg, **INTENSITY), cfg
    return cfg, cfg


@dataclass(frozen=True)
class AffineSample:
    matrix: np.ndarray
    translation: np.ndarray

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(2)) and not np.any(self.translation))


def _sample_affine_batch(config: AugmentConfig, rng: np.random.Generator, n: int):
    mats = np.broadcast_to(np.eye(2), (n, 2, 2)).copy()
    if config.affine_sigma > 0:
        mats += rng.normal(0.0, config.affine_sigma, (n, 2, 2))
    t = config.translate_range
    if t == 0:
        trans = np.zeros((n, 2))
    elif config.affine_sigma > 0:
        trans = rng.uniform(-t, t, (n, 2))
    else:
        trans = rng.integers(-t, t + 1, (n, 2)).astype(np.float64)
    return mats, trans


def sample_affine(config: AugmentConfig, rng: np.random.Generator) -> AffineSample:
    """Draw one matrix ``I + N(0, sigma)`` (entry-wise) and a translation in pixels."""
    mats, trans = _sample_affine_batch(config, rng, 1)
    return AffineSample(mats[0], trans[0])


def _warp_batch(images: np.ndarray, mats: np.ndarray, trans: np.ndarray) -> np.ndarray:
    """Inverse-warp NHWC images about their centres; bilinear, zero outside.

    The forward map sends centred pixel position p (x = column, y = row) to
    ``A @ p + t``, so each output pixel reads the input at ``A^-1 (q - t)``.
    """
    n, h, w, c = images.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    q = np.stack([xs, ys], axis=-1).reshape(1, -1, 2) - trans[:, None, :]
    inv = np.linalg.inv(mats)
    src = np.einsum("nij,npj->npi", inv, q)
    sx = src[..., 0] + cx
    sy = src[..., 1] + cy
    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    flat = images.reshape(n, h * w, c)
    rows = np.arange(n)[:, None]

    def tap(yi, xi):
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        idx = np.where(ok, yi * w + xi, 0)
        v = flat[rows, idx]
        return np.where(ok[..., None], v, 0)

    out = (
        tap(y0, x0) * ((1 - fy) * (1 - fx))
        + tap(y0, x0 + 1) * ((1 - fy) * fx)
        + tap(y0 + 1, x0) * (fy * (1 - fx))
        + tap(y0 + 1, x0 + 1) * (fy * fx)
    )
    return out.reshape(n, h, w, c).astype(images.dtype)


def apply_affine(image: np.ndarray, a: AffineSample) -> np.ndarray:
    if a.is_identity:
        return image.copy()
    return _warp_batch(image[None], a.matrix[None], a.translation[None])[0]


def _intensity_batch(images: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    n = len(images)
    shape = (n,) + (1,) * (images.ndim - 1)
    sign = np.where(rng.random(n) < config.intensity_flip_prob, -1.0, 1.0)
    scale = rng.uniform(*config.intensity_scale_range, n)
    offset = rng.uniform(*config.intensity_offset_range, n)
    out = images * sign.reshape(shape)
    out = out * scale.reshape(shape)
    return (out + offset.reshape(shape)).astype(images.dtype)


def intensity_augment(image: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Negate with probability ``intensity_flip_prob``, then scale, then offset."""
    if not config.uses_intensity:
        return image.copy()
    return _intensity_batch(image[None], config, rng)[0]


def augment_batch(images: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """One independent view per image: hflip, affine/translation, intensity, noise."""
    out = images
    n = len(images)
    if config.hflip:
        flip = rng.random(n) < 0.5
        out = out.copy()
        out[flip] = out[flip][:, :, ::-1, :]
    if config.uses_geometry:
        mats, trans = _sample_affine_batch(config, rng, n)
        out = _warp_batch(out, mats, trans)
    if config.uses_intensity:
        out = _intensity_batch(out, config, rng)
    if config.noise_sigma > 0:
        out = out + rng.normal(0.0, config.noise_sigma, out.shape).astype(out.dtype)
    if out is images:
        out = images.copy()
    return out


def augment_view(sample: np.ndarray, config: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    return augment_batch(sample[None], config, rng)[0]


def augment_pair(sample: np.ndarray, config: AugmentConfig, rng: np.random.Generator):
    """Student and teacher views of the same sample (or batch, if 4-D)."""
    if sample.ndim == 4:
        return augment_batch(sample, config, rng), augment_batch(sample, config, rng)
    return augment_view(sample, config, rng), augment_view(sample, config, rng)


def write_pgm(path, image: np.ndarray, lo: float | None = None, hi: float | None = None) -> None:
    """Write a 2-D array as binary PGM (P5, maxval 255), mapping [lo, hi] linearly onto [0, 255]."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("write_pgm expects a 2-D array")
    lo = float(img.min()) if lo is None else lo
    hi = float(img.max()) if hi is None else hi
    span = hi - lo if hi > lo else 1.0
    px = np.clip(np.round((img - lo) / span * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(px.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None or int(m.group(3)) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(m.group(1)), int(m.group(2))
    payload = data[m.end(): m.end() + w * h]
    if len(payload) != w * h:
        raise ValueError(f"{path}: truncated PGM payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w)


def grid(images: np.ndarray, cols: int) -> np.ndarray:
    """Tile N single-channel HxW images (channel 0) into a 2-D mosaic with 1px gaps."""
    n, h, w = images.shape[:3]
    rows = -(-n // cols)
    fill = float(images.min()) if n else 0.0
    out = np.full((rows * (h + 1) - 1, cols * (w + 1) - 1), fill, dtype=np.float64)
    for i in range(n):
        r, c = divmod(i, cols)
        out[r * (h + 1): r * (h + 1) + h, c * (w + 1): c * (w + 1) + w] = images[i, :, :, 0]
    return out
