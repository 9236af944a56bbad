"""Portable-pixmap (P6) image files and a synthetic textured corpus."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

PPM_SUFFIXES = (".ppm", ".pnm")


def read_ppm(path) -> np.ndarray:
    """Load an 8-bit RGB pixmap as a ``uint8`` array ``[H, W, 3]``."""
    try:
        with Image.open(path) as im:
            if im.format != "PPM":
                raise ValueError(f"{path}: not a portable pixmap (format {im.format})")
            if im.mode != "RGB":
                raise ValueError(f"{path}: expected an 8-bit RGB (P6) pixmap, got mode {im.mode}")
            return np.asarray(im, dtype=np.uint8).copy()
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ValueError(f"{path}: malformed image file ({exc})") from exc


def write_ppm(path, img: np.ndarray) -> None:
    """Write ``[H, W, 3]`` uint8 (or [0, 1] floats, rounded) as binary P6."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        img = to_uint8(img)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"expected an [H, W, 3] image, got {img.shape}")
    Image.fromarray(img, mode="RGB").save(path, format="PPM")


def to_uint8(x: np.ndarray) -> np.ndarray:
    """Quantize a [0, 1] float image to 8-bit, rounding half up."""
    return np.floor(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def list_images(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"corpus directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in PPM_SUFFIXES and p.is_file())


def synthetic_image(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth gradients plus oriented sinusoidal texture, edges and mild noise."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    yy /= max(height - 1, 1)
    xx /= max(width - 1, 1)
    img = np.empty((height, width, 3))
    base = rng.uniform(0.2, 0.8, 3)
    for c in range(3):
        gy, gx = rng.uniform(-0.4, 0.4, 2)
        img[..., c] = base[c] + gy * (yy - 0.5) + gx * (xx - 0.5)
    for _ in range(rng.integers(2, 5)):
        theta = rng.uniform(0, np.pi)
        freq = rng.uniform(2.0, 14.0)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.03, 0.12) * rng.uniform(0.5, 1.0, 3)
        wave = np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img += wave[..., None] * amp
    for _ in range(rng.integers(0, 3)):
        cy, cx, r = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.1, 0.35)
        disk = ((yy - cy) ** 2 + (xx - cx) ** 2) < r * r
        img[disk] += rng.uniform(-0.25, 0.25, 3)
    img += rng.normal(0.0, 0.01, img.shape)
    return to_uint8(img)


def write_synthetic_corpus(directory, n_images: int, size: tuple[int, int] = (96, 96),
                           seed: int = 0, prefix: str = "img") -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n_images):
        p = d / f"{prefix}{i:04d}.ppm"
        write_ppm(p, synthetic_image(rng, *size))
        paths.append(p)
    return paths
