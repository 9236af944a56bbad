"""Quality metrics, rate-distortion points and the Bjontegaard delta rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
_K1, _K2 = 0.01, 0.03


def _check_pair(x, y):
    x = np.asarray(x)
    y = np.asarray(y)
    if x.shape != y.shape:
        raise ValueError(f"image extents differ: {x.shape} vs {y.shape}")
    return x.astype(np.float64), y.astype(np.float64)


def psnr(x, x_hat, peak: float = 255.0) -> float:
    """PSNR in dB over every sample of two 8-bit images; ``inf`` when identical."""
    a, b = _check_pair(x, x_hat)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable filtering keeping only fully-covered positions."""
    half = len(g) // 2
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    return out[half:img.shape[0] - half, half:img.shape[1] - half]


def _ssim_terms(a: np.ndarray, b: np.ndarray, peak: float):
    """Mean luminance term and mean contrast-structure term for one channel."""
    g = _gaussian_window()
    c1 = (_K1 * peak) ** 2
    c2 = (_K2 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    lum = (2 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2 * cov + c2) / (var_a + var_b + c2)
    return float(np.mean(lum)), float(np.mean(cs))


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = (img.shape[0] // 2) * 2, (img.shape[1] // 2) * 2
    v = img[:h, :w]
    return 0.25 * (v[0::2, 0::2] + v[1::2, 0::2] + v[0::2, 1::2] + v[1::2, 1::2])


def ms_ssim(x, x_hat, peak: float = 255.0, return_flag: bool = False):
    """Five-scale MS-SSIM, computed per channel and averaged.

    Contrast-structure and luminance terms are clamped at zero so the score
    stays in [0, 1]. Images smaller than 176 pixels on a side cannot host five
    dyadic scales of the 11-tap window; for those a single-scale SSIM is
    returned and, with ``return_flag``, the flag ``True`` alongside it.
    """
    a, b = _check_pair(x, x_hat)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    single = min(a.shape[:2]) < SSIM_WINDOW * 2 ** (len(MS_SSIM_WEIGHTS) - 1)
    scores = []
    for c in range(a.shape[-1]):
        ac, bc = a[..., c], b[..., c]
        if single:
            lum, cs = _ssim_terms(ac, bc, peak)
            scores.append(max(lum, 0.0) * max(cs, 0.0))
            continue
        score = 1.0
        for j, wgt in enumerate(MS_SSIM_WEIGHTS):
            lum, cs = _ssim_terms(ac, bc, peak)
            if j == len(MS_SSIM_WEIGHTS) - 1:
                score *= (max(lum, 0.0) * max(cs, 0.0)) ** wgt
            else:
                score *= max(cs, 0.0) ** wgt
                ac, bc = _downsample(ac), _downsample(bc)
        scores.append(score)
    value = float(min(max(np.mean(scores), 0.0), 1.0))
    return (value, single) if return_flag else value


# ---------------------------------------------------------------------------
# rate-distortion curves
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RDPoint:
    bpp: float
    psnr_db: float
    msssim: float
    tag: str = ""

    def __post_init__(self):
        if not self.bpp > 0:
            raise ValueError(f"bpp must be positive, got {self.bpp}")
        if math.isnan(self.psnr_db):
            raise ValueError("psnr is NaN")

    @property
    def lossless(self) -> bool:
        return math.isinf(self.psnr_db)

    def quality(self, axis: str) -> float:
        if axis == "psnr":
            return self.psnr_db
        if axis == "msssim":
            return self.msssim
        raise ValueError(f"quality axis must be 'psnr' or 'msssim', got {axis!r}")


@dataclass
class RDCurve:
    label: str
    points: list[RDPoint] = field(default_factory=list)

    def __post_init__(self):
        pts = sorted(self.points, key=lambda p: p.bpp)
        if len(pts) < 4:
            raise ValueError(f"an RD curve needs at least 4 points, got {len(pts)}")
        rates = [p.bpp for p in pts]
        if any(b <= a for a, b in zip(rates, rates[1:])):
            raise ValueError("duplicate bpp values in RD curve")
        self.points = pts

    @classmethod
    def from_arrays(cls, label: str, bpp, quality, axis: str = "psnr") -> "RDCurve":
        pts = []
        for r, q in zip(bpp, quality):
            pts.append(RDPoint(float(r), float(q) if axis == "psnr" else 0.0,
                               float(q) if axis == "msssim" else 0.0))
        return cls(label, pts)

    def arrays(self, axis: str = "psnr"):
        rate = np.array([p.bpp for p in self.points])
        qual = np.array([p.quality(axis) for p in self.points])
        if not np.all(np.isfinite(qual)):
            raise ValueError(f"curve {self.label!r} has a lossless point; BD-rate needs finite quality")
        return rate, qual


def bd_rate(anchor: RDCurve, test: RDCurve, quality_axis: str = "psnr") -> float:
    """Average rate difference (percent) of ``test`` against ``anchor``.

    Log-rate is fitted as a cubic in quality for each curve, both fits are
    integrated in closed form over the shared quality interval, and the mean
    log-rate gap is exponentiated. Negative values mean ``test`` needs fewer
    bits for the same quality.
    """
    ra, qa = anchor.arrays(quality_axis)
    rt, qt = test.arrays(quality_axis)
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise ValueError(f"quality ranges do not overlap: anchor [{qa.min():.4g}, {qa.max():.4g}], "
                         f"test [{qt.min():.4g}, {qt.max():.4g}]")
    pa = np.polyint(np.polyfit(qa, np.log(ra), 3))
    pt = np.polyint(np.polyfit(qt, np.log(rt), 3))
    ia = np.polyval(pa, hi) - np.polyval(pa, lo)
    it = np.polyval(pt, hi) - np.polyval(pt, lo)
    return float((math.exp((it - ia) / (hi - lo)) - 1.0) * 100.0)
