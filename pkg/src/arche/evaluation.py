"""Run the real codec over images and collect rate-distortion figures."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coder import decode_image, encode_image
from .imageio import list_images, read_ppm, to_uint8
from .metrics import RDCurve, RDPoint, ms_ssim, psnr
from .model import ArcheModel

EVAL_COLUMNS = ("file", "bpp", "psnr_db", "msssim")
RDCURVE_COLUMNS = ("lambda", "bpp", "psnr_db", "msssim")


@dataclass
class ImageResult:
    file: str
    bpp: float
    psnr_db: float
    msssim: float
    mse: float  # on [0, 1], from the 8-bit reconstruction
    n_bytes: int


def evaluate_image(model: ArcheModel, img: np.ndarray, name: str = "", variant: str | None = None):
    """Encode and decode one uint8 image; returns ``(ImageResult, bitstream bytes, reconstruction)``."""
    img = np.asarray(img, dtype=np.uint8)
    data = encode_image(img.astype(np.float64) / 255.0, model, variant=variant).to_bytes()
    recon = to_uint8(decode_image(data, model))
    h, w = img.shape[:2]
    mse = float(np.mean((img.astype(np.float64) - recon.astype(np.float64)) ** 2)) / 255.0 ** 2
    res = ImageResult(name, len(data) * 8.0 / (h * w), psnr(img, recon), ms_ssim(img, recon), mse, len(data))
    return res, data, recon


def evaluate_images(model: ArcheModel, images, names=None, variant: str | None = None) -> list[ImageResult]:
    names = names or [f"image{i}" for i in range(len(images))]
    return [evaluate_image(model, img, n, variant)[0] for img, n in zip(images, names)]


def evaluate_corpus(model: ArcheModel, corpus, variant: str | None = None) -> list[ImageResult]:
    """Evaluate every pixmap in ``corpus``, ordered by filename."""
    paths = list_images(corpus)
    if not paths:
        raise ValueError(f"no .ppm images in {corpus}")
    return [evaluate_image(model, read_ppm(p), p.name, variant)[0] for p in paths]


def mean_result(rows: list[ImageResult], name: str = "mean") -> ImageResult:
    # A lossless image would make the PSNR mean infinite; average the MSE
    # instead so the summary row stays meaningful.
    mse = float(np.mean([r.mse for r in rows]))
    mean_psnr = math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)
    if all(math.isfinite(r.psnr_db) for r in rows):
        mean_psnr = float(np.mean([r.psnr_db for r in rows]))
    return ImageResult(name, float(np.mean([r.bpp for r in rows])), mean_psnr,
                       float(np.mean([r.msssim for r in rows])), mse,
                       int(round(np.mean([r.n_bytes for r in rows]))))


def _fmt(v: float) -> str:
    return "inf" if math.isinf(v) else f"{v:.6f}"


def write_eval_csv(path, rows: list[ImageResult]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(EVAL_COLUMNS)
        for r in rows + [mean_result(rows)]:
            wr.writerow([r.file, _fmt(r.bpp), _fmt(r.psnr_db), _fmt(r.msssim)])


def write_rdcurve_csv(path, points: list[tuple[float, ImageResult]]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(RDCURVE_COLUMNS)
        for lam, r in points:
            wr.writerow([f"{lam:g}", _fmt(r.bpp), _fmt(r.psnr_db), _fmt(r.msssim)])


def read_curve_csv(path, label: str | None = None) -> RDCurve:
    """Read an rdcurve CSV (or an eval CSV, ignoring its mean row) as an RD curve."""
    pts = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"bpp", "psnr_db", "msssim"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        for row in reader:
            if row.get("file") == "mean":
                continue
            tag = row.get("lambda") or row.get("file") or ""
            pts.append(RDPoint(float(row["bpp"]), float(row["psnr_db"]), float(row["msssim"]), tag))
    return RDCurve(label or Path(path).stem, pts)
