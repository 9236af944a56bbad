"""Rate-distortion training: loss, Adam, corpus crops and the training loop."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import yaml

from . import tensors as T
from .imageio import list_images, read_ppm
from .layers import GdnParams
from .model import LAMBDA_GRID, ArcheModel, ModelConfig, load_checkpoint, save_checkpoint
from .tensors import Tensor

log = logging.getLogger(__name__)

LAMBDA_SCALE = 255.0 ** 2


@dataclass
class TrainConfig:
    lmbda: float = 0.01
    batch_size: int = 8
    learning_rate: float = 1e-4
    steps: int = 2000
    crop_size: int = 64
    seed: int = 0
    corpus: str | None = None
    out_dir: str | None = None
    checkpoint_every: int = 500
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.lmbda <= 0:
            raise ValueError("lambda must be positive")
        if self.crop_size % 16:
            raise ValueError(f"crop_size {self.crop_size} is not divisible by 16")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be >= 1 and steps >= 0")
        if self.lmbda not in LAMBDA_GRID:
            log.info("lambda %g is outside the standard eight-point sweep", self.lmbda)
        self.model = self.model.replace(lmbda=self.lmbda)

    @classmethod
    def desk(cls, **changes) -> "TrainConfig":
        """Desk-scale preset; the larger step size suits the short schedules."""
        changes.setdefault("learning_rate", 1e-3)
        return cls(**changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Read a YAML (or JSON) mapping of the fields above."""
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: expected a mapping of training options")
        if "lambda" in raw:
            raw["lmbda"] = raw.pop("lambda")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise ValueError(f"{path}: unknown training options {sorted(unknown)}")
        return cls(**raw)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

@dataclass
class RdLossBreakdown:
    total: Tensor
    rate_bpp: float
    distortion_mse: float
    lmbda_eff: float


def rd_loss(x, model: ArcheModel, lmbda: float, rng: np.random.Generator) -> RdLossBreakdown:
    """``R + lambda * 255^2 * D`` with R in bits per pixel and D the MSE on [0, 1]."""
    x = T.as_tensor(x)
    if x.ndim != 4:
        raise ValueError(f"expected a batch [N, H, W, 3], got {x.shape}")
    n, h, w = x.shape[:3]
    if h % 16 or w % 16:
        raise ValueError(f"crop extents {h}x{w} must be divisible by 16")
    out = model.forward(x, rng)
    rate = out.total_bits() * (1.0 / (n * h * w))
    diff = out.x_hat - x
    mse = T.reduce("mean", diff * diff)
    lam = lmbda * LAMBDA_SCALE
    total = rate + mse * lam
    return RdLossBreakdown(total, rate.item(), mse.item(), lam)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def to_records(self) -> dict[str, np.ndarray]:
        rec = {"adam/t": np.array(float(self.t))}
        rec.update({f"adam/m/{k}": a for k, a in self.m.items()})
        rec.update({f"adam/v/{k}": a for k, a in self.v.items()})
        return rec

    @classmethod
    def from_records(cls, rec: dict[str, np.ndarray]) -> "AdamState":
        st = cls(t=int(np.ravel(rec.get("adam/t", 0.0))[0]))
        for key, arr in rec.items():
            if key.startswith("adam/m/"):
                st.m[key[len("adam/m/"):]] = arr.copy()
            elif key.startswith("adam/v/"):
                st.v[key[len("adam/v/"):]] = arr.copy()
        return st


def adam_step(weights: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              gdn: list[GdnParams] | None = None) -> None:
    """Bias-corrected Adam update in place, then project GDN parameters back."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name, w in weights.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.setdefault(name, np.zeros_like(w.data))
        v = state.v.setdefault(name, np.zeros_like(w.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        w.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    for p in gdn or ():
        p.reproject()


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

@dataclass
class CorpusStats:
    loaded: int = 0
    skipped_small: int = 0
    malformed: int = 0


def crop_positions(height: int, width: int, crop: int) -> int:
    """Number of valid top-left corners for a ``crop x crop`` window."""
    return max(height - crop + 1, 0) * max(width - crop + 1, 0)


def load_corpus(path, crop_size: int, stats: CorpusStats | None = None) -> list[np.ndarray]:
    stats = stats if stats is not None else CorpusStats()
    images = []
    for p in list_images(path):
        try:
            img = read_ppm(p)
        except ValueError as exc:
            stats.malformed += 1
            warnings.warn(f"skipping {p.name}: {exc}", stacklevel=2)
            continue
        if img.shape[0] < crop_size or img.shape[1] < crop_size:
            stats.skipped_small += 1
            warnings.warn(f"skipping {p.name}: {img.shape[1]}x{img.shape[0]} is smaller than "
                          f"the {crop_size} crop", stacklevel=2)
            continue
        images.append(img)
        stats.loaded += 1
    return images


def ingest_corpus(path, crop_size: int = 64, seed: int = 0, epochs: int | None = None,
                  stats: CorpusStats | None = None, images: list[np.ndarray] | None = None
                  ) -> Iterator[np.ndarray]:
    """Yield ``[crop, crop, 3]`` float crops in [0, 1], one per image per epoch.

    Image order and crop corners are redrawn every epoch from a seeded
    generator, so the sequence is reproducible.
    """
    if images is None:
        images = load_corpus(path, crop_size, stats)
    if not images:
        raise ValueError(f"no usable images of at least {crop_size}x{crop_size} in {path}")
    rng = np.random.default_rng(seed)
    epoch = 0
    while epochs is None or epoch < epochs:
        for idx in rng.permutation(len(images)):
            img = images[idx]
            top = int(rng.integers(0, img.shape[0] - crop_size + 1))
            left = int(rng.integers(0, img.shape[1] - crop_size + 1))
            yield img[top:top + crop_size, left:left + crop_size].astype(np.float64) / 255.0
        epoch += 1


def batches(crops: Iterator[np.ndarray], batch_size: int) -> Iterator[np.ndarray]:
    while True:
        batch = [next(crops) for _ in range(batch_size)]
        yield np.stack(batch)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TraceRow:
    step: int
    total: float
    rate_bpp: float
    mse: float


@dataclass
class TrainResult:
    model: ArcheModel
    trace: list[TraceRow]
    checkpoint: Path | None
    state: AdamState


class TrainingDiverged(FloatingPointError):
    pass


def train(config: TrainConfig, model: ArcheModel | None = None,
          images: list[np.ndarray] | None = None, progress=None) -> TrainResult:
    """Run ``config.steps`` Adam steps; writes checkpoints and ``trace.csv`` if ``out_dir`` is set."""
    if images is None and config.corpus is None:
        raise ValueError("training needs a corpus directory or preloaded images")
    model = model if model is not None else ArcheModel(config.model, seed=config.seed)
    state = AdamState()
    crops = ingest_corpus(config.corpus, config.crop_size, seed=config.seed, images=images)
    feed = batches(crops, config.batch_size)
    noise = np.random.default_rng(config.seed + 1)
    out = Path(config.out_dir) if config.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    gdn = model.gdn_params()
    trace: list[TraceRow] = []
    ckpt = None
    meta = {"train": {k: v for k, v in config.to_dict().items() if k != "model"}}

    def write_ckpt(step: int) -> Path:
        path = out / f"step{step:06d}.ckpt"
        save_checkpoint(path, model, extra=state.to_records(), meta={**meta, "step": step})
        save_checkpoint(out / "final.ckpt", model, extra=state.to_records(), meta={**meta, "step": step})
        return out / "final.ckpt"

    for step in range(config.steps):
        x = next(feed)
        for p in model.params.values():
            p.grad = None
        loss = rd_loss(x, model, config.lmbda, noise)
        if not math.isfinite(loss.total.item()):
            raise TrainingDiverged(f"non-finite loss at step {step}: rate={loss.rate_bpp} "
                                   f"mse={loss.distortion_mse}")
        loss.total.backward()
        grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
        adam_step(model.params, grads, state, config.learning_rate, gdn=gdn)
        trace.append(TraceRow(step, loss.total.item(), loss.rate_bpp, loss.distortion_mse))
        if progress is not None:
            progress(trace[-1])
        if out is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            ckpt = write_ckpt(step + 1)

    if out is not None:
        ckpt = write_ckpt(config.steps)
        with open(out / "trace.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["step", "total", "rate_bpp", "mse"])
            for r in trace:
                wr.writerow([r.step, repr(r.total), repr(r.rate_bpp), repr(r.mse)])
    return TrainResult(model, trace, ckpt, state)


def resume(path):
    """Load a checkpoint written by :func:`train` with its optimizer state."""
    model, extra, meta = load_checkpoint(path)
    return model, AdamState.from_records(extra), meta
