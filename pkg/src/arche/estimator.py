"""scikit-learn style wrapper: ``fit`` trains, ``transform`` encodes, ``inverse_transform`` decodes."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .coder import decode_image, encode_image
from .imageio import to_uint8
from .model import ArcheModel, ModelConfig, load_checkpoint
from .training import LAMBDA_SCALE, TrainConfig, train


def check_image(img, name: str = "image") -> np.ndarray:
    """Return an ``[H, W, 3]`` uint8 copy of ``img``.

    Floats are read as [0, 1] intensities; integer arrays must already be in
    0..255.
    """
    a = np.asarray(img)
    if a.ndim != 3 or a.shape[-1] != 3:
        raise ValueError(f"{name}: expected shape [H, W, 3], got {a.shape}")
    if min(a.shape[:2]) < 1:
        raise ValueError(f"{name}: empty image")
    if a.dtype == np.uint8:
        return a.copy()
    if np.issubdtype(a.dtype, np.integer):
        if a.min() < 0 or a.max() > 255:
            raise ValueError(f"{name}: integer pixels must lie in 0..255")
        return a.astype(np.uint8)
    if np.issubdtype(a.dtype, np.floating):
        if not np.all(np.isfinite(a)):
            raise ValueError(f"{name}: contains NaN or inf")
        if a.min() < 0.0 or a.max() > 1.0:
            raise ValueError(f"{name}: float pixels must lie in [0, 1]")
        return to_uint8(a)
    raise ValueError(f"{name}: unsupported dtype {a.dtype}")


def check_images(X) -> list[np.ndarray]:
    """Validate a batch: an ``[N, H, W, 3]`` array or a sequence of images."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        raise ValueError("expected a batch of images; wrap a single image in a list")
    images = [check_image(x, f"X[{i}]") for i, x in enumerate(X)]
    if not images:
        raise ValueError("no images given")
    return images


class ArcheCodec(BaseEstimator, TransformerMixin):
    """Trainable learned image codec.

    Parameters mirror the training and architecture options most often
    varied in experiments; anything else can be passed as ``model_options``.
    """

    def __init__(self, lmbda=0.01, steps=2000, batch_size=8, learning_rate=1e-3, crop_size=64,
                 context_variant="masked_raster", entropy_variant="gaussian", slice_widths=None,
                 use_se=True, model_options=None, seed=0):
        self.lmbda = lmbda
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.crop_size = crop_size
        self.context_variant = context_variant
        self.entropy_variant = entropy_variant
        self.slice_widths = slice_widths
        self.use_se = use_se
        self.model_options = model_options
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        opts = dict(self.model_options or {})
        opts.update(context_variant=self.context_variant, entropy_variant=self.entropy_variant,
                    use_se=self.use_se, lmbda=self.lmbda)
        if self.slice_widths is not None:
            opts["slice_widths"] = tuple(self.slice_widths)
        elif self.context_variant == "checkerboard":
            return ModelConfig.desk_checkerboard(**opts)
        return ModelConfig.desk(**opts)

    def fit(self, X, y=None):
        images = check_images(X)
        small = [i for i, im in enumerate(images) if min(im.shape[:2]) < self.crop_size]
        if len(small) == len(images):
            raise ValueError(f"every image is smaller than crop_size={self.crop_size}")
        images = [im for i, im in enumerate(images) if i not in small]
        cfg = TrainConfig(lmbda=self.lmbda, batch_size=self.batch_size, learning_rate=self.learning_rate,
                          steps=self.steps, crop_size=self.crop_size, seed=self.seed,
                          model=self._model_config())
        res = train(cfg, images=images)
        self.model_ = res.model
        self.loss_curve_ = [r.total for r in res.trace]
        self.n_parameters_ = self.model_.n_parameters()
        return self

    @classmethod
    def from_checkpoint(cls, path) -> "ArcheCodec":
        model, _, _ = load_checkpoint(path)
        c = model.config
        est = cls(lmbda=c.lmbda, context_variant=c.context_variant, entropy_variant=c.entropy_variant,
                  slice_widths=c.slice_widths, use_se=c.use_se, steps=0)
        est.model_ = model
        est.loss_curve_ = []
        est.n_parameters_ = model.n_parameters()
        return est

    def transform(self, X) -> list[bytes]:
        """Encode each image to bitstream bytes."""
        check_is_fitted(self, "model_")
        return [encode_image(im / 255.0, self.model_).to_bytes() for im in check_images(X)]

    def inverse_transform(self, bitstreams) -> list[np.ndarray]:
        """Decode bitstreams back to uint8 images."""
        check_is_fitted(self, "model_")
        return [to_uint8(decode_image(bytes(b), self.model_)) for b in bitstreams]

    def predict(self, X) -> list[np.ndarray]:
        """Round-trip reconstruction of each image."""
        return self.inverse_transform(self.transform(X))

    def score(self, X, y=None) -> float:
        """Negative mean rate-distortion cost (bpp + lambda * 255^2 * MSE) of real coding."""
        check_is_fitted(self, "model_")
        images = check_images(X)
        costs = []
        for im, data in zip(images, self.transform(images)):
            rec = to_uint8(decode_image(data, self.model_)).astype(np.float64)
            mse = np.mean((rec - im) ** 2) / 255.0 ** 2
            bpp = len(data) * 8.0 / (im.shape[0] * im.shape[1])
            costs.append(bpp + self.lmbda * LAMBDA_SCALE * mse)
        return -float(np.mean(costs))
