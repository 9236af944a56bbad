"""Quantization, discretized likelihoods and rate accounting.

Latents are coded about their predicted mean: the symbol is
``round(y - mu)`` and the reconstruction ``symbol + mu``. Likelihoods are the
probability a distribution assigns to the unit bin around a value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from . import tensors as T
from .tensors import Tensor

SIGMA_MIN = 0.11
TAIL_MASS = 2.0 ** -16
MASS_FLOOR = 2.0 ** -64
SNAP = 4096.0

_floored = 0


def floor_events() -> int:
    """Number of likelihoods clamped to the 2^-64 floor since the last reset."""
    return _floored


def reset_floor_events() -> None:
    global _floored
    _floored = 0


def round_half_away(v):
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize(y, mu=None, mode: str = "infer", rng: np.random.Generator | None = None):
    """Return ``(y_hat, symbols)``.

    ``train`` adds Uniform[-0.5, 0.5) noise and returns no symbols; ``infer``
    rounds ``y - mu`` half away from zero.
    """
    if mode == "train":
        if rng is None:
            raise ValueError("train-mode quantization needs an rng")
        y = T.as_tensor(y)
        return y + rng.uniform(-0.5, 0.5, size=y.shape), None
    if mode != "infer":
        raise ValueError(f"unknown quantization mode {mode!r}")
    y = y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64)
    mu = np.zeros_like(y) if mu is None else (mu.data if isinstance(mu, Tensor) else np.asarray(mu, dtype=np.float64))
    if y.shape != mu.shape:
        raise ValueError(f"shape mismatch: y {y.shape} vs mu {mu.shape}")
    symbols = round_half_away(y - mu)
    return symbols + mu, symbols.astype(np.int64)


# ---------------------------------------------------------------------------
# bin masses (numpy, used for coding tables and reference checks)
# ---------------------------------------------------------------------------

def gaussian_bin_mass(symbol, mu, sigma):
    """Mass of N(mu, sigma^2) on the unit bin centred at ``symbol``.

    Evaluated on the side of the distribution nearer the mean so the
    difference of CDFs never cancels catastrophically.
    """
    v = np.abs(np.asarray(symbol, dtype=np.float64) - mu)
    sigma = np.asarray(sigma, dtype=np.float64)
    return special.ndtr((0.5 - v) / sigma) - special.ndtr((-0.5 - v) / sigma)


def mixture_weights(logits, axis: int = 0):
    logits = np.asarray(logits, dtype=np.float64)
    e = np.exp(logits - logits.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def gmm_bin_mass(symbol, means, sigmas, logits, axis: int = 0):
    """Mixture mass: sum_k w_k * gaussian_bin_mass(symbol, mu_k, sigma_k)."""
    w = mixture_weights(logits, axis=axis)
    return (w * gaussian_bin_mass(np.expand_dims(symbol, axis) if np.ndim(symbol) else symbol,
                                  means, sigmas)).sum(axis=axis)


def rate_bits(*masses) -> float:
    """Total information content -sum log2(mass), masses floored at 2^-64."""
    global _floored
    total = 0.0
    for m in masses:
        m = np.asarray(m, dtype=np.float64)
        low = m < MASS_FLOOR
        _floored += int(low.sum())
        total -= float(np.log2(np.where(low, MASS_FLOOR, m)).sum())
    return total


def rate_bits_tensor(mass: Tensor) -> Tensor:
    """Differentiable counterpart of :func:`rate_bits` for one mass tensor."""
    global _floored
    _floored += int((mass.data < MASS_FLOOR).sum())
    return T.reduce("sum", T.log(T.clamp_min(mass, MASS_FLOOR))) * (-1.0 / math.log(2.0))


def gaussian_likelihood(values, mu, sigma) -> Tensor:
    """Differentiable Gaussian bin mass at (possibly non-integer) values."""
    v = T.absolute(T.as_tensor(values) - mu)
    upper = T.normal_cdf((0.5 - v) / sigma)
    lower = T.normal_cdf((-0.5 - v) / sigma)
    return upper - lower


# ---------------------------------------------------------------------------
# conditional parameters
# ---------------------------------------------------------------------------

def _snap(a: np.ndarray) -> np.ndarray:
    return np.round(a * SNAP) / SNAP


@dataclass
class EntropyParams:
    """Per-element conditional distribution.

    Gaussian: ``mu`` and ``sigma`` shaped like the latent ``[..., C]``.
    Mixture: ``mu``, ``sigma`` and ``logits`` shaped ``[..., K, C]``.
    Fields hold Tensors on the training path and arrays on the coding path.
    """

    mu: object
    sigma: object
    logits: object = None

    @property
    def is_mixture(self) -> bool:
        return self.logits is not None

    def likelihood(self, values) -> Tensor:
        if not self.is_mixture:
            return gaussian_likelihood(values, self.mu, self.sigma)
        values = T.as_tensor(values)
        vals = T.reshape(values, values.shape[:-1] + (1, values.shape[-1]))
        comp = gaussian_likelihood(vals, self.mu, self.sigma)
        w = T.softmax(self.logits, axis=-2)
        return T.reduce("sum", w * comp, axes=-2)

    # -- coding-path helpers (arrays) ----------------------------------------
    def snapped(self, sigma_min: float = SIGMA_MIN) -> "EntropyParams":
        """Snap to a 1/4096 grid so encoder and decoder build identical tables."""
        data = lambda t: t.data if isinstance(t, Tensor) else np.asarray(t)
        return EntropyParams(
            _snap(data(self.mu)),
            np.maximum(_snap(data(self.sigma)), sigma_min),
            None if self.logits is None else _snap(data(self.logits)),
        )

    def center(self) -> np.ndarray:
        """Quantization centre: the mean, or the mixture mean."""
        mu = self.mu.data if isinstance(self.mu, Tensor) else self.mu
        if not self.is_mixture:
            return mu
        logits = self.logits.data if isinstance(self.logits, Tensor) else self.logits
        return (mixture_weights(logits, axis=-2) * mu).sum(axis=-2)


def gaussian_params(raw: Tensor, width: int, sigma_min: float = SIGMA_MIN) -> EntropyParams:
    """Split a ``2*width`` channel output into means and softplus scales."""
    mu = raw[..., :width]
    sigma = T.softplus(raw[..., width:]) + sigma_min
    return EntropyParams(mu, sigma)


def gmm_params(raw: Tensor, width: int, k: int, sigma_min: float = SIGMA_MIN) -> EntropyParams:
    """Split a ``3*k*width`` channel output into K means, scales and logits."""
    lead = raw.shape[:-1]
    r = T.reshape(raw, lead + (3, k, width))
    mu = r[..., 0, :, :]
    sigma = T.softplus(r[..., 1, :, :]) + sigma_min
    logits = r[..., 2, :, :]
    return EntropyParams(mu, sigma, logits)


# ---------------------------------------------------------------------------
# factorized prior for the hyper-latent
# ---------------------------------------------------------------------------

class FactorizedPrior:
    """Per-channel learned CDF built from a chain of monotone units.

    The logit of the CDF is ``f_K(...f_1(x))`` where each unit applies a
    positive (softplus-reparameterized) matrix, a bias, and the monotone
    nonlinearity ``u + tanh(a) * tanh(u)``.
    """

    filters = (3, 3, 3)

    def __init__(self, params: dict[str, Tensor], prefix: str = "prior.z"):
        self.params = params
        self.prefix = prefix

    @classmethod
    def init_params(cls, channels: int, rng: np.random.Generator, prefix: str = "prior.z",
                    init_scale: float = 1.0) -> dict[str, Tensor]:
        dims = (1,) + cls.filters + (1,)
        scale = init_scale ** (1.0 / (len(cls.filters) + 1))
        out = {}
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            out[f"{prefix}.matrix.{i}"] = Tensor(np.full((channels, dims[i + 1], dims[i]), init), True)
            out[f"{prefix}.bias.{i}"] = Tensor(rng.uniform(-0.5, 0.5, (channels, dims[i + 1])), True)
            if i < len(dims) - 2:
                out[f"{prefix}.factor.{i}"] = Tensor(np.zeros((channels, dims[i + 1])), True)
        return out

    @property
    def channels(self) -> int:
        return self.params[f"{self.prefix}.matrix.0"].shape[0]

    def logits(self, x) -> Tensor:
        """CDF logits for values ``x`` shaped ``[..., C]``."""
        x = T.as_tensor(x)
        lead = x.shape[:-1]
        c = x.shape[-1]
        v = T.reshape(x, (-1, c, 1))
        n_layers = len(self.filters) + 1
        for i in range(n_layers):
            mat = T.softplus(self.params[f"{self.prefix}.matrix.{i}"])
            v = T.einsum("mci,coi->mco", v, mat) + self.params[f"{self.prefix}.bias.{i}"]
            if i < n_layers - 1:
                v = v + T.tanh(self.params[f"{self.prefix}.factor.{i}"]) * T.tanh(v)
        return T.reshape(v, lead + (c,))

    def likelihood(self, values) -> Tensor:
        """Differentiable bin mass CDF(v + 1/2) - CDF(v - 1/2) per element."""
        values = T.as_tensor(values)
        lower = self.logits(values - 0.5)
        upper = self.logits(values + 0.5)
        # Work in the tail nearer zero: flip the sign when both logits are positive.
        sign = np.where(lower.data + upper.data > 0, -1.0, 1.0)
        return (T.sigmoid(upper * sign) - T.sigmoid(lower * sign)) * sign

    def cdf(self, x) -> np.ndarray:
        with T.no_grad():
            return special.expit(self.logits(x).data)

    def bin_mass(self, symbols) -> np.ndarray:
        """Array version of :meth:`likelihood` for integer symbols ``[..., C]``."""
        with T.no_grad():
            return self.likelihood(np.asarray(symbols, dtype=np.float64)).data

    def coding_bounds(self, tail_mass: float = TAIL_MASS, limit: int = 255):
        """Per-channel inclusive ``(lo, hi)`` symbol ranges holding all but ``tail_mass``."""
        edges = np.arange(-limit, limit + 1, dtype=np.float64)
        grid = np.repeat(edges[:, None], self.channels, axis=1)
        lower_cdf = self.cdf(grid - 0.5)   # P(X < s - 1/2)
        upper_cdf = self.cdf(grid + 0.5)   # P(X < s + 1/2)
        lo = np.empty(self.channels, dtype=np.int64)
        hi = np.empty(self.channels, dtype=np.int64)
        for c in range(self.channels):
            below = np.nonzero(lower_cdf[:, c] <= tail_mass / 2)[0]
            above = np.nonzero(1.0 - upper_cdf[:, c] <= tail_mass / 2)[0]
            lo[c] = edges[below[-1]] if below.size else -limit
            hi[c] = edges[above[0]] if above.size else limit
            if hi[c] < lo[c]:
                lo[c], hi[c] = hi[c], lo[c]
        return lo, hi


def factorized_bin_mass(symbol, channel: int, prior: FactorizedPrior) -> float:
    vals = np.zeros((1, prior.channels))
    vals[0, channel] = symbol
    return float(prior.bin_mass(vals)[0, channel])
