"""Codec building blocks: GDN/IGDN, causal masked convolutions, and SE gating."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensors as T
from .tensors import Tensor

BETA_MIN = 1e-6
_GATE_SPAN = 1.0 - 2.0 ** -52
_GATE_FLOOR = 2.0 ** -53


@dataclass
class GdnParams:
    beta: Tensor   # [C], kept >= BETA_MIN
    gamma: Tensor  # [C, C], gamma[i, j] weights x_j^2 in the norm of channel i
    inverse: bool = False

    def reproject(self) -> None:
        """Clip parameters back into the feasible set after an optimizer step."""
        np.maximum(self.beta.data, BETA_MIN, out=self.beta.data)
        np.maximum(self.gamma.data, 0.0, out=self.gamma.data)


def gdn(x, params: GdnParams) -> Tensor:
    """y_i = x_i / sqrt(beta_i + sum_j gamma_ij x_j^2); the inverse multiplies."""
    x = T.as_tensor(x)
    c = x.shape[-1]
    if params.beta.shape != (c,) or params.gamma.shape != (c, c):
        raise ValueError(f"GDN params sized for {params.beta.shape[0]} channels, input has {c}")
    sq = x * x
    norm = T.linear(sq, params.gamma, transpose=True) + params.beta
    root = T.power(norm, 0.5)
    return x * root if params.inverse else x / root


def mask_pattern(k: int, mask_type: str) -> np.ndarray:
    """Binary ``[k, k]`` raster-causal mask.

    Type A zeroes the centre and every tap after it in raster order; type B
    keeps the centre.
    """
    if k % 2 == 0:
        raise ValueError("mask size must be odd")
    if mask_type not in ("A", "B"):
        raise ValueError(f"mask type must be 'A' or 'B', got {mask_type!r}")
    flat = np.zeros(k * k)
    centre = (k * k) // 2
    flat[:centre + (1 if mask_type == "B" else 0)] = 1.0
    return flat.reshape(k, k)


def checkerboard_pattern(k: int = 3) -> np.ndarray:
    """Cross-shaped mask selecting the four edge-adjacent neighbours."""
    if k != 3:
        raise ValueError("checkerboard context uses a 3x3 kernel")
    return np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass
class MaskedKernel:
    kernel: Tensor  # [k, k, Cin, Cout]
    mask_type: str  # "A", "B", or "checkerboard"

    @property
    def mask(self) -> np.ndarray:
        k = self.kernel.shape[0]
        m = checkerboard_pattern(k) if self.mask_type == "checkerboard" else mask_pattern(k, self.mask_type)
        return m[:, :, None, None]


def masked_conv(x, mk: MaskedKernel, bias=None, stride: int = 1) -> Tensor:
    if stride != 1:
        raise ValueError("masked convolutions never downsample (stride must be 1)")
    # The mask is applied on every call so masked taps stay inert whatever
    # the optimizer did to the raw kernel.
    out = T.conv2d(x, mk.kernel * mk.mask, stride=1)
    return out if bias is None else out + bias


@dataclass
class SeParams:
    w1: Tensor  # [C, C/r]
    w2: Tensor  # [C/r, C]
    r: int

    def __post_init__(self):
        c = self.w1.shape[0]
        if c % self.r:
            raise ValueError(f"reduction ratio {self.r} does not divide {c} channels")
        if self.w1.shape != (c, c // self.r) or self.w2.shape != (c // self.r, c):
            raise ValueError("SE weight shapes inconsistent with channel count and ratio")


def se_gates(x, params: SeParams) -> Tensor:
    """Per-channel gates sig(W2 relu(W1 s)) with s the spatial mean of each channel."""
    x = T.as_tensor(x)
    squeeze = T.reduce("mean", x, axes=(-3, -2))
    hidden = T.relu(T.linear(squeeze, params.w1))
    # The fp64 logistic rounds to exactly 0 or 1 for large inputs; an affine
    # squeeze by one ulp keeps gates strictly inside (0, 1) and maps 0.5 to 0.5.
    return T.sigmoid(T.linear(hidden, params.w2)) * _GATE_SPAN + _GATE_FLOOR


def se_block(x, params: SeParams) -> Tensor:
    x = T.as_tensor(x)
    if x.shape[-1] != params.w1.shape[0]:
        raise ValueError(f"SE block expects {params.w1.shape[0]} channels, got {x.shape[-1]}")
    gates = se_gates(x, params)
    lead = gates.shape[:-1]
    return x * T.reshape(gates, lead + (1, 1, x.shape[-1]))
