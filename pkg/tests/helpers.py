"""Shared test utilities: finite differences and tiny configurations."""

from __future__ import annotations

import numpy as np

from arche import tensors as T
from arche.model import ModelConfig
from arche.tensors import Tensor

FD_STEP = 1e-5
REL_FLOOR = 1e-6


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(fn, arr: np.ndarray, indices, h: float = FD_STEP) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. ``arr`` at flat ``indices`` (in place)."""
    flat = arr.reshape(-1)
    out = np.empty(len(indices))
    for k, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + h
        up = fn()
        flat[i] = old - h
        down = fn()
        flat[i] = old
        out[k] = (up - down) / (2 * h)
    return out


def check_op_grad(build, inputs: list[np.ndarray], seed: int = 0, max_checks: int = 40):
    """Largest relative error of ``d sum(w * build(*inputs)) / d inputs``.

    A fixed random weighting ``w`` turns any output into a scalar with a
    generic gradient.
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a.copy(), True) for a in inputs]
    out = build(*tensors)
    weight = rng.normal(size=out.shape)
    (out * weight).sum().backward()

    def scalar():
        with T.no_grad():
            return float((build(*[Tensor(t.data) for t in tensors]).data * weight).sum())

    worst = 0.0
    for t in tensors:
        idx = rng.choice(t.size, size=min(max_checks, t.size), replace=False)
        num = numeric_grad(scalar, t.data, idx)
        worst = max(worst, float(rel_error(t.grad.reshape(-1)[idx], num).max()))
    return worst


def tiny_config(**changes) -> ModelConfig:
    base = dict(main_channels=8, latent_depth=16, hyper_depth=8, hyper_hidden=8,
                hyper_synth_widths=(8, 8), slice_widths=(4, 4, 4, 4), slice_hidden=16,
                slice_mid=8, se_reduction=4, channel_features=4, context_width=8,
                param_hidden=8, lrp_hidden=8)
    base.update(changes)
    return ModelConfig(**base)
