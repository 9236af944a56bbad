"""The codec network: transforms, hyperprior, slice pipeline and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensors as T
from .entropy import (SIGMA_MIN, EntropyParams, FactorizedPrior, gaussian_params,
                      gmm_params)
from .layers import GdnParams, MaskedKernel, SeParams, gdn, masked_conv, se_block
from .tensors import Tensor

CONTEXT_VARIANTS = ("masked_raster", "checkerboard", "none")
ENTROPY_VARIANTS = ("gaussian", "gmm")
LAMBDA_GRID = (0.001, 0.005, 0.007, 0.01, 0.03, 0.05, 0.07, 0.1)
# Variance gain for the main transforms. Their convolutions feed GDN/IGDN
# (near-identity at initialization) or the output rather than a ReLU, so the
# ReLU-compensating gain of 2 would double the signal variance at each of the
# eight layers. A gain of 1 keeps the initial reconstruction in range.
MAIN_GAIN = 1.0


@dataclass
class ModelConfig:
    main_channels: int = 32
    latent_depth: int = 64
    hyper_depth: int = 32
    hyper_hidden: int = 48
    hyper_synth_widths: tuple[int, int] = (32, 48)
    slice_widths: tuple[int, ...] = (16, 16, 16, 16)
    slice_hidden: int = 48
    slice_mid: int = 32
    se_reduction: int = 16
    channel_features: int = 16
    context_width: int = 32
    context_layers: int = 2
    param_hidden: int = 64
    lrp_hidden: int = 32
    context_variant: str = "masked_raster"
    entropy_variant: str = "gaussian"
    mixtures: int = 3
    use_se: bool = True
    hyper_masked: bool = True
    sigma_min: float = SIGMA_MIN
    lmbda: float = 0.01

    def __post_init__(self):
        self.hyper_synth_widths = tuple(self.hyper_synth_widths)
        self.slice_widths = tuple(int(w) for w in self.slice_widths)
        if sum(self.slice_widths) != self.latent_depth:
            raise ValueError(f"slice widths {self.slice_widths} sum to {sum(self.slice_widths)}, "
                             f"not latent_depth={self.latent_depth}")
        if self.slice_hidden % self.se_reduction:
            raise ValueError(f"SE reduction {self.se_reduction} does not divide "
                             f"slice_hidden={self.slice_hidden}")
        if self.context_variant not in CONTEXT_VARIANTS:
            raise ValueError(f"context_variant must be one of {CONTEXT_VARIANTS}")
        if self.entropy_variant not in ENTROPY_VARIANTS:
            raise ValueError(f"entropy_variant must be one of {ENTROPY_VARIANTS}")
        if self.mixtures < 1:
            raise ValueError("mixtures must be >= 1")
        if self.context_layers < 1:
            raise ValueError("context_layers must be >= 1")
        if self.lmbda <= 0:
            raise ValueError("lmbda must be positive")

    @property
    def n_slices(self) -> int:
        return len(self.slice_widths)

    @property
    def slice_bounds(self) -> list[tuple[int, int]]:
        edges = np.concatenate([[0], np.cumsum(self.slice_widths)])
        return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:])]

    @property
    def mixture_k(self) -> int:
        return self.mixtures if self.entropy_variant == "gmm" else 1

    @property
    def context_radius(self) -> int:
        """Receptive-field radius of the raster context stack."""
        return 2 + (self.context_layers - 1)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hyper_synth_widths"] = list(self.hyper_synth_widths)
        d["slice_widths"] = list(self.slice_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def desk(cls, **changes) -> "ModelConfig":
        return cls(**changes)

    @classmethod
    def desk_checkerboard(cls, **changes) -> "ModelConfig":
        """Checkerboard context with content-adaptive slice widths scaled to depth 64."""
        changes.setdefault("slice_widths", (24, 16, 12, 12))
        return cls(context_variant="checkerboard", **changes)

    @classmethod
    def full(cls, **changes) -> "ModelConfig":
        base = dict(main_channels=192, latent_depth=320, hyper_depth=192, hyper_hidden=256,
                    hyper_synth_widths=(192, 256), slice_widths=(32,) * 10, slice_hidden=224,
                    slice_mid=128, channel_features=64, context_width=192, param_hidden=256,
                    lrp_hidden=128)
        base.update(changes)
        return cls(**base)

    @classmethod
    def full_checkerboard(cls, **changes) -> "ModelConfig":
        changes.setdefault("slice_widths", (48, 40, 36, 32, 32, 32, 28, 24, 24, 24))
        return cls.full(context_variant="checkerboard", **changes)

    def lambda_index(self) -> int:
        for i, lam in enumerate(LAMBDA_GRID):
            if math.isclose(lam, self.lmbda, rel_tol=1e-9):
                return i
        return 255


# ---------------------------------------------------------------------------
# weight initialization
# ---------------------------------------------------------------------------

def _conv_init(params, rng, name, k, cin, cout, transposed=False, stride=1, gain=2.0):
    # Zero-mean normal with variance gain / fan_in, on the fan-in each output
    # actually sees (a strided transposed conv reaches k*k/stride^2 taps).
    fan_in = k * k * cin / (stride * stride if transposed else 1)
    shape = (k, k, cout, cin) if transposed else (k, k, cin, cout)
    params[f"{name}.kernel"] = Tensor(rng.normal(0.0, math.sqrt(gain / fan_in), shape), True)
    params[f"{name}.bias"] = Tensor(np.zeros(cout), True)


def _gdn_init(params, name, c):
    params[f"{name}.beta"] = Tensor(np.ones(c), True)
    params[f"{name}.gamma"] = Tensor(0.01 * np.eye(c), True)


def init_weights(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}
    c = config
    n, ld = c.main_channels, c.latent_depth

    widths = [3, n, n, n, ld]
    for i in range(4):
        _conv_init(p, rng, f"g_a.{i}", 5, widths[i], widths[i + 1], gain=MAIN_GAIN)
        if i < 3:
            _gdn_init(p, f"g_a.{i}.gdn", widths[i + 1])
    widths = [ld, n, n, n, 3]
    for i in range(4):
        _conv_init(p, rng, f"g_s.{i}", 5, widths[i], widths[i + 1], transposed=True, stride=2,
                   gain=MAIN_GAIN)
        if i < 3:
            _gdn_init(p, f"g_s.{i}.igdn", widths[i + 1])

    _conv_init(p, rng, "h_a.0", 3, ld, ld)
    _conv_init(p, rng, "h_a.1", 5, ld, c.hyper_hidden)
    _conv_init(p, rng, "h_a.2", 5, c.hyper_hidden, c.hyper_depth)
    h0, h1 = c.hyper_synth_widths
    _conv_init(p, rng, "h_s.0", 5, c.hyper_depth, h0, transposed=True, stride=2)
    _conv_init(p, rng, "h_s.1", 3, h0, h0)
    _conv_init(p, rng, "h_s.2", 5, h0, h1, transposed=True, stride=2)
    _conv_init(p, rng, "h_s.3", 3, h1, h1)
    _conv_init(p, rng, "h_s.4", 3, h1, ld, transposed=True, stride=1)

    p.update(FactorizedPrior.init_params(c.hyper_depth, rng))

    k = c.mixture_k
    for m, sw in enumerate(c.slice_widths):
        s = f"slice.{m}"
        prev = sum(c.slice_widths[:m])
        if m > 0:
            _conv_init(p, rng, f"{s}.chan.0", 3, prev, c.channel_features)
            _conv_init(p, rng, f"{s}.chan.1", 3, c.channel_features, c.channel_features)
        cond = ld + c.channel_features
        _conv_init(p, rng, f"{s}.transform.0", 5, cond, c.slice_hidden)
        hid = c.slice_hidden // c.se_reduction
        p[f"{s}.se.w1"] = Tensor(rng.normal(0, math.sqrt(2.0 / c.slice_hidden), (c.slice_hidden, hid)), True)
        p[f"{s}.se.w2"] = Tensor(rng.normal(0, math.sqrt(2.0 / hid), (hid, c.slice_hidden)), True)
        _conv_init(p, rng, f"{s}.transform.1", 5, c.slice_hidden, c.slice_mid)
        _conv_init(p, rng, f"{s}.transform.2", 3, c.slice_mid, sw)
        if c.context_variant == "masked_raster":
            _conv_init(p, rng, f"{s}.context.0", 5, sw, c.context_width)
            for layer in range(1, c.context_layers):
                _conv_init(p, rng, f"{s}.context.{layer}", 3, c.context_width, c.context_width)
        elif c.context_variant == "checkerboard":
            _conv_init(p, rng, f"{s}.context.0", 3, sw, c.context_width)
        _conv_init(p, rng, f"{s}.param.0", 1, sw + c.context_width, c.param_hidden)
        out = 2 * sw if c.entropy_variant == "gaussian" else 3 * k * sw
        _conv_init(p, rng, f"{s}.param.1", 1, c.param_hidden, out)
        _conv_init(p, rng, f"{s}.lrp.0", 3, cond + sw, c.lrp_hidden)
        _conv_init(p, rng, f"{s}.lrp.1", 3, c.lrp_hidden, sw)
        p[f"{s}.lrp.scale"] = Tensor(np.array(0.5), True)
    return p


def anchor_mask(h: int, w: int) -> np.ndarray:
    """1.0 where (i + j) is even."""
    i, j = np.indices((h, w))
    return ((i + j) % 2 == 0).astype(np.float64)


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

@dataclass
class ForwardResult:
    x_hat: Tensor
    y: Tensor
    z: Tensor
    z_hat: Tensor
    z_likelihood: Tensor
    y_hat: list[Tensor]
    y_likelihoods: list[Tensor]
    params: list[EntropyParams] = field(repr=False)

    def total_bits(self):
        from .entropy import rate_bits_tensor
        bits = rate_bits_tensor(self.z_likelihood)
        for lik in self.y_likelihoods:
            bits = bits + rate_bits_tensor(lik)
        return bits


class ArcheModel:
    """Network graph over a flat ``name -> Tensor`` weight dictionary."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.config = config
        self.params = init_weights(config, seed) if params is None else params
        self.prior = FactorizedPrior(self.params)

    # -- small helpers ------------------------------------------------------
    def _conv(self, name, x, stride=1, transposed=False):
        out = T.conv2d(x, self.params[f"{name}.kernel"], stride=stride, transposed=transposed)
        return out + self.params[f"{name}.bias"]

    def _masked(self, name, x, mask_type):
        mk = MaskedKernel(self.params[f"{name}.kernel"], mask_type)
        return masked_conv(x, mk, self.params[f"{name}.bias"])

    def _gdn(self, name, x, inverse=False):
        return gdn(x, GdnParams(self.params[f"{name}.beta"], self.params[f"{name}.gamma"], inverse))

    def gdn_params(self) -> list[GdnParams]:
        out = []
        for key in self.params:
            if key.endswith(".beta"):
                base = key[:-len(".beta")]
                out.append(GdnParams(self.params[key], self.params[f"{base}.gamma"], base.endswith("igdn")))
        return out

    # -- transforms -----------------------------------------------------------
    def analysis(self, x) -> Tensor:
        x = T.as_tensor(x)
        h, w = x.shape[-3], x.shape[-2]
        if h % 16 or w % 16:
            raise ValueError(f"image extents {h}x{w} must be divisible by 16 (pad first)")
        for i in range(4):
            x = self._conv(f"g_a.{i}", x, stride=2)
            if i < 3:
                x = self._gdn(f"g_a.{i}.gdn", x)
        return x

    def synthesis(self, y_refined) -> Tensor:
        x = T.as_tensor(y_refined)
        for i in range(4):
            x = self._conv(f"g_s.{i}", x, stride=2, transposed=True)
            if i < 3:
                x = self._gdn(f"g_s.{i}.igdn", x, inverse=True)
        return x

    def hyper_analysis(self, y) -> Tensor:
        z = T.relu(self._conv("h_a.0", y))
        z = T.relu(self._conv("h_a.1", z, stride=2))
        return self._conv("h_a.2", z, stride=2)

    def hyper_synthesis(self, z_hat, grid: tuple[int, int]) -> Tensor:
        """Upsample the hyper-latent back onto the latent grid ``grid``."""
        f = T.relu(self._conv("h_s.0", z_hat, stride=2, transposed=True))
        if self.config.hyper_masked:
            f = self._masked("h_s.1", f, "B")
        f = T.relu(self._conv("h_s.2", f, stride=2, transposed=True))
        if self.config.hyper_masked:
            f = self._masked("h_s.3", f, "B")
        f = self._conv("h_s.4", f, stride=1, transposed=True)
        h, w = grid
        if f.shape[-3] != h or f.shape[-2] != w:
            f = f[..., :h, :w, :]
        return f

    # -- slice pipeline ---------------------------------------------------------
    def channel_features(self, m: int, refined_prev: list) -> Tensor:
        """Features from refined slices ``0..m-1``; an all-zero tensor for m = 0."""
        c = self.config
        if m == 0:
            raise ValueError("slice 0 has no previous slices; use zero_channel_features")
        x = T.concat(refined_prev, axis=-1)
        x = T.relu(self._conv(f"slice.{m}.chan.0", x))
        return self._conv(f"slice.{m}.chan.1", x)

    def zero_channel_features(self, like: Tensor) -> Tensor:
        return Tensor(np.zeros(like.shape[:-1] + (self.config.channel_features,)))

    def conditioning(self, m: int, hyper: Tensor, refined_prev: list) -> Tensor:
        """Hyper features concatenated with channel features for slice ``m``."""
        if not 0 <= m < self.config.n_slices:
            raise IndexError(f"slice index {m} out of range [0, {self.config.n_slices})")
        chan = self.zero_channel_features(hyper) if m == 0 else self.channel_features(m, refined_prev)
        return T.concat([hyper, chan], axis=-1)

    def slice_transform(self, m: int, cond: Tensor) -> Tensor:
        s = f"slice.{m}"
        h = T.relu(self._conv(f"{s}.transform.0", cond))
        if self.config.use_se:
            h = se_block(h, SeParams(self.params[f"{s}.se.w1"], self.params[f"{s}.se.w2"],
                                     self.config.se_reduction))
        h = T.relu(self._conv(f"{s}.transform.1", h))
        return self._conv(f"{s}.transform.2", h)

    def _raster_stack(self, m: int, y_hat_m) -> Tensor:
        s = f"slice.{m}"
        f = self._masked(f"{s}.context.0", y_hat_m, "A")
        for layer in range(1, self.config.context_layers):
            f = self._masked(f"{s}.context.{layer}", T.sigmoid(f), "B")
        return f

    def raster_context_at(self, m: int, view: np.ndarray, i: int, j: int) -> Tensor:
        """Raster context at one position, computed on the window that reaches it.

        Matches the full-grid stack exactly: positions outside the image are
        zeroed between layers just as the full convolution zero-pads them.
        """
        r = self.config.context_radius
        h, w = view.shape[-3], view.shape[-2]
        padded = np.pad(view, ((0, 0), (r, r), (r, r), (0, 0)))
        window = Tensor(padded[:, i:i + 2 * r + 1, j:j + 2 * r + 1, :])
        rows = np.arange(i - r, i + r + 1)
        cols = np.arange(j - r, j + r + 1)
        inside = ((rows[:, None] >= 0) & (rows[:, None] < h) & (cols[None, :] >= 0)
                  & (cols[None, :] < w)).astype(np.float64)[:, :, None]
        s = f"slice.{m}"
        f = self._masked(f"{s}.context.0", window, "A")
        for layer in range(1, self.config.context_layers):
            f = self._masked(f"{s}.context.{layer}", T.sigmoid(f) * inside, "B")
        return f[:, r:r + 1, r:r + 1, :]

    def context_features(self, m: int, y_hat_m, pass_tag: str | None = None,
                         variant: str | None = None) -> Tensor:
        """Spatial context for slice ``m`` from its (partially) decoded latents.

        For the checkerboard variant ``pass_tag`` selects ``"anchor"`` (zero
        context), ``"non_anchor"`` (cross-kernel over anchors) or ``None``
        (both passes merged, as used in training).
        """
        variant = variant or self.config.context_variant
        y_hat_m = T.as_tensor(y_hat_m)
        zeros_shape = y_hat_m.shape[:-1] + (self.config.context_width,)
        if variant == "none" or (variant == "checkerboard" and pass_tag == "anchor"):
            return Tensor(np.zeros(zeros_shape))
        if variant == "masked_raster":
            return self._raster_stack(m, y_hat_m)
        h, w = y_hat_m.shape[-3], y_hat_m.shape[-2]
        anchors = anchor_mask(h, w)[:, :, None]
        f = self._masked(f"slice.{m}.context.0", y_hat_m * anchors, "checkerboard")
        return f * (1.0 - anchors)

    def param_net(self, m: int, support: Tensor, context: Tensor) -> EntropyParams:
        s = f"slice.{m}"
        c = self.config
        h = T.relu(self._conv(f"{s}.param.0", T.concat([support, context], axis=-1)))
        raw = self._conv(f"{s}.param.1", h)
        sw = c.slice_widths[m]
        if c.entropy_variant == "gaussian":
            return gaussian_params(raw, sw, c.sigma_min)
        return gmm_params(raw, sw, c.mixtures, c.sigma_min)

    def lrp(self, m: int, cond: Tensor, y_hat_m) -> Tensor:
        """Refined slice y_hat + scale * softsign(r), r predicted from cond and y_hat."""
        s = f"slice.{m}"
        r = T.relu(self._conv(f"{s}.lrp.0", T.concat([cond, y_hat_m], axis=-1)))
        r = self._conv(f"{s}.lrp.1", r)
        return y_hat_m + self.params[f"{s}.lrp.scale"] * T.softsign(r)

    def slice_pipeline(self, m: int, y_hat_m, hyper: Tensor, refined_prev: list,
                       context: Tensor | None = None):
        """Entropy parameters and refined latents for slice ``m`` given decoded ``y_hat_m``."""
        cond = self.conditioning(m, hyper, refined_prev)
        support = self.slice_transform(m, cond)
        if context is None:
            context = self.context_features(m, y_hat_m)
        params = self.param_net(m, support, context)
        return params, self.lrp(m, cond, y_hat_m)

    # -- full training forward -----------------------------------------------------
    def forward(self, x, rng: np.random.Generator) -> ForwardResult:
        """Noise-relaxed forward pass used for training and rate estimation."""
        y = self.analysis(x)
        z = self.hyper_analysis(y)
        z_hat = z + rng.uniform(-0.5, 0.5, size=z.shape)
        z_lik = self.prior.likelihood(z_hat)
        hyper = self.hyper_synthesis(z_hat, (y.shape[-3], y.shape[-2]))
        refined, y_hats, liks, all_params = [], [], [], []
        for m, (lo, hi) in enumerate(self.config.slice_bounds):
            y_m = y[..., lo:hi]
            y_hat_m = y_m + rng.uniform(-0.5, 0.5, size=y_m.shape)
            params, ref = self.slice_pipeline(m, y_hat_m, hyper, refined)
            liks.append(params.likelihood(y_hat_m))
            y_hats.append(y_hat_m)
            refined.append(ref)
            all_params.append(params)
        x_hat = self.synthesis(T.concat(refined, axis=-1))
        return ForwardResult(x_hat, y, z, z_hat, z_lik, y_hats, liks, all_params)

    # -- persistence ------------------------------------------------------------------
    def digest(self) -> bytes:
        """8-byte fingerprint of the config and every weight."""
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name in sorted(self.params):
            arr = np.ascontiguousarray(self.params[name].data, dtype="<f8")
            h.update(name.encode())
            h.update(struct.pack("<I", arr.ndim))
            h.update(arr.tobytes())
        return h.digest()[:8]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.params.values())


# ---------------------------------------------------------------------------
# checkpoint file
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"ARCW"
CKPT_VERSION = 1


def save_checkpoint(path, model: ArcheModel, extra: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    """Write ``name -> shape + little-endian fp64`` records after a JSON header."""
    header = json.dumps({"config": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    entries = {name: t.data for name, t in model.params.items()}
    for name, arr in (extra or {}).items():
        entries[name] = np.asarray(arr, dtype=np.float64)
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<BI", CKPT_VERSION, len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(entries)))
    for name in sorted(entries):
        arr = np.ascontiguousarray(entries[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, extra, meta)``; ``extra`` holds non-weight records (optimizer state)."""
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a weight checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<BI", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 9
    header = json.loads(data[off:off + hlen])
    off += hlen
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off:off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", data, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
        arrays[name] = arr
    config = ModelConfig.from_dict(header["config"])
    expected = init_weights(config, seed=0).keys()
    missing = set(expected) - set(arrays)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks weights {sorted(missing)[:5]}")
    params = {name: Tensor(arrays.pop(name), True) for name in expected}
    return ArcheModel(config, params), arrays, header.get("meta", {})
