"""Range coding of the quantized latents and the bitstream container.

Encoder and decoder drive the same schedule routine (:func:`_run_schedule`);
the only difference is whether symbols come from the latents or from the
range decoder. Every probability table is therefore computed from identical
inputs on both sides, and parameters are additionally snapped to a 1/4096
grid before table construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensors as T
from .entropy import (EntropyParams, gaussian_bin_mass, mixture_weights, rate_bits,
                      round_half_away)
from .model import ArcheModel, ModelConfig, anchor_mask
from .tensors import Tensor

PRECISION = 16
TOTAL = 1 << PRECISION
SYMBOL_LIMIT = 255
_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF

VARIANT_TAGS = {"masked_raster": 0, "checkerboard": 1, "none": 2}
TAG_VARIANTS = {v: k for k, v in VARIANT_TAGS.items()}
MAGIC = b"ARCH"
VERSION = 1


class BitstreamError(ValueError):
    """Malformed, truncated or mismatched bitstream."""

    def __init__(self, message: str, segment: int | None = None):
        super().__init__(message if segment is None else f"segment {segment}: {message}")
        self.segment = segment


# ---------------------------------------------------------------------------
# frequency tables
# ---------------------------------------------------------------------------

@dataclass
class CdfTable:
    symbol_lo: int
    symbol_hi: int
    cum: np.ndarray  # length hi - lo + 2, cum[0] = 0, cum[-1] = 2^16

    def freq(self, symbol: int) -> int:
        i = symbol - self.symbol_lo
        return int(self.cum[i + 1] - self.cum[i])


def quantize_masses(masses: np.ndarray, valid: np.ndarray | None = None) -> np.ndarray:
    """Integer counts summing to 2^16 per row, every valid entry >= 1.

    One count per symbol is reserved up front; the remaining budget is split
    in proportion to the (renormalized) masses using largest-remainder
    rounding, ties broken toward lower symbols.
    """
    masses = np.atleast_2d(np.asarray(masses, dtype=np.float64))
    if not np.all(np.isfinite(masses)):
        raise ValueError("cannot build a frequency table from non-finite masses")
    if valid is None:
        valid = np.ones(masses.shape, dtype=bool)
    n_sym = valid.sum(axis=1)
    if np.any(n_sym > TOTAL):
        raise ValueError("more symbols than frequency budget")
    p = np.where(valid, masses, 0.0)
    p = p / p.sum(axis=1, keepdims=True)
    budget = TOTAL - n_sym
    scaled = p * budget[:, None]
    base = np.floor(scaled)
    rem = np.where(valid, scaled - base, -1.0)
    deficit = budget - base.sum(axis=1)
    order = np.argsort(-rem, axis=1, kind="stable")
    rank = np.empty_like(order)
    rows = np.arange(masses.shape[0])[:, None]
    rank[rows, order] = np.arange(masses.shape[1])[None, :]
    extra = rank < deficit[:, None]
    return (base + extra + valid).astype(np.int64) * valid


def build_cdf(masses, symbol_lo: int = 0) -> CdfTable:
    """Table for consecutive symbols ``symbol_lo ...`` with the given masses."""
    masses = np.asarray(masses, dtype=np.float64).ravel()
    if masses.size == 0:
        raise ValueError("empty symbol range")
    counts = quantize_masses(masses[None])[0]
    cum = np.concatenate([[0], np.cumsum(counts)])
    return CdfTable(symbol_lo, symbol_lo + masses.size - 1, cum)


def coding_bounds(offsets: np.ndarray, sigmas: np.ndarray):
    """Inclusive symbol range per element covering ``offset +- max(16 sigma, 4)``.

    ``offsets``/``sigmas`` are ``[n, K]`` (K = 1 for a single Gaussian).
    """
    reach = np.maximum(16.0 * sigmas, 4.0)
    lo = np.floor((offsets - reach).min(axis=1))
    hi = np.ceil((offsets + reach).max(axis=1))
    lo = np.clip(lo, -SYMBOL_LIMIT, SYMBOL_LIMIT - 1).astype(np.int64)
    hi = np.clip(hi, lo + 1, SYMBOL_LIMIT).astype(np.int64)
    return lo, hi


def gaussian_table(mu: float, sigma: float, bounds: tuple[int, int] | None = None) -> CdfTable:
    """Table for a Gaussian coded about its mean (mean-centred symbols)."""
    if not (np.isfinite(mu) and np.isfinite(sigma)):
        raise ValueError("degenerate entropy parameters (NaN/inf)")
    if bounds is None:
        lo, hi = coding_bounds(np.zeros((1, 1)), np.array([[sigma]]))
        bounds = (int(lo[0]), int(hi[0]))
    symbols = np.arange(bounds[0], bounds[1] + 1)
    return build_cdf(gaussian_bin_mass(symbols, 0.0, sigma), bounds[0])


# ---------------------------------------------------------------------------
# range coder
# ---------------------------------------------------------------------------

class RangeEncoder:
    """32-bit range encoder with carry propagation and a self-delimiting flush.

    The decoder reads zeros past the end, but any other trailing bytes decode
    the same symbols.
    """

    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self._cache = 0
        self._pending = 1  # the first cached byte is a placeholder, dropped on finish
        self._out = bytearray()
        self.symbols = 0

    def encode(self, cum_lo: int, freq: int) -> None:
        r = self.range >> PRECISION
        self.low += r * cum_lo
        self.range = r * freq
        self.symbols += 1
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_bits(self, value: int, nbits: int) -> None:
        for shift in range(nbits - 1, -1, -1):
            bit = (value >> shift) & 1
            self.encode(bit << (PRECISION - 1), 1 << (PRECISION - 1))

    def _shift_low(self) -> None:
        low = self.low
        if (low & _MASK32) < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            self._out.append((self._cache + carry) & 0xFF)
            for _ in range(self._pending - 1):
                self._out.append((0xFF + carry) & 0xFF)
            self._pending = 0
            self._cache = (low >> 24) & 0xFF
        self._pending += 1
        self.low = (low << 8) & _MASK32

    def finish(self) -> bytes:
        # Emit the fewest bytes whose every continuation stays inside
        # [low, low + range): the segment then decodes whatever follows it,
        # and its length never undercuts the information it carries.
        for nbytes in range(5):
            unit = 1 << (32 - 8 * nbytes)
            v = -(-self.low // unit) * unit
            if v + unit <= self.low + self.range:
                break
        self.low = v
        for _ in range(nbytes + 1):
            self._shift_low()
        out = bytes(self._out)
        if not out or out[0] != 0:
            raise AssertionError("range coder lost its leading placeholder byte")
        return out[1:]


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.range = _MASK32
        self.code = 0
        self._r = 0
        for _ in range(4):
            self.code = (self.code << 8) | self._byte()

    def _byte(self) -> int:
        b = self.data[self.pos] if self.pos < len(self.data) else 0
        self.pos += 1
        return b

    def target(self) -> int:
        self._r = self.range >> PRECISION
        return min(self.code // self._r, TOTAL - 1)

    def consume(self, cum_lo: int, freq: int) -> None:
        self.code -= self._r * cum_lo
        self.range = self._r * freq
        while self.range < _TOP:
            self.code = (self.code << 8) | self._byte()
            self.range <<= 8

    def decode(self, cum: np.ndarray) -> int:
        """Decode one index into the table with cumulative counts ``cum``."""
        t = self.target()
        i = int(np.searchsorted(cum, t, side="right")) - 1
        self.consume(int(cum[i]), int(cum[i + 1] - cum[i]))
        return i

    def decode_bits(self, nbits: int) -> int:
        half = 1 << (PRECISION - 1)
        v = 0
        for _ in range(nbits):
            bit = 1 if self.target() >= half else 0
            self.consume(bit * half, half)
            v = (v << 1) | bit
        return v


def _put_escape(enc: RangeEncoder, value: int) -> None:
    """Exp-Golomb (order 0) in bypass bits."""
    v = value + 1
    n = v.bit_length() - 1
    enc.encode_bits(0, n)
    enc.encode_bits(v, n + 1)


def _get_escape(dec: RangeDecoder) -> int:
    n = 0
    while dec.decode_bits(1) == 0:
        n += 1
        if n > 40:
            raise BitstreamError("corrupt escape code")
    rest = dec.decode_bits(n)
    return ((1 << n) | rest) - 1


_clamped = 0


def clamp_events() -> int:
    """Symbols clamped to a table bound by :func:`range_encode` since the last reset."""
    return _clamped


def reset_clamp_events() -> None:
    global _clamped
    _clamped = 0


def range_encode(symbols, tables: list[CdfTable], escapes: bool = False) -> bytes:
    """Code ``symbols[i]`` with ``tables[i]``.

    Out-of-range symbols are clamped to the nearest bound and counted
    (:func:`clamp_events`). With ``escapes=True`` the edge symbols instead
    carry an Exp-Golomb escape so any integer survives the round trip.
    """
    global _clamped
    enc = RangeEncoder()
    for s, t in zip(symbols, tables, strict=True):
        s = int(s)
        if escapes:
            _encode_one(enc, s, t.symbol_lo, t.symbol_hi, t.cum)
            continue
        c = min(max(s, t.symbol_lo), t.symbol_hi)
        _clamped += c != s
        i = c - t.symbol_lo
        enc.encode(int(t.cum[i]), int(t.cum[i + 1] - t.cum[i]))
    return enc.finish()


def range_decode(data: bytes, tables: list[CdfTable], escapes: bool = False) -> list[int]:
    dec = RangeDecoder(data)
    if escapes:
        return [_decode_one(dec, t.symbol_lo, t.symbol_hi, t.cum) for t in tables]
    return [t.symbol_lo + dec.decode(t.cum) for t in tables]


def _encode_one(enc, s, lo, hi, cum) -> bool:
    """Encode ``s``; returns True when an escape was needed (s outside the table)."""
    c = min(max(s, lo), hi)
    i = c - lo
    enc.encode(int(cum[i]), int(cum[i + 1] - cum[i]))
    if c == lo:
        _put_escape(enc, lo - s)
    elif c == hi:
        _put_escape(enc, s - hi)
    return c != s


def _decode_one(dec, lo, hi, cum) -> int:
    s = lo + dec.decode(cum)
    if s == lo:
        s -= _get_escape(dec)
    elif s == hi:
        s += _get_escape(dec)
    return s


# ---------------------------------------------------------------------------
# bitstream container
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4sBHHBBB8s")


@dataclass
class Bitstream:
    height: int
    width: int
    variant: str
    lambda_index: int
    digest: bytes
    segments: list[bytes] = field(default_factory=list)

    @property
    def n_slices(self) -> int:
        return len(self.segments) - 1

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, VERSION, self.height, self.width, VARIANT_TAGS[self.variant],
                            self.lambda_index, self.n_slices, self.digest)
        body = b"".join(struct.pack("<I", len(s)) + s for s in self.segments)
        return head + body

    def __len__(self) -> int:
        return _HEADER.size + sum(4 + len(s) for s in self.segments)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Bitstream":
        if len(data) < _HEADER.size:
            raise BitstreamError("truncated header")
        magic, version, h, w, vtag, lam, n_slices, digest = _HEADER.unpack_from(data)
        if magic != MAGIC:
            raise BitstreamError("bad magic")
        if version != VERSION:
            raise BitstreamError(f"unsupported version {version}")
        if vtag not in TAG_VARIANTS:
            raise BitstreamError(f"unknown context variant tag {vtag}")
        off = _HEADER.size
        segments = []
        for idx in range(n_slices + 1):
            if off + 4 > len(data):
                raise BitstreamError("missing length prefix", segment=idx)
            (n,) = struct.unpack_from("<I", data, off)
            off += 4
            if off + n > len(data):
                raise BitstreamError(f"payload truncated ({len(data) - off} of {n} bytes)", segment=idx)
            segments.append(data[off:off + n])
            off += n
        if off != len(data):
            raise BitstreamError(f"{len(data) - off} trailing bytes after last segment")
        return cls(h, w, TAG_VARIANTS[vtag], lam, digest, segments)


# ---------------------------------------------------------------------------
# decode schedule
# ---------------------------------------------------------------------------

def schedule_steps(config: ModelConfig, grid: tuple[int, int], variant: str | None = None) -> int:
    """Sequential probability-evaluation steps needed per slice."""
    variant = variant or config.context_variant
    if variant == "masked_raster":
        return grid[0] * grid[1]
    if variant == "checkerboard":
        return 2
    return 1


@dataclass
class CodecTrace:
    """Everything the schedule produced; identical on both sides of a round trip."""

    z_symbols: np.ndarray | None = None
    y_symbols: list[np.ndarray] = field(default_factory=list)
    y_hat: list[np.ndarray] = field(default_factory=list)
    y_refined: list[np.ndarray] = field(default_factory=list)
    steps: list[int] = field(default_factory=list)
    rate_bits_z: float = 0.0
    rate_bits_y: float = 0.0
    escapes: int = 0
    tables_checked: int = 0
    params: list[EntropyParams] = field(default_factory=list)

    @property
    def rate_bits(self) -> float:
        return self.rate_bits_z + self.rate_bits_y


class _Side:
    """Symbol source/sink for one payload segment."""

    def __init__(self, trace: CodecTrace, payload: bytes | None = None):
        self.trace = trace
        self.decoding = payload is not None
        self.enc = None if self.decoding else RangeEncoder()
        self.dec = RangeDecoder(payload) if self.decoding else None

    def code(self, lo, hi, cum_rows, values=None) -> np.ndarray:
        n = len(lo)
        out = np.empty(n, dtype=np.int64)
        for e in range(n):
            l, h = int(lo[e]), int(hi[e])
            cum = cum_rows[e, :h - l + 2]
            if self.decoding:
                out[e] = _decode_one(self.dec, l, h, cum)
            else:
                s = int(values[e])
                if _encode_one(self.enc, s, l, h, cum):
                    self.trace.escapes += 1
                out[e] = s
        return out

    def finish(self) -> bytes:
        return self.enc.finish()


def _element_arrays(params: EntropyParams, select: np.ndarray):
    """Flatten snapped params at the selected grid cells to ``[n, K]`` arrays.

    ``select`` is a boolean ``[h, w]`` mask; elements are ordered raster-wise
    over positions with channels innermost.
    """
    if params.is_mixture:
        mu = np.moveaxis(params.mu[0], -2, -1)[select].reshape(-1, params.mu.shape[-2])
        sigma = np.moveaxis(params.sigma[0], -2, -1)[select].reshape(-1, params.mu.shape[-2])
        w = mixture_weights(np.moveaxis(params.logits[0], -2, -1)[select].reshape(-1, params.mu.shape[-2]), axis=1)
    else:
        mu = params.mu[0][select].reshape(-1, 1)
        sigma = params.sigma[0][select].reshape(-1, 1)
        w = np.ones_like(mu)
    return mu, sigma, w


def _code_elements(side: _Side, mu, sigma, w, y_values=None):
    """Code one group of elements; returns (symbols, reconstructions, masses)."""
    center = (w * mu).sum(axis=1)
    offsets = mu - center[:, None]
    lo, hi = coding_bounds(offsets, sigma)
    width = int((hi - lo).max()) + 1
    grid = lo[:, None] + np.arange(width)[None, :]
    valid = grid <= hi[:, None]
    masses = (w[:, None, :] * gaussian_bin_mass(grid[:, :, None], offsets[:, None, :],
                                                 sigma[:, None, :])).sum(axis=2)
    counts = quantize_masses(masses, valid)
    cum = np.concatenate([np.zeros((len(lo), 1), dtype=np.int64), np.cumsum(counts, axis=1)], axis=1)
    side.trace.tables_checked += len(lo)
    values = None if y_values is None else round_half_away(y_values - center)
    symbols = side.code(lo, hi, cum, values)
    sym_mass = (w * gaussian_bin_mass(symbols[:, None], offsets, sigma)).sum(axis=1)
    return symbols, symbols + center, sym_mass


def _as_numpy_params(p: EntropyParams, snap: bool, sigma_min: float) -> EntropyParams:
    if snap:
        return p.snapped(sigma_min)
    data = lambda t: None if t is None else (t.data if isinstance(t, Tensor) else t)
    return EntropyParams(data(p.mu), data(p.sigma), data(p.logits))


def _run_schedule(model: ArcheModel, hyper: Tensor, variant: str, sides: list[_Side],
                  trace: CodecTrace, y: np.ndarray | None = None, snap: bool = True):
    cfg = model.config
    h, w = hyper.shape[1], hyper.shape[2]
    refined: list[Tensor] = []
    for m, (lo_c, hi_c) in enumerate(cfg.slice_bounds):
        side = sides[m]
        sw = hi_c - lo_c
        y_m = None if y is None else y[0, :, :, lo_c:hi_c]
        cond = model.conditioning(m, hyper, refined)
        support = model.slice_transform(m, cond)
        view = np.zeros((1, h, w, sw))
        symbols = np.zeros((h, w, sw), dtype=np.int64)
        bits = 0.0
        slice_params = []

        def code_cells(params, select):
            nonlocal bits
            p = _as_numpy_params(params, snap, cfg.sigma_min)
            slice_params.append(p)
            mu, sigma, wts = _element_arrays(p, select)
            vals = None if y_m is None else y_m[select].reshape(-1)
            sym, rec, mass = _code_elements(side, mu, sigma, wts, vals)
            symbols[select] = sym.reshape(-1, sw)
            view[0][select] = rec.reshape(-1, sw)
            bits += rate_bits(mass)

        if variant == "masked_raster":
            steps = 0
            for i in range(h):
                for j in range(w):
                    ctx = model.raster_context_at(m, view, i, j)
                    params = model.param_net(m, support[:, i:i + 1, j:j + 1, :], ctx)
                    sel = np.zeros((h, w), dtype=bool)
                    sel[i, j] = True
                    code_cells(_embed(params, (h, w), i, j), sel)
                    steps += 1
        elif variant == "checkerboard":
            anchors = anchor_mask(h, w).astype(bool)
            for tag, sel in (("anchor", anchors), ("non_anchor", ~anchors)):
                ctx = model.context_features(m, Tensor(view), pass_tag=tag)
                if sel.any():
                    code_cells(model.param_net(m, support, ctx), sel)
            steps = 2
        else:
            ctx = model.context_features(m, Tensor(view), variant="none")
            code_cells(model.param_net(m, support, ctx), np.ones((h, w), dtype=bool))
            steps = 1

        ref = model.lrp(m, cond, Tensor(view))
        refined.append(ref)
        trace.y_symbols.append(symbols)
        trace.y_hat.append(view[0].copy())
        trace.y_refined.append(ref.data[0].copy())
        trace.steps.append(steps)
        trace.rate_bits_y += bits
        trace.params.append(slice_params)
    return refined


def _embed(params: EntropyParams, grid, i, j) -> EntropyParams:
    """Place single-position params into a full-grid layout (other cells unused)."""
    def put(t):
        if t is None:
            return None
        a = t.data if isinstance(t, Tensor) else t
        full = np.ones((1,) + tuple(grid) + a.shape[3:])
        full[:, i, j] = a[:, 0, 0]
        return full
    return EntropyParams(put(params.mu), put(params.sigma), put(params.logits))


# ---------------------------------------------------------------------------
# image-level codec
# ---------------------------------------------------------------------------

def pad_to_multiple(x: np.ndarray, multiple: int = 16) -> np.ndarray:
    """Reflect-pad an ``[H, W, C]`` image at the bottom/right to a multiple."""
    h, w = x.shape[:2]
    ph, pw = (-h) % multiple, (-w) % multiple
    if not ph and not pw:
        return x
    mode = "reflect" if ph < h and pw < w else "symmetric" if ph <= h and pw <= w else "edge"
    return np.pad(x, ((0, ph), (0, pw), (0, 0)), mode=mode)


def _z_tables(model: ArcheModel):
    lo, hi = model.prior.coding_bounds()
    hi = np.maximum(hi, lo + 1)
    width = int((hi - lo).max()) + 1
    grid = lo[None, :] + np.arange(width)[:, None]          # [width, C]
    valid = (grid <= hi[None, :]).T                          # [C, width]
    masses = model.prior.bin_mass(grid.astype(np.float64)).T  # [C, width]
    counts = quantize_masses(masses, valid)
    cum = np.concatenate([np.zeros((len(lo), 1), dtype=np.int64), np.cumsum(counts, axis=1)], axis=1)
    return lo, hi, cum


def _code_z(model: ArcheModel, side: _Side, shape, z: np.ndarray | None):
    lo, hi, cum = _z_tables(model)
    c = shape[-1]
    n = int(np.prod(shape[:-1]))
    chan = np.tile(np.arange(c), n)
    values = None if z is None else round_half_away(z).reshape(-1)
    symbols = side.code(lo[chan], hi[chan], cum[chan], values)
    return symbols.reshape(shape).astype(np.float64)


def _resolve_variant(model: ArcheModel, variant: str | None) -> str:
    variant = variant or model.config.context_variant
    if variant not in VARIANT_TAGS:
        raise ValueError(f"unknown context variant {variant!r}")
    if variant != "none" and variant != model.config.context_variant:
        raise ValueError(f"model was built for {model.config.context_variant!r} context; "
                         f"it can code with that variant or 'none', not {variant!r}")
    return variant


def encode_image(x: np.ndarray, model: ArcheModel, variant: str | None = None,
                 return_trace: bool = False):
    """Compress an ``[H, W, 3]`` image in [0, 1] to a :class:`Bitstream`."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ValueError(f"expected an [H, W, 3] image, got {x.shape}")
    if max(x.shape[:2]) > 0xFFFF:
        raise ValueError("image extents exceed 65535")
    variant = _resolve_variant(model, variant)
    trace = CodecTrace()
    with T.no_grad():
        xp = pad_to_multiple(x)
        y = model.analysis(Tensor(xp[None]))
        z = model.hyper_analysis(y)
        z_side = _Side(trace)
        z_hat = _code_z(model, z_side, z.shape, z.data)
        trace.z_symbols = z_hat.astype(np.int64)
        trace.rate_bits_z = rate_bits(model.prior.bin_mass(z_hat))
        hyper = model.hyper_synthesis(Tensor(z_hat), (y.shape[1], y.shape[2]))
        sides = [_Side(trace) for _ in range(model.config.n_slices)]
        _run_schedule(model, hyper, variant, sides, trace, y=y.data)
    bs = Bitstream(x.shape[0], x.shape[1], variant, model.config.lambda_index(), model.digest(),
                   [z_side.finish()] + [s.finish() for s in sides])
    return (bs, trace) if return_trace else bs


def decode_image(bitstream: Bitstream | bytes, model: ArcheModel, return_trace: bool = False):
    """Reconstruct the ``[H, W, 3]`` image (float, clipped to [0, 1])."""
    if isinstance(bitstream, (bytes, bytearray)):
        bitstream = Bitstream.from_bytes(bytes(bitstream))
    if bitstream.digest != model.digest():
        raise BitstreamError("config/weight digest mismatch: bitstream was made with other weights")
    if bitstream.n_slices != model.config.n_slices:
        raise BitstreamError(f"bitstream has {bitstream.n_slices} slices, model {model.config.n_slices}")
    variant = _resolve_variant(model, bitstream.variant)
    trace = CodecTrace()
    ph = bitstream.height + (-bitstream.height) % 16
    pw = bitstream.width + (-bitstream.width) % 16
    h, w = ph // 16, pw // 16
    hz, wz = -(-h // 4), -(-w // 4)
    with T.no_grad():
        z_side = _Side(trace, bitstream.segments[0])
        z_hat = _code_z(model, z_side, (1, hz, wz, model.config.hyper_depth), None)
        trace.z_symbols = z_hat.astype(np.int64)
        trace.rate_bits_z = rate_bits(model.prior.bin_mass(z_hat))
        hyper = model.hyper_synthesis(Tensor(z_hat), (h, w))
        sides = [_Side(trace, seg) for seg in bitstream.segments[1:]]
        refined = _run_schedule(model, hyper, variant, sides, trace)
        x_hat = model.synthesis(T.concat(refined, axis=-1)).data[0]
    x_hat = np.clip(x_hat[:bitstream.height, :bitstream.width], 0.0, 1.0)
    return (x_hat, trace) if return_trace else x_hat
