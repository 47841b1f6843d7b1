"""Symmetric sub-channelwise quantization of latent rows.

Each row of length ``dim`` is cut into contiguous groups of ``group_size``
elements. A group shares one scale ``S = max|x| / I_max`` and its codes are
``clip(round_half_even(x / S), -I_max, I_max)`` with ``I_max = 2**(bits-1) - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, custom_op

__all__ = [
    "QuantConfig", "QuantizedBlock", "QuantConfigError",
    "quantize", "dequantize", "fake_quant", "pack_codes", "unpack_codes",
]

# Pre-rounding values within this margin of I_max count as in range; derived
# scales put the group maximum at I_max up to float rounding.
_RANGE_SLACK = 1e-4


class QuantConfigError(ValueError):
    pass


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    group_size: int = 32
    eps: float = 1e-8
    ste: str = "clipped"  # or "identity"

    def __post_init__(self):
        if not 2 <= self.bits <= 16:
            raise QuantConfigError(f"bits must lie in [2, 16], got {self.bits}")
        if self.group_size < 1:
            raise QuantConfigError(f"group_size must be positive, got {self.group_size}")
        if self.ste not in ("clipped", "identity"):
            raise QuantConfigError(f"unknown STE mode {self.ste!r}")

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def qmin(self) -> int:
        return -self.qmax

    def validate(self, dim: int) -> None:
        if dim % self.group_size:
            raise QuantConfigError(f"group size {self.group_size} does not divide latent dim {dim}")
        if (dim * self.bits) % 8:
            raise QuantConfigError(f"{dim} codes of {self.bits} bits do not fill whole bytes")

    def n_groups(self, dim: int) -> int:
        self.validate(dim)
        return dim // self.group_size


@dataclass
class QuantizedBlock:
    """Packed codes plus one scale per group, for one or more latent rows.

    ``codes`` has shape ``[..., dim * bits // 8]`` (uint8) and ``scales`` has
    shape ``[..., dim // group_size]`` (float32).
    """

    codes: np.ndarray
    scales: np.ndarray
    bits: int
    group_size: int

    @property
    def dim(self) -> int:
        return self.codes.shape[-1] * 8 // self.bits

    def unpacked(self) -> np.ndarray:
        return unpack_codes(self.codes, self.bits, self.dim)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedBlock):
            return NotImplemented
        return (self.bits == other.bits and self.group_size == other.group_size
                and self.codes.shape == other.codes.shape
                and self.codes.tobytes() == other.codes.tobytes()
                and self.scales.tobytes() == other.scales.tobytes())


def pack_codes(codes: np.ndarray, bits: int) -> np.ndarray:
    """Pack signed integer codes as little-endian two's-complement bit fields.

    For 4 bits this puts two codes in a byte, low nibble first.
    """
    codes = np.asarray(codes)
    lead, dim = codes.shape[:-1], codes.shape[-1]
    u = (codes.astype(np.int32) & ((1 << bits) - 1)).astype(np.uint16)
    bitplanes = ((u[..., None] >> np.arange(bits, dtype=np.uint16)) & 1).astype(np.uint8)
    packed = np.packbits(bitplanes.reshape(*lead, dim * bits), axis=-1, bitorder="little")
    return packed


def unpack_codes(packed: np.ndarray, bits: int, dim: int) -> np.ndarray:
    lead = packed.shape[:-1]
    flat = np.unpackbits(packed, axis=-1, count=dim * bits, bitorder="little")
    planes = flat.reshape(*lead, dim, bits).astype(np.int32)
    u = (planes << np.arange(bits, dtype=np.int32)).sum(axis=-1)
    signed = np.where(u >= (1 << (bits - 1)), u - (1 << bits), u)
    return signed.astype(np.int8 if bits <= 8 else np.int16)


def _scales_and_ratio(x: np.ndarray, cfg: QuantConfig, scale=None):
    dim = x.shape[-1]
    groups = x.reshape(*x.shape[:-1], cfg.n_groups(dim), cfg.group_size)
    if scale is None:
        amax = np.abs(groups).max(axis=-1)
        s = (amax / x.dtype.type(cfg.qmax)).astype(np.float32)
        # all-zero groups, and subnormal maxima whose scale underflows, fall back to eps
        s = np.where(s == 0, np.float32(cfg.eps), s).astype(np.float32)
    else:
        s = np.broadcast_to(np.asarray(scale, dtype=np.float32), groups.shape[:-1]).copy()
        if (s <= 0).any():
            raise QuantConfigError("explicit scales must be positive")
    ratio = groups / s[..., None].astype(x.dtype)
    return s, ratio


def _codes(ratio: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    return np.clip(np.rint(ratio), cfg.qmin, cfg.qmax)


def quantize(c, cfg: QuantConfig, scale=None) -> QuantizedBlock:
    """Quantize rows of ``c`` (array or Tensor, last axis = latent dim).

    ``scale`` optionally fixes the per-group scales instead of deriving them
    from the group maxima; elements beyond ``I_max * S`` then saturate.
    """
    x = c.data if isinstance(c, Tensor) else np.asarray(c, dtype=np.float32)
    if not np.isfinite(x).all():
        raise ValueError("cannot quantize non-finite values")
    s, ratio = _scales_and_ratio(x, cfg, scale)
    q = _codes(ratio, cfg).astype(np.int32).reshape(x.shape)
    return QuantizedBlock(pack_codes(q, cfg.bits), s, cfg.bits, cfg.group_size)


def dequantize(q: QuantizedBlock, dtype=np.float32) -> np.ndarray:
    codes = q.unpacked().astype(dtype)
    g = codes.reshape(*codes.shape[:-1], -1, q.group_size)
    return (g * q.scales[..., None].astype(dtype)).reshape(codes.shape)


def fake_quant(c: Tensor, cfg: QuantConfig, scale=None) -> Tensor:
    """Quantize-dequantize in the forward pass, straight-through in the backward.

    With ``cfg.ste == "clipped"`` the gradient is zeroed where the scaled value
    falls outside ``[I_min, I_max]``; ``"identity"`` passes it everywhere.
    The forward value is bit-identical to ``dequantize(quantize(c))``.
    """
    x = c.data
    s, ratio = _scales_and_ratio(x, cfg, scale)
    codes = _codes(ratio, cfg)
    y = (codes * s[..., None].astype(x.dtype)).reshape(x.shape).astype(x.dtype, copy=False)
    if cfg.ste == "clipped":
        keep = (np.abs(ratio) <= cfg.qmax + _RANGE_SLACK).reshape(x.shape)
        backward = lambda g: (np.where(keep, g, 0.0).astype(g.dtype, copy=False),)  # noqa: E731
    else:
        backward = lambda g: (g,)  # noqa: E731
    return custom_op("fake_quant", (c,), y, backward)
