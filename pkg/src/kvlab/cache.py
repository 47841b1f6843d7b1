"""KV cache storage, its binary file format, and the cache-memory accountant.

Cache file layout (all integers little-endian)::

    magic      4s   b"KVLC"
    version    u16  1
    flags      u16  bit 0: latent stored packed
    digest     32s  sha256 of the canonical config JSON
    cfg_len    u32  + cfg_len bytes of config JSON
    n_layers   u32  + n_layers x u64 tokens processed per layer
    n_entries  u32  then per entry:
        layer u16, name_len u8, name, kind u8 (0 float32, 1 packed),
        ndim u8, ndim x u32 dims, payload_len u64, payload
    trailer    4s   b"END."

Float payloads are raw float32. Packed payloads are the bit-packed codes
followed by the float32 group scales; ``dims`` then describe the code array
``[B, S, latent_dim]``.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import AttnConfig, AttnConfigError
from .quant import QuantConfig, QuantizedBlock, dequantize, quantize
from .tensor import Tensor, concat

__all__ = [
    "KVCache", "StateError", "FormatError", "MemoryReport", "memory_bytes",
    "serialize_cache", "deserialize_cache", "cache_append", "config_digest",
    "paper_methods", "format_reports",
]

MAGIC = b"KVLC"
VERSION = 1
TRAILER = b"END."
SHARED_NAMES = ("k", "v", "h", "c")


class StateError(RuntimeError):
    """Cache used out of order or written from the wrong layer."""


class FormatError(ValueError):
    """A serialized cache is malformed, truncated, or of another version."""


def config_digest(cfg: AttnConfig) -> bytes:
    return hashlib.sha256(_cfg_json(cfg)).digest()


def _cfg_json(cfg: AttnConfig) -> bytes:
    return json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":")).encode()


class KVCache:
    """Per-decode-stream cache with producer indirection.

    Shared entries (``k``, ``v``, ``h``, ``c``) live only in the producer's
    slot; a consumer reading them is routed there, so a sharing group holds
    exactly one copy. ``k_rope`` is per-layer except for ``clla_share_krope``.

    With ``packed=True`` (quantized latent variants only) latents are stored as
    :class:`QuantizedBlock` payloads and dequantized on read.
    """

    def __init__(self, cfg: AttnConfig, packed: bool = False):
        if packed and cfg.quant is None:
            raise AttnConfigError("packed storage needs a quantized latent config")
        self.cfg = cfg
        self.packed = packed
        self.steps = [0] * cfg.n_layers
        self._dense: dict[tuple[int, str], list[Tensor]] = {}
        self._blocks: dict[tuple[int, str], list[QuantizedBlock]] = {}

    # --- indirection ---------------------------------------------------------

    def owner(self, layer: int, name: str) -> int:
        cfg = self.cfg
        if name in SHARED_NAMES:
            return cfg.source(layer)
        if name == "k_rope":
            return cfg.source(layer) if cfg.variant == "clla_share_krope" else layer
        raise KeyError(f"unknown cache entry {name!r}")

    def positions(self, layer: int, n_new: int) -> np.ndarray:
        """Absolute positions of ``n_new`` tokens entering ``layer``; advances the layer."""
        start = self.steps[layer]
        self.steps[layer] = start + n_new
        return np.arange(start, start + n_new)

    @property
    def n_tokens(self) -> int:
        if len(set(self.steps)) > 1:
            raise StateError(f"layers disagree on token count: {self.steps}")
        return self.steps[0]

    # --- storage -------------------------------------------------------------

    def append(self, layer: int, name: str, x: Tensor) -> None:
        owner = self.owner(layer, name)
        if owner != layer:
            raise StateError(f"layer {layer} is a consumer of {name!r}; only layer {owner} writes it")
        if x.ndim < 2:
            raise StateError(f"cache rows need a [B, S, ...] payload, got {x.shape}")
        key = (layer, name)
        if self.packed and name == "c":
            self._blocks.setdefault(key, []).append(quantize(x.data, self.cfg.quant))
        else:
            self._dense.setdefault(key, []).append(x)

    def rows(self, layer: int, name: str) -> int:
        key = (self.owner(layer, name), name)
        if key in self._blocks:
            return sum(b.codes.shape[1] for b in self._blocks[key])
        return sum(t.shape[1] for t in self._dense.get(key, []))

    def read(self, layer: int, name: str) -> Tensor:
        """All cached rows of ``name`` visible to ``layer``, in token order."""
        key = (self.owner(layer, name), name)
        have, want = self.rows(layer, name), self.steps[layer]
        if have != want:
            raise StateError(
                f"layer {layer} needs {want} rows of {name!r} from layer {key[0]}, found {have}")
        if key in self._blocks:
            return Tensor._wrap(dequantize(_join_blocks(self._blocks[key])), False)
        return concat(self._dense[key], axis=1)

    def keys(self) -> list[tuple[int, str]]:
        return sorted(set(self._dense) | set(self._blocks))

    def allocated_bytes(self, scalar_bytes: int = 2, scale_bytes: int = 2) -> int:
        """Bytes held, counting float entries at ``scalar_bytes`` each."""
        total = 0
        for chunks in self._dense.values():
            total += sum(t.data.size for t in chunks) * scalar_bytes
        for blocks in self._blocks.values():
            total += sum(b.codes.size + b.scales.size * scale_bytes for b in blocks)
        return total

    def __eq__(self, other) -> bool:
        if not isinstance(other, KVCache):
            return NotImplemented
        return serialize_cache(self) == serialize_cache(other)


def cache_append(cache: KVCache, layer: int, name: str, payload: Tensor) -> None:
    cache.append(layer, name, payload)


def _join_blocks(blocks: list[QuantizedBlock]) -> QuantizedBlock:
    if len(blocks) == 1:
        return blocks[0]
    b0 = blocks[0]
    return QuantizedBlock(np.concatenate([b.codes for b in blocks], axis=1),
                          np.concatenate([b.scales for b in blocks], axis=1),
                          b0.bits, b0.group_size)


# --- serialization -------------------------------------------------------------

def serialize_cache(cache: KVCache) -> bytes:
    out = io.BytesIO()
    cfg_bytes = _cfg_json(cache.cfg)
    out.write(struct.pack("<4sHH32sI", MAGIC, VERSION, int(cache.packed),
                          hashlib.sha256(cfg_bytes).digest(), len(cfg_bytes)))
    out.write(cfg_bytes)
    out.write(struct.pack("<I", len(cache.steps)))
    out.write(struct.pack(f"<{len(cache.steps)}Q", *cache.steps))
    keys = cache.keys()
    out.write(struct.pack("<I", len(keys)))
    for layer, name in keys:
        nb = name.encode()
        if (layer, name) in cache._blocks:
            blk = _join_blocks(cache._blocks[(layer, name)])
            dims = blk.codes.shape[:-1] + (blk.dim,)
            payload = blk.codes.tobytes() + blk.scales.astype("<f4").tobytes()
            kind = 1
        else:
            arr = np.concatenate([t.data for t in cache._dense[(layer, name)]], axis=1)
            dims = arr.shape
            payload = arr.astype("<f4").tobytes()
            kind = 0
        out.write(struct.pack("<HB", layer, len(nb)) + nb)
        out.write(struct.pack(f"<BB{len(dims)}I", kind, len(dims), *dims))
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
    out.write(TRAILER)
    return out.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"truncated cache stream at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize_cache(data: bytes) -> KVCache:
    """Rebuild a cache; raises :class:`FormatError` without returning partial state."""
    r = _Reader(bytes(data))
    magic, version, flags, digest, cfg_len = r.unpack("<4sHH32sI")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported cache version {version} (reader is {VERSION})")
    cfg_bytes = r.take(cfg_len)
    if hashlib.sha256(cfg_bytes).digest() != digest:
        raise FormatError("config digest mismatch")
    try:
        cfg = AttnConfig.from_dict(json.loads(cfg_bytes))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"unreadable config: {exc}") from exc
    cache = KVCache(cfg, packed=bool(flags & 1))
    (n_layers,) = r.unpack("<I")
    if n_layers != cfg.n_layers:
        raise FormatError(f"layer table has {n_layers} entries for a {cfg.n_layers}-layer config")
    cache.steps = list(r.unpack(f"<{n_layers}Q"))
    (n_entries,) = r.unpack("<I")
    for _ in range(n_entries):
        layer, name_len = r.unpack("<HB")
        name = r.take(name_len).decode("ascii", errors="replace")
        kind, ndim = r.unpack("<BB")
        dims = r.unpack(f"<{ndim}I")
        (plen,) = r.unpack("<Q")
        payload = r.take(plen)
        if layer >= cfg.n_layers or name not in SHARED_NAMES + ("k_rope",):
            raise FormatError(f"bad slot ({layer}, {name!r})")
        if kind == 0:
            if plen != 4 * math.prod(dims):
                raise FormatError(f"payload of ({layer}, {name}) has {plen} bytes for dims {dims}")
            arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
            cache._dense[(layer, name)] = [Tensor._wrap(arr, False)]
        elif kind == 1:
            q = cfg.quant
            if q is None or ndim < 1:
                raise FormatError("packed slot in a config without quantization")
            dim = dims[-1]
            code_bytes = math.prod(dims[:-1]) * dim * q.bits // 8
            n_scales = math.prod(dims[:-1]) * (dim // q.group_size)
            if plen != code_bytes + 4 * n_scales:
                raise FormatError(f"packed payload of ({layer}, {name}) has {plen} bytes")
            codes = np.frombuffer(payload[:code_bytes], dtype=np.uint8).reshape(
                *dims[:-1], dim * q.bits // 8).copy()
            scales = np.frombuffer(payload[code_bytes:], dtype="<f4").reshape(
                *dims[:-1], dim // q.group_size).astype(np.float32)
            cache._blocks[(layer, name)] = [QuantizedBlock(codes, scales, q.bits, q.group_size)]
        else:
            raise FormatError(f"unknown payload kind {kind}")
    if r.take(4) != TRAILER:
        raise FormatError("missing trailer")
    if r.pos != len(r.data):
        raise FormatError(f"{len(r.data) - r.pos} trailing bytes after cache")
    return cache


# --- memory accounting ---------------------------------------------------------

@dataclass(frozen=True)
class MemoryReport:
    method: str
    mode: str
    bytes_per_token: float  # summed over all layers
    n_layers: int
    mha_bytes_per_token: float
    # per-token bytes by stored component ("kv", "hidden", "latent", "scales", "k_rope")
    parts: dict = field(default_factory=dict, compare=False)

    @property
    def bytes_per_token_per_layer(self) -> float:
        return self.bytes_per_token / self.n_layers

    @property
    def compression_ratio(self) -> float:
        return self.bytes_per_token / self.mha_bytes_per_token

    def total_bytes(self, batch: int, seq_len: int) -> float:
        return batch * seq_len * self.bytes_per_token

    @property
    def ratio_label(self) -> str:
        r = 100.0 * self.compression_ratio
        return "100%" if r == 100.0 else f"{r:.1f}%"


def _layer_parts(cfg: AttnConfig, layer: int, mode: str) -> dict[str, float]:
    f = cfg.factor
    prod = cfg.is_producer(layer)
    if not cfg.is_latent:
        if mode == "paper":
            return {"kv": 2 * cfg.n_kv_heads * cfg.head_dim * 2 / f}
        if not prod:
            return {}
        if cfg.share_hidden:
            return {"hidden": cfg.d_model * 2}
        return {"kv": 2 * cfg.n_kv_heads * cfg.head_dim * 2}
    q = cfg.quant
    if mode == "paper":
        # latent rows count one unit per scalar; a quantized latent counts its
        # packed bytes and nothing else
        if q is not None:
            return {"latent": cfg.latent_dim / f * q.bits / 8}
        rope = cfg.rope_dim / f if cfg.variant == "clla_share_krope" else cfg.rope_dim
        return {"latent": cfg.latent_dim / f, "k_rope": rope}
    parts: dict[str, float] = {}
    if prod:
        if q is None:
            parts["latent"] = cfg.latent_dim * 2
        else:
            parts["latent"] = cfg.latent_dim * q.bits / 8
            parts["scales"] = q.n_groups(cfg.latent_dim) * 2
    if cfg.owns_krope(layer):
        parts["k_rope"] = cfg.rope_dim * 2
    return parts


def memory_bytes(cfg: AttnConfig, mode: str = "principled", method: str | None = None) -> MemoryReport:
    """Cache bytes per token for ``cfg``.

    ``principled`` counts what is actually stored at 16-bit precision: full
    K/V, or latent plus rotary key, plus 2-byte group scales when quantized.
    ``paper`` follows the published per-row conventions (see README).
    """
    if mode not in ("principled", "paper"):
        raise AttnConfigError(f"unknown accounting mode {mode!r}")
    # paper mode amortizes sharing evenly over layers, so every layer looks like layer 0
    layers = [0] * cfg.n_layers if mode == "paper" else range(cfg.n_layers)
    parts: dict[str, float] = {}
    for layer in layers:
        for k, v in _layer_parts(cfg, layer, mode).items():
            parts[k] = parts.get(k, 0.0) + v
    mha = 2 * cfg.n_heads * cfg.head_dim * 2 * cfg.n_layers
    return MemoryReport(method or cfg.variant, mode, sum(parts.values()), cfg.n_layers, mha, parts)


def paper_methods(n_heads=16, head_dim=96, latent_dim=512, rope_dim=64, sharing_factor=2,
                  bits=4, group_size=32, kv_heads=8, n_layers=32, d_model=None,
                  extended=False) -> list[tuple[str, AttnConfig]]:
    """The compared methods at one geometry, in decreasing-cache order."""
    d_model = d_model or n_heads * head_dim
    base = AttnConfig(d_model=d_model, n_heads=n_heads, head_dim=head_dim, n_layers=n_layers)
    mla = replace(base, variant="mla", latent_dim=latent_dim, rope_dim=rope_dim)
    clla = replace(mla, variant="clla_share_latent", sharing_factor=sharing_factor)
    quant = QuantConfig(bits=bits, group_size=group_size)
    rows = [
        ("MHA", base),
        ("GQA", replace(base, variant="gqa", kv_heads=kv_heads)),
        ("MLA", mla),
        ("CLLA", clla),
        ("CLLA-quant", replace(clla, quant=quant)),
    ]
    if extended:
        rows += [
            ("MQA", replace(base, variant="gqa", kv_heads=1)),
            ("CLA", replace(base, variant="cla", sharing_factor=sharing_factor)),
            ("CLLA+share-krope", replace(clla, variant="clla_share_krope")),
            ("CLLA+share-kvproj", replace(clla, variant="clla_share_kvproj")),
            ("CLLA-quant+share-kvproj", replace(clla, variant="clla_share_kvproj", quant=quant)),
        ]
    return rows


def _fmt_num(x, grouped: bool) -> str:
    if isinstance(x, str):
        return x
    if float(x).is_integer():
        return f"{int(x):,}" if grouped else str(int(x))
    return f"{x:,.2f}" if grouped else f"{x:.4f}"


def format_reports(reports: list[MemoryReport], batch: int = 1, seq_len: int = 1,
                   fmt: str = "table") -> str:
    header = ["method", "mode", "bytes_per_token_per_layer", "bytes_per_token",
              f"total_bytes_B{batch}_S{seq_len}", "ratio"]
    rows = [[r.method, r.mode, r.bytes_per_token_per_layer, r.bytes_per_token,
             r.total_bytes(batch, seq_len), r.ratio_label] for r in reports]
    return render_table(header, rows, fmt)


def render_table(header: list[str], rows: list[list], fmt: str = "table") -> str:
    """Aligned text table, or TSV (no digit grouping) when ``fmt == "tsv"``."""
    if fmt not in ("table", "tsv"):
        raise ValueError(f"unknown report format {fmt!r}")
    cells = [[_fmt_num(c, fmt == "table") for c in row] for row in rows]
    if fmt == "tsv":
        return "\n".join("\t".join(row) for row in [header] + cells) + "\n"
    widths = [max(len(row[i]) for row in [header] + cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                       for i, (c, w) in enumerate(zip(row, widths))) for row in [header] + cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
