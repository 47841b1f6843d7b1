"""Attention family: MHA, GQA/MQA, CLA, MLA and the cross-layer latent variants.

All forward functions share one signature, ``f(h, w, cache, layer)``:

* ``h`` -- hidden states of the *new* tokens, ``[B, S, d_model]``;
* ``w`` -- the :class:`LayerWeights` of ``layer``;
* ``cache`` -- a :class:`~kvlab.cache.KVCache` holding everything earlier
  tokens left behind. It also carries the :class:`AttnConfig`.

A full-sequence forward is simply a call with an empty cache, so incremental
decoding and training go through the same code.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .quant import QuantConfig, fake_quant
from .tensor import (Tensor, concat, matmul, repeat_heads, reshape, rmsnorm,
                     rope_apply, scale, softmax_rows, transpose)

__all__ = [
    "VARIANTS", "LATENT_VARIANTS", "AttnConfig", "AttnConfigError", "LayerWeights",
    "layer_source", "init_layer_weights", "mha_forward", "gqa_forward", "cla_forward",
    "mla_forward", "clla_forward", "attention_forward", "latent_kv",
]

VARIANTS = ("mha", "gqa", "cla", "mla", "clla_share_latent", "clla_share_krope", "clla_share_kvproj")
LATENT_VARIANTS = frozenset(VARIANTS[3:])
CLLA_VARIANTS = frozenset(VARIANTS[4:])


class AttnConfigError(ValueError):
    pass


def layer_source(layer: int, factor: int) -> int:
    """Producer layer whose cached state ``layer`` reads."""
    return (layer // factor) * factor


@dataclass(frozen=True)
class AttnConfig:
    """Geometry of one attention variant across a stack of ``n_layers`` layers."""

    d_model: int
    n_heads: int
    head_dim: int
    n_layers: int = 1
    variant: str = "mha"
    kv_heads: int | None = None
    latent_dim: int = 0
    rope_dim: int = 0
    q_lora_rank: int | None = None
    sharing_factor: int = 1
    quant: QuantConfig | None = None
    rope_base: float = 10000.0
    # rotary embedding on full heads for the mha/gqa/cla family
    rope: bool = True
    # RMSNorm on the latent before it is (optionally) quantized and cached
    latent_norm: bool = True
    # cla only: cache the producer's attention input instead of its K/V ...
    share_hidden: bool = False
    # ... and, if so, whether consumers reuse the producer's K/V projections
    share_kv_proj: bool = True
    norm_eps: float = 1e-6

    def __post_init__(self):
        v = self.variant
        if v not in VARIANTS:
            raise AttnConfigError(f"unknown variant {v!r}; expected one of {', '.join(VARIANTS)}")
        for name in ("d_model", "n_heads", "head_dim", "n_layers", "sharing_factor"):
            if getattr(self, name) < 1:
                raise AttnConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        kv = self.n_kv_heads
        if self.n_heads % kv:
            raise AttnConfigError(f"kv_heads={kv} does not divide n_heads={self.n_heads}")
        if v == "mha" and kv != self.n_heads:
            raise AttnConfigError("mha needs kv_heads == n_heads; use gqa for grouped heads")
        if v in ("mha", "gqa", "mla") and self.sharing_factor != 1:
            raise AttnConfigError(f"{v} has no cross-layer sharing; sharing_factor must be 1")
        if self.rope_dim % 2 or self.rope_dim < 0:
            raise AttnConfigError(f"rope_dim must be even and >= 0, got {self.rope_dim}")
        if self.rope and not self.is_latent and self.head_dim % 2:
            raise AttnConfigError("rotary heads need an even head_dim")
        if self.is_latent:
            if kv != self.n_heads:
                raise AttnConfigError("latent variants reconstruct all heads; kv_heads must equal n_heads")
            if not 0 < self.latent_dim < self.n_heads * self.head_dim:
                raise AttnConfigError(
                    f"latent_dim must lie in (0, n_heads*head_dim={self.n_heads * self.head_dim}), "
                    f"got {self.latent_dim}")
            if self.q_lora_rank is not None and self.q_lora_rank < 1:
                raise AttnConfigError("q_lora_rank must be positive when set")
            if self.quant is not None:
                self.quant.validate(self.latent_dim)
        elif self.quant is not None:
            raise AttnConfigError("quantization applies to latent variants only")
        if self.share_hidden and v != "cla":
            raise AttnConfigError("share_hidden is a cla option")

    @property
    def n_kv_heads(self) -> int:
        return self.n_heads if self.kv_heads is None else self.kv_heads

    @property
    def is_latent(self) -> bool:
        return self.variant in LATENT_VARIANTS

    @property
    def factor(self) -> int:
        return self.sharing_factor

    def source(self, layer: int) -> int:
        if not 0 <= layer < self.n_layers:
            raise IndexError(f"layer {layer} outside [0, {self.n_layers})")
        return layer_source(layer, self.sharing_factor)

    def is_producer(self, layer: int) -> bool:
        return self.source(layer) == layer

    def owns_krope(self, layer: int) -> bool:
        """Whether ``layer`` computes and caches its own rotary key."""
        if self.rope_dim == 0:
            return False
        return self.variant != "clla_share_krope" or self.is_producer(layer)

    @property
    def score_scale(self) -> float:
        width = self.head_dim + (self.rope_dim if self.is_latent else 0)
        return 1.0 / math.sqrt(width)

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, QuantConfig):
                val = {g.name: getattr(val, g.name) for g in fields(val)}
            out[f.name] = val
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AttnConfig":
        d = dict(d)
        if d.get("quant") is not None:
            d["quant"] = QuantConfig(**d["quant"])
        return cls(**d)


_WEIGHT_NAMES = ("wq", "wdq", "wuq", "wq_rope", "wc", "c_gain", "wk", "wv", "wk_rope", "wo")


@dataclass
class LayerWeights:
    """Attention weights of one layer.

    Entries listed in ``owned`` belong to this layer; any other non-None entry
    aliases a producer's tensor (``clla_share_kvproj`` and shared-projection
    hidden-state CLA).
    """

    wq: Tensor | None = None
    wdq: Tensor | None = None
    wuq: Tensor | None = None
    wq_rope: Tensor | None = None
    wc: Tensor | None = None
    c_gain: Tensor | None = None
    wk: Tensor | None = None
    wv: Tensor | None = None
    wk_rope: Tensor | None = None
    wo: Tensor | None = None
    owned: tuple[str, ...] = field(default_factory=tuple)

    def params(self) -> dict[str, Tensor]:
        return {n: getattr(self, n) for n in self.owned}


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int, name: str) -> Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=name)


def _weight_shapes(cfg: AttnConfig, layer: int) -> dict[str, tuple[int, ...]]:
    """Shapes of the weights ``layer`` owns."""
    d, n, dh = cfg.d_model, cfg.n_heads, cfg.head_dim
    prod = cfg.is_producer(layer)
    shapes: dict[str, tuple[int, ...]] = {}
    if cfg.is_latent and cfg.q_lora_rank:
        shapes["wdq"] = (d, cfg.q_lora_rank)
        shapes["wuq"] = (cfg.q_lora_rank, n * dh)
    else:
        shapes["wq"] = (d, n * dh)
    if not cfg.is_latent:
        g = cfg.n_kv_heads
        own_kv = prod or (cfg.share_hidden and not cfg.share_kv_proj)
        if own_kv:
            shapes["wk"] = (d, g * dh)
            shapes["wv"] = (d, g * dh)
    else:
        c = cfg.latent_dim
        if cfg.rope_dim:
            shapes["wq_rope"] = (d, n * cfg.rope_dim)
        if prod:
            shapes["wc"] = (d, c)
            if cfg.latent_norm:
                shapes["c_gain"] = (c,)
        if prod or cfg.variant != "clla_share_kvproj":
            shapes["wk"] = (c, n * dh)
            shapes["wv"] = (c, n * dh)
        if cfg.owns_krope(layer):
            shapes["wk_rope"] = (d, cfg.rope_dim)
    shapes["wo"] = (n * dh, d)
    return shapes


def init_layer_weights(cfg: AttnConfig, layer: int, rng: np.random.Generator,
                       producer: LayerWeights | None = None) -> LayerWeights:
    """Allocate the weights of ``layer``; ``producer`` supplies aliased projections."""
    shapes = _weight_shapes(cfg, layer)
    w = LayerWeights(owned=tuple(shapes))
    for name, shape in shapes.items():
        if name == "c_gain":
            t = Tensor(np.ones(shape), requires_grad=True, name=name)
        else:
            t = _xavier(rng, shape[0], shape[1], name)
        setattr(w, name, t)
    needs_alias = ((cfg.variant == "clla_share_kvproj")
                   or (cfg.variant == "cla" and cfg.share_hidden and cfg.share_kv_proj))
    if needs_alias and not cfg.is_producer(layer):
        if producer is None:
            raise AttnConfigError(f"layer {layer} aliases its producer's K/V projections; pass producer weights")
        w.wk, w.wv = producer.wk, producer.wv
    return w


def attn_param_count(cfg: AttnConfig, layer: int) -> int:
    return sum(int(np.prod(s)) for s in _weight_shapes(cfg, layer).values())


# --- shared attention core ----------------------------------------------------

def _attend(q: Tensor, k: Tensor, v: Tensor, q_pos: np.ndarray, score_scale: float) -> Tensor:
    """Causal scaled dot-product attention.

    q: [B, Sq, N, Dq]; k: [B, Sk, N, Dq]; v: [B, Sk, N, Dv]; key j sits at
    absolute position j. Returns [B, Sq, N*Dv].
    """
    b, sq, n, _ = q.shape
    sk, dv = k.shape[1], v.shape[3]
    qt = transpose(q, (0, 2, 1, 3))
    kt = transpose(k, (0, 2, 3, 1))
    vt = transpose(v, (0, 2, 1, 3))
    scores = scale(matmul(qt, kt), score_scale)
    mask = np.arange(sk)[None, :] <= np.asarray(q_pos)[:, None]
    probs = softmax_rows(scores, mask)
    out = transpose(matmul(probs, vt), (0, 2, 1, 3))
    return reshape(out, (b, sq, n * dv))


def _heads(x: Tensor, n: int) -> Tensor:
    b, s, width = x.shape
    return reshape(x, (b, s, n, width // n))


def _rope(x: Tensor, pos, cfg: AttnConfig) -> Tensor:
    return rope_apply(x, pos, cfg.rope_base)


def _query(h: Tensor, w: LayerWeights, cfg: AttnConfig) -> Tensor:
    if w.wdq is not None:
        return _heads(matmul(matmul(h, w.wdq), w.wuq), cfg.n_heads)
    return _heads(matmul(h, w.wq), cfg.n_heads)


def _full_kv_attention(h, w, cache, layer) -> Tensor:
    cfg = cache.cfg
    b, s, _ = h.shape
    pos = cache.positions(layer, s)
    q = _query(h, w, cfg)
    if cfg.rope:
        q = _rope(q, pos, cfg)
    g = cfg.n_kv_heads
    if cfg.share_hidden:
        if cfg.is_producer(layer):
            cache.append(layer, "h", h)
        hs = cache.read(layer, "h")
        k, v = _heads(matmul(hs, w.wk), g), _heads(matmul(hs, w.wv), g)
        if cfg.rope:
            k = _rope(k, np.arange(hs.shape[1]), cfg)
    else:
        if cfg.is_producer(layer):
            k, v = _heads(matmul(h, w.wk), g), _heads(matmul(h, w.wv), g)
            if cfg.rope:
                k = _rope(k, pos, cfg)
            cache.append(layer, "k", k)
            cache.append(layer, "v", v)
        k, v = cache.read(layer, "k"), cache.read(layer, "v")
    rep = cfg.n_heads // g
    k, v = repeat_heads(k, rep), repeat_heads(v, rep)
    return matmul(_attend(q, k, v, pos, cfg.score_scale), w.wo)


def mha_forward(h: Tensor, w: LayerWeights, cache, layer: int) -> Tensor:
    """Standard multi-head attention; new K/V are appended to ``cache``."""
    _expect(cache.cfg, ("mha", "gqa", "cla"))
    return _full_kv_attention(h, w, cache, layer)


def gqa_forward(h: Tensor, w: LayerWeights, cache, layer: int) -> Tensor:
    """Grouped-query attention: ``n_heads // kv_heads`` query heads per K/V head.

    ``kv_heads == 1`` is multi-query attention.
    """
    _expect(cache.cfg, ("mha", "gqa"))
    return _full_kv_attention(h, w, cache, layer)


def cla_forward(h: Tensor, w: LayerWeights, cache, layer: int) -> Tensor:
    """Cross-layer attention: consumers attend over their producer's cached K/V."""
    _expect(cache.cfg, ("cla",))
    return _full_kv_attention(h, w, cache, layer)


def latent_kv(w: LayerWeights, cache, layer: int) -> tuple[Tensor, Tensor]:
    """Per-head content K and V ``[B, T, N, Dh]`` up-projected from the cached latent."""
    n = cache.cfg.n_heads
    c_all = cache.read(layer, "c")
    return _heads(matmul(c_all, w.wk), n), _heads(matmul(c_all, w.wv), n)


def _latent_attention(h, w, cache, layer) -> Tensor:
    cfg = cache.cfg
    b, s, _ = h.shape
    n, dr = cfg.n_heads, cfg.rope_dim
    pos = cache.positions(layer, s)
    if cfg.is_producer(layer):
        c = matmul(h, w.wc)
        if cfg.latent_norm:
            c = rmsnorm(c, w.c_gain, cfg.norm_eps)
        if cfg.quant is not None and not cache.packed:
            c = fake_quant(c, cfg.quant)
        cache.append(layer, "c", c)
    if cfg.owns_krope(layer):
        cache.append(layer, "k_rope", _rope(matmul(h, w.wk_rope), pos, cfg))
    k, v = latent_kv(w, cache, layer)
    q = _query(h, w, cfg)
    if dr:
        q_rope = _rope(_heads(matmul(h, w.wq_rope), n), pos, cfg)
        q = concat([q, q_rope], axis=-1)
        kr = cache.read(layer, "k_rope")
        kr = repeat_heads(reshape(kr, (b, kr.shape[1], 1, dr)), n)
        k = concat([k, kr], axis=-1)
    return matmul(_attend(q, k, v, pos, cfg.score_scale), w.wo)


def mla_forward(h: Tensor, w: LayerWeights, cache, layer: int) -> Tensor:
    """Latent attention; the cache keeps the (normalised) latent and the rotary key only."""
    _expect(cache.cfg, LATENT_VARIANTS)
    return _latent_attention(h, w, cache, layer)


def clla_forward(h: Tensor, w: LayerWeights, cache, layer: int) -> Tensor:
    """Latent attention whose latent is produced once per sharing group."""
    _expect(cache.cfg, CLLA_VARIANTS)
    return _latent_attention(h, w, cache, layer)


_DISPATCH = {
    "mha": mha_forward, "gqa": gqa_forward, "cla": cla_forward, "mla": mla_forward,
    "clla_share_latent": clla_forward, "clla_share_krope": clla_forward,
    "clla_share_kvproj": clla_forward,
}


def attention_forward(h: Tensor, w: LayerWeights, cache, layer: int) -> Tensor:
    return _DISPATCH[cache.cfg.variant](h, w, cache, layer)


def _expect(cfg: AttnConfig, allowed) -> None:
    if cfg.variant not in allowed:
        raise AttnConfigError(f"variant {cfg.variant!r} cannot run through this forward")
