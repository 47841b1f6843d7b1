"""Decoder-only toy transformer over any attention variant, with a SwiGLU FFN."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .attention import AttnConfig, AttnConfigError, LayerWeights, attention_forward, attn_param_count, init_layer_weights
from .cache import KVCache
from .tensor import Tensor, add, embedding, matmul, mul, reshape, rmsnorm, silu, transpose

__all__ = [
    "ModelConfig", "ToyModel", "param_count", "balance_ffn", "block_forward",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
]


@dataclass(frozen=True)
class ModelConfig:
    attn: AttnConfig
    ffn_hidden: int = 344
    vocab_size: int = 256
    tie_embeddings: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.ffn_hidden < 1:
            raise AttnConfigError(f"ffn_hidden must be positive, got {self.ffn_hidden}")
        if self.vocab_size < 2:
            raise AttnConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")

    @property
    def n_layers(self) -> int:
        return self.attn.n_layers

    @property
    def d_model(self) -> int:
        return self.attn.d_model

    def to_dict(self) -> dict:
        return {"attn": self.attn.to_dict(), "ffn_hidden": self.ffn_hidden,
                "vocab_size": self.vocab_size, "tie_embeddings": self.tie_embeddings,
                "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["attn"] = AttnConfig.from_dict(d["attn"])
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def param_count(cfg: ModelConfig) -> int:
    """Closed-form number of trainable scalars (aliased weights counted once)."""
    d, v = cfg.d_model, cfg.vocab_size
    total = v * d + (0 if cfg.tie_embeddings else v * d) + d
    for layer in range(cfg.n_layers):
        total += attn_param_count(cfg.attn, layer) + 2 * d + 3 * d * cfg.ffn_hidden
    return total


def balance_ffn(cfg: ModelConfig, target_params: int) -> ModelConfig:
    """Pick the ``ffn_hidden`` whose total parameter count is closest to ``target_params``."""
    floor = param_count(replace(cfg, ffn_hidden=1)) - 3 * cfg.d_model * cfg.n_layers
    per_unit = 3 * cfg.d_model * cfg.n_layers
    if target_params < floor + per_unit:
        raise AttnConfigError(
            f"target {target_params} is below the attention+embedding floor {floor + per_unit}")
    hidden = max(1, int(round((target_params - floor) / per_unit)))
    return replace(cfg, ffn_hidden=hidden)


@dataclass
class BlockWeights:
    attn_norm: Tensor
    attn: LayerWeights
    ffn_norm: Tensor
    w1: Tensor  # gate
    w3: Tensor  # up
    w2: Tensor  # down


def _xavier(rng, fan_in, fan_out, name):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=name)


def block_forward(h: Tensor, layer: int, blocks: list[BlockWeights], cache: KVCache,
                  eps: float = 1e-6) -> Tensor:
    """Pre-norm residual block: attention then SwiGLU feed-forward."""
    bw = blocks[layer]
    h = add(h, attention_forward(rmsnorm(h, bw.attn_norm, eps), bw.attn, cache, layer))
    x = rmsnorm(h, bw.ffn_norm, eps)
    ff = matmul(mul(silu(matmul(x, bw.w1)), matmul(x, bw.w3)), bw.w2)
    return add(h, ff)


class ToyModel:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        d, v = cfg.d_model, cfg.vocab_size
        self.embed = Tensor(rng.normal(0.0, 0.02, size=(v, d)), requires_grad=True, name="embed")
        self.blocks: list[BlockWeights] = []
        for layer in range(cfg.n_layers):
            src = cfg.attn.source(layer)
            producer = self.blocks[src].attn if src != layer else None
            attn = init_layer_weights(cfg.attn, layer, rng, producer)
            self.blocks.append(BlockWeights(
                attn_norm=Tensor(np.ones(d), requires_grad=True, name="attn_norm"),
                attn=attn,
                ffn_norm=Tensor(np.ones(d), requires_grad=True, name="ffn_norm"),
                w1=_xavier(rng, d, cfg.ffn_hidden, "w1"),
                w3=_xavier(rng, d, cfg.ffn_hidden, "w3"),
                w2=_xavier(rng, cfg.ffn_hidden, d, "w2"),
            ))
        self.final_norm = Tensor(np.ones(d), requires_grad=True, name="final_norm")
        self.lm_head = None if cfg.tie_embeddings else _xavier(rng, d, v, "lm_head")

    def named_params(self) -> dict[str, Tensor]:
        out = {"embed": self.embed}
        for i, b in enumerate(self.blocks):
            out[f"layers.{i}.attn_norm"] = b.attn_norm
            for name, t in b.attn.params().items():
                out[f"layers.{i}.attn.{name}"] = t
            out[f"layers.{i}.ffn_norm"] = b.ffn_norm
            out[f"layers.{i}.w1"] = b.w1
            out[f"layers.{i}.w3"] = b.w3
            out[f"layers.{i}.w2"] = b.w2
        out["final_norm"] = self.final_norm
        if self.lm_head is not None:
            out["lm_head"] = self.lm_head
        return out

    def n_params(self) -> int:
        return sum(t.data.size for t in self.named_params().values())

    def new_cache(self, packed: bool = False) -> KVCache:
        return KVCache(self.cfg.attn, packed=packed)

    def forward(self, ids, cache: KVCache | None = None) -> Tensor:
        """Logits ``[B, S, vocab]`` for token ids ``[B, S]``.

        Without a cache this is a full-sequence forward; with one, ``ids`` are
        the next tokens of an ongoing decode.
        """
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if cache is None:
            cache = self.new_cache()
        h = embedding(self.embed, ids)
        for layer in range(self.cfg.n_layers):
            h = block_forward(h, layer, self.blocks, cache, self.cfg.attn.norm_eps)
        cache.n_tokens  # noqa: B018 -- raises if layers fell out of step
        x = rmsnorm(h, self.final_norm, self.cfg.attn.norm_eps)
        if self.lm_head is not None:
            return matmul(x, self.lm_head)
        b, s, d = x.shape
        # tied head: x @ embed^T
        logits = matmul(reshape(x, (b * s, d)), transpose(self.embed, (1, 0)))
        return reshape(logits, (b, s, self.cfg.vocab_size))


# --- checkpoints -------------------------------------------------------------------
# magic b"KVLM", u16 version, 32-byte config digest, u32 config-json length + json,
# u32 record count, then per record: u16 name length, name, u8 ndim, ndim x u32
# dims, u64 payload length, float32 little-endian payload.

CKPT_MAGIC = b"KVLM"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: ToyModel, path) -> None:
    cfg_json = json.dumps(model.cfg.to_dict(), sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(struct.pack("<4sH32sI", CKPT_MAGIC, CKPT_VERSION, model.cfg.digest(), len(cfg_json)))
    buf.write(cfg_json)
    params = model.named_params()
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        nb = name.encode()
        payload = t.data.astype("<f4").tobytes()
        buf.write(struct.pack("<H", len(nb)) + nb)
        buf.write(struct.pack(f"<B{t.ndim}I", t.ndim, *t.shape))
        buf.write(struct.pack("<Q", len(payload)) + payload)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ToyModel:
    with open(path, "rb") as fh:
        data = fh.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {pos}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    magic, version, digest, cfg_len = struct.unpack("<4sH32sI", take(42))
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise CheckpointError(f"not a version-{CKPT_VERSION} checkpoint")
    cfg = ModelConfig.from_dict(json.loads(take(cfg_len)))
    if cfg.digest() != digest:
        raise CheckpointError("config digest mismatch")
    model = ToyModel(cfg)
    params = model.named_params()
    (count,) = struct.unpack("<I", take(4))
    if count != len(params):
        raise CheckpointError(f"checkpoint has {count} tensors, model expects {len(params)}")
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode()
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (plen,) = struct.unpack("<Q", take(8))
        arr = np.frombuffer(take(plen), dtype="<f4").reshape(dims)
        if name not in params or params[name].shape != arr.shape:
            raise CheckpointError(f"unexpected tensor {name} {dims}")
        params[name].data[...] = arr
    if pos != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return model
