"""Finite-difference gradient suite over every op and every attention variant."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import AttnConfig, LayerWeights, attention_forward, init_layer_weights
from .cache import KVCache
from .quant import QuantConfig, fake_quant, quantize

__all__ = ["GradCase", "CaseResult", "op_cases", "variant_cases", "variant_configs", "run_suite",
           "ste_fixture_errors"]

DEFAULT_TOL = 1e-4


@dataclass
class GradCase:
    name: str
    fn: Callable[..., T.Tensor]
    inputs: list[np.ndarray]
    tol: float = DEFAULT_TOL
    eps: float = 1e-3


@dataclass
class CaseResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol


def _weighted_sum(out: T.Tensor, probe: np.ndarray) -> T.Tensor:
    # contract with a fixed random probe so every output element matters
    return T.tsum(T.mul(out, T.Tensor(probe)))


def op_cases(seed: int = 0) -> list[GradCase]:
    rng = np.random.default_rng(seed)
    u = lambda *s: rng.uniform(-2, 2, size=s)  # noqa: E731
    p1, p2, p3 = u(3, 5), u(2, 4, 6), u(2, 3, 4)
    mask = np.tril(np.ones((4, 4), dtype=bool))
    ids = rng.integers(0, 6, size=(2, 3))
    targets = rng.integers(0, 5, size=(2, 3))
    pos = np.array([0, 3, 7])

    return [
        GradCase("matmul", lambda a, b: T.tsum(T.matmul(a, b)), [u(3, 4), u(4, 5)]),
        GradCase("matmul_batched", lambda a, b: _weighted_sum(T.matmul(a, b), p2),
                 [u(2, 4, 3), u(2, 3, 6)]),
        GradCase("add", lambda a, b: _weighted_sum(T.add(a, b), p1), [u(3, 5), u(3, 5)]),
        GradCase("sub", lambda a, b: _weighted_sum(T.sub(a, b), p1), [u(3, 5), u(3, 5)]),
        GradCase("mul", lambda a, b: _weighted_sum(T.mul(a, b), p1), [u(3, 5), u(3, 5)]),
        GradCase("scale", lambda a: _weighted_sum(T.scale(a, -1.7), p1), [u(3, 5)]),
        GradCase("softmax_rows", lambda x: _weighted_sum(T.softmax_rows(x), p1), [u(3, 5)]),
        GradCase("softmax_rows_sum", lambda x: T.tsum(T.softmax_rows(x)), [u(3, 5)]),
        GradCase("softmax_rows_masked",
                 lambda x: _weighted_sum(T.softmax_rows(x, mask), p2[0, :, :4]), [u(4, 4)]),
        GradCase("rmsnorm", lambda x, g: _weighted_sum(T.rmsnorm(x, g), p2), [u(2, 4, 6), u(6)]),
        GradCase("rope_apply", lambda x: _weighted_sum(T.rope_apply(x, pos), p3), [u(2, 3, 4)]),
        GradCase("silu", lambda x: _weighted_sum(T.silu(x), p1), [u(3, 5)]),
        GradCase("reshape_transpose",
                 lambda x: _weighted_sum(T.transpose(T.reshape(x, (5, 3)), (1, 0)), p1), [u(15)]),
        GradCase("concat", lambda a, b: _weighted_sum(T.concat([a, b], axis=1), p1), [u(3, 2), u(3, 3)]),
        GradCase("repeat_heads", lambda x: _weighted_sum(T.repeat_heads(x, 2, axis=1), p2[:, :, :3]),
                 [u(2, 2, 3)]),
        GradCase("embedding", lambda w: _weighted_sum(T.embedding(w, ids), p3[:, :, :4].reshape(2, 3, 4)),
                 [u(6, 4)]),
        GradCase("cross_entropy", lambda z: T.cross_entropy(z, targets), [u(2, 3, 5)]),
        GradCase("mean", lambda x: T.mean(T.mul(x, x)), [u(3, 5)]),
    ]


def variant_configs() -> dict[str, AttnConfig]:
    """Tiny geometries for every variant (plus MQA and the quantized CLLA)."""
    base = AttnConfig(d_model=8, n_heads=2, head_dim=4, n_layers=2)
    lat = dict(latent_dim=4, rope_dim=2)
    return {
        "mha": base,
        "mqa": replace(base, variant="gqa", kv_heads=1),
        "gqa": replace(AttnConfig(d_model=8, n_heads=4, head_dim=2, n_layers=2), variant="gqa", kv_heads=2),
        "cla": replace(base, variant="cla", sharing_factor=2),
        "cla_hidden": replace(base, variant="cla", sharing_factor=2, share_hidden=True, share_kv_proj=False),
        "mla": replace(base, variant="mla", **lat),
        "mla_qlora": replace(base, variant="mla", q_lora_rank=3, **lat),
        "clla_share_latent": replace(base, variant="clla_share_latent", sharing_factor=2, **lat),
        "clla_share_krope": replace(base, variant="clla_share_krope", sharing_factor=2, **lat),
        "clla_share_kvproj": replace(base, variant="clla_share_kvproj", sharing_factor=2, **lat),
        "clla_quant": replace(base, variant="clla_share_latent", sharing_factor=2,
                              quant=QuantConfig(bits=4, group_size=4), **lat),
    }


# the quantizer's input does not move when only these weights are perturbed
_DOWNSTREAM_OF_LATENT = ("wq", "wdq", "wuq", "wq_rope", "wk", "wv", "wk_rope", "wo")


def _stack_layout(cfg: AttnConfig, seed: int):
    rng = np.random.default_rng(seed)
    layers: list[LayerWeights] = []
    for layer in range(cfg.n_layers):
        src = cfg.source(layer)
        layers.append(init_layer_weights(cfg, layer, rng, layers[src] if src != layer else None))
    return layers, rng


def variant_cases(seed: int = 0, names=None) -> list[GradCase]:
    cases = []
    for vname, cfg in variant_configs().items():
        if names is not None and vname not in names:
            continue
        layers, rng = _stack_layout(cfg, seed)
        slots = [(li, n) for li, lw in enumerate(layers) for n in lw.owned]
        quantized = cfg.quant is not None
        if quantized:
            slots = [(li, n) for li, n in slots if n in _DOWNSTREAM_OF_LATENT]
        h0 = rng.uniform(-2, 2, size=(1, 3, cfg.d_model))
        probe = rng.uniform(-1, 1, size=(1, 3, cfg.d_model))
        inputs = [getattr(layers[li], n).data.astype(np.float64) for li, n in slots]
        if not quantized:
            inputs.append(h0)

        def fn(*xs, cfg=cfg, layers=layers, slots=slots, quantized=quantized, h0=h0, probe=probe):
            ws = [LayerWeights(**{k: getattr(lw, k) for k in LayerWeights.__dataclass_fields__}) for lw in layers]
            for (li, n), x in zip(slots, xs):
                setattr(ws[li], n, x)
            for li, lw in enumerate(ws):
                src = cfg.source(li)
                aliased = [n for n in ("wk", "wv") if n not in lw.owned and getattr(lw, n) is not None]
                for n in aliased:
                    setattr(lw, n, getattr(ws[src], n))
            h = T.Tensor(h0) if quantized else xs[-1]
            cache = KVCache(cfg)
            for li in range(cfg.n_layers):
                h = T.add(h, attention_forward(h, ws[li], cache, li))
            return _weighted_sum(h, probe)

        # attention scores curve sharply; a smaller step keeps truncation error off the tolerance
        cases.append(GradCase(f"variant:{vname}", fn, inputs, eps=1e-4))
    return cases


def ste_fixture_errors() -> list[str]:
    """Check the clipped-STE contract on constructed inputs; returns failure messages."""
    failures = []
    cfg = QuantConfig(bits=4, group_size=4)
    x = T.Tensor(np.array([[0.05, -0.12, 0.33, 2.0, 0.4, -0.7, 0.2, -5.0]]), requires_grad=True)
    upstream = np.array([[1.0, -2.0, 3.0, 4.0, 0.5, 0.25, -1.0, 7.0]], dtype=np.float32)
    with T.GradTape() as tape:
        y = fake_quant(x, cfg, scale=np.array([[0.1, 0.1]]))
    tape.backward(y, upstream)
    expect = upstream.copy()
    expect[0, 3] = 0.0   # 2.0 / 0.1 = 20 > 7
    expect[0, 7] = 0.0   # -5.0 / 0.1 = -50 < -7
    if not np.array_equal(x.grad, expect):
        failures.append(f"clipped STE gradient {x.grad} != {expect}")
    blk = quantize(x.data, cfg, scale=np.array([[0.1, 0.1]]))
    sat = blk.unpacked()[0]
    if sat[3] != 7 or sat[7] != -7:
        failures.append(f"saturated codes {sat[[3, 7]]} != [7, -7]")
    return failures


def run_suite(cases: list[GradCase]) -> list[CaseResult]:
    return [CaseResult(c.name, T.grad_check(c.fn, c.inputs, c.eps), c.tol) for c in cases]
