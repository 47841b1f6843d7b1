"""Synthetic corpora, AdamW training loop and perplexity evaluation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelConfig, ToyModel
from .tensor import GradTape, NumericError, cross_entropy

__all__ = [
    "markov_corpus", "copy_corpus", "make_corpus", "TrainSpec", "TrainState", "TrainingError",
    "lr_at", "train_step", "train", "eval_ppl", "clip_grads",
]


class TrainingError(RuntimeError):
    pass


# --- corpora -------------------------------------------------------------------

def markov_corpus(length: int, vocab_size: int = 256, seed: int = 0, alphabet: int = 24,
                  concentration: float = 0.15) -> np.ndarray:
    """Order-2 Markov character stream over the first ``alphabet`` token ids.

    Each context pair draws its successor distribution from a sparse
    Dirichlet, so the stream has learnable structure well below the unigram
    entropy.
    """
    if not 2 <= alphabet <= vocab_size:
        raise ValueError(f"alphabet must lie in [2, vocab_size], got {alphabet}")
    rng = np.random.default_rng(seed)
    table = rng.dirichlet(np.full(alphabet, concentration), size=(alphabet, alphabet))
    cdf = np.cumsum(table, axis=-1)
    u = rng.random(length)
    out = np.empty(length, dtype=np.int64)
    a, b = rng.integers(alphabet, size=2)
    for i in range(length):
        nxt = min(int(np.searchsorted(cdf[a, b], u[i], side="right")), alphabet - 1)
        out[i] = nxt
        a, b = b, nxt
    return out


def copy_corpus(length: int, vocab_size: int = 256, seed: int = 0, span: int = 8) -> np.ndarray:
    """Repeated ``random span | delimiter | same span | delimiter`` records; id 0 is the delimiter."""
    rng = np.random.default_rng(seed)
    chunks = []
    total = 0
    while total < length:
        s = rng.integers(1, vocab_size, size=span)
        rec = np.concatenate([s, [0], s, [0]])
        chunks.append(rec)
        total += rec.size
    return np.concatenate(chunks)[:length].astype(np.int64)


def make_corpus(generator: str, length: int, vocab_size: int, seed: int) -> np.ndarray:
    if generator == "markov":
        return markov_corpus(length, vocab_size, seed)
    if generator == "copy":
        return copy_corpus(length, vocab_size, seed)
    raise ValueError(f"unknown corpus generator {generator!r}")


# --- optimisation --------------------------------------------------------------

@dataclass(frozen=True)
class TrainSpec:
    steps: int = 2000
    batch: int = 8
    seq_len: int = 64
    peak_lr: float = 3e-3
    warmup: int = 100
    min_lr_ratio: float = 0.1
    betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    weight_decay: float = 0.1
    clip: float = 1.0
    seed: int = 0


@dataclass
class TrainState:
    model: ToyModel
    spec: TrainSpec
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    log: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: ModelConfig, spec: TrainSpec) -> "TrainState":
        model = ToyModel(cfg)
        params = model.named_params()
        return cls(model, spec,
                   {k: np.zeros_like(t.data) for k, t in params.items()},
                   {k: np.zeros_like(t.data) for k, t in params.items()})


def lr_at(step: int, spec: TrainSpec) -> float:
    """Linear warmup, then cosine decay to ``min_lr_ratio * peak_lr`` at ``spec.steps``."""
    if spec.warmup and step < spec.warmup:
        return spec.peak_lr * (step + 1) / spec.warmup
    span = max(1, spec.steps - spec.warmup)
    t = min(1.0, (step - spec.warmup) / span)
    floor = spec.min_lr_ratio * spec.peak_lr
    return floor + 0.5 * (spec.peak_lr - floor) * (1.0 + math.cos(math.pi * t))


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> tuple[float, float]:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``.

    Returns the (pre-clip, post-clip) norms.
    """
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= factor
        return norm, math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    return norm, norm


def _decays(name: str, arr: np.ndarray) -> bool:
    # matrices only; norm gains are exempt
    return arr.ndim == 2


def loss_and_grads(model: ToyModel, batch: np.ndarray):
    batch = np.asarray(batch)
    params = model.named_params()
    for t in params.values():
        t.grad = None
    with GradTape() as tape:
        logits = model.forward(batch[:, :-1])
        loss = cross_entropy(logits, batch[:, 1:])
    tape.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    tape.clear()
    return float(loss.data), grads


def train_step(state: TrainState, batch: np.ndarray) -> tuple[TrainState, float]:
    """One AdamW step on ``batch`` (token ids ``[B, S+1]``)."""
    spec = state.spec
    try:
        loss, grads = loss_and_grads(state.model, batch)
    except NumericError as exc:
        raise TrainingError(f"non-finite values at step {state.step}: {exc}") from exc
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at step {state.step}")
    gnorm, _ = clip_grads(grads, spec.clip)
    lr = lr_at(state.step, spec)
    b1, b2 = spec.betas
    t = state.step + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in state.model.named_params().items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if _decays(name, p.data):
            p.data *= np.float32(1.0 - lr * spec.weight_decay)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + spec.adam_eps)).astype(p.data.dtype)
    state.step = t
    state.log.append({"step": t, "loss": loss, "lr": lr, "grad_norm": gnorm})
    return state, loss


def sample_batch(corpus: np.ndarray, batch: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    starts = rng.integers(0, corpus.size - seq_len - 1, size=batch)
    return np.stack([corpus[s:s + seq_len + 1] for s in starts])


def train(cfg: ModelConfig, corpus: np.ndarray, spec: TrainSpec, on_step=None) -> TrainState:
    """Train from scratch; deterministic given ``cfg.seed``, ``spec.seed`` and the corpus."""
    state = TrainState.create(cfg, spec)
    rng = np.random.default_rng(spec.seed)
    for _ in range(spec.steps):
        batch = sample_batch(corpus, spec.batch, spec.seq_len, rng)
        state, _ = train_step(state, batch)
        if on_step is not None:
            on_step(state.log[-1])
    return state


def eval_ppl(model: ToyModel, corpus: np.ndarray, seq_len: int = 64, max_windows: int | None = None) -> float:
    """exp(mean next-token cross-entropy) over non-overlapping windows of ``corpus``."""
    n = (corpus.size - 1) // seq_len
    if max_windows is not None:
        n = min(n, max_windows)
    if n < 1:
        raise ValueError("corpus shorter than one evaluation window")
    total, count = 0.0, 0
    for i in range(0, n, 16):
        rows = [corpus[j * seq_len:(j + 1) * seq_len + 1] for j in range(i, min(n, i + 16))]
        batch = np.stack(rows)
        logits = model.forward(batch[:, :-1])
        total += float(cross_entropy(logits, batch[:, 1:]).data) * batch[:, 1:].size
        count += batch[:, 1:].size
    return math.exp(total / count)
