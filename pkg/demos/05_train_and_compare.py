"""Train MHA, CLLA and CLLA-quant side by side on a Markov character stream.

FFN widths are balanced so every model has about the same parameter count.
The quantized model should track its unquantized twin closely while keeping
a far smaller cache.

    python3 demos/05_train_and_compare.py --steps 300
"""

import argparse
import math
from dataclasses import replace

from kvlab.attention import AttnConfig
from kvlab.cache import memory_bytes, render_table
from kvlab.model import ModelConfig, balance_ffn, param_count
from kvlab.quant import QuantConfig
from kvlab.train import TrainSpec, eval_ppl, markov_corpus, train

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=300)
args = ap.parse_args()

base = AttnConfig(d_model=64, n_heads=4, head_dim=16, n_layers=4)
clla = replace(base, variant="clla_share_latent", latent_dim=32, rope_dim=8, sharing_factor=2)
methods = {
    "MHA": base,
    "CLLA": clla,
    "CLLA-quant": replace(clla, quant=QuantConfig(bits=4, group_size=16)),
}

corpus = markov_corpus(60_000, 256, seed=0)
train_ids, eval_ids = corpus[:50_000], corpus[50_000:]
spec = TrainSpec(steps=args.steps, batch=8, seq_len=32, warmup=min(100, args.steps // 10))

target = param_count(ModelConfig(base, ffn_hidden=172))
rows = []
for name, attn in methods.items():
    cfg = balance_ffn(ModelConfig(attn, ffn_hidden=172), target)
    state = train(cfg, train_ids, spec,
                  on_step=lambda r, n=name: r["step"] % 100 == 0 and print(f"{n:<10} step {r['step']:>5} loss {r['loss']:.3f}"))
    ppl = eval_ppl(state.model, eval_ids, 32, 64)
    rows.append([name, cfg.ffn_hidden, param_count(cfg), memory_bytes(attn).bytes_per_token,
                 round(math.log(ppl), 4), round(ppl, 3)])

print()
print(render_table(["method", "ffn_hidden", "params", "kv_bytes_per_token", "val_loss", "val_ppl"], rows))
