"""Decode token by token from a packed int4 latent cache.

A small CLLA-quant model is run once over the whole prompt and once token by
token through a cache whose latents are stored as 4-bit codes plus scales.
The two agree to float round-off, the cache holds the bytes the accountant
predicts, and it survives a trip through its binary file format.
"""

import numpy as np

from kvlab.attention import AttnConfig
from kvlab.cache import deserialize_cache, memory_bytes, serialize_cache
from kvlab.model import ModelConfig, ToyModel
from kvlab.quant import QuantConfig

attn = AttnConfig(d_model=64, n_heads=4, head_dim=16, n_layers=4, variant="clla_share_latent",
                  latent_dim=32, rope_dim=8, sharing_factor=2, quant=QuantConfig(bits=4, group_size=16))
model = ToyModel(ModelConfig(attn, ffn_hidden=172, vocab_size=256, seed=0))
ids = np.random.default_rng(0).integers(0, 256, size=(1, 48))

full = model.forward(ids).data

cache = model.new_cache(packed=True)
steps = [model.forward(ids[:, t:t + 1], cache).data for t in range(ids.shape[1])]
inc = np.concatenate(steps, axis=1)
print(f"max |full - incremental| / max |full| = {np.abs(full - inc).max() / np.abs(full).max():.2e}")

print("cache slots:", cache.keys())
held = cache.allocated_bytes()
predicted = memory_bytes(attn).bytes_per_token * ids.shape[1]
print(f"bytes held {held}, accountant predicts {predicted:.0f}")

blob = serialize_cache(cache)
restored = deserialize_cache(blob)
nxt = np.array([[7]])
same = np.array_equal(model.forward(nxt, cache).data, model.forward(nxt, restored).data)
print(f"serialized to {len(blob)} bytes; restored cache continues identically: {same}")
