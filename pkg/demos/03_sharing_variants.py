"""Three ways for a consumer layer to reuse its producer's latent.

With a sharing factor of 2, layers 1 and 3 read the latent that layers 0 and
2 cached. They differ in what else they borrow: nothing (share-latent), the
rotary key (share-krope), or the K/V up-projections (share-kvproj).
"""

import numpy as np

from kvlab import tensor as T
from kvlab.attention import AttnConfig, attention_forward, init_layer_weights, latent_kv
from kvlab.cache import KVCache

base = dict(d_model=32, n_heads=4, head_dim=8, n_layers=4, latent_dim=16, rope_dim=4, sharing_factor=2)
h = T.Tensor(np.random.default_rng(1).normal(size=(1, 5, 32)))

for variant in ("clla_share_latent", "clla_share_krope", "clla_share_kvproj"):
    cfg = AttnConfig(variant=variant, **base)
    rng = np.random.default_rng(0)
    layers = []
    for layer in range(cfg.n_layers):
        src = cfg.source(layer)
        layers.append(init_layer_weights(cfg, layer, rng, layers[src] if src != layer else None))
    cache = KVCache(cfg)
    x = h
    for layer in range(cfg.n_layers):
        x = T.add(x, attention_forward(x, layers[layer], cache, layer))

    k0, _ = latent_kv(layers[0], cache, 0)
    k1, _ = latent_kv(layers[1], cache, 1)
    print(variant)
    print("  layer sources      ", [cfg.source(i) for i in range(cfg.n_layers)])
    print("  layer 1 owns       ", sorted(layers[1].owned))
    print("  cached slots       ", cache.keys())
    print("  K(layer0)==K(layer1)", bool(np.array_equal(k0.data, k1.data)))
