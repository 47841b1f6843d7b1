"""How much KV cache does each method keep per token?

Walks the five headline methods at a 1.5B-class geometry (16 heads of 96,
latent 512, rotary key 64, sharing factor 2, int4 latents in groups of 32)
through both accounting modes, then scales one row up to a serving batch.
"""

from kvlab.cache import format_reports, memory_bytes, paper_methods

methods = paper_methods(extended=True)

print("Published convention: latent rows counted in scalars, int4 latent alone.\n")
print(format_reports([memory_bytes(cfg, "paper", name) for name, cfg in methods]))

print("What is actually stored at 16-bit, rotary keys and group scales included.\n")
reports = [memory_bytes(cfg, "principled", name) for name, cfg in methods]
print(format_reports(reports))

quant = dict(methods)["CLLA-quant"]
rep = memory_bytes(quant, "principled", "CLLA-quant")
print("CLLA-quant per-layer breakdown:",
      {k: v / quant.n_layers for k, v in rep.parts.items()})

batch, seq = 32, 4096
mha = reports[0]
print(f"\nServing {batch} streams of {seq} tokens across {quant.n_layers} layers:")
for r in (mha, rep):
    print(f"  {r.method:<11} {r.total_bytes(batch, seq) / 2**30:8.2f} GiB")
