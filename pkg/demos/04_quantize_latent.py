"""Symmetric int4 quantization of a latent row, and its straight-through gradient."""

import numpy as np

from kvlab.quant import QuantConfig, dequantize, fake_quant, quantize
from kvlab.tensor import GradTape, Tensor

cfg = QuantConfig(bits=4, group_size=4)
row = np.array([1.0, -2.0, 3.5, 7.0, 0.02, -0.05, 0.01, 0.0], dtype=np.float32)
q = quantize(row, cfg)
print("codes   ", q.unpacked().tolist(), " (3.5 rounds half-to-even to 4)")
print("scales  ", q.scales.tolist())
print("packed  ", [f"{b:02x}" for b in q.codes.tolist()], " two codes per byte, low nibble first")
print("restored", dequantize(q).tolist())

# fixing the scale makes elements past 7*S saturate; their gradient is cut
x = Tensor(np.array([[0.3, -0.4, 2.0, -5.0]]), requires_grad=True)
with GradTape() as tape:
    y = fake_quant(x, cfg, scale=0.1)
tape.backward(y, np.ones((1, 4), np.float32))
print("\nforward ", y.data.tolist())
print("gradient", x.grad.tolist(), " (zero where |x/S| > 7)")
