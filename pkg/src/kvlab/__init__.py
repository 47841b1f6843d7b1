"""KV-cache compressing attention laboratory."""

from .attention import AttnConfig, LayerWeights, attention_forward, layer_source
from .cache import KVCache, MemoryReport, deserialize_cache, memory_bytes, serialize_cache
from .model import ModelConfig, ToyModel
from .quant import QuantConfig, QuantizedBlock, dequantize, fake_quant, quantize
from .tensor import GradTape, Tensor, grad_check

__all__ = [
    "AttnConfig", "LayerWeights", "attention_forward", "layer_source",
    "KVCache", "MemoryReport", "deserialize_cache", "memory_bytes", "serialize_cache",
    "ModelConfig", "ToyModel",
    "QuantConfig", "QuantizedBlock", "dequantize", "fake_quant", "quantize",
    "GradTape", "Tensor", "grad_check",
]

__version__ = "0.1.0"
