"""Experiment configuration files (TOML) with strict schema checking.

A file has ``[model]`` (optionally ``[model.quant]``), ``[corpus]``,
``[training]`` and ``[output]`` tables; ``compare-methods`` additionally reads
``[compare]`` and one ``[[methods]]`` table per variant, whose keys override
``[model]`` (except ``quant``, which each method sets for itself). Unknown
keys are rejected and every error names the offending key together with its
line in the file.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attention import AttnConfig, AttnConfigError
from .model import ModelConfig
from .quant import QuantConfig, QuantConfigError
from .train import TrainSpec

__all__ = ["ConfigError", "ExperimentConfig", "MethodSpec", "load_config", "parse_config"]


class ConfigError(ValueError):
    pass


_MODEL_KEYS = {
    "variant": str, "d_model": int, "n_layers": int, "n_heads": int, "head_dim": int,
    "kv_heads": int, "latent_dim": int, "rope_dim": int, "q_lora_rank": int,
    "sharing_factor": int, "rope_base": float, "rope": bool, "latent_norm": bool,
    "share_hidden": bool, "share_kv_proj": bool, "ffn_hidden": int, "vocab_size": int,
    "tie_embeddings": bool, "seed": int, "quant": dict,
}
_QUANT_KEYS = {"bits": int, "group_size": int, "eps": float, "ste": str}
_CORPUS_KEYS = {"generator": str, "seed": int, "length": int, "eval_length": int}
_TRAIN_KEYS = {"steps": int, "batch": int, "seq_len": int, "peak_lr": float, "warmup": int,
               "min_lr_ratio": float, "weight_decay": float, "clip": float, "seed": int,
               "eval_windows": int}
_OUTPUT_KEYS = {"dir": str, "format": str}
_COMPARE_KEYS = {"balance": bool, "reference": str}
_TOP = {"model": dict, "corpus": dict, "training": dict, "output": dict,
        "compare": dict, "methods": list}

# desk-scale defaults
MODEL_DEFAULTS = dict(variant="mha", d_model=128, n_layers=8, n_heads=4, head_dim=32,
                      latent_dim=64, rope_dim=16, ffn_hidden=344, vocab_size=256, seed=0)
QUANT_DEFAULTS = dict(bits=4, group_size=16)


@dataclass
class MethodSpec:
    name: str
    model: ModelConfig


@dataclass
class ExperimentConfig:
    model: ModelConfig
    corpus: dict
    training: TrainSpec
    eval_windows: int
    out_dir: Path
    report_format: str
    methods: list[MethodSpec] = field(default_factory=list)
    balance: bool = True
    reference: str | None = None
    source: str = ""


class _Locator:
    """Maps table paths and keys back to line numbers of the source text."""

    def __init__(self, text: str):
        self.lines = text.splitlines()

    def header(self, table: str, index: int = 0) -> int | None:
        pat = re.compile(r"^\s*\[\[?\s*" + re.escape(table) + r"\s*\]\]?\s*(#.*)?$")
        hits = [i + 1 for i, ln in enumerate(self.lines) if pat.match(ln)]
        return hits[index] if index < len(hits) else None

    def key(self, table: str, key: str, index: int = 0) -> int | None:
        start = (self.header(table, index) or 0) if table else 0
        pat = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
        for i in range(start, len(self.lines)):
            if table and re.match(r"^\s*\[", self.lines[i]):
                break
            if pat.match(self.lines[i]):
                return i + 1
        return start or None


def _err(loc: _Locator, table: str, key: str | None, msg: str, index: int = 0) -> ConfigError:
    if not table:
        line = loc.header(key) or loc.key("", key)
    else:
        line = loc.key(table, key, index) if key else loc.header(table, index)
    where = f"line {line}: " if line else ""
    name = ".".join(p for p in (table, key) if p)
    return ConfigError(f"{where}{name}: {msg}")


def _check_table(loc, table, data, schema, index=0):
    if not isinstance(data, dict):
        raise _err(loc, table, None, "must be a table", index)
    for key, val in data.items():
        if key not in schema:
            raise _err(loc, table, key, f"unknown key (allowed: {', '.join(sorted(schema))})", index)
        want = schema[key]
        ok = isinstance(val, want) and not (want is int and isinstance(val, bool))
        if want is float and isinstance(val, int) and not isinstance(val, bool):
            ok = True
        if not ok:
            raise _err(loc, table, key, f"expected {want.__name__}, got {type(val).__name__}", index)


def _require(loc, table, data, keys, index=0):
    for k in keys:
        if k not in data:
            raise _err(loc, table, None, f"missing required key '{k}'", index)


def _build_model(loc, table, raw: dict, index=0) -> ModelConfig:
    m = {**MODEL_DEFAULTS, **raw}
    quant = None
    if "quant" in m:
        _check_table(loc, f"{table}.quant", m["quant"], _QUANT_KEYS, index)
        try:
            quant = QuantConfig(**{**QUANT_DEFAULTS, **m["quant"]})
        except QuantConfigError as exc:
            raise _err(loc, f"{table}.quant", None, str(exc), index) from exc
    attn_keys = ("variant", "d_model", "n_layers", "n_heads", "head_dim", "kv_heads", "latent_dim",
                 "rope_dim", "q_lora_rank", "sharing_factor", "rope_base", "rope", "latent_norm",
                 "share_hidden", "share_kv_proj")
    attn_args = {k: m[k] for k in attn_keys if k in m}
    variant = attn_args.get("variant", "mha")
    if variant in ("mha", "gqa", "cla"):
        attn_args.pop("latent_dim", None)
        attn_args.pop("rope_dim", None)
    try:
        attn = AttnConfig(quant=quant, **attn_args)
        return ModelConfig(attn, ffn_hidden=m["ffn_hidden"], vocab_size=m["vocab_size"],
                           tie_embeddings=m.get("tie_embeddings", False), seed=m["seed"])
    except (AttnConfigError, QuantConfigError) as exc:
        bad = next((k for k in attn_keys if k in raw and k in str(exc)), None)
        raise _err(loc, table, bad, str(exc), index) from exc


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    loc = _Locator(text)
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax error: {exc}") from exc
    _check_table(loc, "", raw, _TOP)
    for name in ("model", "corpus"):
        if name not in raw:
            raise ConfigError(f"missing required table [{name}]")
    _check_table(loc, "model", raw["model"], _MODEL_KEYS)
    model = _build_model(loc, "model", raw["model"])

    corpus = raw["corpus"]
    _check_table(loc, "corpus", corpus, _CORPUS_KEYS)
    _require(loc, "corpus", corpus, ("generator", "seed", "length"))
    if corpus["generator"] not in ("markov", "copy"):
        raise _err(loc, "corpus", "generator", f"unknown generator {corpus['generator']!r}")
    if corpus["length"] < 64:
        raise _err(loc, "corpus", "length", "must be at least 64 tokens")

    tr = raw.get("training", {})
    _check_table(loc, "training", tr, _TRAIN_KEYS)
    eval_windows = tr.get("eval_windows", 64)
    spec = TrainSpec(**{k: v for k, v in tr.items() if k != "eval_windows"})
    for key in ("steps", "batch", "seq_len"):
        if getattr(spec, key) < 1:
            raise _err(loc, "training", key, "must be >= 1")
    if spec.peak_lr <= 0:
        raise _err(loc, "training", "peak_lr", "must be positive")

    out = raw.get("output", {})
    _check_table(loc, "output", out, _OUTPUT_KEYS)
    fmt = out.get("format", "table")
    if fmt not in ("table", "tsv"):
        raise _err(loc, "output", "format", "must be 'table' or 'tsv'")
    out_dir = Path(out.get("dir", "runs/experiment"))
    if base_dir is not None and not out_dir.is_absolute():
        out_dir = Path(os.path.normpath(base_dir / out_dir))

    cmp_ = raw.get("compare", {})
    _check_table(loc, "compare", cmp_, _COMPARE_KEYS)
    methods = []
    for i, mraw in enumerate(raw.get("methods", [])):
        _check_table(loc, "methods", mraw, {"name": str, **_MODEL_KEYS}, i)
        _require(loc, "methods", mraw, ("name",), i)
        overrides = {k: v for k, v in mraw.items() if k != "name"}
        # quantization is per method, never inherited from [model]
        merged = {**{k: v for k, v in raw["model"].items() if k != "quant"}, **overrides}
        methods.append(MethodSpec(mraw["name"], _build_model(loc, "methods", merged, i)))
    names = [m.name for m in methods]
    if len(set(names)) != len(names):
        raise _err(loc, "methods", "name", "method names must be unique")
    reference = cmp_.get("reference")
    if reference is not None and reference not in names:
        raise _err(loc, "compare", "reference", f"no method named {reference!r}")

    return ExperimentConfig(model=model, corpus=corpus, training=spec, eval_windows=eval_windows,
                            out_dir=out_dir, report_format=fmt, methods=methods,
                            balance=cmp_.get("balance", True), reference=reference, source=text)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base_dir=path.parent)
