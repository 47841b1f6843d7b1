"""Command-line harness: ``kvlab {train,eval-ppl,bench-cache,compare-methods,grad-check}``.

Exit codes: 0 success, 1 configuration or usage error, 2 numeric or
validation failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path


from .attention import AttnConfigError
from .cache import format_reports, memory_bytes, paper_methods, render_table
from .checks import op_cases, run_suite, ste_fixture_errors, variant_cases, variant_configs
from .config import ConfigError, ExperimentConfig, load_config
from .model import CheckpointError, ModelConfig, balance_ffn, load_checkpoint, param_count, save_checkpoint
from .quant import QuantConfigError
from .tensor import NumericError
from .train import TrainingError, eval_ppl, make_corpus, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _corpora(exp: ExperimentConfig, vocab: int):
    c = exp.corpus
    eval_len = c.get("eval_length", max(1024, c["length"] // 10))
    full = make_corpus(c["generator"], c["length"] + eval_len, vocab, c["seed"])
    return full[:c["length"]], full[c["length"]:]


def _run_training(cfg: ModelConfig, exp: ExperimentConfig, out_dir: Path, echo=None) -> dict:
    train_ids, eval_ids = _corpora(exp, cfg.vocab_size)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.tsv"
    with open(log_path, "w") as log:
        log.write("step\tloss\tlr\tgrad_norm\n")

        def on_step(rec):
            log.write(f"{rec['step']}\t{rec['loss']!r}\t{rec['lr']!r}\t{rec['grad_norm']!r}\n")
            log.flush()
            if echo and (rec["step"] == 1 or rec["step"] % echo == 0):
                print(f"step {rec['step']:>6}  loss {rec['loss']:.4f}  lr {rec['lr']:.2e}  "
                      f"grad_norm {rec['grad_norm']:.3f}", flush=True)

        state = train(cfg, train_ids, exp.training, on_step=on_step)
    save_checkpoint(state.model, out_dir / "checkpoint.kvlm")
    ppl = eval_ppl(state.model, eval_ids, exp.training.seq_len, exp.eval_windows)
    metrics = {
        "params": param_count(cfg),
        "initial_loss": state.log[0]["loss"],
        "final_loss": state.log[-1]["loss"],
        "eval_ppl": ppl,
        "steps": state.step,
    }
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    return metrics


def cmd_train(args) -> int:
    exp = load_config(args.config)
    out_dir = Path(args.out) if args.out else exp.out_dir
    metrics = _run_training(exp.model, exp, out_dir, echo=args.echo)
    print(f"final loss {metrics['final_loss']:.4f}  eval ppl {metrics['eval_ppl']:.4f}  "
          f"checkpoint {out_dir / 'checkpoint.kvlm'}")
    return EXIT_OK


def cmd_eval_ppl(args) -> int:
    exp = load_config(args.config)
    ckpt = Path(args.checkpoint) if args.checkpoint else exp.out_dir / "checkpoint.kvlm"
    model = load_checkpoint(ckpt)
    _, eval_ids = _corpora(exp, model.cfg.vocab_size)
    print(f"eval ppl {eval_ppl(model, eval_ids, exp.training.seq_len, exp.eval_windows):.6f}")
    return EXIT_OK


def cmd_bench_cache(args) -> int:
    try:
        methods = paper_methods(n_heads=args.heads, head_dim=args.head_dim, latent_dim=args.latent,
                                rope_dim=args.rope_dim, sharing_factor=args.sharing, bits=args.bits,
                                group_size=args.group, kv_heads=args.kv_heads, n_layers=args.layers,
                                extended=args.extended)
    except (AttnConfigError, QuantConfigError) as exc:
        print(f"invalid geometry: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    modes = ["paper", "principled"] if args.mode == "both" else [args.mode]
    reports = [memory_bytes(cfg, mode, name) for mode in modes for name, cfg in methods]
    sys.stdout.write(format_reports(reports, args.batch, args.seq, args.format))
    return EXIT_OK


def _train_method(payload):
    name, cfg, exp, out_dir = payload
    return name, _run_training(cfg, exp, out_dir)


def compare_methods(exp: ExperimentConfig, jobs: int = 1) -> tuple[list[list], list]:
    """Train every ``[[methods]]`` entry identically; returns (rows, memory reports)."""
    if not exp.methods:
        raise ConfigError("compare-methods needs at least one [[methods]] table")
    ref_name = exp.reference or exp.methods[0].name
    ref = next(m for m in exp.methods if m.name == ref_name)
    target = param_count(ref.model)
    configs = []
    for m in exp.methods:
        cfg = balance_ffn(m.model, target) if exp.balance and m is not ref else m.model
        configs.append((m.name, cfg, exp, exp.out_dir / m.name))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = dict(pool.map(_train_method, configs))
    else:
        results = dict(_train_method(c) for c in configs)
    rows, reports = [], []
    for name, cfg, _, _ in configs:
        a = cfg.attn
        met = results[name]
        principled = memory_bytes(a, "principled", name)
        rows.append([name, a.variant, a.head_dim, a.sharing_factor, a.n_heads, a.n_kv_heads,
                     a.latent_dim, cfg.ffn_hidden, met["params"], principled.bytes_per_token,
                     memory_bytes(a, "paper", name).bytes_per_token,
                     round(met["final_loss"], 4), round(met["eval_ppl"], 4)])
        reports.append(principled)
        reports.append(memory_bytes(a, "paper", name))
    return rows, reports


COMPARE_HEADER = ["method", "variant", "d_head", "sharing_factor", "q_heads", "kv_heads", "latent_dim",
                  "ffn_hidden", "params", "kv_bytes_per_token_principled", "kv_bytes_per_token_paper",
                  "final_loss", "val_ppl"]


def cmd_compare_methods(args) -> int:
    exp = load_config(args.config)
    if args.out:
        exp.out_dir = Path(args.out)
    rows, reports = compare_methods(exp, args.jobs)
    reports.sort(key=lambda r: (r.mode != "paper", ))
    table = render_table(COMPARE_HEADER, rows, exp.report_format)
    memory = format_reports(reports, 1, 1, exp.report_format)
    exp.out_dir.mkdir(parents=True, exist_ok=True)
    (exp.out_dir / "compare.tsv").write_text(render_table(COMPARE_HEADER, rows, "tsv"))
    (exp.out_dir / "memory.tsv").write_text(format_reports(reports, 1, 1, "tsv"))
    sys.stdout.write(table + "\n" + memory)
    return EXIT_OK


def cmd_grad_check(args, extra_cases=()) -> int:
    names = None if args.variants == "all" else set(args.variants.split(","))
    if names is not None:
        unknown = names - set(variant_configs())
        if unknown:
            print(f"unknown variants: {', '.join(sorted(unknown))}", file=sys.stderr)
            return EXIT_CONFIG
    cases = (op_cases(args.seed) if not args.skip_ops else []) + variant_cases(args.seed, names)
    cases += list(extra_cases)
    results = run_suite(cases)
    failed = 0
    for r in results:
        tag = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{tag}  {r.name:<28} max_rel_err={r.error:.3e}  tol={r.tol:.0e}")
    ste = ste_fixture_errors()
    print(f"{'PASS' if not ste else 'FAIL'}  {'fake_quant:clipped_ste':<28} {'; '.join(ste) or 'contract holds'}")
    failed += bool(ste)
    print(f"{len(results) + 1 - failed}/{len(results) + 1} checks passed")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kvlab", description="KV-cache compression laboratory")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one model from a config file")
    t.add_argument("config")
    t.add_argument("--out", help="override [output].dir")
    t.add_argument("--echo", type=int, default=0, metavar="N", help="print every N steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval-ppl", help="perplexity of a checkpoint on the held-out corpus")
    e.add_argument("config")
    e.add_argument("--checkpoint")
    e.set_defaults(func=cmd_eval_ppl)

    b = sub.add_parser("bench-cache", help="KV-cache bytes per token for every method")
    b.add_argument("--heads", type=int, default=16)
    b.add_argument("--head-dim", type=int, default=96)
    b.add_argument("--kv-heads", type=int, default=8, help="GQA key/value heads")
    b.add_argument("--latent", type=int, default=512)
    b.add_argument("--rope-dim", type=int, default=64)
    b.add_argument("--sharing", type=int, default=2)
    b.add_argument("--bits", type=int, default=4)
    b.add_argument("--group", type=int, default=32)
    b.add_argument("--layers", type=int, default=32)
    b.add_argument("--batch", type=int, default=1)
    b.add_argument("--seq", type=int, default=1)
    b.add_argument("--mode", choices=("paper", "principled", "both"), default="both")
    b.add_argument("--format", choices=("table", "tsv"), default="table")
    b.add_argument("--extended", action="store_true", help="add MQA, CLA and the CLLA ablations")
    b.set_defaults(func=cmd_bench_cache)

    c = sub.add_parser("compare-methods", help="train several variants and report side by side")
    c.add_argument("config")
    c.add_argument("--out")
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_compare_methods)

    g = sub.add_parser("grad-check", help="finite-difference check of every op and variant")
    g.add_argument("--variants", default="all", help="comma-separated names or 'all'")
    g.add_argument("--skip-ops", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("batch", "seq", "layers", "heads"):
        if getattr(args, name, 1) < 1:
            print(f"invalid geometry: --{name} must be >= 1", file=sys.stderr)
            return EXIT_CONFIG
    try:
        return args.func(args)
    except (ConfigError, AttnConfigError, QuantConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, NumericError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
