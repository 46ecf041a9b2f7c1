"""Command-line entry point: ``lowrank-serve <subcommand> ...``."""

import argparse
import sys
from dataclasses import asdict
from typing import List, Optional

from .checkpoint import export_checkpoint, load_checkpoint, normalize, save_checkpoint
from .compress import METHODS, CompressionSpec, checkpoint_factor_params, compress, generate_toy_dense
from .config import PRESETS, get_preset
from .errors import LowRankServeError
from .harness import (
    BenchConfig,
    audit_fidelity,
    bench,
    graph_ablation,
    sweep_cached_len,
    sweep_ratio,
    write_csv,
    write_json,
)
from .runtime import Session, canon

ROUTES = ("dense-kv", "lowrank-history", "dense_kv", "lowrank_history")
FFNS = ("auto", "no-merge", "packed", "no_merge")
PLANS = ("eager", "split", "per-layer", "per_layer")
METHOD_CHOICES = METHODS + ("basis-shared",)


def _floats(text: str) -> List[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _ints(text: str) -> List[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _backend_flags(p, plan_default="eager"):
    p.add_argument("--attn-route", choices=ROUTES, default="dense-kv")
    p.add_argument("--ffn", choices=FFNS, default="auto")
    p.add_argument("--plan", choices=PLANS, default=plan_default)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")


def _timing_flags(p):
    p.add_argument("--prompt-len", type=int, default=512)
    p.add_argument("--gen", type=int, default=128)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json")
    p.add_argument("--csv")


def _bench_config(args) -> BenchConfig:
    return BenchConfig(
        prompt_len=args.prompt_len, gen_len=args.gen, warmup_runs=args.warmup, measured_runs=args.runs,
        attn_route=args.attn_route, ffn=args.ffn, plan=args.plan, dtype=args.dtype, seed=args.seed,
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lowrank-serve", description="Low-rank factorised inference toolkit.")
    sub = ap.add_subparsers(dest="cmd", metavar="subcommand")

    p = sub.add_parser("compress", help="build a seeded toy model and compress it")
    p.add_argument("--config", choices=sorted(PRESETS), default="desk")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--method", choices=METHOD_CHOICES, default="plain", type=canon)
    p.add_argument("--ratio", type=float, default=0.5)
    p.add_argument("--group-size", type=int, default=1)
    p.add_argument("--calib-seed", type=int, default=0)
    p.add_argument("--calib-tokens", type=int, default=256)
    p.add_argument("--out", required=True)

    p = sub.add_parser("normalize", help="rewrite any family as a canonical checkpoint")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("generate", help="greedy decode from a prompt file of token ids")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt-file", required=True)
    p.add_argument("--max-new", type=int, default=32)
    _backend_flags(p)
    p.add_argument("--json")

    p = sub.add_parser("bench", help="time one backend configuration")
    p.add_argument("--ckpt", required=True)
    _backend_flags(p)
    _timing_flags(p)

    p = sub.add_parser("sweep-ratio", help="best path vs eager-naive across retained ratios")
    p.add_argument("--config", choices=sorted(PRESETS), default="desk")
    p.add_argument("--model-seed", type=int, default=1)
    p.add_argument("--method", choices=METHOD_CHOICES, default="plain", type=canon)
    p.add_argument("--ratios", type=_floats, default=[0.2, 0.4, 0.6, 0.8])
    p.add_argument("--group-size", type=int, default=1)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    _timing_flags(p)

    p = sub.add_parser("sweep-cached-len", help="decode latency vs cached length per attention route")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--lengths", type=_ints, default=[512, 1024, 2048, 4096])
    p.add_argument("--runs", type=int, default=20)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json")
    p.add_argument("--csv")

    p = sub.add_parser("graph-ablation", help="eager vs split vs per-layer plans")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--attn-route", choices=ROUTES, default="dense-kv")
    p.add_argument("--ffn", choices=FFNS, default="no-merge")
    p.add_argument("--dtype", choices=("f32", "f64"), default="f32")
    _timing_flags(p)

    p = sub.add_parser("audit", help="greedy fidelity vs the f64 no-cache gold")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompts", type=int, default=20)
    p.add_argument("--max-new", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json")
    return ap


def _cmd_compress(args):
    cfg = get_preset(args.config)
    spec = CompressionSpec(args.method, args.ratio, args.group_size, args.calib_seed, args.calib_tokens)
    spec.validate(cfg)
    ckpt = compress(generate_toy_dense(cfg, args.seed), spec)
    save_checkpoint(args.out, ckpt)
    print(f"wrote {args.out}: family {ckpt.family}, {checkpoint_factor_params(ckpt)} factor parameters")


def _cmd_normalize(args):
    ckpt = load_checkpoint(args.inp)
    out = export_checkpoint(normalize(ckpt))
    save_checkpoint(args.out, out)
    print(f"normalized family {ckpt.family} -> {out.family}: {args.out}")


def _read_prompt(path) -> List[int]:
    with open(path) as f:
        text = f.read().replace(",", " ")
    return [int(t) for t in text.split()]


def _cmd_generate(args):
    model = normalize(load_checkpoint(args.ckpt))
    prompt = _read_prompt(args.prompt_file)
    s = Session(model, capacity=len(prompt) + args.max_new, attn_route=args.attn_route,
                ffn_backend=args.ffn, plan_mode=args.plan, dtype=args.dtype)
    res = s.generate(prompt, args.max_new)
    print(" ".join(str(t) for t in res.tokens))
    print(f"prefill {res.prefill_ms:.2f} ms, decode {res.decode_ms / max(1, len(res.steps)):.3f} ms/token",
          file=sys.stderr)
    if args.json:
        write_json({"tokens": res.tokens, "prefill_ms": res.prefill_ms,
                    "steps": [asdict(st) for st in res.steps]}, args.json)


def _print_rows(rows, keys):
    for r in rows:
        print("  ".join(f"{k}={r[k]:.4g}" if isinstance(r[k], float) else f"{k}={r[k]}" for k in keys))


def _cmd_bench(args):
    res = bench(_bench_config(args), load_checkpoint(args.ckpt))
    row = res.row()
    _print_rows([row], ("config_id", "decode_ms_per_token_med", "decode_p10", "decode_p90",
                        "prefill_ms", "dispatch_per_step", "alloc_per_step"))
    if args.json:
        write_json(res.record(), args.json)
    if args.csv:
        write_csv([row], args.csv)


def _cmd_sweep_ratio(args):
    cfg = get_preset(args.config)
    dense = generate_toy_dense(cfg, args.model_seed)

    def make(rho):
        return compress(dense, CompressionSpec(args.method, rho, args.group_size).validate(cfg))

    base = BenchConfig(prompt_len=args.prompt_len, gen_len=args.gen, warmup_runs=args.warmup,
                       measured_runs=args.runs, dtype=args.dtype, seed=args.seed)
    rows = sweep_ratio(make, args.ratios, base)
    _print_rows(rows, ("retained_ratio", "factor_params", "best_decode_ms", "naive_decode_ms", "speedup"))
    if args.json:
        write_json(rows, args.json)
    if args.csv:
        write_csv(rows, args.csv, columns=list(rows[0]))


def _cmd_sweep_cached_len(args):
    series = sweep_cached_len(load_checkpoint(args.ckpt), args.lengths, runs=args.runs, steps=args.steps,
                              warmup=args.warmup, dtype=args.dtype, seed=args.seed)
    rows = []
    for route, s in series.items():
        for n, ms, fl in zip(s.lengths, s.median_ms, s.recon_flops):
            rows.append({"attn_route": route, "cached_len": n, "step_ms_med": ms, "recon_flops": fl})
        print(f"{route}: slope {s.slope_ms_per_token:.5f} ms per cached token")
    _print_rows(rows, ("attn_route", "cached_len", "step_ms_med", "recon_flops"))
    if args.json:
        write_json({r: {**asdict(s), "slope_ms_per_token": s.slope_ms_per_token} for r, s in series.items()},
                   args.json)
    if args.csv:
        write_csv(rows, args.csv, columns=list(rows[0]))


def _cmd_graph_ablation(args):
    base = BenchConfig(prompt_len=args.prompt_len, gen_len=args.gen, warmup_runs=args.warmup,
                       measured_runs=args.runs, attn_route=args.attn_route, ffn=args.ffn,
                       dtype=args.dtype, seed=args.seed)
    rows = graph_ablation(load_checkpoint(args.ckpt), base)
    _print_rows(rows, ("plan", "decode_ms_per_token_med", "decode_norm", "dispatch_per_step",
                       "dispatch_norm", "copy_bytes_per_step"))
    if args.json:
        write_json(rows, args.json)
    if args.csv:
        write_csv(rows, args.csv, columns=list(rows[0]))


def _cmd_audit(args):
    rep = audit_fidelity(load_checkpoint(args.ckpt), n_prompts=args.prompts, max_new=args.max_new, seed=args.seed)
    n = rep.n_prompts
    for name, sc in rep.scores.items():
        print(f"{name}: exact {sc.exact_match}/{n}  first-token {sc.first_token_match}/{n}  "
              f"mean {sc.mean_token_match:.4f}")
    if rep.pair:
        print(f"pairwise exact {rep.pair[0]} vs {rep.pair[1]}: {rep.pairwise_exact}/{n}")
    if args.json:
        write_json(rep.to_dict(), args.json)


COMMANDS = {
    "compress": _cmd_compress,
    "normalize": _cmd_normalize,
    "generate": _cmd_generate,
    "bench": _cmd_bench,
    "sweep-ratio": _cmd_sweep_ratio,
    "sweep-cached-len": _cmd_sweep_cached_len,
    "graph-ablation": _cmd_graph_ablation,
    "audit": _cmd_audit,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if args.cmd is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        COMMANDS[args.cmd](args)
    except (LowRankServeError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
