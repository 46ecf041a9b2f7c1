"""Benchmarks, sweeps and the greedy-decode fidelity audit.

Timing claims are reported as medians over measured runs with p10/p90
spread; counter fields (dispatch, alloc, copy bytes, FLOPs) are exact and
deterministic. Runs of several configurations are interleaved round-robin
so slow drift of the host affects every configuration alike.
"""

import csv
import gc
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .checkpoint import CanonicalModel, Checkpoint, normalize
from .errors import ConfigurationError
from .reference import greedy_reference
from .runtime import ATTN_ROUTES, Session, canon
from .plan import FFN_BACKENDS, PLAN_MODES
from .tensor import DTYPES, Rng64

CSV_COLUMNS = (
    "config_id", "prompt_len", "gen_len", "attn_route", "ffn", "plan", "dtype",
    "prefill_ms", "decode_ms_per_token_med", "decode_p10", "decode_p90", "e2e_s",
    "dispatch_per_step", "alloc_per_step", "copy_bytes_per_step",
)

BEST_PATH = dict(attn_route="dense_kv", ffn="packed", plan="per_layer")
EAGER_NAIVE = dict(attn_route="lowrank_history", ffn="no_merge", plan="eager")
DENSE_BASELINE = dict(attn_route="dense_kv", ffn="no_merge", plan="eager")

ModelLike = Union[CanonicalModel, Checkpoint]


def _model(m: ModelLike) -> CanonicalModel:
    return normalize(m) if isinstance(m, Checkpoint) else m


@dataclass(frozen=True)
class BenchConfig:
    prompt_len: int = 512
    gen_len: int = 128
    warmup_runs: int = 5
    measured_runs: int = 20
    attn_route: str = "dense_kv"
    ffn: str = "auto"
    plan: str = "eager"
    dtype: str = "f32"
    seed: int = 0
    capacity: Optional[int] = None

    def validate(self) -> "BenchConfig":
        if self.prompt_len < 1 or self.gen_len < 1:
            raise ConfigurationError("prompt_len and gen_len must be >= 1")
        if self.warmup_runs < 0 or self.measured_runs < 3:
            raise ConfigurationError("need warmup_runs >= 0 and measured_runs >= 3")
        if canon(self.attn_route) not in ATTN_ROUTES:
            raise ConfigurationError(f"unknown attention route {self.attn_route!r}")
        if canon(self.ffn) not in FFN_BACKENDS:
            raise ConfigurationError(f"unknown FFN backend {self.ffn!r}")
        if canon(self.plan) not in PLAN_MODES:
            raise ConfigurationError(f"unknown plan mode {self.plan!r}")
        if self.dtype not in DTYPES:
            raise ConfigurationError(f"unknown dtype {self.dtype!r}")
        if self.prompt_len + self.gen_len > self.session_capacity:
            raise ConfigurationError(
                f"prompt {self.prompt_len} + gen {self.gen_len} exceeds capacity {self.capacity}"
            )
        return self

    @property
    def session_capacity(self) -> int:
        return self.capacity or self.prompt_len + self.gen_len

    @property
    def config_id(self) -> str:
        return "/".join((canon(self.attn_route), canon(self.ffn), canon(self.plan), self.dtype))

    def with_axes(self, **axes) -> "BenchConfig":
        kw = asdict(self)
        kw.update(axes)
        return BenchConfig(**kw)


@dataclass
class BenchResult:
    config: BenchConfig
    ffn_resolved: str
    decode_ms_per_token_med: float
    decode_p10: float
    decode_p90: float
    prefill_ms: float
    e2e_s: float
    dispatch_per_step: int
    alloc_per_step: int
    copy_bytes_per_step: int
    tokens: List[int]
    samples: Dict[str, List[float]] = field(default_factory=dict)

    def row(self) -> dict:
        c = self.config
        return {
            "config_id": c.config_id,
            "prompt_len": c.prompt_len,
            "gen_len": c.gen_len,
            "attn_route": canon(c.attn_route),
            "ffn": self.ffn_resolved,
            "plan": canon(c.plan),
            "dtype": c.dtype,
            "prefill_ms": self.prefill_ms,
            "decode_ms_per_token_med": self.decode_ms_per_token_med,
            "decode_p10": self.decode_p10,
            "decode_p90": self.decode_p90,
            "e2e_s": self.e2e_s,
            "dispatch_per_step": self.dispatch_per_step,
            "alloc_per_step": self.alloc_per_step,
            "copy_bytes_per_step": self.copy_bytes_per_step,
        }

    def record(self) -> dict:
        return {**self.row(), "samples": self.samples}


def bench_prompt(config: BenchConfig, vocab: int) -> List[int]:
    return [int(t) for t in Rng64(config.seed).token_array(config.prompt_len, vocab)]


def _one_run(model: CanonicalModel, c: BenchConfig, prompt):
    s = Session(
        model, capacity=c.session_capacity, attn_route=c.attn_route,
        ffn_backend=c.ffn, plan_mode=c.plan, dtype=c.dtype,
    )
    gc.collect()
    gc.disable()
    try:
        t0 = time.perf_counter()
        res = s.generate(prompt, c.gen_len)
        e2e = time.perf_counter() - t0
    finally:
        gc.enable()
    return s, res, e2e


def bench_many(configs: Sequence[BenchConfig], model: ModelLike) -> List[BenchResult]:
    """Bench several configurations with their runs interleaved round-robin."""
    model = _model(model)
    configs = [c.validate() for c in configs]
    prompts = [bench_prompt(c, model.config.vocab) for c in configs]
    n_runs = max(c.warmup_runs + c.measured_runs for c in configs)
    per = [dict(decode=[], prefill=[], e2e=[]) for _ in configs]
    last = [None] * len(configs)
    for run in range(n_runs):
        for i, c in enumerate(configs):
            if run >= c.warmup_runs + c.measured_runs:
                continue
            s, res, e2e = _one_run(model, c, prompts[i])
            if last[i] is not None and res.tokens != last[i][1].tokens:
                raise ConfigurationError(f"{c.config_id}: nondeterministic tokens across runs")
            last[i] = (s, res)
            if run >= c.warmup_runs:
                per[i]["decode"].append(res.decode_ms / c.gen_len)
                per[i]["prefill"].append(res.prefill_ms)
                per[i]["e2e"].append(e2e)
    out = []
    for i, c in enumerate(configs):
        s, res = last[i]
        steady = res.steps[-1]
        dec = np.asarray(per[i]["decode"])
        p10, med, p90 = np.percentile(dec, [10, 50, 90])
        out.append(
            BenchResult(
                config=c,
                ffn_resolved=s.ffn_backend,
                decode_ms_per_token_med=float(med),
                decode_p10=float(p10),
                decode_p90=float(p90),
                prefill_ms=float(np.median(per[i]["prefill"])),
                e2e_s=float(np.median(per[i]["e2e"])),
                dispatch_per_step=steady.dispatch_count,
                alloc_per_step=steady.alloc_count,
                copy_bytes_per_step=steady.copy_bytes,
                tokens=list(res.tokens),
                samples={k: [float(x) for x in v] for k, v in per[i].items()},
            )
        )
    return out


def bench(config: BenchConfig, model: ModelLike) -> BenchResult:
    """Warmup then measured generations of one configuration.

    Decode ms/token is the median over runs of total decode wall time divided
    by ``gen_len``; per-step counters are the steady-state (last step) values.
    """
    return bench_many([config], model)[0]


def write_csv(rows: Sequence[dict], path, columns: Sequence[str] = CSV_COLUMNS) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)


def write_json(records, path) -> None:
    with open(path, "w") as f:
        json.dump(records, f, indent=2, sort_keys=True)


# -- sweeps --------------------------------------------------------------------


def sweep_ratio(
    make_checkpoint: Callable[[float], Checkpoint], rhos: Sequence[float], config: BenchConfig
) -> List[dict]:
    """Compress at every ratio and report best-path speedup over eager-naive."""
    rows = []
    for rho in rhos:
        if not 0 < rho <= 1:
            raise ConfigurationError(f"retained ratio {rho} outside (0, 1]")
        model = normalize(make_checkpoint(rho))
        best, naive = bench_many([config.with_axes(**BEST_PATH), config.with_axes(**EAGER_NAIVE)], model)
        rows.append(
            {
                "retained_ratio": rho,
                "factor_params": model.factor_param_count(),
                "best_decode_ms": best.decode_ms_per_token_med,
                "naive_decode_ms": naive.decode_ms_per_token_med,
                "speedup": naive.decode_ms_per_token_med / best.decode_ms_per_token_med,
            }
        )
    return rows


@dataclass
class LengthSeries:
    route: str
    lengths: List[int]
    median_ms: List[float]
    recon_flops: List[int]
    samples: List[List[float]]

    @property
    def slope_ms_per_token(self) -> float:
        """Least-squares slope of median step latency against cached length."""
        return float(np.polyfit(self.lengths, self.median_ms, 1)[0])


def sweep_cached_len(
    model: ModelLike,
    lengths: Sequence[int],
    runs: int = 20,
    steps: int = 20,
    warmup: int = 2,
    dtype: str = "f32",
    seed: int = 0,
    routes: Sequence[str] = ATTN_ROUTES,
) -> Dict[str, LengthSeries]:
    """Per-step decode latency and reconstruction FLOPs versus cached length.

    One session per route is prefilled with the longest prompt; each length
    L is reached by rewinding to L cached positions (longest first), after which ``steps``
    decode steps are timed and rewound again. Each run contributes its median
    step time; the reported value is the median over runs.
    """
    model = _model(model)
    lengths = [int(n) for n in lengths]
    if lengths != sorted(lengths) or not lengths or lengths[0] < 1:
        raise ConfigurationError("lengths must be ascending and positive")
    tokens = [int(t) for t in Rng64(seed).token_array(lengths[-1] + steps, model.config.vocab)]
    out = {}
    for route in routes:
        route = canon(route)
        s = Session(model, capacity=lengths[-1] + steps, attn_route=route, plan_mode="eager",
                    ffn_backend="no_merge", dtype=dtype)
        s.prefill(tokens[: lengths[-1]])
        meds, flops, samples = [], [], []
        # rewind only shrinks the cache, so visit lengths longest first
        for n in reversed(lengths):
            s.rewind(s.position - n)
            per_run = []
            for r in range(warmup + runs):
                first = len(s.steps)
                gc.disable()
                try:
                    for t in tokens[n : n + steps]:
                        s.decode_step(t)
                finally:
                    gc.enable()
                if r >= warmup:
                    per_run.append(float(np.median([st.wall_ms for st in s.steps[first:]])))
                    if r == warmup:
                        flops.append(s.steps[first].recon_flops)
                s.rewind(steps)
            samples.append(per_run)
            meds.append(float(np.median(per_run)))
            del s.steps[:]
        out[route] = LengthSeries(route, lengths, meds[::-1], flops[::-1], samples[::-1])
    return out


def graph_ablation(model: ModelLike, config: BenchConfig) -> List[dict]:
    """Bench eager, split and per-layer plans on matched checkpoint and dtype."""
    configs = [config.with_axes(plan=p) for p in ("eager", "split", "per_layer")]
    results = bench_many(configs, model)
    base = results[0]
    rows = []
    for r in results:
        row = r.row()
        row["decode_norm"] = r.decode_ms_per_token_med / base.decode_ms_per_token_med
        row["dispatch_norm"] = r.dispatch_per_step / base.dispatch_per_step
        rows.append(row)
    return rows


# -- fidelity audit ------------------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    name: str
    plan: str = "eager"
    dtype: str = "f32"
    attn_route: str = "dense_kv"
    ffn: str = "packed"


DEFAULT_CANDIDATES = (
    Candidate("f32_eager", plan="eager"),
    Candidate("f32_per_layer", plan="per_layer"),
)


@dataclass
class CandidateScore:
    exact_match: int
    first_token_match: int
    mean_token_match: float


@dataclass
class AuditReport:
    n_prompts: int
    max_new: int
    scores: Dict[str, CandidateScore]
    pairwise_exact: Optional[int]
    pair: Optional[List[str]]

    def check(self) -> "AuditReport":
        for name, sc in self.scores.items():
            if sc.first_token_match < sc.exact_match or not 0.0 <= sc.mean_token_match <= 1.0:
                raise AssertionError(f"audit invariant violated for {name}: {sc}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def audit_prompts(n_prompts: int, vocab: int, seed: int = 0, lo: int = 16, hi: int = 128) -> List[List[int]]:
    rng = Rng64(seed)
    prompts = []
    for _ in range(n_prompts):
        n = rng.randint(lo, hi)
        prompts.append([int(t) for t in rng.token_array(n, vocab)])
    return prompts


def audit_fidelity(
    model: ModelLike,
    n_prompts: int = 20,
    max_new: int = 64,
    seed: int = 0,
    candidates: Sequence[Candidate] = DEFAULT_CANDIDATES,
) -> AuditReport:
    """Score cached candidates against the f64 no-cache greedy gold."""
    if n_prompts < 1 or max_new < 1:
        raise ConfigurationError("audit needs n_prompts >= 1 and max_new >= 1")
    model = _model(model)
    prompts = audit_prompts(n_prompts, model.config.vocab, seed)
    gold_model = model.astype(np.float64)
    outs = {c.name: [] for c in candidates}
    golds = []
    for p in prompts:
        golds.append(greedy_reference(gold_model, p, max_new)[0])
        for c in candidates:
            s = Session(model, capacity=len(p) + max_new, attn_route=c.attn_route,
                        ffn_backend=c.ffn, plan_mode=c.plan, dtype=c.dtype)
            outs[c.name].append(s.generate(p, max_new).tokens)
    scores = {}
    for c in candidates:
        exact = first = 0
        frac = 0.0
        for g, t in zip(golds, outs[c.name]):
            agree = sum(a == b for a, b in zip(g, t))
            exact += agree == max_new
            first += g[0] == t[0]
            frac += agree / max_new
        scores[c.name] = CandidateScore(exact, first, frac / n_prompts)
    pair = pairwise = None
    if len(candidates) == 2:
        pair = [candidates[0].name, candidates[1].name]
        pairwise = sum(a == b for a, b in zip(outs[pair[0]], outs[pair[1]]))
    return AuditReport(n_prompts, max_new, scores, pairwise, pair).check()
