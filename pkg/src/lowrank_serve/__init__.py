"""Low-rank factorised transformer inference on the CPU.

Compress a dense model into truncated-SVD factors, normalise any checkpoint
family into one canonical layout, and serve it with streaming prefill,
dense-KV decode and replayable per-layer execution plans.
"""

from .checkpoint import (
    CanonicalModel,
    Checkpoint,
    FactorizedLinear,
    export_checkpoint,
    load_checkpoint,
    normalize,
    pack_ffn,
    read_checkpoint,
    save_checkpoint,
    write_checkpoint,
)
from .compress import (
    CompressionSpec,
    DenseModel,
    compress,
    compress_basis_shared,
    compress_plain,
    compress_whitened,
    generate_toy_dense,
    rank_for_ratio,
)
from .config import ModelConfig, get_preset
from .errors import *  # noqa: F401,F403
from .harness import AuditReport, BenchConfig, BenchResult, audit_fidelity, bench, graph_ablation
from .harness import sweep_cached_len, sweep_ratio
from .plan import Counters, route_ffn_auto
from .reference import greedy_reference, reference_forward_nocache
from .runtime import Session, decode_step, ffn_no_merge, ffn_packed, generate, lowrank_history_attend, prefill
from .tensor import Rng64, online_softmax_attend, softmax_attend_naive, truncated_svd

__version__ = "0.1.0"
