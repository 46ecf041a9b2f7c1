"""Seeded dense toy models and the three low-rank checkpoint families.

* plain (family A): every projection replaced by its truncated SVD factors.
* whitened (family B): SVD of ``diag(s) @ W`` where ``s`` is the RMS of each
  input feature over a calibration stream; stored unfolded as (U, Vt, s).
* basis_shared (family C): one input-side basis per group of consecutive
  layers, obtained from the SVD of the horizontally stacked group weights.
"""

import hashlib
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .checkpoint import PROJECTIONS, Checkpoint, _proj_dims
from .config import ModelConfig
from .errors import CalibrationError, ConfigurationError
from .reference import reference_forward_nocache
from .tensor import Rng64, truncated_svd

METHODS = ("plain", "whitened", "basis_shared")
FAMILY_OF = {"plain": "A", "whitened": "B", "basis_shared": "C"}
SCALE_EPS = 1e-6
MIN_SCALE = 1e-8


@dataclass
class DenseLayer:
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray
    up: np.ndarray
    gate: np.ndarray
    down: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray

    def proj(self, name: str) -> np.ndarray:
        return getattr(self, name)


@dataclass
class DenseModel:
    config: ModelConfig
    layers: List[DenseLayer]
    embed: np.ndarray
    head: np.ndarray
    final_norm: np.ndarray

    def arrays(self):
        """Every tensor in generation order."""
        yield self.embed
        for layer in self.layers:
            for name in PROJECTIONS:
                yield layer.proj(name)
            yield layer.attn_norm
            yield layer.ffn_norm
        yield self.head
        yield self.final_norm

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in self.arrays():
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def projection_param_count(self) -> int:
        return sum(layer.proj(n).size for layer in self.layers for n in PROJECTIONS)


@dataclass(frozen=True)
class CompressionSpec:
    method: str
    retained_ratio: float
    group_size: int = 1
    calib_seed: int = 0
    calib_tokens: int = 256

    def validate(self, cfg: Optional[ModelConfig] = None) -> "CompressionSpec":
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {METHODS}")
        if not 0 < self.retained_ratio <= 1:
            raise ConfigurationError(f"retained ratio must lie in (0, 1], got {self.retained_ratio}")
        if self.method == "basis_shared":
            if self.group_size < 1 or (cfg is not None and cfg.n_layers % self.group_size):
                raise ConfigurationError(f"group_size {self.group_size} must divide n_layers")
        if self.method == "whitened" and self.calib_tokens < 16:
            raise ConfigurationError("whitened compression needs at least 16 calibration tokens")
        return self


def rank_for_ratio(rho: float, m: int, n: int) -> int:
    """Rank whose factor parameter count r*(m+n) is closest to rho*m*n."""
    if not 0 < rho <= 1:
        raise ConfigurationError(f"retained ratio must lie in (0, 1], got {rho}")
    r = int(round(rho * m * n / (m + n)))
    return max(1, min(r, min(m, n)))


def factor_rank(rho: float, m: int, n: int) -> int:
    # rho == 1 means "keep everything": full rank, so the factorisation is lossless
    if rho >= 1:
        return min(m, n)
    return rank_for_ratio(rho, m, n)


def _uniform(rng: Rng64, shape, bound: float) -> np.ndarray:
    n = int(np.prod(shape))
    return (bound * (2.0 * rng.uniform_array(n) - 1.0)).reshape(shape)


def _gamma(rng: Rng64, d: int) -> np.ndarray:
    return 1.0 + 0.1 * (2.0 * rng.uniform_array(d) - 1.0)


def generate_toy_dense(config: ModelConfig, seed: int) -> DenseModel:
    """Draw a dense model from ``Rng64(seed)``.

    Matrices are uniform in [-a, a] with a = sqrt(1 / rows), filled row-major.
    Draw order: embedding; per layer q, k, v, o, up, gate, down, attention
    gamma, FFN gamma; head; final gamma. Gammas are 1 + U[-0.1, 0.1].
    """
    cfg = config.validate()
    rng = Rng64(seed)

    def mat(rows, cols):
        return _uniform(rng, (rows, cols), np.sqrt(1.0 / rows))

    embed = mat(cfg.vocab, cfg.d_model)
    layers = []
    for _ in range(cfg.n_layers):
        projs = {name: mat(*_proj_dims(cfg, name)) for name in PROJECTIONS}
        layers.append(
            DenseLayer(attn_norm=_gamma(rng, cfg.d_model), ffn_norm=_gamma(rng, cfg.d_model), **projs)
        )
    head = mat(cfg.d_model, cfg.vocab)
    final_norm = _gamma(rng, cfg.d_model)
    return DenseModel(cfg, layers, embed, head, final_norm)


def _common_tensors(model: DenseModel) -> Dict[str, np.ndarray]:
    tensors = {"embed": model.embed, "head": model.head, "final_norm": model.final_norm}
    for i, layer in enumerate(model.layers):
        tensors[f"layers.{i}.attn_norm"] = layer.attn_norm
        tensors[f"layers.{i}.ffn_norm"] = layer.ffn_norm
    return tensors


def _meta(method: str, rho: float, **extra) -> dict:
    return {"compression": dict(method=method, retained_ratio=rho, **extra)}


def compress_plain(model: DenseModel, rho: float) -> Checkpoint:
    CompressionSpec("plain", rho).validate()
    tensors = _common_tensors(model)
    for i, layer in enumerate(model.layers):
        for name in PROJECTIONS:
            w = layer.proj(name)
            res = truncated_svd(w, factor_rank(rho, *w.shape))
            tensors[f"layers.{i}.{name}.A"] = res.A
            tensors[f"layers.{i}.{name}.B"] = res.B
    return Checkpoint("A", model.config, tensors, _meta("plain", rho))


def activation_scales(x: np.ndarray, eps: float = SCALE_EPS) -> np.ndarray:
    """Per-feature RMS over the rows of ``x`` plus ``eps``.

    Squares are sorted per column before summation, so the result is exactly
    independent of row order.
    """
    sq = np.sort(np.asarray(x, dtype=np.float64) ** 2, axis=0)
    s = np.sqrt(sq.mean(axis=0)) + eps
    if np.any(s < MIN_SCALE):
        bad = int(np.argmin(s))
        raise CalibrationError(f"degenerate activation scale {s[bad]:.3g} on input feature {bad}")
    return s


def whitened_factors(w: np.ndarray, s: np.ndarray, r: int):
    """Rank-r SVD of ``diag(s) @ w``; returns (U_f, Vt) with U_f = U * sigma."""
    if np.any(s < MIN_SCALE):
        raise CalibrationError("degenerate whitening scale")
    res = truncated_svd(s[:, None] * w, r)
    return res.A, res.B


def calibration_inputs(model: DenseModel, calib_seed: int, calib_tokens: int) -> Dict[str, np.ndarray]:
    """Projection inputs for a seeded token stream, keyed ``"{layer}.{proj}"``.

    Every calibration token is run as its own position-0 sequence.
    """
    tokens = Rng64(calib_seed).token_array(calib_tokens, model.config.vocab)
    seen: Dict[str, np.ndarray] = {}

    def record(i, name, x):
        seen[f"{i}.{name}"] = x

    reference_forward_nocache(model, tokens, isolated=True, record=record)
    return seen


def compress_whitened(
    model: DenseModel, rho: float, calib_seed: int = 0, calib_tokens: int = 256, eps: float = SCALE_EPS
) -> Checkpoint:
    CompressionSpec("whitened", rho, calib_seed=calib_seed, calib_tokens=calib_tokens).validate()
    acts = calibration_inputs(model, calib_seed, calib_tokens)
    tensors = _common_tensors(model)
    for i, layer in enumerate(model.layers):
        for name in PROJECTIONS:
            w = layer.proj(name)
            s = activation_scales(acts[f"{i}.{name}"], eps)
            u_f, vt = whitened_factors(w, s, factor_rank(rho, *w.shape))
            tensors[f"layers.{i}.{name}.U"] = u_f
            tensors[f"layers.{i}.{name}.Vt"] = vt
            tensors[f"layers.{i}.{name}.s"] = s
    meta = _meta("whitened", rho, calib_seed=calib_seed, calib_tokens=calib_tokens)
    return Checkpoint("B", model.config, tensors, meta)


def shared_basis_factors(weights: List[np.ndarray], r: int):
    """Shared A and per-member B slabs from the SVD of ``[W_1 | ... | W_g]``."""
    stacked = np.concatenate(weights, axis=1)
    res = truncated_svd(stacked, r)
    d_out = weights[0].shape[1]
    slabs = [np.ascontiguousarray(res.B[:, j * d_out : (j + 1) * d_out]) for j in range(len(weights))]
    return res.A, slabs


def compress_basis_shared(model: DenseModel, rho: float, group_size: int) -> Checkpoint:
    cfg = model.config
    CompressionSpec("basis_shared", rho, group_size=group_size).validate(cfg)
    tensors = _common_tensors(model)
    refs = {}
    for name in PROJECTIONS:
        for g in range(cfg.n_layers // group_size):
            members = list(range(g * group_size, (g + 1) * group_size))
            ws = [model.layers[i].proj(name) for i in members]
            a, slabs = shared_basis_factors(ws, factor_rank(rho, *ws[0].shape))
            tensors[f"bases.{name}.{g}"] = a
            for i, b in zip(members, slabs):
                tensors[f"layers.{i}.{name}.B"] = b
                refs[f"{i}.{name}"] = g
    extra = _meta("basis_shared", rho, group_size=group_size)
    extra["groups"] = {"group_size": group_size, "refs": refs}
    return Checkpoint("C", cfg, tensors, extra)


def compress(model: DenseModel, spec: CompressionSpec) -> Checkpoint:
    spec.validate(model.config)
    if spec.method == "plain":
        return compress_plain(model, spec.retained_ratio)
    if spec.method == "whitened":
        return compress_whitened(model, spec.retained_ratio, spec.calib_seed, spec.calib_tokens)
    return compress_basis_shared(model, spec.retained_ratio, spec.group_size)


def checkpoint_factor_params(ckpt: Checkpoint) -> int:
    """Stored factor parameters (whitening scales excluded)."""
    total = 0
    for name, arr in ckpt.tensors.items():
        if name.startswith("bases.") or name.endswith((".A", ".B", ".U", ".Vt")):
            total += arr.size
    return total
