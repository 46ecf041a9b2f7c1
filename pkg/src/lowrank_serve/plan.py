"""Execution plans: capture a layer's fixed-shape decode body once, replay it.

A dispatch is one host-visible invocation boundary: every eager op, every
plan replay, and every boundary copy between split plans counts as one.
"""

from dataclasses import dataclass, field
from functools import partial
from typing import Callable, List, Optional, Tuple

import numpy as np

from .errors import CaptureError, ConfigurationError, ReplayError, ShapeError
from .kernels import k_copy

PLAN_MODES = ("eager", "split", "per_layer")
FFN_BACKENDS = ("auto", "no_merge", "packed")


@dataclass
class Counters:
    dispatch: int = 0
    alloc: int = 0
    copy_bytes: int = 0
    recon_flops: int = 0
    trace: Optional[list] = None

    def reset(self) -> None:
        self.dispatch = self.alloc = self.copy_bytes = self.recon_flops = 0
        if self.trace is not None:
            self.trace.clear()

    def add(self, other: "Counters") -> None:
        self.dispatch += other.dispatch
        self.alloc += other.alloc
        self.copy_bytes += other.copy_bytes
        self.recon_flops += other.recon_flops


def route_ffn_auto(plan_mode: str, override: Optional[str] = None) -> str:
    """FFN backend for a plan mode; an explicit override always wins."""
    if plan_mode not in PLAN_MODES:
        raise ConfigurationError(f"unknown plan mode {plan_mode!r}")
    if override not in (None, "auto"):
        if override not in FFN_BACKENDS:
            raise ConfigurationError(f"unknown FFN backend {override!r}")
        return override
    return "packed" if plan_mode == "per_layer" else "no_merge"


class EagerExecutor:
    """Runs each op immediately with a freshly allocated output buffer.

    With ``reuse=True`` buffers are recycled by op position within a step,
    which is how the few ops outside the captured layers stay allocation-free.
    """

    def __init__(self, dtype, counters: Optional[Counters] = None, reuse: bool = False):
        self.dtype = np.dtype(dtype)
        self.counters = counters if counters is not None else Counters()
        self.reuse = reuse
        self._pool: List[np.ndarray] = []
        self._slot = 0

    def begin_step(self) -> None:
        self._slot = 0

    def _alloc(self, shape) -> np.ndarray:
        if self.reuse:
            i = self._slot
            self._slot += 1
            if i < len(self._pool) and self._pool[i].shape == tuple(shape):
                return self._pool[i]
        buf = np.empty(shape, dtype=self.dtype)
        self.counters.alloc += 1
        if self.reuse:
            if i < len(self._pool):
                self._pool[i] = buf
            else:
                self._pool.append(buf)
        return buf

    def _check(self, kind, ins) -> None:
        for a in ins:
            if isinstance(a, np.ndarray) and a.dtype.kind == "f" and a.dtype != self.dtype:
                raise ShapeError(f"{kind}: operand dtype {a.dtype} != runtime dtype {self.dtype}")

    def op(self, kind, fn, ins, out=None, scratch=(), tag=None, flops=0, **params):
        self._check(kind, ins)
        o = self._alloc(out) if isinstance(out, tuple) else out
        bufs = [self._alloc(s) for s in scratch]
        res = fn(o, *ins, *bufs, **params)
        c = self.counters
        c.dispatch += 1
        if tag == "recon":
            c.recon_flops += flops
        if c.trace is not None:
            c.trace.append((kind, tag))
        return o if res is None else res


@dataclass
class OpNode:
    kind: str
    inputs: Tuple[int, ...]
    output: Optional[int]
    params: dict = field(default_factory=dict)
    tag: Optional[str] = None

    def signature(self):
        return (self.kind, self.inputs, self.output, tuple(sorted(self.params.items())), self.tag)


@dataclass
class LayerPlan:
    layer: int
    mode: str  # split_attn | split_mlp | full_layer
    nodes: List[OpNode]
    buffers: List[np.ndarray]
    calls: List[Callable[[], None]]
    static_recon_flops: int
    input_buffer: np.ndarray

    def replay(self, counters: Counters, x: Optional[np.ndarray] = None) -> None:
        """Run every captured node in order: one dispatch, no allocation."""
        if x is not None:
            if x.shape != self.input_buffer.shape or x.dtype != self.input_buffer.dtype:
                raise ReplayError(
                    f"input {x.shape}/{x.dtype} differs from capture "
                    f"{self.input_buffer.shape}/{self.input_buffer.dtype}"
                )
            if x is not self.input_buffer:
                np.copyto(self.input_buffer, x)
        for call in self.calls:
            call()
        counters.dispatch += 1
        counters.recon_flops += self.static_recon_flops
        if counters.trace is not None:
            counters.trace.append(("plan", self.mode))

    def structure(self):
        return [n.signature() for n in self.nodes], [(b.shape, b.dtype.str) for b in self.buffers]


class PlanRecorder:
    """Executes ops once while recording them into a ``LayerPlan``."""

    def __init__(self, dtype, counters: Counters, layer: int, mode: str, input_buffer: np.ndarray):
        self.dtype = np.dtype(dtype)
        self.counters = counters
        self.layer = layer
        self.mode = mode
        self.input_buffer = input_buffer
        self.nodes: List[OpNode] = []
        self.calls: List[Callable[[], None]] = []
        self.buffers: List[np.ndarray] = []
        self.static_recon_flops = 0
        self._ids = {}
        self._keep = []  # keeps registered arrays alive so ids stay unique

    def _bid(self, arr) -> int:
        key = id(arr)
        if key not in self._ids:
            self._ids[key] = len(self._ids)
            self._keep.append(arr)
        return self._ids[key]

    def _alloc(self, shape) -> np.ndarray:
        if not all(isinstance(s, (int, np.integer)) and s > 0 for s in shape):
            raise CaptureError(f"dynamic or empty shape {shape} in layer {self.layer}")
        buf = np.empty(shape, dtype=self.dtype)
        self.buffers.append(buf)
        self.counters.alloc += 1
        return buf

    def op(self, kind, fn, ins, out=None, scratch=(), tag=None, flops=0, dynamic=False, **params):
        if dynamic:
            raise CaptureError(f"{kind} has a data-dependent shape; it cannot be captured")
        for a in ins:
            if not isinstance(a, np.ndarray):
                raise CaptureError(f"{kind}: non-array operand {type(a).__name__}")
            if a.dtype.kind == "f" and a.dtype != self.dtype:
                raise CaptureError(f"{kind}: operand dtype {a.dtype} != plan dtype {self.dtype}")
        o = self._alloc(out) if isinstance(out, tuple) else out
        bufs = [self._alloc(s) for s in scratch]
        bind = getattr(fn, "bind", None)
        if bind is not None:
            call = bind(o, *ins, *bufs, **params)
            call()
            res = None
        else:
            call = partial(fn, o, *ins, *bufs, **params)
            res = fn(o, *ins, *bufs, **params)
        self.counters.dispatch += 1
        if tag == "recon":
            self.counters.recon_flops += flops
            self.static_recon_flops += flops
        static = {k: v for k, v in params.items() if isinstance(v, (int, float, str))}
        static["out_shape"] = None if o is None else tuple(o.shape)
        node = OpNode(
            kind=kind,
            inputs=tuple(self._bid(a) for a in list(ins) + bufs),
            output=None if o is None else self._bid(o),
            params=static,
            tag=tag,
        )
        self.nodes.append(node)
        if res is None:
            self.calls.append(call)
            return o
        # view-producing ops (split): the views over persistent storage are
        # bound now, so replay has nothing to execute
        for view in res:
            self._bid(view)
        return res

    def finish(self) -> LayerPlan:
        return LayerPlan(
            layer=self.layer,
            mode=self.mode,
            nodes=self.nodes,
            buffers=self.buffers,
            calls=self.calls,
            static_recon_flops=self.static_recon_flops,
            input_buffer=self.input_buffer,
        )


@dataclass
class CapturedLayer:
    """One layer's plans: a single full-layer plan, or attention + MLP plans
    joined by an explicit boundary copy."""

    mode: str  # full_layer | split
    plans: List[LayerPlan]
    boundary: List[OpNode]
    _copies: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)

    def run(self, counters: Counters) -> None:
        self.plans[0].replay(counters)
        for dst, src in self._copies:
            k_copy(dst, src)
            counters.dispatch += 1
            counters.copy_bytes += src.nbytes
            if counters.trace is not None:
                counters.trace.append(("boundary_copy", None))
        for plan in self.plans[1:]:
            plan.replay(counters)

    @property
    def node_count(self) -> int:
        return sum(len(p.nodes) for p in self.plans) + len(self.boundary)


def capture_layer_plan(session, layer: int, mode: str) -> CapturedLayer:
    """Capture layer ``layer`` of ``session`` by running one instrumented pass.

    The pass performs this step's computation for the layer, so capture takes
    the place of one eager execution. ``mode`` is ``full_layer`` or ``split``.
    """
    h = session.h
    if h.shape != (1, session.config.d_model):
        raise CaptureError(f"decode plans need a single-token hidden state, got {h.shape}")
    live = session.live
    if mode == "full_layer":
        rec = PlanRecorder(session.dtype, live, layer, "full_layer", h)
        session._emit_attention(rec, layer)
        session._emit_mlp(rec, layer, h)
        return CapturedLayer("full_layer", [rec.finish()], [])
    if mode != "split":
        raise CaptureError(f"unknown capture mode {mode!r}")

    attn = PlanRecorder(session.dtype, live, layer, "split_attn", h)
    session._emit_attention(attn, layer)
    staging = np.empty_like(h)
    live.alloc += 1
    k_copy(staging, h)
    live.dispatch += 1
    live.copy_bytes += h.nbytes
    boundary = OpNode("copy", inputs=(0,), output=1, params={"nbytes": h.nbytes}, tag="boundary")
    mlp = PlanRecorder(session.dtype, live, layer, "split_mlp", staging)
    session._emit_mlp(mlp, layer, staging)
    return CapturedLayer("split", [attn.finish(), mlp.finish()], [boundary], [(staging, h)])
