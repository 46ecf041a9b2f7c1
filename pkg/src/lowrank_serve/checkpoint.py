"""FSVD15 container format, checkpoint families, and normalisation.

Container layout (all integers little-endian)::

    bytes 0..5    magic  b"FSVD15"
    bytes 6..7    u16    format version (1)
    bytes 8..11   u32    header length in bytes
    header        UTF-8 JSON, keys sorted, no whitespace
    zero padding  up to the next 64-byte boundary (payload start)
    payload       raw little-endian f32 tensor blobs; every offset is
                  relative to payload start and a multiple of 64

Header keys: ``family`` (A, B or C), ``config`` (ModelConfig fields),
``tensors`` (list of {name, dtype, shape, offset, nbytes, crc32}).
Any other keys are carried through read/write untouched; family C keeps its
group table under ``groups``.

Tensor naming::

    embed, head, final_norm, layers.{i}.attn_norm, layers.{i}.ffn_norm
    family A   layers.{i}.{proj}.A, layers.{i}.{proj}.B
    family B   layers.{i}.{proj}.U, .Vt, .s      (A = diag(1/s) @ U)
    family C   bases.{proj}.{g}, layers.{i}.{proj}.B, groups.refs["{i}.{proj}"] = g
"""

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import ModelConfig
from .errors import CheckpointFormatError, ConfigurationError, NormalizationError, ShapeError

MAGIC = b"FSVD15"
VERSION = 1
ALIGN = 64
PROJECTIONS = ("q", "k", "v", "o", "up", "gate", "down")
FAMILIES = ("A", "B", "C")
_RESERVED = {"family", "config", "tensors"}
_PREFIX = struct.Struct("<6sHI")


@dataclass
class Checkpoint:
    """In-memory checkpoint: a family tag, a config, and named tensors.

    ``tensors`` keeps insertion order, which is also the payload order.
    ``header_extra`` holds every non-reserved header key.
    """

    family: str
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    header_extra: dict = field(default_factory=dict)


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def write_checkpoint(ckpt: Checkpoint) -> bytes:
    if ckpt.family not in FAMILIES:
        raise CheckpointFormatError(f"unknown family {ckpt.family!r}", field="family")
    try:
        ckpt.config.validate()
    except ConfigurationError as exc:
        raise CheckpointFormatError(str(exc), field="config") from exc

    entries = []
    blobs = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        if not np.all(np.isfinite(a)):
            raise CheckpointFormatError("non-finite values", field=f"tensor {name}")
        blob = a.tobytes()
        offset = _align(offset)
        entries.append(
            {
                "name": name,
                "dtype": "f32",
                "shape": list(a.shape),
                "offset": offset,
                "nbytes": len(blob),
                "crc32": zlib.crc32(blob),
            }
        )
        blobs.append((offset, blob))
        offset += len(blob)

    header = {k: v for k, v in ckpt.header_extra.items() if k not in _RESERVED}
    header.update(family=ckpt.family, config=ckpt.config.to_dict(), tensors=entries)
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")

    prefix = _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes
    start = _align(len(prefix))
    out = bytearray(start + offset)
    out[: len(prefix)] = prefix
    for off, blob in blobs:
        out[start + off : start + off + len(blob)] = blob
    return bytes(out)


def read_checkpoint(data: bytes, verify: bool = True) -> Checkpoint:
    """Parse a container. ``verify=False`` skips the CRC check (diagnostics only)."""
    if len(data) < _PREFIX.size:
        raise CheckpointFormatError("file shorter than fixed prefix", field="magic")
    magic, version, hlen = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}", field="magic")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", field="version")
    hend = _PREFIX.size + hlen
    if hend > len(data):
        raise CheckpointFormatError("header extends past end of file", field="header_len")
    try:
        header = json.loads(data[_PREFIX.size : hend].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"header is not valid JSON: {exc}", field="header") from exc
    for key in _RESERVED:
        if key not in header:
            raise CheckpointFormatError("missing header key", field=key)
    family = header["family"]
    if family not in FAMILIES:
        raise CheckpointFormatError(f"unknown family {family!r}", field="family")
    try:
        config = ModelConfig.from_dict(header["config"]).validate()
    except (TypeError, ConfigurationError) as exc:
        raise CheckpointFormatError(str(exc), field="config") from exc

    start = _align(hend)
    payload = memoryview(data)[start:]
    tensors: Dict[str, np.ndarray] = {}
    prev_end = 0
    for entry in header["tensors"]:
        name = entry.get("name", "?")
        where = f"tensor {name}"
        if entry.get("dtype") != "f32":
            raise CheckpointFormatError(f"unsupported dtype {entry.get('dtype')!r}", field=where)
        shape = tuple(int(s) for s in entry["shape"])
        off, nbytes = int(entry["offset"]), int(entry["nbytes"])
        if nbytes != int(np.prod(shape, dtype=np.int64)) * 4:
            raise CheckpointFormatError("nbytes does not match shape", field=where)
        if off % ALIGN:
            raise CheckpointFormatError(f"offset {off} not {ALIGN}-byte aligned", field=where)
        if off < prev_end:
            raise CheckpointFormatError(f"offset {off} overlaps previous tensor", field=where)
        if off + nbytes > len(payload):
            raise CheckpointFormatError("payload truncated", field=where)
        if name in tensors:
            raise CheckpointFormatError("duplicate tensor name", field=where)
        blob = payload[off : off + nbytes]
        if verify and zlib.crc32(blob) != entry.get("crc32"):
            raise CheckpointFormatError("checksum mismatch", field=where)
        tensors[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32)
        prev_end = off + nbytes

    extra = {k: v for k, v in header.items() if k not in _RESERVED}
    return Checkpoint(family=family, config=config, tensors=tensors, header_extra=extra)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(write_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return read_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# canonical representation


@dataclass
class FactorizedLinear:
    """``W ~= A @ B`` with ``A`` (d_in x r) and ``B`` (r x d_out)."""

    A: np.ndarray
    B: np.ndarray
    shared_group: Optional[int] = None

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise ShapeError(f"factor shapes do not compose: {self.A.shape} @ {self.B.shape}")
        if self.rank > min(self.d_in, self.d_out):
            raise ShapeError(f"rank {self.rank} exceeds min({self.d_in}, {self.d_out})")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def d_in(self) -> int:
        return self.A.shape[0]

    @property
    def d_out(self) -> int:
        return self.B.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (x @ self.A) @ self.B

    def dense(self) -> np.ndarray:
        return self.A @ self.B


@dataclass
class PackedFFN:
    A_ug: np.ndarray  # [A_up | A_gate]
    r_up: int


@dataclass
class CanonicalLayer:
    attn_norm: np.ndarray
    ffn_norm: np.ndarray
    q: FactorizedLinear
    k: FactorizedLinear
    v: FactorizedLinear
    o: FactorizedLinear
    up: FactorizedLinear
    gate: FactorizedLinear
    down: FactorizedLinear
    packed: PackedFFN

    def proj(self, name: str) -> FactorizedLinear:
        return getattr(self, name)


@dataclass
class CanonicalModel:
    config: ModelConfig
    layers: List[CanonicalLayer]
    embed: np.ndarray
    head: np.ndarray
    final_norm: np.ndarray
    # "{proj}.{group}" -> the single storage every member layer references
    shared_bases: Dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def dtype(self):
        return self.embed.dtype

    def factor_param_count(self) -> int:
        """Distinct stored factor parameters; shared storage counts once."""
        seen = set()
        total = 0
        for layer in self.layers:
            for name in PROJECTIONS:
                p = layer.proj(name)
                for arr in (p.A, p.B):
                    key = (arr.__array_interface__["data"][0], arr.shape, arr.strides)
                    if key not in seen:
                        seen.add(key)
                        total += arr.size
        return total

    def astype(self, dtype) -> "CanonicalModel":
        """Copy into ``dtype``; physically shared storage stays shared."""
        dtype = np.dtype(dtype)
        if dtype == self.dtype:
            return self
        memo: Dict[int, np.ndarray] = {}

        def conv(a):
            if id(a) not in memo:
                memo[id(a)] = np.ascontiguousarray(a, dtype=dtype)
            return memo[id(a)]

        view_memo: Dict[int, Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
        layers = []
        for layer in self.layers:
            key = id(layer.packed.A_ug)
            if key not in view_memo:
                aug = conv(layer.packed.A_ug)
                r = layer.packed.r_up
                view_memo[key] = (aug, aug[:, :r], aug[:, r:])
            aug, a_up, a_gate = view_memo[key]
            projs = {}
            for name in PROJECTIONS:
                p = layer.proj(name)
                a = a_up if name == "up" else a_gate if name == "gate" else conv(p.A)
                projs[name] = FactorizedLinear(a, conv(p.B), p.shared_group)
            layers.append(
                CanonicalLayer(
                    attn_norm=conv(layer.attn_norm),
                    ffn_norm=conv(layer.ffn_norm),
                    packed=PackedFFN(aug, layer.packed.r_up),
                    **projs,
                )
            )
        model = CanonicalModel(
            config=self.config,
            layers=layers,
            embed=conv(self.embed),
            head=conv(self.head),
            final_norm=conv(self.final_norm),
        )
        model.shared_bases = _collect_shared(model)
        return model


def _collect_shared(model: CanonicalModel) -> Dict[str, np.ndarray]:
    table = {}
    for layer in model.layers:
        for name in PROJECTIONS:
            p = layer.proj(name)
            if p.shared_group is not None:
                table.setdefault(f"{name}.{p.shared_group}", p.A)
    return table


def pack_ffn(a_up: np.ndarray, a_gate: np.ndarray) -> Tuple[np.ndarray, int]:
    """Concatenate the up and gate input factors column-wise (pure copy)."""
    if a_up.ndim != 2 or a_gate.ndim != 2 or a_up.shape[0] != a_gate.shape[0]:
        raise ShapeError(f"cannot pack factors with shapes {a_up.shape} and {a_gate.shape}")
    return np.concatenate([a_up, a_gate], axis=1), a_up.shape[1]


def _get(ckpt: Checkpoint, name: str) -> np.ndarray:
    try:
        return np.asarray(ckpt.tensors[name], dtype=np.float64)
    except KeyError:
        raise NormalizationError("missing tensor", record=name) from None


def _expect(arr: np.ndarray, shape, record: str) -> np.ndarray:
    if arr.shape != tuple(shape):
        raise NormalizationError(f"shape {arr.shape}, expected {tuple(shape)}", record=record)
    return arr


def _proj_dims(cfg: ModelConfig, name: str) -> Tuple[int, int]:
    if name in ("up", "gate"):
        return cfg.d_model, cfg.d_ff
    if name == "down":
        return cfg.d_ff, cfg.d_model
    return cfg.d_model, cfg.d_model


def normalize(ckpt: Checkpoint) -> CanonicalModel:
    """Map any checkpoint family onto the canonical float64 model.

    Family B factors are folded (``A = U / s[:, None]``); family C bases are
    materialised once and aliased into every member layer. Afterwards the up
    and gate input factors of each layer (or shared group) are packed into one
    tensor and the per-branch factors become column views of it, so the packed
    and unpacked paths always read the same storage.
    """
    cfg = ckpt.config.validate()
    fam = ckpt.family
    if fam not in FAMILIES:
        raise NormalizationError(f"unknown family {fam!r}", record="family")

    d = cfg.d_model
    embed = _expect(_get(ckpt, "embed"), (cfg.vocab, d), "embed")
    head = _expect(_get(ckpt, "head"), (d, cfg.vocab), "head")
    final_norm = _expect(_get(ckpt, "final_norm"), (d,), "final_norm")

    refs = {}
    bases: Dict[str, np.ndarray] = {}
    if fam == "C":
        groups = ckpt.header_extra.get("groups")
        if not isinstance(groups, dict) or "refs" not in groups:
            raise NormalizationError("family C checkpoint lacks a group table", record="groups")
        refs = groups["refs"]

    def load_proj(i: int, name: str) -> FactorizedLinear:
        stem = f"layers.{i}.{name}"
        d_in, d_out = _proj_dims(cfg, name)
        ref = refs.get(f"{i}.{name}")
        if fam == "C" and ref is not None:
            key = f"{name}.{int(ref)}"
            if key not in bases:
                bname = f"bases.{key}"
                if bname not in ckpt.tensors:
                    raise NormalizationError(f"unknown group reference {ref}", record=stem)
                bases[key] = _get(ckpt, bname)
            a = bases[key]
            b = _get(ckpt, f"{stem}.B")
            group = int(ref)
        elif fam == "B":
            u, vt, s = _get(ckpt, f"{stem}.U"), _get(ckpt, f"{stem}.Vt"), _get(ckpt, f"{stem}.s")
            _expect(s, (d_in,), f"{stem}.s")
            if np.any(s <= 0):
                raise NormalizationError("non-positive whitening scale", record=f"{stem}.s")
            a, b, group = u / s[:, None], vt, None
        else:
            a, b, group = _get(ckpt, f"{stem}.A"), _get(ckpt, f"{stem}.B"), None
        if a.ndim != 2 or b.ndim != 2 or a.shape[0] != d_in or b.shape[1] != d_out or a.shape[1] != b.shape[0]:
            raise NormalizationError(
                f"factor shapes {a.shape} @ {b.shape} do not give {d_in}x{d_out}", record=stem
            )
        return FactorizedLinear(a, b, group)

    pack_memo: Dict[Tuple[int, int], Tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    layers = []
    for i in range(cfg.n_layers):
        projs = {name: load_proj(i, name) for name in PROJECTIONS}
        up, gate = projs["up"], projs["gate"]
        if up.shared_group is not None and gate.shared_group is not None:
            # bases are held alive by ``bases``, so their ids are stable keys
            key = (id(up.A), id(gate.A))
            if key not in pack_memo:
                aug, r_up = pack_ffn(up.A, gate.A)
                pack_memo[key] = (aug, aug[:, :r_up], aug[:, r_up:])
            aug, a_up, a_gate = pack_memo[key]
        else:
            aug, r_up = pack_ffn(up.A, gate.A)
            a_up, a_gate = aug[:, :r_up], aug[:, r_up:]
        projs["up"] = FactorizedLinear(a_up, up.B, up.shared_group)
        projs["gate"] = FactorizedLinear(a_gate, gate.B, gate.shared_group)
        layers.append(
            CanonicalLayer(
                attn_norm=_expect(_get(ckpt, f"layers.{i}.attn_norm"), (d,), f"layers.{i}.attn_norm"),
                ffn_norm=_expect(_get(ckpt, f"layers.{i}.ffn_norm"), (d,), f"layers.{i}.ffn_norm"),
                packed=PackedFFN(aug, up.rank),
                **projs,
            )
        )

    model = CanonicalModel(config=cfg, layers=layers, embed=embed, head=head, final_norm=final_norm)
    model.shared_bases = _collect_shared(model)
    return model


def export_checkpoint(model: CanonicalModel) -> Checkpoint:
    """Serialise a canonical model as family A, or C when it has shared bases."""
    tensors: Dict[str, np.ndarray] = {"embed": model.embed, "head": model.head, "final_norm": model.final_norm}
    refs = {}
    written = set()
    for i, layer in enumerate(model.layers):
        tensors[f"layers.{i}.attn_norm"] = layer.attn_norm
        tensors[f"layers.{i}.ffn_norm"] = layer.ffn_norm
        for name in PROJECTIONS:
            p = layer.proj(name)
            if p.shared_group is not None:
                key = f"{name}.{p.shared_group}"
                if key not in written:
                    tensors[f"bases.{key}"] = p.A
                    written.add(key)
                refs[f"{i}.{name}"] = p.shared_group
            else:
                tensors[f"layers.{i}.{name}.A"] = p.A
            tensors[f"layers.{i}.{name}.B"] = p.B
    if refs:
        return Checkpoint("C", model.config, tensors, {"groups": {"refs": refs}})
    return Checkpoint("A", model.config, tensors)
