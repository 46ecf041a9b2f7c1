from dataclasses import asdict, dataclass, fields

from .errors import ConfigurationError

DEFAULT_CAPACITY = 8192


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_head: int
    d_ff: int
    vocab: int
    rope_base: float = 10000.0
    norm_eps: float = 1e-5

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "d_model", "n_heads", "d_head", "d_ff", "vocab"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model != self.n_heads * self.d_head:
            raise ConfigurationError(
                f"d_model={self.d_model} != n_heads*d_head={self.n_heads * self.d_head}"
            )
        if self.d_head % 2:
            raise ConfigurationError(f"d_head must be even for RoPE, got {self.d_head}")
        if self.rope_base <= 0 or self.norm_eps <= 0:
            raise ConfigurationError("rope_base and norm_eps must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def _preset(n_layers, d_model, n_heads, d_ff, vocab):
    return ModelConfig(n_layers, d_model, n_heads, d_model // n_heads, d_ff, vocab)


# desk: correctness runs; bench: timing runs. Both use capacity 8192.
PRESETS = {
    "desk": _preset(4, 256, 8, 1024, 1024),
    "bench": _preset(8, 512, 8, 2048, 4096),
    "tiny": _preset(2, 32, 4, 64, 97),
}


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigurationError(f"unknown config {name!r}; choose from {sorted(PRESETS)}") from None
