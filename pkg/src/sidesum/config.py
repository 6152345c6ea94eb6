"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class Config:
    # data
    vocab_size: int = 5000
    topic_vocab_size: int = 2000
    min_freq: int = 1
    topic_min_freq: int = 2
    max_doc_len: int = 256
    max_side_len: int = 32
    max_summary_len: int = 32
    side_kind: str = "text"  # text | visual | none
    visual_dim: int = 64
    # architecture
    d_model: int = 64
    heads: int = 4
    d_ff: int = 128
    encoder_layers: int = 2
    graph_layers: int = 4
    decoder_layers: int = 2
    topics: int = 8
    utm_hidden: int = 64
    normalize_bow: bool = True  # false: sum the log-likelihood over summary word counts
    scalar_ffn_hidden: int = 8
    max_positions: int = 512
    scaled_logits: bool = False
    normalize_guided_attention: bool = False
    init_range: float = 0.08
    topic_init_range: float = 1.0  # uniform init bound of the topic-word matrix
    # optimisation
    dropout: float = 0.1
    label_smoothing: float = 0.1
    clip: float = 2.0
    lr: float = 1e-3
    warmup: int = 200
    batch_size: int = 16
    steps: int = 1000
    seed: int = 0
    lambda_utm: float = 1.0
    lambda_tri: float = 1.0
    tau: float = 0.1
    negatives: int = 1
    # ablations
    no_utm: bool = False
    no_graph: bool = False
    no_contrastive: bool = False
    mask_side: bool = False
    # validation / checkpoints
    eval_every: int = 200
    keep_checkpoints: int = 5
    val_beam: int = 1
    val_samples: int = 100
    # decoding
    beam: int = 5
    alpha: float = 0.8
    min_len: int = 1
    max_len: int = 32
    # runtime
    threads: int = 1
    dtype: str = "float32"

    def validate(self) -> "Config":
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by heads={self.heads}")
        if self.topics < 2:
            raise ValueError("topics must be >= 2")
        if self.graph_layers < 0 or self.encoder_layers < 0 or self.decoder_layers < 1:
            raise ValueError("invalid layer counts")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        if self.negatives < 1:
            raise ValueError("negatives must be >= 1")
        for name in ("dropout", "lr", "lambda_utm", "lambda_tri", "warmup", "label_smoothing"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.label_smoothing < 1 or not 0 <= self.dropout < 1:
            raise ValueError("label_smoothing and dropout must lie in [0, 1)")
        if self.tau <= 0 or self.clip <= 0:
            raise ValueError("tau and clip must be positive")
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        if self.min_len > self.max_len:
            raise ValueError("min_len must not exceed max_len")
        if self.side_kind not in ("text", "visual", "none"):
            raise ValueError(f"unknown side_kind {self.side_kind!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unknown dtype {self.dtype!r}")
        return self

    def replace(self, **changes) -> "Config":
        return dataclasses.replace(self, **changes).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        return cls(**coerce_keys(cls, data)).validate()

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.to_dict().items())


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_value(raw: str, typ):
    raw = raw.strip()
    if typ is bool or typ == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int or typ == "int":
        return int(raw)
    if typ is float or typ == "float":
        return float(raw)
    return raw


def coerce_keys(cls, data: dict) -> dict:
    """Type-convert ``data`` against the dataclass ``cls``; unknown keys are rejected."""
    types = {f.name: f.type for f in fields(cls)}
    unknown = sorted(set(data) - set(types))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return {k: parse_value(v, types[k]) if isinstance(v, str) else v for k, v in data.items()}


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in out:
            raise ValueError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_kv_file(path, cls=Config, overrides: dict | None = None):
    data = parse_kv(Path(path).read_text(encoding="utf-8"), str(path)) if path else {}
    data.update(overrides or {})
    obj = cls(**coerce_keys(cls, data))
    if hasattr(obj, "validate"):
        obj.validate()
    return obj


def load_config(path=None, overrides: dict | None = None) -> Config:
    return load_kv_file(path, Config, overrides)
