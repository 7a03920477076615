"""Experiment configuration: flat ``key = value`` text files with a stable hash."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

CODECS = ("patch", "conv-ae", "pretrained-conv-ae")
DATASETS = ("minishapes", "miniscene")

# Runtime-only keys: they never change the numbers a run produces.
_UNHASHED = {"checkpoint_every", "log_every"}


@dataclass
class ExperimentConfig:
    dataset: str = "minishapes"
    image_size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    codec: str = "patch"
    patch: int = 8
    num_concepts: int = 20
    dim: int = 256
    enc_depth: int = 4
    dec_depth: int = 4
    heads: int = 4
    batch_size: int = 32
    steps: int = 50000
    lr: float = 3e-4
    warmup_steps: int = 0
    min_lr_ratio: float = 0.0
    lambda_dis: float = 1.0
    rec_weight: float = 1.0
    grad_clip: float = 0.0
    init_std: float = 0.02
    prototype_std: float = 0.02
    seed: int = 0
    pretrain_steps: int = 3000
    freeze_codec: bool = True
    # ablation switches
    no_dis_loss: bool = False
    concept_self_attention: bool = False
    no_detach: bool = False
    cnn_detokenizer: bool = False
    transformer_detokenizer: bool = False
    concept_pos_embedding: bool = False
    # gradient scoping of the disentangling loss
    dis_updates_prototypes: bool = True
    dis_updates_image_tokenizer: bool = False
    checkpoint_every: int = 1000
    log_every: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.dataset not in DATASETS:
            raise ValueError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.codec not in CODECS:
            raise ValueError(f"codec must be one of {CODECS}, got {self.codec!r}")
        if self.cnn_detokenizer and self.transformer_detokenizer:
            raise ValueError("cnn_detokenizer and transformer_detokenizer are mutually exclusive")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.codec == "patch" and self.image_size % self.patch:
            raise ValueError(f"image_size {self.image_size} not divisible by patch {self.patch}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 for the disentangling loss")
        for name in ("num_concepts", "dim", "enc_depth", "dec_depth", "heads", "image_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    @property
    def detokenizer_kind(self) -> str:
        if self.cnn_detokenizer:
            return "cnn"
        if self.transformer_detokenizer:
            return "transformer"
        return "concept"

    @property
    def effective_lambda_dis(self) -> float:
        return 0.0 if self.no_dis_loss else self.lambda_dis

    def to_text(self, include_runtime: bool = True) -> str:
        lines = []
        for f in fields(self):
            if not include_runtime and f.name in _UNHASHED:
                continue
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.to_text(include_runtime=False).encode()).hexdigest()[:12]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(parse_kv(text))

    @classmethod
    def from_dict(cls, raw: dict[str, str]) -> "ExperimentConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for key, raw_value in raw.items():
            key = key.strip().replace("-", "_")
            if key not in kinds:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _coerce(kinds[key], raw_value, key)
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def _coerce(kind, value, key):
    value = str(value).strip()
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return value
    except ValueError:
        raise ValueError(f"bad value for {key}: {value!r} (expected {kind})") from None


def ci_config(**overrides) -> ExperimentConfig:
    """Desk-scale 32x32 preset used by the acceptance runs."""
    base = dict(image_size=32, patch=8, dim=64, enc_depth=2, dec_depth=2, heads=4,
                num_concepts=10, batch_size=32, steps=6000, lr=1e-3, warmup_steps=300, grad_clip=1.0,
                # sum-of-squares scale for the reconstruction term at 32x32x3
                rec_weight=1000.0,
                # spread-out prototypes and weights keep slots from starting as copies of one another
                init_std=0.1, prototype_std=1.0)
    base.update(overrides)
    return ExperimentConfig(**base)
