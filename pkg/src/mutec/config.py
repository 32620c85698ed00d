"""Run configuration. Defaults follow the published hyperparameter table."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

TASKS = ("cse", "cee", "e2e")


@dataclass
class RunConfig:
    task: str = "cse"
    fold_id: int = 1
    balanced: bool = False
    fold_seed: int = 0
    with_context: bool = True

    encoder: str = "toy"  # "toy" or "external:<hf-name>"
    toy_dim: int = 768
    toy_layers: int = 12
    toy_heads: int = 12
    toy_vocab: int = 8192

    epochs: int = 12
    batch_size: int = 16
    max_seq_len: int | None = None  # None -> 512 with context, 200 without
    lr: float = 4e-5
    weight_decay: float = 0.001
    warmup_steps: int = 4
    max_answer_length: int = 200
    n_hidden_states: int | None = None  # None -> 12 (cse, e2e) or 4 (cee)
    msd_p: float = 0.5
    msd_k: int = 5
    msd_aggregate: str = "logits"
    dropout: float = 0.1
    beam_width: int = 3
    bilstm_hidden: int = 384
    beta: float = 1.0
    emotion_prediction_enabled: bool = True
    seed: int = 42

    drop_articles: bool = False
    overall_mode: str = "per_record"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.msd_aggregate not in ("logits", "loss"):
            raise ValueError(f"msd_aggregate must be logits or loss, got {self.msd_aggregate!r}")
        if self.overall_mode not in ("per_record", "class_mean"):
            raise ValueError(f"overall_mode must be per_record or class_mean, got {self.overall_mode!r}")

    @property
    def seq_len(self) -> int:
        if self.max_seq_len is not None:
            return self.max_seq_len
        return 512 if self.with_context else 200

    @property
    def hidden_states(self) -> int:
        if self.n_hidden_states is not None:
            return self.n_hidden_states
        return 4 if self.task == "cee" else 12

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def updated(self, **overrides) -> "RunConfig":
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})


def read_config_file(path: str | Path) -> dict:
    """Load a JSON or YAML mapping of RunConfig overrides."""
    text = Path(path).read_text(encoding="utf-8")
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text) if text.strip() else {}
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must contain a mapping")
    return data
