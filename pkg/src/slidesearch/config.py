"""Flat key=value configuration files and deterministic seed derivation."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .train import TrainConfig

_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} | {"preset"}


def parse_kv_file(path) -> dict:
    """Read ``key=value`` lines; '#' starts a comment, blank lines ignored."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def derive_seed(master: int, label: str) -> int:
    """Stable per-stage seed: hash of the master seed and a stage label."""
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class PipelineConfig:
    """Everything the end-to-end pipeline needs, one flat namespace.

    Path fields may stay empty for stages that are not being run; the
    pipeline validates the ones it needs before any work starts.
    """

    features_dir: str = ""
    graphs_dir: str = ""
    checkpoint: str = ""
    index: str = ""
    reports_dir: str = ""
    n_bar: int = 50
    seed: int = 0
    eval_depth: int = 0  # 0 = full database
    ap_k: int = 50
    linkage: str = "union-ees"
    # synthetic generation
    gen_db_wsis: int = 20
    gen_query_wsis: int = 5
    gen_rows: int = 12
    gen_cols: int = 12
    gen_feature_dim: int = 24
    gen_blobs: int = 1
    gen_delta: float = 6.0
    gen_sigma: float = 1.0
    gen_blob_min: int = 6
    gen_blob_max: int = 6
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_mapping(cls, kv: dict) -> "PipelineConfig":
        kv = dict(kv)
        train_kv = {k: kv.pop(k) for k in list(kv) if k in _TRAIN_KEYS}
        cfg = cls(train=TrainConfig.from_mapping(train_kv))
        own = {f.name: f for f in fields(cls) if f.name != "train"}
        for key, value in kv.items():
            if key not in own:
                raise ConfigError(f"pipeline config: unknown key {key!r}")
            current = getattr(cfg, key)
            try:
                if isinstance(current, int):
                    setattr(cfg, key, int(value))
                elif isinstance(current, float):
                    setattr(cfg, key, float(value))
                else:
                    setattr(cfg, key, value)
            except ValueError:
                raise ConfigError(f"pipeline config: bad value for {key}: {value!r}") from None
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        return cls.from_mapping(parse_kv_file(path))

    def validate(self) -> None:
        if self.n_bar < 1:
            raise ConfigError(f"pipeline config: n_bar must be >= 1, got {self.n_bar}")
        if self.ap_k < 1:
            raise ConfigError(f"pipeline config: ap_k must be >= 1, got {self.ap_k}")
        if self.eval_depth < 0:
            raise ConfigError(f"pipeline config: eval_depth must be >= 0, got {self.eval_depth}")
        if self.linkage not in ("union-ees", "ward"):
            raise ConfigError(f"pipeline config: unknown linkage {self.linkage!r}")
        self.train.validate()

    def require_paths(self, *names: str) -> None:
        """Fail before any work if a needed path field is unset."""
        for name in names:
            if not getattr(self, name):
                raise ConfigError(f"pipeline config: {name} is required but not set")
