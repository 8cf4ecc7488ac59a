"""Run configuration: a flat key=value file with documented keys.

The canonical serialization (sorted keys, one per line) is hashed and the
hash is embedded in every artifact this run produces; commands refuse to
mix artifacts carrying different hashes.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from .errors import ConfigurationError

HASH_LEN = 16


@dataclass
class RunConfig:
    # dataset
    per_combo: int = 200
    dataset_seed: int = 7
    noise_level: float = 0.05
    train_ratio: float = 0.8
    val_ratio: float = 0.1
    test_ratio: float = 0.1
    gain_fg: float = 1.0
    gain_bg: float = 1.0
    # reference-encoder pretraining
    embed_dim: int = 64
    pretrain_epochs: int = 30
    pretrain_pairs_per_class: int = 40
    pretrain_seed: int = 100
    # separator training
    batch_size: int = 16
    epochs: int = 30
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    alignment_mode: str = "A2A"
    alignment_weight: float = 1.0
    cross_half_negatives: bool = False
    # generation
    lam: float = 0.5
    tau: float = 0.35
    noise_seed: int = 0
    # evaluation
    seeds: str = "0,1,2"

    def __post_init__(self):
        if self.per_combo < 3:
            raise ConfigurationError("per_combo must be >= 3 for stratified splits")

    def seed_list(self) -> list[int]:
        try:
            return [int(s) for s in self.seeds.split(",") if s.strip() != ""]
        except ValueError:
            raise ConfigurationError(f"bad seeds list {self.seeds!r}") from None

    def ratios(self) -> tuple[float, float, float]:
        return (self.train_ratio, self.val_ratio, self.test_ratio)

    def canonical_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:HASH_LEN]


def _coerce(name: str, raw: str, kind):
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError:
        raise ConfigurationError(f"config key {name}: cannot parse {raw!r} as {kind.__name__}") from None


def load_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then file values, then explicit overrides."""
    known = {f.name: f.type for f in fields(RunConfig)}
    kinds = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    values: dict = {}
    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
                key, raw = (part.strip() for part in line.split("=", 1))
                if key not in known:
                    raise ConfigurationError(f"{path}:{lineno}: unknown key {key!r}")
                values[key] = _coerce(key, raw, kinds[key])
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in known:
            raise ConfigurationError(f"override: unknown key {key!r}")
        values[key] = value
    return RunConfig(**values)
