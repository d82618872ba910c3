"""Flat `key = value` run configuration with dotted section prefixes.

Lines are UTF-8, `#` starts a comment, unknown keys are rejected before any
work starts. CLI flags override file values.
"""

from __future__ import annotations

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig

# key -> (type, default)
KNOWN_KEYS = {
    "model.mode": (str, "rank2"),
    "model.channels": (int, 3),
    "model.height": (int, 8),
    "model.width": (int, 8),
    "model.dim": (int, 2),
    "model.depth_k": (int, 8),
    "model.levels": (int, 1),
    "model.hidden_width": (int, 32),
    "model.inv1x1_mode": (str, "plu"),
    "model.bits": (int, 5),
    "train.batch_size": (int, 64),
    "train.steps": (int, 1000),
    "train.lr": (float, 1e-3),
    "train.seed": (int, 0),
    "train.checkpoint_every": (int, 500),
    "data.kind": (str, "eight_gaussians"),
    "data.path": (str, ""),
    "data.n": (int, 4096),
    "sample.count": (int, 64),
    "sample.temperature": (float, 1.0),
}


def parse_kv_lines(text: str) -> dict:
    """Parse `key = value` lines into a raw string map."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = stripped.split("=", 1)
        out[key.strip()] = value.strip()
    return out


class RunConfig:
    def __init__(self, entries: dict | None = None):
        self.values = {k: default for k, (_, default) in KNOWN_KEYS.items()}
        if entries:
            self.update(entries)

    def update(self, entries: dict) -> None:
        for key, raw in entries.items():
            if key not in KNOWN_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            typ, _ = KNOWN_KEYS[key]
            try:
                self.values[key] = typ(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            return cls(parse_kv_lines(f.read()))

    def __getitem__(self, key):
        if key not in KNOWN_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            mode=self["model.mode"],
            channels=self["model.channels"],
            height=self["model.height"],
            width=self["model.width"],
            dim=self["model.dim"],
            depth_k=self["model.depth_k"],
            levels=self["model.levels"],
            hidden_width=self["model.hidden_width"],
            inv1x1_mode=self["model.inv1x1_mode"],
            bits=self["model.bits"],
        )

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(
                batch_size=self["train.batch_size"],
                steps=self["train.steps"],
                lr=self["train.lr"],
                seed=self["train.seed"],
                bits=self["model.bits"],
                checkpoint_every=self["train.checkpoint_every"],
            )
        except ValueError as e:
            raise ConfigError(str(e))


def model_config_from_text(text: str) -> ModelConfig:
    """Rebuild a ModelConfig from its checkpoint echo."""
    entries = parse_kv_lines(text)
    cfg = RunConfig()
    cfg.update(entries)
    return cfg.model_config()
