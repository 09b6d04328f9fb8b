"""Flat ``key = value`` run configuration with command-line overrides."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from camforge.model import ModelConfig
from camforge.objective import TrainConfig, parse_noise


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # paths
    data_dir: str = "data/bundled"
    out_dir: str = "runs/default"
    checkpoint: str = ""
    masks_dir: str = ""
    # model
    image_size: int = 64
    patch_size: int = 8
    num_blocks: int = 4
    num_heads: int = 4
    embed_dim: int = 64
    cnn_channels: int = 32
    num_classes: int = 3
    model_seed: int = 0
    # training
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    noise: str = "1"
    train_seed: int = 0
    detach_attention: bool = False
    augment: bool = False
    # data generation
    count: int = 200
    data_seed: int = 2024
    # seeding / evaluation
    ht: float = 0.5
    thresholds: str = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"
    scales: str = ""
    gate_labels: bool = True
    index: int = 0

    def __post_init__(self):
        try:
            self.model_config()
            self.train_config()
            parse_noise(self.noise)
        except ValueError as exc:
            raise RunConfigError(str(exc)) from exc
        if not 0.0 <= self.ht <= 1.0:
            raise RunConfigError(f"ht must lie in [0, 1], got {self.ht}")
        if self.count < 1:
            raise RunConfigError("count must be >= 1")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            image_size=self.image_size, patch_size=self.patch_size, num_blocks=self.num_blocks,
            num_heads=self.num_heads, embed_dim=self.embed_dim, cnn_channels=self.cnn_channels,
            num_classes=self.num_classes, seed=self.model_seed,
        )

    def train_config(self, noise=None) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size, learning_rate=self.learning_rate,
            weight_decay=self.weight_decay, noise=self.noise if noise is None else noise,
            seed=self.train_seed, detach_attention=self.detach_attention, augment=self.augment,
        )

    @property
    def checkpoint_dir(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else Path(self.out_dir) / "checkpoint"

    def threshold_list(self) -> list[float]:
        vals = [float(v) for v in self.thresholds.replace(" ", "").split(",") if v]
        if not vals:
            raise RunConfigError("threshold list is empty")
        for v in vals:
            if not 0.0 <= v <= 1.0:
                raise RunConfigError(f"threshold {v} outside [0, 1]")
        return sorted(vals)

    def scale_list(self, base: int) -> list[int]:
        vals = [int(v) for v in self.scales.replace(" ", "").split(",") if v]
        return vals or [base]


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise RunConfigError(f"bad value for {name}: {raw!r}") from None
    return raw.strip()


def parse_overrides(pairs: dict[str, str]) -> dict:
    out = {}
    for key, raw in pairs.items():
        name = key.replace("-", "_")
        if name not in _FIELDS:
            raise RunConfigError(f"unknown config key: {key}")
        out[name] = _coerce(name, raw)
    return out


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise RunConfigError(f"config file not found: {path}")
    pairs = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise RunConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        pairs[key.strip()] = value.strip()
    return pairs


def load_run_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values = {}
    if path is not None:
        values.update(parse_overrides(read_config_file(path)))
    values.update(parse_overrides(overrides or {}))
    return RunConfig(**values)


def dump_run_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))


def with_overrides(cfg: RunConfig, **kw) -> RunConfig:
    return replace(cfg, **kw)
