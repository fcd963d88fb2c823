"""Training configuration and its flat ``key = value`` text format.

Keys are dotted paths into :class:`TrainConfig`; ``model.*`` and ``data.*``
address the nested model and dataset configurations::

    # a comment
    epochs = 60
    lr = 0.002
    model.dim = 64
    data.voxel_counts = 64, 80, 96
"""

from __future__ import annotations

import ast
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SynthConfig
from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: SynthConfig = field(default_factory=SynthConfig)
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    cosine_decay: bool = False
    lr_floor: float = 0.0
    epochs: int = 60
    batch_size: int = 32
    mse_weight: float = 30.0
    contrastive_weight: float = 1.0
    tau: float = 0.1
    mixup_alpha: float = 0.15
    seed: int = 0
    eval_pool_size: int = 50
    eval_trials: int = 30
    dataset_path: str = ""
    checkpoint_path: str = ""

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.mse_weight, self.contrastive_weight, self.tau)

    def validate(self, voxel_counts=None) -> None:
        """Check every knob; ``voxel_counts`` overrides the dataset's own when a dataset is loaded."""
        self.model.validate()
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for contrastive losses, got {self.batch_size}")
        if self.lr <= 0 or self.eps <= 0 or self.tau <= 0 or self.mixup_alpha <= 0:
            raise ConfigError("lr, eps, tau and mixup_alpha must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.model.target_tokens != self.data.target_tokens or self.model.target_dim != self.data.target_dim:
            raise ConfigError("model and data disagree on the target shape")
        counts = list(voxel_counts) if voxel_counts is not None else list(self.data.voxel_counts)
        n_min, m, layers = min(counts), self.model.merge, self.model.layers
        if n_min - m * layers < 2 * m:
            raise ConfigError(f"merge schedule infeasible: N_min={n_min}, M={m}, L={layers} needs "
                              f"N_min - M*L >= 2M")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["data"]["voxel_counts"] = list(self.data.voxel_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        d = dict(d)
        model = ModelConfig(**d.pop("model", {}))
        data = dict(d.pop("data", {}))
        if "voxel_counts" in data:
            data["voxel_counts"] = tuple(data["voxel_counts"])
        cfg = cls(model=model, data=SynthConfig(**data))
        for key, value in d.items():
            set_key(cfg, key, value)
        return cfg


def _coerce(raw: str, current):
    text = raw.strip()
    if isinstance(current, bool):
        if text.lower() in ("true", "yes", "1"):
            return True
        if text.lower() in ("false", "no", "0"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, tuple):
        try:
            return tuple(int(part) for part in text.strip("()[]").split(",") if part.strip())
        except ValueError:
            raise ConfigError(f"expected comma-separated integers, got {raw!r}") from None
    if isinstance(current, str):
        return text.strip("\"'")
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        raise ConfigError(f"cannot parse value {raw!r}") from None
    if isinstance(current, int) and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(current, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    raise ConfigError(f"expected {type(current).__name__}, got {raw!r}")


def set_key(cfg: TrainConfig, key: str, value) -> None:
    """Assign ``value`` (raw text or already typed) to the dotted ``key``."""
    target, name = cfg, key
    if "." in key:
        head, name = key.split(".", 1)
        if head not in ("model", "data") or "." in name:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(cfg, head)
    known = {f.name for f in fields(target)}
    if name not in known:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(target, name)
    if isinstance(value, str) and not isinstance(current, str):
        value = _coerce(value, current)
    setattr(target, name, value)


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    cfg = base if base is not None else TrainConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            set_key(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path) -> TrainConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def format_config(cfg: TrainConfig) -> str:
    """Render ``cfg`` in the same text format ``parse_config`` reads."""
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in ("model", "data"):
            for sub in fields(value):
                lines.append(f"{f.name}.{sub.name} = {_render(getattr(value, sub.name))}")
        else:
            lines.append(f"{f.name} = {_render(value)}")
    return "\n".join(lines) + "\n"


def _render(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)
