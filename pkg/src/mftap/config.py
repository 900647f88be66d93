"""Run configuration: a flat ``key = value`` text file plus flag overrides."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

from mftap.synth import TASK_CLASSES

DEFAULT_LR = {"binary": 3e-3, "part": 3e-3, "type": 2e-3}


class ConfigError(ValueError):
    """Contradictory or malformed configuration."""


@dataclass
class RunConfig:
    task: str = "binary"
    prior_mode: str = "flow"
    label_interval: int = 1
    semi: bool = False
    lr: float | None = None
    epochs: int = 10
    seed: int = 0
    beta: float = 1.0
    dilation_radius: int = 2
    flow_source: str = "estimated"
    flow_levels: int = 3
    flow_smoothness: float = 0.1
    flow_iterations: int = 100
    stage_widths: str = "8,16,32,32,32"
    upsample: str = "bilinear"
    dtype: str = "float64"
    manifest: str = ""
    split: str = "train"
    flow_cache: str = ""
    checkpoint: str = ""
    loss_log: str = ""
    report_dir: str = ""

    def __post_init__(self):
        self.validate()

    @property
    def num_classes(self) -> int:
        return TASK_CLASSES[self.task]

    @property
    def learning_rate(self) -> float:
        return self.lr if self.lr is not None else DEFAULT_LR[self.task]

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(int(w) for w in self.stage_widths.split(","))

    def validate(self) -> None:
        if self.task not in TASK_CLASSES:
            raise ConfigError(f"task must be one of {sorted(TASK_CLASSES)}, got {self.task!r}")
        if self.prior_mode not in ("none", "raw", "flow"):
            raise ConfigError(f"prior_mode must be none, raw or flow, got {self.prior_mode!r}")
        if self.flow_source not in ("estimated", "ground_truth"):
            raise ConfigError(f"flow_source must be estimated or ground_truth, got {self.flow_source!r}")
        if self.label_interval < 1:
            raise ConfigError("label_interval must be >= 1")
        if self.semi and self.prior_mode == "none" and self.label_interval == 1:
            raise ConfigError("semi=true has no unlabeled frames to use with label_interval=1")
        if self.epochs < 0 or self.dilation_radius < 0:
            raise ConfigError("epochs and dilation_radius must be >= 0")
        if self.beta <= 0 or self.flow_smoothness <= 0:
            raise ConfigError("beta and flow_smoothness must be positive")
        if self.lr is not None and self.lr <= 0:
            raise ConfigError("lr must be positive")
        try:
            widths = self.widths
        except ValueError:
            raise ConfigError(f"stage_widths must be 5 comma-separated integers, got {self.stage_widths!r}") from None
        if len(widths) != 5 or min(widths) <= 0:
            raise ConfigError(f"stage_widths must be 5 positive integers, got {self.stage_widths!r}")

    def as_dict(self) -> dict:
        return asdict(self)


def coerce_value(name: str, raw: str):
    types = {f.name: f.type for f in fields(RunConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "float | None":
            return None if raw.lower() in ("", "none", "default") else float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        key = key.strip()
        values[key] = coerce_value(key, value)
    return values


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    for key, value in (overrides or {}).items():
        values[key] = coerce_value(key, value) if isinstance(value, str) else value
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.as_dict().items():
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {'' if value is None else value}")
    return "\n".join(lines) + "\n"
