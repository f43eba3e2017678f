"""Run configuration: one flat dataclass, parseable from key=value text
and overridable from CLI flags.  Every switch the ablation suites toggle
lives here so a config dict fully determines a run."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from .errors import ConfigError

MINING_SOURCES = ("support", "query", "both")
MODES = ("train", "test")
PRECISIONS = ("float32", "float64")


@dataclass
class RunConfig:
    # data
    data_spec: str = ""               # path to a dataset spec file; empty = defaults
    fold: int = 0
    mode: str = "test"
    shots: int = 1
    diversity: float = 0.5
    canvas: int = 64

    # model
    channels: int = 64
    heads: int = 4
    layers: int = 3
    enc_channels: tuple = (16, 32, 64)
    precision: str = "float32"
    mha_output_proj: bool = True

    # architecture switches (the ablation axes)
    mining: bool = True
    mining_source: str = "both"
    iterate: bool = True
    dual_loss: bool = True
    query_activation: bool = True
    mask_from_updated_feature: bool = False

    # loss
    alpha: float = 0.3
    dual_loss_weight: float = 1.0
    init_head_weight: float = 0.5

    # optimization
    lr: float = 0.01
    momentum: float = 0.9
    poly_power: float = 0.9
    epochs: int = 10
    episodes_per_epoch: int = 200
    episodes_per_step: int = 4

    # evaluation
    eval_episodes: int = 1000
    train_eval_episodes: int = 100
    eval_every: int = 5               # epochs between in-training eval lines; 0 = final only
    seed: int = 0

    def validate(self) -> "RunConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.mining_source not in MINING_SOURCES:
            raise ConfigError(f"mining_source must be one of {MINING_SOURCES}, "
                              f"got {self.mining_source!r}")
        if self.channels < self.heads or self.channels % self.heads:
            raise ConfigError(f"channels {self.channels} must be a multiple of "
                              f"heads {self.heads}")
        if len(self.enc_channels) != 3:
            raise ConfigError(f"enc_channels needs 3 stage widths, got {self.enc_channels}")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.diversity < 0.0:
            raise ConfigError(f"diversity must be >= 0, got {self.diversity}")
        if self.canvas < 16 or self.canvas % 8:
            raise ConfigError(f"canvas must be >= 16 and divisible by 8, got {self.canvas}")
        if self.lr <= 0 or self.epochs < 1 or self.episodes_per_epoch < 1:
            raise ConfigError("lr, epochs, episodes_per_epoch must be positive")
        if self.episodes_per_step < 1:
            raise ConfigError(f"episodes_per_step must be >= 1, got {self.episodes_per_step}")
        if not 0 <= self.fold < 4:
            raise ConfigError(f"fold must be in [0, 4), got {self.fold}")
        return self

    def as_dict(self) -> dict:
        d = asdict(self)
        d["enc_channels"] = list(self.enc_channels)
        return d

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw).validate()


def parse_kv_text(text: str) -> dict:
    """key = value lines; blank lines and # comments ignored."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def coerce_value(text: str, example, key: str):
    """Parse text to the type of an example default value."""
    if isinstance(example, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(example, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if isinstance(example, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    if isinstance(example, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if not parts:
            raise ConfigError(f"{key}: expected a comma list, got {text!r}")
        elem = example[0] if example else ""
        return tuple(coerce_value(p, elem, key) for p in parts)
    return text


def config_from_text(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    known = {f.name for f in fields(RunConfig)}
    updates = {}
    for key, val in parse_kv_text(text).items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = coerce_value(val, getattr(base, key), key)
    return replace(base, **updates).validate()


def config_from_dict(d: dict, base: RunConfig | None = None) -> RunConfig:
    """Rebuild a config from a checkpoint header's config dict."""
    base = base or RunConfig()
    known = {f.name for f in fields(RunConfig)}
    updates = {}
    for key, val in d.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        updates[key] = tuple(val) if isinstance(val, list) else val
    return replace(base, **updates).validate()
