"""Run configuration: one flat set of keys with documented defaults.

Config files are plain ``key = value`` lines (``#`` comments allowed);
command-line flags override file values.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .losses import LossWeights
from .models import ModelConfig


_OUTPUT_KEYS = ("out_dir", "ckpt_dir", "keep_periodic")


@dataclass(frozen=True)
class RunConfig:
    # architecture
    resolution: int = 64
    ch: int = 32
    z_dim: int = 128
    c_b: int = 128
    d_id: int = 64
    # optimisation (Adam, fixed learning rate)
    batch_size: int = 8
    max_steps: int = 20000
    ckpt_every: int = 500
    patience: int = 5  # evaluations without improvement before stopping
    log_every: int = 10
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    # loss weights
    lambda1: float = 0.1
    alpha1: float = 0.01
    alpha2: float = 50.0
    alpha3: float = 0.02
    margin_m: float = 7.0
    # data / io
    seed: int = 0
    manifest: str = ""
    ckpt_dir: str = "checkpoints"
    out_dir: str = "out"
    boundary_source: str = "predicted"  # or ground_truth
    condition_ranges: str = ""  # e.g. "yaw=-0.5:0.5,AU25=0:1" in normalized units
    dip_checkpoint: str = ""  # empty: identity-preserving net copies the proxy
    keep_periodic: bool = True

    def __post_init__(self):
        if self.boundary_source not in ("predicted", "ground_truth"):
            raise ConfigError(f"boundary_source must be predicted or ground_truth, got {self.boundary_source!r}")
        if self.batch_size < 1 or self.max_steps < 0 or self.ckpt_every < 1 or self.patience < 1:
            raise ConfigError("batch_size, ckpt_every and patience must be >= 1 and max_steps >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        self.loss_weights()
        self.model_config()

    def model_config(self, id_classes: int = 8) -> ModelConfig:
        return ModelConfig(resolution=self.resolution, z_dim=self.z_dim, c_b=self.c_b,
                           d_id=self.d_id, ch=self.ch, id_classes=id_classes)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.alpha1, self.alpha2, self.alpha3, self.margin_m)

    def hash(self) -> str:
        """Digest of every setting that can change results; output locations are excluded."""
        d = {k: v for k, v in dataclasses.asdict(self).items() if k not in _OUTPUT_KEYS}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)

    def ckpt_path(self, phase: str) -> Path:
        return Path(self.ckpt_dir) / f"{phase}.pt"

    def describe(self) -> str:
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self))


def _coerce(name: str, raw: str, typ):
    try:
        if typ is bool or typ == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {name}: cannot parse {raw!r}") from exc


def parse_overrides(pairs: dict) -> dict:
    """Coerce string values onto RunConfig field types; unknown keys are errors."""
    types = {f.name: f.type for f in fields(RunConfig)}
    out = {}
    for k, v in pairs.items():
        if k not in types:
            raise ConfigError(f"unknown config key {k!r}")
        out[k] = _coerce(k, v, types[k]) if isinstance(v, str) else v
    return out


def read_config_file(path) -> dict:
    pairs = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        pairs[k] = v
    return parse_overrides(pairs)


def load_config(path=None, **overrides) -> RunConfig:
    values = read_config_file(path) if path else {}
    values.update(parse_overrides({k: v for k, v in overrides.items() if v is not None}))
    return RunConfig(**values)
