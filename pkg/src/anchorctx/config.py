"""Run configuration: ``key = value`` files with command-line overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .acd import AcdConfig
from .ccd import CcdConfig
from .errors import ConfigurationError

OUTPUT_ROOT_ENV = "ANCHORCTX_OUTPUT_ROOT"


@dataclass
class RunConfig:
    dataset: str = ""
    seed: int = 0
    # detector
    P: int = 7
    D: int = 32
    L: int = 10
    lr: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    interactions: str = "both"
    attention_norm: str = "softmax"
    optimizer: str = "sgd"
    momentum: float = 0.0
    anchor_threshold: float = 0.8
    # diffusion refinement
    T_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    N: int = 100
    denoiser_width: int = 128
    ccd_epochs: int = 100
    ccd_lr: float = 1e-3
    ccd_batch_size: int = 64
    refine: str = "mean"
    output_dir: str = "runs/default"

    def acd(self) -> AcdConfig:
        return AcdConfig(P=self.P, D=self.D, L=self.L, mode=self.interactions, norm=self.attention_norm,
                         lr=self.lr, epochs=self.epochs, batch_size=self.batch_size, optimizer=self.optimizer,
                         momentum=self.momentum, seed=self.seed)

    def ccd(self) -> CcdConfig:
        return CcdConfig(T_steps=self.T_steps, beta_start=self.beta_start, beta_end=self.beta_end,
                         width=self.denoiser_width, lr=self.ccd_lr, epochs=self.ccd_epochs,
                         batch_size=self.ccd_batch_size, N=self.N, refine=self.refine, seed=self.seed)

    def validate(self) -> None:
        if not self.dataset:
            raise ConfigurationError("dataset: path is required")
        if not 0.0 <= self.anchor_threshold < 1.0:
            raise ConfigurationError(f"anchor_threshold: must lie in [0, 1), got {self.anchor_threshold}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"optimizer: must be sgd or adam, got {self.optimizer!r}")
        for name in ("epochs", "batch_size", "ccd_epochs", "ccd_batch_size", "denoiser_width"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name}: must be >= 1")
        self.acd().validate()
        self.ccd().validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Stable hash of every setting."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @property
    def output_path(self) -> Path:
        return Path(self.output_dir)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigurationError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{key}: expected {kind}, got {raw!r}") from None
    return raw


def parse_pairs(lines, origin: str = "<config>") -> dict:
    out = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{origin}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def parse_overrides(args) -> dict:
    """``--key=value`` tokens to a dict."""
    out = {}
    for arg in args:
        if not arg.startswith("--") or "=" not in arg:
            raise ConfigurationError(f"override must look like --key=value, got {arg!r}")
        key, value = arg[2:].split("=", 1)
        out[key] = _coerce(key, value)
    return out


def load_config(path: str | os.PathLike, overrides: dict | None = None) -> RunConfig:
    """Read ``path``; relative paths resolve against the config file's folder.

    A relative ``output_dir`` resolves against $ANCHORCTX_OUTPUT_ROOT when set.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    values = parse_pairs(text.splitlines(), str(path))
    values.update(overrides or {})
    cfg = RunConfig(**values)
    base = path.parent
    if cfg.dataset and not Path(cfg.dataset).is_absolute():
        cfg.dataset = str(base / cfg.dataset)
    if not Path(cfg.output_dir).is_absolute():
        root = os.environ.get(OUTPUT_ROOT_ENV)
        cfg.output_dir = str(Path(root) / cfg.output_dir if root else base / cfg.output_dir)
    cfg.validate()
    if not Path(cfg.dataset).is_dir():
        raise ConfigurationError(f"dataset: directory {cfg.dataset} does not exist")
    return cfg
