"""Flat key=value run configuration.

One line per setting, '#' starts a comment, unknown keys are rejected, and
every omitted key takes its documented default. The resolved configuration
round-trips through to_dict()/parse_config so a run.lock file is itself a
valid config reproducing the run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .errors import ConfigError, InvalidArgument
from .losses import HyperParams

PRECISIONS = ("double", "single")
BACKENDS = ("auto", "compiled", "python")


@dataclass
class RunConfig:
    """Everything a run needs: objective knobs, dims, seeds, paths, modes.

    d_v and d_s default to 0, meaning "infer from the data".
    """

    # objective / optimizer (mirrors HyperParams)
    delta: float = 0.3
    alpha: float = 0.0
    k1: int | None = None
    k2: int = 5
    ss_kernel: int = 7
    ss_threshold: float = 0.5
    lambda_mil: float = 1.0
    lambda_cs: float = 0.1
    ss_mode: str = "replace"
    nms_iou: float = 0.5
    snms_const: float = 0.5
    warmup_epochs: int = 30
    lr: float = 1e-4
    batch_size: int = 32
    epochs: int = 100
    ss_enabled: bool = False
    cs_enabled: bool = False
    cs_weight_grad: bool = False
    # model dims
    d_v: int = 0
    d_s: int = 0
    d_h: int = 512
    num_clips: int = 16
    # run behavior
    seed: int = 0
    max_sentences: int = 20
    precision: str = "double"
    backend: str = "auto"
    order_violation_only: bool = False
    snms_enabled: bool = False
    top_k: int = 0
    # paths ("" = supplied on the command line instead)
    train_manifest: str = ""
    out_dir: str = ""

    def hyper(self) -> HyperParams:
        return HyperParams(
            delta=self.delta, alpha=self.alpha, k1=self.k1, k2=self.k2,
            ss_kernel=self.ss_kernel, ss_threshold=self.ss_threshold,
            lambda_mil=self.lambda_mil, lambda_cs=self.lambda_cs,
            ss_mode=self.ss_mode, nms_iou=self.nms_iou,
            snms_const=self.snms_const, warmup_epochs=self.warmup_epochs,
            lr=self.lr, batch_size=self.batch_size, epochs=self.epochs,
            ss_enabled=self.ss_enabled, cs_enabled=self.cs_enabled,
            cs_weight_grad=self.cs_weight_grad)

    def to_dict(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "k1":
                out[f.name] = "auto" if v is None else str(v)
            elif isinstance(v, bool):
                out[f.name] = "true" if v else "false"
            elif isinstance(v, float):
                out[f.name] = repr(v)
            else:
                out[f.name] = str(v)
        return out


_BOOL_KEYS = {"ss_enabled", "cs_enabled", "cs_weight_grad",
              "order_violation_only", "snms_enabled"}
_INT_KEYS = {"k2", "ss_kernel", "warmup_epochs", "batch_size", "epochs",
             "d_v", "d_s", "d_h", "num_clips", "seed", "max_sentences", "top_k"}
_FLOAT_KEYS = {"delta", "alpha", "ss_threshold", "lambda_mil", "lambda_cs",
               "nms_iou", "snms_const", "lr"}
_STR_KEYS = {"ss_mode", "precision", "backend", "train_manifest", "out_dir"}


def _convert(key: str, raw: str):
    if key == "k1":
        if raw == "auto":
            return None
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer or 'auto', got {raw!r}",
                              key=key) from None
    if key in _BOOL_KEYS:
        if raw == "true":
            return True
        if raw == "false":
            return False
        raise ConfigError(f"expected true or false, got {raw!r}", key=key)
    if key in _INT_KEYS:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"expected an integer, got {raw!r}", key=key) from None
    if key in _FLOAT_KEYS:
        try:
            v = float(raw)
        except ValueError:
            raise ConfigError(f"expected a number, got {raw!r}", key=key) from None
        if not math.isfinite(v):
            raise ConfigError(f"must be finite, got {raw!r}", key=key)
        return v
    if key in _STR_KEYS:
        return raw
    raise ConfigError("unknown configuration key", key=key)


def parse_config(text: str) -> RunConfig:
    """Parse key=value lines into a validated RunConfig."""
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError("duplicate key", key=key)
        values[key] = _convert(key, raw)
    try:
        cfg = RunConfig(**values)
    except TypeError:
        unknown = set(values) - {f.name for f in fields(RunConfig)}
        raise ConfigError("unknown configuration key",
                          key=sorted(unknown)[0] if unknown else None) from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    try:
        cfg.hyper()
    except InvalidArgument as exc:
        raise ConfigError(str(exc)) from None
    if cfg.precision not in PRECISIONS:
        raise ConfigError(f"must be one of {PRECISIONS}, got {cfg.precision!r}",
                          key="precision")
    if cfg.backend not in BACKENDS:
        raise ConfigError(f"must be one of {BACKENDS}, got {cfg.backend!r}",
                          key="backend")
    if cfg.d_v < 0 or cfg.d_s < 0:
        raise ConfigError("feature dims must be >= 0 (0 = infer from data)",
                          key="d_v" if cfg.d_v < 0 else "d_s")
    if cfg.d_h < 1:
        raise ConfigError(f"must be >= 1, got {cfg.d_h}", key="d_h")
    if cfg.num_clips < 1:
        raise ConfigError(f"must be >= 1, got {cfg.num_clips}", key="num_clips")
    if cfg.max_sentences < 1:
        raise ConfigError(f"must be >= 1, got {cfg.max_sentences}",
                          key="max_sentences")
    if cfg.batch_size < 1:
        raise ConfigError(f"must be >= 1, got {cfg.batch_size}", key="batch_size")
    if cfg.epochs < 0:
        raise ConfigError(f"must be >= 0, got {cfg.epochs}", key="epochs")
    if cfg.top_k < 0:
        raise ConfigError(f"must be >= 0 (0 = unlimited), got {cfg.top_k}",
                          key="top_k")
    if not cfg.lr > 0:
        raise ConfigError(f"must be > 0, got {cfg.lr}", key="lr")


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
