"""Training configuration and its key-value file format.

A config file is INI text with a ``[protodoctor]`` section whose keys are
:class:`TrainConfig` field names::

    [protodoctor]
    n_courses = 50
    enable_dci = true

Command-line ``key=value`` overrides are applied on top of the file.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError

SECTION = "protodoctor"


@dataclass(frozen=True)
class TrainConfig:
    # prototypes and similarity
    n_courses: int = 50
    n_cohorts: int = 20
    phi: float = 5.0
    tau: float = 1e-6
    # objective weights
    lambda_div_cohort: float = 1e-3
    lambda_div_course: float = 1e-3
    lambda_sparsity: float = 5e-1
    lambda_prog: float = 5e-2
    lambda_interaction: float = 1e-3
    d_min_cohort: float = 3.0
    d_min_course: float = 3.0
    alpha: float = 0.1
    # optimizer
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    # ablations
    enable_par: bool = True
    enable_dci: bool = True
    stop_gradient_target: bool = True
    # architecture
    encoder_mode: str = "channelwise"
    embed_dim: int = 32
    channel_hidden: int = 8
    demo_hidden: int = 64
    dropout: float = 0.5
    hours: int = 48
    threshold: float = 0.5

    def __post_init__(self):
        lambdas = ("lambda_div_cohort", "lambda_div_course", "lambda_sparsity",
                   "lambda_prog", "lambda_interaction")
        for name in lambdas:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.n_courses < 2 or self.n_cohorts < 2:
            raise ConfigError("need at least two course and two cohort prototypes")
        if self.phi <= 0 or self.tau <= 0:
            raise ConfigError("phi and tau must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.encoder_mode not in ("simple", "channelwise"):
            raise ConfigError(f"unknown encoder_mode {self.encoder_mode!r}")
        if min(self.batch_size, self.max_epochs, self.embed_dim, self.demo_hidden, self.hours) < 1:
            raise ConfigError("sizes and counts must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    @classmethod
    def tiny(cls, **overrides) -> "TrainConfig":
        """Small, fast model for tests: 3 courses, 2 cohorts, simple encoder."""
        base = dict(n_courses=3, n_cohorts=2, encoder_mode="simple", embed_dim=6,
                    demo_hidden=4, dropout=0.0, hours=4)
        base.update(overrides)
        return cls(**base)

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        return replace(self, **coerce_values(overrides))

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [f"[{SECTION}]"]
        lines += [f"{k} = {_format(v)}" for k, v in self.to_dict().items()]
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name: str, raw):
    kind = _TYPES[name]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
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
        raise ConfigError(f"bad value for {name}: {raw!r}") from None
    return raw


def coerce_values(values: dict) -> dict:
    out = {}
    for key, raw in values.items():
        name = key.replace("-", "_")
        if name not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[name] = _coerce(name, raw)
    return out


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    extra = [s for s in parser.sections() if s not in (SECTION, "synthetic")]
    if extra:
        raise ConfigError(f"unknown config section(s): {extra}")
    values = dict(parser[SECTION]) if parser.has_section(SECTION) else {}
    try:
        return (base or TrainConfig()).with_overrides(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None, overrides: dict | None = None) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_config(text)
    return cfg.with_overrides(overrides or {})


def synthetic_section(path: str | Path | None) -> dict:
    """Raw ``[synthetic]`` section of a config file (generator parameters)."""
    if path is None:
        return {}
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(Path(path).read_text())
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return dict(parser["synthetic"]) if parser.has_section("synthetic") else {}
