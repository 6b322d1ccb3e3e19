"""Registration and runtime configuration.

Defaults are the standard swarm constants. A JSON config file is flat: every
``SwarmConfig`` field plus the ``GlobalConfig`` runtime fields. Precedence is
CLI flag > config file > environment > default.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .errors import NotFoundError, ValidationError

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")

# Optimization schemes for ablation runs.
SCHEMES: dict[str, dict[str, Any]] = {
    "full": {},
    "guides-only": {"move_regular": False},
    "no-guides": {"use_guides": False, "post_refine": False},
    "initial-only": {"max_iterations": 0, "post_refine": False},
}


@dataclass(frozen=True)
class SwarmConfig:
    """Guide-particle swarm parameters. Angles in degrees, lengths in mm."""

    n_particles: int = 1600
    theta_r: float = 30.0
    omega_p: float = 0.2
    omega_b: float = 0.3
    omega_g: float = 0.3
    lambda_lm: float = 0.1
    normal_angle_max: float = 20.0
    hough_bin: float = 10.0
    termination_eps: float = 1e-4
    max_iterations: int = 25
    eval_points: int = 1500
    refine_points: int = 6000
    hough_samples: int = 300
    f_gate_mm: float = 3.0
    bilinear_max_spread_mm: float = 20.0
    use_guides: bool = True
    move_regular: bool = True
    random_weights: bool = True
    post_refine: bool = True
    post_refine_iterations: int = 20
    min_iterations: int = 0
    max_inf_fraction: float = 0.1
    lm_retries: int = 3
    seed: int = 0

    def __post_init__(self):
        positive = ("theta_r", "lambda_lm", "normal_angle_max", "hough_bin", "termination_eps")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive", details={"field": name})
        at_least_one = ("n_particles", "eval_points", "refine_points", "hough_samples")
        for name in at_least_one:
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1", details={"field": name})
        non_negative = (
            "max_iterations",
            "f_gate_mm",
            "bilinear_max_spread_mm",
            "post_refine_iterations",
            "min_iterations",
            "lm_retries",
        )
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must not be negative", details={"field": name})
        for name in ("omega_p", "omega_b", "omega_g", "max_inf_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]", details={"field": name})
        if self.normal_angle_max > 180:
            raise ValidationError("normal_angle_max must not exceed 180", details={"field": "normal_angle_max"})

    def replace(self, **changes: Any) -> SwarmConfig:
        return replace(self, **changes)

    def with_scheme(self, scheme: str) -> SwarmConfig:
        """Apply the switches of one of the ablation schemes."""
        if scheme not in SCHEMES:
            raise ValidationError(
                f"unknown optimization scheme: {scheme}",
                details={"scheme": scheme},
                suggestions=[f"Use one of: {', '.join(SCHEMES)}"],
            )
        return replace(self, **SCHEMES[scheme])


@dataclass(frozen=True)
class GlobalConfig:
    """Everything a CLI run needs besides its file arguments."""

    swarm: SwarmConfig = field(default_factory=SwarmConfig)
    deterministic: bool = False
    log_level: str = "INFO"
    jobs: int | None = None
    external_command: str | None = None
    multiview_refine_iterations: int = 10

    def __post_init__(self):
        if self.log_level.upper() not in LOG_LEVELS:
            raise ValidationError(
                f"unknown log level: {self.log_level}",
                details={"field": "log_level"},
                suggestions=[f"Use one of: {', '.join(LOG_LEVELS)}"],
            )
        object.__setattr__(self, "log_level", self.log_level.upper())
        if self.jobs is not None and self.jobs < 1:
            raise ValidationError("jobs must be at least 1", details={"field": "jobs"})
        if self.multiview_refine_iterations < 0:
            raise ValidationError(
                "multiview_refine_iterations must not be negative",
                details={"field": "multiview_refine_iterations"},
            )

    @property
    def worker_count(self) -> int:
        return self.jobs or os.cpu_count() or 1

    def to_dict(self) -> dict[str, Any]:
        """Flat JSON form, the same shape a config file uses."""
        data = asdict(self.swarm)
        data.update(
            deterministic=self.deterministic,
            log_level=self.log_level,
            jobs=self.jobs,
            external_command=self.external_command,
            multiview_refine_iterations=self.multiview_refine_iterations,
        )
        return data


SWARM_FIELDS = {f.name: f.default for f in fields(SwarmConfig)}
GLOBAL_FIELDS = {
    "deterministic": bool,
    "log_level": str,
    "jobs": int,
    "external_command": str,
    "multiview_refine_iterations": int,
}


def _coerce(name: str, value: Any, kind: type) -> Any:
    if kind is bool:
        if not isinstance(value, bool):
            raise ValidationError(f"{name} must be true or false", details={"field": name})
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"{name} must be an integer", details={"field": name})
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"{name} must be a number", details={"field": name})
        return float(value)
    if not isinstance(value, str):
        raise ValidationError(f"{name} must be a string", details={"field": name})
    return value


def config_from_dict(data: dict[str, Any], base: GlobalConfig | None = None) -> GlobalConfig:
    """Overlay a flat mapping onto ``base``; unknown keys are rejected."""
    if not isinstance(data, dict):
        raise ValidationError("config must be a JSON object")
    base = base or GlobalConfig()
    swarm_changes: dict[str, Any] = {}
    global_changes: dict[str, Any] = {}
    for name, value in data.items():
        if name in SWARM_FIELDS:
            swarm_changes[name] = _coerce(name, value, type(SWARM_FIELDS[name]))
        elif name in GLOBAL_FIELDS:
            nullable = name in ("jobs", "external_command")
            global_changes[name] = None if value is None and nullable else _coerce(name, value, GLOBAL_FIELDS[name])
        else:
            raise ValidationError(
                f"unknown config key: {name}",
                details={"field": name},
                suggestions=["Check the key against the SwarmConfig and GlobalConfig fields"],
            )
    swarm = replace(base.swarm, **swarm_changes) if swarm_changes else base.swarm
    return replace(base, swarm=swarm, **global_changes)


def env_defaults() -> GlobalConfig:
    """Defaults with environment overrides applied."""
    data: dict[str, Any] = {}
    if level := os.getenv("VEMREG_LOG_LEVEL"):
        data["log_level"] = level
    if jobs := os.getenv("VEMREG_JOBS"):
        try:
            data["jobs"] = int(jobs)
        except ValueError:
            raise ValidationError("VEMREG_JOBS must be an integer", details={"field": "jobs"})
    if command := os.getenv("VEMREG_EXTERNAL_COMMAND"):
        data["external_command"] = command
    return config_from_dict(data)


def load_config(path: str | Path | None = None, **overrides: Any) -> GlobalConfig:
    """Resolve a configuration from environment, file and explicit overrides.

    Overrides whose value is ``None`` are ignored so that unset CLI flags do
    not mask file values.
    """
    config = env_defaults()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise NotFoundError(f"config file not found: {path}", details={"path": str(path)})
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ValidationError(f"config file is not valid JSON: {e}", details={"path": str(path)})
        config = config_from_dict(data, config)
    explicit = {name: value for name, value in overrides.items() if value is not None}
    if explicit:
        config = config_from_dict(explicit, config)
    return config


def config_digest() -> str:
    """Short fingerprint of the built-in defaults."""
    payload = json.dumps(GlobalConfig().to_dict(), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]
