"""YAML-backed planner configuration."""

from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional

import yaml


class ConfigError(ValueError):
    """Configuration value out of range."""


class CompositionMode(str, Enum):
    STOCHASTIC = "stochastic"
    FPL = "fpl"


class Heuristic(str, Enum):
    MINMAX = "minmax"
    AGM_STOCHASTIC = "agm_stochastic"
    AGM_FPL = "agm_fpl"

    @property
    def composition_mode(self) -> CompositionMode:
        return CompositionMode.FPL if self is Heuristic.AGM_FPL else CompositionMode.STOCHASTIC


class CompositionConfig:
    """How DIAS vectors of Boolean children are combined."""

    def __init__(self, **kwargs: Any):
        self.mode: CompositionMode = CompositionMode(kwargs.get("mode", kwargs.get("composition", "fpl")))
        self.p_and: float = float(kwargs.get("p_and", -1.0))
        self.p_or: float = float(kwargs.get("p_or", 1.0))
        self.beta: float = float(kwargs.get("beta", 0.1))
        seed = kwargs.get("rng_seed")
        self.rng_seed: Optional[int] = None if seed is None else int(seed)

        if self.beta < 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mode": self.mode.value,
            "p_and": self.p_and,
            "p_or": self.p_or,
            "beta": self.beta,
            "rng_seed": self.rng_seed,
        }


class PlannerConfig:
    """Planner settings with defaults; unknown keys are ignored."""

    def __init__(self, **kwargs: Any):
        # Search budget
        self.max_iters: int = int(kwargs.get("max_iters", 2000))
        self.k_near: int = int(kwargs.get("k_near", 15))
        self.k_rewire: int = int(kwargs.get("k_rewire", 5))
        self.max_step_gap: int = int(kwargs.get("max_step_gap", 5))
        self.p_bias: float = float(kwargs.get("p_bias", 0.5))

        # Steering budget
        self.steer_samples: int = int(kwargs.get("steer_samples", 16))
        self.refine_iters: int = int(kwargs.get("refine_iters", 2))
        self.exact_shots: int = int(kwargs.get("exact_shots", 64))
        self.exact_max_steps: int = int(kwargs.get("exact_max_steps", 5))
        self.rewire_refine_limit: int = int(kwargs.get("rewire_refine_limit", 2))
        self.epsilon_connect: float = float(kwargs.get("epsilon_connect", 0.05))
        self.ik_max_retries: int = int(kwargs.get("ik_max_retries", 50))

        self.heuristic: Heuristic = Heuristic(kwargs.get("heuristic", Heuristic.AGM_FPL.value))
        self.rng_seed: int = int(kwargs.get("rng_seed", 0))
        self.minmax_scale: float = float(kwargs.get("minmax_scale", 1.0))
        self.show_progress: bool = bool(kwargs.get("show_progress", False))

        composition = kwargs.get("composition", {})
        if isinstance(composition, CompositionConfig):
            self.composition = composition
        elif isinstance(composition, dict):
            data = dict(composition)
            data.setdefault("mode", self.heuristic.composition_mode.value)
            self.composition = CompositionConfig(**data)
        else:
            self.composition = CompositionConfig(mode=composition)
        # the heuristic decides the composition mode
        self.composition.mode = self.heuristic.composition_mode
        self._validate()

    def _validate(self) -> None:
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")
        if self.k_near < 1:
            raise ConfigError(f"k_near must be >= 1, got {self.k_near}")
        if self.k_rewire < 0:
            raise ConfigError(f"k_rewire must be >= 0, got {self.k_rewire}")
        if self.max_step_gap < 1:
            raise ConfigError(f"max_step_gap must be >= 1, got {self.max_step_gap}")
        if not 0.0 <= self.p_bias <= 1.0:
            raise ConfigError(f"p_bias must lie in [0, 1], got {self.p_bias}")
        if self.steer_samples < 1 or self.exact_shots < 1 or self.exact_max_steps < 1:
            raise ConfigError("steer_samples, exact_shots and exact_max_steps must be >= 1")
        if self.rewire_refine_limit < 0:
            raise ConfigError(f"rewire_refine_limit must be >= 0, got {self.rewire_refine_limit}")
        if self.epsilon_connect <= 0:
            raise ConfigError(f"epsilon_connect must be positive, got {self.epsilon_connect}")
        if self.minmax_scale <= 0:
            raise ConfigError(f"minmax_scale must be positive, got {self.minmax_scale}")

    def with_overrides(self, **overrides: Any) -> "PlannerConfig":
        """Copy with the given non-None fields replaced."""
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return PlannerConfig(**data)

    @classmethod
    def load_from_yaml(cls, config_path: Path) -> "PlannerConfig":
        """Load configuration from YAML file."""
        if not config_path.exists():
            raise FileNotFoundError(f"Configuration file not found: {config_path}")

        with open(config_path) as f:
            data = yaml.safe_load(f) or {}

        return cls(**data)

    def save_to_yaml(self, config_path: Path) -> None:
        """Save configuration to YAML file."""
        config_path.parent.mkdir(parents=True, exist_ok=True)

        with open(config_path, "w") as f:
            yaml.dump(self.to_dict(), f, default_flow_style=False, indent=2)

    def to_dict(self) -> Dict[str, Any]:
        """Convert configuration to dictionary."""
        return {
            "max_iters": self.max_iters,
            "k_near": self.k_near,
            "k_rewire": self.k_rewire,
            "max_step_gap": self.max_step_gap,
            "p_bias": self.p_bias,
            "steer_samples": self.steer_samples,
            "refine_iters": self.refine_iters,
            "exact_shots": self.exact_shots,
            "exact_max_steps": self.exact_max_steps,
            "rewire_refine_limit": self.rewire_refine_limit,
            "epsilon_connect": self.epsilon_connect,
            "ik_max_retries": self.ik_max_retries,
            "heuristic": self.heuristic.value,
            "rng_seed": self.rng_seed,
            "minmax_scale": self.minmax_scale,
            "show_progress": self.show_progress,
            "composition": self.composition.to_dict(),
        }


# Default configuration path
DEFAULT_CONFIG_PATH = Path("config.yaml")


def load_config(config_path: Optional[Path] = None) -> PlannerConfig:
    """Load planner defaults from YAML, or built-in defaults when the file is absent."""
    path = config_path or DEFAULT_CONFIG_PATH
    if path.exists():
        return PlannerConfig.load_from_yaml(path)
    if config_path is not None:
        raise FileNotFoundError(f"Configuration file not found: {config_path}")
    return PlannerConfig()
