import copy
import os
import yaml
from typing import Dict, Any, Optional
from pathlib import Path

# Keys whose YAML boolean spelling (``off``/``no``) must stay a string flag
_FLAG_KEYS = ("flow.symmetry", "interpolation.symmetry")

SEED_ENV_VAR = "FLOWMORPH_SEED"


class Config:
    """Configuration manager for FlowMorph."""

    def __init__(self, config_file: Optional[str] = None):
        """
        Initialize configuration.

        Args:
            config_file (str, optional): Path to custom config file
        """
        self.config = self._load_default_config()

        if config_file:
            self.load_config(config_file)

    def _load_default_config(self) -> Dict[str, Any]:
        """Load default configuration settings."""
        return {
            # Flow parameterization shared by training and inference
            "flow": {
                "mode": "direct",  # direct, divfree
                "symmetry": "off",  # off, yz
                "sign": "hub",  # hub, oddmlp
                "latent_dim": 8,
                "width": 16,
                "activation": "elu",  # elu, tanh, relu (relu only for direct mode)
            },

            "ode": {
                "train": {"solver": "rk4", "steps": 5},
                "eval": {
                    "solver": "dopri5",
                    "rtol": 1e-4,
                    "atol": 1e-4,
                    "max_steps": 10000,
                },
            },

            "training": {
                "learning_rate": 1e-3,
                "batch_size": 4,
                "steps": 500,
                "samples_per_shape": 512,
                "edge_weight": 0.0,
                "max_edges": 2000,
                "seed": 0,
                "checkpoint_every": 0,  # 0 disables periodic checkpoints
                "latent_std": 0.1,
            },

            "embedding": {
                "init_std": 1e-4,
                "learning_rate": 1e-2,
                "iterations": 30,
                "fine_tune_iterations": 30,
                "fine_tune_learning_rate": 1e-3,
                "k": 5,
                "shapes_per_step": 8,
                "samples": 512,
                "eval_samples": 2048,
            },

            # Keyframe pair fitting
            "interpolation": {
                "frames": 11,
                "supervision_frames": 5,
                "mode": "divfree",
                "symmetry": "off",
                "edge_weight": 2.0,
                "steps": 1000,
                "learning_rate": 2e-3,
                "width": 16,
                "latent_dim": 4,
                "activation": "elu",
                "ode_steps": 6,
            },

            "metrics": {
                "observation_points": 300,
                "noise_std": 0.05,
                "seed": 0,
            },

            "verify": {
                "seed": 0,
                "points": 1000,
                "width": 16,
                "latent_dim": 8,
            },

            "performance": {
                "threads": None,  # None uses the hardware count
            },

            "logging": {
                "level": "INFO",
                "log_file": None,  # If None, logs to console
            },

            "output": {
                "float_digits": 9,
                "include_config": True,
            },
        }

    def load_config(self, config_file: str) -> None:
        """
        Load configuration from YAML file.

        Args:
            config_file (str): Path to configuration file
        """
        config_path = Path(config_file)

        if not config_path.exists():
            raise FileNotFoundError(f"Config file not found: {config_file}")

        try:
            with open(config_path, 'r', encoding='utf-8') as f:
                custom_config = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ValueError(f"Invalid YAML in config file: {e}")

        if not isinstance(custom_config, dict):
            raise ValueError(f"Config file must hold a mapping: {config_file}")

        self.config = self._deep_merge(self.config, self._lift_flat_keys(custom_config))
        self._normalize_flags()

    def _lift_flat_keys(self, custom: Dict[str, Any]) -> Dict[str, Any]:
        """Place top-level keys that name training fields into the training section."""
        training_keys = set(self.config["training"])
        flow_keys = set(self.config["flow"])
        lifted: Dict[str, Any] = {}

        for key, value in custom.items():
            if key in self.config and isinstance(self.config[key], dict):
                lifted[key] = value
            elif key in training_keys:
                lifted.setdefault("training", {})[key] = value
            elif key in flow_keys:
                lifted.setdefault("flow", {})[key] = value
            else:
                lifted[key] = value

        return lifted

    def _normalize_flags(self) -> None:
        for key in _FLAG_KEYS:
            value = self.get(key)
            if value is False or value is None:
                self.set(key, "off")

    def _deep_merge(self, default: Dict, custom: Dict) -> Dict:
        """
        Deep merge two dictionaries.

        Args:
            default (dict): Default configuration
            custom (dict): Custom configuration to merge

        Returns:
            dict: Merged configuration
        """
        result = default.copy()

        for key, value in custom.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = self._deep_merge(result[key], value)
            else:
                result[key] = value

        return result

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get configuration value using dot notation.

        Args:
            key (str): Configuration key (e.g., 'training.learning_rate')
            default: Default value if key not found

        Returns:
            Configuration value or default
        """
        value = self.config

        try:
            for k in key.split('.'):
                value = value[k]
            return value
        except (KeyError, TypeError):
            return default

    def set(self, key: str, value: Any) -> None:
        """
        Set configuration value using dot notation.

        Args:
            key (str): Configuration key (e.g., 'flow.mode')
            value: Value to set
        """
        keys = key.split('.')
        config = self.config

        for k in keys[:-1]:
            if k not in config or not isinstance(config[k], dict):
                config[k] = {}
            config = config[k]

        config[keys[-1]] = value

    def override(self, overrides: Dict[str, Any]) -> "Config":
        """Apply dotted-key overrides, skipping None values (unset CLI flags)."""
        for key, value in overrides.items():
            if value is not None:
                self.set(key, value)
        self._normalize_flags()
        return self

    def seed(self, section: str, explicit: Optional[int] = None) -> int:
        """
        Resolve a seed: explicit value, then config, then FLOWMORPH_SEED, then 0.
        """
        if explicit is not None:
            return int(explicit)
        configured = self.get(f"{section}.seed")
        if configured is not None:
            return int(configured)
        env = os.environ.get(SEED_ENV_VAR)
        if env not in (None, ""):
            try:
                return int(env)
            except ValueError:
                raise ValueError(f"{SEED_ENV_VAR} must be an integer, got {env!r}")
        return 0

    def copy(self) -> "Config":
        clone = Config()
        clone.config = copy.deepcopy(self.config)
        return clone

    def save(self, file_path: str) -> None:
        """
        Save current configuration to YAML file.

        Args:
            file_path (str): Path to save configuration
        """
        with open(file_path, 'w', encoding='utf-8') as f:
            yaml.safe_dump(self.config, f, default_flow_style=False, indent=2)

    def to_dict(self) -> Dict[str, Any]:
        """Return configuration as dictionary."""
        return copy.deepcopy(self.config)


DEFAULT_CONFIG = Config()
