"""
Run configuration for torusstab.

Reads UTF-8 key-value text files (one `key = value` per line, `#` starts a
comment) into a RunConfig with typed defaults.
"""

import hashlib
import logging
from pathlib import Path
from typing import Dict, Optional, Union

from torusstab.errors import ConfigError

logger = logging.getLogger(__name__)


# key -> (type, default)
_SCHEMA: Dict[str, tuple] = {
    "epsilon": (float, 0.01),
    "lambda": (float, 0.001),
    "delta": (float, 0.5),
    "s0": (float, 0.05),
    "s1": (float, 0.1),
    "rho": (float, 0.006),
    "grid": (int, 100_000),
    "box_resolution": (float, 2e-3),
    "depth": (int, 12),
    "cantor_depth": (int, 15),
    "mesh": (float, 1e-3),
    "arc_length": (float, 50.0),
    "seed_length": (float, 1e-6),
    "theta_min": (float, 1e-3),
    "basin_grid": (int, 256),
    "basin_iter": (int, 200),
    "escape_cap": (int, 10_000),
    "pullback_depth": (int, 3),
    "eps_s": (float, 0.05),
    "window_center_s": (float, 1.5),
    "window_center_t": (float, 0.33),
    "window_radius": (float, 0.01),
    "window_magnitude": (float, 0.0),
    "samples": (int, 400),
    "jobs": (int, 1),
    "seed": (int, 0),
}

_POSITIVE = (
    "grid", "box_resolution", "depth", "cantor_depth", "mesh", "arc_length",
    "seed_length", "theta_min", "basin_grid", "basin_iter", "escape_cap",
    "eps_s", "window_radius", "samples", "jobs",
)


class RunConfig:
    """Configuration for one torusstab run."""

    def __init__(self, **overrides):
        """
        Initialize configuration with defaults.

        Args:
            **overrides: Values replacing the defaults (keys as in the text format)

        Raises:
            ConfigError: If a key is unknown
        """
        self.values: Dict[str, Union[int, float]] = {
            key: default for key, (_, default) in _SCHEMA.items()
        }
        self.output_dir: Path = Path("out")
        for key, value in overrides.items():
            self.set(key, value)

    def __getattr__(self, name: str):
        values = self.__dict__.get("values")
        if values is not None and name in values:
            return values[name]
        if name == "lam":
            return values["lambda"]
        raise AttributeError(name)

    def set(self, key: str, value) -> None:
        """Set one key, converting to its declared type."""
        if key not in _SCHEMA:
            raise ConfigError(f"Unknown config key: {key}")
        kind = _SCHEMA[key][0]
        try:
            if kind is int:
                number = float(value)
                if number != int(number):
                    raise ValueError(value)
                self.values[key] = int(number)
            else:
                self.values[key] = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"Invalid value for {key}: {value!r}")

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        """
        Parse key-value text.

        Args:
            text: Config file contents

        Returns:
            Parsed RunConfig (not yet validated)

        Raises:
            ConfigError: On malformed lines, unknown keys or bad values
        """
        config = cls()
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"Line {number}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key or not value:
                raise ConfigError(f"Line {number}: empty key or value")
            config.set(key, value)
        return config

    @classmethod
    def load(cls, path: Optional[Path]) -> "RunConfig":
        """
        Load a config file, or the defaults when path is None.

        Raises:
            ConfigError: If the file is missing or not valid UTF-8
        """
        if path is None:
            return cls()
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        try:
            text = path.read_text(encoding="utf-8")
        except UnicodeDecodeError as e:
            raise ConfigError(f"Config file is not UTF-8: {e}")
        logger.info(f"Loaded config from {path}")
        return cls.from_text(text)

    def validate(self) -> None:
        """
        Check tolerances and sizes are positive and the map parameters are usable.

        Map-parameter inequalities are certified by validate_example_constraints;
        here only values that would make construction meaningless are rejected.

        Raises:
            ConfigError: On the first invalid value
        """
        for key in _POSITIVE:
            if self.values[key] <= 0:
                raise ConfigError(f"{key} must be positive, got {self.values[key]}")
        for key in ("epsilon", "lambda", "delta", "s0", "s1", "rho"):
            if self.values[key] <= 0:
                raise ConfigError(f"{key} must be positive, got {self.values[key]}")
        if self.values["window_magnitude"] < 0:
            raise ConfigError("window_magnitude must be non-negative")
        if self.values["pullback_depth"] < 0:
            raise ConfigError("pullback_depth must be non-negative")

    def map_params(self):
        """Build MapParams from the config."""
        from torusstab.circle_maps import MapParams

        return MapParams.create(
            epsilon=self.epsilon,
            lam=self.lam,
            delta=self.delta,
            s0=self.s0,
            s1=self.s1,
            rho=self.rho,
        )

    def to_text(self) -> str:
        """Canonical key-value text (sorted keys, repr floats)."""
        return "".join(f"{key} = {self.values[key]!r}\n" for key in sorted(self.values))

    def digest(self) -> str:
        """sha256 of the canonical text, used as the artifact-cache key."""
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()
