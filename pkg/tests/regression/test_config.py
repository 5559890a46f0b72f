#!/usr/bin/env python3
"""
Tests for the key-value run configuration.

Acceptance Criteria:
1. Defaults match the documented example parameters
2. Config files accept comments and blank lines and reject malformed lines
3. Unknown keys and ill-typed values raise ConfigError
4. validate() rejects non-positive tolerances and sizes
5. The digest depends only on the values
"""

import pytest

from torusstab.config import RunConfig
from torusstab.errors import ConfigError


class TestDefaults:
    """Built-in values."""

    def test_example_parameters(self):
        config = RunConfig()
        assert (config.epsilon, config.lam, config.delta) == (0.01, 0.001, 0.5)
        assert (config.s0, config.s1, config.rho) == (0.05, 0.1, 0.006)
        assert config.window_magnitude == 0.0

    def test_map_params(self):
        params = RunConfig().map_params()
        assert params.sigma == pytest.approx(0.01 * 0.479425538604203 / 0.999)

    def test_unknown_attribute(self):
        with pytest.raises(AttributeError):
            RunConfig().nonexistent


class TestFromText:
    """Parsing key-value text."""

    def test_comments_and_blank_lines(self):
        """
        GIVEN text with a comment line, a trailing comment and a blank line
        WHEN parsed
        THEN only the assignments are applied, with their declared types
        """
        # Arrange
        text = "# run settings\n\ngrid = 5000  # coarse\nwindow_magnitude = 1e-4\n"

        # Act
        config = RunConfig.from_text(text)

        # Assert
        assert config.grid == 5000 and isinstance(config.grid, int)
        assert config.window_magnitude == 1e-4

    def test_integer_written_as_float(self):
        assert RunConfig.from_text("depth = 8.0").depth == 8

    @pytest.mark.parametrize(
        "text",
        ["grid 5000", "= 3", "grid =", "bogus = 1", "grid = 1.5", "mesh = fine"],
    )
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text)


class TestLoad:
    """Reading config files."""

    def test_none_gives_defaults(self):
        assert RunConfig.load(None).to_text() == RunConfig().to_text()

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            RunConfig.load(tmp_path / "absent.cfg")

    def test_not_utf8(self, tmp_path):
        # Arrange
        path = tmp_path / "bad.cfg"
        path.write_bytes(b"grid = \xff\xfe\n")

        # Act / Assert
        with pytest.raises(ConfigError):
            RunConfig.load(path)

    def test_file_values(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("rho = 0.008\njobs = 4\n", encoding="utf-8")
        config = RunConfig.load(path)
        assert config.rho == 0.008
        assert config.jobs == 4


class TestValidate:
    """Value checks."""

    def test_defaults_are_valid(self):
        RunConfig().validate()

    @pytest.mark.parametrize("key", ["grid", "mesh", "theta_min", "jobs", "epsilon"])
    def test_non_positive_rejected(self, key):
        config = RunConfig()
        config.set(key, 0)
        with pytest.raises(ConfigError):
            config.validate()

    def test_negative_magnitude_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(window_magnitude=-1e-4).validate()


class TestDigest:
    """Cache keys."""

    def test_same_values_same_digest(self):
        assert RunConfig(grid=5000).digest() == RunConfig.from_text("grid = 5000").digest()

    def test_changed_value_changes_digest(self):
        assert RunConfig(grid=5000).digest() != RunConfig().digest()

    def test_text_reparses_to_same_values(self):
        config = RunConfig(window_magnitude=2.5e-4, depth=9)
        assert RunConfig.from_text(config.to_text()).values == config.values
