#!/usr/bin/env python3
"""
Tests for the torusstab command line.

Acceptance Criteria:
1. `validate` writes validate.json and exits 0 for the default parameters
2. Config errors exit 2 and name the problem on stderr
3. `all` runs every stage and exits with the worst code
4. A missing subcommand is a usage error
5. Grown leaves are reused from the cache and plot draws the displacement of h
"""

import json
from unittest.mock import MagicMock, patch

import pytest

from torusstab import __version__
from torusstab.cli import EXIT_FAILED, EXIT_OK, EXIT_USAGE, Pipeline, main, run_plot
from torusstab.config import RunConfig
from torusstab.errors import ConstructionError
from torusstab.manifolds import leaves_to_arrays
from torusstab.reporting import ReportWriter, SvgCanvas


class TestValidateCommand:
    """The validate subcommand on the default parameters."""

    def test_writes_report(self, tmp_path, capsys):
        """
        GIVEN the default configuration on a coarse grid
        WHEN `torusstab validate` runs
        THEN it exits 0, prints the checks and writes a passing validate.json
        """
        # Arrange
        out = tmp_path / "out"

        # Act
        code = main(["validate", "--out", str(out), "--grid", "20000"])

        # Assert
        assert code == EXIT_OK
        assert "✓ cone_aperture" in capsys.readouterr().out
        document = json.loads((out / "validate.json").read_text(encoding="utf-8"))
        assert document["report"]["pass"] is True

    def test_failing_constraint_exits_1(self, tmp_path):
        config = tmp_path / "run.cfg"
        config.write_text("rho = 0.001\ngrid = 5000\n", encoding="utf-8")
        assert main(["validate", "--config", str(config), "--out", str(tmp_path)]) == EXIT_FAILED


class TestConfigErrors:
    """Bad configuration is a usage error."""

    def test_unknown_key(self, tmp_path, capsys):
        # Arrange
        config = tmp_path / "run.cfg"
        config.write_text("bogus = 1\n", encoding="utf-8")

        # Act
        code = main(["validate", "--config", str(config), "--out", str(tmp_path)])

        # Assert
        assert code == EXIT_USAGE
        assert "bogus" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert main(["certify", "--config", str(tmp_path / "absent.cfg")]) == EXIT_USAGE

    def test_non_positive_override(self, tmp_path):
        assert main(["validate", "--grid", "0", "--out", str(tmp_path)]) == EXIT_USAGE


class TestAllCommand:
    """Stage aggregation."""

    def test_worst_code_wins(self, tmp_path, capsys):
        """
        GIVEN stages returning 0 and 1, and one raising a construction error
        WHEN `torusstab all` runs
        THEN every stage is attempted and the exit code is 1
        """
        # Arrange
        plot = MagicMock(return_value=EXIT_OK)
        with patch("torusstab.cli._pipeline", return_value=MagicMock()), \
                patch("torusstab.cli.run_certify", return_value=EXIT_OK), \
                patch("torusstab.cli.run_transversality", return_value=EXIT_FAILED), \
                patch("torusstab.cli.run_conjugacy", side_effect=ConstructionError("no crossing", stage="build_h_on_K")), \
                patch("torusstab.cli.run_plot", plot):
            # Act
            code = main(["all", "--out", str(tmp_path)])

        # Assert
        assert code == EXIT_FAILED
        plot.assert_called_once()
        assert "[build_h_on_K] no crossing" in capsys.readouterr().err


class TestParser:
    """Argument handling."""

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as excinfo:
            main(["--version"])
        assert excinfo.value.code == 0
        assert __version__ in capsys.readouterr().out

    def test_missing_command(self):
        with pytest.raises(SystemExit) as excinfo:
            main([])
        assert excinfo.value.code == 2


class TestArtifacts:
    """Cached leaves and the displacement figure."""

    def test_leaves_loaded_from_cache(self, tmp_path, default_map, leaves):
        """
        GIVEN leaves saved under the run's cache digest
        WHEN the pipeline asks for leaves
        THEN they are rebuilt from the cache without growing new ones
        """
        # Arrange
        writer = ReportWriter(tmp_path, digest="d1")
        writer.save_cache("leaves", **leaves_to_arrays(leaves))
        run = Pipeline(RunConfig(), writer)
        run.__dict__["f"] = default_map

        # Act
        with patch("torusstab.cli.approximate_Wu_gamma", side_effect=AssertionError("grown")):
            cached = run.leaves

        # Assert
        assert [leaf.origin for leaf in cached] == [leaf.origin for leaf in leaves]
        assert cached[0].dynamics is default_map

    def test_plot_draws_displacement(self, tmp_path, default_map):
        # Arrange
        writer = ReportWriter(tmp_path)
        writer.write_csv("h.csv", ["x_s", "x_t", "h_s", "h_t", "case"], [(0.1, 0.2, 0.1, 0.2, 0), (0.3, 0.1, 0.31, 0.1, 1)])
        run = MagicMock(f=default_map, writer=writer)
        run.config.output_dir = tmp_path

        # Act
        with patch("torusstab.cli._region_figure", return_value=SvgCanvas()), \
                patch("torusstab.cli._leaves_figure", return_value=SvgCanvas()):
            code = run_plot(run)

        # Assert
        assert code == EXIT_OK
        assert (tmp_path / "h_displacement.svg").exists()
