#!/usr/bin/env python3
"""
Tests for certificates, report files and figures.

Acceptance Criteria:
1. A certificate passes iff its margin is finite and positive
2. JSON reports carry the schema version, and wall-clock data only under metadata
3. CSV floats are written with 12 significant digits
4. The artifact cache round-trips arrays and is disabled without a digest
5. SVG output is deterministic for identical input
"""

import json
import math

import numpy as np
import pytest

from torusstab.certificates import Certificate, CertificateReport, to_plain
from torusstab.reporting import SCHEMA_VERSION, ReportWriter, SvgCanvas, displacement_figure, format_float


class TestCertificate:
    """Margins, witnesses and reports."""

    @pytest.mark.parametrize("margin, passed", [(1e-12, True), (0.0, False), (-1.0, False), (math.nan, False)])
    def test_pass_iff_positive(self, margin, passed):
        assert Certificate.from_margin("check", margin).passed is passed

    def test_witness_made_plain(self):
        cert = Certificate.from_margin("check", 1.0, np.array([0.5, 0.25]), count=np.int64(3))
        assert cert.to_dict() == {
            "check": "check",
            "pass": True,
            "margin": 1.0,
            "worst_point": [0.5, 0.25],
            "details": {"count": 3},
        }

    def test_report_lookup(self):
        # Arrange
        report = CertificateReport(
            "demo", [Certificate.from_margin("good", 1.0), Certificate.from_margin("bad", -1.0)]
        )

        # Act / Assert
        assert not report.passed
        assert [c.name for c in report.failures] == ["bad"]
        assert report.get("good").passed
        with pytest.raises(KeyError):
            report.get("missing")

    def test_to_plain_nested(self):
        assert to_plain({"a": (np.float64(1.5), [np.int32(2)])}) == {"a": [1.5, [2]]}


class TestReportWriter:
    """Files under the output directory."""

    def test_json_layout(self, tmp_path):
        """
        GIVEN a writer keyed by a digest
        WHEN a payload with numpy values is written
        THEN the file holds the schema, the plain payload and the metadata block
        """
        # Arrange
        writer = ReportWriter(tmp_path / "out", digest="abc")

        # Act
        path = writer.write_json("report.json", {"value": np.float64(0.5)})

        # Assert
        document = json.loads(path.read_text(encoding="utf-8"))
        assert document["schema"] == SCHEMA_VERSION
        assert document["value"] == 0.5
        assert document["metadata"]["config_digest"] == "abc"
        assert set(document) == {"schema", "value", "metadata"}

    def test_csv_floats(self, tmp_path):
        # Arrange
        writer = ReportWriter(tmp_path)

        # Act
        path = writer.write_csv("data.csv", ["x", "n"], [(1.0 / 3.0, 2), (np.float64(2.5), 7)])

        # Assert
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines == ["x,n", "0.333333333333,2", "2.5,7"]

    def test_format_float(self):
        assert format_float(math.pi) == "3.14159265359"

    def test_cache_round_trip(self, tmp_path):
        writer = ReportWriter(tmp_path, digest="d1")
        writer.save_cache("cover", mask=np.array([[True, False]]), depth=np.array(4))
        data = writer.load_cache("cover")
        assert data["mask"].tolist() == [[True, False]]
        assert int(data["depth"]) == 4
        assert writer.load_cache("other") is None

    def test_cache_disabled_without_digest(self, tmp_path):
        writer = ReportWriter(tmp_path)
        writer.save_cache("cover", mask=np.zeros(2))
        assert writer.cache_path("cover") is None
        assert writer.load_cache("cover") is None
        assert not (tmp_path / "cache").exists()


class TestSvg:
    """Figures."""

    def test_polyline_split_at_wrap(self):
        # Arrange
        canvas = SvgCanvas()

        # Act
        canvas.polyline([3.0, 3.1, -3.1, -3.0], [0.0, 0.0, 0.0, 0.0])

        # Assert
        assert sum(item.startswith("<polyline") for item in canvas.items) == 2

    def test_render_is_deterministic(self):
        def draw():
            canvas = SvgCanvas(size=100)
            canvas.rect(-1.0, 1.0, -1.0, 1.0)
            canvas.dot(0.0, 0.0)
            canvas.text(0.5, 0.5, "A")
            return canvas.render()

        assert draw() == draw()
        assert draw().startswith('<svg xmlns="http://www.w3.org/2000/svg"')

    def test_displacement_figure_marks_fixed_samples(self):
        points = np.array([[0.0, 0.0], [0.1, 0.1]])
        images = np.array([[0.0, 0.0], [0.1, 0.2]])
        canvas = displacement_figure(points, images, size=100)
        assert [item.split(" ")[0] for item in canvas.items] == ["<circle", "<line"]
