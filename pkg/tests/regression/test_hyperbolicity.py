#!/usr/bin/env python3
"""
Tests for the Axiom A certificates.

Acceptance Criteria:
1. f is a covering map (first-coordinate partial positive everywhere)
2. The cone field is invariant and expanded on both components of R
3. The Gamma0 cover is forward invariant and holds A and -A
4. K1 intervals contract by more than a half per level
5. The assembled report passes for the default parameters
"""

import math

import numpy as np
import pytest

from torusstab.errors import PreconditionError
from torusstab.hyperbolicity import (
    ConeParams,
    Rectangle,
    cantor_cover,
    certify_axiomA,
    certify_cone_field,
    certify_covering,
    certify_horizontal_contraction,
    certify_injectivity_gamma0,
    forward_defect,
    region_components,
)


class TestRectangle:
    """Region rectangles."""

    def test_empty_rectangle_rejected(self):
        with pytest.raises(PreconditionError):
            Rectangle(1.0, 1.0, 0.0, 1.0)

    def test_wider_than_pi_rejected(self):
        with pytest.raises(PreconditionError):
            Rectangle(0.0, 4.0, 0.0, 1.0)

    def test_components_of_R(self, default_map):
        regions = region_components(default_map)
        p = default_map.params
        assert regions["R+"].t_lo == p.delta
        assert regions["R-"].t_hi == -p.delta
        assert regions["R+"].s_hi == p.s0


class TestLocalCertificates:
    """Covering, cone field and horizontal contraction."""

    def test_covering(self, default_map):
        cert = certify_covering(default_map, grid=200)
        assert cert.passed
        assert cert.details["samples"] == 40_000

    @pytest.mark.parametrize("name", ["R+", "R-"])
    def test_cone_field(self, default_map, name):
        # Arrange
        region = region_components(default_map)[name]
        cone = ConeParams(rho=default_map.params.rho)

        # Act
        cert = certify_cone_field(default_map, cone, region, grid=100)

        # Assert
        assert cert.passed, cert.details
        assert cert.details["worst_ratio"] < cone.rho

    @pytest.mark.parametrize("name", ["R+", "R-"])
    def test_horizontal_contraction(self, default_map, name):
        cert = certify_horizontal_contraction(default_map, region_components(default_map)[name], grid=100)
        assert cert.passed
        assert cert.details["max_a21"] == 0.0

    def test_region_outside_R_is_precondition_error(self, default_map):
        outside = Rectangle(1.0, 1.5, 1.0, 1.5)
        with pytest.raises(PreconditionError):
            certify_cone_field(default_map, ConeParams(rho=0.006), outside)


class TestGamma0Cover:
    """Box cover of the saddle piece."""

    def test_forward_invariant(self, default_map, cover):
        assert forward_defect(default_map, cover) == 0

    def test_holds_A_and_minus_A(self, default_map, cover):
        fixed = {fp.name: fp.point for fp in default_map.fixed_points()}
        for name in ("A", "-A"):
            assert bool(cover.contains(fixed[name].s, fixed[name].t)), name

    def test_gap_column_is_empty(self, cover):
        assert not cover.mask[:, cover.gap_column].any()

    def test_injectivity_on_cover(self, default_map, cover):
        cert = certify_injectivity_gamma0(default_map, cover)
        assert cert.passed
        assert cert.details["violating_boxes"] == 0


class TestCantorCover:
    """Interval covers of K1."""

    @pytest.fixture(scope="class")
    def cantor(self, default_map):
        return cantor_cover(default_map.f2, default_map.params.delta, depth=6)

    def test_doubling_counts(self, cantor):
        assert [cantor.count(d) for d in range(7)] == [1, 2, 4, 8, 16, 32, 64]

    def test_contraction_below_half(self, cantor):
        for depth in range(1, 7):
            assert np.all(cantor.contraction_ratios(depth) < 0.5)

    def test_membership(self, default_map, cantor):
        """
        GIVEN the interval cover of K1
        WHEN fixed points of f2 are tested
        THEN delta belongs to K1 while the sink 0 and its preimage pi do not
        """
        # Act
        hit = cantor.contains(np.array([default_map.params.delta, 0.0, math.pi]))

        # Assert
        assert hit.tolist() == [True, False, False]


class TestAxiomA:
    """The assembled report."""

    def test_report_passes(self, default_map):
        # Act
        report, cover, cantor = certify_axiomA(default_map, grid=200, cone_grid=100, cantor_depth=8)

        # Assert
        assert report.passed, [c.name for c in report.certificates.failures]
        assert [piece.name for piece in report.pieces] == ["p", "C", "K", "Gamma0"]
        assert cover.count > 0
        assert cantor.depth == 8

    def test_report_serializes(self, default_map):
        report, _, _ = certify_axiomA(default_map, grid=100, cone_grid=50, cantor_depth=4)
        data = report.to_dict()
        assert data["pass"] is True
        assert {c["check"] for c in data["certificates"]["checks"]} >= {"covering", "saddle_C", "fixed_A"}
