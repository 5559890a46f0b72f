#!/usr/bin/env python3
"""
Tests for the crossing set I1 and the strong transversality report.

Acceptance Criteria:
1. W^u(Gamma0) is approximated by both branches at A and -A plus chain leaves
2. Crossings lie in B0, are transverse and carry consistent tangents
3. L is I1 pushed into B0 and misses its own image
4. The report passes for the default parameters, including the two-branch
   and nonwandering checks
5. Crossings and L are symmetric under (s, t) -> (-s, -t) and stable under mesh refinement
"""

import math

import numpy as np
import pytest

from torusstab.transversality import (
    IntersectionPoint,
    approximate_Wu_gamma,
    compute_L,
    detect_I1,
    outside_nonwandering_check,
    tangent_signs_check,
    two_branches_check,
    verify_L_disjoint,
)


def _crossing(s, t, a, b):
    return IntersectionPoint(
        s=s, t=t, leaf_a="A+", leaf_b="-A-", angle=0.5,
        tangent_a=a, tangent_b=b, preimage_a=(0.0, 0.0), preimage_b=(0.0, 0.0),
        residual=0.0, tangent_error=0.0,
    )


class TestLeaves:
    """The approximation of W^u(Gamma0)."""

    def test_origins(self, leaves):
        origins = [leaf.origin for leaf in leaves]
        assert origins[:4] == ["A+", "A-", "-A+", "-A-"]
        assert len(origins) == 5 and origins[4].startswith("chain@")


class TestStrongTransversality:
    """The report on the default map."""

    def test_report_passes(self, transversality):
        assert transversality.passed, [c.name for c in transversality.certificates.failures]
        assert transversality.intersections

    def test_crossings_in_B0_and_transverse(self, transversality, basin):
        """
        GIVEN the detected crossings
        WHEN checked against the basin levels and the angle floor
        THEN every one sits in B0 with an angle above theta_min
        """
        # Arrange
        points = transversality.intersections
        s = np.array([p.s for p in points])
        t = np.array([p.t for p in points])

        # Act
        inside = basin.contains(s, t, level=0)

        # Assert
        assert np.all(inside)
        assert min(p.angle for p in points) >= transversality.theta_min

    def test_L_has_one_point_per_crossing(self, transversality):
        assert transversality.L.shape == (len(transversality.intersections), 2)

    def test_serializes(self, transversality):
        data = transversality.to_dict()
        assert data["pass"] is True
        assert set(data["intersections"][0]) == {"s", "t", "leaves", "angle", "tangents", "preimages"}

    def test_branch_and_nonwandering_checks(self, transversality):
        """
        GIVEN the report on the default map
        WHEN its certificates are listed
        THEN the two-branch and nonwandering checks are present and pass
        """
        # Act
        checks = {c.name: c for c in transversality.certificates}

        # Assert
        assert checks["two_branches"].passed
        assert checks["I1_outside_Omega"].passed
        assert checks["no_tangential_crossings"].passed

    def test_preimages_in_B1_and_B0(self, transversality, basin):
        for p in transversality.intersections:
            assert basin.level_of(*p.preimage_a) == 1
            assert basin.level_of(*p.preimage_b) == 0


class TestTangentSigns:
    """Opposite first components, positive second components."""

    def test_opposite_signs_pass(self):
        cert = tangent_signs_check([_crossing(0.1, 0.2, (0.3, 0.9), (-0.2, 0.95))])
        assert cert.passed
        assert cert.margin == pytest.approx(0.2)

    def test_same_signs_fail(self):
        assert not tangent_signs_check([_crossing(0.1, 0.2, (0.3, 0.9), (0.2, 0.95))]).passed

    def test_empty_set_fails(self):
        assert not tangent_signs_check([]).passed


class TestL:
    """Crossings pushed into B0."""

    def test_level_one_point_is_pushed_once(self, default_map, basin):
        # Arrange
        i, j = np.argwhere(basin.mask(1))[0]
        s, t = float(basin.axis[i]), float(basin.axis[j])

        # Act
        L = compute_L(default_map, [_crossing(s, t, (0.1, 1.0), (-0.1, 1.0))], basin)

        # Assert
        fs, ft = default_map.eval(s, t)
        assert np.allclose(L, [[float(fs), float(ft)]], atol=1e-15)

    def test_disjoint_from_image(self, default_map):
        cert = verify_L_disjoint(default_map, np.array([[0.3, 0.2]]))
        assert cert.passed

    def test_fixed_point_is_not_disjoint(self, default_map):
        assert not verify_L_disjoint(default_map, np.array([[0.0, 0.0]])).passed

    def test_empty_L_passes(self, default_map):
        """
        GIVEN no crossings to push
        WHEN L is checked against its image
        THEN the vacuous check passes with a finite margin
        """
        # Act
        cert = verify_L_disjoint(default_map, np.zeros((0, 2)))

        # Assert
        assert cert.passed
        assert math.isfinite(cert.margin)
        assert cert.details["points"] == 0


class TestCrossingChecks:
    """Branch count and distance from the nonwandering set."""

    def test_crossing_on_A_is_in_Omega(self, default_map, cover):
        # Arrange
        a = next(fp.point for fp in default_map.fixed_points() if fp.name == "A")

        # Act
        cert = outside_nonwandering_check(default_map, [_crossing(a.s, a.t, (0.1, 1.0), (-0.1, 1.0))], cover=cover)

        # Assert
        assert not cert.passed
        assert list(cert.witness) == pytest.approx(list(a.as_tuple()))

    def test_crossing_away_from_pieces_passes(self, default_map, cover):
        cert = outside_nonwandering_check(default_map, [_crossing(0.3, 0.2, (0.1, 1.0), (-0.1, 1.0))], cover=cover)
        assert cert.passed

    def test_unrelated_preimages_fail(self, default_map, basin):
        """
        GIVEN a crossing whose recorded leaf preimages are not preimages of it
        WHEN the two branches are checked
        THEN the check fails at that crossing
        """
        # Arrange
        point = _crossing(0.3, 0.2, (0.1, 1.0), (-0.1, 1.0))

        # Act
        cert = two_branches_check(default_map, [point], basin)

        # Assert
        assert not cert.passed
        assert list(cert.witness) == [0.3, 0.2]


class TestSymmetry:
    """The map is odd, so I1 and L are too."""

    @pytest.fixture(scope="class")
    def symmetric(self, default_map, leaves, basin):
        points, failures = detect_I1(default_map, leaves[:4], basin)
        return points, failures

    def test_crossings_are_odd(self, symmetric):
        """
        GIVEN crossings of the branches at A and -A
        WHEN each is reflected through the origin
        THEN a crossing sits at the reflection
        """
        # Arrange
        points, failures = symmetric
        z = np.array([(p.s, p.t) for p in points])

        # Act
        reflected = -z

        # Assert
        assert not failures
        assert len(z) > 0
        for q in reflected:
            assert float(np.min(np.max(np.abs(z - q), axis=1))) < 1e-6

    def test_L_is_odd(self, default_map, basin, symmetric):
        # Arrange
        points, _ = symmetric

        # Act
        L = compute_L(default_map, points, basin)

        # Assert
        for q in -L:
            assert float(np.min(np.max(np.abs(L - q), axis=1))) < 1e-6

    def test_count_stable_under_finer_mesh(self, default_map, basin, symmetric):
        """
        GIVEN the branches regrown at half the mesh
        WHEN crossings are detected again
        THEN the same number of crossings is found at the same places
        """
        # Arrange
        points, _ = symmetric
        fine = approximate_Wu_gamma(default_map, mesh=5e-4)

        # Act
        refined, failures = detect_I1(default_map, fine, basin, mesh=5e-4)

        # Assert
        assert not failures
        assert len(refined) == len(points)
        z = np.array([(p.s, p.t) for p in points])
        for p in refined:
            assert float(np.min(np.max(np.abs(z - (p.s, p.t)), axis=1))) < 1e-6
