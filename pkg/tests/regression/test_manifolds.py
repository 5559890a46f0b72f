#!/usr/bin/env python3
"""
Tests for unstable leaves, the basin of p and the fundamental domain K.

Acceptance Criteria:
1. Unstable directions are found at saddles and refused elsewhere
2. Grown leaves respect the mesh and the arc length, and every vertex is
   the stated iterate of its seed parameter
3. Basin levels are consistent with the dynamics
4. K is bounded by the square and its image; orbits in B0 cross it once
5. W^u(Gamma0) reaches the basin of p
6. The dilated leaves and the sink form a set N with f(N) inside N
7. L lies in the interior of K and sampled leaf orbits enter D_r through K
8. Local unstable leaves converge under the graph transform inside the cone
9. Grown leaves survive a round trip through the array cache
"""

import math

import numpy as np
import pytest

from torusstab.errors import ConstructionError, PreconditionError
from torusstab.manifolds import (
    _grown_interior,
    attracting_set_check,
    backward_chain,
    backward_levels,
    basic_piece_order,
    basin_cover,
    cover_distance,
    fundamental_domain,
    grow_unstable_fixed,
    leaves_from_arrays,
    leaves_to_arrays,
    local_unstable_in_cover,
    orbit_hits,
    polyline_gaps,
    sink_branch,
    unstable_direction,
)
from torusstab.torus_endo import TorusPoint


@pytest.fixture(scope="module")
def fixed(default_map):
    return {fp.name: fp for fp in default_map.fixed_points()}


class TestUnstableDirection:
    """Eigen-directions at fixed points."""

    def test_A_expands_along_t(self, default_map, fixed):
        # Act
        mu, v = unstable_direction(default_map, fixed["A"].point)

        # Assert
        assert mu == pytest.approx(float(default_map.f2.derivative(default_map.params.delta)))
        assert v[1] > 0.99

    def test_C_expands_along_s(self, default_map, fixed):
        mu, v = unstable_direction(default_map, fixed["C"].point)
        assert mu > 1.0
        assert v == pytest.approx((1.0, 0.0), abs=1e-9)

    def test_sink_has_no_unstable_direction(self, default_map):
        with pytest.raises(PreconditionError):
            unstable_direction(default_map, TorusPoint(0.0, 0.0))


class TestGrowUnstableFixed:
    """Leaves tiled by images of a fundamental segment."""

    @pytest.fixture(scope="class")
    def branches(self, default_map, fixed):
        return grow_unstable_fixed(default_map, fixed["A"], arc_length=2.0, mesh=1e-2)

    def test_branch_names(self, branches):
        assert [b.origin for b in branches] == ["A+", "A-"]
        assert all(b.piece == "Gamma0" for b in branches)

    def test_mesh_and_length(self, branches):
        for leaf in branches:
            assert np.max(polyline_gaps(leaf.s, leaf.t)) <= 1e-2 + 1e-12
            assert leaf.length <= 2.0 + 1e-9

    def test_vertices_are_iterates_of_seed(self, branches):
        """
        GIVEN a grown branch
        WHEN vertices are recomputed from their seed parameters
        THEN they reproduce the stored vertices
        """
        # Arrange
        leaf = branches[0]

        # Act
        s, t = leaf.point_at(leaf.params, leaf.chunks)

        # Assert
        assert np.allclose(s, leaf.s, atol=1e-12)
        assert np.allclose(t, leaf.t, atol=1e-12)

    def test_starts_at_fixed_point(self, branches, fixed):
        a = fixed["A"].point
        for leaf in branches:
            assert abs(leaf.s[0] - a.s) < 1e-5 and abs(leaf.t[0] - a.t) < 1e-5


class TestBasinCover:
    """Levels of the basin of p on a grid."""

    def test_sink_cell_is_level_zero(self, basin):
        assert basin.level_of(0.0, 0.0) == 0
        assert bool(basin.contains(0.0, 0.0, level=0))

    def test_level_one_maps_to_level_zero(self, basin):
        # Arrange
        flat = basin.levels.ravel()

        # Act
        image_levels = flat[basin.image_cell.ravel()[flat == 1]]

        # Assert
        assert image_levels.size > 0
        assert np.all(image_levels == 0)

    def test_repelling_point_is_not_an_attractor(self, default_map):
        with pytest.raises(PreconditionError):
            basin_cover(default_map, attractor=TorusPoint(-math.pi, 0.0), grid=16)


class TestFundamentalDomain:
    """K = D_r minus f(D_r)."""

    def test_radius_inside_limits(self, default_map, domain):
        p = default_map.params
        assert 0.0 < domain.radius < min(p.s0, p.delta)

    def test_image_of_square_inside_square(self, domain):
        assert np.all(domain.in_square(domain.inner[:, 0], domain.inner[:, 1], open_=True))

    def test_membership(self, domain):
        assert np.all(domain.contains(domain.outer[:, 0], domain.outer[:, 1]))
        assert not bool(domain.contains(0.0, 0.0))

    def test_orbits_cross_K_once(self, default_map, domain):
        """
        GIVEN points of B0 outside D_r
        WHEN their orbits are followed to p
        THEN each passes through K exactly once
        """
        # Arrange
        s = np.array([0.3, -1.0, 2.0])
        t = np.array([0.2, 0.4, -0.3])

        # Act
        hits = orbit_hits(default_map, domain, s, t)

        # Assert
        assert hits.tolist() == [1, 1, 1]

    def test_points_outside_basin_rejected(self, default_map):
        with pytest.raises(ConstructionError):
            fundamental_domain(default_map, points=np.array([[1.0, 1.0]]))

    def test_backward_levels_cover_preimages(self, default_map, domain):
        levels = backward_levels(default_map, domain, 2, grid=48)
        assert [level.j for level in levels] == [1, 2]
        assert all(level.mask.any() for level in levels)

    def test_L_inside_K(self, domain, transversality):
        """
        GIVEN the pushed crossing set L
        WHEN K is built with L as its required points
        THEN every point of L lies strictly inside K
        """
        # Arrange
        L = transversality.L

        # Act
        distance = domain.boundary_distance(L[:, 0], L[:, 1])

        # Assert
        assert len(L) > 0
        assert np.all(domain.contains(L[:, 0], L[:, 1]))
        assert float(np.min(distance)) > 0.0

    def test_leaf_orbits_enter_through_K(self, domain):
        assert domain.entries > 0

    def test_points_meeting_their_image_rejected(self, default_map):
        with pytest.raises(PreconditionError):
            fundamental_domain(default_map, points=np.array([[0.0, 0.0], [0.3, 0.2]]))


class TestGlobalStructure:
    """Pullback depth, the attracting set and the order of pieces."""

    def test_pullback_depth_in_range(self, pullback_depth):
        assert 1 <= pullback_depth <= 40

    def test_sink_branch_ends_near_p(self, leaves):
        leaf = sink_branch(leaves)
        assert leaf.origin in {"A-", "-A-"}
        assert math.hypot(leaf.s[-1], leaf.t[-1]) < 1e-2

    def test_A_lies_in_cover(self, cover, fixed):
        a = fixed["A"].point
        assert float(cover_distance(cover, a.s, a.t)[0]) < 1e-12

    def test_fixed_points_alone_are_not_attracting(self, default_map, fixed):
        cert = attracting_set_check(default_map, [], list(fixed.values()), include_leaves=False)
        assert not cert.passed
        assert cert.details["escaped"] > 0

    def test_sink_alone_is_attracting(self, default_map, fixed):
        cert = attracting_set_check(default_map, [], [fixed["p"]], include_leaves=False)
        assert cert.passed
        assert cert.details["escaped"] == 0

    def test_leaves_and_sink_are_attracting(self, default_map, leaves, fixed):
        """
        GIVEN the grown leaves of W^u(Gamma0) and the sink p
        WHEN N is the dilation of both and f(N) is compared with the same N
        THEN no pushed cell escapes
        """
        # Act
        cert = attracting_set_check(default_map, leaves, [fixed["p"]])

        # Assert
        assert cert.passed
        assert cert.details["escaped"] == 0
        assert cert.details["cells"] > 25

    def test_truncated_generations_are_not_pushed(self, leaves):
        # Arrange
        tiled = [leaf for leaf in leaves if leaf.span is not None]

        # Act / Assert
        for leaf in tiled:
            interior = _grown_interior(leaf)
            assert interior.any()
            assert not interior[leaf.chunks >= leaf.iterate - 1].any()
        assert not any(_grown_interior(leaf).any() for leaf in leaves if leaf.span is None)

    def test_gamma0_reaches_sink(self, default_map, leaves):
        assert ("Gamma0", "p") in basic_piece_order(default_map, leaves)


class TestLocalUnstable:
    """Graph transform along a backward chain of cover boxes."""

    @pytest.fixture(scope="class")
    def local(self, default_map, cover):
        boxes = cover.boxes()
        upper = boxes[boxes[:, 2] > 0]
        centres = 0.5 * (upper[:, 2] + upper[:, 3])
        end = upper[int(np.argmin(np.abs(centres - 1.0)))]
        chain = backward_chain(default_map, cover, end, 8)
        return local_unstable_in_cover(default_map, chain, length=0.5 * (end[3] - end[2]))

    def test_graphs_converge(self, local):
        """
        GIVEN a chain of nine boxes
        WHEN the graph transform is run from each starting box
        THEN longer chains agree to 1e-9 and the shortest chains differ most
        """
        # Act
        _, changes = local

        # Assert
        assert len(changes) == 8
        assert changes[0] < 1e-9
        assert changes[-1] > changes[-2]

    def test_tangents_in_cone(self, default_map, local):
        leaf, _ = local
        ratio = np.abs(leaf.tangents[:, 0]) / np.abs(leaf.tangents[:, 1])
        assert float(np.max(ratio)) <= default_map.params.rho


class TestLeafArrays:
    """Leaves flattened for the artifact cache."""

    def test_round_trip_recomputes_vertices(self, default_map, leaves):
        """
        GIVEN the grown leaves of W^u(Gamma0)
        WHEN they are flattened to arrays and rebuilt
        THEN names and vertices survive and seeds still reproduce the vertices
        """
        # Arrange
        arrays = leaves_to_arrays(leaves)

        # Act
        rebuilt = leaves_from_arrays(default_map, arrays)

        # Assert
        assert [leaf.origin for leaf in rebuilt] == [leaf.origin for leaf in leaves]
        for old, new in zip(leaves, rebuilt):
            assert np.array_equal(old.vertices, new.vertices)
            assert np.array_equal(old.chunks, new.chunks)
            pick = slice(0, 50)
            s, t = new.point_at(new.params[pick], new.chunks[pick])
            assert np.allclose(s, old.s[pick], atol=1e-9)
            assert np.allclose(t, old.t[pick], atol=1e-9)
