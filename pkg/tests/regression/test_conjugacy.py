#!/usr/bin/env python3
"""
Tests for the conjugacy construction between f and g = f o tau.

Acceptance Criteria:
1. S contains Gamma0 and the foliation atlas has a leaf through A
2. A perturbation of magnitude 0 gives the identity on K, B0 and the pull-back levels
3. A perturbation meeting the atlas is refused
4. Window placement honours every guard and names the one that blocks
5. Chunked evaluation over worker threads matches the serial result
6. The escape bound counts orbit points outside U and U' and fails at the cap
7. A small window on the forward orbit of S gives a nontrivial h that
   conjugates f to g and degrades with the window magnitude
"""

import math

import numpy as np
import pytest

from torusstab.conjugacy import (
    DirectionField,
    LeafNeighborhood,
    attracting_fixed_point,
    build_chi,
    build_h_on_K,
    build_leaf_map_H,
    conjugacy_residual,
    escape_bound,
    evaluate_chunks,
    extend_h_immediate_basin,
    extend_h_pullback,
    injectivity_violations,
    integral_line,
    k_preimages,
    place_window,
    saddle_neighborhood,
    window_guards,
)
from torusstab.errors import ConvergenceError, GuardViolation, PreconditionError
from torusstab.torus_endo import PerturbationWindow, TorusPoint, WindowGuard, perturb, torus_distance


@pytest.fixture(scope="module")
def fixed(default_map):
    return {fp.name: fp.point for fp in default_map.fixed_points()}


@pytest.fixture(scope="module")
def unperturbed(default_map):
    window = PerturbationWindow(center=TorusPoint(1.5, 0.33), radius=0.01, magnitude=0.0)
    return perturb(default_map, window)


class TestLeafNeighborhood:
    """S around the Gamma0 cover."""

    def test_contains_A_but_not_sink(self, neighborhood, fixed):
        a = fixed["A"]
        assert bool(neighborhood.contains(a.s, a.t)[0])
        assert not bool(neighborhood.contains(0.0, 0.0)[0])

    def test_s_bound_covers_A(self, neighborhood, fixed):
        assert neighborhood.s_bound >= abs(fixed["A"].s) + neighborhood.eps

    def test_k_preimages_of_A_include_A(self, default_map, neighborhood, fixed):
        # Act
        owner, ys, yt = k_preimages(default_map, neighborhood, fixed["A"].s, fixed["A"].t, 2)

        # Assert
        assert np.all(owner == 0)
        assert float(np.min(torus_distance(ys, yt, fixed["A"].s, fixed["A"].t))) < 1e-9


class TestFoliationAtlas:
    """Local unstable graphs over S."""

    def test_leaf_names(self, atlas):
        assert atlas.names[:2] == ["A", "-A"]
        assert all(name.startswith("chain@") for name in atlas.names[2:])

    def test_leaf_through_A(self, atlas, fixed):
        """
        GIVEN the atlas
        WHEN the leaf through A is located
        THEN it is the local unstable graph of A with zero offset
        """
        # Arrange
        a = fixed["A"]

        # Act
        index, offset = atlas.locate(a.s, a.t)

        # Assert
        assert atlas.names[int(index[0])] == "A"
        assert abs(float(offset[0])) < 1e-6

    def test_certificate_names(self, atlas):
        names = {c.name for c in atlas.certificates}
        assert {"S_injective", "S_disjoint_from_pieces", "foliation_disjoint", "foliation_transverse"} <= names

    def test_non_overlapping_graphs_are_disjoint(self, atlas):
        """
        GIVEN the default atlas
        WHEN its disjointness certificate is read
        THEN it passes with a finite margin
        """
        # Act
        cert = next(c for c in atlas.certificates if c.name == "foliation_disjoint")

        # Assert
        assert cert.passed
        assert math.isfinite(cert.margin)


class TestIdentityPerturbation:
    """g = f gives h = id at every stage."""

    @pytest.fixture(scope="class")
    def correspondence(self, default_map, unperturbed, atlas, leaves):
        return build_leaf_map_H(default_map, unperturbed, atlas, leaves)

    @pytest.fixture(scope="class")
    def h_on_K(self, default_map, unperturbed, correspondence, leaves, domain, pullback_depth, transversality):
        chi = build_chi(default_map, unperturbed, correspondence, domain, pullback_depth, samples=100)
        return build_h_on_K(
            default_map,
            unperturbed,
            domain,
            pullback_depth,
            correspondence,
            chi,
            samples=100,
            leaves=leaves,
            intersections=transversality.intersections,
        )

    @pytest.fixture(scope="class")
    def h_on_B0(self, default_map, unperturbed, h_on_K, domain, basin):
        return extend_h_immediate_basin(h_on_K, default_map, unperturbed, domain, basin, samples=200)

    def test_leaf_correspondence_is_identity(self, correspondence):
        assert correspondence.is_identity
        assert correspondence.distance_certificate(0.0).passed

    def test_h_on_K_is_identity(self, default_map, unperturbed, h_on_K):
        """
        GIVEN a window with magnitude 0
        WHEN h is built on K
        THEN every sample is fixed and the conjugacy residual vanishes
        """
        # Act
        report = conjugacy_residual([h_on_K], default_map, unperturbed)

        # Assert
        assert h_on_K.is_identity
        assert h_on_K.sup_displacement == 0.0
        assert report.sup_residual == 0.0
        assert report.passed

    def test_h_on_B0_is_identity(self, h_on_B0):
        # Assert
        assert h_on_B0.region == "B0"
        assert h_on_B0.is_identity
        assert all(check.passed for check in h_on_B0.certificates)

    def test_pullback_is_identity(self, default_map, unperturbed, h_on_B0, basin):
        """
        GIVEN h = id on B0
        WHEN it is pulled back two levels
        THEN every level keeps h = id and the residual report lists each level
        """
        # Act
        h = extend_h_pullback(h_on_B0, default_map, unperturbed, basin, depth=2, samples=100)
        report = conjugacy_residual([h_on_B0, h], default_map, unperturbed, evaluator=h.evaluator)

        # Assert
        assert h.is_identity
        assert set(np.unique(h.cases).tolist()) == {0, 1, 2}
        assert report.sup_residual == 0.0
        assert {"displacement_level_1", "displacement_level_2"} <= set(report.per_region["pullback"])

    def test_pullback_refuses_points_beyond_depth(self, default_map, unperturbed, h_on_B0, basin):
        # Arrange
        h = extend_h_pullback(h_on_B0, default_map, unperturbed, basin, depth=1, samples=10)
        i, j = np.argwhere(basin.mask(2))[0]

        # Act / Assert
        with pytest.raises(PreconditionError):
            h(basin.axis[i], basin.axis[j])

    def test_sink_is_fixed(self, unperturbed):
        assert attracting_fixed_point(unperturbed) == TorusPoint(0.0, 0.0)


class TestPerturbationAtAtlas:
    """Windows meeting the foliation atlas are refused."""

    def test_window_at_A_rejected(self, default_map, atlas, leaves, fixed):
        # Arrange
        g = perturb(default_map, PerturbationWindow(center=fixed["A"], radius=0.01, magnitude=1e-4))

        # Act / Assert
        with pytest.raises(PreconditionError):
            build_leaf_map_H(default_map, g, atlas, leaves)


class TestDirectionField:
    """Horizontal background of chi."""

    def test_empty_field_is_horizontal(self, default_map):
        # Arrange
        chi = DirectionField(
            anchors=np.zeros((0, 2)),
            angles=np.zeros(0),
            radius=0.02,
            partners=np.zeros(0, dtype=int),
            dynamics=default_map,
        )

        # Act
        s, t = integral_line(chi, 0.3, 0.2, 0.05)

        # Assert
        assert s == pytest.approx(0.35, abs=1e-12)
        assert t == 0.2
        assert not chi.influence(0.3, 0.2).any()

    def test_anchor_angle_is_exact(self, default_map):
        chi = DirectionField(
            anchors=np.array([[0.3, 0.2]]),
            angles=np.array([0.7]),
            radius=0.02,
            partners=np.array([-1]),
            dynamics=default_map,
        )
        assert float(chi.angle(0.3, 0.2)[0]) == 0.7
        assert float(chi.angle(1.0, 1.0)[0]) == 0.0


class TestWindowPlacement:
    """Guards on the perturbation window."""

    def test_unguarded_window_stays_put(self):
        window = place_window([], TorusPoint(1.5, 0.33), 0.01, 1e-3)
        assert window.center == TorusPoint(1.5, 0.33)

    def test_blocked_centre_moves_window(self):
        """
        GIVEN a guard on a thin strip through the requested centre
        WHEN the window is placed
        THEN it moves off the strip and no sample touches the guard
        """
        # Arrange
        guard = WindowGuard("strip", lambda s, t: np.abs(s - 1.5) < 0.005)

        # Act
        window = place_window([guard], TorusPoint(1.5, 0.33), 0.01, 1e-3)

        # Assert
        s, t = window.samples(21)
        assert window.center != TorusPoint(1.5, 0.33)
        assert not guard.contains(s, t).any()

    def test_everything_guarded_names_guard(self):
        guard = WindowGuard("everywhere", lambda s, t: np.ones(np.shape(s), dtype=bool))
        with pytest.raises(GuardViolation) as excinfo:
            place_window([guard], TorusPoint(1.5, 0.33), 0.01, 1e-3, search=1)
        assert excinfo.value.guard == "everywhere"

    def test_guard_names(self, default_map, domain, neighborhood, pullback_depth, basin):
        guards = window_guards(default_map, domain, neighborhood, pullback_depth, basin, L=np.array([[0.3, 0.2]]))
        assert [g.name for g in guards] == [
            "fundamental_domain",
            "S_f",
            "first_entry_to_K",
            "B0",
            "L",
        ]


class TestEvaluateChunks:
    """Threaded evaluation."""

    def test_jobs_match_serial(self):
        # Arrange
        points = np.column_stack([np.linspace(-1.0, 1.0, 101), np.linspace(0.0, 2.0, 101)])

        def evaluator(s, t):
            return 2.0 * s, t - s

        # Act
        serial = evaluate_chunks(evaluator, points, jobs=1)
        threaded = evaluate_chunks(evaluator, points, jobs=3)

        # Assert
        for a, b in zip(serial, threaded):
            assert np.array_equal(a, b)


class TestInjectivityViolations:
    """Sample pairs with coincident images."""

    def test_distinct_images(self):
        points = np.array([[0.0, 0.0], [1.0, 1.0]])
        assert injectivity_violations(points, points, mesh=1e-3).size == 0

    def test_collapsed_images(self):
        points = np.array([[0.0, 0.0], [1.0, 1.0]])
        images = np.array([[0.5, 0.5], [0.5, 0.5]])
        assert injectivity_violations(points, images, mesh=1e-3).tolist() == [[0, 1]]


class TestEscapeBound:
    """Orbit points outside U and U'."""

    def test_everything_in_U(self, default_map):
        def everywhere(s, t):
            return np.ones(np.shape(s), dtype=bool)

        assert escape_bound(default_map, everywhere, everywhere, grid=8) == 0

    def test_cap_exceeded(self, default_map):
        def nowhere(s, t):
            return np.zeros(np.shape(s), dtype=bool)

        with pytest.raises(ConvergenceError):
            escape_bound(default_map, nowhere, nowhere, grid=8, cap=5)

    def test_default_sets_bound_orbits(self, default_map, domain, neighborhood):
        """
        GIVEN U = D_r and U' = S together with the circle s = pi
        WHEN orbits of a coarse grid are followed
        THEN the count is finite and positive
        """
        # Arrange
        u_prime = saddle_neighborhood(neighborhood, 0.05)

        # Act
        bound = escape_bound(default_map, domain.in_square, u_prime, grid=16)

        # Assert
        assert 0 < bound < 10_000
        assert bool(u_prime(np.array([-math.pi]), np.array([1.0]))[0])


class TestLeafNeighborhoodConstruction:
    """eps widens S."""

    def test_larger_eps_contains_smaller(self, cover, fixed):
        narrow = LeafNeighborhood(cover, eps=0.01)
        wide = LeafNeighborhood(cover, eps=0.05)
        s = np.array([fixed["A"].s + 0.03])
        t = np.array([fixed["A"].t])
        assert bool(wide.contains(s, t)[0])
        assert wide.s_bound > narrow.s_bound


class TestPerturbedConjugacy:
    """A window in B0 crossed by the forward orbit of S."""

    @pytest.fixture(scope="class")
    def build(self, default_map, atlas, leaves, domain, pullback_depth, basin, neighborhood, transversality):
        guards = window_guards(default_map, domain, neighborhood, pullback_depth, basin, L=transversality.L)

        def conjugate(magnitude):
            window = place_window(guards, TorusPoint(1.4e-3, 0.07), 2e-3, magnitude)
            g = perturb(default_map, window, guards)
            correspondence = build_leaf_map_H(default_map, g, atlas, leaves)
            chi = build_chi(default_map, g, correspondence, domain, pullback_depth, samples=100)
            h_k = build_h_on_K(default_map, g, domain, pullback_depth, correspondence, chi, samples=100)
            h_b0 = extend_h_immediate_basin(h_k, default_map, g, domain, basin, samples=200)
            h = extend_h_pullback(h_b0, default_map, g, basin, depth=1, samples=100)
            return window, conjugacy_residual([h_k, h_b0, h], default_map, g, evaluator=h.evaluator)

        return conjugate

    @pytest.fixture(scope="class")
    def small(self, build):
        return build(1e-3)

    def test_window_is_admissible(self, small):
        window, _ = small
        assert window.radius == 2e-3
        assert float(np.max(torus_distance(window.center.s, window.center.t, 1.4e-3, 0.07))) < 0.05

    def test_h_is_nontrivial_and_conjugates(self, small):
        """
        GIVEN g = f o tau with tau supported on the descent of S towards p
        WHEN h is built on K, extended to B0 and pulled back one level
        THEN h moves some samples and g o h = h o f holds to 1e-6
        """
        # Act
        _, report = small

        # Assert
        assert report.sup_displacement > 0.0
        assert report.sup_displacement <= 5e-2
        assert report.sup_residual <= 1e-6
        assert report.passed

    def test_displacement_grows_with_magnitude(self, small, build):
        """
        GIVEN the same window at magnitudes 1e-3 and 2e-3
        WHEN h is built for each
        THEN the larger perturbation moves samples at least as far
        """
        # Act
        _, weak = small
        _, strong = build(2e-3)

        # Assert
        assert strong.sup_displacement >= weak.sup_displacement
        assert strong.passed
