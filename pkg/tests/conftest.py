"""
Pytest configuration for test suite.

Expensive objects (the map, the Gamma0 cover, grown leaves, basin levels)
are built once per session from the default parameters.
"""

import sys
from pathlib import Path

import pytest

# Add src to Python path so the package imports without installation
project_root = Path(__file__).parent.parent
src = project_root / "src"
if str(src) not in sys.path:
    sys.path.insert(0, str(src))

from torusstab.conjugacy import LeafNeighborhood, build_foliation  # noqa: E402
from torusstab.hyperbolicity import gamma0_cover  # noqa: E402
from torusstab.manifolds import basin_cover, choose_pullback_depth, fundamental_domain, sink_branch  # noqa: E402
from torusstab.torus_endo import build_map  # noqa: E402
from torusstab.transversality import approximate_Wu_gamma, strong_transversality_report  # noqa: E402


@pytest.fixture(scope="session")
def default_map():
    """f with the default parameters."""
    return build_map(grid=20_000)


@pytest.fixture(scope="session")
def cover(default_map):
    return gamma0_cover(default_map)


@pytest.fixture(scope="session")
def leaves(default_map, cover):
    return approximate_Wu_gamma(default_map, cover=cover)


@pytest.fixture(scope="session")
def basin(default_map):
    return basin_cover(default_map, levels=4)


@pytest.fixture(scope="session")
def transversality(default_map, leaves, basin, cover):
    return strong_transversality_report(default_map, leaves, basin, cover=cover)


@pytest.fixture(scope="session")
def domain(default_map, transversality, leaves, basin):
    """K with L in its interior, checked against the grown leaves."""
    return fundamental_domain(default_map, points=transversality.L, leaves=leaves, basin=basin)


@pytest.fixture(scope="session")
def neighborhood(cover):
    return LeafNeighborhood(cover=cover, eps=0.05)


@pytest.fixture(scope="session")
def pullback_depth(default_map, domain, leaves, cover, basin):
    return choose_pullback_depth(default_map, domain, sink_branch(leaves), cover, basin=basin)


@pytest.fixture(scope="session")
def atlas(default_map, cover, transversality):
    return build_foliation(default_map, cover, eps=0.05, intersections=transversality.intersections)
