"""
Conjugacy between f and a perturbation g = f o tau.

The unstable foliation over a neighbourhood S of Gamma0 is carried by an
atlas of local unstable graphs s = gamma(t); the foliation leaf through a
point of S is the translate of the nearest graph covering its t. The
homeomorphism h is built on samples of the fundamental domain K by
counting k-fold preimages in S, then pushed to the immediate basin B0 by
orbit walks and to the first preimage levels of B0 by nearest preimages.

Wherever the orbits involved never enter the perturbation window, g and f
agree bit for bit, and h is set to the identity there exactly.
"""

import concurrent.futures
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq, root
from scipy.spatial import cKDTree

from torusstab.certificates import Certificate, to_plain
from torusstab.circle_maps import TWO_PI, circle_difference, wrap
from torusstab.errors import ConstructionError, ConvergenceError, GuardViolation, PreconditionError
from torusstab.hyperbolicity import BoxCover
from torusstab.manifolds import (
    BasinCover,
    FundamentalDomain,
    Leaf,
    backward_chain,
    cover_distance,
    local_unstable_in_cover,
)
from torusstab.torus_endo import (
    PerturbationWindow,
    TorusPoint,
    WindowGuard,
    torus_distance,
)
from torusstab.transversality import IntersectionPoint

logger = logging.getLogger(__name__)

WALK_CAP = 500
RK4_STEP = 1e-3
ROOT_TOL = 1e-12
BOUNDARY_TOL = 1e-8


def _amplitude(g) -> float:
    return float(getattr(g, "amplitude", 0.0))


def _displaced(g, s, t) -> np.ndarray:
    """True where tau moves the point."""
    s = np.asarray(s, dtype=float)
    if _amplitude(g) == 0.0:
        return np.zeros(s.shape, dtype=bool)
    ds, dt = g.displacement(s, t)
    return (np.asarray(ds) != 0.0) | (np.asarray(dt) != 0.0)


def _same(a_s, a_t, b_s, b_t) -> np.ndarray:
    return (np.asarray(a_s) == np.asarray(b_s)) & (np.asarray(a_t) == np.asarray(b_t))


def evaluate_chunks(evaluator: Callable, points: np.ndarray, jobs: int = 1) -> Tuple[np.ndarray, ...]:
    """Evaluate on the rows of `points`, split over `jobs` worker threads; results in input order."""
    if jobs <= 1 or len(points) < 2 * jobs:
        return tuple(evaluator(points[:, 0], points[:, 1]))
    chunks = np.array_split(np.arange(len(points)), jobs)
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as executor:
        futures = [executor.submit(evaluator, points[c, 0], points[c, 1]) for c in chunks]
        parts = [future.result() for future in futures]
    return tuple(np.concatenate([part[i] for part in parts]) for i in range(len(parts[0])))


# The neighbourhood S and its foliation


@dataclass(frozen=True, eq=False)
class LeafNeighborhood:
    """S: the points within eps of the Gamma0 cover, in the metric of cover_distance."""

    cover: BoxCover
    eps: float

    @property
    def s_bound(self) -> float:
        """Largest |s| over S."""
        boxes = self.cover.boxes()
        return float(np.max(np.abs(boxes[:, :2]))) + self.eps

    def distance(self, s, t):
        """Signed distance to the edge of S; <= 0 inside."""
        return cover_distance(self.cover, s, t) - self.eps

    def contains(self, s, t):
        return self.distance(s, t) <= 0.0


@dataclass(frozen=True, eq=False)
class FoliationAtlas:
    """
    Local leaves of the unstable foliation over S.

    Leaves are graphs s = gamma(t) over short t-intervals (leaf.params are
    the t lifts). chains[i] is the box chain leaf i was transformed along.
    """

    leaves: List[Leaf]
    chains: List[np.ndarray]
    neighborhood: LeafNeighborhood
    dynamics: Any = field(repr=False)
    length: float = 0.05
    certificates: Tuple[Certificate, ...] = ()

    @property
    def names(self) -> List[str]:
        return [leaf.origin for leaf in self.leaves]

    def _lift(self, index: int, t):
        leaf = self.leaves[index]
        centre = 0.5 * (leaf.params[0] + leaf.params[-1])
        return centre + circle_difference(t, centre)

    def covers(self, index: int, t):
        leaf = self.leaves[index]
        u = self._lift(index, t)
        return (u >= leaf.params[0]) & (u <= leaf.params[-1])

    def graph(self, index: int, t):
        """gamma(t) of leaf `index`; nan where the leaf does not cover t."""
        leaf = self.leaves[index]
        s = np.interp(self._lift(index, t), leaf.params, leaf.s)
        return np.where(self.covers(index, t), s, np.nan)

    def slope(self, index: int, t):
        leaf = self.leaves[index]
        return np.interp(self._lift(index, t), leaf.params, leaf.seed.slope)

    def locate(self, s, t) -> Tuple[np.ndarray, np.ndarray]:
        """
        Foliation leaf through each point, as (index, offset) with
        s = gamma_index(t) + offset. index is -1 where no graph covers t.
        """
        s = np.atleast_1d(np.asarray(s, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        best = np.full(s.shape, np.inf)
        index = np.full(s.shape, -1, dtype=int)
        offset = np.zeros(s.shape)
        for i in range(len(self.leaves)):
            off = circle_difference(s, self.graph(i, t))
            better = np.abs(off) < best
            best = np.where(better, np.abs(off), best)
            index = np.where(better, i, index)
            offset = np.where(better, off, offset)
        return index, offset

    def leaf_direction(self, s, t) -> np.ndarray:
        """Angle of the foliation leaf through each point; nan outside the atlas."""
        index, _ = self.locate(s, t)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.full(t.shape, np.nan)
        for i in np.unique(index[index >= 0]):
            pick = index == i
            out[pick] = np.arctan2(1.0, self.slope(int(i), t[pick]))
        return out


def _graph_separation(atlas_leaves: Sequence[Leaf], graph) -> Tuple[float, Optional[Tuple[int, int]]]:
    """Smallest gap between overlapping graphs, negative when two of them cross."""
    worst, pair = math.inf, None
    for i in range(len(atlas_leaves)):
        for j in range(i + 1, len(atlas_leaves)):
            other = graph(j, atlas_leaves[i].params)
            ok = np.isfinite(other)
            if not ok.any():
                continue
            d = circle_difference(atlas_leaves[i].s[ok], other[ok])
            gap = float(np.min(np.abs(d)))
            if d.max() > 0 and d.min() < 0:
                gap = -gap if gap > 0 else -1.0
            if gap < worst:
                worst, pair = gap, (i, j)
    return worst, pair


def _box_near(boxes: np.ndarray, point: TorusPoint) -> np.ndarray:
    ds = np.maximum(0.0, np.maximum(boxes[:, 0] - point.s, point.s - boxes[:, 1]))
    dt = np.maximum(
        0.0,
        np.maximum(circle_difference(boxes[:, 2], point.t), circle_difference(point.t, boxes[:, 3])),
    )
    return boxes[int(np.argmin(np.maximum(ds, dt)))]


def _atlas_leaves(f, chains: Sequence[Tuple[str, np.ndarray]], length: float) -> List[Leaf]:
    leaves = []
    for name, chain in chains:
        leaf, _ = local_unstable_in_cover(f, chain, length=length)
        leaves.append(replace(leaf, origin=name))
    return leaves


def _check_collisions(atlas: FoliationAtlas, stage: str) -> float:
    gap, pair = _graph_separation(atlas.leaves, atlas.graph)
    if gap <= 0.0:
        i, j = pair
        raise ConstructionError(
            f"leaves {atlas.leaves[i].origin} and {atlas.leaves[j].origin} meet inside S",
            stage=stage,
            witness=gap,
        )
    return gap


def _sampled_injectivity(f, neighborhood: LeafNeighborhood) -> Certificate:
    """Every sampled point of S is the only preimage in S of its image."""
    boxes = neighborhood.cover.boxes()
    sc = 0.5 * (boxes[:, 0] + boxes[:, 1])
    tc = 0.5 * (boxes[:, 2] + boxes[:, 3])
    e = neighborhood.eps
    s = np.concatenate([sc, sc - e, sc + e, sc, sc])
    t = np.concatenate([tc, tc, tc, wrap(tc - e), wrap(tc + e)])
    fs, ft = f.eval(s, t)
    ps, pt = f.preimages(fs, ft)
    count = np.sum(neighborhood.contains(ps.ravel(), pt.ravel()).reshape(ps.shape), axis=0)
    bad = np.flatnonzero(count > 1)
    witness = (float(s[bad[0]]), float(t[bad[0]])) if bad.size else None
    return Certificate.from_margin(
        "S_injective", 1.0 if bad.size == 0 else -float(bad.size), witness, samples=int(s.size)
    )


def build_foliation(
    f,
    cover: BoxCover,
    eps: float = 0.05,
    chains: int = 4,
    chain_length: int = 8,
    length: float = 0.05,
    intersections: Sequence[IntersectionPoint] = (),
) -> FoliationAtlas:
    """
    Atlas of local unstable leaves over S, the eps-neighbourhood of the Gamma0 cover.

    Leaves are graph transforms of vertical seeds along backward chains of
    cover boxes: the constant chains at A and -A give W^u_loc(A) and
    W^u_loc(-A); `chains` end boxes spread over each half of R give the rest.

    Certificates record that f is injective on S, that S stays away from the
    sink and from the expanding circle s = pi, that S misses the given
    crossings, and that the leaves are disjoint and transverse to the horizontal.

    Raises:
        ConstructionError: If two leaves meet inside S
    """
    neighborhood = LeafNeighborhood(cover=cover, eps=eps)
    boxes = cover.boxes()
    named: List[Tuple[str, np.ndarray]] = []
    for fixed in f.base.fixed_points():
        if fixed.name in ("A", "-A"):
            end = _box_near(boxes, fixed.point)
            named.append((fixed.name, np.repeat(end[None, :], chain_length + 1, axis=0)))
    centres = 0.5 * (boxes[:, 2] + boxes[:, 3])
    seen = set()
    for target in np.linspace(1.0, math.pi - 1.0, chains):
        for sign in (1.0, -1.0):
            end = boxes[int(np.argmin(np.abs(centres - sign * target)))]
            chain = backward_chain(f, cover, end, chain_length)
            key = chain.tobytes()
            if key in seen:
                continue
            seen.add(key)
            label = f"chain@({0.5 * (end[0] + end[1]):.4g}, {0.5 * (end[2] + end[3]):.4g})"
            named.append((label, chain))

    atlas = FoliationAtlas(
        leaves=_atlas_leaves(f, named, length),
        chains=[chain for _, chain in named],
        neighborhood=neighborhood,
        dynamics=f,
        length=length,
    )
    gap = _check_collisions(atlas, stage="build_foliation")

    p = TorusPoint(0.0, 0.0)
    circle_t = np.linspace(-math.pi, math.pi, 721)
    away = min(
        float(neighborhood.distance(p.s, p.t)[0]),
        float(np.min(neighborhood.distance(np.full(circle_t.shape, -math.pi), circle_t))),
    )
    angles = np.concatenate([np.abs(np.arctan2(leaf.tangents[:, 1], np.abs(leaf.tangents[:, 0]))) for leaf in atlas.leaves])
    checks = [
        _sampled_injectivity(f, neighborhood),
        Certificate.from_margin("S_disjoint_from_pieces", away, None),
        # no two graphs over a common t leaves gap infinite
        Certificate.from_margin(
            "foliation_disjoint", min(gap, 1.0), None, leaves=len(atlas.leaves), overlapping=math.isfinite(gap)
        ),
        Certificate.from_margin("foliation_transverse", float(angles.min()), None),
    ]
    if intersections:
        s = np.array([q.s for q in intersections])
        t = np.array([q.t for q in intersections])
        d = neighborhood.distance(s, t)
        k = int(np.argmin(d))
        checks.append(Certificate.from_margin("S_misses_I1", float(d[k]), (s[k], t[k])))
    for check in checks:
        if not check.passed:
            logger.warning(f"foliation check {check.name} failed (margin {check.margin:.3g})")
    logger.info(f"foliation atlas: {len(atlas.leaves)} local leaves over S (eps {eps:g})")
    return replace(atlas, certificates=tuple(checks))


# Leaf correspondence H_g


def transport_leaf(leaf: Leaf, g) -> Leaf:
    """The same seed and parameters pushed by g instead of f."""
    moved = replace(leaf, dynamics=g)
    s, t, v1, v2 = moved.evaluate(leaf.params, leaf.chunks)
    return replace(moved, vertices=np.column_stack([s, t]), tangents=np.column_stack([v1, v2]))


@dataclass(frozen=True, eq=False)
class LeafCorrespondence:
    """
    H_g: leaf i of the f-atlas goes to leaf i of the g-atlas, and every
    global leaf to its transport under g.
    """

    atlas_f: FoliationAtlas
    atlas_g: FoliationAtlas
    leaves_f: Tuple[Leaf, ...]
    leaves_g: Tuple[Leaf, ...]
    atlas_distance: np.ndarray
    leaf_distance: np.ndarray
    equivariance_defect: float

    @property
    def sup_distance(self) -> float:
        return float(np.max(np.concatenate([self.atlas_distance, self.leaf_distance]), initial=0.0))

    @property
    def is_identity(self) -> bool:
        return self.sup_distance == 0.0

    def _find(self, leaves: Sequence[Leaf], origin: str) -> Leaf:
        for leaf in leaves:
            if leaf.origin == origin:
                return leaf
        raise KeyError(origin)

    def leaf(self, origin: str) -> Leaf:
        return self._find(self.leaves_f, origin)

    def image(self, origin: str) -> Leaf:
        return self._find(self.leaves_g, origin)

    def distance_certificate(self, c0: float, constant: float = 10.0) -> Certificate:
        """sup leaf distance against constant * ||g - f||_C0."""
        return Certificate.from_margin(
            "leaf_distance_bound",
            constant * c0 - self.sup_distance + ROOT_TOL,
            None,
            sup_distance=self.sup_distance,
            c0=c0,
        )


def _equivariance_defect(atlas: FoliationAtlas, g, half: float = 0.01) -> float:
    """
    Distance from g(piece of leaf i) to the foliation leaf through the image
    of the piece's centre, over pieces of t-half-width `half`.
    """
    worst = 0.0
    for leaf in atlas.leaves:
        centre = 0.5 * (leaf.params[0] + leaf.params[-1])
        near = np.abs(leaf.params - centre) <= half
        mid = int(np.argmin(np.abs(leaf.params - centre)))
        gs, gt = g.eval(leaf.s[near], leaf.t[near])
        cs, ct = g.eval(leaf.s[mid], leaf.t[mid])
        index, offset = atlas.locate(cs, ct)
        if index[0] < 0:
            continue
        target = atlas.graph(int(index[0]), gt) + offset[0]
        ok = np.isfinite(target)
        if ok.any():
            worst = max(worst, float(np.max(np.abs(circle_difference(gs[ok], target[ok])))))
    return worst


def build_leaf_map_H(
    f,
    g,
    atlas_f: FoliationAtlas,
    leaves: Sequence[Leaf] = (),
) -> LeafCorrespondence:
    """
    Leaf correspondence between the foliations of f and g.

    The g-atlas repeats the graph transforms along the same chains with g;
    global leaves (such as the branches of W^u(A)) are transported by
    pushing their seeds with g.

    Raises:
        PreconditionError: If the perturbation moves points of the atlas
        ConstructionError: If two g-leaves meet inside S
    """
    for leaf in atlas_f.leaves:
        if _displaced(g, leaf.s, leaf.t).any():
            raise PreconditionError("the perturbation window meets the foliation atlas")
    if g is f or _amplitude(g) == 0.0:
        atlas_g = atlas_f
        leaves_g = tuple(leaves)
    else:
        named = list(zip(atlas_f.names, atlas_f.chains))
        atlas_g = FoliationAtlas(
            leaves=_atlas_leaves(g, named, atlas_f.length),
            chains=list(atlas_f.chains),
            neighborhood=atlas_f.neighborhood,
            dynamics=g,
            length=atlas_f.length,
        )
        _check_collisions(atlas_g, stage="build_leaf_map_H")
        leaves_g = tuple(transport_leaf(leaf, g) for leaf in leaves)

    atlas_distance = np.array(
        [float(np.max(np.abs(circle_difference(a.s, b.s)))) for a, b in zip(atlas_f.leaves, atlas_g.leaves)]
    )
    leaf_distance = np.array(
        [float(np.max(torus_distance(a.s, a.t, b.s, b.t), initial=0.0)) for a, b in zip(leaves, leaves_g)]
    )
    defect = _equivariance_defect(atlas_g, g)
    result = LeafCorrespondence(
        atlas_f=atlas_f,
        atlas_g=atlas_g,
        leaves_f=tuple(leaves),
        leaves_g=leaves_g,
        atlas_distance=atlas_distance,
        leaf_distance=leaf_distance,
        equivariance_defect=defect,
    )
    logger.info(
        f"H_g: sup leaf distance {result.sup_distance:.3g}, equivariance defect {defect:.3g}"
    )
    return result


# Direction field chi


def _line_angle(v1, v2):
    """Angle of the line spanned by (v1, v2), in (-pi/2, pi/2]."""
    theta = np.arctan2(v2, v1)
    theta = np.where(theta > 0.5 * math.pi, theta - math.pi, theta)
    return np.where(theta <= -0.5 * math.pi, theta + math.pi, theta)


def _angle_gap(a, b):
    """Distance between two line angles."""
    d = np.abs(np.asarray(a) - np.asarray(b)) % math.pi
    return np.minimum(d, math.pi - d)


def _periodic(points: np.ndarray) -> np.ndarray:
    """Coordinates shifted into [0, 2pi) for periodic KD-trees."""
    out = np.mod(wrap(points) + math.pi, TWO_PI)
    return np.where(out >= TWO_PI, 0.0, out)


def _pull_back_vector(dynamics, s, t, v1, v2):
    """Dg_x^{-1} v, normalized."""
    j = dynamics.jacobian(s, t)
    det = j.det
    w1 = (j.a22 * v1 - j.a12 * v2) / det
    w2 = (-j.a21 * v1 + j.a11 * v2) / det
    norm = np.hypot(w1, w2)
    return w1 / norm, w2 / norm


def _push_vector(dynamics, s, t, v1, v2):
    w1, w2 = dynamics.jacobian(s, t).apply(v1, v2)
    norm = np.hypot(w1, w2)
    return w1 / norm, w2 / norm


@dataclass(frozen=True, eq=False)
class DirectionField:
    """
    Field of line directions: prescribed angles at anchor points, blended
    into the horizontal background within `radius` of the anchors.

    partners[i] is the anchor g maps anchor i to, or -1.
    """

    anchors: np.ndarray
    angles: np.ndarray
    radius: float
    partners: np.ndarray
    dynamics: Any = field(repr=False)
    certificates: Tuple[Certificate, ...] = ()
    _tree: Any = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if len(self.anchors):
            object.__setattr__(self, "_tree", cKDTree(_periodic(self.anchors), boxsize=TWO_PI))

    def angle(self, s, t) -> np.ndarray:
        s = np.atleast_1d(np.asarray(s, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.zeros(s.shape)
        if self._tree is None:
            return out
        k = min(8, len(self.anchors))
        d, idx = self._tree.query(_periodic(np.column_stack([s, t])), k=k, p=np.inf, distance_upper_bound=self.radius)
        d = d.reshape(s.size, k)
        idx = idx.reshape(s.size, k)
        near = np.isfinite(d)
        safe = np.where(near, idx, 0)
        weight = np.where(near, 1.0 / np.maximum(d, 1e-300) - 1.0 / self.radius, 0.0)
        doubled = 2.0 * self.angles[safe]
        x = 1.0 / self.radius + np.sum(weight * np.cos(doubled), axis=1)
        y = np.sum(weight * np.sin(doubled), axis=1)
        blended = 0.5 * np.arctan2(y, x)
        on_anchor = near[:, 0] & (d[:, 0] == 0.0)
        out = np.where(on_anchor, self.angles[safe[:, 0]], blended)
        return np.where(near.any(axis=1), out, 0.0)

    def at(self, s, t):
        theta = self.angle(s, t)
        return np.cos(theta), np.sin(theta)

    def influence(self, s, t) -> np.ndarray:
        """True where some anchor is within `radius`."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        if self._tree is None:
            return np.zeros(s.shape, dtype=bool)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        d, _ = self._tree.query(_periodic(np.column_stack([s, t])), k=1, p=np.inf)
        return d < self.radius


def integral_line(chi: DirectionField, s: float, t: float, tau: float, step: float = RK4_STEP) -> Tuple[float, float]:
    """Point at signed length tau along the integral line of the field through (s, t), by RK4."""

    def velocity(a, b):
        c, d = chi.at(a, b)
        return float(c[0]), float(d[0])

    sign = 1.0 if tau >= 0 else -1.0
    full, rest = divmod(abs(tau), step)
    for h in [sign * step] * int(full) + ([sign * rest] if rest > 0 else []):
        k1 = velocity(s, t)
        k2 = velocity(s + 0.5 * h * k1[0], t + 0.5 * h * k1[1])
        k3 = velocity(s + 0.5 * h * k2[0], t + 0.5 * h * k2[1])
        k4 = velocity(s + h * k3[0], t + h * k3[1])
        s = s + h * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]) / 6.0
        t = t + h * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]) / 6.0
    return float(wrap(s)), float(wrap(t))


def _band(dynamics, neighborhood: LeafNeighborhood) -> float:
    """|s| bound of the forward images of S."""
    p = dynamics.params
    return (p.lam * neighborhood.s_bound + p.epsilon) * (1.0 + 1e-9) + 1e-12


def k_preimages(dynamics, neighborhood: LeafNeighborhood, s, t, k: int):
    """
    k-fold preimages of the points lying in S.

    The intermediate preimages are forward images of S, so branches leaving
    the band |s| <= lambda * s_bound + epsilon are dropped on the way.

    Returns:
        (owner, ys, yt): owner[i] indexes the input point preimage i belongs to
    """
    s = np.atleast_1d(np.asarray(s, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    owner = np.arange(s.size)
    band = _band(dynamics, neighborhood)
    for level in range(1, k + 1):
        if owner.size == 0:
            break
        ps, pt = dynamics.preimages(s, t)
        owner = np.concatenate([owner, owner])
        s, t = ps.ravel(), pt.ravel()
        keep = neighborhood.contains(s, t) if level == k else np.abs(s) <= band
        owner, s, t = owner[keep], s[keep], t[keep]
    return owner, s, t


def _pushed(dynamics, s, t, k: int):
    return dynamics.iterate(np.asarray(s, dtype=float), np.asarray(t, dtype=float), k)


def _shift(xs, xt, as_, at, bs, bt):
    """x + (a - b); exactly x when a and b agree bit for bit."""
    return wrap(xs + circle_difference(as_, bs)), wrap(xt + circle_difference(at, bt))


def _leaf_tangent(atlas: FoliationAtlas, s, t):
    index, _ = atlas.locate(s, t)
    t = np.atleast_1d(np.asarray(t, dtype=float))
    slope = np.zeros(t.shape)
    for i in np.unique(index[index >= 0]):
        pick = index == i
        slope[pick] = atlas.slope(int(i), t[pick])
    norm = np.hypot(slope, 1.0)
    return slope / norm, 1.0 / norm


def _transfer_direction(dynamics, atlas: FoliationAtlas, xs, xt, ys, yt, k: int):
    """Dg_x^{-k} Dg_y^k v_y for the leaf tangent v_y at y."""
    v1, v2 = _leaf_tangent(atlas, ys, yt)
    s, t = np.atleast_1d(ys), np.atleast_1d(yt)
    for _ in range(k):
        v1, v2 = _push_vector(dynamics, s, t, v1, v2)
        s, t = dynamics.eval(s, t)
    orbit = [(np.atleast_1d(xs), np.atleast_1d(xt))]
    for _ in range(k - 1):
        orbit.append(dynamics.eval(*orbit[-1]))
    for s, t in reversed(orbit):
        v1, v2 = _pull_back_vector(dynamics, s, t, v1, v2)
    return v1, v2


def domain_samples(domain: FundamentalDomain, count: int) -> np.ndarray:
    """Grid points of D_r lying in K, about `count` of them."""
    n = max(2, int(math.ceil(math.sqrt(count))))
    axis = np.linspace(-domain.radius, domain.radius, n)
    ds, dt = np.meshgrid(axis, axis, indexing="ij")
    s = wrap(domain.center.s + ds.ravel())
    t = wrap(domain.center.t + dt.ravel())
    keep = domain.contains(s, t)
    return np.column_stack([s[keep], t[keep]])


def _anchor_set(dynamics, atlas: FoliationAtlas, points: np.ndarray, k: int):
    """Anchors on S' (pairs of k-preimages in S with a common image) and their forward images in S."""
    owner, ys, yt = k_preimages(dynamics, atlas.neighborhood, points[:, 0], points[:, 1], k)
    anchors, angles, partners = [], [], []
    for i in np.unique(owner):
        pick = np.flatnonzero(owner == i)
        if pick.size != 2:
            continue
        a, b = pick
        for x, y in ((a, b), (b, a)):
            v1, v2 = _transfer_direction(dynamics, atlas, ys[x], yt[x], ys[y], yt[y], k)
            s, t = np.atleast_1d(ys[x]), np.atleast_1d(yt[x])
            previous = -1
            for _ in range(k):
                anchors.append((float(s[0]), float(t[0])))
                angles.append(float(_line_angle(v1, v2)[0]))
                partners.append(-1)
                if previous >= 0:
                    partners[previous] = len(anchors) - 1
                previous = len(anchors) - 1
                v1, v2 = _push_vector(dynamics, s, t, v1, v2)
                s, t = dynamics.eval(s, t)
                if not atlas.neighborhood.contains(s, t)[0]:
                    break
    return (
        np.array(anchors, dtype=float).reshape(-1, 2),
        np.array(angles, dtype=float),
        np.array(partners, dtype=int),
    )


def _s_samples(neighborhood: LeafNeighborhood, per_box: int = 1) -> np.ndarray:
    boxes = neighborhood.cover.boxes()
    u = np.linspace(0.0, 1.0, per_box + 2)[1:-1]
    s = boxes[:, 0:1] + np.outer(boxes[:, 1] - boxes[:, 0], u)
    t = boxes[:, 2:3] + np.outer(boxes[:, 3] - boxes[:, 2], u)
    return np.column_stack([s.ravel(), wrap(t.ravel())])


def build_chi(
    f,
    g,
    correspondence: LeafCorrespondence,
    domain: FundamentalDomain,
    k: int,
    samples: int = 400,
    radius: float = 0.02,
    theta_min: float = 1e-3,
    tol: float = 1e-6,
) -> DirectionField:
    """
    Direction field chi_g transverse to the g-foliation.

    On S' the direction is Dg_x^{-k} Dg_y^k(v_y), v_y tangent to the leaf
    through the partner point y; it is carried forward by Dg while the
    images stay in S. Away from those anchors chi is horizontal, and the
    two are blended by inverse distance within `radius`.

    Raises:
        ConstructionError: If chi makes an angle below theta_min with a leaf
    """
    points = domain_samples(domain, samples)
    atlas_g = correspondence.atlas_g
    anchors, angles, partners = _anchor_set(g, atlas_g, points, k)
    chi = DirectionField(anchors=anchors, angles=angles, radius=radius, partners=partners, dynamics=g)
    if g is f or _amplitude(g) == 0.0:
        chi_f = chi
    else:
        a_f, th_f, pa_f = _anchor_set(f, correspondence.atlas_f, points, k)
        chi_f = DirectionField(anchors=a_f, angles=th_f, radius=radius, partners=pa_f, dynamics=f)

    grid = _s_samples(atlas_g.neighborhood, per_box=2)
    leaf = atlas_g.leaf_direction(grid[:, 0], grid[:, 1])
    ok = np.isfinite(leaf)
    gap = _angle_gap(chi.angle(grid[ok, 0], grid[ok, 1]), leaf[ok])
    worst = int(np.argmin(gap)) if gap.size else -1
    transverse = float(np.min(gap, initial=0.5 * math.pi))
    if transverse < theta_min:
        raise ConstructionError(
            f"chi makes angle {transverse:.3g} with a leaf of the foliation",
            stage="build_chi",
            witness=grid[ok][worst].tolist(),
        )

    on_anchor = float(np.max(_angle_gap(chi.angle(anchors[:, 0], anchors[:, 1]), angles), initial=0.0))

    errors = []
    linked = np.flatnonzero(partners >= 0)
    if linked.size:
        v1, v2 = chi.at(anchors[linked, 0], anchors[linked, 1])
        w1, w2 = _push_vector(g, anchors[linked, 0], anchors[linked, 1], v1, v2)
        errors.append(_angle_gap(_line_angle(w1, w2), angles[partners[linked]]))
    gs, gt = g.eval(grid[:, 0], grid[:, 1])
    free = ~chi.influence(grid[:, 0], grid[:, 1]) & ~chi.influence(gs, gt) & ~_displaced(g, grid[:, 0], grid[:, 1])
    if free.any():
        v1, v2 = chi.at(grid[free, 0], grid[free, 1])
        w1, w2 = _push_vector(g, grid[free, 0], grid[free, 1], v1, v2)
        errors.append(_angle_gap(_line_angle(w1, w2), chi.angle(gs[free], gt[free])))
    equivariance = float(np.max(np.concatenate(errors), initial=0.0)) if errors else 0.0

    outside = ~chi.influence(grid[:, 0], grid[:, 1]) & ~chi_f.influence(grid[:, 0], grid[:, 1])
    agree = float(
        np.max(_angle_gap(chi.angle(grid[outside, 0], grid[outside, 1]), chi_f.angle(grid[outside, 0], grid[outside, 1])), initial=0.0)
    )
    checks = (
        Certificate.from_margin("chi_on_S_prime", ROOT_TOL - on_anchor, None, anchors=int(len(anchors))),
        Certificate.from_margin("chi_transverse_to_leaves", transverse - theta_min, None),
        Certificate.from_margin("chi_equivariance", tol - equivariance, None, max_angle=equivariance),
        Certificate.from_margin("chi_f_equals_chi_g_outside_S_prime", ROOT_TOL - agree, None),
    )
    logger.info(f"chi: {len(anchors)} anchors, min leaf angle {transverse:.3g}, equivariance {equivariance:.3g}")
    return replace(chi, certificates=checks)


# The homeomorphism h


def injectivity_violations(points: np.ndarray, images: np.ndarray, mesh: float, tol: float = ROOT_TOL) -> np.ndarray:
    """Sample pairs more than 2 * mesh apart whose images lie within tol of each other."""
    if len(points) < 2:
        return np.zeros((0, 2), dtype=int)
    tree = cKDTree(_periodic(np.asarray(images, dtype=float)), boxsize=TWO_PI)
    pairs = tree.query_pairs(tol, p=np.inf, output_type="ndarray")
    if pairs.size == 0:
        return np.zeros((0, 2), dtype=int)
    a, b = points[pairs[:, 0]], points[pairs[:, 1]]
    far = torus_distance(a[:, 0], a[:, 1], b[:, 0], b[:, 1]) > 2.0 * mesh
    return pairs[far]


@dataclass(frozen=True, eq=False)
class SampledHomeomorphism:
    """
    h on a sampled region: images of the sample points, plus the evaluator
    that produced them for use at other points of the region.

    cases holds the number of k-fold preimages in S for samples of K and
    the pull-back level for samples of the extensions.
    """

    points: np.ndarray
    images: np.ndarray
    cases: np.ndarray
    region: str
    evaluator: Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]] = field(repr=False)
    boundary: Optional[np.ndarray] = None
    certificates: Tuple[Certificate, ...] = ()

    def __call__(self, s, t):
        return self.evaluator(np.atleast_1d(np.asarray(s, dtype=float)), np.atleast_1d(np.asarray(t, dtype=float)))

    @property
    def displacement(self) -> np.ndarray:
        return torus_distance(self.points[:, 0], self.points[:, 1], self.images[:, 0], self.images[:, 1])

    @property
    def sup_displacement(self) -> float:
        return float(np.max(self.displacement, initial=0.0))

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.points, self.images))

    def rows(self) -> List[Tuple[float, float, float, float, int]]:
        """(x_s, x_t, h_s, h_t, case) per sample."""
        return [
            (float(p[0]), float(p[1]), float(q[0]), float(q[1]), int(c))
            for p, q, c in zip(self.points, self.images, self.cases)
        ]


@dataclass(frozen=True, eq=False)
class _OnK:
    """Evaluates h at points of K by counting their k-fold preimages in S."""

    f: Any
    g: Any
    k: int
    correspondence: LeafCorrespondence
    chi: DirectionField
    rho: float
    reach: float = 0.05

    @property
    def identity(self) -> bool:
        return self.g is self.f or _amplitude(self.g) == 0.0

    def _unchanged(self, ys, yt) -> bool:
        """The g-orbit of y agrees with its f-orbit for k steps."""
        gs, gt = _pushed(self.g, ys, yt, self.k)
        fs, ft = _pushed(self.f, ys, yt, self.k)
        return bool(np.all(_same(gs, gt, fs, ft)))

    def cases(self, s, t) -> np.ndarray:
        owner, _, _ = k_preimages(self.f, self.correspondence.atlas_f.neighborhood, s, t, self.k)
        return np.bincount(owner, minlength=np.size(s))

    def __call__(self, s, t):
        hs, ht, _ = self.evaluate(s, t)
        return hs, ht

    def evaluate(self, s, t):
        """(h_s, h_t, cases) at points of K."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        owner, ys, yt = k_preimages(self.f, self.correspondence.atlas_f.neighborhood, s, t, self.k)
        count = np.bincount(owner, minlength=s.size)
        hs, ht = s.copy(), t.copy()
        if self.identity:
            return hs, ht, count
        for i in np.flatnonzero(count == 1):
            j = int(np.flatnonzero(owner == i)[0])
            hs[i], ht[i] = self.case_one(s[i], t[i], ys[j], yt[j])
        for i in np.flatnonzero(count == 2):
            a, b = np.flatnonzero(owner == i)
            hs[i], ht[i] = self.case_two(s[i], t[i], (ys[a], yt[a]), (ys[b], yt[b]))
        bad = np.flatnonzero(count > 2)
        if bad.size:
            i = int(bad[0])
            raise ConstructionError(
                f"{int(count[i])} preimages in S of a point of K", stage="build_h_on_K", witness=(s[i], t[i])
            )
        return hs, ht, count

    def _atlas_target(self, ys, yt):
        atlas_f, atlas_g = self.correspondence.atlas_f, self.correspondence.atlas_g
        index, offset = atlas_f.locate(ys, yt)
        i, o = int(index[0]), float(offset[0])
        if i < 0:
            raise ConstructionError("no foliation leaf through a preimage in S", stage="build_h_on_K", witness=(ys, yt))

        def psi(a, b):
            return float(circle_difference(circle_difference(a, float(atlas_g.graph(i, b))), o))

        return psi

    def meet(self, ys: float, yt: float, psi: Callable[[float, float], float]) -> Tuple[float, float]:
        """y': where the chi integral line through y meets the zero set of psi."""
        value = psi(ys, yt)
        if value == 0.0:
            return ys, yt
        if not math.isfinite(value):
            raise ConstructionError("target leaf does not cover the preimage", stage="build_h_on_K", witness=(ys, yt))

        def along(tau):
            return psi(*integral_line(self.chi, ys, yt, tau))

        direction = -math.copysign(1.0, value)
        lo, hi = 0.0, direction * RK4_STEP
        while abs(hi) <= self.reach:
            end = along(hi)
            if math.isfinite(end) and math.copysign(1.0, end) != math.copysign(1.0, value):
                tau = brentq(along, min(lo, hi), max(lo, hi), xtol=1e-15)
                return integral_line(self.chi, ys, yt, tau)
            lo, hi = hi, 2.0 * hi
        raise ConstructionError(
            "chi integral line does not meet the image leaf", stage="build_h_on_K", witness=(ys, yt)
        )

    def case_one(self, xs, xt, ys, yt, psi=None):
        """h(x) = g^k(y') shifted by the error of f^k(y) against x."""
        ps, pt = self.meet(ys, yt, psi or self._atlas_target(ys, yt))
        gs, gt = _pushed(self.g, ps, pt, self.k)
        fs, ft = _pushed(self.f, ys, yt, self.k)
        return _shift(xs, xt, gs, gt, fs, ft)

    def case_two(self, xs, xt, first, second):
        """Crossing of g^k(H(F_y1)) and g^k(H(F_y2)) within rho/4 of x."""
        if self.correspondence.is_identity and self._unchanged(*first) and self._unchanged(*second):
            return xs, xt
        atlas_f, atlas_g = self.correspondence.atlas_f, self.correspondence.atlas_g
        located = [atlas_f.locate(*y) for y in (first, second)]

        def on_leaf(n, u):
            i, o = int(located[n][0][0]), float(located[n][1][0])
            return wrap(atlas_g.graph(i, u) + o), wrap(u)

        def residual(v):
            a = _pushed(self.g, *on_leaf(0, v[0]), self.k)
            b = _pushed(self.g, *on_leaf(1, v[1]), self.k)
            return [float(circle_difference(a[0], b[0])), float(circle_difference(a[1], b[1]))]

        start = np.array([first[1], second[1]], dtype=float)
        return self._solved(xs, xt, residual, start, 1.0, lambda v: _pushed(self.g, *on_leaf(0, v[0]), self.k), first)

    def _solved(self, xs, xt, residual, start, scale, image, first):
        sol = root(lambda v: residual(start + scale * v), np.zeros(2), method="hybr", options={"xtol": 1e-14})
        v = start + scale * sol.x
        miss = max(abs(r) for r in residual(v))
        gs, gt = image(v)
        fs, ft = _pushed(self.f, *first, self.k)
        hs, ht = _shift(xs, xt, gs, gt, fs, ft)
        moved = float(torus_distance(hs, ht, xs, xt))
        if miss > 1e-9 or moved > 0.25 * self.rho:
            raise ConstructionError(
                f"leaf images do not cross within rho/4 of x (residual {miss:.3g}, distance {moved:.3g})",
                stage="build_h_on_K",
                witness=(float(xs), float(xt)),
            )
        return hs, ht


def _leaf_anchors(domain: FundamentalDomain, neighborhood: LeafNeighborhood, leaves: Sequence[Leaf], k: int, per_leaf: int):
    """Vertices of global leaves in K with their leaf preimages in S: (leaf, u, n, x, y)."""
    found = []
    for leaf in leaves:
        inside = np.flatnonzero(domain.contains(leaf.s, leaf.t) & (leaf.chunks >= k))
        for j in inside[:: max(1, inside.size // per_leaf)][:per_leaf]:
            u, n = float(leaf.params[j]), int(leaf.chunks[j])
            ys, yt = leaf.point_at(u, n - k)
            if neighborhood.contains(ys, yt)[0]:
                found.append((leaf, u, n, (float(leaf.s[j]), float(leaf.t[j])), (float(ys), float(yt))))
    return found


def _crossing_anchors(
    domain: FundamentalDomain,
    neighborhood: LeafNeighborhood,
    leaves: Sequence[Leaf],
    intersections: Sequence[IntersectionPoint],
    k: int,
):
    """Crossings pushed along both leaves into K, with leaf preimages in S on each."""
    by_name = {leaf.origin: leaf for leaf in leaves}
    found = []
    for q in intersections:
        ua, na, ub, nb = q.params
        if q.leaf_a not in by_name or q.leaf_b not in by_name or na < 0 or nb < 0:
            continue
        a, b = by_name[q.leaf_a], by_name[q.leaf_b]
        for m in range(WALK_CAP):
            xs, xt = a.point_at(ua, na + m)
            if domain.contains(xs, xt):
                break
        else:
            continue
        if na + m < k or nb + m < k:
            continue
        ya = a.point_at(ua, na + m - k)
        yb = b.point_at(ub, nb + m - k)
        if not (neighborhood.contains(*ya)[0] and neighborhood.contains(*yb)[0]):
            continue
        found.append((a, ua, na + m, b, ub, nb + m, (float(xs), float(xt))))
    return found


def build_h_on_K(
    f,
    g,
    domain: FundamentalDomain,
    k: int,
    correspondence: LeafCorrespondence,
    chi: DirectionField,
    samples: int = 400,
    leaves: Sequence[Leaf] = (),
    intersections: Sequence[IntersectionPoint] = (),
    boundary_samples: int = 50,
    mesh: float = 1e-3,
    jobs: int = 1,
) -> SampledHomeomorphism:
    """
    h on samples of K.

    A point with no k-fold preimage in S is fixed. With one preimage y,
    h(x) = g^k(y') for y' where the chi integral line through y meets the
    image leaf H_g(F_y). With two, h(x) is the crossing of the g^k images
    of both image leaves near x. Vertices of the given leaves and pushed
    crossings are sampled with their exact leaf preimages.

    Raises:
        ConstructionError: If an integral line misses its leaf or a crossing is not found
    """
    neighborhood = correspondence.atlas_f.neighborhood
    on_k = _OnK(f=f, g=g, k=k, correspondence=correspondence, chi=chi, rho=f.params.rho)

    grid = domain_samples(domain, samples)
    outer = domain.outer[:: max(1, len(domain.outer) // boundary_samples)]
    outer = outer[domain.contains(outer[:, 0], outer[:, 1])]
    points = np.vstack([grid, outer])
    hs, ht, cases = evaluate_chunks(on_k.evaluate, points, jobs)
    boundary = np.zeros(len(points), dtype=bool)
    boundary[len(grid):] = True

    images_g = {l.origin: l for l in correspondence.leaves_g}
    extra_points, extra_images, extra_cases = [], [], []
    for leaf, u, n, x, y in _leaf_anchors(domain, neighborhood, leaves, k, per_leaf=max(1, samples // 20)):
        image = images_g.get(leaf.origin, leaf)
        gs, gt, v1, v2 = image.evaluate(u, n - k)
        slope = float(v1 / v2)

        def psi(a, b, gs=float(gs), gt=float(gt), slope=slope):
            return float(circle_difference(a, gs)) - slope * float(circle_difference(b, gt))

        h = x if on_k.identity else on_k.case_one(x[0], x[1], y[0], y[1], psi=psi)
        extra_points.append(x)
        extra_images.append((float(h[0]), float(h[1])))
        extra_cases.append(1)

    for a, ua, na, b, ub, nb, x in _crossing_anchors(domain, neighborhood, leaves, intersections, k):
        a_g, b_g = images_g.get(a.origin, a), images_g.get(b.origin, b)
        pa, pb = a_g.point_at(ua, na), b_g.point_at(ub, nb)
        if on_k.identity or (
            np.all(_same(*pa, *a.point_at(ua, na))) and np.all(_same(*pb, *b.point_at(ub, nb)))
        ):
            h = x
        else:
            wa = (a.span[1] - a.span[0]) if a.span else 1.0
            wb = (b.span[1] - b.span[0]) if b.span else 1.0

            def residual(v, a_g=a_g, b_g=b_g, na=na, nb=nb):
                sa, ta = a_g.point_at(v[0], na)
                sb, tb = b_g.point_at(v[1], nb)
                return [float(circle_difference(sa, sb)), float(circle_difference(ta, tb))]

            sol = root(lambda v: residual(np.array([ua, ub]) + np.array([wa, wb]) * v), np.zeros(2), method="hybr")
            v = np.array([ua, ub]) + np.array([wa, wb]) * sol.x
            miss = max(abs(r) for r in residual(v))
            h = tuple(float(c) for c in a_g.point_at(v[0], na))
            if miss > 1e-9 or float(torus_distance(h[0], h[1], x[0], x[1])) > 0.25 * on_k.rho:
                raise ConstructionError(
                    f"image leaves {a.origin} and {b.origin} do not cross within rho/4 of x",
                    stage="build_h_on_K",
                    witness=x,
                )
        extra_points.append(x)
        extra_images.append((float(h[0]), float(h[1])))
        extra_cases.append(2)

    if extra_points:
        points = np.vstack([points, np.array(extra_points)])
        hs = np.concatenate([hs, [p[0] for p in extra_images]])
        ht = np.concatenate([ht, [p[1] for p in extra_images]])
        cases = np.concatenate([cases, extra_cases])
        boundary = np.concatenate([boundary, np.zeros(len(extra_points), dtype=bool)])
    images = np.column_stack([hs, ht])

    bs, bt = points[boundary, 0], points[boundary, 1]
    lhs = g.eval(hs[boundary], ht[boundary])
    rhs = on_k(*f.eval(bs, bt))
    defect = float(np.max(torus_distance(lhs[0], lhs[1], rhs[0], rhs[1]), initial=0.0))
    pairs = injectivity_violations(points, images, mesh)
    checks = (
        Certificate.from_margin("boundary_equivariance", BOUNDARY_TOL - defect, None, residual=defect),
        Certificate.from_margin(
            "injective_on_samples", 1.0 if pairs.size == 0 else -float(len(pairs)),
            points[pairs[0, 0]].tolist() if pairs.size else None,
        ),
    )
    result = SampledHomeomorphism(
        points=points,
        images=images,
        cases=np.asarray(cases, dtype=int),
        region="K",
        evaluator=on_k,
        boundary=boundary,
        certificates=checks,
    )
    logger.info(
        f"h on K: {len(points)} samples, cases {np.bincount(result.cases, minlength=3).tolist()}, "
        f"sup |h - id| {result.sup_displacement:.3g}"
    )
    return result


# Extensions of h


def attracting_fixed_point(g, start: TorusPoint = TorusPoint(0.0, 0.0), cap: int = WALK_CAP) -> TorusPoint:
    """The sink of g, by iterating from `start` until the orbit stops moving."""
    s, t = start.s, start.t
    for _ in range(cap):
        ns, nt = g.eval(s, t)
        if float(torus_distance(ns, nt, s, t)) <= 1e-15:
            return TorusPoint(float(ns), float(nt))
        s, t = ns, nt
    raise ConvergenceError(
        "orbit of the sink guess did not settle", stage="attracting_fixed_point", residual=float(torus_distance(ns, nt, s, t))
    )


@dataclass(frozen=True, eq=False)
class _OnBasin:
    """
    h on B0: x is walked forward to D_r. Points landing in K use h on K and
    are pulled back along the basin branch of g; points landing deeper are
    first walked back to K and pushed forward by g.
    """

    f: Any
    g: Any
    domain: FundamentalDomain
    on_k: Callable
    sink_f: TorusPoint
    sink_g: TorusPoint
    cap: int = WALK_CAP

    def _forward(self, s, t):
        history = [(s, t)]
        steps = np.zeros(s.shape, dtype=int)
        outside = ~self.domain.in_square(s, t)
        while outside.any():
            if len(history) > self.cap:
                raise ConvergenceError(
                    f"{int(outside.sum())} orbit(s) did not reach D_r", stage="extend_h_immediate_basin", residual=self.cap
                )
            s, t = self.f.eval(s, t)
            history.append((s, t))
            steps += outside
            outside &= ~self.domain.in_square(s, t)
        return history, steps

    def _from_inside(self, s, t):
        """h at points of f(D_r): back to K by the basin branch, then forward by g."""
        chain = [(s, t)]
        steps = np.zeros(s.shape, dtype=int)
        pending = ~self.domain.contains(s, t)
        while pending.any():
            if len(chain) > self.cap:
                raise ConvergenceError(
                    f"{int(pending.sum())} point(s) did not leave f(D_r)", stage="extend_h_immediate_basin", residual=self.cap
                )
            ps, pt = self.f.basin_preimage(s, t)
            s, t = np.where(pending, ps, s), np.where(pending, pt, t)
            chain.append((s, t))
            steps += pending
            pending &= ~self.domain.contains(s, t)
        zs, zt = chain[-1]
        ws, wt = self.on_k(zs, zt)
        fs, ft = zs.copy(), zt.copy()
        for step in range(int(steps.max(initial=0))):
            live = step < steps
            gs, gt = self.g.eval(ws, wt)
            ns, nt = self.f.eval(fs, ft)
            ws, wt = np.where(live, gs, ws), np.where(live, gt, wt)
            fs, ft = np.where(live, ns, fs), np.where(live, nt, ft)
        return _shift(chain[0][0], chain[0][1], ws, wt, fs, ft)

    def __call__(self, s, t):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        sink = _same(s, t, self.sink_f.s, self.sink_f.t)
        s0, t0 = np.where(sink, self.domain.outer[0, 0], s), np.where(sink, self.domain.outer[0, 1], t)
        history, steps = self._forward(s0, t0)
        idx = np.arange(s.size)
        zs = np.array([history[j][0][i] for i, j in zip(idx, steps)])
        zt = np.array([history[j][1][i] for i, j in zip(idx, steps)])
        ws, wt = zs.copy(), zt.copy()
        in_k = self.domain.contains(zs, zt)
        if in_k.any():
            ws[in_k], wt[in_k] = self.on_k(zs[in_k], zt[in_k])
        if (~in_k).any():
            ws[~in_k], wt[~in_k] = self._from_inside(zs[~in_k], zt[~in_k])
        for i in range(int(steps.max(initial=0)) - 1, -1, -1):
            live = i < steps
            prev_s, prev_t = history[i]
            next_s, next_t = history[i + 1]
            keep = _same(ws, wt, next_s, next_t) & ~_displaced(self.g, prev_s, prev_t)
            ps, pt = self.g.basin_preimage(ws, wt)
            ws = np.where(live, np.where(keep, prev_s, ps), ws)
            wt = np.where(live, np.where(keep, prev_t, pt), wt)
        ws = np.where(sink, self.sink_g.s, ws)
        wt = np.where(sink, self.sink_g.t, wt)
        return ws, wt


def _cell_samples(basin: BasinCover, level: int, count: int, rng: np.random.Generator) -> np.ndarray:
    i, j = np.nonzero(basin.mask(level))
    if i.size > count:
        pick = np.sort(rng.choice(i.size, size=count, replace=False))
        i, j = i[pick], j[pick]
    return np.column_stack([basin.axis[i], basin.axis[j]])


def _residual(evaluator, f, g, points: np.ndarray, images: np.ndarray) -> np.ndarray:
    """d(g(h(x)), h(f(x))) per sample."""
    if len(points) == 0:
        return np.zeros(0)
    ls, lt = g.eval(images[:, 0], images[:, 1])
    rs, rt = evaluator(*f.eval(points[:, 0], points[:, 1]))
    return torus_distance(ls, lt, rs, rt)


def extend_h_immediate_basin(
    h: SampledHomeomorphism,
    f,
    g,
    domain: FundamentalDomain,
    basin: BasinCover,
    samples: int = 1000,
    seed: int = 0,
    jobs: int = 1,
) -> SampledHomeomorphism:
    """
    h on B0 by h(x) = g^-j(h(f^j(x))), the inverse taken along the basin
    branch, for the j with f^j(x) in K. h(p_f) = p_g.

    Raises:
        ConvergenceError: If an orbit walk exceeds its cap
    """
    sink_f = TorusPoint(0.0, 0.0)
    sink_g = sink_f if g is f or _amplitude(g) == 0.0 else attracting_fixed_point(g, sink_f)
    on_basin = _OnBasin(f=f, g=g, domain=domain, on_k=h.evaluator, sink_f=sink_f, sink_g=sink_g)
    rng = np.random.default_rng(seed)
    points = np.vstack([[sink_f.s, sink_f.t], _cell_samples(basin, 0, samples, rng)])
    hs, ht = evaluate_chunks(on_basin, points, jobs)
    images = np.column_stack([hs, ht])
    residual = _residual(on_basin, f, g, points, images)
    worst = float(np.max(residual, initial=0.0))
    checks = (
        Certificate.from_margin(
            "sink_to_sink", BOUNDARY_TOL - float(torus_distance(hs[0], ht[0], sink_g.s, sink_g.t)), sink_g.as_tuple()
        ),
        Certificate.from_margin("basin_equivariance", 1e-7 - worst, points[int(np.argmax(residual))].tolist(), residual=worst),
    )
    result = SampledHomeomorphism(
        points=points,
        images=images,
        cases=np.zeros(len(points), dtype=int),
        region="B0",
        evaluator=on_basin,
        certificates=checks,
    )
    logger.info(f"h on B0: {len(points)} samples, residual {worst:.3g}, sup |h - id| {result.sup_displacement:.3g}")
    return result


@dataclass(frozen=True, eq=False)
class _OnLevels:
    """h on the preimage levels of B0: the g-preimage of h(f(y)) within eps0/2 of y."""

    f: Any
    g: Any
    basin: BasinCover
    base: Callable
    eps0: float
    depth: int

    def at_level(self, s, t, level: int):
        if level == 0:
            return self.base(s, t)
        fs, ft = self.f.eval(s, t)
        ws, wt = self.at_level(fs, ft, level - 1)
        keep = _same(ws, wt, fs, ft) & ~_displaced(self.g, s, t)
        cs, ct = self.g.preimages(ws, wt)
        near = torus_distance(cs, ct, s[None, :], t[None, :]) < 0.5 * self.eps0
        count = near.sum(axis=0)
        bad = np.flatnonzero(~keep & (count != 1))
        if bad.size:
            i = int(bad[0])
            raise ConstructionError(
                f"{int(count[i])} preimage(s) of h(f(y)) within eps0/2 of y at level {level}",
                stage="extend_h_pullback",
                witness=(float(s[i]), float(t[i])),
            )
        pick = np.argmax(near, axis=0)
        cols = np.arange(s.size)
        return np.where(keep, s, cs[pick, cols]), np.where(keep, t, ct[pick, cols])

    def __call__(self, s, t):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        levels = self.basin.level_of(s, t)
        if np.any((levels < 0) | (levels > self.depth)):
            raise PreconditionError(f"points outside the first {self.depth} preimage levels of B0")
        hs, ht = s.copy(), t.copy()
        for level in np.unique(levels):
            pick = levels == level
            hs[pick], ht[pick] = self.at_level(s[pick], t[pick], int(level))
        return hs, ht


def extend_h_pullback(
    h: SampledHomeomorphism,
    f,
    g,
    basin: BasinCover,
    depth: int = 3,
    samples: int = 1000,
    eps0: Optional[float] = None,
    seed: int = 0,
    jobs: int = 1,
) -> SampledHomeomorphism:
    """
    h on the union of f^-l(B0), l <= depth, level by level from h on B0.

    Raises:
        ConstructionError: If the nearest g-preimage is missing or ambiguous
    """
    if eps0 is None:
        eps0 = f.injectivity_gap()
    depth = min(depth, basin.max_level)
    evaluator = _OnLevels(f=f, g=g, basin=basin, base=h.evaluator, eps0=eps0, depth=depth)
    rng = np.random.default_rng(seed)
    points, images, levels = [h.points], [h.images], [np.zeros(len(h.points), dtype=int)]
    per_level = {0: h.sup_displacement}
    for level in range(1, depth + 1):
        y = _cell_samples(basin, level, max(1, samples // depth), rng)
        hs, ht = evaluate_chunks(lambda s, t, level=level: evaluator.at_level(s, t, level), y, jobs)
        points.append(y)
        images.append(np.column_stack([hs, ht]))
        levels.append(np.full(len(y), level))
        per_level[level] = float(np.max(torus_distance(y[:, 0], y[:, 1], hs, ht), initial=0.0))
        logger.debug(f"pull-back level {level}: {len(y)} samples, sup |h - id| {per_level[level]:.3g}")
    points, images, levels = np.vstack(points), np.vstack(images), np.concatenate(levels)
    sup = max(per_level.values())
    checks = (
        Certificate.from_margin("pullback_closeness", f.params.epsilon - sup, None, per_level=per_level, eps0=eps0),
    )
    logger.info(f"h on {depth} pull-back level(s): {len(points)} samples, sup |h - id| {sup:.3g}")
    return SampledHomeomorphism(
        points=points,
        images=images,
        cases=levels,
        region="pullback",
        evaluator=evaluator,
        certificates=checks,
    )


# Reports


@dataclass(frozen=True)
class ResidualReport:
    """Conjugacy residuals over a sample set."""

    sup_residual: float
    sup_displacement: float
    violations: List[Tuple[int, int]]
    samples: int
    per_region: Dict[str, Dict[str, float]]
    worst_point: Optional[Tuple[float, float]] = None

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict[str, Any]:
        return {
            "sup_residual": self.sup_residual,
            "sup_displacement": self.sup_displacement,
            "injectivity_violations": to_plain(self.violations),
            "samples": self.samples,
            "per_region": to_plain(self.per_region),
            "worst_point": to_plain(self.worst_point),
        }


def conjugacy_residual(
    parts: Sequence[SampledHomeomorphism],
    f,
    g,
    evaluator: Optional[Callable] = None,
    mesh: float = 1e-3,
) -> ResidualReport:
    """
    sup d(g(h(x)), h(f(x))), sup d(h(x), x) and injectivity violations over
    the samples of the given pieces of h.

    h(f(x)) is taken from `evaluator` (the widest extension), or from each
    piece's own evaluator when none is given.
    """
    per_region: Dict[str, Dict[str, float]] = {}
    residuals, points, images = [], [], []
    for part in parts:
        r = _residual(evaluator or part.evaluator, f, g, part.points, part.images)
        residuals.append(r)
        points.append(part.points)
        images.append(part.images)
        entry = {"residual": float(np.max(r, initial=0.0)), "displacement": part.sup_displacement}
        if part.region == "pullback":
            for level in np.unique(part.cases):
                pick = part.cases == level
                entry[f"displacement_level_{int(level)}"] = float(np.max(part.displacement[pick], initial=0.0))
        per_region[part.region] = entry
    r = np.concatenate(residuals) if residuals else np.zeros(0)
    points = np.vstack(points) if points else np.zeros((0, 2))
    images = np.vstack(images) if images else np.zeros((0, 2))
    unique, first = np.unique(points, axis=0, return_index=True)
    pairs = injectivity_violations(unique, images[first], mesh)
    worst = tuple(points[int(np.argmax(r))].tolist()) if r.size else None
    displacement = torus_distance(points[:, 0], points[:, 1], images[:, 0], images[:, 1])
    report = ResidualReport(
        sup_residual=float(np.max(r, initial=0.0)),
        sup_displacement=float(np.max(displacement, initial=0.0)),
        violations=[tuple(int(v) for v in p) for p in pairs],
        samples=int(len(points)),
        per_region=per_region,
        worst_point=worst,
    )
    logger.info(
        f"conjugacy residual {report.sup_residual:.3g}, sup |h - id| {report.sup_displacement:.3g}, "
        f"{len(report.violations)} injectivity violation(s)"
    )
    return report


def escape_bound(
    f,
    in_U: Callable[[np.ndarray, np.ndarray], np.ndarray],
    in_U_prime: Callable[[np.ndarray, np.ndarray], np.ndarray],
    grid: int = 64,
    cap: int = 10_000,
) -> int:
    """
    Largest number of orbit points outside U and U' over a grid.

    U must be forward invariant: once an orbit enters it, it stops counting.
    The grid is offset by half a cell from the axes.

    Raises:
        ConvergenceError: If some orbit is still counting after cap steps
    """
    step = TWO_PI / grid
    axis = -math.pi + step * (np.arange(grid) + 0.5)
    s, t = np.meshgrid(axis, axis, indexing="ij")
    s, t = s.ravel(), t.ravel()
    counts = np.zeros(s.size, dtype=int)
    live = ~np.asarray(in_U(s, t), dtype=bool)
    for _ in range(cap):
        if not live.any():
            break
        outside = live & ~np.asarray(in_U_prime(s, t), dtype=bool)
        counts += outside
        fs, ft = f.eval(s, t)
        s, t = np.where(live, fs, s), np.where(live, ft, t)
        live &= ~np.asarray(in_U(s, t), dtype=bool)
    if np.any(counts >= cap):
        raise ConvergenceError(f"an orbit stayed outside U and U' for {cap} steps", stage="escape_bound", residual=cap)
    bound = int(counts.max(initial=0))
    logger.info(f"escape bound N = {bound} on a {grid}x{grid} grid")
    return bound


def saddle_neighborhood(neighborhood: LeafNeighborhood, width: float) -> Callable:
    """U': S together with the invariant circle s = pi."""

    def contains(s, t):
        return neighborhood.contains(s, t) | (np.abs(circle_difference(s, math.pi)) <= width)

    return contains


# Perturbation windows


def _entry_times(f, domain: FundamentalDomain, s, t, cap: int = WALK_CAP) -> np.ndarray:
    times = np.full(np.shape(s), -1, dtype=int)
    for step in range(cap):
        arrived = (times < 0) & domain.in_square(s, t)
        times[arrived] = step
        if np.all(times >= 0):
            break
        s, t = f.eval(s, t)
    return times


def window_guards(
    f,
    domain: FundamentalDomain,
    neighborhood: LeafNeighborhood,
    k: int,
    basin: BasinCover,
    L: Optional[np.ndarray] = None,
) -> List[WindowGuard]:
    """
    Sets a perturbation window must stay clear of.

    The window must miss D_r and S, must reach D_r at one common time (so it
    misses every boundary of f^-j(K)), must stay rho/4 away from L and must
    lie in B0. It may sit on the forward orbit of S; that is where g changes h.
    """

    def entry(s, t):
        times = _entry_times(f, domain, s, t)
        values, counts = np.unique(times, return_counts=True)
        return times != values[int(np.argmax(counts))]

    guards = [
        WindowGuard("fundamental_domain", domain.in_square),
        WindowGuard("S_f", neighborhood.contains),
        WindowGuard("first_entry_to_K", entry),
        WindowGuard("B0", lambda s, t: ~basin.contains(s, t, level=0)),
    ]
    if L is not None and len(L):
        tree = cKDTree(_periodic(np.asarray(L, dtype=float)), boxsize=TWO_PI)
        reach = 0.25 * f.params.rho

        def near_l(s, t):
            d, _ = tree.query(_periodic(np.column_stack([s, t])), k=1, p=np.inf)
            return d <= reach

        guards.append(WindowGuard("L", near_l))
    return guards


def _violated(guards: Sequence[WindowGuard], window: PerturbationWindow, samples: int) -> Optional[str]:
    s, t = window.samples(samples)
    for guard in guards:
        if np.asarray(guard.contains(s, t), dtype=bool).any():
            return guard.name
    return None


def place_window(
    guards: Sequence[WindowGuard],
    center: TorusPoint,
    radius: float,
    magnitude: float,
    search: int = 6,
    samples: int = 21,
) -> PerturbationWindow:
    """
    The admissible window nearest to `center` on a lattice of spacing
    `radius`, searched ring by ring out to `search` rings.

    Raises:
        GuardViolation: If every candidate touches a guarded set; names the
            guard that rejected the requested centre
    """
    first = None
    for ring in range(search + 1):
        offsets = [
            (i, j)
            for i in range(-ring, ring + 1)
            for j in range(-ring, ring + 1)
            if max(abs(i), abs(j)) == ring
        ]
        for i, j in sorted(offsets, key=lambda ij: (abs(ij[0]) + abs(ij[1]), ij)):
            window = PerturbationWindow(
                center=TorusPoint(center.s + i * radius, center.t + j * radius), radius=radius, magnitude=magnitude
            )
            name = _violated(guards, window, samples)
            if name is None:
                if ring:
                    logger.info(f"window moved to ({window.center.s:.6g}, {window.center.t:.6g})")
                return window
            first = first or name
    raise GuardViolation(first, f"no admissible window within {search} rings of ({center.s:.6g}, {center.t:.6g})")
