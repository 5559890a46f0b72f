"""
Intersections of unstable leaves with each other inside the immediate basin.

I1 is the set of points z in B0 where two leaves of W^u(Gamma0) cross and
z has one leaf-preimage in B0 and the other in B1. Strong transversality
asks every such crossing to be transverse; L collects the forward images of
I1 that sit in B0.
"""

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import root

from torusstab.certificates import Certificate, CertificateReport, to_plain
from torusstab.circle_maps import circle_difference, circle_distance, wrap
from torusstab.hyperbolicity import BoxCover, CantorCover, region_components
from torusstab.manifolds import (
    BasinCover,
    Leaf,
    backward_chain,
    grow_leaf,
    grow_unstable_fixed,
    image_separation,
    local_unstable_in_cover,
)
from torusstab.torus_endo import torus_distance

logger = logging.getLogger(__name__)

# Newton fractions may leave their piece by this much
HERMITE_REACH = 0.25


def approximate_Wu_gamma(
    f,
    cover: Optional[BoxCover] = None,
    arc_length: float = 50.0,
    mesh: float = 1e-3,
    seed: float = 1e-6,
    chains: int = 1,
    chain_length: int = 8,
) -> List[Leaf]:
    """
    Leaves of W^u(Gamma0): both branches at A and -A, plus `chains` leaves
    grown from local leaves through boxes of the Gamma0 cover.
    """
    fixed = {fp.name: fp for fp in f.base.fixed_points()}
    leaves: List[Leaf] = []
    for name in ("A", "-A"):
        leaves.extend(grow_unstable_fixed(f, fixed[name], arc_length=arc_length, mesh=mesh, seed=seed))
    if cover is not None and chains > 0:
        boxes = cover.boxes()
        upper = boxes[boxes[:, 2] > 0]
        # end boxes spread over the middle of R+
        targets = np.linspace(1.0, math.pi - 1.0, chains)
        for target in targets:
            centres = 0.5 * (upper[:, 2] + upper[:, 3])
            end = upper[int(np.argmin(np.abs(centres - target)))]
            chain = backward_chain(f, cover, end, chain_length)
            local, _ = local_unstable_in_cover(f, chain, length=0.5 * (end[3] - end[2]))
            leaves.append(grow_leaf(f, local, arc_length=arc_length, mesh=mesh))
    logger.info(f"W^u(Gamma0) approximated by {len(leaves)} leaves")
    return leaves


@dataclass(frozen=True)
class IntersectionPoint:
    """A crossing of two leaves in B0; leaf a arrives from B1, leaf b from B0."""

    s: float
    t: float
    leaf_a: str
    leaf_b: str
    angle: float
    tangent_a: Tuple[float, float]
    tangent_b: Tuple[float, float]
    preimage_a: Tuple[float, float]
    preimage_b: Tuple[float, float]
    residual: float
    tangent_error: float
    # (u_a, chunk_a, u_b, chunk_b) locating the crossing on both leaves
    params: Tuple[float, int, float, int] = (math.nan, -1, math.nan, -1)

    def to_dict(self) -> Dict[str, Any]:
        return to_plain(
            {
                "s": self.s,
                "t": self.t,
                "leaves": [self.leaf_a, self.leaf_b],
                "angle": self.angle,
                "tangents": [list(self.tangent_a), list(self.tangent_b)],
                "preimages": [list(self.preimage_a), list(self.preimage_b)],
            }
        )


@dataclass(frozen=True)
class _Segments:
    leaf: np.ndarray
    index: np.ndarray
    p0: np.ndarray
    p1: np.ndarray


@dataclass(frozen=True)
class _Pieces:
    """
    Leaf pieces between consecutive vertices as cubic Hermite arcs.

    Piece m starts at `start[m]` and ends at `start[m] + chord[m]` (local
    coordinates); its end tangents `d0`, `d1` are scaled by the chord length.
    """

    leaf: np.ndarray
    index: np.ndarray
    start: np.ndarray
    chord: np.ndarray
    d0: np.ndarray
    d1: np.ndarray

    @property
    def size(self) -> int:
        return int(self.leaf.size)

    def point(self, m: int, alpha: float) -> Tuple[float, float]:
        a = float(alpha)
        local = (
            (a**3 - 2.0 * a**2 + a) * self.d0[m]
            + (3.0 * a**2 - 2.0 * a**3) * self.chord[m]
            + (a**3 - a**2) * self.d1[m]
        )
        return float(wrap(self.start[m, 0] + local[0])), float(wrap(self.start[m, 1] + local[1]))

    def derivative(self, m: int, alpha: float) -> Tuple[float, float]:
        a = float(alpha)
        v = (
            (3.0 * a**2 - 4.0 * a + 1.0) * self.d0[m]
            + (6.0 * a - 6.0 * a**2) * self.chord[m]
            + (3.0 * a**2 - 2.0 * a) * self.d1[m]
        )
        return float(v[0]), float(v[1])

    def images(self, f) -> _Segments:
        """Image chords f(start) -> f(end)."""
        end = self.start + self.chord
        s0, t0 = f.eval(self.start[:, 0], self.start[:, 1])
        s1, t1 = f.eval(wrap(end[:, 0]), wrap(end[:, 1]))
        return _Segments(self.leaf, self.index, np.column_stack([s0, t0]), np.column_stack([s1, t1]))


def _cross(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _local(p, origin):
    return np.stack(
        [circle_difference(p[..., 0], origin[..., 0]), circle_difference(p[..., 1], origin[..., 1])], axis=-1
    )


def _along(tangents: np.ndarray, chord: np.ndarray) -> np.ndarray:
    unit = tangents / np.linalg.norm(tangents, axis=1, keepdims=True)
    return unit * np.where(np.sum(unit * chord, axis=1) < 0, -1.0, 1.0)[:, None]


def _leaf_pieces(leaves: Sequence[Leaf], basin: BasinCover) -> Tuple[_Pieces, _Pieces]:
    """Pieces with both ends in B1, and pieces with both ends in B0."""
    parts = {1: [], 0: []}
    for number, leaf in enumerate(leaves):
        if leaf.params.size < 2:
            continue
        level = basin.level_of(leaf.s, leaf.t)
        chord = _local(leaf.vertices[1:], leaf.vertices[:-1])
        length = np.hypot(chord[:, 0], chord[:, 1])
        for tag in (1, 0):
            # chunk joins repeat a vertex and give zero-length pieces
            k = np.flatnonzero((level[:-1] == tag) & (level[1:] == tag) & (length > 0))
            if k.size == 0:
                continue
            c = chord[k]
            scale = length[k][:, None]
            parts[tag].append(
                (
                    np.full(k.size, number),
                    k,
                    leaf.vertices[k],
                    c,
                    _along(leaf.tangents[k], c) * scale,
                    _along(leaf.tangents[k + 1], c) * scale,
                )
            )

    def stack(items):
        if not items:
            empty = np.zeros((0, 2))
            return _Pieces(np.zeros(0, dtype=int), np.zeros(0, dtype=int), empty, empty, empty, empty)
        return _Pieces(*(np.concatenate(col) for col in zip(*items)))

    return stack(parts[1]), stack(parts[0])


def _candidate_pairs(a: _Segments, b: _Segments, cell: float):
    """Index pairs (i, j) of segments whose midpoints share or neighbour a hash cell."""
    def keys(seg, di=0, dj=0):
        mid = seg.p0 + 0.5 * _local(seg.p1, seg.p0)
        i = np.floor((mid[:, 0] + math.pi) / cell).astype(np.int64) + di
        j = np.floor((mid[:, 1] + math.pi) / cell).astype(np.int64) + dj
        return i * 1_000_003 + j

    kb = keys(b)
    order = np.argsort(kb)
    kb = kb[order]
    left, right = [], []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            ka = keys(a, di, dj)
            lo = np.searchsorted(kb, ka, side="left")
            hi = np.searchsorted(kb, ka, side="right")
            count = hi - lo
            left.append(np.repeat(np.arange(ka.size), count))
            right.append(order[np.concatenate([np.arange(l, h) for l, h in zip(lo, hi)]).astype(int)]
                         if count.sum() else np.zeros(0, dtype=int))
    return np.concatenate(left), np.concatenate(right)


def _segment_hits(a: _Segments, b: _Segments, i: np.ndarray, j: np.ndarray):
    """Pairs whose segments cross, with crossing fractions along each."""
    p, r = a.p0[i], _local(a.p1[i], a.p0[i])
    q = p + _local(b.p0[j], a.p0[i])
    w = _local(b.p1[j], b.p0[j])
    denom = _cross(r, w)
    safe = np.where(np.abs(denom) > 0, denom, 1.0)
    alpha = _cross(q - p, w) / safe
    beta = _cross(q - p, r) / safe
    hit = (np.abs(denom) > 0) & (alpha >= 0) & (alpha < 1) & (beta >= 0) & (beta < 1)
    return i[hit], j[hit], alpha[hit], beta[hit]


def _upward(v1, v2):
    flip = -1.0 if v2 < 0 or (v2 == 0 and v1 < 0) else 1.0
    return flip * float(v1), flip * float(v2)


def _unit_upward(v1, v2):
    norm = math.hypot(float(v1), float(v2))
    return _upward(float(v1) / norm, float(v2) / norm)


def _pushed_tangent(f, pieces: _Pieces, m: int, alpha: float):
    """Df at the preimage applied to the leaf tangent there."""
    ys, yt = pieces.point(m, alpha)
    w1, w2 = f.jacobian(ys, yt).apply(*pieces.derivative(m, alpha))
    return float(w1), float(w2)


def _refine(f, a: _Pieces, i: int, b: _Pieces, j: int, alpha: float, beta: float):
    """Newton solve of f(piece_a(alpha)) = f(piece_b(beta)); returns (alpha, beta, gap)."""
    def residual(x):
        fa = f.eval(*a.point(i, x[0]))
        fb = f.eval(*b.point(j, x[1]))
        return [float(circle_difference(fa[0], fb[0])), float(circle_difference(fa[1], fb[1]))]

    def jacobian(x):
        wa = _pushed_tangent(f, a, i, x[0])
        wb = _pushed_tangent(f, b, j, x[1])
        return [[wa[0], -wb[0]], [wa[1], -wb[1]]]

    sol = root(residual, [alpha, beta], jac=jacobian, method="hybr", options={"xtol": 1e-13})
    x = sol.x
    return float(x[0]), float(x[1]), math.hypot(*residual(x))


def _crossing_param(leaf: Leaf, k: int, alpha: float) -> Tuple[float, int]:
    """Seed parameter and iterate of the image of piece k at fraction alpha."""
    lo, hi, n = leaf.bracket(k)
    return lo + min(max(alpha, 0.0), 1.0) * (hi - lo), n + 1


def detect_I1(
    f,
    leaves: Sequence[Leaf],
    basin: BasinCover,
    mesh: float = 1e-3,
    tol: float = 1e-9,
    tangential: float = 1e-6,
) -> Tuple[List[IntersectionPoint], List[Tuple[float, float]]]:
    """
    Crossings of f(leaf pieces in B1) with f(leaf pieces in B0).

    Pieces are Hermite arcs through consecutive vertices. Image chords are
    intersected on a hash grid, then each hit is solved for the two preimage
    fractions by Newton iteration. A hit is kept when the crossing lies in
    B0 and its preimages lie in B1 and B0.

    Returns:
        (intersections, failures) where failures are the points where the
        crossing was tangential (angle below `tangential`) or the solve did
        not reach tol
    """
    pieces_b1, pieces_b0 = _leaf_pieces(leaves, basin)
    if pieces_b1.size == 0 or pieces_b0.size == 0:
        logger.warning("no leaf pieces in one of B1 and B0")
        return [], []
    from_b1, from_b0 = pieces_b1.images(f), pieces_b0.images(f)
    longest = max(
        float(np.max(np.abs(_local(from_b1.p1, from_b1.p0)))),
        float(np.max(np.abs(_local(from_b0.p1, from_b0.p0)))),
    )
    i, j = _candidate_pairs(from_b1, from_b0, 1.01 * max(longest, mesh))
    i, j, alpha, beta = _segment_hits(from_b1, from_b0, i, j)

    found: List[IntersectionPoint] = []
    failures: List[Tuple[float, float]] = []
    for a_idx, b_idx, al, be in zip(i.tolist(), j.tolist(), alpha.tolist(), beta.tolist()):
        ua, ub, gap = _refine(f, pieces_b1, a_idx, pieces_b0, b_idx, al, be)
        pre_a = pieces_b1.point(a_idx, ua)
        pre_b = pieces_b0.point(b_idx, ub)
        zs, zt = f.eval(*pre_a)
        z = (float(zs), float(zt))
        if gap >= tol:
            failures.append(z)
            continue
        if not (-HERMITE_REACH <= ua <= 1.0 + HERMITE_REACH and -HERMITE_REACH <= ub <= 1.0 + HERMITE_REACH):
            # the crossing belongs to a neighbouring piece, which carries its own hit
            continue
        levels = basin.level_of(np.array([z[0], pre_a[0], pre_b[0]]), np.array([z[1], pre_a[1], pre_b[1]]))
        if levels.tolist() != [0, 1, 0]:
            logger.debug(f"crossing at {z} dropped: levels {levels.tolist()}")
            continue
        na, nb = int(pieces_b1.leaf[a_idx]), int(pieces_b0.leaf[b_idx])
        ka, kb = int(pieces_b1.index[a_idx]), int(pieces_b0.index[b_idx])
        # leaves converging on the sink cross at points closer than tol: one numerical point
        if any(torus_distance(z[0], z[1], p.s, p.t) < 10 * tol for p in found):
            continue
        va = _unit_upward(*_pushed_tangent(f, pieces_b1, a_idx, ua))
        vb = _unit_upward(*_pushed_tangent(f, pieces_b0, b_idx, ub))
        angle = math.atan2(abs(va[0] * vb[1] - va[1] * vb[0]), abs(va[0] * vb[0] + va[1] * vb[1]))
        if angle < tangential:
            failures.append(z)
            continue
        measured_a = _unit_upward(*_local(from_b1.p1[a_idx], from_b1.p0[a_idx]))
        measured_b = _unit_upward(*_local(from_b0.p1[b_idx], from_b0.p0[b_idx]))
        error = max(
            math.hypot(measured_a[0] - va[0], measured_a[1] - va[1]),
            math.hypot(measured_b[0] - vb[0], measured_b[1] - vb[1]),
        )
        leaf_a, leaf_b = leaves[na], leaves[nb]
        param_a = _crossing_param(leaf_a, ka, ua)
        param_b = _crossing_param(leaf_b, kb, ub)
        found.append(
            IntersectionPoint(
                s=z[0],
                t=z[1],
                leaf_a=leaf_a.origin,
                leaf_b=leaf_b.origin,
                angle=angle,
                tangent_a=va,
                tangent_b=vb,
                preimage_a=pre_a,
                preimage_b=pre_b,
                residual=gap,
                tangent_error=error,
                params=(param_a[0], param_a[1], param_b[0], param_b[1]),
            )
        )
    found.sort(key=lambda p: (p.t, p.s))
    logger.info(f"I1: {len(found)} crossings, {len(failures)} failures")
    return found, failures


def two_branches_check(f, points: Sequence[IntersectionPoint], basin: BasinCover, tol: float = 1e-5) -> Certificate:
    """
    Each crossing has exactly two preimages, and they are its two leaf
    preimages: one in B1, one in B0.
    """
    margin, witness = math.inf, None
    for p in points:
        ps, pt = f.preimages(np.array([p.s]), np.array([p.t]))
        ps, pt = ps[:, 0], pt[:, 0]
        da = torus_distance(ps, pt, p.preimage_a[0], p.preimage_a[1])
        db = torus_distance(ps, pt, p.preimage_b[0], p.preimage_b[1])
        ia, ib = int(np.argmin(da)), int(np.argmin(db))
        levels = sorted(basin.level_of(ps, pt).tolist())
        if ps.size != 2 or ia == ib or levels != [0, 1]:
            m = -1.0
        else:
            m = tol - max(float(da[ia]), float(db[ib]))
        if m < margin:
            margin, witness = m, (p.s, p.t)
    if not points:
        margin = tol
    return Certificate.from_margin("two_branches", margin, witness, crossings=len(points), tol=tol)


def outside_nonwandering_check(
    f,
    points: Sequence[IntersectionPoint],
    cover: Optional[BoxCover] = None,
    cantor: Optional[CantorCover] = None,
    width: float = 1e-3,
) -> Certificate:
    """
    No crossing lies in R or R', in a Gamma0 cover box, in a strip of the
    given width around {pi} x K1, or on a fixed point. Margin is the distance
    to the nearest fixed point.
    """
    if not points:
        return Certificate.from_margin("I1_outside_Omega", 1.0, None, crossings=0)
    s = np.array([p.s for p in points])
    t = np.array([p.t for p in points])
    inside = np.zeros(s.size, dtype=bool)
    for region in region_components(f).values():
        inside |= region.contains(s, t)
    if cover is not None:
        inside |= cover.contains(s, t)
    if cantor is not None:
        inside |= cantor.contains(t) & (circle_distance(s, math.pi) <= width)
    fixed = np.array([fp.point.as_tuple() for fp in f.fixed_points()])
    d = torus_distance(s[:, None], t[:, None], fixed[None, :, 0], fixed[None, :, 1])
    nearest = d.min(axis=1)
    if inside.any():
        k = int(np.flatnonzero(inside)[0])
        return Certificate.from_margin(
            "I1_outside_Omega", -float(inside.sum()), (float(s[k]), float(t[k])), crossings=len(points)
        )
    k = int(np.argmin(nearest))
    return Certificate.from_margin(
        "I1_outside_Omega", float(nearest[k]), (float(s[k]), float(t[k])), crossings=len(points)
    )


def tangent_signs_check(points: Sequence[IntersectionPoint]) -> Certificate:
    """
    At each crossing the upward-oriented tangents have first components of
    opposite signs and positive second components.
    """
    margin, witness = math.inf, None
    for p in points:
        (a1, a2), (b1, b2) = p.tangent_a, p.tangent_b
        m = min(abs(a1), abs(b1)) if a1 * b1 < 0 else -max(abs(a1), abs(b1), 1e-300)
        m = min(m, a2, b2)
        if m < margin:
            margin, witness = m, (p.s, p.t)
    if not points:
        margin = -1.0
    return Certificate.from_margin("tangent_signs", margin, witness, crossings=len(points))


def compute_L(f, points: Sequence[IntersectionPoint], basin: BasinCover) -> np.ndarray:
    """
    L as (m, 2) coordinates: each point of I1 in level l is pushed l times
    into B0.
    """
    if not points:
        return np.zeros((0, 2))
    s = np.array([p.s for p in points])
    t = np.array([p.t for p in points])
    level = np.maximum(basin.level_of(s, t), 0)
    for step in range(int(level.max()) + 1):
        move = level > step
        if move.any():
            ms, mt = f.eval(s[move], t[move])
            s[move], t[move] = ms, mt
    return np.column_stack([s, t])


def verify_L_disjoint(f, L: np.ndarray) -> Certificate:
    """Margin is the smallest distance between f(L) and L; an empty L passes."""
    if L.shape[0] == 0:
        return Certificate.from_margin("L_disjoint_from_image", 1.0, None, points=0)
    gap, witness = image_separation(f, L)
    return Certificate.from_margin("L_disjoint_from_image", gap, witness, points=int(L.shape[0]))


@dataclass(frozen=True)
class TransversalityReport:
    intersections: List[IntersectionPoint]
    failures: List[Tuple[float, float]]
    L: np.ndarray
    certificates: CertificateReport
    theta_min: float

    @property
    def passed(self) -> bool:
        return self.certificates.passed

    def to_dict(self) -> Dict[str, Any]:
        return {
            "pass": self.passed,
            "theta_min": self.theta_min,
            "intersections": [p.to_dict() for p in self.intersections],
            "failures": to_plain(self.failures),
            "L": to_plain(self.L),
            "certificates": self.certificates.to_dict(),
        }


def strong_transversality_report(
    f,
    leaves: Sequence[Leaf],
    basin: BasinCover,
    mesh: float = 1e-3,
    theta_min: float = 1e-3,
    cover: Optional[BoxCover] = None,
    cantor: Optional[CantorCover] = None,
) -> TransversalityReport:
    """
    Detect I1 and certify transversality, tangent signs, separation, the two
    preimage branches, distance from the nonwandering set and L.
    """
    points, failures = detect_I1(f, leaves, basin, mesh=mesh)
    checks: List[Certificate] = [
        Certificate.from_margin("I1_nonempty", float(len(points)), None, crossings=len(points)),
        Certificate.from_margin(
            "no_tangential_crossings", 1.0 if not failures else -float(len(failures)),
            failures[0] if failures else None,
        ),
    ]
    if points:
        worst = min(points, key=lambda p: p.angle)
        checks.append(
            Certificate.from_margin("transversality_angle", worst.angle - theta_min, (worst.s, worst.t),
                                    angle=worst.angle, theta_min=theta_min)
        )
        err = max(points, key=lambda p: p.tangent_error)
        checks.append(
            Certificate.from_margin("tangent_formula_agreement", 1e-3 - err.tangent_error, (err.s, err.t),
                                    error=err.tangent_error)
        )
        s = np.array([p.s for p in points])
        t = np.array([p.t for p in points])
        if len(points) > 1:
            d = torus_distance(s[:, None], t[:, None], s[None, :], t[None, :])
            d[np.diag_indices_from(d)] = np.inf
            separation = float(d.min())
        else:
            separation = math.inf
        checks.append(Certificate.from_margin("I1_separation", min(separation, 1.0), None, separation=separation))
        pre_a = np.array([p.preimage_a for p in points])
        pre_b = np.array([p.preimage_b for p in points])
        membership = (
            np.all(basin.contains(s, t, level=0))
            and np.all(basin.contains(pre_a[:, 0], pre_a[:, 1], level=1))
            and np.all(basin.contains(pre_b[:, 0], pre_b[:, 1], level=0))
        )
        checks.append(
            Certificate.from_margin(
                "I1_in_basin", float(np.min(basin.boundary_distance(s, t))) if membership else -1.0, None
            )
        )
    checks.append(tangent_signs_check(points))
    checks.append(two_branches_check(f, points, basin))
    checks.append(outside_nonwandering_check(f, points, cover=cover, cantor=cantor, width=mesh))
    L = compute_L(f, points, basin)
    checks.append(verify_L_disjoint(f, L))
    report = CertificateReport("strong transversality", checks)
    for check in report.failures:
        logger.warning(f"transversality check {check.name} failed (margin {check.margin:.3g})")
    return TransversalityReport(
        intersections=points, failures=failures, L=L, certificates=report, theta_min=theta_min
    )
