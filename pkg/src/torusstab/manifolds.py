"""
Unstable leaves, the basin of the sink p, and fundamental domains around it.

Leaves are polylines with tangent vectors, grown as forward images of a
short seed curve. Every vertex remembers its seed parameter, so any vertex
can be recomputed exactly as f^n(seed(u)); refinement inserts parameters
where the image polyline is coarser than the mesh.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.optimize import brentq

from torusstab.certificates import Certificate
from torusstab.circle_maps import TWO_PI, circle_difference, circle_distance, invert_branch, wrap
from torusstab.errors import ConstructionError, ConvergenceError, PreconditionError
from torusstab.hyperbolicity import BoxCover, box_images
from torusstab.torus_endo import FixedPoint, TorusPoint, torus_distance

logger = logging.getLogger(__name__)

ITERATION_CAP = 200
REFINE_ROUNDS = 40
SETTLED = 1e-9


# Seeds


@dataclass(frozen=True)
class LineSeed:
    """Segment base + u * direction, used at a fixed point."""

    base: Tuple[float, float]
    direction: Tuple[float, float]

    def point(self, u):
        u = np.asarray(u, dtype=float)
        return wrap(self.base[0] + u * self.direction[0]), wrap(self.base[1] + u * self.direction[1])

    def tangent(self, u):
        u = np.asarray(u, dtype=float)
        return np.full(u.shape, self.direction[0]), np.full(u.shape, self.direction[1])


@dataclass(frozen=True, eq=False)
class GraphSeed:
    """Graph s = gamma(t) sampled at increasing lift values t."""

    t: np.ndarray
    s: np.ndarray
    slope: np.ndarray

    def point(self, u):
        u = np.asarray(u, dtype=float)
        return wrap(np.interp(u, self.t, self.s)), wrap(u)

    def tangent(self, u):
        u = np.asarray(u, dtype=float)
        return _normalized(np.interp(u, self.t, self.slope), np.ones_like(u))


def _normalized(v1, v2):
    norm = np.hypot(v1, v2)
    norm = np.where(norm > 0, norm, 1.0)
    return v1 / norm, v2 / norm


def _push(f, seed, u, n):
    """Points and unit tangents of f^n(seed(u)); n may vary per parameter."""
    u = np.asarray(u, dtype=float)
    n = np.broadcast_to(np.asarray(n, dtype=int), u.shape)
    s, t = seed.point(u)
    v1, v2 = seed.tangent(u)
    for step in range(int(n.max(initial=0))):
        live = step < n
        j = f.jacobian(s, t)
        w1, w2 = _normalized(*j.apply(v1, v2))
        fs, ft = f.eval(s, t)
        s, t = np.where(live, fs, s), np.where(live, ft, t)
        v1, v2 = np.where(live, w1, v1), np.where(live, w2, v2)
    return s, t, v1, v2


def polyline_gaps(s, t) -> np.ndarray:
    """Max-metric lengths of consecutive polyline segments."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    return np.maximum(circle_distance(s[1:], s[:-1]), circle_distance(t[1:], t[:-1]))


# Leaves


@dataclass(frozen=True, eq=False)
class Leaf:
    """
    A piece of unstable manifold: vertex k is f^chunks[k](seed(params[k])).

    Leaves of fixed points are tiled by chunks, the images of one fundamental
    segment with parameters in `span`; the last parameter of chunk m and the
    first of chunk m + 1 name the same point. Leaves grown from a local leaf
    have a single chunk and no span.
    """

    vertices: np.ndarray
    tangents: np.ndarray
    params: np.ndarray
    chunks: np.ndarray
    seed: Any
    dynamics: Any = field(repr=False)
    origin: str = ""
    piece: str = "Gamma0"
    span: Optional[Tuple[float, float]] = None

    @property
    def s(self) -> np.ndarray:
        return self.vertices[:, 0]

    @property
    def t(self) -> np.ndarray:
        return self.vertices[:, 1]

    @property
    def iterate(self) -> int:
        return int(self.chunks.max(initial=0))

    @property
    def length(self) -> float:
        return float(polyline_gaps(self.s, self.t).sum())

    def point_at(self, u, n):
        """Recompute f^n(seed(u))."""
        s, t, _, _ = _push(self.dynamics, self.seed, u, n)
        return s, t

    def tangent_at(self, u, n):
        _, _, v1, v2 = _push(self.dynamics, self.seed, u, n)
        return v1, v2

    def evaluate(self, u, n):
        """Points and unit tangents together: (s, t, v1, v2)."""
        return _push(self.dynamics, self.seed, u, n)

    def bracket(self, k: int) -> Tuple[float, float, int]:
        """Parameters and chunk of segment k, expressed inside one chunk."""
        m = int(self.chunks[k])
        hi = float(self.params[k + 1])
        if int(self.chunks[k + 1]) != m and self.span is not None:
            hi = self.span[1]
        return float(self.params[k]), hi, m

    def preimage_points(self):
        """Leaf-preimages of every vertex."""
        s, t = self.point_at(self.params, np.maximum(self.chunks - 1, 0))
        first = self.chunks == 0
        if first.any():
            # chunk 0 has no recorded preimage: take the nearer true preimage
            ps, pt = self.dynamics.preimages(self.s[first], self.t[first])
            d = torus_distance(ps, pt, self.s[first][None, :], self.t[first][None, :])
            pick = np.argmin(d, axis=0)
            cols = np.arange(pick.size)
            s = s.copy()
            t = t.copy()
            s[first], t[first] = ps[pick, cols], pt[pick, cols]
        return s, t

    def graph_violations(self, region) -> int:
        """Runs of vertices inside the region along which t turns back."""
        inside = np.asarray(region.contains(self.s, self.t), dtype=bool)
        dt = circle_difference(self.t[1:], self.t[:-1])
        idx = np.flatnonzero(inside[1:] & inside[:-1] & (np.abs(dt) > 1e-12))
        if idx.size == 0:
            return 0
        sign = np.sign(dt[idx])
        breaks = np.flatnonzero(np.diff(idx) != 1) + 1
        return sum(1 for run in np.split(sign, breaks) if (run > 0).any() and (run < 0).any())


def _refine(f, seed, n, u, s, t, v1, v2, mesh):
    for _ in range(REFINE_ROUNDS):
        gaps = polyline_gaps(s, t)
        du = np.diff(u)
        bad = (gaps > mesh) & (np.abs(du) > 8 * np.spacing(np.maximum(np.abs(u[1:]), np.abs(u[:-1]))))
        if not bad.any():
            break
        k = np.flatnonzero(bad)
        count = np.minimum(np.ceil(gaps[k] / mesh).astype(int), 64)
        left = np.repeat(u[k], count)
        width = np.repeat(du[k], count)
        step = np.concatenate([np.arange(1, c + 1) / (c + 1) for c in count])
        new_u = left + width * step
        ns, nt, nv1, nv2 = _push(f, seed, new_u, n)
        u = np.concatenate([u, new_u])
        order = np.argsort(u, kind="stable")
        u = u[order]
        s = np.concatenate([s, ns])[order]
        t = np.concatenate([t, nt])[order]
        v1 = np.concatenate([v1, nv1])[order]
        v2 = np.concatenate([v2, nv2])[order]
    return u, s, t, v1, v2


def _thin(u, s, t, v1, v2, mesh):
    if u.size < 4:
        return u, s, t, v1, v2
    gaps = polyline_gaps(s, t)
    short = (gaps[:-1] + gaps[1:]) < 0.5 * mesh
    drop = np.zeros(u.size, dtype=bool)
    drop[1:-1] = short
    drop[1:-1] &= (np.arange(1, u.size - 1) % 2) == 1
    keep = ~drop
    return u[keep], s[keep], t[keep], v1[keep], v2[keep]


def _step(f, u, s, t, v1, v2, seed, n, mesh):
    j = f.jacobian(s, t)
    v1, v2 = _normalized(*j.apply(v1, v2))
    s, t = f.eval(s, t)
    u, s, t, v1, v2 = _refine(f, seed, n, u, s, t, v1, v2, mesh)
    return _thin(u, s, t, v1, v2, mesh)


def _assemble(parts, seed, f, origin, piece, span) -> Leaf:
    u, s, t, v1, v2, m = (np.concatenate(col) for col in zip(*parts))
    return Leaf(
        vertices=np.column_stack([s, t]),
        tangents=np.column_stack([v1, v2]),
        params=u,
        chunks=m.astype(int),
        seed=seed,
        dynamics=f,
        origin=origin,
        piece=piece,
        span=span,
    )


def _grow_tiled(f, seed, span, arc_length: float, mesh: float, origin: str, piece: str) -> Leaf:
    """Concatenate images of the fundamental segment until arc_length, or until a chunk is negligible."""
    u = np.linspace(span[0], span[1], 3)
    s, t, v1, v2 = _push(f, seed, u, 0)
    u, s, t, v1, v2 = _refine(f, seed, 0, u, s, t, v1, v2, mesh)
    parts = []
    total = 0.0
    for m in range(ITERATION_CAP):
        if m:
            u, s, t, v1, v2 = _step(f, u, s, t, v1, v2, seed, m, mesh)
        join = 0.0 if not parts else float(polyline_gaps([parts[-1][1][-1], s[0]], [parts[-1][2][-1], t[0]])[0])
        arc = total + join + np.concatenate([[0.0], np.cumsum(polyline_gaps(s, t))])
        if arc[-1] >= arc_length:
            keep = arc <= arc_length
            if keep.any():
                parts.append((u[keep], s[keep], t[keep], v1[keep], v2[keep], np.full(keep.sum(), m)))
            break
        parts.append((u, s, t, v1, v2, np.full(u.size, m)))
        if arc[-1] - total < SETTLED:
            break
        total = arc[-1]
    leaf = _assemble(parts, seed, f, origin, piece, span)
    logger.debug(f"leaf {origin}: {leaf.params.size} vertices in {len(parts)} chunks")
    return leaf


def unstable_direction(f, point: TorusPoint) -> Tuple[float, Tuple[float, float]]:
    """
    Unstable eigenvalue and unit eigenvector of Df at a saddle.

    Raises:
        PreconditionError: If the point is not a saddle
        ConstructionError: If the eigenvalues coincide
    """
    j = f.jacobian(point.s, point.t)
    values, vectors = np.linalg.eig(j.matrix())
    if np.any(np.abs(values.imag) > 1e-12):
        raise PreconditionError(f"complex eigenvalues at {point}")
    values = values.real
    if abs(values[0] - values[1]) < 1e-9:
        raise ConstructionError("defective eigen-decomposition", stage="manifolds", witness=point.as_tuple())
    unstable = np.flatnonzero(np.abs(values) > 1.0)
    if unstable.size != 1:
        raise PreconditionError(f"{point} has {unstable.size} unstable directions, expected 1")
    k = int(unstable[0])
    v = vectors[:, k].real
    v = v / np.hypot(v[0], v[1])
    # oriented toward increasing t, or increasing s when horizontal
    if v[1] < 0 or (v[1] == 0 and v[0] < 0):
        v = -v
    return float(values[k]), (float(v[0]), float(v[1]))


def _fundamental_start(f, line: LineSeed, seed: float, mu: float) -> float:
    """Parameter a whose image sits at parameter `seed` along the eigenline."""
    def along(a):
        s, t = f.eval(*line.point(a))
        ds = circle_difference(s, line.base[0])
        dt = circle_difference(t, line.base[1])
        return float(ds * line.direction[0] + dt * line.direction[1]) - seed

    lo, hi = 0.5 * seed / mu, 2.0 * seed / mu
    try:
        return float(brentq(along, lo, hi, xtol=1e-22))
    except ValueError:
        return seed / mu


def grow_unstable_fixed(
    f,
    fixed,
    arc_length: float = 50.0,
    mesh: float = 1e-3,
    seed: float = 1e-6,
    name: Optional[str] = None,
    piece: Optional[str] = None,
) -> Tuple[Leaf, Leaf]:
    """
    Both branches of the unstable manifold of a saddle fixed point.

    Args:
        f: Map (TorusEndomorphism or PerturbedMap)
        fixed: FixedPoint or TorusPoint
        arc_length: Cap on each branch's length
        mesh: Bound on the vertex spacing
        seed: Length of the initial segment along the eigenvector

    Returns:
        (positive branch, negative branch); the positive one leaves along the
        eigenvector oriented toward increasing t
    """
    point = fixed.point if isinstance(fixed, FixedPoint) else fixed
    label = name or (fixed.name if isinstance(fixed, FixedPoint) else f"({point.s:.4g}, {point.t:.4g})")
    if piece is None:
        piece = "C" if label == "C" else "Gamma0"
    mu, v = unstable_direction(f, point)
    branches = []
    for sign, suffix in ((1.0, "+"), (-1.0, "-")):
        line = LineSeed(base=point.as_tuple(), direction=(sign * v[0], sign * v[1]))
        span = (_fundamental_start(f, line, seed, abs(mu)), seed)
        branches.append(_grow_tiled(f, line, span, arc_length, mesh, f"{label}{suffix}", piece))
    logger.info(
        f"W^u({label}): branch lengths {branches[0].length:.4g}, {branches[1].length:.4g}"
    )
    return branches[0], branches[1]


def grow_leaf(f, leaf: Leaf, arc_length: float = 50.0, mesh: float = 1e-3, cap: int = 40) -> Leaf:
    """Push a local leaf forward as one curve until it reaches arc_length."""
    u = leaf.params.astype(float)
    s, t, v1, v2 = _push(f, leaf.seed, u, leaf.chunks)
    n = leaf.iterate
    for n in range(leaf.iterate + 1, leaf.iterate + cap + 1):
        u, s, t, v1, v2 = _step(f, u, s, t, v1, v2, leaf.seed, n, mesh)
        arc = np.concatenate([[0.0], np.cumsum(polyline_gaps(s, t))])
        if arc[-1] >= arc_length:
            keep = arc <= arc_length
            u, s, t, v1, v2 = u[keep], s[keep], t[keep], v1[keep], v2[keep]
            break
    return _assemble([(u, s, t, v1, v2, np.full(u.size, n))], leaf.seed, f, leaf.origin, leaf.piece, None)


def leaves_to_arrays(leaves: Sequence[Leaf]) -> Dict[str, np.ndarray]:
    """Named arrays for the artifact cache; seeds are stored by kind."""
    out = {"count": np.array(len(leaves))}
    for i, leaf in enumerate(leaves):
        out[f"{i}_vertices"] = leaf.vertices
        out[f"{i}_tangents"] = leaf.tangents
        out[f"{i}_params"] = leaf.params
        out[f"{i}_chunks"] = leaf.chunks
        out[f"{i}_names"] = np.array([leaf.origin, leaf.piece])
        out[f"{i}_span"] = np.array(leaf.span if leaf.span is not None else [], dtype=float)
        if isinstance(leaf.seed, LineSeed):
            out[f"{i}_line"] = np.array([*leaf.seed.base, *leaf.seed.direction], dtype=float)
        else:
            out[f"{i}_graph"] = np.stack([leaf.seed.t, leaf.seed.s, leaf.seed.slope])
    return out


def leaves_from_arrays(f, arrays: Dict[str, np.ndarray]) -> List[Leaf]:
    """Inverse of leaves_to_arrays, bound to the map f."""
    leaves = []
    for i in range(int(arrays["count"])):
        if f"{i}_line" in arrays:
            b0, b1, d0, d1 = (float(x) for x in arrays[f"{i}_line"])
            seed = LineSeed(base=(b0, b1), direction=(d0, d1))
        else:
            t, s, slope = arrays[f"{i}_graph"]
            seed = GraphSeed(t=t, s=s, slope=slope)
        origin, piece = (str(x) for x in arrays[f"{i}_names"])
        span = arrays[f"{i}_span"]
        leaves.append(
            Leaf(
                vertices=arrays[f"{i}_vertices"],
                tangents=arrays[f"{i}_tangents"],
                params=arrays[f"{i}_params"],
                chunks=arrays[f"{i}_chunks"].astype(int),
                seed=seed,
                dynamics=f,
                origin=origin,
                piece=piece,
                span=(float(span[0]), float(span[1])) if span.size else None,
            )
        )
    return leaves


# Local leaves inside the Gamma0 cover


def _t_overlap(a_lo, a_hi, b_lo, b_hi):
    hit = np.zeros(np.broadcast(a_lo, b_lo).shape, dtype=bool)
    for shift in (-TWO_PI, 0.0, TWO_PI):
        hit |= (a_lo + shift <= b_hi) & (b_lo <= a_hi + shift)
    return hit


def _images_meet(images: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    return (
        (images[:, 0] <= boxes[:, 1])
        & (boxes[:, 0] <= images[:, 1])
        & _t_overlap(images[:, 2], images[:, 3], boxes[:, 2], boxes[:, 3])
    )


def backward_chain(f, cover: BoxCover, end: np.ndarray, length: int, alternate: bool = True) -> np.ndarray:
    """
    A chain of cover boxes B_0, ..., B_length = end with f(B_i) meeting B_{i+1}.

    With alternate=True predecessors are taken from alternating halves of R
    (t > 0, t < 0) where possible, which follows a period-two itinerary.

    Raises:
        ConstructionError: If some box has no predecessor in the cover
    """
    boxes = cover.boxes()
    images = box_images(f, boxes)
    chain = [np.asarray(end, dtype=float)]
    for step in range(length):
        current = np.broadcast_to(chain[-1], boxes.shape)
        candidates = np.flatnonzero(_images_meet(images, current))
        if candidates.size == 0:
            raise ConstructionError(
                "box has no predecessor in the cover", stage="local_unstable", witness=chain[-1].tolist()
            )
        pick = candidates[0]
        if alternate:
            upper = chain[-1][2] > 0
            flipped = candidates[(boxes[candidates, 2] > 0) != upper]
            if flipped.size:
                pick = flipped[0]
        chain.append(boxes[pick])
    return np.array(chain[::-1])


def _pull_t(f, chain: np.ndarray, t_final: np.ndarray) -> List[np.ndarray]:
    """t-samples on every box of the chain mapping exactly onto t_final."""
    levels = [t_final]
    for box in chain[-2::-1]:
        center = 0.5 * (box[2] + box[3])
        mid = levels[-1][levels[-1].size // 2]
        branch = min(
            range(f.f2.degree),
            key=lambda b: float(circle_distance(invert_branch(f.f2, mid, b), center)),
        )
        levels.append(np.unwrap(invert_branch(f.f2, levels[-1], branch)))
    return levels[::-1]


def local_unstable_in_cover(
    f,
    chain: np.ndarray,
    length: float = 0.05,
    samples: int = 201,
    tol: float = 1e-9,
) -> Tuple[Leaf, List[float]]:
    """
    Local unstable leaf through the last box of a chain, by graph transform.

    A vertical seed in the first box is pushed along the chain. The leaf is
    the graph s = gamma(t) over a t-interval of the given length centred on
    the last box.

    Returns:
        (leaf, changes) where changes[k] is the sup difference between the
        graphs obtained from chains shortened by k and k + 1 boxes

    Raises:
        PreconditionError: If the chain is not forward consistent
        ConvergenceError: If the two longest chains disagree by more than tol
    """
    chain = np.asarray(chain, dtype=float)
    if chain.ndim != 2 or chain.shape[0] < 2:
        raise PreconditionError("a chain needs at least two boxes")
    meets = _images_meet(box_images(f, chain[:-1]), chain[1:])
    if not meets.all():
        k = int(np.flatnonzero(~meets)[0])
        raise PreconditionError(f"chain box {k} does not map onto box {k + 1}")

    last = chain[-1]
    center = 0.5 * (last[2] + last[3])
    t_final = center + np.linspace(-0.5 * length, 0.5 * length, samples)
    ts = _pull_t(f, chain, t_final)

    graphs = []
    for start in range(len(chain)):
        s = np.full(t_final.shape, 0.5 * (chain[start][0] + chain[start][1]))
        for i in range(start, len(chain) - 1):
            s, _ = f.eval(s, ts[i])
        graphs.append(s)
    changes = [float(np.max(np.abs(graphs[k] - graphs[k + 1]))) for k in range(len(graphs) - 1)]
    if changes[0] >= tol:
        raise ConvergenceError(
            f"graph transform moved by {changes[0]:.3g} on the last step",
            stage="local_unstable",
            residual=changes[0],
        )
    gamma = graphs[0]
    slope = np.gradient(gamma, t_final)
    seed = GraphSeed(t=t_final, s=gamma, slope=slope)
    v1, v2 = seed.tangent(t_final)
    leaf = Leaf(
        vertices=np.column_stack([gamma, wrap(t_final)]),
        tangents=np.column_stack([v1, v2]),
        params=t_final,
        chunks=np.zeros(t_final.size, dtype=int),
        seed=seed,
        dynamics=f,
        origin=f"chain@({0.5 * (last[0] + last[1]):.4g}, {center:.4g})",
    )
    return leaf, changes


# Basin of the sink


def _periodic_label(mask: np.ndarray) -> Tuple[np.ndarray, int]:
    """4-connected components of a mask on the torus grid."""
    labels, count = ndimage.label(mask)
    parent = list(range(count + 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a_edge, b_edge in ((labels[0, :], labels[-1, :]), (labels[:, 0], labels[:, -1])):
        for a, b in zip(a_edge, b_edge):
            if a and b:
                ra, rb = find(int(a)), find(int(b))
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(k) for k in range(count + 1)])
    merged = roots[labels]
    return merged, int(np.unique(roots[1:]).size)


@dataclass(frozen=True, eq=False)
class BasinCover:
    """
    Grid cells of the basin of the sink, by level.

    levels[i, j] is the level of the cell centred at (axis[i], axis[j]):
    0 for the immediate basin B0, l when the cell's image lies in level
    l - 1, and -1 when unassigned.
    """

    axis: np.ndarray
    levels: np.ndarray
    image_cell: np.ndarray
    attractor: TorusPoint

    @property
    def step(self) -> float:
        return TWO_PI / self.axis.size

    @property
    def max_level(self) -> int:
        return int(self.levels.max())

    def cell(self, s, t):
        n = self.axis.size
        i = np.floor((wrap(s) + math.pi) / self.step).astype(int) % n
        j = np.floor((wrap(t) + math.pi) / self.step).astype(int) % n
        return i, j

    def level_of(self, s, t):
        i, j = self.cell(s, t)
        return self.levels[i, j]

    def contains(self, s, t, level: Optional[int] = None):
        found = self.level_of(s, t)
        return found >= 0 if level is None else found == level

    def mask(self, level: int) -> np.ndarray:
        return self.levels == level

    def forward_defect(self) -> int:
        """Cells of level l >= 0 whose image cell is not of level max(l - 1, 0)."""
        flat = self.levels.ravel()
        image_level = flat[self.image_cell.ravel()]
        assigned = flat >= 0
        expected = np.maximum(flat - 1, 0)
        return int(np.count_nonzero(assigned & (image_level != expected)))

    def boundary_distance(self, s, t, level: int = 0):
        """Distance from (s, t) to the nearest cell outside the given level, minus half a cell."""
        inside = self.mask(level)
        cells = ndimage.distance_transform_edt(np.pad(inside, 1, mode="wrap"))[1:-1, 1:-1]
        i, j = self.cell(s, t)
        return (cells[i, j] - 0.5) * self.step


def basin_cover(
    f,
    attractor: Optional[TorusPoint] = None,
    grid: int = 256,
    n_iter: int = 200,
    levels: int = 4,
    radius: Optional[float] = None,
) -> BasinCover:
    """
    Basin levels of the sink on a grid.

    Cells whose orbit enters the radius-ball of the attractor within n_iter
    steps converge. B0 grows from that ball by pulling back: a converging cell
    joins when its image cell is already in B0 and it is connected to B0.

    Raises:
        PreconditionError: If the attractor is not contracting
    """
    p = attractor or TorusPoint(0.0, 0.0)
    j = f.jacobian(p.s, p.t)
    if max(abs(float(j.a11)), abs(float(j.a22))) >= 1.0:
        raise PreconditionError(f"{p} is not an attracting fixed point")
    if radius is None:
        radius = 0.5 * min(f.params.s0, f.params.delta)
    h = TWO_PI / grid
    axis = -math.pi + (np.arange(grid) + 0.5) * h
    S, T = np.meshgrid(axis, axis, indexing="ij")

    fs, ft = f.eval(S, T)
    ii = np.floor((fs + math.pi) / h).astype(int) % grid
    jj = np.floor((ft + math.pi) / h).astype(int) % grid
    image_cell = ii * grid + jj

    converged = np.zeros(S.shape, dtype=bool)
    s, t = S, T
    for _ in range(n_iter):
        converged |= torus_distance(s, t, p.s, p.t) < radius
        s, t = f.eval(s, t)
    converged |= torus_distance(s, t, p.s, p.t) < radius

    b0 = converged & (torus_distance(S, T, p.s, p.t) < radius)
    for _ in range(n_iter):
        candidate = b0 | (converged & b0.ravel()[image_cell])
        labels, _ = _periodic_label(candidate)
        keep = np.unique(labels[b0])
        grown = np.isin(labels, keep[keep > 0])
        if np.array_equal(grown, b0):
            break
        b0 = grown

    level = np.full(S.shape, -1, dtype=int)
    level[b0] = 0
    for ell in range(1, levels + 1):
        fresh = converged & (level == -1) & (level.ravel()[image_cell] == ell - 1)
        level[fresh] = ell
    logger.info(
        f"basin cover {grid}x{grid}: {converged.mean():.3f} converging, "
        f"B0 holds {b0.mean():.3f} of the cells"
    )
    return BasinCover(axis=axis, levels=level, image_cell=image_cell, attractor=p)


# Fundamental domains


def _square_boundary(center: TorusPoint, r: float, samples: int) -> np.ndarray:
    u = np.linspace(-r, r, samples, endpoint=False)
    side = np.full(samples, r)
    s = np.concatenate([u, side, -u, -side])
    t = np.concatenate([-side, u, side, -u])
    return np.column_stack([wrap(center.s + s), wrap(center.t + t)])


def _segment_distance(points: np.ndarray, polyline: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point to a closed polyline (no wrap)."""
    a = polyline
    b = np.roll(polyline, -1, axis=0)
    d = b - a
    out = np.full(points.shape[0], np.inf)
    for chunk in np.array_split(np.arange(points.shape[0]), max(1, points.shape[0] // 256)):
        q = points[chunk][:, None, :]
        w = q - a[None, :, :]
        lam = np.clip(np.sum(w * d, axis=2) / np.maximum(np.sum(d * d, axis=1), 1e-300), 0.0, 1.0)
        gap = w - lam[..., None] * d[None, :, :]
        out[chunk] = np.sqrt(np.min(np.sum(gap * gap, axis=2), axis=1))
    return out


@dataclass(frozen=True, eq=False)
class FundamentalDomain:
    """
    K = closure of D_r minus f(D_r), D_r the max-metric square of radius r.

    outer is the sampled boundary of D_r; inner is its image. entries counts
    the sampled leaf orbits confirmed to enter D_r through K.
    """

    center: TorusPoint
    radius: float
    outer: np.ndarray
    inner: np.ndarray
    dynamics: Any = field(repr=False)
    entries: int = 0

    def in_square(self, s, t, open_: bool = False):
        d = torus_distance(s, t, self.center.s, self.center.t)
        return d < self.radius if open_ else d <= self.radius

    def contains(self, s, t):
        """Membership in K: inside D_r, and the basin-branch preimage is not inside the open D_r."""
        ps, pt = self.dynamics.basin_preimage(s, t)
        return self.in_square(s, t) & ~self.in_square(ps, pt, open_=True)

    def boundary_distance(self, s, t):
        """Distance to the boundary of K; negative outside K."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        t = np.atleast_1d(np.asarray(t, dtype=float))
        outer = self.radius - torus_distance(s, t, self.center.s, self.center.t)
        local = np.column_stack(
            [circle_difference(s, self.center.s), circle_difference(t, self.center.t)]
        )
        inner_local = np.column_stack(
            [circle_difference(self.inner[:, 0], self.center.s), circle_difference(self.inner[:, 1], self.center.t)]
        )
        inner = _segment_distance(local, inner_local)
        distance = np.minimum(outer, inner)
        return np.where(self.contains(s, t), distance, -np.abs(distance))


def radius_schedule(first: float = 0.25, ratio: float = 0.8, count: int = 60) -> List[float]:
    return [first * ratio ** k for k in range(count)]


def image_separation(f, points: np.ndarray) -> Tuple[float, Optional[Tuple[float, float]]]:
    """Smallest distance between f(points) and points, with the image attaining it."""
    fs, ft = f.eval(points[:, 0], points[:, 1])
    d = torus_distance(fs[:, None], ft[:, None], points[None, :, 0], points[None, :, 1])
    k = np.unravel_index(int(np.argmin(d)), d.shape)
    return float(d[k]), (float(fs[k[0]]), float(ft[k[0]]))


def _leaf_entries(f, domain: FundamentalDomain, leaves: Sequence[Leaf], basin, per_leaf: int, cap: int):
    """
    Follow sampled leaf vertices of B0 outside D_r to their first point in
    D_r. Returns (entries, misses, witness); a miss lands in f(D_r).
    """
    starts = []
    for leaf in leaves:
        if basin is not None:
            in_b0 = basin.level_of(leaf.s, leaf.t) == 0
        else:
            in_b0 = np.abs(leaf.t) < f.params.delta
        k = np.flatnonzero(in_b0 & ~domain.in_square(leaf.s, leaf.t))
        starts.append(leaf.vertices[k[:: max(1, k.size // per_leaf)]])
    if not starts:
        return 0, 0, None
    pts = np.vstack(starts)
    s, t = pts[:, 0].copy(), pts[:, 1].copy()
    active = np.ones(s.size, dtype=bool)
    entries, misses, witness = 0, 0, None
    for _ in range(cap):
        if not active.any():
            break
        s[active], t[active] = f.eval(s[active], t[active])
        entered = active & domain.in_square(s, t)
        if entered.any():
            idx = np.flatnonzero(entered)
            missed = idx[~domain.contains(s[idx], t[idx])]
            entries += idx.size
            misses += missed.size
            if missed.size and witness is None:
                witness = (float(pts[missed[0], 0]), float(pts[missed[0], 1]))
            active &= ~entered
    return entries, misses, witness


def fundamental_domain(
    f,
    points: Optional[np.ndarray] = None,
    center: Optional[TorusPoint] = None,
    schedule: Optional[Sequence[float]] = None,
    samples: int = 400,
    leaves: Sequence[Leaf] = (),
    basin=None,
    per_leaf: int = 200,
    cap: int = 200,
) -> FundamentalDomain:
    """
    First square radius r in the schedule for which f(D_r) lies inside D_r and
    every given point lies in the interior of K.

    The points (normally L) must miss their own image. Sampled vertices of the
    given leaves that lie in B0 outside D_r are followed forward; each must
    enter D_r through K.

    Args:
        points: (m, 2) array of points that must lie in int K, or None
        leaves: Grown unstable leaves to sample
        basin: Basin levels selecting the leaf vertices in B0; |t| < delta without it

    Raises:
        PreconditionError: If f(points) meets the points
        ConstructionError: If no radius in the schedule works, or a leaf orbit skips K
    """
    p = center or TorusPoint(0.0, 0.0)
    limit = min(f.params.s0, f.params.delta)
    pts = None if points is None else np.atleast_2d(np.asarray(points, dtype=float))
    if pts is not None and pts.size:
        gap, witness = image_separation(f, pts)
        if gap <= 0.0:
            raise PreconditionError(f"f(L) meets L at {witness}")
    for r in schedule if schedule is not None else radius_schedule():
        if r >= limit:
            continue
        outer = _square_boundary(p, r, samples)
        inner = np.column_stack(f.eval(outer[:, 0], outer[:, 1]))
        if np.max(torus_distance(inner[:, 0], inner[:, 1], p.s, p.t)) >= r:
            continue
        domain = FundamentalDomain(center=p, radius=r, outer=outer, inner=inner, dynamics=f)
        if pts is not None and pts.size:
            if np.min(domain.boundary_distance(pts[:, 0], pts[:, 1])) <= 0.0:
                continue
        if leaves:
            entries, misses, witness = _leaf_entries(f, domain, leaves, basin, per_leaf, cap)
            if misses:
                raise ConstructionError(
                    f"{misses} of {entries} leaf orbits enter D_r without passing through K",
                    stage="fundamental_domain",
                    witness=witness,
                )
            domain = replace(domain, entries=entries)
        logger.info(f"fundamental domain radius {r:.4g}")
        return domain
    raise ConstructionError(
        "no radius in the schedule puts the points inside the fundamental domain",
        stage="fundamental_domain",
    )


def orbit_hits(f, domain: FundamentalDomain, s, t, cap: int = 500) -> np.ndarray:
    """Number of orbit points f^j(x), 0 <= j < cap, lying in K minus its inner boundary."""
    s = np.asarray(s, dtype=float).copy()
    t = np.asarray(t, dtype=float).copy()
    hits = np.zeros(s.shape, dtype=int)
    for _ in range(cap):
        inside = domain.contains(s, t)
        ps, pt = f.basin_preimage(s, t)
        # on the inner boundary the preimage sits on the outer one
        on_inner = inside & (torus_distance(ps, pt, domain.center.s, domain.center.t) <= domain.radius * (1 + 1e-9))
        hits += (inside & ~on_inner).astype(int)
        s, t = f.eval(s, t)
    return hits


@dataclass(frozen=True, eq=False)
class BackwardLevel:
    """The component of f^-j(K) in B0 on a local grid, with its boundaries."""

    j: int
    bounds: Tuple[float, float, float, float]
    mask: np.ndarray
    components: int
    holes: int
    outer: np.ndarray
    inner: np.ndarray

    @property
    def is_annulus(self) -> bool:
        return self.components == 1 and self.holes == 1


def _pull_polyline(f, points: np.ndarray, j: int) -> np.ndarray:
    s, t = points[:, 0], points[:, 1]
    for _ in range(j):
        s, t = f.basin_preimage(s, t)
    return np.column_stack([s, t])


def _refined_axis(lo: float, hi: float, hole: np.ndarray, grid: int) -> np.ndarray:
    """Uniform axis over [lo, hi] merged with a uniform axis over the hole's span."""
    pad = 2 * (hi - lo) / grid
    h_lo, h_hi = float(hole.min()), float(hole.max())
    h_pad = 2 * (h_hi - h_lo) / grid
    return np.unique(
        np.concatenate(
            [np.linspace(lo - pad, hi + pad, grid), np.linspace(h_lo - h_pad, h_hi + h_pad, grid)]
        )
    )


def backward_levels(f, domain: FundamentalDomain, k: int, grid: int = 128) -> List[BackwardLevel]:
    """
    f^-j(K) inside B0 for j = 1..k, gridded over the box spanned by the
    pulled-back outer boundary.
    """
    out = []
    for j in range(1, k + 1):
        outer = _pull_polyline(f, domain.outer, j)
        inner = _pull_polyline(f, domain.inner, j)
        s_lo, s_hi = outer[:, 0].min(), outer[:, 0].max()
        t_lo, t_hi = outer[:, 1].min(), outer[:, 1].max()
        s_axis = _refined_axis(s_lo, s_hi, inner[:, 0], grid)
        t_axis = _refined_axis(t_lo, t_hi, inner[:, 1], grid)
        S, T = np.meshgrid(s_axis, t_axis, indexing="ij")
        fs, ft = f.iterate(S, T, j)
        mask = domain.contains(fs, ft)
        _, components = ndimage.label(mask)
        _, outside = ndimage.label(np.pad(~mask, 1, constant_values=True))
        out.append(
            BackwardLevel(
                j=j,
                bounds=(float(s_lo), float(s_hi), float(t_lo), float(t_hi)),
                mask=mask,
                components=int(components),
                holes=int(outside) - 1,
                outer=outer,
                inner=inner,
            )
        )
        logger.debug(f"f^-{j}(K): {components} component(s), {outside - 1} hole(s)")
    return out


def cover_distance(cover: BoxCover, s, t):
    """Distance from points to the cover, measured on t (cover columns) and on s (cover rows)."""
    boxes = cover.boxes()
    s = np.atleast_1d(np.asarray(s, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    ds = np.maximum(0.0, np.maximum(boxes[:, 0].min() - s, s - boxes[:, 1].max()))
    dt = np.full(t.shape, np.inf)
    for lo, hi in cover.t_projection():
        mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
        dt = np.minimum(dt, np.maximum(0.0, np.abs(circle_difference(t, mid)) - half))
    return np.maximum(ds, dt)


def sink_branch(leaves: Sequence[Leaf], attractor: Optional[TorusPoint] = None) -> Leaf:
    """The fixed-point branch whose far end lies closest to the sink."""
    p = attractor or TorusPoint(0.0, 0.0)
    tiled = [leaf for leaf in leaves if leaf.span is not None]
    if not tiled:
        raise PreconditionError("no leaves grown from a fixed point")
    return min(tiled, key=lambda leaf: float(torus_distance(leaf.s[-1], leaf.t[-1], p.s, p.t)))


def choose_pullback_depth(
    f,
    domain: FundamentalDomain,
    leaf: Leaf,
    cover: BoxCover,
    neighborhood: float = 0.05,
    kmax: int = 40,
    basin=None,
) -> int:
    """
    Smallest k for which the leaf's points of f^-k(K) in B0 are all within
    `neighborhood` of the Gamma0 cover.

    Pass the branch of W^u(A) that runs through B0 to the sink. A vertex x
    counts at depth k when f^k(x) lies in K; the distance is measured at x
    itself. Only vertices in B0 (basin level 0, or |t| < delta without a
    basin) count: windings of the leaf outside B0 reach K from elsewhere.

    Raises:
        ConstructionError: If no k up to kmax works
    """
    if basin is not None:
        in_b0 = basin.level_of(leaf.s, leaf.t) == 0
    else:
        in_b0 = np.abs(leaf.t) < f.params.delta
    xs, xt = leaf.s[in_b0], leaf.t[in_b0]
    s, t = xs.copy(), xt.copy()
    for k in range(1, kmax + 1):
        s, t = f.eval(s, t)
        hit = domain.contains(s, t)
        if not hit.any():
            continue
        worst = float(np.max(cover_distance(cover, xs[hit], xt[hit])))
        if worst <= neighborhood:
            logger.info(f"pullback depth {k}: {int(hit.sum())} leaf points of f^-k(K) within {worst:.3g} of Gamma0")
            return k
    raise ConstructionError(
        f"no k <= {kmax} brings f^-k(K) near Gamma0 along {leaf.origin}", stage="fundamental_domain"
    )


# Global structure


def _cell_keys(s, t, step: float, n: int, margin: int) -> np.ndarray:
    i = np.floor((wrap(s) + math.pi) / step).astype(np.int64)
    j = np.floor((wrap(t) + math.pi) / step).astype(np.int64)
    offsets = np.arange(-margin, margin + 1)
    di, dj = np.meshgrid(offsets, offsets, indexing="ij")
    ki = (i[:, None] + di.ravel()[None, :]) % n
    kj = (j[:, None] + dj.ravel()[None, :]) % n
    return np.unique((ki * n + kj).ravel())


def _key_centres(keys: np.ndarray, step: float, n: int):
    return -math.pi + (keys // n + 0.5) * step, -math.pi + (keys % n + 0.5) * step


def _grown_interior(leaf: Leaf) -> np.ndarray:
    """Vertices whose image, with a cell of slack, lies on the grown leaf."""
    if leaf.span is None:
        return np.zeros(leaf.params.size, dtype=bool)
    return leaf.chunks <= leaf.iterate - 2


def attracting_set_check(
    f,
    leaves: Sequence[Leaf],
    fixed: Sequence[FixedPoint],
    step: float = 4e-3,
    margin: int = 2,
    include_leaves: bool = True,
) -> Certificate:
    """
    Grid check that N = (dilated leaves and fixed points) satisfies f(N) in N.

    Source and target are the same set N. Cells whose only leaf vertices sit
    on the last two generations of a truncated leaf are not pushed: their
    images continue the leaf past where it was grown. Pass attracting fixed
    points only: a saddle whose unstable manifold is not among the leaves,
    such as C, pushes its cells out.
    """
    n = int(math.ceil(TWO_PI / step))
    step = TWO_PI / n
    source, target = [], []
    for fp in fixed:
        keys = _cell_keys(np.array([fp.point.s]), np.array([fp.point.t]), step, n, margin)
        source.append(keys)
        target.append(keys)
    if include_leaves:
        for leaf in leaves:
            interior = _grown_interior(leaf)
            target.append(_cell_keys(leaf.s, leaf.t, step, n, margin))
            if interior.any():
                source.append(_cell_keys(leaf.s[interior], leaf.t[interior], step, n, margin))
    if not source:
        return Certificate.from_margin("attracting_set", step, None, cells=0, escaped=0, include_leaves=include_leaves)
    source_keys = np.unique(np.concatenate(source))
    target_keys = np.unique(np.concatenate(target))
    cs, ct = _key_centres(source_keys, step, n)
    fs, ft = f.eval(cs, ct)
    image_keys = (np.floor((fs + math.pi) / step).astype(np.int64) % n) * n + (
        np.floor((ft + math.pi) / step).astype(np.int64) % n
    )
    escaped = ~np.isin(image_keys, target_keys)
    count = int(np.count_nonzero(escaped))
    witness = None
    if count:
        k = int(np.flatnonzero(escaped)[0])
        witness = (float(cs[k]), float(ct[k]))
    return Certificate.from_margin(
        "attracting_set",
        step if count == 0 else -float(count),
        witness,
        cells=int(source_keys.size),
        escaped=count,
        include_leaves=include_leaves,
    )


def basic_piece_order(
    f,
    leaves: Sequence[Leaf],
    attractor: Optional[TorusPoint] = None,
    radius: float = 0.01,
) -> List[Tuple[str, str]]:
    """
    Pairs (piece, "p") for every piece whose unstable leaves reach the ball
    around the sink: W^u(piece) meets W^s(p).
    """
    p = attractor or TorusPoint(0.0, 0.0)
    pairs = set()
    for leaf in leaves:
        if np.any(torus_distance(leaf.s, leaf.t, p.s, p.t) < radius):
            pairs.add((leaf.piece, "p"))
    return sorted(pairs)
