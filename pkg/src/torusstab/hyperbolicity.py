"""
Axiom A certificates for the torus map.

Sampled checks of the covering condition, the almost vertical cone field
on R = {|s| < s0, delta < |t| < pi - delta}, horizontal contraction, and
injectivity on the saddle piece Gamma0, plus box covers of Gamma0 and of
the expanding Cantor set K1 of f2.

R is handled as its two components R+ (t > 0) and R- (t < 0).
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from torusstab.certificates import Certificate, CertificateReport
from torusstab.circle_maps import MonotonePiecewiseMap, TWO_PI, bisect_increasing, wrap
from torusstab.errors import ConstructionError, PreconditionError
from torusstab.torus_endo import TorusEndomorphism

logger = logging.getLogger(__name__)

SLACK = 1e-14


@dataclass(frozen=True)
class Rectangle:
    """Axis-aligned rectangle [s_lo, s_hi] x [t_lo, t_hi]."""

    s_lo: float
    s_hi: float
    t_lo: float
    t_hi: float

    def __post_init__(self):
        if not (self.s_lo < self.s_hi and self.t_lo < self.t_hi):
            raise PreconditionError(f"empty rectangle {self}")
        if self.s_hi - self.s_lo > math.pi or self.t_hi - self.t_lo > math.pi:
            raise PreconditionError(f"rectangle wider than pi: {self}")

    def grid(self, n: int):
        """n x n cell-midpoint samples, flattened."""
        s = self.s_lo + (np.arange(n) + 0.5) * (self.s_hi - self.s_lo) / n
        t = self.t_lo + (np.arange(n) + 0.5) * (self.t_hi - self.t_lo) / n
        ss, tt = np.meshgrid(s, t, indexing="ij")
        return ss.ravel(), tt.ravel()

    def contains(self, s, t):
        return (s >= self.s_lo) & (s <= self.s_hi) & (t >= self.t_lo) & (t <= self.t_hi)


def region_components(f: TorusEndomorphism) -> Dict[str, Rectangle]:
    """R+ and R- as rectangles."""
    p = f.params
    return {
        "R+": Rectangle(-p.s0, p.s0, p.delta, math.pi - p.delta),
        "R-": Rectangle(-p.s0, p.s0, -math.pi + p.delta, -p.delta),
    }


def _inside_region(f: TorusEndomorphism, region: Rectangle) -> bool:
    return any(
        region.s_lo >= r.s_lo - SLACK
        and region.s_hi <= r.s_hi + SLACK
        and region.t_lo >= r.t_lo - SLACK
        and region.t_hi <= r.t_hi + SLACK
        for r in region_components(f).values()
    )


@dataclass(frozen=True)
class ConeParams:
    """Almost vertical cone |v1 / v2| <= rho."""

    rho: float


@dataclass(frozen=True)
class BoxCover:
    """
    Boxes on a lattice over R.

    Box (i, j) is [s_min + i*hs, s_min + (i+1)*hs] x [t_edges[j], t_edges[j+1]].
    Column `gap_column` spans (-delta, delta) and never holds a box.
    `history` holds the survivor mask after each pruning round.
    """

    s_min: float
    hs: float
    t_edges: np.ndarray
    gap_column: int
    mask: np.ndarray
    depth: int
    history: Tuple[np.ndarray, ...] = field(default=(), repr=False, compare=False)

    @property
    def count(self) -> int:
        return int(self.mask.sum())

    def boxes(self, mask: Optional[np.ndarray] = None) -> np.ndarray:
        """Boxes as rows (s_lo, s_hi, t_lo, t_hi), lexicographic by origin."""
        i, j = np.nonzero(self.mask if mask is None else mask)
        s_lo = self.s_min + i * self.hs
        return np.column_stack([s_lo, s_lo + self.hs, self.t_edges[j], self.t_edges[j + 1]])

    def rectangles(self) -> List[Rectangle]:
        return [Rectangle(*row) for row in self.boxes()]

    def contains(self, s, t):
        """True where (s, t) lies in a surviving closed box."""
        s = np.asarray(s, dtype=float)
        t = wrap(np.asarray(t, dtype=float))
        ni, nj = self.mask.shape
        fi = (s - self.s_min) / self.hs
        hit = np.zeros(np.broadcast(s, t).shape, dtype=bool)
        for es in (0.0, 1e-9):
            i = np.floor(fi - es).astype(int)
            for side in ("right", "left"):
                j = np.searchsorted(self.t_edges, t, side=side) - 1
                ok = (i >= 0) & (i < ni) & (j >= 0) & (j < nj)
                hit |= ok & self.mask[np.where(ok, i, 0), np.where(ok, j, 0)]
        return hit

    def t_projection(self) -> List[Tuple[float, float]]:
        """Merged t-intervals of the surviving columns."""
        out: List[Tuple[float, float]] = []
        for j in np.flatnonzero(self.mask.any(axis=0)):
            lo, hi = float(self.t_edges[j]), float(self.t_edges[j + 1])
            if out and abs(out[-1][1] - lo) < 1e-12:
                out[-1] = (out[-1][0], hi)
            else:
                out.append((lo, hi))
        return out


def _sin_range(lo, hi):
    """Exact range of sin over [lo, hi] (arrays, width < 2pi)."""
    smin = np.minimum(np.sin(lo), np.sin(hi))
    smax = np.maximum(np.sin(lo), np.sin(hi))
    peak = math.pi / 2 + TWO_PI * np.ceil((lo - math.pi / 2) / TWO_PI)
    trough = -math.pi / 2 + TWO_PI * np.ceil((lo + math.pi / 2) / TWO_PI)
    return np.where(trough <= hi, -1.0, smin), np.where(peak <= hi, 1.0, smax)


def box_images(f: TorusEndomorphism, boxes: np.ndarray) -> np.ndarray:
    """
    Outward-rounded image boxes of boxes inside R.

    On |s| < s0 the map is (lambda*s + eps*sin t, f2(t)), so the image box
    is exact up to SLACK. t-images start in [-pi, pi) and may extend past pi.
    """
    p = f.params
    if p.s0 > p.s1:
        raise PreconditionError("box images need s0 inside the linear zone of f1")
    s_lo, s_hi, t_lo, t_hi = boxes.T
    sin_lo, sin_hi = _sin_range(t_lo, t_hi)
    img_s_lo = p.lam * s_lo + p.epsilon * sin_lo - SLACK
    img_s_hi = p.lam * s_hi + p.epsilon * sin_hi + SLACK
    img_t_lo = f.f2.lift(t_lo) - SLACK
    img_t_hi = f.f2.lift(t_hi) + SLACK
    shift = TWO_PI * np.floor((img_t_lo + math.pi) / TWO_PI)
    return np.column_stack([img_s_lo, img_s_hi, img_t_lo - shift, img_t_hi - shift])


class _Lattice:
    """Range queries and range marking on a BoxCover lattice."""

    def __init__(self, cover: BoxCover):
        self.cover = cover
        self.ni, self.nj = cover.mask.shape

    def _ranges(self, images: np.ndarray):
        """Index ranges [i0, i1) x [j0, j1) of boxes meeting each image; two pieces per image."""
        s_lo, s_hi, t_lo, t_hi = images.T
        c = self.cover
        i0 = np.clip(np.ceil((s_lo - c.s_min) / c.hs).astype(int) - 1, 0, self.ni)
        i1 = np.clip(np.floor((s_hi - c.s_min) / c.hs).astype(int) + 1, 0, self.ni)
        pieces = [(t_lo, np.minimum(t_hi, math.pi)), (np.full_like(t_lo, -math.pi), t_hi - TWO_PI)]
        out = []
        for lo, hi in pieces:
            j0 = np.clip(np.searchsorted(c.t_edges, lo, side="left") - 1, 0, self.nj)
            j1 = np.clip(np.searchsorted(c.t_edges, hi, side="right"), 0, self.nj)
            empty = hi < lo
            j1 = np.where(empty, j0, np.maximum(j1, j0))
            out.append((i0, np.maximum(i1, i0), j0, j1))
        return out

    def any_hit(self, images: np.ndarray, mask: np.ndarray) -> np.ndarray:
        table = np.zeros((self.ni + 1, self.nj + 1), dtype=np.int64)
        table[1:, 1:] = mask.astype(np.int64).cumsum(0).cumsum(1)
        hit = np.zeros(len(images), dtype=bool)
        for i0, i1, j0, j1 in self._ranges(images):
            total = table[i1, j1] - table[i0, j1] - table[i1, j0] + table[i0, j0]
            hit |= total > 0
        return hit

    def mark(self, images: np.ndarray) -> np.ndarray:
        diff = np.zeros((self.ni + 1, self.nj + 1), dtype=np.int64)
        for i0, i1, j0, j1 in self._ranges(images):
            ok = (i1 > i0) & (j1 > j0)
            for a, b, v in ((i0, j0, 1), (i1, j0, -1), (i0, j1, -1), (i1, j1, 1)):
                np.add.at(diff, (a[ok], b[ok]), v)
        return diff.cumsum(0).cumsum(1)[: self.ni, : self.nj] > 0


def gamma0_cover(f: TorusEndomorphism, depth: int = 12, resolution: float = 2e-3) -> BoxCover:
    """
    Box cover of the set of points whose whole orbit stays in R.

    Boxes whose image misses the surviving set are removed (forward), then
    boxes hit by no survivor image are removed (backward). The two passes
    alternate at least `depth` times and then until nothing changes.

    Raises:
        ConstructionError: If no box survives
    """
    p = f.params
    ni = max(1, int(math.ceil(2.0 * p.s0 / resolution)))
    hs = 2.0 * p.s0 / ni
    half = max(1, int(math.ceil((math.pi - 2.0 * p.delta) / resolution)))
    lower = np.linspace(-math.pi + p.delta, -p.delta, half + 1)
    t_edges = np.concatenate([lower, -lower[::-1]])
    nj = len(t_edges) - 1
    gap_column = half

    region = np.ones((ni, nj), dtype=bool)
    region[:, gap_column] = False
    cover = BoxCover(s_min=-p.s0, hs=hs, t_edges=t_edges, gap_column=gap_column,
                     mask=region, depth=depth)
    lattice = _Lattice(cover)
    idx = np.nonzero(region)
    images = box_images(f, cover.boxes(region))

    mask = region.copy()
    history = [mask.copy()]
    rounds = 0
    while True:
        before = mask.copy()
        alive = mask[idx] & lattice.any_hit(images, mask)
        mask = np.zeros_like(region)
        mask[idx[0][alive], idx[1][alive]] = True
        mask &= lattice.mark(images[alive]) & region
        rounds += 1
        history.append(mask.copy())
        if not mask.any():
            raise ConstructionError("Gamma0 cover is empty", stage="gamma0_cover")
        if rounds >= depth and np.array_equal(before, mask):
            break
        if rounds >= 8 * depth:
            logger.warning("Gamma0 pruning did not stabilize")
            break

    result = BoxCover(s_min=-p.s0, hs=hs, t_edges=t_edges, gap_column=gap_column,
                      mask=mask, depth=depth, history=tuple(history))
    logger.info(f"Gamma0 cover: {result.count} boxes after {rounds} rounds")
    return result


def forward_defect(f: TorusEndomorphism, cover: BoxCover) -> int:
    """Number of surviving boxes whose image box misses the cover."""
    lattice = _Lattice(cover)
    images = box_images(f, cover.boxes())
    return int(np.sum(~lattice.any_hit(images, cover.mask)))


@dataclass(frozen=True)
class CantorCover:
    """
    Interval covers of K1 per depth.

    Intervals are lift arcs [a, b] with a in [-pi, pi); level 0 is the arc
    [delta, 2pi - delta]. parents[d][k] is the level d-1 interval that
    interval k of level d is a branch preimage of.
    """

    levels: Tuple[np.ndarray, ...]
    parents: Tuple[np.ndarray, ...]

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @property
    def intervals(self) -> np.ndarray:
        return self.levels[-1]

    def count(self, depth: int) -> int:
        return len(self.levels[depth])

    def total_length(self, depth: int) -> float:
        level = self.levels[depth]
        return float(np.sum(level[:, 1] - level[:, 0]))

    def contraction_ratios(self, depth: int) -> np.ndarray:
        """Length of each interval at `depth` over the length of its parent."""
        child = self.levels[depth]
        parent = self.levels[depth - 1][self.parents[depth]]
        return (child[:, 1] - child[:, 0]) / (parent[:, 1] - parent[:, 0])

    def contains(self, t, depth: Optional[int] = None, tol: float = 1e-12):
        level = self.levels[-1 if depth is None else depth]
        t = np.atleast_1d(wrap(t))
        hit = np.zeros(t.shape, dtype=bool)
        for shift in (0.0, TWO_PI):
            x = t[:, None] + shift
            hit |= ((x >= level[None, :, 0] - tol) & (x <= level[None, :, 1] + tol)).any(axis=1)
        return hit


def cantor_cover(f2: MonotonePiecewiseMap, delta: float, depth: int = 15) -> CantorCover:
    """
    Intervals of {t : f2^j(t) not in (-delta, delta), 0 <= j <= depth}.

    Each level pulls the previous one back through both branches of f2.
    Arcs never contain 0, so a branch preimage of an arc is one interval.
    """
    levels = [np.array([[delta, TWO_PI - delta]])]
    parents = [np.array([-1])]
    for _ in range(depth):
        prev = levels[-1]
        rows, owners = [], []
        for branch in range(f2.degree):
            a, _ = f2.branch_interval(branch)
            y_lo = a + np.mod(prev[:, 0] - a, TWO_PI)
            y_hi = y_lo + (prev[:, 1] - prev[:, 0])
            lo = bisect_increasing(f2.lift, y_lo, -math.pi, math.pi)
            hi = bisect_increasing(f2.lift, y_hi, -math.pi, math.pi)
            rows.append(np.column_stack([lo, hi]))
            owners.append(np.arange(len(prev)))
        level = np.concatenate(rows)
        owner = np.concatenate(owners)
        order = np.argsort(level[:, 0], kind="stable")
        levels.append(level[order])
        parents.append(owner[order])
    cover = CantorCover(levels=tuple(levels), parents=tuple(parents))
    logger.info(
        f"Cantor cover depth {depth}: {len(cover.intervals)} intervals, "
        f"length {cover.total_length(depth):.6g}"
    )
    return cover


def certify_covering(f: TorusEndomorphism, grid: int = 1000) -> Certificate:
    """
    Min of the first-coordinate partial f1'(s) + sin(t) phi'(s) over a
    grid x grid sample of the torus; positive means f is a covering map.
    """
    axis = -math.pi + (np.arange(grid) + 0.5) * TWO_PI / grid
    worst, where = math.inf, None
    for row in np.array_split(np.arange(grid), max(1, grid // 250)):
        s, t = np.meshgrid(axis[row], axis, indexing="ij")
        a11 = f.jacobian(s.ravel(), t.ravel()).a11
        k = int(np.argmin(a11))
        if a11[k] < worst:
            worst, where = float(a11[k]), (float(s.ravel()[k]), float(t.ravel()[k]))
    return Certificate.from_margin("covering", worst, where, samples=grid * grid)


def _check_region(f: TorusEndomorphism, region: Rectangle, name: str) -> None:
    if not _inside_region(f, region):
        raise PreconditionError(f"{name}: region {region} is not inside R+ or R-")


def certify_cone_field(
    f: TorusEndomorphism, cone: ConeParams, region: Rectangle, grid: int = 400
) -> Certificate:
    """
    Invariance and expansion of the cone |v1/v2| <= rho on a component of R.

    For v = (+-rho, 1) the image ratio must stay below
    lambda*rho/2 + eps/2 (itself below rho), |w2| must be at least 2 and
    |Df v| / |v| at least 1.9.

    Raises:
        PreconditionError: If the region is not inside R
    """
    _check_region(f, region, "certify_cone_field")
    p = f.params
    s, t = region.grid(grid)
    j = f.jacobian(s, t)
    bound = p.lam * cone.rho / 2.0 + p.epsilon / 2.0
    worst_ratio, min_w2, expansion = 0.0, math.inf, math.inf
    witness = None
    for v1 in (cone.rho, -cone.rho):
        w1, w2 = j.apply(v1, 1.0)
        ratio = np.abs(w1 / w2)
        k = int(np.argmax(ratio))
        if ratio[k] > worst_ratio:
            worst_ratio, witness = float(ratio[k]), (float(s[k]), float(t[k]), v1)
        min_w2 = min(min_w2, float(np.min(np.abs(w2))))
        norm = np.hypot(w1, w2) / math.hypot(v1, 1.0)
        expansion = min(expansion, float(np.min(norm)))
    margin = min(bound - worst_ratio, cone.rho - bound, min_w2 - 2.0, expansion - 1.9)
    return Certificate.from_margin(
        "cone_field",
        margin,
        witness,
        bound=bound,
        worst_ratio=worst_ratio,
        min_vertical=min_w2,
        expansion_floor=expansion,
        region=[region.s_lo, region.s_hi, region.t_lo, region.t_hi],
    )


def certify_horizontal_contraction(
    f: TorusEndomorphism, region: Rectangle, grid: int = 400
) -> Certificate:
    """Max of a11 on the region; horizontal vectors stay horizontal since a21 = 0."""
    _check_region(f, region, "certify_horizontal_contraction")
    s, t = region.grid(grid)
    j = f.jacobian(s, t)
    k = int(np.argmax(j.a11))
    rate = float(j.a11[k])
    return Certificate.from_margin(
        "horizontal_contraction",
        1.0 - rate,
        (float(s[k]), float(t[k])),
        max_rate=rate,
        max_a21=float(np.max(np.abs(j.a21))),
    )


def _sign_margin(f: TorusEndomorphism, boxes: np.ndarray) -> Tuple[float, Optional[list]]:
    if len(boxes) == 0:
        return math.inf, None
    images = box_images(f, boxes)
    upper = boxes[:, 2] >= 0.0
    signed = np.where(upper, images[:, 0], -images[:, 1])
    k = int(np.argmin(signed))
    return float(signed[k]), boxes[k].tolist()


def certify_injectivity_gamma0(f: TorusEndomorphism, cover: BoxCover) -> Certificate:
    """
    Boxes in t > 0 must map into {s > 0}, boxes in t < 0 into {s < 0}.

    Checked on every pruning round of the cover, together with the bound
    eps*sin(delta) - lambda*s0 valid on all of R.
    """
    p = f.params
    margin, witness = math.inf, None
    for mask in cover.history or (cover.mask,):
        m, w = _sign_margin(f, cover.boxes(mask))
        if m < margin:
            margin, witness = m, w
    analytic = p.epsilon * math.sin(p.delta) - p.lam * p.s0
    violating = 0
    boxes = cover.boxes()
    if len(boxes):
        images = box_images(f, boxes)
        upper = boxes[:, 2] >= 0.0
        violating = int(np.sum(np.where(upper, images[:, 0] <= 0, images[:, 1] >= 0)))
    return Certificate.from_margin(
        "injectivity_gamma0",
        min(margin, analytic),
        witness,
        box_margin=margin,
        analytic_bound=analytic,
        violating_boxes=violating,
        boxes=len(boxes),
    )


@dataclass(frozen=True)
class BasicPiece:
    name: str
    kind: str
    evidence: Dict[str, object]


@dataclass(frozen=True)
class AxiomAReport:
    """The four basic pieces with their numeric evidence."""

    pieces: List[BasicPiece]
    certificates: CertificateReport

    @property
    def passed(self) -> bool:
        return self.certificates.passed

    def to_dict(self) -> Dict[str, object]:
        from torusstab.certificates import to_plain

        return {
            "pass": self.passed,
            "pieces": [
                {"name": piece.name, "kind": piece.kind, "evidence": to_plain(piece.evidence)}
                for piece in self.pieces
            ],
            "certificates": self.certificates.to_dict(),
        }


def assemble_axiomA_report(
    f: TorusEndomorphism,
    certificates: Sequence[Certificate],
    gamma_cover: BoxCover,
    cantor: CantorCover,
) -> AxiomAReport:
    """
    List the basic pieces p, C, K = {pi} x K1 and Gamma0 with evidence.

    Adds the fixed-point and expansion checks to the given certificates;
    any failure marks the report failed.
    """
    checks = list(certificates)
    fixed = {fp.name: fp for fp in f.fixed_points()}

    p_eig = fixed["p"].eigenvalues
    checks.append(
        Certificate.from_margin("attracting_p", 1.0 - max(abs(e) for e in p_eig), fixed["p"].point.as_tuple())
    )
    c_eig = fixed["C"].eigenvalues
    checks.append(
        Certificate.from_margin(
            "saddle_C",
            min(max(abs(e) for e in c_eig) - 1.0, 1.0 - min(abs(e) for e in c_eig)),
            fixed["C"].point.as_tuple(),
        )
    )
    level = cantor.intervals
    t = np.linspace(level[:, 0], level[:, 1], 9).T.ravel()
    k_expansion = min(float(np.min(f.f2.derivative(t))), float(f.f1.derivative(math.pi)))
    checks.append(Certificate.from_margin("expanding_K", k_expansion - 1.0, None))
    a_res = max(
        abs(float(v))
        for name in ("A", "-A")
        for v in np.subtract(f.eval(*fixed[name].point.as_tuple()), fixed[name].point.as_tuple())
    )
    checks.append(Certificate.from_margin("gamma0_nonempty", gamma_cover.count, None, boxes=gamma_cover.count))
    checks.append(Certificate.from_margin("fixed_A", 1e-10 - a_res, fixed["A"].point.as_tuple()))

    by_name = {c.name: c for c in certificates}
    pieces = [
        BasicPiece("p", "attracting fixed point", {"point": fixed["p"].point.as_tuple(), "eigenvalues": p_eig}),
        BasicPiece("C", "saddle fixed point", {"point": fixed["C"].point.as_tuple(), "eigenvalues": c_eig}),
        BasicPiece(
            "K",
            "expanding set {pi} x K1",
            {"intervals": len(level), "length": cantor.total_length(cantor.depth), "expansion": k_expansion},
        ),
        BasicPiece(
            "Gamma0",
            "saddle basic piece",
            {
                "boxes": gamma_cover.count,
                "A": fixed["A"].point.as_tuple(),
                "-A": fixed["-A"].point.as_tuple(),
                "certificates": [n for n in by_name if n.startswith(("cone", "horizontal", "injectivity"))],
            },
        ),
    ]
    report = AxiomAReport(pieces=pieces, certificates=CertificateReport("axiom A", checks))
    logger.info(f"Axiom A report: {'pass' if report.passed else 'FAIL'}")
    return report


def certify_axiomA(
    f: TorusEndomorphism,
    grid: int = 1000,
    cone_grid: int = 400,
    depth: int = 12,
    resolution: float = 2e-3,
    cantor_depth: int = 15,
    cover: Optional[BoxCover] = None,
) -> Tuple[AxiomAReport, BoxCover, CantorCover]:
    """Run every Axiom A certificate and assemble the report; a given Gamma0 cover is reused."""
    cone = ConeParams(rho=f.params.rho)
    certificates = [certify_covering(f, grid)]
    for name, region in region_components(f).items():
        cone_cert = certify_cone_field(f, cone, region, cone_grid)
        contraction = certify_horizontal_contraction(f, region, cone_grid)
        certificates.append(_renamed(cone_cert, f"cone_field_{name}"))
        certificates.append(_renamed(contraction, f"horizontal_contraction_{name}"))
    if cover is None:
        cover = gamma0_cover(f, depth=depth, resolution=resolution)
    certificates.append(certify_injectivity_gamma0(f, cover))
    cantor = cantor_cover(f.f2, f.params.delta, depth=cantor_depth)
    return assemble_axiomA_report(f, certificates, cover, cantor), cover, cantor


def _renamed(cert: Certificate, name: str) -> Certificate:
    return Certificate(name=name, passed=cert.passed, margin=cert.margin,
                       witness=cert.witness, details=cert.details)
