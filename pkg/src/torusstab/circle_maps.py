"""
One-dimensional ingredients of the torus map.

Builds the circle maps f1 (attractor at 0, repeller at pi), f2 (degree two,
derived from the doubling map with an attracting fixed point at 0), the
coupling bump phi, and the semiconjugacy of f2 to the doubling map.

Circle maps are stored as lifts: monotone cubic Hermite splines through
knots (point, value, slope). Odd maps keep only the knots on [0, pi] and
are evaluated as sign(t) * G(|t|), which makes oddness exact.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import CubicHermiteSpline

from torusstab.certificates import Certificate, CertificateReport
from torusstab.errors import ConfigError, ConstructionError, ConvergenceError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi

ROOT_TOL = 1e-14
ROOT_CAP = 200


def wrap(x):
    """
    Reduce angles into [-pi, pi).

    Uses round-half-to-even on x / 2pi, then moves the +pi edge to -pi.
    """
    x = np.asarray(x, dtype=float)
    r = x - TWO_PI * np.rint(x / TWO_PI)
    r = np.where(r >= math.pi, r - TWO_PI, r)
    r = np.where(r < -math.pi, r + TWO_PI, r)
    return r if r.ndim else float(r)


def circle_difference(a, b):
    """Signed shortest difference a - b on the circle."""
    return wrap(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))


def circle_distance(a, b):
    """Unsigned circle distance."""
    return np.abs(circle_difference(a, b))


def bisect_increasing(
    func: Callable[[np.ndarray], np.ndarray],
    target: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    tol: float = ROOT_TOL,
    cap: int = ROOT_CAP,
) -> np.ndarray:
    """
    Vectorized bisection for an increasing function.

    Args:
        func: Increasing function, evaluated elementwise on arrays
        target: Values to hit
        lo: Lower brackets (func(lo) <= target)
        hi: Upper brackets (func(hi) >= target)
        tol: Stop once every bracket is narrower than tol
        cap: Iteration cap

    Returns:
        Midpoints of the final brackets
    """
    target = np.asarray(target, dtype=float)
    lo = np.broadcast_to(np.asarray(lo, dtype=float), target.shape).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=float), target.shape).copy()
    for _ in range(cap):
        mid = 0.5 * (lo + hi)
        below = func(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= tol):
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class MapParams:
    """Constants of the example map; sigma is derived."""

    epsilon: float
    lam: float
    delta: float
    s0: float
    s1: float
    rho: float
    sigma: float

    @classmethod
    def create(
        cls,
        epsilon: float = 0.01,
        lam: float = 0.001,
        delta: float = 0.5,
        s0: float = 0.05,
        s1: float = 0.1,
        rho: float = 0.006,
    ) -> "MapParams":
        """
        Build parameters and derive sigma = epsilon*sin(delta)/(1-lambda).

        Inequalities between the constants are not enforced here; they are
        certified by validate_example_constraints.

        Raises:
            ConfigError: If a value is not a positive finite number or lambda >= 1
        """
        values = dict(epsilon=epsilon, lam=lam, delta=delta, s0=s0, s1=s1, rho=rho)
        for name, value in values.items():
            if not (math.isfinite(value) and value > 0):
                raise ConfigError(f"{name} must be a positive finite number, got {value}")
        if lam >= 1.0:
            raise ConfigError(f"lambda must be < 1, got {lam}")
        if not (delta < math.pi / 2 and 2.5 * s1 < math.pi and s0 < math.pi / 2):
            raise ConfigError("delta, s0, s1 out of the constructible range")
        sigma = epsilon * math.sin(delta) / (1.0 - lam)
        return cls(sigma=sigma, **values)

    def invariant_margins(self) -> List[Tuple[str, float]]:
        """Margins of the parameter inequalities (positive iff satisfied)."""
        return [
            ("lambda_below_epsilon", self.epsilon - self.lam),
            ("epsilon_below_one", 1.0 - self.epsilon),
            ("delta_in_range", min(self.delta, math.pi / 2 - self.delta)),
            ("s0_below_s1", self.s1 - self.s0),
            ("s1_below_quarter_pi", math.pi / 4 - self.s1),
            ("cone_aperture", self.rho - self.epsilon / (2.0 - self.lam)),
            ("sigma_below_s0", self.s0 - self.sigma),
            ("s0_above_sigma_plus_rho_pi", self.s0 - (self.sigma + self.rho * math.pi)),
        ]


@dataclass(frozen=True)
class MonotonePiecewiseMap:
    """
    Circle map given by a monotone lift.

    For odd maps, knots cover [0, pi]; otherwise [-pi, pi]. The lift
    satisfies lift(t + 2pi) = lift(t) + degree * 2pi.
    """

    knots: Tuple[Tuple[float, float, float], ...]
    degree: int
    odd: bool
    name: str = "map"
    _spline: CubicHermiteSpline = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        points = np.array([k[0] for k in self.knots])
        values = np.array([k[1] for k in self.knots])
        slopes = np.array([k[2] for k in self.knots])
        spline = CubicHermiteSpline(points, values, slopes)
        object.__setattr__(self, "_spline", spline)
        object.__setattr__(self, "_derivative", spline.derivative())
        object.__setattr__(self, "_second", spline.derivative(2))

    def _reduce(self, t):
        t = np.asarray(t, dtype=float)
        k = np.floor((t + math.pi) / TWO_PI)
        return t - TWO_PI * k, k

    def lift(self, t):
        """Lift value F(t)."""
        tr, k = self._reduce(t)
        if self.odd:
            base = np.sign(tr) * self._spline(np.abs(tr))
        else:
            base = self._spline(tr)
        out = base + TWO_PI * self.degree * k
        return out if out.ndim else float(out)

    def __call__(self, t):
        """Circle value, reduced into [-pi, pi)."""
        return wrap(self.lift(t))

    def derivative(self, t):
        tr, _ = self._reduce(t)
        out = self._derivative(np.abs(tr) if self.odd else tr)
        return out if np.ndim(out) else float(out)

    def second_derivative(self, t):
        tr, _ = self._reduce(t)
        if self.odd:
            out = np.sign(tr) * self._second(np.abs(tr))
        else:
            out = self._second(tr)
        return out if np.ndim(out) else float(out)

    def full_knots(self) -> List[Tuple[float, float, float]]:
        """Knots over the whole period (mirrored for odd maps)."""
        if not self.odd:
            return list(self.knots)
        mirrored = [(-p, -v, m) for p, v, m in reversed(self.knots) if p > 0]
        return mirrored + list(self.knots)

    def branch_interval(self, branch: int) -> Tuple[float, float]:
        """Lift-value range [a, a + 2pi) covered by a branch."""
        a = -self.degree * math.pi + TWO_PI * branch
        return a, a + TWO_PI


@dataclass(frozen=True)
class BumpProfile:
    """
    Even coupling profile: height on |s| <= plateau, zero on |s| >= cutoff,
    quintic smoothstep transition in between.
    """

    plateau: float
    cutoff: float
    height: float

    def _u(self, s):
        a = np.abs(wrap(s))
        return np.clip((a - self.plateau) / (self.cutoff - self.plateau), 0.0, 1.0), a

    def __call__(self, s):
        u, _ = self._u(s)
        out = self.height * (1.0 - smoothstep5(u))
        return out if np.ndim(out) else float(out)

    def derivative(self, s):
        u, _ = self._u(s)
        sign = np.sign(wrap(s))
        out = -self.height * sign * smoothstep5_prime(u) / (self.cutoff - self.plateau)
        return out if np.ndim(out) else float(out)


def smoothstep5(u):
    """6u^5 - 15u^4 + 10u^3 on [0, 1]."""
    return u * u * u * (u * (6.0 * u - 15.0) + 10.0)


def smoothstep5_prime(u):
    return 30.0 * u * u * (1.0 - u) * (1.0 - u)


def _check_hermite_segments(
    knots: Sequence[Tuple[float, float, float]], stage: str
) -> None:
    """
    Reject knot systems whose Hermite interpolant may fail to be monotone.

    Uses the Fritsch-Carlson sufficient condition alpha^2 + beta^2 <= 9.
    """
    for (p0, v0, m0), (p1, v1, m1) in zip(knots[:-1], knots[1:]):
        width = p1 - p0
        if width <= 0:
            raise ConstructionError(f"knots not increasing at {p0}", stage=stage)
        secant = (v1 - v0) / width
        if secant <= 0 or m0 <= 0 or m1 <= 0:
            raise ConstructionError(
                f"non-increasing segment [{p0:.6g}, {p1:.6g}] (secant {secant:.6g})",
                stage=stage,
                witness=p0,
            )
        alpha, beta = m0 / secant, m1 / secant
        if alpha * alpha + beta * beta > 9.0:
            raise ConstructionError(
                f"slopes {m0:.6g}, {m1:.6g} incompatible with average slope "
                f"{secant:.6g} on [{p0:.6g}, {p1:.6g}]",
                stage=stage,
                witness=p0,
            )


def build_f1(params: MapParams) -> MonotonePiecewiseMap:
    """
    Degree-one odd map, linear lambda*s on |s| <= s1, fixing pi with slope > 1.

    The slope rises linearly from lambda to 6*epsilon on [s1, 2.5*s1] and
    from 6*epsilon to its value at pi on [2.5*s1, pi].
    """
    eps, lam, s1 = params.epsilon, params.lam, params.s1
    y2 = lam * s1 + 1.5 * s1 * (lam + 6.0 * eps) / 2.0
    secant3 = (math.pi - y2) / (math.pi - 2.5 * s1)
    slope_pi = 2.0 * secant3 - 6.0 * eps
    knots = (
        (0.0, 0.0, lam),
        (s1, lam * s1, lam),
        (2.5 * s1, y2, 6.0 * eps),
        (math.pi, math.pi, slope_pi),
    )
    _check_hermite_segments(knots, stage="build_f1")
    if slope_pi <= 1.0:
        raise ConstructionError(f"slope at pi is {slope_pi:.6g}, not repelling", stage="build_f1")
    f1 = MonotonePiecewiseMap(knots=knots, degree=1, odd=True, name="f1")
    logger.debug(f"f1 built: slope at pi {slope_pi:.6g}")
    return f1


def build_f2(params: MapParams) -> MonotonePiecewiseMap:
    """
    Degree-two odd map with fixed points 0, +-delta, f2'(0) = 1/2 and
    lift(pi - delta/3) = 2pi - delta.

    Linear with slope (2pi - 2delta)/(pi - 4delta/3) on [delta, pi - delta/3].

    Raises:
        ConstructionError: If the slope constraints cannot be met
    """
    delta = params.delta
    mid = (TWO_PI - 2.0 * delta) / (math.pi - 4.0 * delta / 3.0)
    if mid <= 2.0:
        raise ConstructionError(f"middle slope {mid:.6g} is not > 2", stage="build_f2")
    knots = (
        (0.0, 0.0, 0.5),
        (delta, delta, mid),
        (math.pi - delta / 3.0, TWO_PI - delta, mid),
        (math.pi, TWO_PI, 3.0),
    )
    _check_hermite_segments(knots, stage="build_f2")
    f2 = MonotonePiecewiseMap(knots=knots, degree=2, odd=True, name="f2")
    logger.debug(f"f2 built: middle slope {mid:.6g}")
    return f2


def build_phi(
    params: MapParams, f1: MonotonePiecewiseMap, grid: int = 100_000
) -> BumpProfile:
    """
    Build the coupling bump with transition on [3*s1, pi - s0].

    Args:
        params: Map parameters
        f1: First-coordinate circle map
        grid: Points used to verify |phi'| < f1'

    Raises:
        ConstructionError: If the dominance fails; witness is the worst s
    """
    plateau = 3.0 * params.s1
    cutoff = math.pi - params.s0
    if cutoff <= plateau:
        raise ConstructionError("bump transition interval is empty", stage="build_phi")
    phi = BumpProfile(plateau=plateau, cutoff=cutoff, height=params.epsilon)
    s = np.linspace(-math.pi, math.pi, grid, endpoint=False)
    slack = f1.derivative(s) - np.abs(phi.derivative(s))
    worst = int(np.argmin(slack))
    if slack[worst] <= 0:
        raise ConstructionError(
            f"|phi'| >= f1' at s={s[worst]:.6g}", stage="build_phi", witness=float(s[worst])
        )
    return phi


def invert_branch(m: MonotonePiecewiseMap, y, branch: int):
    """
    Solve m(t) = y on one branch.

    Branch b covers lift values [-degree*pi + 2pi*b, -degree*pi + 2pi*(b+1)).

    Args:
        m: Circle map
        y: Target angle(s)
        branch: Branch index in [0, degree)

    Returns:
        t in [-pi, pi] with m(t) = y mod 2pi
    """
    if not 0 <= branch < m.degree:
        raise ValueError(f"branch {branch} outside [0, {m.degree})")
    y = np.asarray(y, dtype=float)
    a, _ = m.branch_interval(branch)
    target = a + np.mod(y - a, TWO_PI)
    t = bisect_increasing(m.lift, target, -math.pi, math.pi)
    return t if np.ndim(t) else float(t)


def eval_lift(m: MonotonePiecewiseMap, t):
    """Lift value F(t) for any real t, not reduced mod 2pi."""
    return m.lift(t)


def lift_degree_check(m: MonotonePiecewiseMap, grid: int = 10_000) -> Certificate:
    """
    Check F(t + 2pi) = F(t) + degree * 2pi and that F is increasing.

    The margin is the smaller of the period slack (against 1e-12) and the
    minimum sampled slope.
    """
    t = np.linspace(-math.pi, math.pi, grid, endpoint=False)
    period_err = float(np.max(np.abs(m.lift(t + TWO_PI) - m.lift(t) - TWO_PI * m.degree)))
    slopes = m.derivative(t)
    i = int(np.argmin(slopes))
    return Certificate.from_margin(
        f"{m.name}_lift_degree_{m.degree}",
        min(1e-12 - period_err, float(slopes[i])),
        float(t[i]),
        period_error=period_err,
        min_slope=float(slopes[i]),
    )


def validate_example_constraints(
    params: MapParams,
    f1: MonotonePiecewiseMap,
    f2: MonotonePiecewiseMap,
    phi: BumpProfile,
    grid: int = 100_000,
) -> CertificateReport:
    """
    Check every constraint the example needs, recording margins.

    Returns:
        CertificateReport; nothing is raised on failure
    """
    checks = [Certificate.from_margin(name, margin) for name, margin in params.invariant_margins()]
    checks.extend(lift_degree_check(m, grid=min(grid, 10_000)) for m in (f1, f2))

    t = np.linspace(-math.pi, math.pi, grid, endpoint=False)
    outside = t[np.abs(t) > params.delta]
    d2 = f2.derivative(outside)
    i = int(np.argmin(d2))
    checks.append(Certificate.from_margin("f2_expanding_outside_delta", d2[i] - 2.0, outside[i]))
    checks.append(
        Certificate.from_margin("f2_contracting_at_zero", 1.0 - abs(f2.derivative(0.0)), 0.0)
    )
    fixed_err = max(abs(circle_difference(f2(x), x)) for x in (0.0, params.delta, -params.delta))
    checks.append(Certificate.from_margin("f2_fixed_points", 1e-12 - fixed_err))
    pre = -math.pi + params.delta / 3.0
    checks.append(
        Certificate.from_margin(
            "f2_preimage_of_delta",
            1e-12 - abs(circle_difference(f2(pre), params.delta)),
            pre,
        )
    )

    interior = t[(t > 0) & (t < math.pi)]
    gap = interior - f1.lift(interior)
    i = int(np.argmin(gap))
    checks.append(Certificate.from_margin("f1_below_identity", gap[i], interior[i]))
    checks.append(Certificate.from_margin("f1_repelling_at_pi", f1.derivative(math.pi) - 1.0, math.pi))
    linear = t[np.abs(t) <= params.s1]
    lin_err = np.max(np.abs(f1.lift(linear) - params.lam * linear))
    checks.append(Certificate.from_margin("f1_linear_zone", 1e-12 - lin_err))
    tail = t[np.abs(t) >= 2.5 * params.s1]
    d1 = f1.derivative(tail)
    i = int(np.argmin(d1))
    checks.append(
        Certificate.from_margin("f1_slope_on_transition", d1[i] - 5.0 * params.epsilon, tail[i])
    )

    slack = f1.derivative(t) - np.abs(phi.derivative(t))
    i = int(np.argmin(slack))
    checks.append(Certificate.from_margin("phi_dominated_by_f1", slack[i], t[i]))
    values = phi(t)
    range_violation = max(-values.min(), values.max() - params.epsilon)
    checks.append(Certificate.from_margin("phi_range", 1e-15 - range_violation))
    dphi = np.abs(phi.derivative(t))
    i = int(np.argmax(dphi))
    checks.append(Certificate.from_margin("phi_slope_below_epsilon", params.epsilon - dphi[i], t[i]))
    near0 = t[np.abs(t) < params.s0]
    nearpi = t[np.abs(np.abs(t) - math.pi) < params.s0]
    plateau_err = max(
        np.max(np.abs(phi(near0) - params.epsilon)), np.max(np.abs(phi(nearpi)))
    )
    checks.append(Certificate.from_margin("phi_plateaus", 1e-15 - plateau_err))

    odd_err = max(
        np.max(np.abs(f1.lift(-t) + f1.lift(t))[1:]),
        np.max(np.abs(f2.lift(-t) + f2.lift(t))[1:]),
        np.max(np.abs(phi(-t) - phi(t))),
    )
    checks.append(Certificate.from_margin("odd_symmetry", 1e-12 - odd_err))

    report = CertificateReport(title="example constraints", checks=checks)
    for check in report.failures:
        logger.info(f"constraint failed: {check.name} margin={check.margin:.6g}")
    return report


@dataclass(frozen=True)
class SemiConjugacy:
    """Sampled monotone degree-one map H with H(f2(t)) = 2 H(t) mod 2pi."""

    grid: np.ndarray
    values: np.ndarray
    iterations: int
    residual: float
    plateaus: List[Tuple[float, float, float]]

    def __call__(self, t):
        return np.interp(wrap(t), self.grid, self.values, period=TWO_PI)


def _semiconjugacy_values(f2: MonotonePiecewiseMap, t: np.ndarray, iterations: int) -> np.ndarray:
    """H(t) = t + sum_n u(x_n) / 2^(n+1) with u = F2 - 2 id and x_n = f2^n(t)."""
    h = np.array(t, dtype=float)
    x = wrap(t)
    scale = 0.5
    for _ in range(iterations):
        h = h + scale * (f2.lift(x) - 2.0 * x)
        x = f2(x)
        scale *= 0.5
    return h


def semiconjugacy_to_doubling(
    f2: MonotonePiecewiseMap,
    iterations: int = 40,
    grid: int = 10_000,
    tol: float = 1e-8,
    basin: Optional[Tuple[float, float]] = None,
) -> SemiConjugacy:
    """
    Semiconjugate f2 to t -> 2t.

    Args:
        f2: Degree-two circle map
        iterations: Series terms
        grid: Uniform sample count on [-pi, pi)
        tol: Maximal accepted residual |H(f2(t)) - 2H(t)| mod 2pi
        basin: Interval around 0 whose preimages are reported as plateaus

    Returns:
        SemiConjugacy with plateaus (start, end, variation of H)

    Raises:
        ConvergenceError: If the residual stays above tol
    """
    if f2.degree != 2:
        raise ValueError("semiconjugacy_to_doubling needs a degree-two map")
    t = np.linspace(-math.pi, math.pi, grid, endpoint=False)
    raw = _semiconjugacy_values(f2, t, iterations)
    values = np.maximum.accumulate(raw)
    correction = float(np.max(values - raw))
    if correction > 1e-12:
        logger.warning(f"semiconjugacy monotonicity correction {correction:.3g}")

    # measured against the corrected values that are returned
    image = _semiconjugacy_values(f2, f2(t), iterations)
    residual = float(np.max(circle_distance(image, 2.0 * values)))
    if residual > tol:
        raise ConvergenceError(
            f"residual {residual:.3g} above {tol:.3g} after {iterations} terms",
            stage="semiconjugacy",
            residual=residual,
        )

    plateaus: List[Tuple[float, float, float]] = []
    if basin is not None:
        lo, hi = basin
        x = t.copy()
        inside = np.zeros(t.shape, dtype=bool)
        for _ in range(iterations):
            inside |= (x > lo) & (x < hi)
            x = f2(x)
        edges = np.flatnonzero(np.diff(inside.astype(np.int8)))
        starts = [0] if inside[0] else []
        starts += [e + 1 for e in edges if not inside[e]]
        ends = [e for e in edges if inside[e]]
        if inside[-1]:
            ends.append(len(t) - 1)
        for a, b in zip(starts, ends):
            plateaus.append((float(t[a]), float(t[b]), float(values[b] - values[a])))

    logger.info(f"semiconjugacy residual {residual:.3g}, {len(plateaus)} plateaus")
    return SemiConjugacy(
        grid=t, values=values, iterations=iterations, residual=residual, plateaus=plateaus
    )
