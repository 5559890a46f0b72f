"""
The torus endomorphism f(s, t) = (f1(s) + sin(t) phi(s), f2(t)).

Points are handled as coordinate arrays (s, t) reduced into [-pi, pi);
TorusPoint is the scalar record used at the API edges. The circle metric
on the torus is the max of the two wrapped coordinate distances.
"""

import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import root

from torusstab.circle_maps import (
    BumpProfile,
    MapParams,
    MonotonePiecewiseMap,
    bisect_increasing,
    build_f1,
    build_f2,
    build_phi,
    circle_difference,
    invert_branch,
    smoothstep5,
    smoothstep5_prime,
    wrap,
)
from torusstab.errors import ConstructionError, GuardViolation

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TorusPoint:
    """A point of the torus, coordinates reduced into [-pi, pi)."""

    s: float
    t: float

    def __post_init__(self):
        object.__setattr__(self, "s", float(wrap(self.s)))
        object.__setattr__(self, "t", float(wrap(self.t)))

    def __neg__(self) -> "TorusPoint":
        return TorusPoint(-self.s, -self.t)

    def as_tuple(self) -> Tuple[float, float]:
        return (self.s, self.t)


def torus_distance(s1, t1, s2, t2):
    """Max of the per-coordinate circle distances."""
    return np.maximum(
        np.abs(circle_difference(s1, s2)), np.abs(circle_difference(t1, t2))
    )


@dataclass(frozen=True)
class Jacobian2:
    """Upper-triangular derivative of the skew product."""

    a11: np.ndarray
    a12: np.ndarray
    a21: np.ndarray
    a22: np.ndarray

    @property
    def det(self):
        return self.a11 * self.a22 - self.a12 * self.a21

    def apply(self, v1, v2):
        """Image (w1, w2) of the tangent vector (v1, v2)."""
        return self.a11 * v1 + self.a12 * v2, self.a21 * v1 + self.a22 * v2

    def matrix(self) -> np.ndarray:
        """2x2 matrix; only for scalar Jacobians."""
        return np.array([[self.a11, self.a12], [self.a21, self.a22]], dtype=float)


@dataclass(frozen=True)
class FixedPoint:
    name: str
    point: TorusPoint
    eigenvalues: Tuple[float, float]
    kind: str


@dataclass(frozen=True)
class TorusEndomorphism:
    """The coupled map built from f1, f2 and phi."""

    f1: MonotonePiecewiseMap
    f2: MonotonePiecewiseMap
    phi: BumpProfile
    params: MapParams

    @property
    def base(self) -> "TorusEndomorphism":
        return self

    def first_lift(self, s, t):
        """First coordinate on the lift: F1(s) + sin(t) phi(s), increasing in s."""
        return self.f1.lift(s) + np.sin(t) * self.phi(s)

    def eval(self, s, t):
        """Image coordinates, reduced."""
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        return wrap(self.first_lift(s, t)), self.f2(t)

    def __call__(self, x: TorusPoint) -> TorusPoint:
        s, t = self.eval(x.s, x.t)
        return TorusPoint(s, t)

    def jacobian(self, s, t) -> Jacobian2:
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        a11 = self.f1.derivative(s) + np.sin(t) * self.phi.derivative(s)
        a12 = np.cos(t) * self.phi(s)
        a22 = self.f2.derivative(t)
        return Jacobian2(a11=a11, a12=a12, a21=np.zeros_like(a22), a22=a22)

    def preimages(self, s, t):
        """
        Both preimages of (s, t), one per branch of f2.

        Returns:
            (ps, pt) arrays of shape (2,) + shape(s); row b uses f2 branch b
        """
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        target = wrap(s) + np.zeros_like(t)
        ps, pt = [], []
        for branch in range(self.f2.degree):
            tb = invert_branch(self.f2, t, branch) + np.zeros_like(s)
            sb = bisect_increasing(
                lambda x: self.first_lift(x, tb), target, -math.pi, math.pi
            )
            ps.append(wrap(sb))
            pt.append(wrap(tb))
        return np.array(ps), np.array(pt)

    def basin_preimage(self, s, t):
        """
        The preimage whose t lies on the branch of f2 through 0.

        That branch maps [-t*, t*] onto [-pi, pi] with f2(t*) = pi; f restricted
        to the immediate basin of p is inverted by it.
        """
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        edge = float(bisect_increasing(self.f2.lift, np.array(math.pi), 0.0, math.pi))
        tb = bisect_increasing(self.f2.lift, wrap(t) + np.zeros_like(s), -edge, edge)
        target = wrap(s) + np.zeros_like(t)
        sb = bisect_increasing(lambda x: self.first_lift(x, tb), target, -math.pi, math.pi)
        return wrap(sb), wrap(tb)

    def preimage_points(self, y: TorusPoint) -> List[TorusPoint]:
        ps, pt = self.preimages(y.s, y.t)
        return [TorusPoint(a, b) for a, b in zip(ps, pt)]

    def iterate(self, s, t, n: int):
        """n-th iterate of coordinate arrays."""
        for _ in range(n):
            s, t = self.eval(s, t)
        return s, t

    def orbit(self, x: TorusPoint, n: int) -> List[TorusPoint]:
        """[x, f(x), ..., f^n(x)]."""
        if n < 0:
            raise ValueError("orbit length must be non-negative")
        points = [x]
        for _ in range(n):
            points.append(self(points[-1]))
        return points

    def lipschitz(self, s, t) -> float:
        """Max-norm operator bound of Df over the given samples."""
        j = self.jacobian(s, t)
        rows = np.maximum(np.abs(j.a11) + np.abs(j.a12), np.abs(j.a21) + np.abs(j.a22))
        return float(np.max(rows))

    def injectivity_gap(self, grid: int = 100) -> float:
        """
        Lower estimate of the distance between the two preimages of a point.

        Args:
            grid: Samples per coordinate (grid x grid points)
        """
        axis = np.linspace(-math.pi, math.pi, grid, endpoint=False)
        s, t = np.meshgrid(axis, axis, indexing="ij")
        ps, pt = self.preimages(s.ravel(), t.ravel())
        gap = torus_distance(ps[0], pt[0], ps[1], pt[1])
        value = float(np.min(gap))
        logger.info(f"injectivity gap {value:.6g} on {grid}x{grid} grid")
        return value

    def fixed_points(self) -> List[FixedPoint]:
        """The fixed points p, C, A and -A, polished by a root solve."""
        sigma, delta = self.params.sigma, self.params.delta
        guesses = [
            ("p", 0.0, 0.0),
            ("C", -math.pi, 0.0),
            ("A", sigma, delta),
            ("-A", -sigma, -delta),
        ]
        found = []
        for name, s0, t0 in guesses:
            def residual(v):
                fs, ft = self.eval(v[0], v[1])
                return [circle_difference(fs, v[0]), circle_difference(ft, v[1])]

            sol = root(residual, [s0, t0], method="hybr", options={"xtol": 1e-15})
            s, t = (sol.x if sol.success else (s0, t0))
            if max(abs(r) for r in residual([s, t])) > max(abs(r) for r in residual([s0, t0])):
                s, t = s0, t0
            j = self.jacobian(s, t)
            eig = (float(j.a11), float(j.a22))
            expanding = sum(abs(e) > 1.0 for e in eig)
            kind = {0: "attracting", 1: "saddle", 2: "repelling"}[expanding]
            found.append(FixedPoint(name=name, point=TorusPoint(s, t), eigenvalues=eig, kind=kind))
        return found


def build_map(params: Optional[MapParams] = None, grid: int = 100_000) -> TorusEndomorphism:
    """Build f from parameters (defaults when None)."""
    params = params or MapParams.create()
    f1 = build_f1(params)
    f2 = build_f2(params)
    phi = build_phi(params, f1, grid=grid)
    return TorusEndomorphism(f1=f1, f2=f2, phi=phi, params=params)


# Perturbations

def _bump(u):
    a = np.clip(np.abs(u), 0.0, 1.0)
    return 1.0 - smoothstep5(a)


def _bump_prime(u):
    a = np.clip(np.abs(u), 0.0, 1.0)
    return -np.sign(u) * smoothstep5_prime(a)


BUMP_SLOPE = 1.875
SUPPORT_FRACTION = 0.8


@dataclass(frozen=True)
class WindowGuard:
    """A named region a perturbation window must avoid."""

    name: str
    contains: Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class PerturbationWindow:
    """
    Square window (max-metric ball) of the given radius.

    The displacement is a product of quintic bumps along `direction`,
    supported on the concentric square of half-width 0.8 * radius.
    """

    center: TorusPoint
    radius: float
    magnitude: float
    direction: Tuple[float, float] = (0.0, 1.0)

    @property
    def support(self) -> float:
        return SUPPORT_FRACTION * self.radius

    def contains(self, s, t):
        ds = np.abs(circle_difference(s, self.center.s))
        dt = np.abs(circle_difference(t, self.center.t))
        return (ds <= self.radius) & (dt <= self.radius)

    def profile(self, s, t):
        """Bump value and its partial derivatives."""
        w = self.support
        us = circle_difference(s, self.center.s) / w
        ut = circle_difference(t, self.center.t) / w
        bs, bt = _bump(us), _bump(ut)
        return bs * bt, _bump_prime(us) * bt / w, bs * _bump_prime(ut) / w

    def samples(self, n: int = 41):
        axis = np.linspace(-self.radius, self.radius, n)
        ds, dt = np.meshgrid(axis, axis, indexing="ij")
        return wrap(self.center.s + ds.ravel()), wrap(self.center.t + dt.ravel())


@dataclass(frozen=True)
class PerturbedMap:
    """g = f o tau with tau = identity + amplitude * bump * direction."""

    base: TorusEndomorphism
    window: PerturbationWindow
    amplitude: float

    @property
    def params(self) -> MapParams:
        return self.base.params

    @property
    def f1(self):
        return self.base.f1

    @property
    def f2(self):
        return self.base.f2

    def displacement(self, s, t):
        b, _, _ = self.window.profile(s, t)
        d1, d2 = self.window.direction
        return self.amplitude * b * d1, self.amplitude * b * d2

    def tau(self, s, t):
        ds, dt = self.displacement(s, t)
        return wrap(np.asarray(s, dtype=float) + ds), wrap(np.asarray(t, dtype=float) + dt)

    def tau_inverse(self, s, t, iterations: int = 60):
        """Solve z + d(z) = w by fixed-point iteration."""
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        zs, zt = s.copy(), t.copy()
        for _ in range(iterations):
            ds, dt = self.displacement(zs, zt)
            ns, nt = wrap(s - ds), wrap(t - dt)
            moved = np.max(np.abs(circle_difference(ns, zs)) + np.abs(circle_difference(nt, zt)), initial=0.0)
            zs, zt = ns, nt
            if moved == 0.0:
                break
        return zs, zt

    def eval(self, s, t):
        return self.base.eval(*self.tau(s, t))

    def __call__(self, x: TorusPoint) -> TorusPoint:
        s, t = self.eval(x.s, x.t)
        return TorusPoint(s, t)

    def jacobian(self, s, t) -> Jacobian2:
        """Dg = Df(tau(x)) . Dtau(x)."""
        ts, tt = self.tau(s, t)
        j = self.base.jacobian(ts, tt)
        _, bs, bt = self.window.profile(s, t)
        d1, d2 = self.window.direction
        m11 = 1.0 + self.amplitude * d1 * bs
        m12 = self.amplitude * d1 * bt
        m21 = self.amplitude * d2 * bs
        m22 = 1.0 + self.amplitude * d2 * bt
        return Jacobian2(
            a11=j.a11 * m11 + j.a12 * m21,
            a12=j.a11 * m12 + j.a12 * m22,
            a21=j.a21 * m11 + j.a22 * m21,
            a22=j.a21 * m12 + j.a22 * m22,
        )

    def preimages(self, s, t):
        ps, pt = self.base.preimages(s, t)
        return self.tau_inverse(ps, pt)

    def basin_preimage(self, s, t):
        return self.tau_inverse(*self.base.basin_preimage(s, t))

    def iterate(self, s, t, n: int):
        for _ in range(n):
            s, t = self.eval(s, t)
        return s, t

    def distances(self, n: int = 81) -> Tuple[float, float]:
        """Sampled C0 and C1 distances between g and f over the window."""
        s, t = self.window.samples(n)
        gs, gt = self.eval(s, t)
        fs, ft = self.base.eval(s, t)
        c0 = float(np.max(torus_distance(gs, gt, fs, ft)))
        jg, jf = self.jacobian(s, t), self.base.jacobian(s, t)
        c1 = float(
            np.max(
                np.maximum.reduce(
                    [
                        np.abs(jg.a11 - jf.a11),
                        np.abs(jg.a12 - jf.a12),
                        np.abs(jg.a21 - jf.a21),
                        np.abs(jg.a22 - jf.a22),
                    ]
                )
            )
        )
        return c0, max(c0, c1)


def perturb(
    f: TorusEndomorphism,
    window: PerturbationWindow,
    guards: Sequence[WindowGuard] = (),
    samples: int = 41,
) -> PerturbedMap:
    """
    Build g = f o tau supported in the window.

    The amplitude is scaled so that the sampled C0 and C1 distances between
    g and f stay below window.magnitude.

    Raises:
        GuardViolation: If any window sample lies in a guarded set
    """
    s, t = window.samples(samples)
    for guard in guards:
        hit = np.asarray(guard.contains(s, t), dtype=bool)
        if hit.any():
            i = int(np.flatnonzero(hit)[0])
            raise GuardViolation(
                guard.name, f"sample ({s[i]:.6g}, {t[i]:.6g}) lies in the guarded set"
            )
    if window.magnitude == 0.0:
        return PerturbedMap(base=f, window=window, amplitude=0.0)

    lip = f.lipschitz(s, t)
    w = window.support
    amplitude = window.magnitude * min(1.0, w / BUMP_SLOPE) / (1.05 * lip * (1.0 + BUMP_SLOPE))
    g = PerturbedMap(base=f, window=window, amplitude=amplitude)
    c0, c1 = g.distances()
    logger.info(
        f"perturbation amplitude {amplitude:.3g}: C0 distance {c0:.3g}, C1 distance {c1:.3g}"
    )
    for label, distance in (("C0", c0), ("C1", c1)):
        if distance > window.magnitude:
            raise ConstructionError(
                f"sampled {label} distance {distance:.3g} exceeds magnitude {window.magnitude:.3g}",
                stage="perturb",
            )
    return g
