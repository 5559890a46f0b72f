"""
CLI interface for torusstab.

Provides 'torusstab validate', 'certify', 'transversality', 'conjugacy',
'plot' and 'all'. Exit codes: 0 all checks pass, 1 a check or construction
failed, 2 usage or configuration error.
"""

import argparse
import logging
import math
import sys
from functools import cached_property
from pathlib import Path
from typing import List, Optional

import numpy as np

from torusstab import __version__
from torusstab.certificates import Certificate, CertificateReport
from torusstab.circle_maps import validate_example_constraints
from torusstab.config import RunConfig
from torusstab.conjugacy import (
    LeafNeighborhood,
    build_chi,
    build_foliation,
    build_h_on_K,
    build_leaf_map_H,
    conjugacy_residual,
    escape_bound,
    extend_h_immediate_basin,
    extend_h_pullback,
    place_window,
    saddle_neighborhood,
    window_guards,
)
from torusstab.errors import ConfigError, ConstructionError, PreconditionError
from torusstab.hyperbolicity import (
    BoxCover,
    CantorCover,
    cantor_cover,
    certify_axiomA,
    gamma0_cover,
    region_components,
)
from torusstab.manifolds import (
    attracting_set_check,
    backward_levels,
    basic_piece_order,
    basin_cover,
    choose_pullback_depth,
    fundamental_domain,
    leaves_from_arrays,
    leaves_to_arrays,
    sink_branch,
)
from torusstab.reporting import ReportWriter, SvgCanvas, displacement_figure
from torusstab.torus_endo import TorusPoint, build_map, perturb
from torusstab.transversality import approximate_Wu_gamma, strong_transversality_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


class Pipeline:
    """Shared construction steps for one run; each step is computed once."""

    def __init__(self, config: RunConfig, writer: ReportWriter):
        self.config = config
        self.writer = writer

    @cached_property
    def f(self):
        return build_map(self.config.map_params(), grid=self.config.grid)

    @cached_property
    def cover(self) -> BoxCover:
        cached = self.writer.load_cache("gamma0_cover")
        if cached is not None:
            return BoxCover(
                s_min=float(cached["s_min"]),
                hs=float(cached["hs"]),
                t_edges=cached["t_edges"],
                gap_column=int(cached["gap_column"]),
                mask=cached["mask"],
                depth=int(cached["depth"]),
            )
        cover = gamma0_cover(self.f, depth=self.config.depth, resolution=self.config.box_resolution)
        self.writer.save_cache(
            "gamma0_cover",
            s_min=np.array(cover.s_min),
            hs=np.array(cover.hs),
            t_edges=cover.t_edges,
            gap_column=np.array(cover.gap_column),
            mask=cover.mask,
            depth=np.array(cover.depth),
        )
        return cover

    @cached_property
    def leaves(self):
        cached = self.writer.load_cache("leaves")
        if cached is not None:
            return leaves_from_arrays(self.f, cached)
        leaves = approximate_Wu_gamma(
            self.f,
            cover=self.cover,
            arc_length=self.config.arc_length,
            mesh=self.config.mesh,
            seed=self.config.seed_length,
        )
        self.writer.save_cache("leaves", **leaves_to_arrays(leaves))
        return leaves

    @cached_property
    def cantor(self) -> CantorCover:
        return cantor_cover(self.f.f2, self.f.params.delta, depth=self.config.cantor_depth)

    @cached_property
    def basin(self):
        return basin_cover(
            self.f,
            grid=self.config.basin_grid,
            n_iter=self.config.basin_iter,
            levels=max(4, self.config.pullback_depth + 1),
        )

    @cached_property
    def transversality(self):
        return strong_transversality_report(
            self.f,
            self.leaves,
            self.basin,
            mesh=self.config.mesh,
            theta_min=self.config.theta_min,
            cover=self.cover,
            cantor=self.cantor,
        )

    @cached_property
    def domain(self):
        return fundamental_domain(self.f, points=self.transversality.L, leaves=self.leaves, basin=self.basin)

    @cached_property
    def neighborhood(self) -> LeafNeighborhood:
        return LeafNeighborhood(cover=self.cover, eps=self.config.eps_s)

    @cached_property
    def k(self) -> int:
        return choose_pullback_depth(
            self.f,
            self.domain,
            sink_branch(self.leaves),
            self.cover,
            neighborhood=self.config.eps_s,
            basin=self.basin,
        )


def _print_checks(report: CertificateReport) -> None:
    for check in report.checks:
        mark = "✓" if check.passed else "✗"
        print(f"  {mark} {check.name} (margin {check.margin:.6g})")


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load_config(args: argparse.Namespace) -> RunConfig:
    """
    Config file plus command-line overrides, validated.

    Raises:
        ConfigError: On a bad file or invalid value
    """
    config = RunConfig.load(Path(args.config) if args.config else None)
    for key in ("grid", "depth", "mesh", "jobs"):
        value = getattr(args, key, None)
        if value is not None:
            config.set(key, value)
    config.output_dir = Path(args.out)
    config.validate()
    return config


def _pipeline(args: argparse.Namespace) -> Pipeline:
    config = _load_config(args)
    return Pipeline(config, ReportWriter(config.output_dir, digest=config.digest()))


def run_validate(run: Pipeline) -> int:
    f = run.f
    report = validate_example_constraints(f.params, f.f1, f.f2, f.phi, grid=run.config.grid)
    run.writer.write_json("validate.json", {"report": report.to_dict()})
    print("Parameter and construction constraints:")
    _print_checks(report)
    return EXIT_OK if report.passed else EXIT_FAILED


def _region_figure(run: Pipeline) -> SvgCanvas:
    """R, f(R) and the Gamma0 cover."""
    canvas = SvgCanvas()
    for region in region_components(run.f).values():
        canvas.rect(region.s_lo, region.s_hi, region.t_lo, region.t_hi, fill="#dde6f0")
        u = np.linspace(0.0, 1.0, 200)
        s = np.concatenate([
            region.s_lo + u * (region.s_hi - region.s_lo),
            np.full_like(u, region.s_hi),
            region.s_hi - u * (region.s_hi - region.s_lo),
            np.full_like(u, region.s_lo),
        ])
        t = np.concatenate([
            np.full_like(u, region.t_lo),
            region.t_lo + u * (region.t_hi - region.t_lo),
            np.full_like(u, region.t_hi),
            region.t_hi - u * (region.t_hi - region.t_lo),
        ])
        # boundary of f(R)
        canvas.polyline(*run.f.eval(s, t), stroke="#7f7f7f", width=0.5)
    for box in run.cover.boxes():
        canvas.rect(*box, fill="#1f4e79")
    for fixed in run.f.fixed_points():
        canvas.dot(fixed.point.s, fixed.point.t)
        canvas.text(fixed.point.s, fixed.point.t, fixed.name)
    return canvas


def run_certify(run: Pipeline) -> int:
    code = run_validate(run)
    config = run.config
    report, _, _ = certify_axiomA(
        run.f,
        depth=config.depth,
        resolution=config.box_resolution,
        cantor_depth=config.cantor_depth,
        cover=run.cover,
    )
    order = basic_piece_order(run.f, run.leaves)
    sinks = [fp for fp in run.f.fixed_points() if fp.kind == "attracting"]
    attracting = attracting_set_check(run.f, run.leaves, sinks)
    run.writer.write_json(
        "certify.json",
        {"axiom_a": report.to_dict(), "piece_order": order, "attracting_set": attracting.to_dict()},
    )
    run.writer.write_svg("regions.svg", _region_figure(run))
    print("Axiom A certificates:")
    _print_checks(report.certificates)
    mark = "✓" if attracting.passed else "✗"
    print(f"  {mark} {attracting.name} (margin {attracting.margin:.6g})")
    print(f"  order of basic pieces: {', '.join(f'{a} > {b}' for a, b in order)}")
    passed = report.passed and attracting.passed
    return max(code, EXIT_OK if passed else EXIT_FAILED)


def _leaves_figure(run: Pipeline, points) -> SvgCanvas:
    canvas = SvgCanvas()
    for leaf in run.leaves:
        canvas.polyline(leaf.s, leaf.t, width=0.6)
    for p in points:
        canvas.dot(p.s, p.t, fill="#a03020", radius=2.5)
    return canvas


def run_transversality(run: Pipeline) -> int:
    report = run.transversality
    run.writer.write_json("transversality.json", report.to_dict())
    run.writer.write_csv(
        "intersections.csv",
        ["s", "t", "leaf_a", "leaf_b", "angle"],
        [(p.s, p.t, p.leaf_a, p.leaf_b, p.angle) for p in report.intersections],
    )
    run.writer.write_csv("L.csv", ["s", "t"], [(float(s), float(t)) for s, t in report.L])
    run.writer.write_svg("leaves.svg", _leaves_figure(run, report.intersections))
    print(f"Strong transversality ({len(report.intersections)} crossings in I1):")
    _print_checks(report.certificates)
    return EXIT_OK if report.passed else EXIT_FAILED


def run_conjugacy(run: Pipeline) -> int:
    config, f = run.config, run.f
    points = run.transversality.intersections
    atlas = build_foliation(f, run.cover, eps=config.eps_s, intersections=points)
    guards = window_guards(f, run.domain, run.neighborhood, run.k, run.basin, L=run.transversality.L)
    window = place_window(
        guards,
        TorusPoint(config.window_center_s, config.window_center_t),
        config.window_radius,
        config.window_magnitude,
    )
    g = perturb(f, window, guards)
    c0, c1 = g.distances() if g.amplitude else (0.0, 0.0)
    correspondence = build_leaf_map_H(f, g, atlas, leaves=run.leaves)
    chi = build_chi(f, g, correspondence, run.domain, run.k, samples=config.samples, theta_min=config.theta_min)
    h_k = build_h_on_K(
        f, g, run.domain, run.k, correspondence, chi,
        samples=config.samples, leaves=run.leaves, intersections=points, mesh=config.mesh, jobs=config.jobs,
    )
    h_b0 = extend_h_immediate_basin(
        h_k, f, g, run.domain, run.basin, samples=config.samples, seed=config.seed, jobs=config.jobs
    )
    h_pull = extend_h_pullback(
        h_b0, f, g, run.basin, depth=config.pullback_depth, samples=config.samples, seed=config.seed, jobs=config.jobs
    )
    residual = conjugacy_residual([h_k, h_b0, h_pull], f, g, evaluator=h_pull.evaluator, mesh=config.mesh)
    levels = backward_levels(f, run.domain, run.k, grid=64)
    bound = escape_bound(
        f,
        run.domain.in_square,
        saddle_neighborhood(run.neighborhood, width=config.eps_s),
        grid=64,
        cap=config.escape_cap,
    )

    checks = [
        *atlas.certificates,
        correspondence.distance_certificate(c0),
        *chi.certificates,
        *h_k.certificates,
        *h_b0.certificates,
        *h_pull.certificates,
        Certificate.from_margin("conjugacy_residual", 1e-6 - residual.sup_residual, residual.worst_point),
        Certificate.from_margin("no_injectivity_violations", 1.0 if residual.passed else -1.0, None),
    ]
    report = CertificateReport("conjugacy", checks)
    run.writer.write_json(
        "conjugacy.json",
        {
            "window": {
                "center": list(window.center.as_tuple()),
                "radius": window.radius,
                "magnitude": window.magnitude,
                "c0_distance": c0,
                "c1_distance": c1,
            },
            "pullback_depth_k": run.k,
            "backward_levels": [
                {"j": level.j, "components": level.components, "holes": level.holes, "annulus": level.is_annulus}
                for level in levels
            ],
            "fundamental_domain_radius": run.domain.radius,
            "leaf_distance": correspondence.sup_distance,
            "equivariance_defect": correspondence.equivariance_defect,
            "residual": residual.to_dict(),
            "escape_bound": bound,
            "certificates": report.to_dict(),
        },
    )
    rows = h_k.rows() + h_b0.rows() + h_pull.rows()
    run.writer.write_csv("h.csv", ["x_s", "x_t", "h_s", "h_t", "case"], rows)
    run.writer.write_svg("h_displacement.svg", displacement_figure(h_pull.points, h_pull.images))
    print("Conjugacy certificates:")
    _print_checks(report)
    print(f"  sup |h - id| = {residual.sup_displacement:.3g}, escape bound N = {bound}")
    return EXIT_OK if report.passed else EXIT_FAILED


def _graph_figure(m, label: str, samples: int = 2001) -> SvgCanvas:
    """Graph of a circle map on [-pi, pi), reduced into [-pi, pi)."""
    canvas = SvgCanvas()
    t = np.linspace(-math.pi, math.pi, samples)
    canvas.polyline(t, m(t))
    canvas.polyline(t, t, stroke="#c0c0c0", width=0.5)
    canvas.text(-3.0, 3.0, label)
    return canvas


def run_plot(run: Pipeline) -> int:
    f = run.f
    run.writer.write_svg("f1.svg", _graph_figure(f.f1, "f1"))
    run.writer.write_svg("f2.svg", _graph_figure(f.f2, "f2"))
    run.writer.write_svg("phi.svg", _graph_figure(f.phi, "phi"))
    run.writer.write_svg("regions.svg", _region_figure(run))
    run.writer.write_svg("leaves.svg", _leaves_figure(run, []))
    h_csv = run.writer.out_dir / "h.csv"
    rows = np.atleast_1d(np.genfromtxt(h_csv, delimiter=",", names=True)) if h_csv.exists() else None
    if rows is not None and rows.size:
        points = np.column_stack([rows["x_s"], rows["x_t"]])
        images = np.column_stack([rows["h_s"], rows["h_t"]])
        run.writer.write_svg("h_displacement.svg", displacement_figure(points, images))
    else:
        logger.info(f"no {h_csv}; run conjugacy first for the displacement figure")
    print(f"✓ Wrote figures to {run.config.output_dir}")
    return EXIT_OK


def _guarded(step, args: argparse.Namespace) -> int:
    try:
        return step(_pipeline(args))
    except ConfigError as e:
        print(f"✗ Config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConstructionError, PreconditionError) as e:
        print(f"✗ {e}", file=sys.stderr)
        return EXIT_FAILED


def cmd_validate(args: argparse.Namespace) -> int:
    """Check the parameter inequalities and the properties of f1, f2 and phi."""
    return _guarded(run_validate, args)


def cmd_certify(args: argparse.Namespace) -> int:
    """Axiom A certificates, after validation."""
    return _guarded(run_certify, args)


def cmd_transversality(args: argparse.Namespace) -> int:
    return _guarded(run_transversality, args)


def cmd_conjugacy(args: argparse.Namespace) -> int:
    """Build h between f and the configured perturbation and report residuals."""
    return _guarded(run_conjugacy, args)


def cmd_plot(args: argparse.Namespace) -> int:
    return _guarded(run_plot, args)


def cmd_all(args: argparse.Namespace) -> int:
    """Every stage in order; the exit code is the worst one."""

    def everything(run: Pipeline) -> int:
        codes: List[int] = []
        for step in (run_certify, run_transversality, run_conjugacy, run_plot):
            try:
                codes.append(step(run))
            except (ConstructionError, PreconditionError) as e:
                print(f"✗ {e}", file=sys.stderr)
                codes.append(EXIT_FAILED)
        return max(codes)

    return _guarded(everything, args)


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for torusstab CLI."""
    parser = argparse.ArgumentParser(
        prog="torusstab",
        description="C1-stable torus endomorphism: construction, certificates and conjugacy",
    )
    parser.add_argument(
        "--version",
        action="version",
        version=f"%(prog)s {__version__}",
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Key-value config file (default: built-in defaults)")
    common.add_argument("--out", default="out", help="Output directory (default: out)")
    common.add_argument("--grid", type=int, help="Dense 1-D grid size")
    common.add_argument("--depth", type=int, help="Gamma0 cover depth")
    common.add_argument("--mesh", type=float, help="Leaf vertex spacing")
    common.add_argument("--jobs", type=int, help="Worker threads for sample evaluation")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for debug")

    subparsers = parser.add_subparsers(
        title="commands",
        dest="command",
        required=True,
    )
    commands = [
        ("validate", cmd_validate, "Check parameter and construction constraints"),
        ("certify", cmd_certify, "Certify covering, cone field, injectivity and Axiom A"),
        ("transversality", cmd_transversality, "Detect I1 and certify strong transversality"),
        ("conjugacy", cmd_conjugacy, "Build the conjugacy to the configured perturbation"),
        ("plot", cmd_plot, "Write SVG figures"),
        ("all", cmd_all, "Run every stage"),
    ]
    for name, func, help_text in commands:
        sub = subparsers.add_parser(name, help=help_text, description=help_text, parents=[common])
        sub.set_defaults(func=func)

    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
