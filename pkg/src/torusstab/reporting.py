"""
Report files for torusstab runs.

JSON reports and SVG figures are written atomically (temp file + replace);
CSV data goes through the csv module. Intermediate arrays are cached as
.npz files under <out>/cache/<digest>/.
"""

import csv
import json
import logging
import math
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from torusstab.certificates import to_plain

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def format_float(value: float) -> str:
    """12 significant digits."""
    return f"{float(value):.12g}"


class ReportWriter:
    """Writes reports, data and figures into one output directory."""

    def __init__(self, out_dir: Path, digest: Optional[str] = None):
        """
        Initialize report writer.

        Args:
            out_dir: Output directory (created on first write)
            digest: Config digest keying the artifact cache
        """
        self.out_dir = Path(out_dir)
        self.digest = digest

    def _atomic_write(self, path: Path, text: str) -> Path:
        path.parent.mkdir(parents=True, exist_ok=True)
        temp_fd, temp_path = tempfile.mkstemp(dir=path.parent, suffix=path.suffix)
        temp_path = Path(temp_path)
        try:
            with open(temp_fd, "w", encoding="utf-8", newline="") as f:
                f.write(text)
            temp_path.replace(path)
        except Exception:
            if temp_path.exists():
                temp_path.unlink()
            raise
        return path

    def write_json(self, name: str, payload: Dict[str, Any]) -> Path:
        """
        Write a JSON report atomically.

        Wall-clock data goes under "metadata" only, so two runs with the same
        inputs differ in that key alone.
        """
        document = {
            "schema": SCHEMA_VERSION,
            **to_plain(payload),
            "metadata": {
                "written": datetime.now(timezone.utc).isoformat(),
                "config_digest": self.digest,
            },
        }
        path = self._atomic_write(self.out_dir / name, json.dumps(document, indent=2, sort_keys=True) + "\n")
        logger.info(f"wrote {path}")
        return path

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        """Write rows with floats at 12 significant digits."""
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow(
                    [format_float(v) if isinstance(v, (float, np.floating)) else v for v in row]
                )
        logger.info(f"wrote {path}")
        return path

    def write_svg(self, name: str, canvas: "SvgCanvas") -> Path:
        path = self._atomic_write(self.out_dir / name, canvas.render())
        logger.info(f"wrote {path}")
        return path

    # Artifact cache

    def cache_path(self, name: str) -> Optional[Path]:
        if self.digest is None:
            return None
        return self.out_dir / "cache" / self.digest / f"{name}.npz"

    def save_cache(self, name: str, **arrays: np.ndarray) -> None:
        """Store arrays; failures are logged and ignored."""
        path = self.cache_path(name)
        if path is None:
            return
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            np.savez(path, **arrays)
        except OSError as e:
            logger.warning(f"could not write cache {path}: {e}")

    def load_cache(self, name: str) -> Optional[Dict[str, np.ndarray]]:
        path = self.cache_path(name)
        if path is None or not path.exists():
            return None
        try:
            with np.load(path) as data:
                return {key: data[key] for key in data.files}
        except (OSError, ValueError) as e:
            logger.warning(f"ignoring unreadable cache {path}: {e}")
            return None


class SvgCanvas:
    """
    Minimal SVG builder over the torus [-pi, pi)^2, s horizontal, t vertical.

    Coordinates are printed with three decimals so identical inputs give
    identical files.
    """

    def __init__(self, size: int = 800, bounds: Tuple[float, float, float, float] = (-math.pi, math.pi, -math.pi, math.pi)):
        self.size = size
        self.bounds = bounds
        self.items: List[str] = []

    def _xy(self, s, t) -> Tuple[np.ndarray, np.ndarray]:
        s_lo, s_hi, t_lo, t_hi = self.bounds
        x = (np.asarray(s, dtype=float) - s_lo) / (s_hi - s_lo) * self.size
        y = (t_hi - np.asarray(t, dtype=float)) / (t_hi - t_lo) * self.size
        return x, y

    def polyline(self, s, t, stroke: str = "#1f4e79", width: float = 1.0) -> None:
        """Polyline, split where it wraps around the torus."""
        s = np.asarray(s, dtype=float)
        t = np.asarray(t, dtype=float)
        if s.size < 2:
            return
        jumps = np.flatnonzero((np.abs(np.diff(s)) > math.pi) | (np.abs(np.diff(t)) > math.pi)) + 1
        for ps, pt in zip(np.split(s, jumps), np.split(t, jumps)):
            if ps.size < 2:
                continue
            x, y = self._xy(ps, pt)
            points = " ".join(f"{a:.3f},{b:.3f}" for a, b in zip(x, y))
            self.items.append(
                f'<polyline points="{points}" fill="none" stroke="{stroke}" stroke-width="{width:.3f}"/>'
            )

    def rect(self, s_lo: float, s_hi: float, t_lo: float, t_hi: float, fill: str = "#c0c0c0") -> None:
        x0, y0 = self._xy(s_lo, t_hi)
        x1, y1 = self._xy(s_hi, t_lo)
        self.items.append(
            f'<rect x="{float(x0):.3f}" y="{float(y0):.3f}" width="{float(x1 - x0):.3f}" '
            f'height="{float(y1 - y0):.3f}" fill="{fill}"/>'
        )

    def arrow(self, s: float, t: float, ds: float, dt: float, stroke: str = "#a03020") -> None:
        x0, y0 = self._xy(s, t)
        x1, y1 = self._xy(s + ds, t + dt)
        self.items.append(
            f'<line x1="{float(x0):.3f}" y1="{float(y0):.3f}" x2="{float(x1):.3f}" y2="{float(y1):.3f}" '
            f'stroke="{stroke}" stroke-width="0.800"/>'
        )

    def dot(self, s: float, t: float, fill: str = "#000000", radius: float = 2.0) -> None:
        x, y = self._xy(s, t)
        self.items.append(f'<circle cx="{float(x):.3f}" cy="{float(y):.3f}" r="{radius:.3f}" fill="{fill}"/>')

    def text(self, s: float, t: float, label: str) -> None:
        x, y = self._xy(s, t)
        self.items.append(f'<text x="{float(x):.3f}" y="{float(y):.3f}" font-size="12">{label}</text>')

    def render(self) -> str:
        header = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.size}" height="{self.size}" '
            f'viewBox="0 0 {self.size} {self.size}">'
        )
        body = "\n".join(self.items)
        return f'{header}\n<rect width="100%" height="100%" fill="#ffffff"/>\n{body}\n</svg>\n'


def displacement_figure(points: np.ndarray, images: np.ndarray, size: int = 800, scale: Optional[float] = None) -> SvgCanvas:
    """
    Arrows from x to x + scale * (h(x) - x) over the bounding box of the samples.

    scale defaults to making the longest arrow a twentieth of the box.
    """
    points = np.asarray(points, dtype=float)
    images = np.asarray(images, dtype=float)
    ds = np.mod(images[:, 0] - points[:, 0] + math.pi, 2 * math.pi) - math.pi
    dt = np.mod(images[:, 1] - points[:, 1] + math.pi, 2 * math.pi) - math.pi
    pad = 1e-9
    bounds = (
        float(points[:, 0].min()) - pad,
        float(points[:, 0].max()) + pad,
        float(points[:, 1].min()) - pad,
        float(points[:, 1].max()) + pad,
    )
    canvas = SvgCanvas(size=size, bounds=bounds)
    longest = float(np.max(np.hypot(ds, dt), initial=0.0))
    if scale is None:
        span = max(bounds[1] - bounds[0], bounds[3] - bounds[2])
        scale = span / (20.0 * longest) if longest > 0 else 0.0
    for s, t, a, b in zip(points[:, 0], points[:, 1], ds, dt):
        if a == 0.0 and b == 0.0:
            canvas.dot(s, t, radius=0.8)
        else:
            canvas.arrow(s, t, scale * a, scale * b)
    return canvas
