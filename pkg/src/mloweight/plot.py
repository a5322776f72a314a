"""Static SVG line charts of λ trajectories, byte-stable for a given CSV."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

from .engine import csv_header

WIDTH, HEIGHT = 720, 420
LEFT, RIGHT, TOP, BOTTOM = 64, 180, 24, 48
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f", "#17becf", "#bcbd22")


class TrajectoryFormatError(ValueError):
    """A trajectory CSV that does not follow the fixed schema; ``line`` is 1-based."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class Trajectory:
    steps: list[int]
    lambdas: list[list[float]]  # one list per objective

    @property
    def n_objectives(self) -> int:
        return len(self.lambdas)


def read_trajectory(path: str | Path) -> Trajectory:
    """Parse ``lambda_trajectory.csv``; only the exact engine schema is accepted."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise TrajectoryFormatError("empty file, expected a header", 1)
    header = rows[0]
    n = len(header) - 4
    if n < 1 or header != csv_header(n):
        raise TrajectoryFormatError(f"bad header {','.join(header)!r}", 1)
    steps: list[int] = []
    lambdas: list[list[float]] = [[] for _ in range(n)]
    for no, row in enumerate(rows[1:], 2):
        if len(row) != len(header):
            raise TrajectoryFormatError(f"expected {len(header)} fields, got {len(row)}", no)
        try:
            step = int(row[0])
            vals = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise TrajectoryFormatError(f"non-numeric field ({exc})", no) from exc
        if steps and step <= steps[-1]:
            raise TrajectoryFormatError(f"step {step} does not increase", no)
        steps.append(step)
        for i in range(n):
            lambdas[i].append(vals[i])
    if not steps:
        raise TrajectoryFormatError("no data rows", 2)
    return Trajectory(steps, lambdas)


def objective_names(run_dir: str | Path, n: int) -> list[str]:
    """Names from the run's run.json when present and consistent, else ``lambda_i``."""
    path = Path(run_dir) / "run.json"
    try:
        names = json.loads(path.read_text()).get("objective_names")
    except (OSError, ValueError):
        names = None
    if isinstance(names, list) and len(names) == n and all(isinstance(s, str) for s in names):
        return names
    return [f"lambda_{i}" for i in range(n)]


def _num(x: float) -> str:
    return f"{x:.2f}"


def _tick(v: float) -> str:
    return f"{v:.3g}"


def render_svg(traj: Trajectory, names: list[str], title: str = "tradeoff weights") -> str:
    """One polyline per λ_i over the global step, y-range fit to the data."""
    x0, x1 = traj.steps[0], traj.steps[-1]
    flat = [v for series in traj.lambdas for v in series]
    y0, y1 = min(flat), max(flat)
    if y1 - y0 < 1e-12:
        pad = max(abs(y0) * 0.05, 0.05)
    else:
        pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    xspan = (x1 - x0) or 1
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(step):
        return LEFT + (step - x0) / xspan * pw

    def py(v):
        return TOP + (1.0 - (v - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        f'<text x="{LEFT}" y="16" font-family="sans-serif" font-size="13">{escape(title)}</text>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444444" stroke-width="1"/>',
    ]
    for k in range(5):
        v = y0 + (y1 - y0) * k / 4
        y = py(v)
        out.append(f'<line x1="{LEFT - 4}" y1="{_num(y)}" x2="{LEFT}" y2="{_num(y)}" stroke="#444444"/>')
        out.append(f'<text x="{LEFT - 6}" y="{_num(y + 4)}" font-family="sans-serif" font-size="11" '
                   f'text-anchor="end">{_tick(v)}</text>')
    for k in range(5):
        step = x0 + xspan * k / 4
        x = px(step)
        out.append(f'<line x1="{_num(x)}" y1="{TOP + ph}" x2="{_num(x)}" y2="{TOP + ph + 4}" stroke="#444444"/>')
        out.append(f'<text x="{_num(x)}" y="{TOP + ph + 16}" font-family="sans-serif" font-size="11" '
                   f'text-anchor="middle">{_tick(step)}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 8}" font-family="sans-serif" font-size="12" '
               f'text-anchor="middle">step</text>')
    for i, series in enumerate(traj.lambdas):
        color = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{_num(px(s))},{_num(py(v))}" for s, v in zip(traj.steps, series))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
    lx = LEFT + pw + 16
    for i, name in enumerate(names):
        color = PALETTE[i % len(PALETTE)]
        y = TOP + 12 + 18 * i
        out.append(f'<line x1="{lx}" y1="{y}" x2="{lx + 20}" y2="{y}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{y + 4}" font-family="sans-serif" font-size="12">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_run(run_dir: str | Path, out_svg: str | Path | None = None) -> Path:
    run_dir = Path(run_dir)
    traj = read_trajectory(run_dir / "lambda_trajectory.csv")
    names = objective_names(run_dir, traj.n_objectives)
    out = Path(out_svg) if out_svg is not None else run_dir / "plot.svg"
    out.write_text(render_svg(traj, names))
    return out
