"""Self-contained SVG report plots.

Each function reads a CSV that the experiment runner already emitted and
renders it; plotting never computes fresh statistics. Output is deterministic
(fixed palette, stable number formatting, no timestamps).
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

PALETTE = ("#2a6fb0", "#d95f02", "#1b9e77", "#7570b3", "#e7298a",
           "#66a61e", "#a6761d", "#666666")


def _f(x: float) -> str:
    return f"{float(x):.6g}"


class _Canvas:
    """Accumulates SVG elements; render() wraps them in a document."""

    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self.parts: list[str] = []

    def line(self, x1, y1, x2, y2, stroke="#333", width=1.0, dash=None):
        d = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}"'
            f' stroke="{stroke}" stroke-width="{_f(width)}"{d}/>'
        )

    def polyline(self, pts, stroke="#2a6fb0", width=1.5):
        joined = " ".join(f"{_f(x)},{_f(y)}" for x, y in pts)
        self.parts.append(
            f'<polyline points="{joined}" fill="none" stroke="{stroke}"'
            f' stroke-width="{_f(width)}"/>'
        )

    def rect(self, x, y, w, h, fill="#2a6fb0", opacity=1.0):
        self.parts.append(
            f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}"'
            f' fill="{fill}" fill-opacity="{_f(opacity)}"/>'
        )

    def circle(self, x, y, r, fill="#2a6fb0"):
        self.parts.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{_f(r)}" fill="{fill}"/>')

    def text(self, x, y, s, size=11, anchor="start", fill="#222"):
        self.parts.append(
            f'<text x="{_f(x)}" y="{_f(y)}" font-size="{size}" text-anchor="{anchor}"'
            f' font-family="sans-serif" fill="{fill}">{s}</text>'
        )

    def render(self) -> str:
        body = "\n".join(self.parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}"'
            f' height="{self.height}" viewBox="0 0 {self.width} {self.height}">\n'
            f'<rect width="{self.width}" height="{self.height}" fill="white"/>\n'
            f"{body}\n</svg>\n"
        )

    def save(self, path) -> None:
        Path(path).write_text(self.render())


class _Axes:
    """Maps a data rectangle onto a pixel rectangle (y grows upward)."""

    def __init__(self, canvas: _Canvas, margin=(52, 16, 20, 40),
                 xlim=(0.0, 1.0), ylim=(0.0, 1.0)):
        left, right, top, bottom = margin
        self.c = canvas
        self.px0, self.px1 = left, canvas.width - right
        self.py0, self.py1 = canvas.height - bottom, top
        self.xlim, self.ylim = xlim, ylim

    def x(self, v):
        lo, hi = self.xlim
        return self.px0 + (v - lo) / (hi - lo or 1.0) * (self.px1 - self.px0)

    def y(self, v):
        lo, hi = self.ylim
        return self.py0 + (v - lo) / (hi - lo or 1.0) * (self.py1 - self.py0)

    def frame(self, xlabel="", ylabel="", xticks=(), yticks=()):
        c = self.c
        c.line(self.px0, self.py0, self.px1, self.py0)
        c.line(self.px0, self.py0, self.px0, self.py1)
        for t in xticks:
            px = self.x(t)
            c.line(px, self.py0, px, self.py0 + 4)
            c.text(px, self.py0 + 16, _f(t), size=10, anchor="middle")
        for t in yticks:
            py = self.y(t)
            c.line(self.px0 - 4, py, self.px0, py)
            c.text(self.px0 - 7, py + 3.5, _f(t), size=10, anchor="end")
        if xlabel:
            c.text((self.px0 + self.px1) / 2, c.height - 8, xlabel, anchor="middle")
        if ylabel:
            mid = (self.py0 + self.py1) / 2
            c.parts.append(
                f'<text x="14" y="{_f(mid)}" font-size="11" text-anchor="middle"'
                f' font-family="sans-serif" fill="#222"'
                f' transform="rotate(-90 14 {_f(mid)})">{ylabel}</text>'
            )


def read_columns(path, cols) -> dict[str, np.ndarray]:
    """Read named numeric columns from a CSV with a header row.

    Lines starting with '#' are provenance comments and are skipped.
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(r for r in fh if not r.startswith("#")))
    missing = [c for c in cols if rows and c not in rows[0]]
    if missing:
        raise KeyError(f"{path}: missing columns {missing}")
    return {c: np.array([float(r[c]) for r in rows]) for c in cols}


def pp_curve_plot(curve_csvs: dict[str, object], out_path, title="calibration") -> None:
    """Probability-probability curves, one per labeled curve CSV (cols p,u)."""
    c = _Canvas(420, 420)
    ax = _Axes(c)
    ax.frame(xlabel="nominal quantile", ylabel="observed quantile",
             xticks=(0, 0.25, 0.5, 0.75, 1), yticks=(0, 0.25, 0.5, 0.75, 1))
    c.line(ax.x(0), ax.y(0), ax.x(1), ax.y(1), stroke="#999", dash="4 3")
    for k, (label, path) in enumerate(sorted(curve_csvs.items())):
        data = read_columns(path, ("p", "u"))
        pts = [(ax.x(p), ax.y(u)) for p, u in zip(data["p"], data["u"])]
        color = PALETTE[k % len(PALETTE)]
        c.polyline(pts, stroke=color)
        c.text(ax.px0 + 8, ax.py1 + 14 + 13 * k, label, size=10, fill=color)
    c.text(c.width / 2, 12, title, anchor="middle")
    c.save(out_path)


def binned_error_plot(bins_csv, out_path, title="error vs uncertainty",
                      unit="mm") -> None:
    """MAE per uncertainty bin with bootstrap CI whiskers."""
    d = read_columns(bins_csv, ("uncertainty_median", "mae", "mae_ci_low", "mae_ci_high"))
    xmax = float(d["uncertainty_median"].max()) * 1.15 or 1.0
    ymax = float(d["mae_ci_high"].max()) * 1.15 or 1.0
    c = _Canvas(460, 340)
    ax = _Axes(c, xlim=(0, xmax), ylim=(0, ymax))
    xt = np.round(np.linspace(0, xmax, 5), 2)
    yt = np.round(np.linspace(0, ymax, 5), 2)
    ax.frame(xlabel=f"posterior SD ({unit})", ylabel=f"MAE ({unit})",
             xticks=xt, yticks=yt)
    pts = [(ax.x(x), ax.y(y)) for x, y in zip(d["uncertainty_median"], d["mae"])]
    c.polyline(pts, stroke=PALETTE[0])
    for x, y, lo, hi in zip(d["uncertainty_median"], d["mae"],
                            d["mae_ci_low"], d["mae_ci_high"]):
        px = ax.x(x)
        c.line(px, ax.y(lo), px, ax.y(hi), stroke=PALETTE[0])
        c.line(px - 3, ax.y(lo), px + 3, ax.y(lo), stroke=PALETTE[0])
        c.line(px - 3, ax.y(hi), px + 3, ax.y(hi), stroke=PALETTE[0])
        c.circle(px, ax.y(y), 2.5, fill=PALETTE[0])
    c.text(c.width / 2, 12, title, anchor="middle")
    c.save(out_path)


def coverage_bar_plot(coverage_csv, out_path, title="coverage") -> None:
    """Nominal vs empirical coverage bars (cols level, empirical)."""
    d = read_columns(coverage_csv, ("level", "empirical"))
    n = len(d["level"])
    c = _Canvas(420, 320)
    ax = _Axes(c, xlim=(0, n), ylim=(0, 1.0))
    ax.frame(ylabel="coverage", yticks=(0, 0.25, 0.5, 0.75, 1))
    for i, (lv, emp) in enumerate(zip(d["level"], d["empirical"])):
        x0 = ax.x(i + 0.18)
        x1 = ax.x(i + 0.52)
        w = ax.x(0.30) - ax.x(0.0)
        c.rect(x0, ax.y(lv), w, ax.y(0) - ax.y(lv), fill="#bbbbbb")
        c.rect(x1, ax.y(emp), w, ax.y(0) - ax.y(emp), fill=PALETTE[0])
        c.text(ax.x(i + 0.5), ax.py0 + 16, f"{lv:.0%}", size=10, anchor="middle")
    c.text(ax.px0 + 8, ax.py1 + 14, "nominal", size=10, fill="#888888")
    c.text(ax.px0 + 8, ax.py1 + 27, "empirical", size=10, fill=PALETTE[0])
    c.text(c.width / 2, 12, title, anchor="middle")
    c.save(out_path)
