"""Report tables and static SVG plots.

The CSVs are the contract; the SVGs are written by hand from line, rect and
text primitives so no plotting library is needed.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import numpy as np

PALETTE = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02",
           "#a6761d", "#666666", "#1f78b4", "#b2df8a")


def fmt(x) -> str:
    """Stable CSV number format (round-trips floats exactly)."""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def write_csv(path: str | Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt(v) for v in row])


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]


# --- tables ---------------------------------------------------------------

def table1(summary_header: list[str], summary_rows: list[list[str]]) -> tuple[list[str], list[list]]:
    """Medoid memberships and ABM per ranked sub-phenotype, read from ``summary.csv``."""
    col = {name: i for i, name in enumerate(summary_header)}
    mus = sorted((c for c in summary_header if c.startswith("medoid_mu_")), key=lambda c: int(c.rsplit("_", 1)[1]))
    header = ["sub_phenotype", "size"] + [c.replace("medoid_", "") for c in mus] + ["ABM"]
    has_mort = "mortality_pct" in col
    if has_mort:
        header.append("mortality_pct")
    rows = []
    for r in summary_rows:
        row = [int(r[col["cluster"]]), int(r[col["size"]])] + [float(r[col[c]]) for c in mus]
        row.append(float(r[col["medoid_abm"]]))
        if has_mort:
            row.append(float(r[col["mortality_pct"]]))
        rows.append(row)
    return header, rows


def trajectory_quantiles(values: np.ndarray, labels: np.ndarray, feature_names: Sequence[str]) -> list[list]:
    """Per (sub-phenotype, feature, hour): median, 25th and 75th percentile."""
    rows = []
    for c in np.unique(labels):
        q25, med, q75 = np.percentile(values[labels == c], [25, 50, 75], axis=0)  # (P, T)
        for p, name in enumerate(feature_names):
            for h in range(values.shape[2]):
                rows.append([int(c), name, h, med[p, h], q25[p, h], q75[p, h]])
    return rows


# --- svg ------------------------------------------------------------------

def _num(x: float) -> str:
    return f"{x:.2f}"


def _text(x, y, s, size=11, anchor="middle", rotate=None) -> str:
    rot = f' transform="rotate({rotate} {_num(x)} {_num(y)})"' if rotate is not None else ""
    return (f'<text x="{_num(x)}" y="{_num(y)}" font-size="{size}" font-family="sans-serif" '
            f'text-anchor="{anchor}"{rot}>{s}</text>')


def _svg(width: int, height: int, body: list[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join([head, f'<rect width="{width}" height="{height}" fill="white"/>', *body, "</svg>"]) + "\n"


class _Axes:
    """Linear data -> pixel mapping for one panel."""

    def __init__(self, x0, y0, w, h, xlim, ylim):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        lo, hi = ylim
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        self.xlim, self.ylim = xlim, (lo, hi)

    def px(self, x):
        a, b = self.xlim
        return self.x0 + (np.asarray(x, dtype=float) - a) / (b - a if b > a else 1.0) * self.w

    def py(self, y):
        a, b = self.ylim
        return self.y0 + self.h - (np.asarray(y, dtype=float) - a) / (b - a) * self.h

    def frame(self, title=None) -> list[str]:
        out = [f'<rect x="{_num(self.x0)}" y="{_num(self.y0)}" width="{_num(self.w)}" height="{_num(self.h)}" '
               f'fill="none" stroke="#444"/>']
        for v in (self.ylim[0], self.ylim[1]):
            out.append(_text(self.x0 - 4, self.py(v) + 4, f"{v:.3g}", size=9, anchor="end"))
        for v in (self.xlim[0], self.xlim[1]):
            out.append(_text(self.px(v), self.y0 + self.h + 12, f"{v:g}", size=9))
        if title:
            out.append(_text(self.x0 + self.w / 2, self.y0 - 6, title, size=11))
        return out

    def polyline(self, xs, ys, color, width=1.5, dash=None) -> str:
        pts = " ".join(f"{_num(a)},{_num(b)}" for a, b in zip(self.px(xs), self.py(ys)))
        d = f' stroke-dasharray="{dash}"' if dash else ""
        return f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"{d}/>'

    def band(self, xs, lo, hi, color) -> str:
        top = [f"{_num(a)},{_num(b)}" for a, b in zip(self.px(xs), self.py(hi))]
        bot = [f"{_num(a)},{_num(b)}" for a, b in zip(self.px(xs)[::-1], self.py(lo)[::-1])]
        return f'<polygon points="{" ".join(top + bot)}" fill="{color}" fill-opacity="0.15" stroke="none"/>'


def silhouette_svg(ks: Sequence[int], scores: Sequence[float], chosen: int | None = None) -> str:
    ax = _Axes(60, 30, 420, 240, (min(ks), max(ks)), (min(scores), max(scores)))
    body = ax.frame("mean silhouette vs k")
    body.append(ax.polyline(ks, scores, PALETTE[0]))
    for k, s in zip(ks, scores):
        fill = PALETTE[1] if k == chosen else PALETTE[0]
        body.append(f'<circle cx="{_num(ax.px(k))}" cy="{_num(ax.py(s))}" r="3" fill="{fill}"/>')
    body.append(_text(270, 300, "k"))
    return _svg(520, 320, body)


def trajectories_svg(rows: list[list], feature_names: Sequence[str], n_hours: int) -> str:
    """Median lines with IQR bands, one panel per feature, one colour per sub-phenotype."""
    groups = sorted({int(r[0]) for r in rows})
    ncol = 2
    nrow = (len(feature_names) + ncol - 1) // ncol
    pw, ph = 300, 150
    width, height = 70 + ncol * (pw + 60), 50 + nrow * (ph + 50)
    body = []
    table = {}
    for c, name, h, med, lo, hi in rows:
        table.setdefault((int(c), name), []).append((int(h), float(med), float(lo), float(hi)))
    hours = np.arange(n_hours)
    for fi, name in enumerate(feature_names):
        r, cidx = divmod(fi, ncol)
        vals = [v for g in groups for _, *v in table[(g, name)]]
        ax = _Axes(70 + cidx * (pw + 60), 40 + r * (ph + 50), pw, ph, (0, max(n_hours - 1, 1)),
                   (min(x for v in vals for x in v), max(x for v in vals for x in v)))
        body += ax.frame(name)
        for gi, g in enumerate(groups):
            series = np.array([v for _, *v in sorted(table[(g, name)])])
            color = PALETTE[gi % len(PALETTE)]
            body.append(ax.band(hours, series[:, 1], series[:, 2], color))
            body.append(ax.polyline(hours, series[:, 0], color))
    for gi, g in enumerate(groups):
        x = 70 + gi * 110
        body.append(f'<rect x="{x}" y="8" width="12" height="12" fill="{PALETTE[gi % len(PALETTE)]}"/>')
        body.append(_text(x + 16, 18, f"sub-phenotype {g}", size=10, anchor="start"))
    return _svg(width, height, body)


def confusion_svg(matrix: np.ndarray, classes: Sequence, title: str) -> str:
    """Row-normalized confusion matrix as a grey-scale heatmap."""
    n = len(classes)
    cell = 40
    x0, y0 = 80, 50
    body = [_text(x0 + n * cell / 2, 20, title, size=12)]
    for i in range(n):
        for j in range(n):
            v = float(matrix[i, j])
            shade = int(round(255 * (1 - v)))
            x, y = x0 + j * cell, y0 + i * cell
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                        f'fill="rgb({shade},{shade},{shade})" stroke="#888"/>')
            body.append(_text(x + cell / 2, y + cell / 2 + 4, f"{v:.2f}", size=10).replace(
                "<text ", f'<text fill="{"white" if v > 0.5 else "black"}" '))
        body.append(_text(x0 - 8, y0 + i * cell + cell / 2 + 4, str(classes[i]), size=10, anchor="end"))
        body.append(_text(x0 + i * cell + cell / 2, y0 - 6, str(classes[i]), size=10))
    body.append(_text(x0 + n * cell / 2, y0 + n * cell + 20, "predicted", size=11))
    body.append(_text(x0 - 40, y0 + n * cell / 2, "true", size=11, rotate=-90))
    return _svg(x0 + n * cell + 40, y0 + n * cell + 40, body)
