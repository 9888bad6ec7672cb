"""Vote/turnout fingerprints and cumulative vote-share curves.

Turnout is always the x axis and vote share the y axis; grid rows are
vote-share bins in ascending order.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .ingest import LEVELS, ElectionRound

DEFAULT_BINS = 100
DEFAULT_STD_BINS = 80
DEFAULT_STD_RANGE = (0.0, 2.0)


@dataclass(frozen=True, eq=False)
class Fingerprint:
    grid: np.ndarray
    x_edges: np.ndarray
    y_edges: np.ndarray
    candidate: str
    standardized: bool
    n_boxes: int
    diagnostics: dict = field(default_factory=dict)

    @property
    def bins(self) -> int:
        return self.grid.shape[0]

    def normalized(self) -> np.ndarray:
        total = self.grid.sum()
        return self.grid / total if total else self.grid.astype(float)


@dataclass(frozen=True, eq=False)
class CumulativeCurve:
    thresholds: np.ndarray
    shares: np.ndarray
    mode: str
    candidate: str

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.thresholds.tolist(), self.shares.tolist()))

    def crossing(self, level: float = 0.5) -> float | None:
        """Threshold from which the curve stays at or above ``level``.

        ``None`` when the curve ends below ``level``.
        """
        if self.shares.size == 0 or self.shares[-1] < level:
            return None
        below = np.flatnonzero(self.shares < level)
        if below.size == 0:
            return float(self.thresholds[0])
        return float(self.thresholds[below[-1] + 1])

    def to_csv(self, path) -> Path:
        path = Path(path)
        name = "turnout" if self.mode == "by_turnout" else "rank"
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([name, "cumulative_share"])
            for t, s in zip(self.thresholds, self.shares):
                w.writerow([repr(float(t)) if self.mode == "by_turnout" else int(t), repr(float(s))])
        return path


def _check_bins(bins):
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")


def raw_fingerprint(rnd: ElectionRound, candidate: str, bins: int = DEFAULT_BINS) -> Fingerprint:
    _check_bins(bins)
    share = rnd.vote_share(candidate)
    grid = kernels.hist2d(rnd.turnout(), share, 0.0, 1.0, bins)
    edges = np.linspace(0.0, 1.0, bins + 1)
    return Fingerprint(grid, edges, edges.copy(), candidate, False, len(rnd))


def standardize(rnd: ElectionRound, candidate: str, level: str = "county", fallback_parent: bool = True):
    """Divide each box's turnout and vote share by its group means.

    With ``fallback_parent`` a box whose group at ``level`` has a single
    box is normalised by the nearest ancestor group holding at least two.
    Boxes whose reference group has a zero mean are returned as NaN.

    Returns ``(std_turnout, std_share, diagnostics)``.
    """
    if level not in LEVELS:
        raise ValueError(f"unknown level {level!r}")
    t = rnd.turnout()
    v = rnd.vote_share(candidate)
    n = len(rnd)
    mean_t = np.full(n, np.nan)
    mean_v = np.full(n, np.nan)
    assigned = np.zeros(n, dtype=bool)
    depth = LEVELS.index(level)
    fallback_boxes = 0
    for d in range(depth, -1, -1):
        codes, keys = rnd.group_codes(LEVELS[d])
        mt, counts = kernels.group_means(codes, t, len(keys))
        mv, _ = kernels.group_means(codes, v, len(keys))
        take = ~assigned
        if fallback_parent and d > 0:
            take &= counts[codes] >= 2
        if d < depth:
            fallback_boxes += int(take.sum())
        mean_t[take] = mt[codes[take]]
        mean_v[take] = mv[codes[take]]
        assigned |= take
        if not fallback_parent:
            break
    zero = (mean_t == 0) | (mean_v == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        st = np.where(zero, np.nan, t / mean_t)
        sv = np.where(zero, np.nan, v / mean_v)
    own_codes, _ = rnd.group_codes(level)
    diag = {
        "level": level,
        "skipped_boxes": int(zero.sum()),
        "skipped_groups": int(np.unique(own_codes[zero]).size),
        "fallback_boxes": fallback_boxes,
    }
    return st, sv, diag


def standardized_fingerprint(
    rnd: ElectionRound,
    candidate: str,
    bins: int = DEFAULT_STD_BINS,
    level: str = "county",
    value_range: tuple[float, float] = DEFAULT_STD_RANGE,
    fallback_parent: bool = True,
) -> Fingerprint:
    _check_bins(bins)
    st, sv, diag = standardize(rnd, candidate, level, fallback_parent)
    lo, hi = value_range
    grid = kernels.hist2d(st, sv, lo, hi, bins)
    edges = np.linspace(lo, hi, bins + 1)
    n_used = len(rnd) - diag["skipped_boxes"]
    return Fingerprint(grid, edges, edges.copy(), candidate, True, n_used, diag)


def cumulative_turnout_curve(rnd: ElectionRound, candidate: str) -> CumulativeCurve:
    """Aggregate vote share of all boxes with turnout at or below each level."""
    t = rnd.turnout()
    order = np.lexsort((rnd.box_id.astype(str), t))
    t_sorted = t[order]
    cum_votes = np.cumsum(rnd.votes_for(candidate)[order])
    cum_valid = np.cumsum(rnd.valid_votes[order])
    # one point per distinct turnout, taken at the last box of each run
    last = np.flatnonzero(np.append(t_sorted[1:] != t_sorted[:-1], True)) if t.size else np.array([], int)
    return CumulativeCurve(t_sorted[last], cum_votes[last] / cum_valid[last], "by_turnout", candidate)


def rank_cumulative_curve(rnd: ElectionRound, candidate: str) -> CumulativeCurve:
    """Aggregate vote share over the ``i`` largest boxes, for every rank ``i``.

    Ties in electorate are ordered by box id.
    """
    order = np.lexsort((rnd.box_id.astype(str), -rnd.electorate))
    cum_votes = np.cumsum(rnd.votes_for(candidate)[order])
    cum_valid = np.cumsum(rnd.valid_votes[order])
    ranks = np.arange(1, len(rnd) + 1)
    return CumulativeCurve(ranks, cum_votes / cum_valid, "by_rank", candidate)


# --- output -----------------------------------------------------------------

def write_grid_csv(fp: Fingerprint, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in fp.grid:
            w.writerow([int(x) for x in row])
    return path


def read_grid_csv(path) -> np.ndarray:
    with Path(path).open(newline="") as fh:
        rows = [[int(x) for x in row] for row in csv.reader(fh) if row]
    return np.array(rows, dtype=np.int64)


def _weighted_quantiles(counts, centers, qs):
    cum = np.cumsum(counts)
    total = cum[-1]
    return [float(centers[np.searchsorted(cum, q * total, side="left")]) for q in qs]


def row_turnout_quantiles(fp: Fingerprint, min_count: int = 5):
    """Per vote-share row: turnout quantiles (2.5, 25, 50, 75, 97.5 %) from the grid."""
    centers = 0.5 * (fp.x_edges[1:] + fp.x_edges[:-1])
    out = {}
    for r, row in enumerate(fp.grid):
        if row.sum() >= min_count:
            out[r] = _weighted_quantiles(row, centers, (0.025, 0.25, 0.5, 0.75, 0.975))
    return out


def render_svg(fp: Fingerprint, title: str = "") -> str:
    size, margin = 500, 60
    b = fp.bins
    cell = size / b
    x0, x1 = fp.x_edges[0], fp.x_edges[-1]
    y0, y1 = fp.y_edges[0], fp.y_edges[-1]

    def px(x):
        return margin + (x - x0) / (x1 - x0) * size

    def py(y):
        return margin + size - (y - y0) / (y1 - y0) * size

    W = size + 2 * margin
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{W}" viewBox="0 0 {W} {W}">',
        f'<rect x="{margin}" y="{margin}" width="{size}" height="{size}" fill="white" stroke="black"/>',
    ]
    peak = fp.grid.max() if fp.grid.size else 0
    if peak > 0:
        scale = np.log1p(fp.grid) / np.log1p(peak)
        for r, c in zip(*np.nonzero(fp.grid)):
            a = scale[r, c]
            out.append(
                f'<rect x="{margin + c * cell:.3f}" y="{margin + size - (r + 1) * cell:.3f}" '
                f'width="{cell:.3f}" height="{cell:.3f}" fill="rgb(8,48,107)" fill-opacity="{a:.4f}"/>'
            )
    ycent = 0.5 * (fp.y_edges[1:] + fp.y_edges[:-1])
    hh = cell * 0.35
    for r, (lo95, q25, q50, q75, hi95) in row_turnout_quantiles(fp).items():
        y = py(ycent[r])
        out.append(f'<line x1="{px(lo95):.3f}" y1="{y:.3f}" x2="{px(hi95):.3f}" y2="{y:.3f}" stroke="red" stroke-width="0.5"/>')
        out.append(
            f'<rect x="{px(q25):.3f}" y="{y - hh:.3f}" width="{px(q75) - px(q25):.3f}" height="{2 * hh:.3f}" '
            f'fill="none" stroke="red" stroke-width="0.6"/>'
        )
        out.append(f'<line x1="{px(q50):.3f}" y1="{y - hh:.3f}" x2="{px(q50):.3f}" y2="{y + hh:.3f}" stroke="red"/>')
    for k in range(5):
        xt = x0 + (x1 - x0) * k / 4
        yt = y0 + (y1 - y0) * k / 4
        out.append(f'<text x="{px(xt):.1f}" y="{margin + size + 18}" font-size="12" text-anchor="middle">{xt:g}</text>')
        out.append(f'<text x="{margin - 8}" y="{py(yt) + 4:.1f}" font-size="12" text-anchor="end">{yt:g}</text>')
    prefix = "standardised " if fp.standardized else ""
    out.append(f'<text x="{margin + size / 2}" y="{W - 15}" font-size="14" text-anchor="middle">{prefix}turnout</text>')
    out.append(
        f'<text x="18" y="{margin + size / 2}" font-size="14" text-anchor="middle" '
        f'transform="rotate(-90 18 {margin + size / 2})">{prefix}vote share ({fp.candidate})</text>'
    )
    if title:
        out.append(f'<text x="{W / 2}" y="30" font-size="15" text-anchor="middle">{title}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_heatmap(fp: Fingerprint, path, title: str = "") -> tuple[Path, Path]:
    """Write ``<path>.csv`` (the grid) and ``<path>.svg`` (heatmap with turnout box plots)."""
    base = Path(path)
    if base.suffix in (".csv", ".svg"):
        base = base.with_suffix("")
    csv_path = write_grid_csv(fp, base.with_name(base.name + ".csv"))
    svg_path = base.with_name(base.name + ".svg")
    svg_path.write_text(render_svg(fp, title))
    return csv_path, svg_path
