"""Two-round vote-shift test.

Each box's shift is the change between its round-1 share for a group of
candidates and its round-2 share for one candidate. Under the null the
shifts are symmetric about their population mode; the heavier side of the
distribution is replaced by mirrored draws from the lighter side, and the
difference between actual and symmetrised vote totals gives the excess.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .ingest import ElectionRound, small_area_mask

log = logging.getLogger(__name__)

KDE_POINTS = 512
MIN_DELTAS = 100
MIN_MATCH_FRACTION = 0.5
DEFAULT_REPLICATES = 200


class VoteShiftError(ValueError):
    pass


@dataclass(frozen=True)
class BoxPair:
    box_id: str
    shares_r1: dict
    shares_r2: dict
    valid_votes_r2: int
    small_area: bool


@dataclass(frozen=True, eq=False)
class PairedRounds:
    """Boxes present in both rounds; ``idx1[k]`` and ``idx2[k]`` are the same box."""

    r1: ElectionRound
    r2: ElectionRound
    idx1: np.ndarray
    idx2: np.ndarray
    small_area: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return self.idx1.size

    @property
    def box_id(self):
        return self.r1.box_id[self.idx1]

    @property
    def valid_votes_r2(self):
        return self.r2.valid_votes[self.idx2]

    def share_r1(self, candidate):
        return self.r1.vote_share(candidate)[self.idx1]

    def share_r2(self, candidate):
        return self.r2.vote_share(candidate)[self.idx2]

    def votes_r2(self, candidate):
        return self.r2.votes_for(candidate)[self.idx2]

    def __iter__(self):
        s1 = {c: self.share_r1(c) for c in self.r1.candidates}
        s2 = {c: self.share_r2(c) for c in self.r2.candidates}
        valid = self.valid_votes_r2
        for k, bid in enumerate(self.box_id):
            yield BoxPair(
                str(bid),
                {c: float(s1[c][k]) for c in s1},
                {c: float(s2[c][k]) for c in s2},
                int(valid[k]),
                bool(self.small_area[k]),
            )


def pair_rounds(r1: ElectionRound, r2: ElectionRound, small_area_level: str = "county") -> PairedRounds:
    """Inner join of two rounds on box id.

    ``small_area`` marks boxes whose area (in round 1) holds at most two boxes.
    """
    pos2 = {b: i for i, b in enumerate(r2.box_id)}
    idx1, idx2 = [], []
    for i, b in enumerate(r1.box_id):
        j = pos2.get(b)
        if j is not None:
            idx1.append(i)
            idx2.append(j)
    idx1 = np.array(idx1, dtype=np.int64)
    idx2 = np.array(idx2, dtype=np.int64)
    n = len(idx1)
    denom = max(len(r1), len(r2))
    if denom == 0 or n < MIN_MATCH_FRACTION * denom:
        raise VoteShiftError(
            f"only {n} of {denom} boxes matched between rounds; the files probably do not belong together"
        )
    matched1 = np.zeros(len(r1), dtype=bool)
    matched1[idx1] = True
    matched2 = np.zeros(len(r2), dtype=bool)
    matched2[idx2] = True
    diag = {
        "matched": n,
        "unmatched_round1": int((~matched1).sum()),
        "unmatched_round2": int((~matched2).sum()),
        "unmatched_round1_ids": [str(b) for b in r1.box_id[~matched1][:20]],
        "unmatched_round2_ids": [str(b) for b in r2.box_id[~matched2][:20]],
    }
    if n < denom:
        log.info("paired %d boxes; %d/%d unmatched", n, diag["unmatched_round1"], diag["unmatched_round2"])
    small = small_area_mask(r1, small_area_level)[idx1]
    return PairedRounds(r1, r2, idx1, idx2, small, diag)


def _check(pairs, pro_r1, cand_r2):
    for c in pro_r1:
        if c not in pairs.r1.candidates:
            raise VoteShiftError(f"candidate {c!r} not in round 1")
    if cand_r2 not in pairs.r2.candidates:
        raise VoteShiftError(f"candidate {cand_r2!r} not in round 2")


def _base_r1(pairs: PairedRounds, pro_r1, literal_formula: bool):
    if literal_formula:
        t1 = pairs.r1.turnout()[pairs.idx1]
        return sum(pairs.r1.votes_for(c)[pairs.idx1] for c in pro_r1) / t1
    return sum(pairs.share_r1(c) for c in pro_r1)


def _value_r2(pairs: PairedRounds, cand_r2, literal_formula: bool):
    if literal_formula:
        return pairs.votes_r2(cand_r2) / pairs.r2.turnout()[pairs.idx2]
    return pairs.share_r2(cand_r2)


def compute_deltas(pairs: PairedRounds, pro_candidates_r1, candidate_r2: str, literal_formula: bool = False):
    """Per-box shift: round-2 share of ``candidate_r2`` minus the summed round-1 shares.

    ``literal_formula`` divides vote counts by turnout instead of using shares.
    """
    pro = tuple(pro_candidates_r1)
    _check(pairs, pro, candidate_r2)
    return _value_r2(pairs, candidate_r2, literal_formula) - _base_r1(pairs, pro, literal_formula)


def silverman_bandwidth(x) -> float:
    """Normal-reference bandwidth with a MAD-based scale.

    Falls back to the data range, then to 1, when the scale is zero.
    """
    x = np.asarray(x, dtype=float)
    sigma = np.median(np.abs(x - np.median(x))) / 0.6745
    if sigma <= 0:
        sigma = float(x.max() - x.min())
    if sigma <= 0:
        sigma = 1.0
    return float(sigma * (4.0 / (3.0 * x.size)) ** 0.2)


def kde_curve(deltas, points: int = KDE_POINTS, bandwidth: float | None = None):
    x = np.sort(np.asarray(deltas, dtype=float))
    grid = np.linspace(x[0], x[-1], points)
    h = bandwidth if bandwidth is not None else silverman_bandwidth(x)
    return grid, kernels.kde_grid(x, grid, h)


def estimate_mode(deltas, points: int = KDE_POINTS, bandwidth: float | None = None) -> float:
    """Grid argmax of a Gaussian KDE over [min, max]; ties go to the smaller value."""
    x = np.asarray(deltas, dtype=float)
    x = x[np.isfinite(x)]
    if x.size < MIN_DELTAS:
        raise VoteShiftError(f"need at least {MIN_DELTAS} finite deltas, got {x.size}")
    if x.min() == x.max():
        return float(x[0])
    grid, dens = kde_curve(x, points, bandwidth)
    return float(grid[int(np.argmax(dens))])


@dataclass
class VoteShiftReport:
    deltas: np.ndarray
    mode_hat: float
    b_plus: np.ndarray
    b_minus: np.ndarray
    excess_votes: float
    excess_sd: float
    excess_se: float
    excess_pct: float
    n_replicates: int
    actual_total: float
    expected_total: float
    total_valid_r2: int
    heavy_side: str
    histogram: list | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def at_mode(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.deltas.size), np.concatenate([self.b_plus, self.b_minus]))

    def to_dict(self, include_deltas: bool = False) -> dict:
        d = {
            "mode_hat": self.mode_hat,
            "n_pairs": int(self.deltas.size),
            "n_plus": int(self.b_plus.size),
            "n_minus": int(self.b_minus.size),
            "n_at_mode": int(self.deltas.size - self.b_plus.size - self.b_minus.size),
            "heavy_side": self.heavy_side,
            "excess_votes": self.excess_votes,
            "excess_votes_rounded": int(round(self.excess_votes)),
            "excess_sd": self.excess_sd,
            "excess_se": self.excess_se,
            "excess_pct": self.excess_pct,
            "n_replicates": self.n_replicates,
            "actual_total": self.actual_total,
            "expected_total": self.expected_total,
            "total_valid_r2": self.total_valid_r2,
            "histogram": self.histogram,
            "diagnostics": self.diagnostics,
        }
        if include_deltas:
            d["deltas"] = self.deltas.tolist()
        return d


def symmetrize_and_excess(
    deltas,
    pairs: PairedRounds,
    mode_hat: float,
    pro_candidates_r1=None,
    candidate_r2: str | None = None,
    replicates: int = DEFAULT_REPLICATES,
    seed: int = 0,
    literal_formula: bool = False,
    beneficiary_votes=None,
    base_r1=None,
) -> VoteShiftReport:
    """Excess round-2 votes relative to a symmetrised shift distribution.

    Boxes on the heavier side of the mode (larger mean absolute deviation)
    get their deviation replaced by the negation of a deviation drawn with
    replacement from the lighter side; their counterfactual round-2 votes
    are ``(base_r1 + mode_hat + new_dev) * valid_r2`` (real valued). The
    excess is the actual total minus the mean counterfactual total.

    ``beneficiary_votes`` and ``base_r1`` default to the round-2 votes of
    ``candidate_r2`` and the summed round-1 shares of ``pro_candidates_r1``.
    """
    if replicates < 1:
        raise VoteShiftError("replicates must be >= 1")
    d = np.asarray(deltas, dtype=float)
    if d.size != len(pairs):
        raise VoteShiftError("deltas and pairs differ in length")
    if beneficiary_votes is None or base_r1 is None:
        if pro_candidates_r1 is None or candidate_r2 is None:
            raise VoteShiftError("candidates are required when votes/base are not supplied")
        pro = tuple(pro_candidates_r1)
        _check(pairs, pro, candidate_r2)
        if beneficiary_votes is None:
            beneficiary_votes = pairs.votes_r2(candidate_r2)
        if base_r1 is None:
            base_r1 = _base_r1(pairs, pro, literal_formula)
    votes = np.asarray(beneficiary_votes, dtype=float)
    base = np.asarray(base_r1, dtype=float)
    valid = pairs.valid_votes_r2.astype(float)
    # counterfactual values are shares (or V/t values), converted back to votes
    scale = pairs.r2.turnout()[pairs.idx2] if literal_formula else valid

    dev = d - mode_hat
    b_plus = np.flatnonzero(dev > 0)
    b_minus = np.flatnonzero(dev < 0)
    mean_plus = float(np.abs(dev[b_plus]).mean()) if b_plus.size else 0.0
    mean_minus = float(np.abs(dev[b_minus]).mean()) if b_minus.size else 0.0
    heavy, light, side = (b_plus, b_minus, "plus") if mean_plus >= mean_minus else (b_minus, b_plus, "minus")
    diag = {"mean_abs_dev_plus": mean_plus, "mean_abs_dev_minus": mean_minus, "one_side_empty": False}

    actual = float(votes.sum())
    untouched = actual - float(votes[heavy].sum())
    fixed = float(((base[heavy] + mode_hat) * scale[heavy]).sum())
    w = scale[heavy]
    children = np.random.SeedSequence(seed).spawn(replicates)
    totals = np.empty(replicates)
    if light.size == 0:
        diag["one_side_empty"] = True
        log.warning("one side of the mode is empty; replacing deviations with zero")
        totals[:] = untouched + fixed
    else:
        light_dev = dev[light]
        for r, child in enumerate(children):
            j = np.random.default_rng(child).integers(0, light.size, heavy.size)
            totals[r] = untouched + fixed - float(np.dot(light_dev[j], w))
    expected = float(totals.mean())
    sd = float(totals.std(ddof=1)) if replicates > 1 else 0.0
    excess = actual - expected
    total_valid = int(pairs.valid_votes_r2.sum())
    return VoteShiftReport(
        deltas=d,
        mode_hat=float(mode_hat),
        b_plus=b_plus,
        b_minus=b_minus,
        excess_votes=excess,
        excess_sd=sd,
        excess_se=sd / math.sqrt(replicates),
        excess_pct=excess / total_valid if total_valid else float("nan"),
        n_replicates=replicates,
        actual_total=actual,
        expected_total=expected,
        total_valid_r2=total_valid,
        heavy_side=side,
        diagnostics=diag,
    )


def shift_histogram(deltas, pairs: PairedRounds, n_bins: int = 50, tail_percent: float = 1.0) -> list[dict]:
    """Histogram of shifts with the outer percentiles merged into single end bins.

    Each bin carries the fraction of its boxes in small areas (``None`` if empty).
    """
    d = np.asarray(deltas, dtype=float)
    if n_bins < 3:
        raise VoteShiftError("n_bins must be >= 3")
    lo, hi = float(d.min()), float(d.max())
    q_lo, q_hi = np.percentile(d, [tail_percent, 100.0 - tail_percent])
    edges = np.unique(np.concatenate([[lo], np.linspace(q_lo, q_hi, n_bins - 1), [hi]]))
    if edges.size < 2:
        edges = np.array([lo, lo + 1e-12])
    counts, _ = np.histogram(d, bins=edges)
    small, _ = np.histogram(d[pairs.small_area], bins=edges)
    return [
        {
            "bin_low": float(edges[i]),
            "bin_high": float(edges[i + 1]),
            "count": int(counts[i]),
            "small_area_fraction": (float(small[i] / counts[i]) if counts[i] else None),
        }
        for i in range(counts.size)
    ]


def run(
    pairs: PairedRounds,
    pro_candidates_r1,
    candidate_r2: str,
    replicates: int = DEFAULT_REPLICATES,
    seed: int = 0,
    literal_formula: bool = False,
    n_bins: int = 50,
) -> VoteShiftReport:
    """Deltas, mode, symmetrised excess and histogram in one call."""
    deltas = compute_deltas(pairs, pro_candidates_r1, candidate_r2, literal_formula)
    mode_hat = estimate_mode(deltas)
    rep = symmetrize_and_excess(deltas, pairs, mode_hat, pro_candidates_r1, candidate_r2,
                                replicates, seed, literal_formula)
    rep.histogram = shift_histogram(deltas, pairs, n_bins)
    rep.diagnostics["pairing"] = pairs.diagnostics
    return rep


def write_histogram_csv(histogram, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_low", "bin_high", "count", "small_area_fraction"])
        for b in histogram:
            frac = b["small_area_fraction"]
            w.writerow([repr(b["bin_low"]), repr(b["bin_high"]), b["count"], "" if frac is None else repr(frac)])
    return path


def write_report_json(report: VoteShiftReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return path
