"""Voter-rigging test: do small units sit higher in the standardised fingerprint?

For every size threshold ``p`` (percentile of electorate sizes) the boxes are
split into a small set (electorate at or below the cutoff) and a large set.
The displacement between the centroids of the two sets in standardised
(turnout, share) coordinates is signed so that a shift of the small units
toward higher turnout and vote share is positive. Reference elections give
a per-``p`` acceptable range.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fingerprint import standardize
from .ingest import ElectionRound
from .synth import nearest_rank_cutoff

DEFAULT_THRESHOLDS = tuple(range(1, 51))
MIN_SMALL = 10
CONFINED_P = 20


class RiggingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Envelope:
    thresholds: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    source: list = field(default_factory=list)

    def bounds(self, p: int):
        i = int(np.flatnonzero(self.thresholds == p)[0])
        return float(self.lower[i]), float(self.upper[i])

    def to_dict(self):
        return {
            "thresholds": self.thresholds.tolist(),
            "lower": _nan_to_none(self.lower),
            "upper": _nan_to_none(self.upper),
            "source": list(self.source),
        }


@dataclass(frozen=True, eq=False)
class RiggingProfile:
    thresholds: np.ndarray
    delta: np.ndarray
    n_small: np.ndarray
    n_large: np.ndarray
    candidate: str = ""
    level: str = "county"
    label: str = ""
    envelope: Envelope | None = None

    @property
    def outside_envelope(self) -> list[int]:
        if self.envelope is None:
            return []
        upper = _align(self.envelope, self.thresholds)
        with np.errstate(invalid="ignore"):
            out = self.delta > upper
        return [int(p) for p in self.thresholds[out]]

    def with_envelope(self, envelope: Envelope) -> "RiggingProfile":
        return RiggingProfile(
            self.thresholds, self.delta, self.n_small, self.n_large,
            self.candidate, self.level, self.label, envelope,
        )

    def to_dict(self):
        return {
            "label": self.label,
            "candidate": self.candidate,
            "level": self.level,
            "thresholds": self.thresholds.tolist(),
            "delta": _nan_to_none(self.delta),
            "n_small": self.n_small.tolist(),
            "n_large": self.n_large.tolist(),
            "envelope": self.envelope.to_dict() if self.envelope is not None else None,
            "outside_envelope": self.outside_envelope,
        }


def _nan_to_none(a):
    return [None if not np.isfinite(x) else float(x) for x in a]


def _align(envelope: Envelope, thresholds):
    """Upper bound at each threshold; NaN where the envelope has no entry."""
    lookup = dict(zip(envelope.thresholds.tolist(), envelope.upper.tolist()))
    return np.array([lookup.get(int(p), np.nan) for p in thresholds])


def _check_groups(rnd: ElectionRound, level: str, fallback_parent: bool):
    if fallback_parent:
        return
    _, counts = np.unique(rnd.group_codes(level)[0], return_counts=True)
    if counts.size and counts.max() < 2:
        raise RiggingError(f"every {level} group holds a single box and parent fallback is disabled")


def displacement_profile(
    rnd: ElectionRound,
    candidate: str,
    level: str = "county",
    thresholds=DEFAULT_THRESHOLDS,
    fallback_parent: bool = True,
) -> RiggingProfile:
    """Signed centroid displacement of small vs large units for each threshold."""
    if len(rnd) == 0:
        raise RiggingError("empty round")
    _check_groups(rnd, level, fallback_parent)
    st, sv, _ = standardize(rnd, candidate, level, fallback_parent)
    ok = np.isfinite(st) & np.isfinite(sv)
    size = rnd.electorate
    thresholds = np.asarray(thresholds, dtype=np.int64)
    delta = np.full(thresholds.size, np.nan)
    n_small = np.zeros(thresholds.size, dtype=np.int64)
    for i, p in enumerate(thresholds):
        small = size <= nearest_rank_cutoff(size, float(p))
        n_small[i] = int(small.sum())
        a, b = small & ok, ~small & ok
        if n_small[i] < MIN_SMALL or not a.any() or not b.any():
            continue
        dx = st[a].mean() - st[b].mean()
        dy = sv[a].mean() - sv[b].mean()
        dist = math.hypot(dx, dy)
        delta[i] = -dist if dx + dy < 0 else dist
    return RiggingProfile(thresholds, delta, n_small, len(rnd) - n_small, candidate, level, rnd.round_label)


def build_envelope(references, level: str = "county", thresholds=DEFAULT_THRESHOLDS) -> Envelope:
    """Acceptable range per threshold from ``(round, candidate)`` reference pairs.

    Bounds are the min/max of the reference displacements widened by their
    standard deviation. A lower bound is not widened below zero where every
    reference displacement is non-negative.
    """
    references = list(references)
    if len(references) < 2:
        raise RiggingError("at least two reference elections are required")
    profiles = [
        p if isinstance(p, RiggingProfile) else displacement_profile(p[0], p[1], level, thresholds)
        for p in references
    ]
    D = np.vstack([p.delta for p in profiles])
    thresholds = profiles[0].thresholds
    lower = np.full(thresholds.size, np.nan)
    upper = np.full(thresholds.size, np.nan)
    for i in range(thresholds.size):
        col = D[:, i][np.isfinite(D[:, i])]
        if col.size == 0:
            continue
        sd = float(np.std(col, ddof=1)) if col.size >= 2 else 0.0
        lo, hi = float(col.min()) - sd, float(col.max()) + sd
        if col.min() >= 0:
            lo = max(lo, 0.0)
        lower[i], upper[i] = lo, hi
    return Envelope(thresholds, lower, upper, [p.label for p in profiles])


def verdict(profile: RiggingProfile) -> dict:
    """Flagged thresholds plus where the excess over the upper bound peaks."""
    if profile.envelope is None:
        raise RiggingError("profile has no envelope")
    flagged = profile.outside_envelope
    peak = None
    if flagged:
        excess = profile.delta - _align(profile.envelope, profile.thresholds)
        idx = [int(np.flatnonzero(profile.thresholds == p)[0]) for p in flagged]
        peak = flagged[int(np.argmax(excess[idx]))]
    confined = bool(flagged) and max(flagged) <= CONFINED_P
    if not flagged:
        summary = "displacement inside the acceptable range at every threshold"
    elif confined:
        summary = (f"displacement above the acceptable range at {len(flagged)} threshold(s), "
                   f"all at p <= {CONFINED_P} (confined to the smallest units), largest excess at p = {peak}")
    else:
        summary = (f"displacement above the acceptable range at {len(flagged)} threshold(s), "
                   f"extending to p = {max(flagged)}, largest excess at p = {peak}")
    return {"flagged_thresholds": flagged, "confined_to_small": confined, "peak_threshold": peak,
            "summary": summary}


# --- output -----------------------------------------------------------------

def write_profile_csv(profile: RiggingProfile, path) -> Path:
    path = Path(path)
    flagged = set(profile.outside_envelope)
    env = profile.envelope
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "delta", "n_small", "n_large", "lower", "upper", "flagged"])
        for i, p in enumerate(profile.thresholds):
            lo = hi = ""
            if env is not None and int(p) in env.thresholds:
                lo, hi = env.bounds(int(p))
            d = profile.delta[i]
            w.writerow([int(p), "" if not np.isfinite(d) else repr(float(d)), int(profile.n_small[i]),
                        int(profile.n_large[i]), _fmt(lo), _fmt(hi), int(int(p) in flagged)])
    return path


def _fmt(x):
    if x == "" or not np.isfinite(x):
        return ""
    return repr(float(x))


def write_profile_json(profile: RiggingProfile, path) -> Path:
    path = Path(path)
    doc = profile.to_dict()
    if profile.envelope is not None:
        doc["verdict"] = verdict(profile)
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path
