"""Synthetic elections with known amounts of ballot stuffing and coercion.

Each box draws an electorate (log-normal), a fair turnout and incumbent
share (truncated Gaussians around county-shifted means), optional additive
boosts for the smallest boxes, and optional stuffing that converts a
fraction of non-voters into incumbent votes. Every random stream is drawn
independently of the model parameters, so two specs that differ only in,
say, the stuffing fraction produce paired samples under the same seed.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .ingest import ElectionRound, small_area_mask

log = logging.getLogger(__name__)

MAX_REJECTIONS = 100
_STREAMS = ("structure", "electorate", "county_t", "county_v", "turnout", "share", "select", "intensity", "extreme")


@dataclass(frozen=True)
class Coercion:
    percentile: float = 10.0
    turnout_boost: float = 0.1
    share_boost: float = 0.1


@dataclass(frozen=True)
class SynthSpec:
    n_boxes: int = 50_000
    electorate_mu: float = math.log(300.0)
    electorate_sigma: float = 0.5
    turnout_mean: float = 0.85
    turnout_sd: float = 0.08
    share_mean: float = 0.5
    share_sd: float = 0.12
    county_sd: float = 0.05
    districts_per_province: int = 10
    counties_per_district: int = 10
    mean_boxes_per_county: float = 4.0
    stuffing_fraction: float = 0.0
    stuffing_intensity: float = 2.0
    extreme_fraction: float = 0.0
    coercion: Coercion | None = None
    candidates: tuple[str, ...] = ("E", "K")
    seed: int = 0
    label: str = "synthetic"

    def __post_init__(self):
        if isinstance(self.coercion, dict):
            object.__setattr__(self, "coercion", Coercion(**self.coercion))
        object.__setattr__(self, "candidates", tuple(self.candidates))
        problems = []
        if self.n_boxes < 0:
            problems.append("n_boxes must be >= 0")
        for name in ("electorate_sigma", "turnout_sd", "share_sd"):
            if getattr(self, name) <= 0:
                problems.append(f"{name} must be > 0")
        if self.county_sd < 0:
            problems.append("county_sd must be >= 0")
        for name in ("stuffing_fraction", "extreme_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        if self.stuffing_fraction + self.extreme_fraction > 1.0:
            problems.append("stuffing_fraction + extreme_fraction must be <= 1")
        if self.stuffing_intensity < 0:
            problems.append("stuffing_intensity must be >= 0")
        if self.districts_per_province < 1 or self.counties_per_district < 1 or self.mean_boxes_per_county < 1:
            problems.append("group structure sizes must be >= 1")
        if len(self.candidates) < 2:
            problems.append("need an incumbent and at least one other candidate")
        if self.coercion is not None and not 0 < self.coercion.percentile <= 100:
            problems.append("coercion percentile must lie in (0, 100]")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def from_json(cls, path) -> "SynthSpec":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["candidates"] = list(self.candidates)
        return d


def truncated_normal(rng: np.random.Generator, mean, sd, size: int, lo=0.0, hi=1.0):
    """Rejection-sample N(mean, sd) restricted to [lo, hi].

    Draws still outside after ``MAX_REJECTIONS`` rounds are clamped.
    Returns ``(values, n_clamped)``.
    """
    mean = np.broadcast_to(np.asarray(mean, dtype=float), (size,))
    x = mean + sd * rng.standard_normal(size)
    bad = np.flatnonzero((x < lo) | (x > hi))
    for _ in range(MAX_REJECTIONS):
        if bad.size == 0:
            break
        x[bad] = mean[bad] + sd * rng.standard_normal(bad.size)
        bad = bad[(x[bad] < lo) | (x[bad] > hi)]
    np.clip(x, lo, hi, out=x)
    return x, int(bad.size)


def stuff(turnout, share, fraction):
    """Turn ``fraction`` of the non-voters into incumbent votes."""
    t_new = turnout + fraction * (1.0 - turnout)
    with np.errstate(divide="ignore", invalid="ignore"):
        s_new = np.where(t_new > 0, (share * turnout + fraction * (1.0 - turnout)) / t_new, share)
    return t_new, s_new


def realize(electorate, turnout, share):
    """Round continuous turnout/share to integer (valid, incumbent) counts."""
    valid = np.clip(np.rint(turnout * electorate), 0, electorate).astype(np.int64)
    inc = np.clip(np.rint(share * valid), 0, valid).astype(np.int64)
    return valid, inc


def nearest_rank_cutoff(values, percentile: float):
    """Nearest-rank percentile of ``values``."""
    v = np.sort(np.asarray(values))
    if v.size == 0:
        raise ValueError("empty sample")
    k = max(int(math.ceil(percentile / 100.0 * v.size)), 1)
    return v[min(k, v.size) - 1]


def split_remainder(remainder, n_others: int):
    """Deal ``remainder`` votes evenly to ``n_others`` candidates (extras to the first ones)."""
    base = remainder // n_others
    extra = remainder % n_others
    cols = [base + (extra > j) for j in range(n_others)]
    return np.stack(cols, axis=1).astype(np.int64)


def _structure(rng, spec: SynthSpec):
    n = spec.n_boxes
    sizes = []
    total = 0
    while total < n:
        chunk = 1 + rng.poisson(spec.mean_boxes_per_county - 1.0, size=max(16, (n - total) // 2))
        for s in chunk:
            sizes.append(min(int(s), n - total))
            total += sizes[-1]
            if total >= n:
                break
    county_of_box = np.repeat(np.arange(len(sizes)), sizes)
    per_prov = spec.districts_per_province * spec.counties_per_district
    c = county_of_box
    prov = [f"P{p:03d}" for p in c // per_prov]
    dist = [f"D{d:03d}" for d in (c // spec.counties_per_district) % spec.districts_per_province]
    cnty = [f"C{k:03d}" for k in c % spec.counties_per_district]
    return county_of_box, len(sizes), prov, dist, cnty


def generate(spec: SynthSpec) -> ElectionRound:
    """Draw one synthetic :class:`ElectionRound`; deterministic in ``spec.seed``."""
    streams = dict(zip(_STREAMS, (np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(len(_STREAMS)))))
    n = spec.n_boxes
    county_of_box, n_counties, prov, dist, cnty = _structure(streams["structure"], spec)

    electorate = np.maximum(np.rint(streams["electorate"].lognormal(spec.electorate_mu, spec.electorate_sigma, n)), 1).astype(np.int64)
    off_t = spec.county_sd * streams["county_t"].standard_normal(n_counties)
    off_v = spec.county_sd * streams["county_v"].standard_normal(n_counties)
    t, clamped_t = truncated_normal(streams["turnout"], spec.turnout_mean + off_t[county_of_box], spec.turnout_sd, n)
    v, clamped_v = truncated_normal(streams["share"], spec.share_mean + off_v[county_of_box], spec.share_sd, n)

    diagnostics = {"clamped_turnout": clamped_t, "clamped_share": clamped_v}
    coerced = np.zeros(n, dtype=bool)
    if spec.coercion is not None and n:
        cut = nearest_rank_cutoff(electorate, spec.coercion.percentile)
        coerced = electorate <= cut
        t_raw = t[coerced] + spec.coercion.turnout_boost
        v_raw = v[coerced] + spec.coercion.share_boost
        over = ((t_raw > 1) | (t_raw < 0) | (v_raw > 1) | (v_raw < 0)).mean()
        t[coerced] = np.clip(t_raw, 0, 1)
        v[coerced] = np.clip(v_raw, 0, 1)
        diagnostics["coerced_boxes"] = int(coerced.sum())
        diagnostics["coercion_clamped_fraction"] = float(over)
        if over > 0.5:
            log.warning("coercion boosts clamp %.0f%% of affected boxes", 100 * over)

    u = streams["select"].random(n)
    x = streams["intensity"].random(n)
    ext = streams["extreme"].uniform(0.9, 1.0, n)
    incremental = u < spec.stuffing_fraction
    extreme = (u >= spec.stuffing_fraction) & (u < spec.stuffing_fraction + spec.extreme_fraction)
    amount = np.zeros(n)
    amount[incremental] = x[incremental] ** spec.stuffing_intensity
    amount[extreme] = ext[extreme]
    hit = incremental | extreme
    t[hit], v[hit] = stuff(t[hit], v[hit], amount[hit])

    valid, inc = realize(electorate, t, v)
    votes = np.column_stack([inc, split_remainder(valid - inc, len(spec.candidates) - 1)])
    keep = valid > 0
    diagnostics.update(stuffed_boxes=int(incremental.sum()), extreme_boxes=int(extreme.sum()))
    meta = {
        "spec": spec.to_dict(),
        "diagnostics": diagnostics,
        "stuffed": incremental[keep] | extreme[keep],
        "coerced": coerced[keep],
    }
    box_id = np.array([f"B{i:07d}" for i in range(n)], dtype=object)
    rnd = ElectionRound(
        spec.label,
        box_id[keep],
        np.array(prov, dtype=object)[keep],
        np.array(dist, dtype=object)[keep],
        np.array(cnty, dtype=object)[keep],
        electorate[keep],
        valid[keep],
        votes[keep],
        spec.candidates,
        dropped_zero_valid=int((~keep).sum()),
        metadata=meta,
    )
    return rnd


@dataclass(frozen=True)
class ShiftSpec:
    base_shift: float = 0.0
    noise_sd: float = 0.02
    skew_fraction: float = 0.0
    skew_magnitude: float = 0.4
    small_area_only: bool = False
    small_area_level: str = "county"
    incumbent: str | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.skew_fraction <= 1:
            raise ValueError("skew_fraction must lie in [0, 1]")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")


def inject_round2(round1: ElectionRound, shift: ShiftSpec, label: str | None = None) -> ElectionRound:
    """Second round paired box-by-box with ``round1``.

    The incumbent's share moves by ``base_shift`` plus Gaussian noise in
    every box; a ``skew_fraction`` of boxes gets ``skew_magnitude`` on top.
    Valid votes are carried over unchanged. ``metadata`` records the skewed
    boxes and the ground-truth excess (nominal and after rounding/clamping).
    """
    rng_noise, rng_pick = (np.random.default_rng(s) for s in np.random.SeedSequence(shift.seed).spawn(2))
    inc_name = shift.incumbent or round1.candidates[0]
    n = len(round1)
    valid = round1.valid_votes
    s1 = round1.vote_share(inc_name)
    s2_base = np.clip(s1 + shift.base_shift + shift.noise_sd * rng_noise.standard_normal(n), 0, 1)

    eligible = np.flatnonzero(small_area_mask(round1, shift.small_area_level)) if shift.small_area_only else np.arange(n)
    k = int(round(shift.skew_fraction * n))
    if k > eligible.size:
        log.warning("only %d eligible boxes for %d skewed ones", eligible.size, k)
        k = eligible.size
    skewed = np.sort(rng_pick.choice(eligible, size=k, replace=False)) if k else np.array([], dtype=np.int64)

    s2 = s2_base.copy()
    s2[skewed] = np.clip(s2_base[skewed] + shift.skew_magnitude, 0, 1)
    inc2 = np.clip(np.rint(s2 * valid), 0, valid).astype(np.int64)
    inc2_base = np.clip(np.rint(s2_base * valid), 0, valid).astype(np.int64)

    others = [c for c in round1.candidates if c != inc_name]
    rest = split_remainder(valid - inc2, len(others))
    cols = {inc_name: inc2, **{c: rest[:, j] for j, c in enumerate(others)}}
    votes = np.column_stack([cols[c] for c in round1.candidates])
    meta = {
        "shift": asdict(shift),
        "incumbent": inc_name,
        "skewed_index": skewed,
        "excess_nominal": float(shift.skew_magnitude * valid[skewed].sum()),
        "excess_realized": float((inc2[skewed] - inc2_base[skewed]).sum()),
    }
    return ElectionRound(
        label or f"{round1.round_label}-round2",
        round1.box_id, round1.province_id, round1.district_id, round1.county_id,
        round1.electorate, valid, votes, round1.candidates,
        metadata=meta,
    )


__all__ = [
    "Coercion", "SynthSpec", "ShiftSpec", "generate", "inject_round2", "truncated_normal",
    "stuff", "realize", "nearest_rank_cutoff",
]
