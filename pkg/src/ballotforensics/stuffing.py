"""Parametric ballot-stuffing fit.

The observed (turnout, incumbent share) fingerprint of boxes above the
restriction thresholds is compared with fingerprints simulated from a fair
model in which a fraction ``f`` of boxes is stuffed: a share ``x**alpha``
(``x`` uniform) of the non-voters is added to the incumbent. ``f`` is the
minimiser of the squared distance between the two normalised fingerprints.

Simulated replicates reuse the same random draws for every ``f``
(common random numbers), which makes the objective a deterministic step
function of ``f``. Because a box is stuffed iff its uniform draw is below
``f``, all replicates are pooled and sorted by that draw once; the model
histogram at any ``f`` is then the fair histogram with a prefix of boxes
swapped for their stuffed versions.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, special

from . import kernels
from .ingest import ElectionRound
from .synth import realize, stuff, truncated_normal

log = logging.getLogger(__name__)

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
MAD_SCALE = 1.4826


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class FitConfig:
    alpha: float = 2.0
    bins: int = 100
    replicates: int = 32
    bootstrap: int = 50
    seed: int = 20230514
    min_turnout: float = 0.25
    min_share: float = 0.25
    min_boxes: int = 1000
    extreme_fraction: float = 0.0
    grid_step: float = 0.002
    grid_halfwidth: float = 0.01
    tol: float = 1e-3

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        if self.bootstrap < 0:
            raise ValueError("bootstrap must be >= 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")


@dataclass(frozen=True)
class FairParams:
    """Truncated-Gaussian fair model; ``*_between`` is the SD of regional offsets."""

    turnout_loc: float
    turnout_scale: float
    share_loc: float
    share_scale: float
    turnout_between: float = 0.0
    share_between: float = 0.0

    @property
    def turnout_within(self) -> float:
        return math.sqrt(max(self.turnout_scale ** 2 - self.turnout_between ** 2, 1e-12))

    @property
    def share_within(self) -> float:
        return math.sqrt(max(self.share_scale ** 2 - self.share_between ** 2, 1e-12))


@dataclass
class StuffingFit:
    f_hat: float
    f_sd: float
    alpha: float
    loss: float
    n_boxes_used: int
    restriction: dict
    significant: bool
    converged: bool = True
    fair: FairParams | None = None
    loss_at_0: float = float("nan")
    loss_at_1: float = float("nan")
    bootstrap_f: list = field(default_factory=list)
    n_evaluations: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fair"] = asdict(self.fair) if self.fair else None
        return d


# --- fair-model location/scale ----------------------------------------------

def truncnorm_median_mad(loc, scale, lo, hi):
    """Median and median absolute deviation of N(loc, scale) truncated to [lo, hi]."""
    a, b = (lo - loc) / scale, (hi - loc) / scale
    pa, pb = special.ndtr(a), special.ndtr(b)
    z = pb - pa
    med = loc + scale * special.ndtri(pa + 0.5 * z)

    def excess(d):
        hi_p = special.ndtr(min((med + d - loc) / scale, b))
        lo_p = special.ndtr(max((med - d - loc) / scale, a))
        return hi_p - lo_p - 0.5 * z

    mad = optimize.brentq(excess, 0.0, hi - lo, xtol=1e-14)
    return float(med), float(mad)


def truncnorm_for(median: float, mad: float, lo: float, hi: float = 1.0, iters: int = 100):
    """Location/scale of a Gaussian truncated to [lo, hi] with the given median and MAD."""
    if mad <= 0:
        raise InsufficientDataError("degenerate sample: zero median absolute deviation")
    loc, scale = median, MAD_SCALE * mad
    for _ in range(iters):
        m, d = truncnorm_median_mad(loc, scale, lo, hi)
        loc += median - m
        scale *= mad / d
        if abs(median - m) < 1e-12 and abs(mad - d) < 1e-12:
            break
    return loc, scale


def median_mad(sample):
    sample = np.asarray(sample, dtype=float)
    med = float(np.median(sample))
    return med, float(np.median(np.abs(sample - med)))


def within_group_scale(values, groups) -> float | None:
    """Robust SD of box values around their group level.

    Uses differences between consecutive boxes of the same group, which do
    not depend on the group offset; ``None`` if no group has two boxes.
    """
    order = np.argsort(groups, kind="stable")
    g, x = groups[order], values[order]
    same = g[1:] == g[:-1]
    if not same.any():
        return None
    d = (x[1:] - x[:-1])[same]
    return MAD_SCALE * float(np.median(np.abs(d))) / math.sqrt(2.0)


def estimate_fair(turnout, share, lo_t, lo_v, groups=None) -> FairParams:
    """Robust fair-model parameters from restricted turnout/share samples.

    Overall location and scale come from matching the sample median and
    MAD with a truncated Gaussian; when ``groups`` (e.g. county codes) are
    given, the scale is split into within- and between-group parts.
    """
    tl, ts = truncnorm_for(*median_mad(turnout), lo_t)
    vl, vs = truncnorm_for(*median_mad(share), lo_v)
    tb = vb = 0.0
    if groups is not None:
        wt = within_group_scale(turnout, groups)
        wv = within_group_scale(share, groups)
        if wt is not None:
            tb = math.sqrt(max(ts ** 2 - wt ** 2, 0.0))
            vb = math.sqrt(max(vs ** 2 - wv ** 2, 0.0))
    return FairParams(tl, ts, vl, vs, tb, vb)


# --- simulated model ---------------------------------------------------------

def simulate_boxes(seed_seq, electorate, groups, fair: FairParams, alpha: float, extreme: bool = False):
    """One replicate of model boxes under common random numbers.

    Each random quantity has its own stream, so replicates built from the
    same seed but different parameters stay paired. Returns
    ``(select_u, fair_tv, stuffed_tv, extreme_tv)``; every ``*_tv`` is the
    (turnout, share) after integer rounding, ``extreme_tv`` is None unless
    requested.
    """
    n = electorate.size
    rngs = [np.random.default_rng(s) for s in seed_seq.spawn(7)]
    n_groups = int(groups.max()) + 1 if n else 0
    mean_t = fair.turnout_loc + fair.turnout_between * rngs[0].standard_normal(n_groups)[groups]
    mean_v = fair.share_loc + fair.share_between * rngs[1].standard_normal(n_groups)[groups]
    t, _ = truncated_normal(rngs[2], mean_t, fair.turnout_within, n)
    v, _ = truncated_normal(rngs[3], mean_v, fair.share_within, n)
    u = rngs[4].random(n)
    x = rngs[5].random(n)

    def shares(tt, vv):
        valid, inc = realize(electorate, tt, vv)
        with np.errstate(divide="ignore", invalid="ignore"):
            return valid / electorate, np.where(valid > 0, inc / np.maximum(valid, 1), np.nan)

    extreme_tv = shares(*stuff(t, v, rngs[6].uniform(0.9, 1.0, n))) if extreme else None
    return u, shares(t, v), shares(*stuff(t, v, x ** alpha)), extreme_tv


def _cell_index(t, v, cfg: FitConfig):
    idx = kernels.bin_index2d(t, v, 0.0, 1.0, cfg.bins)
    keep = (t > cfg.min_turnout) & (v > cfg.min_share)
    idx[~keep] = -1
    return idx


class StuffingModel:
    """Pooled simulation replicates; evaluates the model fingerprint at any ``f``."""

    def __init__(self, electorate, groups, fair: FairParams, cfg: FitConfig, seed_seq: np.random.SeedSequence):
        self.cfg = cfg
        self.fair = fair
        self.ncell = cfg.bins * cfg.bins
        extreme = cfg.extreme_fraction > 0
        us, fidx, sidx, eidx = [], [], [], []
        for child in seed_seq.spawn(cfg.replicates):
            u, fair_tv, stuffed_tv, extreme_tv = simulate_boxes(child, electorate, groups, fair, cfg.alpha, extreme)
            us.append(u)
            fidx.append(_cell_index(*fair_tv, cfg))
            sidx.append(_cell_index(*stuffed_tv, cfg))
            if extreme:
                eidx.append(_cell_index(*extreme_tv, cfg))
        u = np.concatenate(us)
        order = np.argsort(u)
        self.u = u[order]
        # shift by one so that excluded boxes (-1) land in a discarded cell 0
        self.fair_idx = (np.concatenate(fidx)[order] + 1).astype(np.int32)
        self.stuff_idx = (np.concatenate(sidx)[order] + 1).astype(np.int32)
        self.extreme_idx = (np.concatenate(eidx)[order] + 1).astype(np.int32) if eidx else None
        self.fair_total = np.bincount(self.fair_idx, minlength=self.ncell + 1)

    def _count(self, idx, a, b):
        return np.bincount(idx[a:b], minlength=self.ncell + 1)

    def histogram(self, f: float) -> np.ndarray:
        fe = self.cfg.extreme_fraction
        k1 = int(np.searchsorted(self.u, f, side="left"))
        k2 = int(np.searchsorted(self.u, f + fe, side="left")) if fe > 0 else k1
        h = self.fair_total - self._count(self.fair_idx, 0, k2) + self._count(self.stuff_idx, 0, k1)
        if fe > 0:
            h += self._count(self.extreme_idx, k1, k2)
        return h[1:].reshape(self.cfg.bins, self.cfg.bins)

    def loss(self, f: float, observed: np.ndarray) -> float:
        h = self.histogram(f)
        total = h.sum()
        model = h / total if total else h.astype(float)
        return float(np.sum((observed - model) ** 2))


# --- optimisation --------------------------------------------------------------

def golden_section(func, lo: float, hi: float, tol: float = 1e-3, max_iter: int = 100):
    """Minimise a unimodal ``func`` on ``[lo, hi]``; returns ``(x, fx, evaluations)``."""
    seen = {}

    def f(x):
        if x not in seen:
            seen[x] = func(x)
        return seen[x]

    a, b = lo, hi
    x1 = b - INV_PHI * (b - a)
    x2 = a + INV_PHI * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - INV_PHI * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + INV_PHI * (b - a)
            f2 = f(x2)
    x = x1 if f1 <= f2 else x2
    return x, seen[x], seen


def _minimise(model: StuffingModel, observed, cfg: FitConfig):
    losses = {}

    def objective(f):
        f = float(min(max(f, 0.0), 1.0))
        if f not in losses:
            losses[f] = model.loss(f, observed)
        return losses[f]

    objective(0.0)
    objective(1.0)
    x, _, _ = golden_section(objective, 0.0, 1.0, cfg.tol)
    for g in np.arange(x - cfg.grid_halfwidth, x + cfg.grid_halfwidth + 1e-12, cfg.grid_step):
        objective(round(float(g), 10))
    best = min(losses.items(), key=lambda kv: (kv[1], kv[0]))
    vals = np.array(list(losses.values()))
    flat = bool(np.all(vals == vals[0]))
    return best[0], best[1], losses, not flat


def _prepare(turnout, share, cfg: FitConfig):
    keep = (turnout > cfg.min_turnout) & (share > cfg.min_share)
    n_used = int(keep.sum())
    if n_used < cfg.min_boxes:
        raise InsufficientDataError(f"insufficient data: {n_used} boxes after restriction (need {cfg.min_boxes})")
    obs = kernels.hist2d(turnout[keep], share[keep], 0.0, 1.0, cfg.bins)
    return keep, n_used, obs / obs.sum()


def _fit_point(electorate, groups, turnout, share, cfg: FitConfig, seed_seq):
    keep, n_used, observed = _prepare(turnout, share, cfg)
    fair = estimate_fair(turnout[keep], share[keep], cfg.min_turnout, cfg.min_share, groups[keep])
    model = StuffingModel(electorate, groups, fair, cfg, seed_seq)
    f_hat, loss, losses, converged = _minimise(model, observed, cfg)
    return f_hat, loss, losses, converged, fair, n_used


def simulate_round_arrays(seed_seq, electorate, groups, fair: FairParams, f: float, cfg: FitConfig):
    """(turnout, share) of one synthetic dataset from the fitted model at ``f``."""
    extreme = cfg.extreme_fraction > 0
    u, fair_tv, stuffed_tv, extreme_tv = simulate_boxes(seed_seq, electorate, groups, fair, cfg.alpha, extreme)
    t, v = (a.copy() for a in fair_tv)
    inc = u < f
    t[inc], v[inc] = stuffed_tv[0][inc], stuffed_tv[1][inc]
    if extreme:
        ext = (u >= f) & (u < f + cfg.extreme_fraction)
        t[ext], v[ext] = extreme_tv[0][ext], extreme_tv[1][ext]
    return t, v


def fit_arrays(electorate, turnout, share, cfg: FitConfig | None = None, groups=None) -> StuffingFit:
    """Fit on raw arrays; ``groups`` are optional regional codes (e.g. county) per box."""
    cfg = cfg or FitConfig()
    electorate = np.asarray(electorate)
    if groups is None:
        groups = np.zeros(electorate.size, dtype=np.int64)
    else:
        groups = np.unique(np.asarray(groups), return_inverse=True)[1].reshape(-1).astype(np.int64)
    turnout = np.asarray(turnout, dtype=float)
    share = np.asarray(share, dtype=float)
    root = np.random.SeedSequence(cfg.seed)
    model_seq, boot_seq = root.spawn(2)

    f_hat, loss, losses, converged, fair, n_used = _fit_point(electorate, groups, turnout, share, cfg, model_seq)
    log.info("f_hat=%.4f loss=%.3e after %d evaluations", f_hat, loss, len(losses))

    boot = []
    if converged and cfg.bootstrap > 0:
        for k, child in enumerate(boot_seq.spawn(cfg.bootstrap)):
            data_seq, refit_seq = child.spawn(2)
            t_b, v_b = simulate_round_arrays(data_seq, electorate, groups, fair, f_hat, cfg)
            try:
                boot.append(_fit_point(electorate, groups, t_b, v_b, cfg, refit_seq)[0])
            except InsufficientDataError:
                log.warning("bootstrap replicate %d had too few boxes after restriction", k)
        log.info("bootstrap: %d refits", len(boot))
    if not converged:
        f_sd = math.inf
    elif len(boot) >= 2:
        f_sd = float(np.std(boot, ddof=1))
    else:
        f_sd = float("nan")
    return StuffingFit(
        f_hat=float(f_hat),
        f_sd=f_sd,
        alpha=cfg.alpha,
        loss=float(loss),
        n_boxes_used=n_used,
        restriction={"min_turnout": cfg.min_turnout, "min_share": cfg.min_share},
        significant=bool(converged and f_hat > 2 * f_sd),
        converged=converged,
        fair=fair,
        loss_at_0=losses[0.0],
        loss_at_1=losses[1.0],
        bootstrap_f=[float(b) for b in boot],
        n_evaluations=len(losses),
    )


def fit(rnd: ElectionRound, candidate: str, config: FitConfig | None = None) -> StuffingFit:
    """Fit the stuffing fraction ``f`` for ``candidate`` in ``rnd``.

    ``rnd`` should already exclude small boxes (electorate < 100).
    """
    share = rnd.vote_share(candidate)
    return fit_arrays(rnd.electorate, rnd.turnout(), share, config, groups=rnd.group_codes("county")[0])


def restricted_mask(rnd: ElectionRound, candidate: str, config: FitConfig | None = None) -> np.ndarray:
    cfg = config or FitConfig()
    return (rnd.turnout() > cfg.min_turnout) & (rnd.vote_share(candidate) > cfg.min_share)
