import csv
import json
import math
from collections import defaultdict

import numpy as np
import pytest

from ballotforensics import rigging as R
from ballotforensics import synth
from ballotforensics.ingest import ElectionRound, filter_min_electorate
from ballotforensics.synth import Coercion, SynthSpec

from conftest import make_round


def _gen(n, seed, **kw):
    return filter_min_electorate(synth.generate(SynthSpec(n_boxes=n, seed=seed, **kw)), 100)


def _brute_delta(rnd, cand, p):
    # standardise within county without fallback, then centroids by hand
    t = rnd.turnout()
    v = rnd.vote_share(cand)
    groups = defaultdict(list)
    for i in range(len(rnd)):
        groups[(rnd.province_id[i], rnd.district_id[i], rnd.county_id[i])].append(i)
    st, sv = np.empty(len(rnd)), np.empty(len(rnd))
    for idx in groups.values():
        st[idx] = t[idx] / t[idx].mean()
        sv[idx] = v[idx] / v[idx].mean()
    sizes = sorted(rnd.electorate.tolist())
    cut = sizes[max(math.ceil(p / 100 * len(sizes)), 1) - 1]
    small = [i for i in range(len(rnd)) if rnd.electorate[i] <= cut]
    large = [i for i in range(len(rnd)) if rnd.electorate[i] > cut]
    dx = sum(st[small]) / len(small) - sum(st[large]) / len(large)
    dy = sum(sv[small]) / len(small) - sum(sv[large]) / len(large)
    return math.copysign(math.hypot(dx, dy), dx + dy) if dx + dy != 0 else math.hypot(dx, dy)


@pytest.fixture(scope="module")
def fair5k():
    return _gen(5000, 3)


def test_matches_brute_force(fair5k):
    prof = R.displacement_profile(fair5k, "E", thresholds=[5, 10, 30], fallback_parent=False)
    for p, d in zip(prof.thresholds, prof.delta):
        assert d == pytest.approx(_brute_delta(fair5k, "E", int(p)), abs=1e-12)


def test_partition_and_definedness(fair5k):
    prof = R.displacement_profile(fair5k, "E")
    assert np.all(prof.n_small + prof.n_large == len(fair5k))
    assert np.all(np.isfinite(prof.delta[prof.n_small >= R.MIN_SMALL]))


def test_too_few_small_boxes_gives_nan():
    rows = [("P", "D", f"C{i % 5}", f"B{i}", 100 + i, 80, 40, 40) for i in range(40)]
    prof = R.displacement_profile(make_round(rows), "E", thresholds=[10, 25, 50])
    assert prof.n_small.tolist() == [4, 10, 20]
    assert np.isnan(prof.delta[0])
    assert np.isfinite(prof.delta[1:]).all()


def test_fair_small_displacement(fair50k_filtered):
    prof = R.displacement_profile(fair50k_filtered, "E")
    assert abs(prof.delta[9]) < 0.02


def test_coercion_displacement():
    # turnout centred at 0.6 so the +0.1 boost is not clipped at 1
    coerced = _gen(50_000, 11, turnout_mean=0.6, coercion=Coercion(10, 0.1, 0.1))
    # raw centroid shift of the boosted decile, before standardisation
    small = coerced.electorate <= synth.nearest_rank_cutoff(coerced.electorate, 10)
    t, v = coerced.turnout(), coerced.vote_share("E")
    raw = math.hypot(t[small].mean() - t[~small].mean(), v[small].mean() - v[~small].mean())
    assert raw == pytest.approx(math.hypot(0.1, 0.1), abs=0.02)
    d_c = R.displacement_profile(coerced, "E", thresholds=[10]).delta[0]
    d_f = R.displacement_profile(_gen(50_000, 11, turnout_mean=0.6), "E", thresholds=[10]).delta[0]
    assert d_c > d_f


def test_identical_values_zero():
    rows = [("P", "D", f"C{i % 7}", f"B{i}", 100 * k, 80 * k, 40 * k, 40 * k) for i, k in enumerate(range(1, 1001))]
    prof = R.displacement_profile(make_round(rows), "E")
    np.testing.assert_allclose(prof.delta, 0.0, atol=1e-12)


def test_errors():
    with pytest.raises(R.RiggingError):
        R.displacement_profile(make_round([]), "E")
    rows = [("P", "D", f"C{i}", f"B{i}", 100 + i, 80, 40, 40) for i in range(30)]
    with pytest.raises(R.RiggingError):
        R.displacement_profile(make_round(rows), "E", fallback_parent=False)
    R.displacement_profile(make_round(rows), "E")


def _rebuild(rnd, order=None, scale=1, relabel=False):
    order = np.arange(len(rnd)) if order is None else order
    ids = rnd.box_id[order]
    if relabel:
        ids = np.array([f"X{i}" for i in range(len(rnd))], dtype=object)
    return ElectionRound(rnd.round_label, ids, rnd.province_id[order], rnd.district_id[order],
                         rnd.county_id[order], rnd.electorate[order] * scale, rnd.valid_votes[order] * scale,
                         rnd.votes[order] * scale, rnd.candidates)


def test_invariant_to_relabeling_and_scaling(fair5k, rng):
    base = R.displacement_profile(fair5k, "E").delta
    order = rng.permutation(len(fair5k))
    relabeled = R.displacement_profile(_rebuild(fair5k, order, relabel=True), "E").delta
    scaled = R.displacement_profile(_rebuild(fair5k, scale=3), "E").delta
    np.testing.assert_allclose(relabeled, base, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(scaled, base, rtol=1e-9, atol=1e-12)


def test_boost_to_small_set_increases_delta(fair5k):
    cut = synth.nearest_rank_cutoff(fair5k.electorate, 10)
    small = fair5k.electorate <= cut
    e = fair5k.electorate
    add = np.where(small, np.minimum(np.rint(0.05 * e).astype(np.int64), e - fair5k.valid_votes), 0)
    votes = fair5k.votes.copy()
    votes[:, 0] += add
    boosted = ElectionRound("b", fair5k.box_id, fair5k.province_id, fair5k.district_id, fair5k.county_id,
                            e, fair5k.valid_votes + add, votes, fair5k.candidates)
    before = R.displacement_profile(fair5k, "E", thresholds=[5, 10]).delta
    after = R.displacement_profile(boosted, "E", thresholds=[5, 10]).delta
    assert np.all(after > before)


@pytest.mark.slow
def test_consistency_with_sample_size():
    means = []
    for n in (5000, 50_000):
        means.append(np.mean([np.nanmean(np.abs(R.displacement_profile(_gen(n, s), "E").delta)) for s in range(5)]))
    assert means[1] < means[0]


def test_envelope_two_copies(fair5k):
    prof = R.displacement_profile(fair5k, "E")
    env = R.build_envelope([prof, prof])
    np.testing.assert_array_equal(env.lower, np.where(np.isfinite(prof.delta), prof.delta, np.nan))
    np.testing.assert_array_equal(env.upper, env.lower)


def test_envelope_needs_two():
    with pytest.raises(R.RiggingError):
        R.build_envelope([])


def test_envelope_bounds_order_and_sign():
    profs = [R.displacement_profile(_gen(5000, s), "E") for s in range(4)]
    env = R.build_envelope(profs)
    ok = np.isfinite(env.lower)
    assert np.all(env.lower[ok] <= env.upper[ok])
    D = np.vstack([p.delta for p in profs])
    pos = np.all(D >= 0, axis=0)
    assert np.all(env.lower[pos] >= 0)
    sd = np.std(D, axis=0, ddof=1)
    np.testing.assert_allclose(env.upper, D.max(axis=0) + sd)
    np.testing.assert_allclose(env.lower[~pos], D.min(axis=0)[~pos] - sd[~pos])


@pytest.mark.slow
def test_envelope_leave_one_out_coverage():
    profs = [R.displacement_profile(_gen(20_000, 100 + i), "E") for i in range(11)]
    cover = []
    for k in range(11):
        env = R.build_envelope([p for j, p in enumerate(profs) if j != k])
        d = profs[k].delta
        cover.append(np.mean((d >= env.lower) & (d <= env.upper)))
    assert np.mean(cover) >= 0.95


def _profile(delta, upper):
    th = np.arange(1, len(delta) + 1)
    env = R.Envelope(th, np.zeros(len(delta)), np.asarray(upper, float), ["a", "b"])
    return R.RiggingProfile(th, np.asarray(delta, float), np.zeros(len(delta), int), np.zeros(len(delta), int),
                            envelope=env)


def test_verdict_rules():
    v = R.verdict(_profile([0.1, 0.2], [0.5, 0.5]))
    assert v["flagged_thresholds"] == [] and not v["confined_to_small"]
    v = R.verdict(_profile([0.5, 0.6], [0.5, 0.5]))
    assert v["flagged_thresholds"] == [2]
    assert v["confined_to_small"] and v["peak_threshold"] == 2
    with pytest.raises(R.RiggingError):
        R.verdict(R.RiggingProfile(np.array([1]), np.array([0.1]), np.array([1]), np.array([1])))


def test_coercion_flags_peak_at_small_p():
    env = R.build_envelope([R.displacement_profile(_gen(50_000, 200 + i), "E") for i in range(4)])
    prof = R.displacement_profile(_gen(50_000, 11, coercion=Coercion(10, 0.1, 0.1)), "E").with_envelope(env)
    v = R.verdict(prof)
    assert v["flagged_thresholds"]
    assert v["peak_threshold"] <= 20
    # exceedance is larger below p = 20 than above it
    excess = prof.delta - env.upper
    assert excess[:20].mean() > excess[20:].mean()


def test_outputs(tmp_path, fair5k):
    prof = R.displacement_profile(fair5k, "E")
    prof = prof.with_envelope(R.build_envelope([prof, R.displacement_profile(_gen(5000, 4), "E")]))
    path = R.write_profile_csv(prof, tmp_path / "p.csv")
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == ["p", "delta", "n_small", "n_large", "lower", "upper", "flagged"]
    assert len(rows) == 50
    doc = json.loads(R.write_profile_json(prof, tmp_path / "p.json").read_text())
    assert "verdict" in doc and doc["thresholds"] == list(range(1, 51))
