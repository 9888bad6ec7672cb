import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ballotforensics import synth
from ballotforensics.ingest import (
    BallotBox,
    DomainError,
    IngestConfig,
    ParseError,
    ValidationError,
    area_box_counts,
    boxes_per_district,
    derive_shares,
    filter_min_electorate,
    parse_round,
    small_area_mask,
    write_round,
)

from conftest import HEADER, make_round, write_csv

ROWS = [
    ("P1", "D1", "C1", "B1", 200, 150, 90, 60),
    ("P1", "D1", "C1", "B2", 80, 60, 30, 30),
    ("P1", "D2", "C2", "B3", 300, 0, 0, 0),
    ("P2", "D3", "C3", "B4", 120, 100, 10, 85),
]


def test_parse_basic(tmp_path):
    rnd = parse_round(write_csv(tmp_path / "r.csv", ROWS))
    assert len(rnd) == 3
    assert rnd.dropped_zero_valid == 1
    assert list(rnd.box_id) == ["B1", "B2", "B4"]
    assert rnd.candidates == ("E", "K")
    assert rnd.hierarchy_counts == (2, 2, 2)
    assert rnd.votes_for("K").tolist() == [60, 30, 85]


def test_parse_empty_file_with_header(tmp_path):
    rnd = parse_round(write_csv(tmp_path / "r.csv", []))
    assert len(rnd) == 0
    assert rnd.dropped_zero_valid == 0
    assert rnd.hierarchy_counts == (0, 0, 0)


def test_parse_error_cites_line(tmp_path):
    rows = list(ROWS)
    rows[1] = ("P1", "D1", "C1", "B2", "eighty", 60, 30, 30)
    with pytest.raises(ParseError, match="line 3"):
        parse_round(write_csv(tmp_path / "r.csv", rows))


def test_missing_field(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text(HEADER + "P1,D1,C1,B1,200,150,90\n")
    with pytest.raises(ParseError, match="line 2"):
        parse_round(p)


def test_bad_header(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("box_id,province_id,district_id,county_id,electorate,valid_votes,E\n")
    with pytest.raises(ParseError):
        parse_round(p)


@pytest.mark.parametrize(
    "row,match",
    [
        (("P", "D", "C", "BX", 100, 120, 60, 60), "BX"),
        (("P", "D", "C", "BY", 100, 50, 40, 20), "BY"),
        (("P", "D", "C", "BZ", 100, 50, -1, 20), "BZ"),
    ],
)
def test_validation_errors_cite_box(tmp_path, row, match):
    with pytest.raises(ValidationError, match=match):
        parse_round(write_csv(tmp_path / "r.csv", ROWS + [row]))


def test_duplicate_box_id(tmp_path):
    with pytest.raises(ValidationError, match="duplicate"):
        parse_round(write_csv(tmp_path / "r.csv", ROWS + [ROWS[0]]))


def test_lenient_skips_bad_rows(tmp_path):
    rows = ROWS + [("P", "D", "C", "BX", 100, 120, 60, 60), ROWS[0]]
    rnd = parse_round(write_csv(tmp_path / "r.csv", rows), IngestConfig(lenient=True))
    assert len(rnd) == 3
    assert rnd.dropped_invalid == 2


def test_quoted_ids(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text(HEADER + '"Prov, North",D1,C1,"B,1",100,50,20,30\n')
    rnd = parse_round(p)
    assert rnd.province_id[0] == "Prov, North"
    assert rnd.box_id[0] == "B,1"


@pytest.mark.parametrize(
    "e,v,votes,t,shares",
    [
        (100, 80, {"E": 40}, 0.80, {"E": 0.50}),
        (50, 50, {"E": 50}, 1.0, {"E": 1.0}),
        (200, 120, {"E": 30, "K": 90}, 0.60, {"E": 0.25, "K": 0.75}),
    ],
)
def test_derive_shares(e, v, votes, t, shares):
    d = derive_shares(BallotBox("b", "p", "d", "c", e, v, votes))
    assert d.turnout == pytest.approx(t)
    assert d.vote_share == pytest.approx(shares)


def test_derive_shares_zero_electorate():
    with pytest.raises(DomainError):
        derive_shares(BallotBox("b", "p", "d", "c", 0, 0, {"E": 0}))


def test_filter_min_electorate():
    rnd = make_round(ROWS[:2] + ROWS[3:])
    assert len(filter_min_electorate(rnd, 0)) == len(rnd)
    kept = filter_min_electorate(rnd, 100)
    assert list(kept.box_id) == ["B1", "B4"]
    assert len(rnd) == 3  # original untouched
    with pytest.raises(ValueError):
        filter_min_electorate(rnd, -1)


@settings(max_examples=40, deadline=None)
@given(a=st.integers(0, 600), b=st.integers(0, 600))
def test_filter_composition(small_fair, a, b):
    twice = filter_min_electorate(filter_min_electorate(small_fair, a), b)
    once = filter_min_electorate(small_fair, max(a, b))
    assert twice == once


def test_boxes_per_district():
    rnd = make_round([("P", "D", "C", "B1", 10, 5, 5, 0), ("P", "D", "C", "B2", 10, 5, 5, 0)])
    assert boxes_per_district(rnd) == {("P", "D", "C"): 2}
    assert boxes_per_district(make_round([])) == {}


def test_same_county_name_in_different_districts_is_distinct():
    rnd = make_round([
        ("P", "D1", "Merkez", "B1", 10, 5, 5, 0),
        ("P", "D2", "Merkez", "B2", 10, 5, 5, 0),
        ("P", "D2", "Merkez", "B3", 10, 5, 5, 0),
    ])
    assert rnd.hierarchy_counts == (1, 2, 2)
    assert area_box_counts(rnd).tolist() == [1, 2, 2]
    assert boxes_per_district(rnd, "district") == {("P", "D1"): 1, ("P", "D2"): 2}
    assert small_area_mask(rnd).all()


def test_round_trip(tmp_path, small_fair):
    p = write_round(small_fair, tmp_path / "r.csv")
    back = parse_round(p, round_label=small_fair.round_label)
    assert back == small_fair


def test_valid_sum_invariant_under_reordering(tmp_path, small_fair):
    rows = list(zip(small_fair.province_id, small_fair.district_id, small_fair.county_id, small_fair.box_id,
                    small_fair.electorate, small_fair.valid_votes, *small_fair.votes.T))
    order = np.random.default_rng(0).permutation(len(rows))
    a = parse_round(write_csv(tmp_path / "a.csv", rows))
    b = parse_round(write_csv(tmp_path / "b.csv", [rows[i] for i in order]))
    assert a.valid_votes.sum() == b.valid_votes.sum()


def test_shares_in_unit_interval(small_fair):
    t = small_fair.turnout()
    assert np.all((t >= 0) & (t <= 1))
    total = sum(small_fair.vote_share(c) for c in small_fair.candidates)
    assert np.all(total <= 1 + 1e-12)


def test_arrays_are_read_only(small_fair):
    with pytest.raises(ValueError):
        small_fair.electorate[0] = 1


def test_subset_keeps_drop_counts():
    rnd = synth.generate(synth.SynthSpec(n_boxes=500, seed=1))
    sub = rnd.subset(rnd.electorate > 250)
    assert sub.dropped_zero_valid == rnd.dropped_zero_valid
    assert len(sub) == int((rnd.electorate > 250).sum())
