import numpy as np
import pytest

from ballotforensics import synth
from ballotforensics.ingest import BallotBox, ElectionRound, filter_min_electorate

HEADER = "province_id,district_id,county_id,box_id,electorate,valid_votes,E,K\n"


def make_round(rows, candidates=("E", "K"), label="t"):
    """rows: (province, district, county, box, electorate, valid, *votes)."""
    boxes = [
        BallotBox(r[3], r[0], r[1], r[2], r[4], r[5], dict(zip(candidates, r[6:])))
        for r in rows
    ]
    return ElectionRound.from_boxes(label, boxes, candidates)


def write_csv(path, rows, header=HEADER):
    path.write_text(header + "".join(",".join(str(x) for x in r) + "\n" for r in rows))
    return path


@pytest.fixture(scope="session")
def fair50k():
    return synth.generate(synth.SynthSpec(n_boxes=50_000, seed=11))


@pytest.fixture(scope="session")
def fair50k_filtered(fair50k):
    return filter_min_electorate(fair50k, 100)


@pytest.fixture(scope="session")
def small_fair():
    return synth.generate(synth.SynthSpec(n_boxes=5_000, seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
