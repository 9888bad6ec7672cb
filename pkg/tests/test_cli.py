import csv
import json
import subprocess
import sys

import pytest

from ballotforensics import cli, synth
from ballotforensics.ingest import write_round
from ballotforensics.synth import Coercion, ShiftSpec, SynthSpec


@pytest.fixture(scope="module")
def rounds(tmp_path_factory):
    d = tmp_path_factory.mktemp("rounds")
    r1 = synth.generate(SynthSpec(n_boxes=4000, seed=21, coercion=Coercion(10, 0.1, 0.1)))
    r2 = synth.inject_round2(r1, ShiftSpec(base_shift=0.05, skew_fraction=0.03, seed=22))
    return write_round(r1, d / "r1.csv"), write_round(r2, d / "r2.csv")


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_ingest(tmp_path, rounds):
    out = tmp_path / "o"
    assert cli.main(["ingest", "--round", str(rounds[0]), "--out", str(out), "--write-filtered"]) == 0
    doc = json.loads((out / "ingest.json").read_text())
    assert doc["n_boxes"] == doc["n_boxes_filtered"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "ingest" and man["seed"] == cli.DEFAULT_SEED
    assert len(man["inputs"][0]["sha256"]) == 64
    assert set(man["versions"]) >= {"ballotforensics", "numpy", "scipy", "kernel_backend"}
    assert (out / "filtered.csv").exists()


def test_missing_input_exit_2_no_artifacts(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["fingerprint", "--round", str(tmp_path / "nope.csv"), "--candidate", "E", "--out", str(out)]) == 2
    assert not out.exists()


def test_bad_csv_exit_2_no_artifacts(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("province_id,district_id,county_id,box_id,electorate,valid_votes,E\nP,D,C,B,10,20,5\n")
    out = tmp_path / "o"
    assert cli.main(["ingest", "--round", str(bad), "--out", str(out)]) == 2
    assert not out.exists()


def test_unknown_flag_and_subcommand(tmp_path, capsys):
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["ingest", "--round", "x", "--nope"]) == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_candidate_exit_2(tmp_path, rounds):
    out = tmp_path / "o"
    assert cli.main(["fingerprint", "--round", str(rounds[0]), "--candidate", "Z", "--out", str(out)]) == 2
    assert not out.exists()


def test_fingerprint_outputs(tmp_path, rounds):
    out = tmp_path / "o"
    assert cli.main(["fingerprint", "--round", str(rounds[0]), "--candidate", "E", "--out", str(out)]) == 0
    names = set(p.name for p in out.iterdir())
    for stem in ("fingerprint_raw", "fingerprint_standardized", "fingerprint_standardized_small_by_electorate",
                 "fingerprint_standardized_large_by_area"):
        assert {stem + ".csv", stem + ".svg"} <= names
    rows = list(csv.reader((out / "curve_turnout.csv").open()))
    assert rows[0] == ["turnout", "cumulative_share"]


def test_voteshift_byte_identical(tmp_path, rounds):
    args = ["test-voteshift", "--round1", str(rounds[0]), "--round2", str(rounds[1]), "--pro-r1", "E",
            "--cand-r2", "E", "--replicates", "50"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert cli.main(args + ["--out", str(a)]) == 0
    first = _files(a)
    assert cli.main(args + ["--out", str(b)]) == 0
    second = _files(b)
    assert first["voteshift.json"] == second["voteshift.json"]
    assert first["voteshift_histogram.csv"] == second["voteshift_histogram.csv"]
    doc = json.loads(first["voteshift.json"])
    assert doc["excess_votes"] > 0


def test_rerun_same_out_is_identical(tmp_path, rounds):
    args = ["test-rigging", "--round", str(rounds[0]), "--candidate", "E", "--synthetic-refs", "3",
            "--out", str(tmp_path / "o")]
    assert cli.main(args) == 0
    first = _files(tmp_path / "o")
    assert cli.main(args) == 0
    assert _files(tmp_path / "o") == first
    doc = json.loads(first["rigging.json"])
    assert doc["verdict"]["flagged_thresholds"]


def test_stuffing_cli(tmp_path, rounds):
    out = tmp_path / "o"
    assert cli.main(["test-stuffing", "--round", str(rounds[0]), "--candidate", "E", "--bootstrap", "2",
                     "--replicates", "4", "--out", str(out), "--json", "fit.json"]) == 0
    doc = json.loads((out / "fit.json").read_text())
    assert 0 <= doc["f_hat"] <= 1 and "significant" in doc


def test_stuffing_insufficient_data_exit_2(tmp_path):
    small = write_round(synth.generate(SynthSpec(n_boxes=300, seed=1)), tmp_path / "s.csv")
    assert cli.main(["test-stuffing", "--round", str(small), "--candidate", "E", "--out", str(tmp_path / "o")]) == 2
    assert not (tmp_path / "o").exists()


def test_simulate(tmp_path):
    out = tmp_path / "o"
    assert cli.main(["simulate", "--n-boxes", "500", "--round2", "--skew-fraction", "0.1", "--out", str(out)]) == 0
    meta = json.loads((out / "simulate.json").read_text())
    assert meta["round2"]["n_skewed"] == 50
    assert (out / "round1.csv").exists() and (out / "round2.csv").exists()
    cfg = tmp_path / "spec.json"
    cfg.write_text(json.dumps({"n_boxes": 300, "seed": 5}))
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "p")]) == 0
    cfg.write_text(json.dumps({"n_boxes": -3}))
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "q")]) == 2
    assert not (tmp_path / "q").exists()


def test_report(tmp_path, rounds):
    out = tmp_path / "o"
    rc = cli.main(["report", "--round1", str(rounds[0]), "--round2", str(rounds[1]), "--candidate", "E",
                   "--stuffing-replicates", "4", "--bootstrap", "2", "--replicates", "40",
                   "--synthetic-refs", "2", "--out", str(out)])
    assert rc == 0
    names = set(p.name for p in out.iterdir())
    assert {"report.json", "manifest.json", "voteshift.json", "round1_stuffing.json", "round2_stuffing.json",
            "round1_rigging.json", "round1_curve_turnout.csv", "round2_curve_rank.csv",
            "round1_fingerprint_raw.svg"} <= names
    rep = json.loads((out / "report.json").read_text())
    assert set(rep) >= {"ingest", "fingerprint", "stuffing", "rigging", "voteshift"}


def test_inputs_not_modified(tmp_path, rounds):
    before = rounds[0].read_bytes()
    cli.main(["ingest", "--round", str(rounds[0]), "--out", str(tmp_path / "o"), "--min-electorate", "200"])
    assert rounds[0].read_bytes() == before


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "ballotforensics.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    assert "test-voteshift" in res.stdout
