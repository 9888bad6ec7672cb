"""Command-line entry point.

Every subcommand computes all of its results in memory first and only then
writes them (plus ``manifest.json``) into the output directory, so a failed
run leaves no partial artifacts. Exit codes: 0 success, 2 bad input or
usage, 1 internal error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__, fingerprint, kernels, rigging, stuffing, synth, voteshift
from .ingest import IngestConfig, IngestError, filter_min_electorate, parse_round, small_area_mask, write_round

log = logging.getLogger("ballotforensics")

DEFAULT_SEED = 20230514
DEFAULT_MIN_ELECTORATE = 100
SMALL_ELECTORATE = 100


class UsageError(Exception):
    """Bad input detected before any work was done."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --- helpers ------------------------------------------------------------------

def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_default) + "\n"


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return None if not np.isfinite(o) else float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _clean(obj):
    """Replace non-finite floats by strings so the JSON stays standard."""
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if x != x:
            return "nan"
        if x in (float("inf"), float("-inf")):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_files(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise UsageError(f"input file not found: {p}")


class Outputs:
    """Artifacts collected in memory and written together at the end."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.files: dict[str, str] = {}

    def text(self, name, content):
        self.files[name] = content

    def json(self, name, obj):
        self.files[name] = _json(_clean(obj))

    def write(self, args, inputs):
        manifest = {
            "command": args.command,
            "config": {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)},
            "inputs": [{"path": str(p), "sha256": _sha256(Path(p)), "bytes": Path(p).stat().st_size} for p in inputs],
            "seed": getattr(args, "seed", None),
            "versions": {
                "ballotforensics": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
                "kernel_backend": kernels.BACKEND,
            },
            "outputs": sorted(self.files) + ["manifest.json"],
        }
        self.out_dir.mkdir(parents=True, exist_ok=True)
        for name, content in self.files.items():
            (self.out_dir / name).write_text(content)
        (self.out_dir / "manifest.json").write_text(_json(_clean(manifest)))
        log.info("wrote %d artifacts to %s", len(self.files) + 1, self.out_dir)


def _load(path, args, min_electorate=None, label=None):
    cfg = IngestConfig(
        lenient=getattr(args, "lenient", False),
        small_area_level=getattr(args, "small_area_level", "county"),
    )
    rnd = parse_round(path, cfg, round_label=label)
    threshold = args.min_electorate if min_electorate is None else min_electorate
    return rnd, filter_min_electorate(rnd, threshold)


def _csv_text(writer, obj, *extra):
    """Run a ``write_*_csv(obj, path)`` helper against an in-memory buffer."""
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "x.csv"
        writer(obj, p, *extra)
        return p.read_text()


def _check_candidate(rnd, cand, what="round"):
    if cand not in rnd.candidates:
        raise UsageError(f"candidate {cand!r} not in {what} (have {', '.join(rnd.candidates)})")


# --- ingest -----------------------------------------------------------------------

def ingest_summary(raw, filtered, level="county") -> dict:
    return {
        "round_label": raw.round_label,
        "n_boxes": len(raw),
        "n_boxes_before_drops": len(raw) + raw.dropped_zero_valid + raw.dropped_invalid,
        "dropped_zero_valid": raw.dropped_zero_valid,
        "dropped_invalid": raw.dropped_invalid,
        "hierarchy_counts": list(raw.hierarchy_counts),
        "candidates": list(raw.candidates),
        "small_electorate_boxes": int((raw.electorate <= SMALL_ELECTORATE).sum()),
        "small_area_boxes": int(small_area_mask(raw, level).sum()),
        "min_electorate": None,
        "n_boxes_filtered": len(filtered),
    }


def cmd_ingest(args):
    _require_files(args.round)
    raw, filtered = _load(args.round, args)
    out = Outputs(args.out)
    summary = ingest_summary(raw, filtered, args.small_area_level)
    summary["min_electorate"] = args.min_electorate
    out.json("ingest.json", summary)
    if args.write_filtered:
        import tempfile

        with tempfile.TemporaryDirectory() as tmp:
            p = write_round(filtered, Path(tmp) / "f.csv")
            out.text("filtered.csv", Path(p).read_text())
    out.write(args, [args.round])
    return 0


# --- fingerprint ----------------------------------------------------------------------

def _fingerprint_artifacts(out, rnd, cand, bins, level, prefix=""):
    raw = fingerprint.raw_fingerprint(rnd, cand, bins)
    std = fingerprint.standardized_fingerprint(rnd, cand, level=level)
    for name, fp, title in ((f"{prefix}fingerprint_raw", raw, "fingerprint"),
                            (f"{prefix}fingerprint_standardized", std, "standardised fingerprint")):
        out.text(name + ".csv", _csv_text(fingerprint.write_grid_csv, fp))
        out.text(name + ".svg", fingerprint.render_svg(fp, f"{rnd.round_label}: {title} ({cand})"))
    # small/large split under both small-unit definitions
    splits = {
        "electorate": rnd.electorate <= SMALL_ELECTORATE,
        "area": small_area_mask(rnd, level),
    }
    st, sv, _ = fingerprint.standardize(rnd, cand, level)
    lo, hi = fingerprint.DEFAULT_STD_RANGE
    nb = fingerprint.DEFAULT_STD_BINS
    edges = np.linspace(lo, hi, nb + 1)
    for key, small in splits.items():
        for part, mask in (("small", small), ("large", ~small)):
            grid = kernels.hist2d(st[mask], sv[mask], lo, hi, nb) if mask.any() else np.zeros((nb, nb), np.int64)
            fp = fingerprint.Fingerprint(grid, edges, edges.copy(), cand, True, int(mask.sum()))
            name = f"{prefix}fingerprint_standardized_{part}_by_{key}"
            out.text(name + ".csv", _csv_text(fingerprint.write_grid_csv, fp))
            out.text(name + ".svg", fingerprint.render_svg(fp, f"{rnd.round_label}: {part} units by {key}"))
    tc = fingerprint.cumulative_turnout_curve(rnd, cand)
    rc = fingerprint.rank_cumulative_curve(rnd, cand)
    out.text(f"{prefix}curve_turnout.csv", _csv_text(CumulativeCurveWriter, tc))
    out.text(f"{prefix}curve_rank.csv", _csv_text(CumulativeCurveWriter, rc))
    return {
        "n_boxes": len(rnd),
        "standardization": std.diagnostics,
        "turnout_curve_crossing_0.5": tc.crossing(0.5),
        "final_share": float(tc.shares[-1]) if tc.shares.size else None,
    }


def CumulativeCurveWriter(curve, path):
    return curve.to_csv(path)


def cmd_fingerprint(args):
    _require_files(args.round)
    _, rnd = _load(args.round, args)
    _check_candidate(rnd, args.candidate)
    out = Outputs(args.out)
    info = _fingerprint_artifacts(out, rnd, args.candidate, args.bins, args.level)
    out.json("fingerprint.json", info)
    out.write(args, [args.round])
    return 0


# --- tests ------------------------------------------------------------------------------------

def _fit_config(args):
    return stuffing.FitConfig(
        alpha=args.alpha,
        bins=args.bins,
        replicates=getattr(args, "stuffing_replicates", None) or args.replicates,
        bootstrap=args.bootstrap,
        seed=args.seed,
        extreme_fraction=args.extreme_fraction,
    )


def cmd_test_stuffing(args):
    _require_files(args.round)
    cfg = _fit_config(args)
    _, rnd = _load(args.round, args)
    _check_candidate(rnd, args.candidate)
    res = stuffing.fit(rnd, args.candidate, cfg)
    out = Outputs(args.out)
    out.json(args.json or "stuffing.json", res.to_dict())
    out.write(args, [args.round])
    return 0


def _reference_files(args):
    if args.references is None:
        return []
    d = Path(args.references)
    if not d.is_dir():
        raise UsageError(f"references directory not found: {d}")
    files = sorted(d.glob("*.csv"))
    if len(files) < 2:
        raise UsageError(f"need at least two reference CSVs in {d}")
    return files


def synthetic_references(n: int, n_boxes: int, seed: int, candidates=("E", "K")):
    specs = [
        synth.SynthSpec(n_boxes=n_boxes, seed=seed + 1000 + i, label=f"synthetic-fair-{i}", candidates=candidates)
        for i in range(n)
    ]
    return [(filter_min_electorate(synth.generate(s), DEFAULT_MIN_ELECTORATE), candidates[0]) for s in specs]


def _rigging(rnd, cand, args):
    files = _reference_files(args)
    refs = []
    for f in files:
        ref_raw, ref = _load(f, args, label=f.stem)
        _check_candidate(ref, cand, f"reference {f.name}")
        refs.append((ref, cand))
    if args.synthetic_refs:
        refs += synthetic_references(args.synthetic_refs, args.synthetic_boxes or len(rnd), args.seed)
    profile = rigging.displacement_profile(rnd, cand, args.level)
    if refs:
        profile = profile.with_envelope(rigging.build_envelope(refs, args.level))
    return profile, files


def cmd_test_rigging(args):
    _require_files(args.round)
    _reference_files(args)
    _, rnd = _load(args.round, args)
    _check_candidate(rnd, args.candidate)
    profile, files = _rigging(rnd, args.candidate, args)
    out = Outputs(args.out)
    doc = profile.to_dict()
    if profile.envelope is not None:
        doc["verdict"] = rigging.verdict(profile)
    out.json(args.json or "rigging.json", doc)
    out.text("rigging_profile.csv", _csv_text(rigging.write_profile_csv, profile))
    out.write(args, [args.round, *files])
    return 0


def _voteshift(r1, r2, args, pro, cand2):
    for c in pro:
        _check_candidate(r1, c, "round 1")
    _check_candidate(r2, cand2, "round 2")
    pairs = voteshift.pair_rounds(r1, r2, args.small_area_level)
    return voteshift.run(pairs, pro, cand2, args.replicates, args.seed, args.literal_formula, args.hist_bins)


def cmd_test_voteshift(args):
    _require_files(args.round1, args.round2)
    _, r1 = _load(args.round1, args, label="round1")
    _, r2 = _load(args.round2, args, label="round2")
    pro = [c for c in args.pro_r1.split(",") if c]
    rep = _voteshift(r1, r2, args, pro, args.cand_r2)
    out = Outputs(args.out)
    out.json(args.json or "voteshift.json", rep.to_dict())
    out.text("voteshift_histogram.csv", _csv_text(voteshift.write_histogram_csv, rep.histogram))
    out.write(args, [args.round1, args.round2])
    return 0


# --- simulate ---------------------------------------------------------------------------------

def cmd_simulate(args):
    if args.config:
        _require_files(args.config)
        try:
            spec = synth.SynthSpec.from_json(args.config)
        except (ValueError, TypeError, KeyError) as exc:
            raise UsageError(f"bad synth config: {exc}") from None
    else:
        spec = synth.SynthSpec(
            n_boxes=args.n_boxes,
            stuffing_fraction=args.stuffing_fraction,
            stuffing_intensity=args.alpha,
            extreme_fraction=args.extreme_fraction,
            coercion=synth.Coercion(args.coercion_percentile, args.coercion_boost, args.coercion_boost)
            if args.coercion_percentile else None,
            seed=args.seed,
        )
    rnd = synth.generate(spec)
    out = Outputs(args.out)
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        out.text("round1.csv", Path(write_round(rnd, Path(tmp) / "r1.csv")).read_text())
        meta = {"spec": spec.to_dict(), "diagnostics": rnd.metadata.get("diagnostics", {}),
                "n_boxes": len(rnd), "dropped_zero_valid": rnd.dropped_zero_valid}
        if args.round2:
            shift = synth.ShiftSpec(
                base_shift=args.base_shift,
                skew_fraction=args.skew_fraction,
                skew_magnitude=args.skew_magnitude,
                small_area_only=args.small_area_only,
                seed=args.seed + 1,
            )
            r2 = synth.inject_round2(rnd, shift)
            out.text("round2.csv", Path(write_round(r2, Path(tmp) / "r2.csv")).read_text())
            meta["round2"] = {
                "shift": shift.__dict__,
                "excess_nominal": r2.metadata["excess_nominal"],
                "excess_realized": r2.metadata["excess_realized"],
                "n_skewed": int(r2.metadata["skewed_index"].size),
            }
    out.json("simulate.json", meta)
    out.write(args, [args.config] if args.config else [])
    return 0


# --- report ------------------------------------------------------------------------------

def cmd_report(args):
    _require_files(args.round1, args.round2)
    _reference_files(args)
    cand = args.candidate
    raw1, r1 = _load(args.round1, args, label="round1")
    raw2, r2 = _load(args.round2, args, label="round2")
    _check_candidate(r1, cand, "round 1")
    _check_candidate(r2, cand, "round 2")
    out = Outputs(args.out)
    summary = {"ingest": {}, "fingerprint": {}, "stuffing": {}}
    for tag, raw, rnd in (("round1", raw1, r1), ("round2", raw2, r2)):
        s = ingest_summary(raw, rnd, args.small_area_level)
        s["min_electorate"] = args.min_electorate
        summary["ingest"][tag] = s
        summary["fingerprint"][tag] = _fingerprint_artifacts(out, rnd, cand, args.bins, args.level, f"{tag}_")
        if not args.skip_stuffing:
            res = stuffing.fit(rnd, cand, _fit_config(args))
            out.json(f"{tag}_stuffing.json", res.to_dict())
            summary["stuffing"][tag] = {"f_hat": res.f_hat, "f_sd": res.f_sd, "significant": res.significant}
    if args.references or args.synthetic_refs:
        profile, _ = _rigging(r1, cand, args)
        doc = profile.to_dict()
        doc["verdict"] = rigging.verdict(profile)
        out.json("round1_rigging.json", doc)
        out.text("round1_rigging_profile.csv", _csv_text(rigging.write_profile_csv, profile))
        summary["rigging"] = doc["verdict"]
    pro = [c for c in (args.pro_r1 or cand).split(",") if c]
    # the shift test pairs all boxes, not only those above the size filter
    rep = _voteshift(raw1, raw2, args, pro, cand)
    out.json("voteshift.json", rep.to_dict())
    out.text("voteshift_histogram.csv", _csv_text(voteshift.write_histogram_csv, rep.histogram))
    summary["voteshift"] = {k: rep.to_dict()[k] for k in ("mode_hat", "excess_votes", "excess_sd", "excess_pct")}
    out.json("report.json", summary)
    out.write(args, [args.round1, args.round2, *_reference_files(args)])
    return 0


# --- parser ------------------------------------------------------------------------------

def _shared(p, min_electorate=DEFAULT_MIN_ELECTORATE):
    p.add_argument("--min-electorate", type=int, default=min_electorate,
                   help=f"drop boxes with a smaller electorate (default {min_electorate})")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--bins", type=int, default=fingerprint.DEFAULT_BINS)
    p.add_argument("--lenient", action="store_true", help="skip invalid rows instead of failing")
    p.add_argument("--small-area-level", choices=("district", "county"), default="county")


def _stuffing_flags(p):
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--replicates", type=int, default=32)
    p.add_argument("--bootstrap", type=int, default=50)
    p.add_argument("--extreme-fraction", type=float, default=0.0)


def _rigging_flags(p):
    p.add_argument("--references", help="directory of reference election CSVs")
    p.add_argument("--synthetic-refs", type=int, default=0, help="number of synthetic fair reference elections")
    p.add_argument("--synthetic-boxes", type=int, default=0, help="boxes per synthetic reference (default: as input)")
    p.add_argument("--level", choices=("province", "district", "county"), default="county")


def _voteshift_flags(p, replicates_default=voteshift.DEFAULT_REPLICATES):
    p.add_argument("--literal-formula", action="store_true", help="use vote counts over turnout instead of shares")
    p.add_argument("--hist-bins", type=int, default=50)


def build_parser():
    ap = _Parser(prog="ballotforensics", description="Statistical forensics for ballot-box level election results.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="parse and validate a results file")
    p.add_argument("--round", required=True)
    p.add_argument("--write-filtered", action="store_true")
    _shared(p, min_electorate=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fingerprint", help="raw/standardised fingerprints and cumulative curves")
    p.add_argument("--round", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--level", choices=("province", "district", "county"), default="county")
    _shared(p)
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("test-stuffing", help="fit the ballot-stuffing fraction")
    p.add_argument("--round", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--json", help="output file name inside --out")
    _stuffing_flags(p)
    _shared(p)
    p.set_defaults(func=cmd_test_stuffing)

    p = sub.add_parser("test-rigging", help="small vs large unit displacement test")
    p.add_argument("--round", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--json", help="output file name inside --out")
    _rigging_flags(p)
    _shared(p)
    p.set_defaults(func=cmd_test_rigging)

    p = sub.add_parser("test-voteshift", help="two-round vote-shift symmetry test")
    p.add_argument("--round1", required=True)
    p.add_argument("--round2", required=True)
    p.add_argument("--pro-r1", required=True, help="comma-separated round-1 candidates, e.g. E,O")
    p.add_argument("--cand-r2", required=True)
    p.add_argument("--replicates", type=int, default=voteshift.DEFAULT_REPLICATES)
    p.add_argument("--json", help="output file name inside --out")
    _voteshift_flags(p)
    _shared(p, min_electorate=0)
    p.set_defaults(func=cmd_test_voteshift)

    p = sub.add_parser("simulate", help="generate synthetic rounds")
    p.add_argument("--config", help="JSON synth spec (overrides the flags below)")
    p.add_argument("--n-boxes", type=int, default=50000)
    p.add_argument("--stuffing-fraction", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--extreme-fraction", type=float, default=0.0)
    p.add_argument("--coercion-percentile", type=float, default=0.0)
    p.add_argument("--coercion-boost", type=float, default=0.1)
    p.add_argument("--round2", action="store_true", help="also write a paired second round")
    p.add_argument("--base-shift", type=float, default=0.05)
    p.add_argument("--skew-fraction", type=float, default=0.0)
    p.add_argument("--skew-magnitude", type=float, default=0.4)
    p.add_argument("--small-area-only", action="store_true")
    _shared(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="run every analysis on a pair of rounds")
    p.add_argument("--round1", required=True)
    p.add_argument("--round2", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--pro-r1", help="round-1 candidates pooled for the shift test (default: --candidate)")
    p.add_argument("--replicates", type=int, default=voteshift.DEFAULT_REPLICATES,
                   help="vote-shift replicates")
    p.add_argument("--stuffing-replicates", type=int, default=32)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--bootstrap", type=int, default=50)
    p.add_argument("--extreme-fraction", type=float, default=0.0)
    p.add_argument("--skip-stuffing", action="store_true")
    _rigging_flags(p)
    _voteshift_flags(p)
    _shared(p)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (UsageError, IngestError, stuffing.InsufficientDataError, rigging.RiggingError,
            voteshift.VoteShiftError) as exc:
        log.error("%s", exc)
        return 2
    except Exception:  # pragma: no cover - reported, not handled
        log.exception("internal error")
        return 1


if __name__ == "__main__":
    sys.exit(main())
