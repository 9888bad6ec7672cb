"""Reading, validating and filtering ballot-box level result files.

A results file is UTF-8 CSV with one header row. The first six columns are
fixed::

    province_id,district_id,county_id,box_id,electorate,valid_votes

and every following column holds one candidate's vote count, in file order.
Rows with zero valid votes are dropped and counted, never silently kept.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

FIXED_COLUMNS = ("province_id", "district_id", "county_id", "box_id", "electorate", "valid_votes")
LEVELS = ("province", "district", "county")
_SEP = "\x1f"


class IngestError(ValueError):
    """Base class for problems with an input results file."""


class ParseError(IngestError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class ValidationError(IngestError):
    def __init__(self, box_id: str | None, message: str):
        self.box_id = box_id
        prefix = f"box {box_id!r}: " if box_id is not None else ""
        super().__init__(prefix + message)


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class IngestConfig:
    lenient: bool = False
    small_area_level: str = "county"
    min_electorate: int = 0

    def __post_init__(self):
        if self.small_area_level not in ("district", "county"):
            raise ValueError(f"small_area_level must be 'district' or 'county', got {self.small_area_level!r}")
        if self.min_electorate < 0:
            raise ValueError("min_electorate must be >= 0")


@dataclass(frozen=True)
class BallotBox:
    box_id: str
    province_id: str
    district_id: str
    county_id: str
    electorate: int
    valid_votes: int
    votes: Mapping[str, int] = field(default_factory=dict)


@dataclass(frozen=True)
class DerivedShares:
    turnout: float
    vote_share: Mapping[str, float]


def derive_shares(box: BallotBox) -> DerivedShares:
    """Turnout (valid / electorate) and per-candidate share of valid votes."""
    if box.electorate <= 0:
        raise DomainError(f"box {box.box_id!r} has electorate {box.electorate}")
    if box.valid_votes < 1:
        raise DomainError(f"box {box.box_id!r} has no valid votes")
    turnout = box.valid_votes / box.electorate
    shares = {c: v / box.valid_votes for c, v in box.votes.items()}
    return DerivedShares(turnout=turnout, vote_share=shares)


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class ElectionRound:
    """Immutable, column-oriented collection of ballot boxes for one round.

    Per-box data lives in numpy arrays (``electorate``, ``valid_votes``,
    the ``votes`` matrix with one column per candidate) so that analyses
    over ~200k boxes stay vectorised. ``boxes`` materialises the
    row-oriented :class:`BallotBox` view on demand.
    """

    def __init__(
        self,
        round_label: str,
        box_id: Sequence[str],
        province_id: Sequence[str],
        district_id: Sequence[str],
        county_id: Sequence[str],
        electorate,
        valid_votes,
        votes,
        candidates: Sequence[str],
        dropped_zero_valid: int = 0,
        dropped_invalid: int = 0,
        metadata: Mapping | None = None,
    ):
        self.round_label = round_label
        self.candidates = tuple(candidates)
        n = len(box_id)
        self.box_id = _readonly(np.asarray(box_id, dtype=object).reshape(n))
        self.province_id = _readonly(np.asarray(province_id, dtype=object).reshape(n))
        self.district_id = _readonly(np.asarray(district_id, dtype=object).reshape(n))
        self.county_id = _readonly(np.asarray(county_id, dtype=object).reshape(n))
        self.electorate = _readonly(np.asarray(electorate, dtype=np.int64).reshape(n))
        self.valid_votes = _readonly(np.asarray(valid_votes, dtype=np.int64).reshape(n))
        self.votes = _readonly(np.asarray(votes, dtype=np.int64).reshape(n, len(self.candidates)))
        self.dropped_zero_valid = int(dropped_zero_valid)
        self.dropped_invalid = int(dropped_invalid)
        self.metadata = dict(metadata or {})
        self._codes: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self._col = {c: i for i, c in enumerate(self.candidates)}
        if len(self._col) != len(self.candidates):
            raise ValidationError(None, "duplicate candidate column")

    @classmethod
    def from_boxes(cls, round_label: str, boxes: Iterable[BallotBox], candidates: Sequence[str], **kw):
        boxes = list(boxes)
        candidates = tuple(candidates)
        for b in boxes:
            extra = set(b.votes) - set(candidates)
            if extra:
                raise ValidationError(b.box_id, f"unknown candidates {sorted(extra)}")
        votes = np.array([[b.votes.get(c, 0) for c in candidates] for b in boxes], dtype=np.int64)
        return cls(
            round_label,
            [b.box_id for b in boxes],
            [b.province_id for b in boxes],
            [b.district_id for b in boxes],
            [b.county_id for b in boxes],
            [b.electorate for b in boxes],
            [b.valid_votes for b in boxes],
            votes.reshape(len(boxes), len(candidates)),
            candidates,
            **kw,
        )

    def __len__(self):
        return self.box_id.shape[0]

    @property
    def n_boxes(self) -> int:
        return len(self)

    def __repr__(self):
        return (f"ElectionRound({self.round_label!r}, n_boxes={len(self)}, "
                f"candidates={list(self.candidates)}, dropped_zero_valid={self.dropped_zero_valid})")

    def __eq__(self, other):
        if not isinstance(other, ElectionRound):
            return NotImplemented
        return (
            self.round_label == other.round_label
            and self.candidates == other.candidates
            and all(
                np.array_equal(getattr(self, a), getattr(other, a))
                for a in ("box_id", "province_id", "district_id", "county_id", "electorate", "valid_votes", "votes")
            )
        )

    __hash__ = None

    @property
    def boxes(self) -> list[BallotBox]:
        return [self.box(i) for i in range(len(self))]

    def box(self, i: int) -> BallotBox:
        return BallotBox(
            box_id=self.box_id[i],
            province_id=self.province_id[i],
            district_id=self.district_id[i],
            county_id=self.county_id[i],
            electorate=int(self.electorate[i]),
            valid_votes=int(self.valid_votes[i]),
            votes={c: int(self.votes[i, j]) for j, c in enumerate(self.candidates)},
        )

    def column(self, candidate: str) -> int:
        try:
            return self._col[candidate]
        except KeyError:
            raise KeyError(f"unknown candidate {candidate!r}; have {list(self.candidates)}") from None

    def votes_for(self, candidate: str) -> np.ndarray:
        return self.votes[:, self.column(candidate)]

    def turnout(self) -> np.ndarray:
        return self.valid_votes / self.electorate

    def vote_share(self, candidate: str) -> np.ndarray:
        return self.votes_for(candidate) / self.valid_votes

    def national_share(self, candidate: str) -> float:
        return float(self.votes_for(candidate).sum() / self.valid_votes.sum())

    def group_keys(self, level: str) -> np.ndarray:
        """Hierarchical key strings; a county is identified by all three ids."""
        if level not in LEVELS:
            raise ValueError(f"unknown level {level!r}; expected one of {LEVELS}")
        parts = [self.province_id, self.district_id, self.county_id][: LEVELS.index(level) + 1]
        if len(self) == 0:
            return np.array([], dtype=object)
        keys = parts[0].astype(str)
        for p in parts[1:]:
            keys = np.char.add(np.char.add(keys, _SEP), p.astype(str))
        return keys

    def group_codes(self, level: str) -> tuple[np.ndarray, np.ndarray]:
        """(codes, unique keys) for the given hierarchy level, cached."""
        if level not in self._codes:
            keys = self.group_keys(level)
            uniq, codes = np.unique(keys, return_inverse=True)
            self._codes[level] = (_readonly(codes.astype(np.int64).reshape(-1)), uniq)
        return self._codes[level]

    @property
    def hierarchy_counts(self) -> tuple[int, int, int]:
        return tuple(len(self.group_codes(level)[1]) for level in LEVELS)

    def subset(self, mask, round_label: str | None = None) -> "ElectionRound":
        mask = np.asarray(mask)
        return ElectionRound(
            self.round_label if round_label is None else round_label,
            self.box_id[mask],
            self.province_id[mask],
            self.district_id[mask],
            self.county_id[mask],
            self.electorate[mask],
            self.valid_votes[mask],
            self.votes[mask],
            self.candidates,
            dropped_zero_valid=self.dropped_zero_valid,
            dropped_invalid=self.dropped_invalid,
            metadata=self.metadata,
        )

    def summary(self) -> dict:
        return {
            "round_label": self.round_label,
            "n_boxes": len(self),
            "dropped_zero_valid": self.dropped_zero_valid,
            "dropped_invalid": self.dropped_invalid,
            "hierarchy_counts": list(self.hierarchy_counts),
            "candidates": list(self.candidates),
        }


def _parse_row(row, line, n_cand):
    if len(row) != len(FIXED_COLUMNS) + n_cand:
        raise ParseError(line, f"expected {len(FIXED_COLUMNS) + n_cand} fields, got {len(row)}")
    ids = row[:4]
    if any(s == "" for s in ids):
        raise ParseError(line, "missing id field")
    try:
        counts = [int(s) for s in row[4:]]
    except ValueError as exc:
        raise ParseError(line, f"non-integer count ({exc})") from None
    return ids, counts


def parse_round(path, config: IngestConfig | None = None, round_label: str | None = None) -> ElectionRound:
    """Parse a results CSV into an :class:`ElectionRound`.

    Raises :class:`ParseError` (with the 1-based line number) on malformed
    rows and :class:`ValidationError` (with the box id) on inconsistent
    counts or duplicate ids. With ``config.lenient`` such rows are logged
    and skipped instead. Boxes below ``config.min_electorate`` are removed
    after validation.
    """
    config = config or IngestConfig()
    path = Path(path)
    label = round_label if round_label is not None else path.stem

    box_ids, prov, dist, cnty, elec, valid, votes = [], [], [], [], [], [], []
    seen: set[str] = set()
    dropped_zero = dropped_bad = 0

    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(1, "empty file, header row missing") from None
        if tuple(header[: len(FIXED_COLUMNS)]) != FIXED_COLUMNS:
            raise ParseError(1, f"header must start with {','.join(FIXED_COLUMNS)}")
        candidates = header[len(FIXED_COLUMNS):]
        if not candidates:
            raise ParseError(1, "no candidate columns")
        if len(set(candidates)) != len(candidates):
            raise ParseError(1, "duplicate candidate column")
        n_cand = len(candidates)

        for row in reader:
            line = reader.line_num
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            try:
                ids, counts = _parse_row(row, line, n_cand)
                p, d, c, b = ids
                e, v, cand = counts[0], counts[1], counts[2:]
                if e < 0 or v < 0 or any(x < 0 for x in cand):
                    raise ValidationError(b, "negative count")
                if v == 0:
                    dropped_zero += 1
                    continue
                if v > e:
                    raise ValidationError(b, f"valid_votes {v} exceeds electorate {e}")
                if sum(cand) > v:
                    raise ValidationError(b, f"candidate votes {sum(cand)} exceed valid_votes {v}")
                if b in seen:
                    raise ValidationError(b, "duplicate box_id")
            except IngestError as exc:
                if not config.lenient:
                    raise
                log.warning("skipping %s row: %s", path.name, exc)
                dropped_bad += 1
                continue
            seen.add(b)
            box_ids.append(b)
            prov.append(p)
            dist.append(d)
            cnty.append(c)
            elec.append(e)
            valid.append(v)
            votes.append(cand)

    rnd = ElectionRound(
        label, box_ids, prov, dist, cnty, elec, valid,
        np.array(votes, dtype=np.int64).reshape(len(votes), n_cand),
        candidates, dropped_zero_valid=dropped_zero, dropped_invalid=dropped_bad,
    )
    if config.min_electorate:
        rnd = filter_min_electorate(rnd, config.min_electorate)
    return rnd


def write_round(rnd: ElectionRound, path) -> Path:
    """Write ``rnd`` in the results-file format read by :func:`parse_round`."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIXED_COLUMNS + rnd.candidates)
        for i in range(len(rnd)):
            w.writerow([
                rnd.province_id[i], rnd.district_id[i], rnd.county_id[i], rnd.box_id[i],
                int(rnd.electorate[i]), int(rnd.valid_votes[i]), *(int(x) for x in rnd.votes[i]),
            ])
    return path


def filter_min_electorate(rnd: ElectionRound, threshold: int) -> ElectionRound:
    """Copy of ``rnd`` keeping boxes with ``electorate >= threshold``."""
    if threshold < 0:
        raise ValueError("threshold must be >= 0")
    return rnd.subset(rnd.electorate >= threshold)


def _small_area_key_level(level: str) -> str:
    if level not in ("district", "county"):
        raise ValueError(f"small-area level must be 'district' or 'county', got {level!r}")
    return level


def boxes_per_district(rnd: ElectionRound, level: str = "county") -> dict[tuple[str, ...], int]:
    """Number of retained boxes per administrative area.

    Keys are ``(province, district, county)`` triples at county level and
    ``(province, district)`` pairs at district level.
    """
    level = _small_area_key_level(level)
    depth = LEVELS.index(level) + 1
    cols = [rnd.province_id, rnd.district_id, rnd.county_id][:depth]
    counts: dict[tuple[str, ...], int] = {}
    for key in zip(*cols):
        counts[key] = counts.get(key, 0) + 1
    return counts


def area_box_counts(rnd: ElectionRound, level: str = "county") -> np.ndarray:
    """Per box: how many boxes share its area at ``level``."""
    codes, _ = rnd.group_codes(_small_area_key_level(level))
    return np.bincount(codes, minlength=codes.max() + 1 if codes.size else 0)[codes]


def small_area_mask(rnd: ElectionRound, level: str = "county", max_boxes: int = 2) -> np.ndarray:
    """True for boxes in areas holding ``max_boxes`` boxes or fewer."""
    return area_box_counts(rnd, level) <= max_boxes
