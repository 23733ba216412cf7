"""Study-level data structures and CSV ingestion for bivariate meta-analysis.

A dataset is a list of studies, each reporting effect sizes and standard
errors for up to two endpoints.  Studies are kept in the canonical order
used throughout the package: those reporting both endpoints first, then
those reporting only the first endpoint, then those reporting only the
second.
"""
from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

COLUMNS = ("study_id", "n", "y1", "s1", "y2", "s2")
MISSING_TOKENS = ("", "na")

BOTH, ONLY_Y1, ONLY_Y2, NEITHER = 0, 1, 2, 3


class DataError(ValueError):
    """Raised when a dataset cannot be parsed or is not fit-eligible.

    The offending rows are available on ``report``.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    sample_size: int
    y1: Optional[float] = None
    s1: Optional[float] = None
    y2: Optional[float] = None
    s2: Optional[float] = None

    @property
    def reports_y1(self) -> bool:
        return self.y1 is not None

    @property
    def reports_y2(self) -> bool:
        return self.y2 is not None

    @property
    def pattern(self) -> int:
        if self.reports_y1 and self.reports_y2:
            return BOTH
        if self.reports_y1:
            return ONLY_Y1
        if self.reports_y2:
            return ONLY_Y2
        return NEITHER


@dataclass(frozen=True)
class ValidationReport:
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    n_excluded: int = 0

    @property
    def ok(self) -> bool:
        return not self.errors


@dataclass(frozen=True)
class BivariateDataset:
    """Studies in m1/m2/m3 order plus the count of completely unreported studies.

    ``unreported`` keeps the rows that reported neither endpoint (ISM mode only);
    their sample sizes are provenance and never enter a likelihood.
    """

    studies: tuple
    m1: int
    m2: int
    m3: int
    k_missing: int = 0
    unreported: tuple = ()

    @property
    def n(self) -> int:
        return len(self.studies)

    def column(self, name: str) -> np.ndarray:
        """Float array of one CSV column, NaN where the value is missing."""
        out = np.full(self.n, np.nan)
        for i, st in enumerate(self.studies):
            v = st.sample_size if name == "n" else getattr(st, name)
            if v is not None:
                out[i] = v
        return out

    @property
    def sample_sizes(self) -> np.ndarray:
        return np.array([st.sample_size for st in self.studies], dtype=float)

    @property
    def patterns(self) -> np.ndarray:
        return np.array([st.pattern for st in self.studies], dtype=np.int64)

    def fingerprint(self) -> str:
        """SHA-256 of the canonical CSV serialization."""
        text = serialize_dataset(self)
        text += f"#k_missing={self.k_missing}\n"
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def partition(studies: Iterable[StudyRecord], k_missing: int = 0,
              unreported: Sequence[StudyRecord] = ()) -> BivariateDataset:
    """Stable reorder into (both, y1-only, y2-only) groups."""
    studies = list(studies)
    if not studies:
        raise DataError("no studies to partition")
    groups = {BOTH: [], ONLY_Y1: [], ONLY_Y2: []}
    for st in studies:
        if st.pattern == NEITHER:
            raise DataError(f"study {st.study_id!r} reports neither outcome")
        groups[st.pattern].append(st)
    if not groups[BOTH]:
        raise DataError("no study reports both outcomes")
    ordered = tuple(groups[BOTH] + groups[ONLY_Y1] + groups[ONLY_Y2])
    return BivariateDataset(
        studies=ordered,
        m1=len(groups[BOTH]),
        m2=len(groups[ONLY_Y1]),
        m3=len(groups[ONLY_Y2]),
        k_missing=k_missing,
        unreported=tuple(unreported),
    )


def _study_problems(st: StudyRecord) -> list:
    problems = []
    if st.sample_size < 2:
        problems.append("n < 2")
    for y, s, j in ((st.y1, st.s1, 1), (st.y2, st.s2, 2)):
        if y is not None and s is None:
            problems.append(f"y present without s (endpoint {j})")
        elif s is not None and y is None:
            problems.append(f"s present without y (endpoint {j})")
        if y is not None and not math.isfinite(y):
            problems.append(f"y{j} is not finite")
        if s is not None and not (math.isfinite(s) and s > 0):
            problems.append(f"s{j} must be positive and finite")
    return problems


def validate(dataset: BivariateDataset) -> ValidationReport:
    """Collect every invariant violation in ``dataset`` without raising."""
    errors = []
    for st in dataset.studies:
        errors.extend((st.study_id, msg) for msg in _study_problems(st))
    pats = [st.pattern for st in dataset.studies]
    if pats.count(BOTH) == 0:
        errors.append(("", "no study reports both outcomes"))
    counts = (pats.count(BOTH), pats.count(ONLY_Y1), pats.count(ONLY_Y2))
    if counts != (dataset.m1, dataset.m2, dataset.m3):
        errors.append(("", f"partition counts {(dataset.m1, dataset.m2, dataset.m3)} "
                           f"do not match studies {counts}"))
    expected = sorted(pats)
    if pats != expected:
        errors.append(("", "studies are not in (both, y1-only, y2-only) order"))
    if NEITHER in pats:
        errors.append(("", "dataset contains a study reporting neither outcome"))
    return ValidationReport(errors=errors)


def _parse_cell(text: str, study_id: str, column: str, errors: list) -> Optional[float]:
    text = text.strip()
    if text.lower() in MISSING_TOKENS:
        return None
    try:
        return float(text)
    except ValueError:
        errors.append((study_id, f"non-numeric cell in column {column}: {text!r}"))
        return None


def parse_dataset(csv_text: str, log_transform_y1: bool = False,
                  log_transform_y2: bool = False, ism_mode: bool = False):
    """Parse ``study_id,n,y1,s1,y2,s2`` CSV text.

    Returns ``(dataset, report)``.  Raises :class:`DataError` when any row is
    invalid; the exception carries the full :class:`ValidationReport`.

    With a log-transform flag set, that endpoint's ``y`` is replaced by its
    natural log and its ``s`` is taken to be on the log scale already.
    Rows reporting neither endpoint count towards ``k_missing`` in ISM mode
    and are dropped with a warning otherwise.
    """
    reader = csv.reader(io.StringIO(csv_text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty CSV", ValidationReport(errors=[("", "empty CSV")]))
    if tuple(header) != COLUMNS:
        msg = f"malformed header: expected {','.join(COLUMNS)}, got {','.join(header)}"
        raise DataError(msg, ValidationReport(errors=[("", msg)]))

    errors, warnings = [], []
    kept, unreported = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(COLUMNS):
            errors.append((f"line {lineno}", f"expected {len(COLUMNS)} cells, got {len(row)}"))
            continue
        sid = row[0].strip()
        n_val = _parse_cell(row[1], sid, "n", errors)
        vals = [_parse_cell(c, sid, col, errors) for c, col in zip(row[2:], COLUMNS[2:])]
        if n_val is None:
            errors.append((sid, "missing sample size n"))
            continue
        if n_val != int(n_val):
            errors.append((sid, "n must be an integer"))
            continue
        y1, s1, y2, s2 = vals
        for flag, y, j in ((log_transform_y1, y1, 1), (log_transform_y2, y2, 2)):
            if flag and y is not None and y <= 0:
                errors.append((sid, f"log transform requires y{j} > 0"))
        if log_transform_y1 and y1 is not None and y1 > 0:
            y1 = math.log(y1)
        if log_transform_y2 and y2 is not None and y2 > 0:
            y2 = math.log(y2)
        st = StudyRecord(sid, int(n_val), y1, s1, y2, s2)
        errors.extend((sid, msg) for msg in _study_problems(st))
        if st.pattern == NEITHER:
            if ism_mode:
                unreported.append(st)
            else:
                warnings.append((sid, "reports neither outcome; excluded"))
            continue
        kept.append(st)

    if not any(st.pattern == BOTH for st in kept):
        errors.append(("", "no study reports both outcomes"))
    n_excluded = 0 if ism_mode else sum(1 for w in warnings if "excluded" in w[1])
    report = ValidationReport(errors=errors, warnings=warnings, n_excluded=n_excluded)
    if errors:
        first = errors[0]
        raise DataError(f"{len(errors)} data error(s); first: {first[0]}: {first[1]}", report)
    dataset = partition(kept, k_missing=len(unreported), unreported=unreported)
    return dataset, report


def _fmt(v: Optional[float]) -> str:
    return "" if v is None else format(v, ".17g")


def serialize_dataset(dataset: BivariateDataset) -> str:
    """Inverse of :func:`parse_dataset` (without log transforms)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COLUMNS)
    for st in tuple(dataset.studies) + tuple(dataset.unreported):
        w.writerow([st.study_id, st.sample_size, _fmt(st.y1), _fmt(st.s1),
                    _fmt(st.y2), _fmt(st.s2)])
    return buf.getvalue()


def load_dataset(path, **options):
    with open(path, encoding="utf-8") as fh:
        return parse_dataset(fh.read(), **options)
