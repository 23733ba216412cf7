import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from absorb.data import (BOTH, ONLY_Y1, ONLY_Y2, BivariateDataset, DataError, StudyRecord,
                         parse_dataset, partition, serialize_dataset, validate)

HEADER = "study_id,n,y1,s1,y2,s2\n"


def test_one_row_per_pattern():
    text = HEADER + "a,10,0.1,0.2,0.3,0.4\nb,10,0.1,0.2,,\nc,10,,,0.3,0.4\n"
    ds, report = parse_dataset(text)
    assert (ds.m1, ds.m2, ds.m3, ds.k_missing) == (1, 1, 1, 0)
    assert report.ok and not report.warnings


def test_y_without_s_is_reported_per_study():
    text = HEADER + "a,10,0.1,0.2,0.3,0.4\nbad,10,0.5,,0.3,0.4\n"
    with pytest.raises(DataError) as err:
        parse_dataset(text)
    assert ("bad", "y present without s (endpoint 1)") in err.value.report.errors


@pytest.mark.parametrize("body, fragment", [
    ("a,10,0.1,0,0.3,0.4\n", "s1 must be positive"),
    ("a,10,0.1,-1,0.3,0.4\n", "s1 must be positive"),
    ("a,1,0.1,0.2,0.3,0.4\n", "n < 2"),
    ("a,10,abc,0.2,0.3,0.4\n", "non-numeric"),
    ("a,10,0.1,0.2,,\n", "no study reports both"),
])
def test_parse_errors(body, fragment):
    with pytest.raises(DataError) as err:
        parse_dataset(HEADER + body)
    assert any(fragment in msg for _, msg in err.value.report.errors)


def test_malformed_header():
    with pytest.raises(DataError, match="header"):
        parse_dataset("id,n,y1,s1,y2,s2\na,10,1,1,1,1\n")


def test_na_token_and_neither_rows():
    text = HEADER + "a,10,0.1,0.2,0.3,0.4\nb,20,NA,na,,\nc,30,,,,\n"
    ds, report = parse_dataset(text)
    assert ds.n == 1 and ds.k_missing == 0 and report.n_excluded == 2
    ds, report = parse_dataset(text, ism_mode=True)
    assert ds.n == 1 and ds.k_missing == 2 and report.n_excluded == 0
    assert [s.sample_size for s in ds.unreported] == [20, 30]


def test_log_transform():
    ds, _ = parse_dataset(HEADER + "a,10,2.0,0.2,0.5,0.4\n", log_transform_y1=True)
    st_ = ds.studies[0]
    assert st_.y1 == pytest.approx(math.log(2.0)) and st_.s1 == 0.2 and st_.y2 == 0.5
    with pytest.raises(DataError, match="log transform"):
        parse_dataset(HEADER + "a,10,-1.0,0.2,0.5,0.4\n", log_transform_y1=True)


def test_partition_examples():
    both = [StudyRecord(f"b{i}", 10, 1.0, 1.0, 1.0, 1.0) for i in range(2)]
    y1 = StudyRecord("y1", 10, 1.0, 1.0)
    y2 = StudyRecord("y2", 10, None, None, 1.0, 1.0)
    ds = partition(both + [y1])
    assert ds.studies == tuple(both + [y1]) and (ds.m1, ds.m2, ds.m3) == (2, 1, 0)
    ds = partition([y2, both[0]])
    assert ds.studies == (both[0], y2) and (ds.m1, ds.m2, ds.m3) == (1, 0, 1)
    with pytest.raises(DataError):
        partition([])
    with pytest.raises(DataError):
        partition([y1, y2])


def test_ism_mode_counts_neither_rows():
    rows = [f"b{i},20,0.1,0.3,0.2,0.3" for i in range(10)]
    rows += [f"o{i},20,0.1,0.3,," for i in range(26)]
    rows += [f"t{i},20,,,0.2,0.3" for i in range(5)]
    rows += [f"n{i},20,,,," for i in range(4)]
    ds, _ = parse_dataset(HEADER + "\n".join(rows) + "\n", ism_mode=True)
    assert ds.n == 41 and ds.k_missing == 4


def test_validate_examples(small_dataset):
    assert validate(small_dataset).errors == []
    bad = StudyRecord("zero", 10, 0.1, 0.0, 0.2, 0.3)
    ds = BivariateDataset((bad,) + small_dataset.studies[1:], small_dataset.m1,
                          small_dataset.m2, small_dataset.m3)
    errs = validate(ds).errors
    assert len(errs) == 1 and errs[0][0] == "zero"
    only_one = BivariateDataset((StudyRecord("x", 10, 1.0, 1.0),), 0, 1, 0)
    assert ("", "no study reports both outcomes") in validate(only_one).errors


finite = st.floats(-1e6, 1e6, allow_nan=False)
positive = st.floats(1e-6, 1e6, allow_nan=False)


@st.composite
def records(draw):
    pat = draw(st.sampled_from([BOTH, ONLY_Y1, ONLY_Y2]))
    y1 = draw(finite) if pat != ONLY_Y2 else None
    s1 = draw(positive) if pat != ONLY_Y2 else None
    y2 = draw(finite) if pat != ONLY_Y1 else None
    s2 = draw(positive) if pat != ONLY_Y1 else None
    return StudyRecord(f"id{draw(st.integers(0, 10 ** 6))}", draw(st.integers(2, 10 ** 5)),
                       y1, s1, y2, s2)


@settings(max_examples=100, deadline=None)
@given(st.lists(records(), min_size=1, max_size=15),
       st.builds(StudyRecord, st.just("both"), st.integers(2, 100), finite, positive, finite, positive))
def test_roundtrip_and_idempotent_partition(studies, anchor):
    ds = partition(studies + [anchor])
    assert ds.m1 + ds.m2 + ds.m3 == ds.n
    again = partition(ds.studies)
    assert again == ds
    parsed, _ = parse_dataset(serialize_dataset(ds))
    assert parsed == ds
    assert parsed.fingerprint() == ds.fingerprint()
