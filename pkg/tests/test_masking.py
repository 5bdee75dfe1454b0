import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmfl.dataset import generate_synthetic
from mmfl.errors import ExcludedConfiguration, FormatError, InvalidStats, ShapeMismatch
from mmfl.masking import (MissingMask, MissingStats, apply_mask, load_mask, make_missing_mask, missing_degree,
                          round_half_up, save_mask)


def count_rows_and_zeros(entries):
    """Independent counter: affected rows and the zero count of each affected row."""
    affected = []
    for row in entries.tolist():
        zeros = sum(1 for v in row if v == 0)
        if zeros:
            affected.append(zeros)
    return len(affected), affected


def expected_counts(n, m, stats):
    rows = int(np.floor(stats.p_s * n + 0.5 + 1e-9))
    zeros = int(np.floor(stats.p_m * m + 0.5 + 1e-9))
    if stats.p_m < 1:
        zeros = min(zeros, m - 1)
    if zeros == 0:
        rows = 0
    return rows, zeros


def test_no_missingness_gives_all_ones():
    mask = make_missing_mask(10, 5, MissingStats(0, 0), seed=0)
    assert mask.shape == (10, 5)
    assert mask.entries.all()


def test_full_missingness_is_excluded():
    with pytest.raises(ExcludedConfiguration):
        make_missing_mask(10, 5, MissingStats(1.0, 1.0), seed=0)


def test_known_counts_example():
    mask = make_missing_mask(100, 12, MissingStats(0.5, 0.4), seed=7)
    n_rows, zeros = count_rows_and_zeros(mask.entries)
    assert n_rows == 40
    assert zeros == [6] * 40
    assert int((mask.entries.sum(1) == 12).sum()) == 60


@pytest.mark.parametrize("pm,ps", [(-0.1, 0.5), (0.5, 1.2), (float("nan"), 0.1)])
def test_invalid_stats(pm, ps):
    with pytest.raises(InvalidStats):
        MissingStats(pm, ps)


def test_missing_degree():
    assert missing_degree(MissingStats(0, 0.8)) == 0
    assert missing_degree(MissingStats(0.2, 0.2)) == pytest.approx(0.04)
    assert missing_degree(MissingStats(0.6, 0.5)) == pytest.approx(0.30)


def test_round_half_up_absorbs_float_error():
    assert round_half_up(0.35 * 10) == 4
    assert round_half_up(2.5) == 3
    assert round_half_up(2.49) == 2


def test_cap_keeps_one_modality():
    mask = make_missing_mask(50, 4, MissingStats(0.9, 1.0), seed=3)
    assert (mask.entries.sum(1) == 1).all()


stats_st = st.tuples(st.integers(0, 10), st.integers(0, 10)).map(lambda t: MissingStats(t[0] / 10, t[1] / 10))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 120), m=st.integers(2, 12), stats=stats_st, seed=st.integers(0, 2**31))
def test_counts_exact_property(n, m, stats, seed):
    if stats.excluded:
        with pytest.raises(ExcludedConfiguration):
            make_missing_mask(n, m, stats, seed)
        return
    mask = make_missing_mask(n, m, stats, seed)
    rows, zeros = expected_counts(n, m, stats)
    n_rows, per_row = count_rows_and_zeros(mask.entries)
    assert n_rows == rows
    assert all(z == zeros for z in per_row)
    if stats.p_m < 1:
        assert (mask.entries.sum(1) >= 1).all()
    assert make_missing_mask(n, m, stats, seed) == mask


def small_dataset(n=100, m=12):
    return generate_synthetic(n, m, 3, 2, 1.0, seed=1)


def test_apply_identity_mask():
    ds = small_dataset(20, 3)
    out = apply_mask(ds, MissingMask.full(20, 3))
    for a, b in zip(ds.features, out.features):
        assert np.array_equal(a, b)
    assert out.availability == MissingMask.full(20, 3)


def test_apply_zeroes_slot():
    ds = small_dataset(5, 3)
    feats = list(ds.features)
    f2 = np.array(feats[2], copy=True)
    f2[3] = (1.5, -0.2, 0.7)
    feats[2] = f2
    import dataclasses
    ds = dataclasses.replace(ds, features=tuple(feats))
    entries = np.ones((5, 3), dtype=np.uint8)
    entries[3, 2] = 0
    out = apply_mask(ds, MissingMask(entries))
    assert np.array_equal(out.features[2][3], np.zeros(3))
    assert not out.available()[3, 2]
    assert np.array_equal(out.features[2][:3], ds.features[2][:3])
    assert np.array_equal(out.features[0], ds.features[0])


def test_apply_zeroes_expected_slot_count():
    ds = small_dataset()
    mask = make_missing_mask(100, 12, MissingStats(0.5, 0.4), seed=7)
    out = apply_mask(ds, mask)
    zeroed = sum(int((~out.available()[:, j]).sum()) for j in range(12))
    assert zeroed == 240
    for j in range(12):
        gone = ~mask.available()[:, j]
        assert np.all(out.features[j][gone] == 0)


def test_apply_is_idempotent():
    ds = small_dataset()
    mask = make_missing_mask(100, 12, MissingStats(0.3, 0.6), seed=2)
    once = apply_mask(ds, mask)
    twice = apply_mask(once, mask)
    assert once.availability == twice.availability
    for a, b in zip(once.features, twice.features):
        assert np.array_equal(a, b)


def test_apply_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        apply_mask(small_dataset(10, 3), MissingMask.full(10, 4))


def test_mask_roundtrip(tmp_path):
    mask = make_missing_mask(30, 5, MissingStats(0.4, 0.5), seed=11)
    path = tmp_path / "mask.csv"
    save_mask(mask, path)
    text = path.read_text()
    assert text.endswith("\n") and "," in text
    assert load_mask(path) == mask


def test_mask_load_rejects_bad_value(tmp_path):
    path = tmp_path / "mask.csv"
    path.write_text("1,0\n1,2\n")
    with pytest.raises(FormatError) as info:
        load_mask(path)
    assert info.value.line == 2
