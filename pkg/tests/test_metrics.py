import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sitestream.errors import LayoutError, MetricUndefinedError, ValidationError
from sitestream.metrics import (
    AccuracyMatrix,
    asd,
    boundary_pixels,
    bwt,
    bwt_plus,
    dsc,
    fwt,
    load_matrix_csv,
    save_matrix_csv,
)
from sitestream.tensor_core import Rng


def blob(h, w, coords):
    m = np.zeros((h, w))
    for r, c in coords:
        m[r, c] = 1.0
    return m


class TestDsc:
    def test_identical_nonempty(self):
        m = blob(8, 8, [(2, 2), (2, 3), (3, 2)])
        assert dsc(m, m) == 1.0

    def test_disjoint(self):
        assert dsc(blob(8, 8, [(0, 0)]), blob(8, 8, [(5, 5)])) == 0.0

    def test_half_coverage_hand_value(self):
        truth = blob(8, 8, [(r, c) for r in (2, 3) for c in (2, 3, 4, 5)])  # 8 px
        pred = blob(8, 8, [(2, 2), (2, 3), (2, 4), (2, 5)])  # covers half, no FP
        assert dsc(pred, truth) == pytest.approx(2 * 4 / (4 + 8))

    def test_both_empty_convention(self):
        assert dsc(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0

    def test_symmetric_and_bounded(self):
        rng = Rng(0)
        for i in range(50):
            a = (rng.split(i, 0).uniform(0, 1, (8, 8)) > 0.5).astype(float)
            b = (rng.split(i, 1).uniform(0, 1, (8, 8)) > 0.5).astype(float)
            assert dsc(a, b) == dsc(b, a)
            assert 0.0 <= dsc(a, b) <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(LayoutError):
            dsc(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_non_binary_rejected(self):
        with pytest.raises(ValidationError):
            dsc(0.5 * np.ones((4, 4)), np.zeros((4, 4)))


class TestAsd:
    def test_identical_zero(self):
        m = blob(8, 8, [(2, 2), (2, 3), (3, 3)])
        assert asd(m, m) == 0.0

    def test_two_pixels_three_apart(self):
        assert asd(blob(8, 8, [(4, 1)]), blob(8, 8, [(4, 4)])) == 3.0

    def test_symmetry(self):
        rng = Rng(1)
        for i in range(25):
            a = (rng.split(i, 0).uniform(0, 1, (8, 8)) > 0.4).astype(float)
            b = (rng.split(i, 1).uniform(0, 1, (8, 8)) > 0.4).astype(float)
            if a.sum() == 0 or b.sum() == 0:
                continue
            assert asd(a, b) == asd(b, a)
            assert asd(a, b) >= 0.0

    def test_spacing_scales_linearly(self):
        a, b = blob(8, 8, [(1, 1)]), blob(8, 8, [(1, 5)])
        assert asd(a, b, spacing=2.5) == pytest.approx(2.5 * asd(a, b))

    def test_empty_mask_undefined(self):
        with pytest.raises(MetricUndefinedError):
            asd(np.zeros((4, 4)), blob(4, 4, [(1, 1)]))

    def test_boundary_of_solid_block_is_its_ring(self):
        m = np.zeros((6, 6))
        m[1:5, 1:5] = 1.0
        ring = {tuple(p) for p in boundary_pixels(m)}
        expected = {(r, c) for r in range(1, 5) for c in range(1, 5) if r in (1, 4) or c in (1, 4)}
        assert ring == expected

    def test_border_foreground_counts_as_boundary(self):
        ring = {tuple(p) for p in boundary_pixels(np.ones((3, 3)))}
        assert ring == {(r, c) for r in range(3) for c in range(3) if (r, c) != (1, 1)}


def matrix(values):
    arr = np.asarray(values, dtype=float)
    return AccuracyMatrix(list(range(arr.shape[0])), arr)


class TestBwt:
    def test_no_forgetting_is_one(self):
        m = matrix([[0.9, 0.1, 0.2], [0.9, 0.8, 0.3], [0.9, 0.8, 0.7]])
        assert bwt(m) == 1.0

    def test_single_term_hand_value(self):
        m = matrix([[0.9, 0.5], [0.6, 0.95]])
        assert bwt(m) == pytest.approx(1.0 - 0.3)

    def test_improvement_clips_to_one(self):
        m = matrix([[0.5, 0.1], [0.9, 0.8]])
        assert bwt(m) == 1.0

    def test_upper_bound_when_scores_in_unit_interval(self):
        rng = Rng(2)
        for i in range(100):
            m = matrix(rng.split(i).uniform(0, 1, (4, 4)))
            assert bwt(m) <= 1.0

    def test_equals_one_iff_no_drop(self):
        rng = Rng(3)
        vals = rng.uniform(0.2, 0.9, (3, 3))
        vals[2, 0] = vals[0, 0] - 0.05
        assert bwt(matrix(vals)) < 1.0

    def test_too_small_rejected(self):
        with pytest.raises(ValidationError):
            bwt(matrix([[1.0]]))


class TestFwt:
    def test_constant_upper_triangle(self):
        m = matrix([[0.1, 0.4, 0.4], [0.2, 0.3, 0.4], [0.5, 0.6, 0.7]])
        assert fwt(m) == pytest.approx(0.4)

    def test_hand_mean(self):
        m = matrix([[0.0, 0.9, 0.6], [0.0, 0.0, 0.3], [0.0, 0.0, 0.0]])
        assert fwt(m) == pytest.approx((0.9 + 0.6 + 0.3) / 3)

    @given(st.permutations([0.15, 0.45, 0.75]))
    @settings(max_examples=6, deadline=None)
    def test_permutation_invariance_within_triangle(self, perm):
        vals = np.zeros((3, 3))
        vals[np.triu_indices(3, k=1)] = perm
        assert fwt(matrix(vals)) == pytest.approx(0.45)

    def test_too_small_rejected(self):
        with pytest.raises(ValidationError):
            fwt(matrix([[0.3]]))


class TestBwtPlus:
    def test_no_degradation_zero(self):
        m = matrix([[2.0, 9.0], [1.5, 1.0]])  # distances improved
        assert bwt_plus(m) == 0.0

    def test_single_term_hand_value(self):
        m = matrix([[1.0, 0.0], [1.5, 1.0]])
        assert bwt_plus(m) == pytest.approx(0.5)

    def test_positive_homogeneity(self):
        base = np.array([[1.0, 0.0, 0.0], [1.4, 1.0, 0.0], [1.8, 1.6, 1.0]])
        m1 = bwt_plus(matrix(base))
        scaled = base.copy()
        scaled[np.tril_indices(3, k=-1)] = 1.0 + 3.0 * (base[np.tril_indices(3, k=-1)] - 1.0)
        assert bwt_plus(matrix(scaled)) == pytest.approx(3.0 * m1)


class TestMatrixIO:
    def test_csv_round_trip_exact(self, tmp_path):
        rng = Rng(4)
        m = AccuracyMatrix([3, 1, 7], rng.uniform(0, 1, (3, 3)))
        path = str(tmp_path / "m.csv")
        save_matrix_csv(m, path)
        back = load_matrix_csv(path)
        assert back.site_ids == [3, 1, 7]
        assert np.array_equal(back.values, m.values)  # repr round-trips floats

    def test_set_row_and_completion(self):
        m = AccuracyMatrix([0, 1])
        assert not m.is_complete()
        m.set_row(0, [0.5, 0.5])
        m.set_row(1, [0.4, 0.9])
        assert m.is_complete()
        with pytest.raises(ValidationError):
            m.set_row(0, [1.0])

    def test_non_square_rejected(self):
        with pytest.raises(ValidationError):
            AccuracyMatrix([0, 1], np.zeros((2, 3)))
