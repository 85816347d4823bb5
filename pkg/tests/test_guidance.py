import warnings

import numpy as np
import pytest

from hybridreg.field import DisplacementField
from hybridreg.guidance import (
    GuidancePoints,
    affinity_loss,
    affinity_loss_grad,
    build_affinity_gt,
    build_feature_grid,
    position_loss,
    select_affinity_rows,
    select_guidance_points,
)
from hybridreg.matching import MatchSet

from .oracles import affinity_dense, affinity_dense_vectorized, random_cell_matches


def _one_match(i_xy, j_xy, stride=8):
    return MatchSet([[i_xy[0] * stride + 1, i_xy[1] * stride + 1]], [[j_xy[0] * stride + 2, j_xy[1] * stride + 3]])


def test_single_match_gives_one():
    gt = build_affinity_gt(_one_match((1, 2), (3, 0)), (32, 32))
    i, j = 2 * 4 + 1, 0 * 4 + 3
    assert gt.values[i, j] == 1.0


def test_unrelated_cells_are_zero():
    vals = build_affinity_gt(_one_match((0, 0), (0, 0)), (32, 32)).values
    # neither row 5 nor column 7 takes part in a match
    assert vals[5, 7] == 0.0


def test_one_manhattan_step_on_4x4():
    gt = build_affinity_gt(_one_match((1, 1), (2, 2)), (32, 32))
    i, m, j = 5, 10, 11
    assert gt.values[i, j] == pytest.approx(1 - 1 / 6, abs=1e-15)
    assert gt.values[i, m] == 1.0


def test_empty_matches_all_zero():
    gt = build_affinity_gt(MatchSet.empty(), (24, 16))
    assert gt.values.shape == (6, 6) and not gt.values.any()


def test_literal_and_vectorized_oracles_agree(rng):
    for _ in range(30):
        gw, gh = rng.integers(1, 5, 2)
        _, pairs = random_cell_matches(rng, gw, gh, 8, int(rng.integers(0, 5)))
        np.testing.assert_array_equal(affinity_dense(pairs, gw, gh), affinity_dense_vectorized(pairs, gw, gh))


def test_affinity_entries_bounded_and_ones_only_at_matches(rng):
    for _ in range(50):
        gw, gh = rng.integers(1, 7, 2)
        ms, pairs = random_cell_matches(rng, gw, gh, 8, int(rng.integers(0, 10)))
        vals = build_affinity_gt(ms, (gw * 8, gh * 8)).values
        assert vals.min() >= 0 and vals.max() <= 1
        ones = {(int(r), int(c)) for r, c in zip(*np.nonzero(vals == 1.0))}
        assert ones == set(pairs)


def test_out_of_grid_matches_dropped():
    ms = MatchSet([[1, 1], [30, 1]], [[1, 1], [1, 1.5]])
    gt = build_affinity_gt(ms, (28, 16))  # 3x2 grid, x=30 falls outside
    assert len(gt.moving_cells) == 1


def test_feature_grid_contracts(rng):
    fg = build_feature_grid(np.full((16, 24), 0.7))
    assert (fg.grid_w, fg.grid_h) == (3, 2) and not fg.descriptors.any()
    fg = build_feature_grid(rng.random((16, 24)))
    np.testing.assert_allclose(np.linalg.norm(fg.descriptors, axis=1), 1.0, atol=1e-6)


def test_identical_images_matched_diagonal_is_one(phantom128):
    fg = build_feature_grid(phantom128)
    sims = fg.descriptors @ fg.descriptors.T
    nonflat = np.linalg.norm(fg.descriptors, axis=1) > 0
    np.testing.assert_allclose(np.diag(sims)[nonflat], 1.0, atol=1e-12)


def test_affinity_loss_zero_cases(rng):
    img = rng.random((32, 32))
    fg = build_feature_grid(img)
    zero_gt = build_affinity_gt(MatchSet.empty(), (32, 32))
    flat = build_feature_grid(np.zeros((32, 32)))
    assert affinity_loss(flat, fg, zero_gt) == 0.0


def test_affinity_loss_matches_dense_mse(rng):
    img_m, img_f = rng.random((48, 48)), rng.random((48, 48))
    ms, pairs = random_cell_matches(rng, 6, 6, 8, 7)
    gt = build_affinity_gt(ms, (48, 48))
    fm, ff = build_feature_grid(img_m), build_feature_grid(img_f)
    pred = np.clip(fm.descriptors @ ff.descriptors.T, 0, 1)
    dense = np.mean((pred - affinity_dense(pairs, 6, 6)) ** 2)
    assert affinity_loss(fm, ff, gt, rows=np.arange(36)) == pytest.approx(dense, rel=1e-12)
    grad_val, _ = affinity_loss_grad(img_m, ff, gt, np.arange(36))
    assert grad_val == pytest.approx(dense, rel=1e-12)


def test_sampled_rows_equal_restricted_full(rng):
    n = 320
    img_m, img_f = rng.random((n, n)), rng.random((n, n))
    ms, _ = random_cell_matches(rng, 40, 40, 8, 30)
    gt = build_affinity_gt(ms, (n, n))
    fm, ff = build_feature_grid(img_m), build_feature_grid(img_f)
    rows = select_affinity_rows(gt, row_sample=200, seed=3)
    assert set(gt.matched_rows()) <= set(rows) and len(rows) < gt.n_cells
    sampled = affinity_loss(fm, ff, gt, row_sample=200, seed=3)
    pred = np.clip(fm.descriptors @ ff.descriptors.T, 0, 1)
    full = (pred - gt.values) ** 2
    assert sampled == np.mean(full[rows]).item() or sampled == pytest.approx(np.mean(full[rows]), rel=1e-14)
    assert affinity_loss(fm, ff, gt, rows=rows) == sampled


def test_small_grid_uses_every_row():
    gt = build_affinity_gt(MatchSet.empty(), (256, 256))
    assert len(select_affinity_rows(gt, row_sample=10)) == 32 * 32


def test_top_k_selection(rng):
    img = rng.random((64, 64))
    pts = rng.uniform(0, 63, (200, 2))
    ms = MatchSet(pts, pts + 0.1)
    assert len(select_guidance_points(ms, img, 120)) == 120
    few = MatchSet(pts[:50], pts[:50])
    gp = select_guidance_points(few, img, 120)
    assert len(gp) == 50 and np.all(np.diff(gp.scores) <= 0)


def test_edge_point_ranked_first():
    img = np.zeros((32, 32))
    img[:, 16:] = 1.0
    ms = MatchSet([[5, 5], [16, 10]], [[5, 5], [16, 10]])
    gp = select_guidance_points(ms, img, 2)
    np.testing.assert_array_equal(gp.p_f[0], [16, 10])


def _gp(p_m, p_f):
    p_m, p_f = np.atleast_2d(p_m).astype(float), np.atleast_2d(p_f).astype(float)
    return GuidancePoints(p_m, p_f, np.zeros(len(p_f)))


def test_position_loss_examples():
    z = DisplacementField.zeros(10, 10)
    assert position_loss(_gp([2, 3], [2, 3]), z) == 0.0
    # residual = p_f + phi - p_m
    assert position_loss(_gp([2.0, 3], [2.5, 3]), z) == pytest.approx(0.125)
    assert position_loss(_gp([2.0, 3], [5.0, 3]), z) == pytest.approx(2.5)


def test_position_loss_nonnegative_and_zero_iff_aligned(rng):
    phi = DisplacementField(rng.normal(size=(12, 12)), rng.normal(size=(12, 12)))
    pf = rng.uniform(0, 11, (15, 2))
    from hybridreg.field import warp_points

    assert position_loss(_gp(warp_points(pf, phi), pf), phi) == pytest.approx(0.0, abs=1e-24)
    assert position_loss(_gp(rng.uniform(0, 11, (15, 2)), pf), phi) > 0


def test_position_loss_empty_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert position_loss(_gp(np.zeros((0, 2)), np.zeros((0, 2))), DisplacementField.zeros(4, 4)) == 0.0
    assert any(issubclass(w.category, RuntimeWarning) for w in caught)
