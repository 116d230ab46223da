"""Pair sampling, ranking loss, and patch loss, with analytic oracles.

Closed forms: the sigmoid of zero is 1/2, saturation drives per-pair loss
to 0 or 1, and patch normalization on dyadic-rational inputs is exact in
float arithmetic, which pins the shift-invariance property at bit level.
"""

import numpy as np
import pytest

from splat4d.depthreg import (
    DELTA_DEFAULT,
    PixelPairBatch,
    RankingConfig,
    dump_pairs_csv,
    patch_loss,
    patch_normalize,
    ranking_loss,
    sample_pixel_pairs,
)


def sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


class TestSamplePixelPairs:
    def test_two_pixel_image_yields_the_only_pair(self):
        d = np.array([[1.0, 2.0]])
        batch = sample_pixel_pairs(np.random.default_rng(0), 1, 2, 1, d)
        assert len(batch) == 1
        got = {tuple(batch.a[0]), tuple(batch.b[0])}
        assert got == {(0, 0), (1, 0)}

    def test_constant_map_is_all_ties(self):
        d = np.full((8, 8), 3.0)
        batch = sample_pixel_pairs(np.random.default_rng(0), 32, 8, 8, d)
        assert len(batch) == 0

    def test_fixed_seed_reproduces_batch(self):
        rng_a = np.random.default_rng(42)
        rng_b = np.random.default_rng(42)
        d = np.linspace(1, 4, 64).reshape(8, 8)
        a = sample_pixel_pairs(rng_a, 20, 8, 8, d)
        b = sample_pixel_pairs(rng_b, 20, 8, 8, d)
        assert a.a.tobytes() == b.a.tobytes()
        assert a.b.tobytes() == b.b.tobytes()
        assert a.rank.tobytes() == b.rank.tobytes()

    def test_ties_rejected_within_tolerance(self):
        # two plateaus: pairs inside one plateau are ties and must not appear
        d = np.ones((4, 8))
        d[:, 4:] = 2.0
        batch = sample_pixel_pairs(np.random.default_rng(1), 64, 8, 4, d)
        assert len(batch) > 0
        va = d[batch.a[:, 1], batch.a[:, 0]]
        vb = d[batch.b[:, 1], batch.b[:, 0]]
        assert (np.abs(va - vb) > 0.5).all()
        assert ((batch.rank == 1.0) == (va > vb)).all()

    def test_near_ties_below_range_fraction_are_excluded(self):
        d = np.ones((2, 4))
        d[:, :2] = 1.0
        d[:, 2:] = 1.0 + 1e-9  # far below 1e-4 of the range... unless the
        # range itself is 1e-9; then every pair across plateaus is kept
        batch = sample_pixel_pairs(
            np.random.default_rng(3), 16, 4, 2, d, eps_rank=1e-6
        )
        assert len(batch) == 0

    def test_valid_mask_and_nan_excluded(self):
        d = np.linspace(1, 2, 16).reshape(4, 4)
        d[0, 0] = np.nan
        keep = np.ones((4, 4), bool)
        keep[3, 3] = False
        batch = sample_pixel_pairs(
            np.random.default_rng(5), 64, 4, 4, d, valid=keep
        )
        pts = np.concatenate([batch.a, batch.b])
        assert not ((pts[:, 0] == 0) & (pts[:, 1] == 0)).any()
        assert not ((pts[:, 0] == 3) & (pts[:, 1] == 3)).any()

    def test_csv_dump(self, tmp_path):
        d = np.linspace(1, 4, 64).reshape(8, 8)
        batch = sample_pixel_pairs(np.random.default_rng(7), 10, 8, 8, d)
        path = tmp_path / "pairs.csv"
        dump_pairs_csv(batch, str(path))
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "u_x,u_y,v_x,v_y,rank"
        assert len(lines) == 1 + len(batch)
        first = [int(v) for v in lines[1].split(",")]
        assert first[:2] == list(batch.a[0]) and first[4] == int(batch.rank[0])

    def test_config_validation(self):
        with pytest.raises(ValueError, match="kappa"):
            RankingConfig(kappa=0.0)
        with pytest.raises(ValueError, match="pairs_per_iter"):
            RankingConfig(pairs_per_iter=0)


def manual_batch(a, b, rank):
    a = np.asarray(a, np.int64).reshape(-1, 2)
    b = np.asarray(b, np.int64).reshape(-1, 2)
    return PixelPairBatch(a, b, np.asarray(rank, np.float64).reshape(-1))


class TestRankingLoss:
    def test_saturated_correct_order_loss_near_zero(self):
        d_ren = np.array([[10.0, 0.0]])
        d_mde = np.array([[5.0, 1.0]])
        batch = manual_batch([0, 0], [1, 0], [1.0])
        loss, _ = ranking_loss(d_ren, d_mde, batch, kappa=50.0, scale=1.0)
        assert loss < 1e-12

    def test_equal_rendered_depths_score_half(self):
        d_ren = np.array([[2.0, 2.0]])
        for mde in ([[1.0, 3.0]], [[3.0, 1.0]]):
            batch = manual_batch([0, 0], [1, 0], [0.0])
            loss, _ = ranking_loss(d_ren, np.array(mde), batch, scale=1.0)
            assert loss == pytest.approx(0.5, abs=1e-15)

    def test_unit_kappa_closed_form(self):
        d_ren = np.array([[1.0, 0.0]])
        d_mde = np.array([[2.0, 1.0]])
        batch = manual_batch([0, 0], [1, 0], [1.0])
        loss, _ = ranking_loss(d_ren, d_mde, batch, kappa=1.0, scale=1.0)
        assert loss == pytest.approx(1.0 - sigmoid(1.0), rel=1e-12)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(11)
        d_ren = 1.0 + rng.uniform(0, 2, (6, 7))
        d_mde = 1.0 + rng.uniform(0, 2, (6, 7))
        batch = sample_pixel_pairs(rng, 30, 7, 6, d_mde)
        assert len(batch) == 30
        _, grad = ranking_loss(d_ren, d_mde, batch, kappa=7.0, scale=1.7)
        eps = 1e-6
        idxs = {tuple(p) for p in np.concatenate([batch.a, batch.b])}
        for x, y in list(sorted(idxs))[:12]:
            dp, dm = d_ren.copy(), d_ren.copy()
            dp[y, x] += eps
            dm[y, x] -= eps
            lp, _ = ranking_loss(dp, d_mde, batch, kappa=7.0, scale=1.7)
            lm, _ = ranking_loss(dm, d_mde, batch, kappa=7.0, scale=1.7)
            fd = (lp - lm) / (2 * eps)
            assert grad[y, x] == pytest.approx(fd, rel=1e-6, abs=1e-10)

    def test_values_bounded_unit_interval(self):
        rng = np.random.default_rng(13)
        for _ in range(10):
            d_ren = rng.uniform(0.5, 3, (5, 5))
            d_mde = rng.uniform(0.5, 3, (5, 5))
            batch = sample_pixel_pairs(rng, 16, 5, 5, d_mde)
            loss, _ = ranking_loss(d_ren, d_mde, batch)
            assert 0.0 <= loss <= 1.0

    def test_monotone_transform_of_estimate_bit_identical(self):
        rng = np.random.default_rng(17)
        d_ren = 1.0 + rng.uniform(0, 2, (8, 8))
        d_mde = 1.0 + rng.uniform(0, 2, (8, 8))
        batch = sample_pixel_pairs(rng, 40, 8, 8, d_mde)
        base, gbase = ranking_loss(d_ren, d_mde, batch, scale=1.0)
        for warp in (lambda x: 2.0 * x + 0.25, lambda x: x**3, np.log):
            warped = warp(d_mde)
            # premise: the transform kept every sampled comparison strict
            va, vb = warped[batch.a[:, 1], batch.a[:, 0]], warped[batch.b[:, 1], batch.b[:, 0]]
            assert (va != vb).all()
            loss, grad = ranking_loss(d_ren, warped, batch, scale=1.0)
            assert loss == base
            assert grad.tobytes() == gbase.tobytes()

    def test_self_ranking_vanishes_at_large_kappa(self):
        rng = np.random.default_rng(19)
        d = rng.permutation(np.linspace(1, 3, 36)).reshape(6, 6)
        batch = sample_pixel_pairs(rng, 40, 6, 6, d)
        loss, _ = ranking_loss(d, d, batch, kappa=1e4, scale=1.0)
        assert loss < 1e-6

    def test_empty_batch_zero(self):
        d = np.ones((3, 3))
        batch = sample_pixel_pairs(np.random.default_rng(0), 4, 3, 3, d)
        loss, grad = ranking_loss(d, d, batch)
        assert loss == 0.0 and not grad.any()


class TestPatchNormalize:
    def test_constant_patch_is_zeros(self):
        assert not patch_normalize(np.full((4, 4), 2.5)).any()

    def test_two_value_closed_form(self):
        out = patch_normalize(np.array([0.0, 2.0]))
        d = DELTA_DEFAULT
        np.testing.assert_allclose(out, [-1.0 / (1.0 + d), 1.0 / (1.0 + d)], rtol=1e-15)

    def test_affine_input_within_delta_bound(self):
        rng = np.random.default_rng(23)
        x = rng.uniform(1, 3, (8, 8))
        s = x.std()
        for a, b in [(2.0, 1.0), (0.5, -0.3), (10.0, 4.0)]:
            na = patch_normalize(a * x + b)
            n0 = patch_normalize(x)
            factor = abs(a * s / (a * s + DELTA_DEFAULT) - s / (s + DELTA_DEFAULT))
            bound = np.abs(x - x.mean()) / s * factor + 1e-12
            assert (np.abs(na - n0) <= bound).all()


class TestPatchLoss:
    def test_identical_inputs_exact_zero(self):
        rng = np.random.default_rng(29)
        d = rng.uniform(1, 4, (24, 24))
        loss, grad = patch_loss(d, d, 8)
        assert loss == 0.0
        assert not grad.any()

    def test_affine_near_invariance(self):
        rng = np.random.default_rng(31)
        d = rng.uniform(1, 4, (32, 32))  # per-patch std ~ 0.8 >> delta
        for a, b in [(2.0, 0.0), (3.0, 1.5), (0.25, -0.7)]:
            loss, _ = patch_loss(a * d + b, d, 16)
            assert loss < 1e-4

    def test_shift_invariance_bit_exact_on_dyadic_data(self):
        # dyadic rationals keep every mean/std/normalize step exact in
        # binary floating point, so the algebraic cancellation of a common
        # shift is visible at bit level
        rng = np.random.default_rng(37)
        d_ren = rng.integers(0, 128, (16, 16)).astype(np.float64) / 64.0
        d_mde = rng.integers(0, 128, (16, 16)).astype(np.float64) / 64.0
        base, gbase = patch_loss(d_ren, d_mde, 8)
        for c in (8.0, -4.0, 512.0):
            shifted, gshift = patch_loss(d_ren + c, d_mde, 8)
            assert shifted == base
            assert gshift.tobytes() == gbase.tobytes()
            mde_shift, _ = patch_loss(d_ren, d_mde + c, 8)
            assert mde_shift == base

    def test_shift_invariance_tolerance_on_generic_data(self):
        rng = np.random.default_rng(41)
        d_ren = rng.uniform(1, 4, (16, 16))
        d_mde = rng.uniform(1, 4, (16, 16))
        base, _ = patch_loss(d_ren, d_mde, 8)
        shifted, _ = patch_loss(d_ren + 3.7, d_mde, 8)
        assert shifted == pytest.approx(base, rel=1e-10)

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(43)
        d_ren = rng.uniform(1, 4, (16, 16))
        d_mde = rng.uniform(1, 4, (16, 16))
        for size, stride in [(16, None), (8, None), (6, 4)]:
            _, grad = patch_loss(d_ren, d_mde, size, stride)
            eps = 1e-6
            for idx in [(0, 0), (3, 7), (9, 4), (15, 15), (8, 8)]:
                dp, dm = d_ren.copy(), d_ren.copy()
                dp[idx] += eps
                dm[idx] -= eps
                lp, _ = patch_loss(dp, d_mde, size, stride)
                lm, _ = patch_loss(dm, d_mde, size, stride)
                fd = (lp - lm) / (2 * eps)
                assert grad[idx] == pytest.approx(fd, rel=1e-5, abs=1e-10)

    def test_constant_rendered_patch_uses_zero_subgradient(self):
        d_ren = np.full((8, 8), 2.0)
        rng = np.random.default_rng(47)
        d_mde = rng.uniform(1, 3, (8, 8))
        loss, grad = patch_loss(d_ren, d_mde, 8)
        assert loss > 0.0
        assert np.isfinite(grad).all()
        # gradient of the mean-centering path only: sums to ~0 per patch
        assert abs(grad.sum()) < 1e-12

    def test_invalid_pixel_skips_whole_patch(self):
        rng = np.random.default_rng(53)
        d_ren = rng.uniform(1, 4, (16, 16))
        d_mde = rng.uniform(1, 4, (16, 16))
        keep = np.ones((16, 16), bool)
        keep[2, 2] = False  # kills the (0,0) 8x8 patch
        loss, grad = patch_loss(d_ren, d_mde, 8, valid=keep)
        assert not grad[:8, :8].any()
        assert grad[8:, 8:].any()
        # remaining three patches averaged
        full_loss = 0.0
        for sy, sx in [(slice(0, 8), slice(8, 16)), (slice(8, 16), slice(0, 8)), (slice(8, 16), slice(8, 16))]:
            r = patch_normalize(d_ren[sy, sx]) - patch_normalize(d_mde[sy, sx])
            full_loss += (r * r).mean()
        assert loss == pytest.approx(full_loss / 3.0, rel=1e-12)

    def test_all_invalid_is_zero(self):
        d = np.ones((8, 8))
        loss, grad = patch_loss(d, d, 8, valid=np.zeros((8, 8), bool))
        assert loss == 0.0 and not grad.any()

    def test_small_image_single_clipped_patch(self):
        rng = np.random.default_rng(59)
        d_ren = rng.uniform(1, 4, (5, 6))
        d_mde = rng.uniform(1, 4, (5, 6))
        loss, _ = patch_loss(d_ren, d_mde, 16)
        r = patch_normalize(d_ren) - patch_normalize(d_mde)
        assert loss == pytest.approx((r * r).mean(), rel=1e-12)

    def test_patch_size_validation(self):
        d = np.ones((4, 4))
        with pytest.raises(ValueError, match="patch_size"):
            patch_loss(d, d, 1)
