"""Tests for the aleatoric/epistemic decomposition of fused predictions."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from probseg.fusion import fuse
from probseg.model import BBox, ClassDist, Detection, ProbMask, ValidationError
from probseg.uncertainty import class_covariance, pixel_variance, variance_maps

probs_list = st.lists(st.floats(0.0, 1.0), min_size=1, max_size=32)


def _member(prob_grid, pass_index, probs=(0.0, 1.0)):
    grid = np.asarray(prob_grid)
    h, w = grid.shape
    det = Detection(
        BBox(0.0, 0.0, float(w), float(h)),
        ClassDist(np.asarray(probs, dtype=np.float64)),
        ProbMask(grid),
    )
    return (pass_index, det)


class TestPixelVariance:
    def test_split_disagreement(self):
        """Samples {0, 1}: all variance is epistemic."""
        ale, epi = pixel_variance([0.0, 1.0])
        np.testing.assert_allclose(ale, 0.0, atol=1e-15)
        np.testing.assert_allclose(epi, 0.25)

    def test_maximal_ambiguity(self):
        """Samples {0.5, 0.5}: all variance is aleatoric."""
        ale, epi = pixel_variance([0.5, 0.5])
        np.testing.assert_allclose(ale, 0.25)
        np.testing.assert_allclose(epi, 0.0, atol=1e-15)

    def test_certain_agreement(self):
        ale, epi = pixel_variance([1.0, 1.0, 1.0])
        assert ale == 0.0 and epi == 0.0

    def test_worked_three_sample_case(self):
        """Samples {0.2, 0.4, 0.9}.

        mean 0.5, aleatoric = (0.16 + 0.24 + 0.09) / 3, epistemic =
        (0.09 + 0.01 + 0.16) / 3, and the two add up to 0.25.
        """
        ale, epi = pixel_variance([0.2, 0.4, 0.9])
        np.testing.assert_allclose(ale, 0.49 / 3, rtol=1e-12)
        np.testing.assert_allclose(epi, 0.26 / 3, rtol=1e-12)
        np.testing.assert_allclose(ale + epi, 0.25, rtol=1e-12)

    def test_single_sample(self):
        ale, epi = pixel_variance([0.3])
        np.testing.assert_allclose(ale, 0.21)
        assert epi == 0.0

    def test_rejects_empty(self):
        with pytest.raises(ValidationError):
            pixel_variance([])

    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError):
            pixel_variance([0.2, 1.2])

    @given(probs_list)
    @settings(max_examples=200, deadline=None)
    def test_law_of_total_variance(self, xs):
        """aleatoric + epistemic equals pbar * (1 - pbar) for any sample."""
        ale, epi = pixel_variance(xs)
        pbar = float(np.mean(xs))
        np.testing.assert_allclose(ale + epi, pbar * (1.0 - pbar), atol=1e-12)
        assert ale >= -1e-15 and epi >= -1e-15

    @given(probs_list)
    @settings(max_examples=100, deadline=None)
    def test_permutation_invariance(self, xs):
        a = pixel_variance(xs)
        b = pixel_variance(list(reversed(xs)))
        np.testing.assert_allclose(a, b, atol=1e-12)


class TestVarianceMaps:
    def test_matches_scalar_path(self):
        rng = np.random.default_rng(9)
        grids = rng.random((5, 6, 6))
        obs = fuse([_member(g, p) for p, g in enumerate(grids)], total_passes=5)
        maps = variance_maps(obs)
        for r in range(6):
            for c in range(6):
                ale, epi = pixel_variance(list(grids[:, r, c]))
                np.testing.assert_allclose(maps.aleatoric[r, c], ale, atol=1e-12)
                np.testing.assert_allclose(maps.epistemic[r, c], epi, atol=1e-12)

    def test_total_property(self):
        rng = np.random.default_rng(10)
        grids = rng.random((4, 5, 5))
        obs = fuse([_member(g, p) for p, g in enumerate(grids)], total_passes=4)
        maps = variance_maps(obs)
        pbar = grids.mean(axis=0)
        np.testing.assert_allclose(maps.total, pbar * (1 - pbar), atol=1e-12)
        np.testing.assert_allclose(maps.total, maps.aleatoric + maps.epistemic, atol=1e-12)

    def test_identical_members_have_zero_epistemic(self):
        g = np.full((4, 4), 0.5)
        obs = fuse([_member(g, p) for p in range(3)], total_passes=3)
        maps = variance_maps(obs)
        np.testing.assert_array_equal(maps.epistemic, np.zeros((4, 4)))
        np.testing.assert_allclose(maps.aleatoric, np.full((4, 4), 0.25))

    def test_read_only_arrays(self):
        g = np.full((2, 2), 0.5)
        maps = variance_maps(fuse([_member(g, 0)], total_passes=1))
        with pytest.raises(ValueError):
            maps.aleatoric[0, 0] = 1.0


class TestClassCovariance:
    def test_two_member_split(self):
        """One-hot members [1,0] and [0,1] give a pure epistemic covariance.

        Epistemic = [[0.25, -0.25], [-0.25, 0.25]], aleatoric = 0.
        """
        dec = class_covariance([np.array([1.0, 0.0]), np.array([0.0, 1.0])])
        np.testing.assert_allclose(dec.aleatoric, np.zeros((2, 2)), atol=1e-15)
        np.testing.assert_allclose(
            dec.epistemic, np.array([[0.25, -0.25], [-0.25, 0.25]]), atol=1e-15
        )

    def test_single_member_is_pure_aleatoric(self):
        p = np.array([0.2, 0.3, 0.5])
        dec = class_covariance([p])
        expected = np.diag(p) - np.outer(p, p)
        np.testing.assert_allclose(dec.aleatoric, expected, atol=1e-15)
        np.testing.assert_allclose(dec.epistemic, np.zeros((3, 3)), atol=1e-15)

    def test_accepts_class_dist_objects(self):
        dists = [ClassDist(np.array([0.4, 0.6])), ClassDist(np.array([0.8, 0.2]))]
        dec = class_covariance(dists)
        assert dec.aleatoric.shape == (2, 2)

    def test_trace_identity(self):
        """Trace of the summed covariance equals the sum of the per-class
        scalar totals computed from the mean vector."""
        rng = np.random.default_rng(11)
        for _ in range(50):
            n = int(rng.integers(1, 9))
            k = int(rng.integers(2, 7))
            vecs = [rng.dirichlet(np.ones(k)) for _ in range(n)]
            dec = class_covariance(vecs)
            pbar = np.mean(vecs, axis=0)
            lhs = np.trace(dec.aleatoric + dec.epistemic)
            rhs = float(np.sum(pbar * (1.0 - pbar)))
            np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_epistemic_positive_semidefinite(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            vecs = [rng.dirichlet(np.ones(4)) for _ in range(6)]
            dec = class_covariance(vecs)
            eig = np.linalg.eigvalsh(dec.epistemic)
            assert eig.min() > -1e-12

    def test_rejects_empty(self):
        with pytest.raises(ValidationError):
            class_covariance([])


class TestDtypeHandling:
    def test_float32_members_exact_identity(self):
        """float32 inputs are widened so the identity still holds to 1e-9."""
        rng = np.random.default_rng(13)
        grids = rng.random((8, 4, 4)).astype(np.float32)
        obs = fuse([_member(g, p) for p, g in enumerate(grids)], total_passes=8)
        maps = variance_maps(obs)
        pbar = grids.astype(np.float64).mean(axis=0)
        gap = np.abs(maps.aleatoric + maps.epistemic - pbar * (1.0 - pbar))
        assert gap.max() < 1e-9
        assert maps.aleatoric.dtype == np.float64
