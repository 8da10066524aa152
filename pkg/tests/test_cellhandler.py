"""Row-level flagging, imputation and residuals."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from cellsift import (
    CovModel,
    InputError,
    LarPath,
    chi2_quantile,
    criterion_values,
    flag_domain_scan,
    gen_a09,
    handle_row,
    mahalanobis2,
)
from oracles import cond_mean_given_rest, partial_md2

Q99 = chi2_quantile(1, 0.99)


def path_with_drops(drops, order=None, forced=0):
    """Hand-built path for exercising the criterion computation alone."""
    drops = np.asarray(drops, dtype=float)
    d = drops.size
    order = np.asarray(order if order is not None else np.arange(d), dtype=int)
    rss = np.concatenate([[drops.sum()], drops.sum() - np.cumsum(drops)])
    return LarPath(
        order=order,
        rss=rss,
        drops=drops,
        forced_count=forced,
        weights=np.ones(d),
        r_mat=np.eye(d),
        qty=np.zeros(d),
    )


class TestCriterionValues:
    def test_already_nonincreasing(self):
        crit = criterion_values(path_with_drops([9.0, 0.0]))
        assert_allclose(crit, [9.0, 0.0])

    def test_suffix_max(self):
        crit = criterion_values(path_with_drops([1.0, 5.0, 0.2]))
        assert_allclose(crit, [5.0, 5.0, 0.2])

    def test_forced_cells_are_infinite(self):
        crit = criterion_values(path_with_drops([1.0, 5.0, 0.2], forced=1))
        assert crit[0] == np.inf
        assert_allclose(crit[1:], [5.0, 0.2])

    def test_respects_cell_order(self):
        crit = criterion_values(path_with_drops([1.0, 5.0, 0.2], order=[2, 0, 1]))
        assert_allclose(crit, [5.0, 0.2, 5.0])


class TestHandleRow:
    def test_single_gross_cell(self):
        model = CovModel.from_moments(np.zeros(4), np.eye(4))
        det = handle_row([10.0, 0.0, 0.0, 0.0], model, Q99)
        assert list(det.flagged) == [0]
        assert abs(det.imputed[0]) < 1e-8
        assert abs(det.residuals[0] - 10.0) < 1e-8
        assert np.all(det.residuals[1:] == 0.0)

    def test_clean_center(self):
        model = CovModel.from_moments(np.zeros(3), gen_a09(3))
        det = handle_row(np.zeros(3), model, Q99)
        assert det.flagged.size == 0
        assert np.all(det.residuals == 0.0)

    def test_correlated_pair(self):
        model = CovModel.from_moments(np.zeros(2), [[1.0, 0.9], [0.9, 1.0]])
        against = handle_row([2.0, -2.0], model, Q99)
        along = handle_row([2.0, 2.0], model, Q99)
        assert mahalanobis2([2.0, -2.0], [0.0, 0.0], model.inv_root) > Q99
        assert against.flagged.size >= 1
        assert along.flagged.size == 0

    def test_cutoff_monotonicity(self):
        rng = np.random.default_rng(12)
        model = CovModel.from_moments(np.zeros(5), gen_a09(5))
        for _ in range(25):
            z = rng.multivariate_normal(np.zeros(5), model.sigma) + rng.normal(0, 4, 5) * (
                rng.random(5) < 0.4
            )
            loose = set(handle_row(z, model, Q99).flagged)
            tight = set(handle_row(z, model, chi2_quantile(1, 0.999)).flagged)
            assert tight <= loose

    def test_coordinatewise_scale_equivariance(self):
        rng = np.random.default_rng(13)
        sigma = gen_a09(4)
        mu = rng.normal(0, 1, 4)
        z = rng.multivariate_normal(mu, sigma) + np.array([6.0, 0.0, -4.0, 0.0])
        scale = np.array([1.0, 1000.0, 0.01, 3.0])
        base = handle_row(z, CovModel.from_moments(mu, sigma), Q99)
        scaled = handle_row(
            z * scale,
            CovModel.from_moments(mu * scale, sigma * np.outer(scale, scale)),
            Q99,
        )
        assert list(base.flagged) == list(scaled.flagged)
        assert list(base.path_order) == list(scaled.path_order)
        assert_allclose(scaled.imputed, base.imputed * scale, rtol=1e-8, atol=1e-10)
        assert_allclose(scaled.residuals, base.residuals, atol=1e-8)

    def test_imputation_matches_block_formula(self):
        rng = np.random.default_rng(14)
        sigma = gen_a09(5)
        model = CovModel.from_moments(np.zeros(5), sigma)
        for _ in range(25):
            z = rng.multivariate_normal(np.zeros(5), sigma)
            z[rng.integers(5)] += rng.normal(0, 6)
            det = handle_row(z, model, Q99)
            if det.flagged.size:
                expected = cond_mean_given_rest(z, model.mu, sigma, det.flagged)
                assert_allclose(det.imputed[det.flagged], expected, atol=1e-8)

    def test_post_imputation_coherence(self):
        rng = np.random.default_rng(15)
        sigma = gen_a09(5)
        model = CovModel.from_moments(np.zeros(5), sigma)
        checked = 0
        for _ in range(40):
            z = rng.multivariate_normal(np.zeros(5), sigma)
            z[rng.integers(5)] += rng.normal(0, 8)
            det = handle_row(z, model, Q99)
            if not det.flagged.size:
                continue
            checked += 1
            rest = np.setdiff1d(np.arange(5), det.flagged)
            rss_at_flags = partial_md2(z, model.mu, sigma, rest)
            # imputed cells sit at their conditional mean, so the whole row's
            # distance collapses to the partial distance of the untouched block
            assert abs(mahalanobis2(det.imputed, model.mu, model.inv_root) - rss_at_flags) < 1e-8
            redone = handle_row(det.imputed, model, Q99)
            assert redone.criteria.max(initial=0.0) <= rss_at_flags + 1e-8
        assert checked >= 10

    def test_missing_cells_always_imputed(self):
        sigma = gen_a09(4)
        model = CovModel.from_moments(np.zeros(4), sigma)
        z = np.array([0.5, np.nan, 0.1, np.nan])
        det = handle_row(z, model, Q99)
        assert set(det.flagged) >= {1, 3}
        assert np.all(det.criteria[[1, 3]] == np.inf)
        assert np.all(np.isfinite(det.imputed))
        assert det.residuals[1] == 0.0 and det.residuals[3] == 0.0
        assert det.missing[1] and det.missing[3]
        expected = cond_mean_given_rest(
            np.where(det.missing, model.mu, z), model.mu, sigma, det.flagged
        )
        # conditioning ignores the placeholder values on the flagged block itself
        assert_allclose(det.imputed[det.flagged], expected, atol=1e-8)

    def test_rejects_nonpositive_cutoff(self):
        model = CovModel.from_moments(np.zeros(2), np.eye(2))
        with pytest.raises(InputError):
            handle_row([1.0, 2.0], model, 0.0)


class TestFlagDomainScan:
    def test_independent_model_regions(self):
        model = CovModel.from_moments(np.zeros(2), np.eye(2))
        labels = {(z1, z2): lab for z1, z2, lab in flag_domain_scan(model, (-4, 4, 17), Q99)}
        assert labels[(0.0, 0.0)] == "none"
        assert labels[(4.0, 0.0)] == "first"
        assert labels[(-4.0, 0.0)] == "first"
        assert labels[(0.0, 4.0)] == "second"
        assert labels[(4.0, 4.0)] == "both"

    def test_correlated_model_regions(self):
        model = CovModel.from_moments(np.zeros(2), [[1.0, 0.9], [0.9, 1.0]])
        scan = flag_domain_scan(model, (-4, 4, 17), Q99)
        labels = {(z1, z2): lab for z1, z2, lab in scan}
        assert labels[(2.0, 2.0)] == "none"
        assert labels[(2.0, -2.0)] != "none"
        assert {lab for _, _, lab in scan} == {"none", "first", "second", "both"}

    def test_rejects_other_dimensions(self):
        with pytest.raises(InputError):
            flag_domain_scan(CovModel.from_moments(np.zeros(3), np.eye(3)), (-1, 1, 3), Q99)
