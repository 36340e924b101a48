"""Gaussian algebra: conversions, fusion, projections and their guards.

The exact-equality tests draw matrix entries on a coarse dyadic grid
(integers over a power-of-two denominator) so every intermediate product
and sum is representable in double precision; differently grouped
evaluations then round identically and equality can be asserted bitwise.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dbsmooth.errors import Diagnostics, EmptyMixture, SingularCovariance
from dbsmooth.gaussians import (
    CanonicalGaussian,
    MomentGaussian,
    WeightedGaussianMixture,
    gaussian_correlation,
    inv_psd,
    inv_psd_jitter,
    log_density,
    logdet_psd,
    marginalize,
    mixture_moments,
    product,
    psd_clamp,
    to_canonical,
    to_moment,
)
from dbsmooth.oracle import gaussian_box, quadrature_integrate

RECIP_SQRT_4PI = 0.28209479177387814


def random_pd(rng, d, cond_max=1e8):
    """Random PD matrix with condition number up to cond_max."""
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    log_cond = rng.uniform(0.0, np.log10(cond_max))
    eigs = np.logspace(0.0, -log_cond, d)
    return (q * eigs) @ q.T


def dyadic_psd(rng, d, denom=16):
    """PSD matrix with exactly representable dyadic entries."""
    g = rng.integers(-8, 9, size=(d, d)).astype(float) / denom
    w = g.T @ g
    w[np.diag_indices(d)] += rng.integers(1, 5, size=d).astype(float) / 4.0
    return w


def dyadic_vec(rng, d, denom=16):
    return rng.integers(-32, 33, size=d).astype(float) / denom


# ---------------------------------------------------------------------------
# Conversions


def test_round_trip_identity_random():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(300):
        d = int(rng.integers(1, 6))
        cov = random_pd(rng, d)
        g = MomentGaussian(rng.standard_normal(d), cov)
        back = to_moment(to_canonical(g))
        rel = np.linalg.norm(back.cov - g.cov) / np.linalg.norm(g.cov)
        rel = max(rel, np.linalg.norm(back.mean - g.mean) / max(np.linalg.norm(g.mean), 1.0))
        worst = max(worst, rel)
    assert worst <= 1e-10


def test_round_trip_scalar():
    g = MomentGaussian([3.0], [[4.0]])
    c = to_canonical(g)
    assert c.precision[0, 0] == pytest.approx(0.25)
    assert c.transformed_mean[0] == pytest.approx(0.75)
    m = to_moment(c)
    assert m.mean[0] == pytest.approx(3.0)
    assert m.cov[0, 0] == pytest.approx(4.0)


# ---------------------------------------------------------------------------
# Product (canonical fusion)


def test_product_flat_is_identity():
    b = CanonicalGaussian([[2.0, 0.5], [0.5, 3.0]], [1.0, -2.0])
    flat = CanonicalGaussian(np.zeros((2, 2)), np.zeros(2))
    out = product(flat, b)
    np.testing.assert_array_equal(out.precision, b.precision)
    np.testing.assert_array_equal(out.transformed_mean, b.transformed_mean)


def test_product_scalar_hand_case():
    # N(0,1) * N(2,1): precisions add to 2, transformed means add to 2
    a = to_canonical(MomentGaussian([0.0], [[1.0]]))
    b = to_canonical(MomentGaussian([2.0], [[1.0]]))
    out = product(a, b)
    assert out.precision[0, 0] == pytest.approx(2.0)
    assert out.transformed_mean[0] == pytest.approx(2.0)
    m = to_moment(out)
    assert m.mean[0] == pytest.approx(1.0)
    assert m.cov[0, 0] == pytest.approx(0.5)


def test_product_two_standard_normals():
    a = to_canonical(MomentGaussian([0.0], [[1.0]]))
    out = product(a, a)
    assert out.precision[0, 0] == 2.0
    assert out.transformed_mean[0] == 0.0


def test_product_commutative_bitwise():
    rng = np.random.default_rng(11)
    for _ in range(200):
        d = int(rng.integers(1, 5))
        a = CanonicalGaussian(random_pd(rng, d, 1e4), rng.standard_normal(d))
        b = CanonicalGaussian(random_pd(rng, d, 1e4), rng.standard_normal(d))
        ab, ba = product(a, b), product(b, a)
        np.testing.assert_array_equal(ab.precision, ba.precision)
        np.testing.assert_array_equal(ab.transformed_mean, ba.transformed_mean)


def test_product_associative_on_dyadic_grid():
    rng = np.random.default_rng(12)
    for _ in range(200):
        d = int(rng.integers(1, 4))
        ms = [
            CanonicalGaussian(dyadic_psd(rng, d), dyadic_vec(rng, d))
            for _ in range(3)
        ]
        left = product(product(ms[0], ms[1]), ms[2])
        right = product(ms[0], product(ms[1], ms[2]))
        np.testing.assert_array_equal(left.precision, right.precision)
        np.testing.assert_array_equal(left.transformed_mean, right.transformed_mean)


def test_factorization_identity_three_pairings():
    # Any split of the same four messages into a forward and a backward
    # half must fuse to identical canonical parameters. Dyadic entries
    # keep the sums exact, so the equality is bitwise.
    rng = np.random.default_rng(13)
    for _ in range(200):
        d = int(rng.integers(1, 5))
        m_fp, m_ms, m_pm, m_bp = (
            CanonicalGaussian(dyadic_psd(rng, d), dyadic_vec(rng, d))
            for _ in range(4)
        )
        m_fe1 = product(m_fp, m_ms)
        m_fe2 = product(m_fe1, m_pm)
        m_be1 = product(m_bp, m_pm)
        m_be2 = product(m_be1, m_ms)
        splits = [
            product(m_fp, m_be2),
            product(m_fe1, m_be1),
            product(m_fe2, m_bp),
        ]
        for other in splits[1:]:
            np.testing.assert_array_equal(splits[0].precision, other.precision)
            np.testing.assert_array_equal(
                splits[0].transformed_mean, other.transformed_mean
            )


# ---------------------------------------------------------------------------
# Marginalization


def test_marginalize_identity():
    rng = np.random.default_rng(14)
    g = MomentGaussian(rng.standard_normal(3), random_pd(rng, 3, 1e2))
    out = marginalize(g, range(3))
    np.testing.assert_array_equal(out.mean, g.mean)
    np.testing.assert_array_equal(out.cov, g.cov)


def test_marginalize_diagonal():
    g = MomentGaussian([1.0, 2.0, 3.0, 4.0], np.diag([1.0, 2.0, 3.0, 4.0]))
    out = marginalize(g, [0, 1])
    np.testing.assert_array_equal(out.mean, [1.0, 2.0])
    np.testing.assert_array_equal(out.cov, np.diag([1.0, 2.0]))


def test_marginalize_dense_block():
    rng = np.random.default_rng(15)
    cov = random_pd(rng, 4, 1e2)
    g = MomentGaussian(rng.standard_normal(4), cov)
    out = marginalize(g, [0, 1])
    np.testing.assert_array_equal(out.cov, cov[:2, :2])


def test_marginalize_matches_numeric_integration():
    # integrate the 2-D density over the dropped coordinate and compare
    # with the 1-D marginal at a few evaluation points
    g = MomentGaussian([0.3, -0.2], [[1.0, 0.6], [0.6, 2.0]])
    marg = marginalize(g, [0])

    def density(gg, x):
        n, q = log_density(gg, x)
        return n * np.exp(-0.5 * q)

    for x0 in (-1.0, 0.0, 0.7):
        direct = quadrature_integrate(
            lambda x1: density(g, np.array([x0, x1[0]])),
            [(-12.0, 12.0)],
        )
        assert direct == pytest.approx(density(marg, np.array([x0])), rel=1e-8)


def test_marginalize_bad_index():
    g = MomentGaussian([0.0, 0.0], np.eye(2))
    with pytest.raises(Exception):
        marginalize(g, [0, 5])


# ---------------------------------------------------------------------------
# Correlation


def test_correlation_standard_normals():
    a = MomentGaussian([0.0], [[1.0]])
    assert gaussian_correlation(a, a) == pytest.approx(RECIP_SQRT_4PI, rel=1e-14)


def test_correlation_symmetric_exact():
    rng = np.random.default_rng(16)
    for _ in range(50):
        d = int(rng.integers(1, 4))
        a = MomentGaussian(rng.standard_normal(d), random_pd(rng, d, 1e4))
        b = MomentGaussian(rng.standard_normal(d), random_pd(rng, d, 1e4))
        assert gaussian_correlation(a, b) == gaussian_correlation(b, a)


def test_correlation_distant_means_vanishes():
    a = MomentGaussian([0.0], [[1.0]])
    b = MomentGaussian([100.0], [[1.0]])
    assert gaussian_correlation(a, b) < 1e-300


def test_correlation_self_formula():
    # identical Gaussians: (4 pi)^(-D/2) det(C)^(-1/2)
    C = np.array([[0.5, 0.0], [0.0, 2.0]])
    g = MomentGaussian([1.0, 2.0], C)
    want = (4.0 * np.pi) ** -1 / np.sqrt(np.linalg.det(C))
    assert gaussian_correlation(g, g) == pytest.approx(want, rel=1e-13)


def test_correlation_matches_quadrature():
    rng = np.random.default_rng(17)
    for _ in range(6):
        d = int(rng.integers(1, 3))
        a = MomentGaussian(0.5 * rng.standard_normal(d), random_pd(rng, d, 10.0))
        b = MomentGaussian(0.5 * rng.standard_normal(d), random_pd(rng, d, 10.0))

        def integrand(z):
            na, qa = log_density(a, z)
            nb, qb = log_density(b, z)
            return na * nb * np.exp(-0.5 * (qa + qb))

        box = gaussian_box(MomentGaussian(a.mean, a.cov + b.cov))
        numeric = quadrature_integrate(integrand, box)
        assert numeric == pytest.approx(gaussian_correlation(a, b), rel=1e-8)


def test_correlation_dimension_mismatch():
    with pytest.raises(Exception):
        gaussian_correlation(
            MomentGaussian([0.0], [[1.0]]), MomentGaussian([0.0, 0.0], np.eye(2))
        )


# ---------------------------------------------------------------------------
# Density pieces


def test_log_density_at_mean():
    rng = np.random.default_rng(18)
    g = MomentGaussian(rng.standard_normal(3), random_pd(rng, 3, 1e3))
    _, quad = log_density(g, g.mean)
    assert quad == 0.0


def test_log_density_scalar_hand_cases():
    n, q = log_density(MomentGaussian([0.0], [[1.0]]), np.array([2.0]))
    assert n == pytest.approx(0.3989422804014327, rel=1e-14)
    assert q == pytest.approx(4.0)
    _, q = log_density(MomentGaussian([1.0], [[4.0]]), np.array([3.0]))
    assert q == pytest.approx(1.0)


def test_logdet_matches_slogdet():
    rng = np.random.default_rng(19)
    for _ in range(40):
        d = int(rng.integers(1, 6))
        m = random_pd(rng, d, 1e6)
        assert logdet_psd(m) == pytest.approx(np.linalg.slogdet(m)[1], rel=1e-10, abs=1e-10)


# ---------------------------------------------------------------------------
# Mixture projection


def test_mixture_single_component():
    g = MomentGaussian([1.0, -1.0], [[2.0, 0.3], [0.3, 1.0]])
    out = mixture_moments(
        WeightedGaussianMixture(np.array([1.0]), g.mean[None], g.cov[None])
    )
    np.testing.assert_allclose(out.mean, g.mean)
    np.testing.assert_allclose(out.cov, g.cov)


def test_mixture_point_masses():
    out = mixture_moments(
        WeightedGaussianMixture(
            np.array([0.5, 0.5]),
            np.array([[1.0], [-1.0]]),
            np.zeros((2, 1, 1)),
        )
    )
    assert out.mean[0] == pytest.approx(0.0)
    assert out.cov[0, 0] == pytest.approx(1.0)


def test_mixture_total_variance():
    out = mixture_moments(
        WeightedGaussianMixture(
            np.array([0.5, 0.5]),
            np.array([[1.0], [-1.0]]),
            np.full((2, 1, 1), 0.25),
        )
    )
    assert out.cov[0, 0] == pytest.approx(1.25)


def test_mixture_equal_means_returns_weighted_cov():
    rng = np.random.default_rng(20)
    covs = np.stack([random_pd(rng, 2, 1e2) for _ in range(3)])
    w = np.array([0.2, 0.5, 0.3])
    mean = np.array([0.7, -0.1])
    out = mixture_moments(
        WeightedGaussianMixture(w, np.broadcast_to(mean, (3, 2)).copy(), covs)
    )
    np.testing.assert_allclose(out.cov, np.einsum("j,jab->ab", w, covs), atol=1e-14)


def test_mixture_empty_raises():
    with pytest.raises(EmptyMixture):
        mixture_moments(
            WeightedGaussianMixture(
                np.zeros(0), np.zeros((0, 1)), np.zeros((0, 1, 1))
            )
        )


def test_mixture_cov_psd_random():
    rng = np.random.default_rng(21)
    for _ in range(60):
        J, d = int(rng.integers(2, 8)), int(rng.integers(1, 4))
        w = rng.dirichlet(np.ones(J))
        means = 3.0 * rng.standard_normal((J, d))
        covs = np.stack([random_pd(rng, d, 1e4) for _ in range(J)])
        out = mixture_moments(WeightedGaussianMixture(w, means, covs))
        assert np.linalg.eigvalsh(out.cov).min() >= -1e-12 * np.trace(out.cov)


# ---------------------------------------------------------------------------
# Guards


def test_psd_clamp_counts_and_fixes():
    diag = Diagnostics()
    mat = np.diag([1.0, -1e-4])
    out = psd_clamp(mat, diag)
    assert diag.indefinite_clamp == 1
    assert np.linalg.eigvalsh(out).min() >= 0.0


def test_psd_clamp_leaves_pd_alone():
    diag = Diagnostics()
    mat = np.array([[2.0, 0.1], [0.1, 1.0]])
    out = psd_clamp(mat, diag)
    np.testing.assert_array_equal(out, mat)
    assert diag.indefinite_clamp == 0


def test_inv_psd_rejects_indefinite():
    with pytest.raises(SingularCovariance):
        inv_psd(np.diag([1.0, -1.0]))


def test_inv_psd_jitter_rescues_singular():
    diag = Diagnostics()
    mat = np.diag([1.0, 0.0])
    out = inv_psd_jitter(mat, diag)
    assert diag.jitter_applied == 1
    assert np.isfinite(out).all()


def test_inv_psd_jitter_spectrum_rescue():
    # indefinite beyond what the diagonal nudge covers: the spectrum gets
    # floored instead of raising
    diag = Diagnostics()
    mat = np.diag([1.0, -1e-3])
    out = inv_psd_jitter(mat, diag)
    assert diag.indefinite_clamp == 1
    assert np.linalg.eigvalsh(out).min() > 0.0


def test_inv_psd_jitter_hopeless_raises():
    with pytest.raises(SingularCovariance):
        inv_psd_jitter(np.zeros((2, 2)), Diagnostics())


# ---------------------------------------------------------------------------
# Property tests


@given(
    mean=st.lists(st.floats(-10, 10), min_size=1, max_size=4),
    seed=st.integers(0, 2**31 - 1),
)
@settings(max_examples=40, deadline=None)
def test_round_trip_property(mean, seed):
    rng = np.random.default_rng(seed)
    d = len(mean)
    g = MomentGaussian(np.array(mean), random_pd(rng, d, 1e6))
    back = to_moment(to_canonical(g))
    assert np.linalg.norm(back.cov - g.cov) <= 1e-10 * np.linalg.norm(g.cov)


@given(seed=st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_product_precision_adds_property(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    a = CanonicalGaussian(random_pd(rng, d, 1e3), rng.standard_normal(d))
    b = CanonicalGaussian(random_pd(rng, d, 1e3), rng.standard_normal(d))
    out = product(a, b)
    np.testing.assert_array_equal(out.precision, a.precision + b.precision)
