import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import ks_2samp

from nets.lattice import (LatticeSpec, Phi4Potential, free_field_free_energy, free_field_two_point,
                          free_field_variance, histogram_to_csv, hmc_oracle, magnetization,
                          magnetization_histogram, mode_eigenvalues, phi4_energy, phi4_grad_params,
                          sample_free_field, site_variance, two_point)

# brute-force inverse of the dense precision matrix, computed once and frozen
FREE_L4 = dict(var=0.13174603174603172, g1=0.03968253968253969, g2=0.022222222222222227, F=2.8581318146220536)
FREE_L8 = dict(var=0.12708699884517483, g1=0.03385874855646853, g2=0.010015711495822501, F=11.622885257332626)


def dense_precision(L, D, m2):
    """Q with U = phi^T Q phi / 2, assembled bond by bond."""
    V = L**D
    idx = np.arange(V).reshape((L,) * D)
    Q = np.eye(V) * 2 * (2 * D + m2)
    for mu in range(D):
        nb = np.roll(idx, -1, axis=mu)
        for a, b in zip(idx.ravel(), nb.ravel()):
            Q[a, b] -= 2.0
            Q[b, a] -= 2.0
    return Q


# -- energy -------------------------------------------------------------------------


def test_energy_zero_field():
    s = LatticeSpec(4, m2_1=-1.0, lam_1=1.0)
    assert phi4_energy(s, 0.5, np.zeros(16))[0] == 0.0


def test_energy_constant_field_two_by_two():
    s = LatticeSpec(2, m2_0=1.0, m2_1=-1.0)
    # m2_t = 0 at t = 1/2 and lam = 0
    assert phi4_energy(s, 0.5, np.ones(4))[0] == pytest.approx(0.0, abs=1e-14)


def test_energy_single_site_bump():
    s = LatticeSpec(8, m2_0=1.0, m2_1=1.0, lam_1=1.0)
    f = np.zeros(64)
    f[27] = 1.0
    assert phi4_energy(s, 1.0, f)[0] == pytest.approx(6.0)


def test_energy_size_mismatch():
    with pytest.raises(ValueError):
        phi4_energy(LatticeSpec(4), 0.0, np.zeros(15))


def test_spec_validation():
    with pytest.raises(ValueError):
        LatticeSpec(4, lam_0=0.1)
    with pytest.raises(ValueError):
        LatticeSpec(4, m2_0=0.0)
    with pytest.raises(ValueError):
        LatticeSpec(4, lam_1=-1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), shift=st.tuples(st.integers(0, 3), st.integers(0, 3)), t=st.floats(0, 1))
def test_energy_symmetries(seed, shift, t):
    s = LatticeSpec(4, m2_1=-2.0, lam_1=0.7)
    f = np.random.default_rng(seed).normal(size=(4, 4))
    e = phi4_energy(s, t, f.ravel())[0]
    assert phi4_energy(s, t, np.roll(f, shift, axis=(0, 1)).ravel())[0] == pytest.approx(e, rel=1e-12, abs=1e-12)
    assert phi4_energy(s, t, -f.ravel())[0] == e


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31), mu=st.integers(0, 1))
def test_forward_and_backward_bond_sums_agree(seed, mu):
    f = np.random.default_rng(seed).normal(size=(5, 5))
    fwd = np.sum(f * np.roll(f, -1, axis=mu))
    bwd = np.sum(np.roll(f, 1, axis=mu) * f)
    assert fwd == pytest.approx(bwd, rel=1e-12)


def test_energy_matches_dense_quadratic_form(rng):
    s = LatticeSpec(4, m2_0=0.7)
    Q = dense_precision(4, 2, 0.7)
    f = rng.normal(size=(3, 16))
    assert np.allclose(phi4_energy(s, 0.0, f), 0.5 * np.einsum("ni,ij,nj->n", f, Q, f), rtol=1e-12)


def test_gradient_finite_difference(rng):
    s = LatticeSpec(4, m2_1=-1.0, lam_1=0.9)
    f = rng.normal(size=16)
    h = 1e-6
    fd = np.array([(phi4_energy(s, 0.6, f + h * e) - phi4_energy(s, 0.6, f - h * e))[0] / (2 * h)
                   for e in np.eye(16)])
    assert np.allclose(phi4_grad_params(s, s.m2(0.6), s.lam(0.6), f)[0], fd, rtol=1e-6, atol=1e-6)


def test_dt_energy_finite_difference(rng):
    p = Phi4Potential(LatticeSpec(4, m2_1=-1.0, lam_1=0.9))
    f = rng.normal(size=(2, 16))
    h = 1e-6
    fd = (p.energy(0.4 + h, f) - p.energy(0.4 - h, f)) / (2 * h)
    assert np.allclose(p.dt_energy(0.4, f), fd, rtol=1e-6)


# -- free theory ---------------------------------------------------------------------


@pytest.mark.parametrize("L,ref", [(4, FREE_L4), (8, FREE_L8)])
def test_free_field_closed_forms_vs_dense_inverse(L, ref):
    s = LatticeSpec(L)
    Q = dense_precision(L, 2, 1.0)
    C = np.linalg.inv(Q)
    assert C[0, 0] == pytest.approx(ref["var"], rel=1e-12)
    assert C[0, 1] == pytest.approx(ref["g1"], rel=1e-12)  # site (0,1) is one step along the last axis
    assert free_field_variance(s) == pytest.approx(ref["var"], rel=1e-12)
    assert free_field_two_point(s, 1) == pytest.approx(ref["g1"], rel=1e-12)
    assert free_field_two_point(s, 2) == pytest.approx(ref["g2"], rel=1e-12)
    F_dense = -0.5 * s.volume * np.log(2 * np.pi) + 0.5 * np.linalg.slogdet(Q)[1]
    assert F_dense == pytest.approx(ref["F"], rel=1e-12)
    assert free_field_free_energy(s, 1.0) == pytest.approx(ref["F"], rel=1e-12)


def test_mode_eigenvalues_positive():
    assert np.all(mode_eigenvalues(LatticeSpec(8), 1e-3) > 0)


def test_free_field_spectrum_is_real(rng):
    s = LatticeSpec(6)
    M = mode_eigenvalues(s, 1.0)
    z = rng.standard_normal((5, 6, 6))
    out = np.fft.ifftn(np.fft.fftn(z, axes=(1, 2)) / np.sqrt(2 * M), axes=(1, 2))
    assert np.max(np.abs(out.imag)) < 1e-10


def test_free_field_moments(rng):
    s = LatticeSpec(4)
    f = sample_free_field(s, rng, 10_000)
    x = f[:, 5]
    assert abs(x.mean()) < 3 * x.std() / 100
    v = x * x
    assert abs(v.mean() - FREE_L4["var"]) < 3 * v.std() / 100
    g = f[:, 0] * f[:, 1]
    assert abs(g.mean() - FREE_L4["g1"]) < 3 * g.std() / 100


def test_free_field_rejects_non_positive_mass(rng):
    with pytest.raises(ValueError):
        sample_free_field(LatticeSpec(4), rng, 3, m2=-0.5)


def test_free_target_sampler():
    p = Phi4Potential(LatticeSpec(4, m2_1=0.25))
    assert p.sample_target(2, np.random.default_rng(0)).shape == (2, 16)
    with pytest.raises(NotImplementedError):
        Phi4Potential(LatticeSpec(4, lam_1=1.0)).sample_target(2, np.random.default_rng(0))


# -- observables -------------------------------------------------------------------------


def test_magnetization_examples():
    assert magnetization(np.zeros(16)) == 0.0
    assert magnetization(np.ones(16)) == 16.0
    checker = np.indices((4, 4)).sum(axis=0) % 2 * 2 - 1.0
    assert magnetization(checker.ravel()) == 0.0
    assert np.array_equal(magnetization(np.ones((3, 16))), np.full(3, 16.0))


def test_two_point_and_site_variance():
    s = LatticeSpec(4)
    checker = (np.indices((4, 4)).sum(axis=0) % 2 * 2 - 1.0).ravel()
    assert two_point(s, checker, 1)[0] == -1.0
    assert two_point(s, checker, 2)[0] == 1.0
    assert site_variance(s, checker)[0] == 1.0


def test_histogram_csv():
    counts, edges = magnetization_histogram(np.ones((5, 4)), bins=3, range_=(0, 6))
    text = histogram_to_csv(counts, edges)
    assert text.splitlines()[0] == "left,right,value" and len(text.splitlines()) == 4
    _, _ = magnetization_histogram(np.ones((5, 4)), bins=3, log_weights=np.zeros(5))


# -- HMC oracle ------------------------------------------------------------------------------


@pytest.mark.parametrize("L", [4, 8])
def test_hmc_agrees_with_fourier_free_field(L):
    s = LatticeSpec(L)
    res = hmc_oracle(s, 0.0, 300, np.random.default_rng(L), step_size=0.2, n_leapfrog=8, n_chains=64)
    assert res.acceptance > 0.6
    ref = FREE_L4 if L == 4 else FREE_L8
    for fn, key in ((lambda f: site_variance(s, f), "var"), (lambda f: two_point(s, f, 1), "g1"),
                    (lambda f: two_point(s, f, 2), "g2")):
        m, se = res.chain_estimate(fn)
        assert abs(m - ref[key]) < 3 * se, key


def test_hmc_acceptance_near_critical_defaults():
    s = LatticeSpec(8, m2_1=-1.0, lam_1=0.9)
    res = hmc_oracle(s, 1.0, 100, np.random.default_rng(1), n_chains=32)
    assert res.acceptance > 0.6
    assert res.rejected_nonfinite == 0


def test_hmc_energy_stationary_across_halves():
    s = LatticeSpec(4, m2_1=-1.0, lam_1=0.9)
    res = hmc_oracle(s, 1.0, 200, np.random.default_rng(2), n_chains=256, burn_in=300)
    U = lambda k: phi4_energy(s, 1.0, res.samples[k])
    # one state per chain from each half keeps the two samples independent
    assert ks_2samp(U(50), U(150)).pvalue > 0.01


def test_hmc_nonfinite_proposals_are_rejected():
    s = LatticeSpec(4, lam_1=1.0)
    res = hmc_oracle(s, 1.0, 5, np.random.default_rng(3), step_size=5.0, n_leapfrog=20, n_chains=8, burn_in=0,
                     init=np.full((8, 16), 3.0))
    assert res.rejected_nonfinite > 0
    assert np.all(np.isfinite(res.samples))
