import math

import numpy as np
import pytest
import mpmath
from hypothesis import given
from hypothesis import strategies as st

from tensormatch.errors import ConfigurationError
from tensormatch.so3 import random_unit_quaternions, rotate_array
from tensormatch.symtensor import SymTensor, multi_index_table, power_components, sphere_moments
from tensormatch.validation import (
    blob_template,
    brute_force_phi_max,
    lemma_k_coefficient,
    make_scene,
    noise_sigma_for_snr,
    run_invariant_suite,
    sphere_moment_tensor,
)


def exact_k(ell, n):
    # Tanh-sinh quadrature at 30 digits, independent of QUADPACK.
    with mpmath.workdps(30):
        f = lambda th: mpmath.cos(th) ** n * mpmath.sin((ell + 1) * th) * mpmath.sin(th)
        return mpmath.quad(f, [0, mpmath.pi / 2, mpmath.pi])


class TestLemma:
    def test_frozen_values(self):
        # Closed forms via product-to-sum expansion.
        assert abs(lemma_k_coefficient(0, 2) - math.pi / 8) <= 1e-12
        assert abs(lemma_k_coefficient(0, 4) - math.pi / 16) <= 1e-12
        assert abs(lemma_k_coefficient(2, 2) - math.pi / 8) <= 1e-12

    @pytest.mark.parametrize("ell,n", [(0, 6), (2, 4), (4, 4), (4, 6), (6, 6)])
    def test_matches_high_precision(self, ell, n):
        assert abs(lemma_k_coefficient(ell, n) - float(exact_k(ell, n))) <= 1e-12

    @pytest.mark.parametrize("n", [2, 4, 6])
    def test_sign_and_parity(self, n):
        for ell in range(17):
            v = lemma_k_coefficient(ell, n)
            assert v >= -1e-12
            if ell % 2:
                assert abs(v) <= 1e-12

    @pytest.mark.parametrize("n", [2, 4, 6])
    def test_degree_bound(self, n):
        for ell in range(n + 1, 17):
            assert abs(lemma_k_coefficient(ell, n)) <= 1e-12

    def test_even_ell_up_to_n_positive(self):
        for n in (2, 4, 6):
            for ell in range(0, n + 1, 2):
                assert lemma_k_coefficient(ell, n) > 1e-6

    def test_negative_ell(self):
        with pytest.raises(ConfigurationError):
            lemma_k_coefficient(-1, 2)


class TestSphereMoments:
    def test_closed_form(self):
        m = sphere_moment_tensor(4)
        assert m[(4, 0, 0, 0)] == 1 / 8
        assert m[(2, 2, 0, 0)] == 1 / 24
        assert m[(3, 1, 0, 0)] == 0 and m[(1, 1, 1, 1)] == 0

    def test_monte_carlo(self):
        q = random_unit_quaternions(1_000_000, 21)
        table = multi_index_table(4)
        mc = power_components(q, 4).mean(axis=0)
        exact = sphere_moments(table)
        assert np.max(np.abs(mc - exact)) <= 2e-3
        ref = sphere_moment_tensor(4)
        assert all(exact[i] == ref[tuple(e)] for i, e in enumerate(table.entries))


class TestScene:
    def test_empty(self, particle):
        s = make_scene(particle, [], 0.0, 0, dims=(32, 32, 32))
        assert np.all(s.volume.data == 0)

    def test_single_placement(self, particle):
        q = random_unit_quaternions(1, 2)[0]
        s = make_scene(particle, [((20, 21, 22), q)], 0.0, 0, dims=(48, 48, 48))
        ref = rotate_array(particle.data, q)
        assert np.array_equal(s.volume.data[8:33, 9:34, 10:35], ref)
        assert s.volume.data[:8].sum() == 0
        assert s.truth[0][1][0] >= 0

    def test_deterministic(self, particle):
        pl = [((24, 24, 24), random_unit_quaternions(1, 3)[0])]
        a = make_scene(particle, pl, 0.5, 9, dims=(48, 48, 48))
        b = make_scene(particle, pl, 0.5, 9, dims=(48, 48, 48))
        assert a.volume.data.tobytes() == b.volume.data.tobytes()

    def test_overlap_rejected(self, particle):
        q = np.array([1.0, 0, 0, 0])
        with pytest.raises(ConfigurationError):
            make_scene(particle, [((20, 20, 20), q), ((30, 20, 20), q)], 0.0, 0, dims=(64, 64, 64))

    def test_out_of_bounds(self, particle):
        with pytest.raises(ConfigurationError):
            make_scene(particle, [((70, 20, 20), np.array([1.0, 0, 0, 0]))], 0.0, 0)

    def test_snr_definition(self, particle):
        sigma = noise_sigma_for_snr(particle, 1.0)
        assert abs(noise_sigma_for_snr(particle, 4.0) - sigma / 2) < 1e-15
        support = particle.data[np.abs(particle.data) > 1e-3 * particle.data.max()]
        assert abs(sigma - support.std()) < 1e-12

    def test_template_odd(self):
        with pytest.raises(ConfigurationError):
            blob_template(24)


class TestOracleSymmetry:
    @given(st.integers(0, 2**32 - 1))
    def test_antipodal(self, seed):
        a = SymTensor(multi_index_table(4), np.random.default_rng(seed).standard_normal(35))
        lam, q = brute_force_phi_max(a, 10_000, seed % 1000)
        assert q[0] >= 0
        from tensormatch.symtensor import evaluate
        assert abs(evaluate(a.comp, -q, 4) - lam) <= 1e-12 * max(1, abs(lam))


def test_invariant_suite_all_pass():
    report = run_invariant_suite(0)
    assert [e["status"] for e in report] == ["pass"] * len(report)
