import logging
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from harnest.kernels import (
    EmbeddingBatch,
    KernelBank,
    KernelError,
    gaussian_kernel_matrix,
    median_heuristic_bank,
    mk_kernel_matrix,
    mmd2,
    multi_domain_mmd,
    pairwise_mmd2,
)
from oracles import mmd2_loop, multi_domain_loop


def random_bank(rng, m):
    bw = rng.uniform(0.2, 5.0, size=m)
    w = rng.dirichlet(np.ones(m))
    w[-1] = 1.0 - w[:-1].sum()
    return KernelBank(tuple(bw), tuple(w))


# --- closed-form values ----------------------------------------------------

def test_gaussian_closed_form():
    K = gaussian_kernel_matrix(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]), 5.0)
    assert round(K[0, 0], 5) == 0.60653
    assert K[0, 0] == pytest.approx(math.exp(-0.5), rel=1e-12)


def test_mk_closed_form():
    bank = KernelBank((1.0, 2.0), (0.5, 0.5))
    K = mk_kernel_matrix(np.array([[0.0]]), np.array([[2.0]]), bank)
    # 0.5 e^-2 + 0.5 e^-0.5 evaluates to 0.37093 (the hand value 0.37099 is an arithmetic slip)
    assert K[0, 0] == pytest.approx(0.5 * math.exp(-2) + 0.5 * math.exp(-0.5), rel=1e-12)
    assert round(K[0, 0], 5) == 0.37093


def test_mmd2_closed_form():
    v = mmd2(np.array([[0.0]]), np.array([[2.0]]), KernelBank.single(1.0))
    assert round(v, 5) == 1.72933
    assert v == pytest.approx(2 - 2 * math.exp(-2), rel=1e-12)


def test_two_subject_mmd_is_half_pairwise():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(7, 3))
    bank = KernelBank.uniform([0.5, 1.0, 2.0])
    v = mmd2(a, b, bank)
    assert multi_domain_mmd([a, b], bank) == pytest.approx(v / 2, rel=1e-12)


# --- trivial examples -------------------------------------------------------

def test_kernel_self_similarity_and_flat_limit():
    x = np.random.default_rng(1).normal(size=(4, 3))
    K = gaussian_kernel_matrix(x, x, 0.7)
    np.testing.assert_allclose(np.diag(K), 1.0)
    assert ((K > 0) & (K <= 1)).all()
    np.testing.assert_allclose(gaussian_kernel_matrix(x, x, 1e8), 1.0, atol=1e-12)


def test_bank_degenerate_cases():
    x = np.random.default_rng(2).normal(size=(6, 2))
    single = gaussian_kernel_matrix(x, x, 1.3)
    np.testing.assert_allclose(mk_kernel_matrix(x, x, KernelBank.single(1.3)), single, rtol=1e-14)
    np.testing.assert_allclose(mk_kernel_matrix(x, x, KernelBank.uniform([1.3] * 4)), single, rtol=1e-14)


def test_mmd_zero_cases():
    x = np.random.default_rng(3).normal(size=(6, 4))
    bank = KernelBank.uniform([0.5, 1, 2])
    assert mmd2(x, x, bank) < 1e-10
    assert mmd2(np.zeros((3, 2)), np.zeros((5, 2)), bank) == 0.0
    assert multi_domain_mmd([x], bank) == 0.0
    assert multi_domain_mmd([x, x, x], bank) < 1e-10


def test_errors():
    bank = KernelBank.single(1.0)
    with pytest.raises(KernelError):
        gaussian_kernel_matrix(np.zeros((2, 3)), np.zeros((2, 4)), 1.0)
    with pytest.raises(KernelError):
        gaussian_kernel_matrix(np.zeros((2, 3)), np.zeros((2, 3)), 0.0)
    with pytest.raises(KernelError):
        mmd2(np.zeros((0, 3)), np.zeros((2, 3)), bank)
    with pytest.raises(KernelError):
        multi_domain_mmd([], bank)
    with pytest.raises(KernelError):
        KernelBank((1.0, 2.0), (0.5, 0.6))
    with pytest.raises(KernelError):
        KernelBank((1.0, -2.0), (0.5, 0.5))
    with pytest.raises(KernelError):
        EmbeddingBatch(np.array([[np.nan]]))
    with pytest.raises(KernelError):
        EmbeddingBatch(np.zeros((0, 2)))


# --- oracle equivalence -------------------------------------------------------

@pytest.mark.parametrize("seed", range(40))
def test_mmd2_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    M, N, d, m = rng.integers(1, 20), rng.integers(1, 20), rng.integers(1, 8), rng.integers(1, 6)
    S = rng.normal(size=(M, d))
    T = rng.normal(loc=rng.normal(), size=(N, d))
    bank = random_bank(rng, m)
    want = mmd2_loop(S.tolist(), T.tolist(), bank.bandwidths, bank.weights)
    got = mmd2(S, T, bank)
    assert got == pytest.approx(want, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_multi_domain_matches_loop_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    K, d = rng.integers(1, 5), rng.integers(1, 6)
    batches = [rng.normal(loc=i * 0.3, size=(rng.integers(1, 10), d)) for i in range(K)]
    bank = random_bank(rng, rng.integers(1, 6))
    want = multi_domain_loop([b.tolist() for b in batches], bank.bandwidths, bank.weights)
    assert multi_domain_mmd(batches, bank) == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_multi_domain_closed_form_both_ways():
    rng = np.random.default_rng(5)
    batches = [rng.normal(loc=i, size=(4 + i, 3)) for i in range(4)]
    bank = KernelBank.uniform([0.5, 1.0, 4.0])
    K = len(batches)
    upper = sum(mmd2(batches[i], batches[j], bank) for i in range(K) for j in range(i + 1, K))
    assert multi_domain_mmd(batches, bank) == pytest.approx(2.0 / K**2 * upper, rel=1e-12)
    P = pairwise_mmd2(batches, bank)
    np.testing.assert_allclose(P, P.T, rtol=1e-12)
    assert (np.diag(P) == 0).all()


# --- properties ------------------------------------------------------------------

arrays = st.integers(0, 2**32 - 1)


@settings(max_examples=60, deadline=None)
@given(arrays, st.integers(1, 12), st.integers(1, 12), st.integers(1, 5))
def test_mmd2_symmetric_and_nonnegative(seed, M, N, d):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(M, d)), rng.normal(scale=rng.uniform(0.1, 3), size=(N, d))
    bank = random_bank(rng, rng.integers(1, 6))
    ab, ba = mmd2(A, B, bank), mmd2(B, A, bank)
    assert ab >= 0 and ba >= 0
    assert abs(ab - ba) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(arrays, st.integers(1, 30), st.integers(1, 6))
def test_mk_kernel_psd(seed, n, d):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(n, d)) * rng.uniform(0.1, 5)
    K = mk_kernel_matrix(A, A, random_bank(rng, rng.integers(1, 6)))
    np.testing.assert_allclose(K, K.T, atol=1e-15)
    assert np.linalg.eigvalsh(K).min() >= -1e-8


@settings(max_examples=40, deadline=None)
@given(arrays, st.floats(0.01, 100.0))
def test_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(6, 3)), rng.normal(size=(5, 3)) + 0.5
    bank = random_bank(rng, 3)
    scaled = KernelBank(tuple(c * s for s in bank.bandwidths), bank.weights)
    np.testing.assert_allclose(mk_kernel_matrix(c * A, c * B, scaled), mk_kernel_matrix(A, B, bank),
                               rtol=1e-9)
    assert mmd2(c * A, c * B, scaled) == pytest.approx(mmd2(A, B, bank), rel=1e-8, abs=1e-12)


# --- torch path ------------------------------------------------------------------

def test_torch_inputs_stay_differentiable():
    a = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
    b = torch.randn(4, 3, dtype=torch.float64) + 1.0
    bank = KernelBank.uniform([0.5, 1, 2])
    v = mmd2(a, b, bank)
    assert torch.is_tensor(v)
    v.backward()
    assert a.grad is not None and torch.isfinite(a.grad).all()
    assert float(v.detach()) == pytest.approx(mmd2(a.detach().numpy(), b.numpy(), bank), rel=1e-12)
    md = multi_domain_mmd([a, b], bank)
    assert torch.is_tensor(md)


# --- median heuristic ---------------------------------------------------------------

def test_median_bank():
    bank = median_heuristic_bank(np.array([[0.0], [2.0]]))
    assert bank.m == 5
    assert bank.bandwidths == (0.5, 1.0, 2.0, 4.0, 8.0)
    assert bank.weights == (0.2,) * 5


def test_median_bank_fallback(caplog):
    with caplog.at_level(logging.WARNING):
        bank = median_heuristic_bank(np.ones((4, 3)))
    assert bank.bandwidths[2] == 1.0
    assert "falling back" in caplog.text
    with pytest.raises(KernelError):
        median_heuristic_bank(np.ones((1, 3)))
