import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from curvflow import matfun as mf
from curvflow import pinch as pq
from curvflow import symfun as sf
from curvflow.errors import InvalidSpectrum, ShapeMismatch


@pytest.fixture
def worked():
    return pq.make_instance([1.0, 3.0], {(0, 1, 1): 3.0, (1, 1, 1): 3.0})


# --- instance construction -------------------------------------------------


def test_worked_instance(worked):
    assert worked.epsilon == 0.25
    assert worked.T[0, 0, 0] == pytest.approx(1.0, abs=1e-15)
    assert worked.T[1, 0, 0] == pytest.approx(1.0, abs=1e-15)
    assert worked.constraint_residual() < 1e-15


@pytest.mark.parametrize("n", [2, 3, 4, 5, 6])
def test_free_component_count(n):
    assert len(pq.free_indices(n)) == math.comb(n + 2, 3) - n


def test_tensor_is_symmetric_and_constrained():
    inst = pq.make_instance([0.3, 1.0, 2.5, 7.0], seed=3)
    t = inst.T.array
    for p in itertools.permutations(range(3)):
        assert np.array_equal(np.transpose(t, p), t)
    assert inst.constraint_residual() < 1e-13


def test_bad_spectra_rejected():
    with pytest.raises(InvalidSpectrum):
        pq.make_instance([1.0, 1.0])
    with pytest.raises(InvalidSpectrum):
        pq.make_instance([2.0, 1.0])
    with pytest.raises(InvalidSpectrum):
        pq.make_instance([-1.0, 1.0])
    with pytest.raises(InvalidSpectrum):
        pq.make_instance([1.0, 1.0 + 1e-6])


def test_constrained_entry_cannot_be_set():
    with pytest.raises(ShapeMismatch):
        pq.make_instance([1.0, 2.0], {(0, 0, 1): 1.0})


def test_instance_round_trip_exact():
    inst = pq.make_instance([0.01234, 0.5, 77.0], seed=9)
    doc = json.loads(json.dumps(inst.to_dict()))
    again = pq.PinchInstance.from_dict(doc)
    assert np.array_equal(again.T.array, inst.T.array)


# --- optimal Gamma ---------------------------------------------------------


def test_worked_gamma(worked):
    f = sf.PowerMean(1, 2)
    g = pq.optimal_gamma(worked)
    assert np.allclose(g, [[0.5], [1.5]], atol=1e-15)
    assert pq.gamma_term(f, worked, g) == pytest.approx(5.0, abs=1e-13)


def test_gamma_shape_checked(worked):
    with pytest.raises(ShapeMismatch):
        pq.gamma_term(sf.PowerMean(1, 2), worked, np.zeros((2, 2)))


def test_gamma_term_simplified_form():
    # at any Gamma: 2 sum_{k, p>0} fdot_k (2 G T_kp0 - G^2 (lam_p - lam_0))
    rng = np.random.default_rng(0)
    f = sf.SymQuotient(2, 1, 4)
    inst = pq.make_instance([0.2, 0.9, 1.4, 6.0], seed=1)
    g = rng.standard_normal((4, 3))
    fd = f.gradient(inst.lam)
    t = inst.T.array
    gaps = inst.lam[1:] - inst.lam[0]
    expect = 2 * np.sum(fd[:, None] * (2 * g * t[:, 1:, 0] - g**2 * gaps[None, :]))
    assert pq.gamma_term(f, inst, g) == pytest.approx(expect, rel=1e-12)


def test_gamma_optimum_by_grid_search(worked):
    f = sf.PowerMean(1, 2)
    best = pq.gamma_term(f, worked, pq.optimal_gamma(worked))
    grid = np.linspace(-3, 3, 121)
    vals = [pq.gamma_term(f, worked, np.array([[a], [b]])) for a in grid for b in grid]
    assert max(vals) <= best + 1e-12


# --- Q and its blocks ------------------------------------------------------


def test_worked_blocks(worked):
    f = sf.PowerMean(1, 2)
    br = pq.q_blocks(f, worked)
    assert br.q1 == pytest.approx(4.5, abs=1e-13)
    assert br.qk == pytest.approx([0.5], abs=1e-13)
    assert br.total_blocks == pytest.approx(5.0, abs=1e-13)
    assert br.total_direct == pytest.approx(5.0, abs=1e-13)
    assert pq.q_direct(f, worked) == pytest.approx(5.0, abs=1e-13)


def q_from_matrix_calculus(f, inst):
    """Independent route: F''(T_0) - eps sum_j F''(T_j) + optimal Gamma term, all via matfun."""
    a = np.diag(inst.lam)
    t = inst.T.array
    eps = inst.epsilon
    total = mf.d2F_quadform(f, a, t[0]) - eps * sum(mf.d2F_quadform(f, a, t[j]) for j in range(inst.n))
    return total + pq.gamma_term(f, inst, pq.optimal_gamma(inst))


@pytest.mark.parametrize("n", [2, 3, 4, 5])
def test_direct_q_matches_matrix_route(n):
    rng = np.random.default_rng(n)
    for name, f in sf.standard_catalog(n)[::3]:
        lam = np.sort(rng.uniform(0.1, 5, n))
        inst = pq.make_instance(lam, seed=int(rng.integers(1 << 30)))
        q = pq.q_direct(f, inst)
        assert q == pytest.approx(q_from_matrix_calculus(f, inst), rel=1e-9, abs=1e-9), name


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(2, 5), idx=st.integers(0, 40))
def test_block_identity_property(seed, n, idx):
    cat = sf.standard_catalog(n) + [("h2", sf.PowerMean(2, n))]
    f = cat[idx % len(cat)][1]
    rng = np.random.default_rng(seed)
    lam = pq.random_spectra(rng, 1, n)[0]
    inst = pq.make_instance(lam, rng.standard_normal(len(pq.free_indices(n))))
    br = pq.q_blocks(f, inst)
    assert abs(br.total_blocks - br.total_direct) <= 1e-9 * (1 + abs(br.total_direct))


def test_zero_tensor_gives_zero():
    inst = pq.make_instance([1.0, 2.0, 3.0], np.zeros(len(pq.free_indices(3))))
    rep_q = pq.q_direct(sf.PowerMean(0, 3), inst)
    assert rep_q == 0.0


# --- phi* ------------------------------------------------------------------


@pytest.mark.parametrize("n", [2, 3, 4])
def test_phi_star_concave_for_catalog(n):
    rng = np.random.default_rng(n)
    for name, f in sf.standard_catalog(n):
        lam = np.sort(10 ** rng.uniform(-1, 1, n))
        assert pq.check_phi_star(f, lam, n_samples=200, seed=n), name


def test_phi_star_identity_holds_exactly():
    res = pq.phi_star_residuals(sf.SymQuotient(2, 1, 3), [0.5, 1.0, 2.0], 100, 1)
    assert np.all(res["identity"] > -1e-12)


# --- Monte-Carlo verification ---------------------------------------------


def test_verify_small_catalog_is_clean():
    rep = pq.verify(sf.SymQuotient(2, 1, 3), 3, 5000, seed=1)
    assert rep.ok and rep.min_q_normalized >= -1e-9
    assert rep.min_block_normalized >= -1e-9
    assert rep.max_identity_residual <= 1e-9


def test_verify_finds_counterexample_for_h2():
    f = sf.PowerMean(2, 3)
    rep = pq.verify(f, 3, 20000, seed=0, max_violations=5)
    assert not rep.ok and rep.n_violations >= len(rep.violations) == 5
    v = json.loads(json.dumps(rep.violations[0]))
    inst = pq.PinchInstance.from_dict(v)
    q = pq.q_direct(f, inst) / inst.T.norm2()
    assert q == pytest.approx(v["q_normalized"], rel=1e-10)
    assert q < 0


def test_verify_deterministic_and_thread_independent(monkeypatch):
    f = sf.ElemSym(2, 4)
    a = pq.verify(f, 4, 3000, seed=5, chunk=700).to_dict()
    monkeypatch.setenv("CURVFLOW_THREADS", "3")
    b = pq.verify(f, 4, 3000, seed=5, chunk=700).to_dict()
    assert json.dumps(a) == json.dumps(b)


def test_verify_arguments_checked():
    with pytest.raises(ValueError):
        pq.verify(sf.PowerMean(0, 3), 3, 0)
    with pytest.raises(ShapeMismatch):
        pq.verify(sf.PowerMean(0, 3), 4, 10)
