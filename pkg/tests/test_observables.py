import io

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cpdvmc.ansatz import LookupTable, log_amplitudes, random_params
from cpdvmc.fock import SystemSpec
from cpdvmc.hamiltonians import HubbardSpec, build_hubbard
from cpdvmc.observables import (GeometryError, blocking_error, central_sites, energy_estimate, full_rdms,
                                nearest_distance, radial_correlation, rdm_estimate, read_geometry,
                                spin_blocks_from_spin_free, spin_spin_zz, spin_spin_zz_spinned, szsz_matrix,
                                write_geometry)
from cpdvmc.oracle import VectorEvaluator, ground_state, spin_rdms, szsz_direct
from cpdvmc.sampler import exact_sum


def test_energy_estimate_uses_sample_std():
    m, s = energy_estimate([1.0, 2.0, 3.0])
    assert m == 2.0 and s == pytest.approx(1.0)
    with pytest.raises(ValueError):
        energy_estimate([1.0])


def test_blocking_error_white_noise_and_correlated():
    rng = np.random.default_rng(0)
    x = rng.normal(size=2**14)
    # max over blocking levels: never below the naive error, modestly above it
    assert 0.95 / 128 < blocking_error(x) < 1.5 / 128
    y = np.repeat(rng.normal(size=2**10), 16)  # strongly correlated runs
    naive = y.std(ddof=1) / np.sqrt(len(y))
    assert blocking_error(y) > 3 * naive


def _exact_batch_and_amp(H, spec, vec):
    amp = VectorEvaluator(spec, vec)
    res = exact_sum(None, H, spec, with_derivatives=False, amplitude=amp)
    return res, amp


@pytest.mark.parametrize("shape", [((1, 4), "open", 2, 2), ((2, 2), "periodic", 2, 1), ((1, 3), "open", 1, 1)])
def test_local_rdm_estimators_reproduce_oracle(shape):
    dims, bc, nu, nd = shape
    H = build_hubbard(HubbardSpec(dims, 1.0, 4.0, bc))
    spec = SystemSpec(H.L, nu, nd)
    e0, vec = ground_state(H, spec)
    res, amp = _exact_batch_and_amp(H, spec, vec)
    assert res.energy == pytest.approx(e0, abs=1e-12)
    gamma, Gamma = full_rdms(res.batch, amp, spec.L)
    g_ref, G_ref = spin_rdms(spec, vec)
    assert np.allclose(gamma, g_ref, atol=1e-12)
    assert np.allclose(Gamma, G_ref, atol=1e-12)


def test_rdm_subset_matches_full():
    spec = SystemSpec(3, 2, 1)
    p = random_params(spec, 2, LookupTable.full(3), seed=4)
    H = build_hubbard(HubbardSpec((1, 3), 1.0, 2.0))
    res = exact_sum(p, H, with_derivatives=False)
    amp = lambda u, d: log_amplitudes(p, u, d)  # noqa: E731
    g, G = full_rdms(res.batch, amp, 3)
    r = rdm_estimate(res.batch, amp, 3, one=[(0, 2)], two=[(1, 0, 2, 2)])
    assert np.allclose(r.g1[:, 0], g[:, 0, 2], atol=1e-14)
    assert np.allclose(r.g2[:, :, 0], G[:, :, 1, 0, 2, 2], atol=1e-14)
    # hermiticity of a real wavefunction's RDMs
    assert np.allclose(g, g.transpose(0, 2, 1), atol=1e-13)


@pytest.mark.parametrize("dims, nu, nd", [((1, 4), 2, 2), ((1, 5), 3, 2), ((2, 3), 3, 3), ((1, 6), 2, 1)])
def test_spinned_formula_equals_direct_for_any_state(dims, nu, nd):
    H = build_hubbard(HubbardSpec(dims, 1.0, 6.0, "open"))
    spec = SystemSpec(H.L, nu, nd)
    _, vec = ground_state(H, spec)
    gamma, Gamma = spin_rdms(spec, vec)
    direct = szsz_direct(spec, vec)
    L = spec.L
    C = np.array([[spin_spin_zz_spinned(gamma, Gamma, a, b) for b in range(L)] for a in range(L)])
    assert np.allclose(C, direct, atol=1e-12)


@pytest.mark.parametrize("dims", [(1, 2), (1, 4), (2, 2), (2, 3)])
def test_spin_free_formula_on_singlets(dims):
    H = build_hubbard(HubbardSpec(dims, 1.0, 8.0, "open"))
    L = H.L
    spec = SystemSpec(L, L // 2, L // 2)
    _, vec = ground_state(H, spec)
    gamma, Gamma = spin_rdms(spec, vec)
    g, G = gamma.sum(0), Gamma.sum((0, 1))
    C = np.array([[spin_spin_zz(g, G, a, b) for b in range(L)] for a in range(L)])
    assert np.allclose(C, szsz_direct(spec, vec), atol=1e-12)
    assert np.allclose(C.sum(axis=1), 0.0, atol=1e-12)
    same, opp = spin_blocks_from_spin_free(G)
    assert np.allclose(same, Gamma[0, 0], atol=1e-12)
    assert np.allclose(opp, Gamma[0, 1], atol=1e-12)


def test_szsz_matrix_exact_and_sampled_forms():
    H = build_hubbard(HubbardSpec((1, 4), 1.0, 8.0))
    spec = SystemSpec(4, 2, 2)
    _, vec = ground_state(H, spec)
    res, _ = _exact_batch_and_amp(H, spec, vec)
    C, err = szsz_matrix(res.batch, 4, chunk=5)
    assert np.allclose(C, szsz_direct(spec, vec), atol=1e-14)
    assert np.all(err == 0)
    b = res.batch
    rng = np.random.default_rng(0)
    idx = rng.choice(len(b.up), size=4000, p=b.weights)
    sampled = type(b)(b.up[idx], b.dn[idx], b.sign[idx], b.logabs[idx], b.local_energies[idx])
    Cs, es = szsz_matrix(sampled, 4)
    assert np.all(np.abs(Cs - C) < 5 * es + 1e-12)


def test_radial_correlation_on_square_grid():
    pos = np.array([[i, j, 0.0] for i in range(4) for j in range(4)]) * 1.5
    assert nearest_distance(pos) == pytest.approx(1.5)
    bulk = central_sites(pos, 4)
    assert bulk == [5, 6, 9, 10]
    corr = np.eye(16) * 0.25 - 0.01
    sc = radial_correlation(corr, pos, bulk)
    assert sc.r_over_d[0] == 0.0
    assert sc.C[0] == pytest.approx(0.24)
    assert sc.n_pairs[0] == 4
    assert sc.r_over_d[1] == pytest.approx(1.0) and sc.n_pairs[1] == 16
    assert sc.r_over_d[2] == pytest.approx(np.sqrt(2))
    assert sc.n_pairs.sum() == 4 * 16
    text = sc.to_csv()
    assert text.splitlines()[0] == "r_over_d,C,stderr,n_pairs"


@given(st.lists(st.tuples(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50)), min_size=1, max_size=10))
def test_geometry_round_trip(points):
    pos = np.array(points, dtype=float)
    assert np.array_equal(read_geometry(io.StringIO(write_geometry(pos))), pos)


@pytest.mark.parametrize("text", ["0 1 2\n", "0 1 2 x\n", "0 0 0 0\n0 1 1 1\n", "1 0 0 0\n"])
def test_geometry_errors(text):
    with pytest.raises(GeometryError):
        read_geometry(io.StringIO(text))


def test_geometry_fixture(data_dir):
    pos = read_geometry(data_dir / "h2_dissociated.xyz")
    assert pos.shape == (2, 3)
    assert nearest_distance(pos) == pytest.approx(3.0, abs=1e-9)
