import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from cpdvmc.ansatz import LookupTable, log_amplitudes, random_params
from cpdvmc.fock import SectorTooLarge, SystemSpec, sector_arrays
from cpdvmc.hamiltonians import HubbardSpec, build_hubbard
from cpdvmc.observables import blocking_error
from cpdvmc.oracle import VectorEvaluator, ground_state
from cpdvmc.sampler import (ABINITIO_MIX, HUBBARD_MIX, MoveSet, SamplerConfig, SamplingError, exact_sum,
                            propose_batch, run_chains, validate_mix)

from conftest import random_abinitio


def _moves(spec, mix, lattice=True):
    nb = HubbardSpec((1, spec.L), boundary="periodic").neighbor_slots() if lattice else None
    return MoveSet(spec, mix, nb)


@given(st.sampled_from([SystemSpec(4, 2, 2), SystemSpec(5, 1, 3), SystemSpec(6, 3, 0), SystemSpec(3, 3, 1)]),
       st.sampled_from(["hop", "single", "double", "exchange"]), st.integers(0, 10**6))
def test_proposals_conserve_sector(spec, move, seed):
    mix = {m: float(m == move) for m in ("hop", "single", "double", "exchange")}
    try:
        moves = _moves(spec, mix)
    except SamplingError:
        return  # move type has no legal target in this sector
    rng = np.random.default_rng(seed)
    up, dn = sector_arrays(spec)
    nu, nd, ok = propose_batch(up.copy(), dn.copy(), rng, moves)
    assert np.all(np.bitwise_count(nu) == spec.Nup)
    assert np.all(np.bitwise_count(nd) == spec.Ndn)
    changed = np.bitwise_count(nu ^ up) + np.bitwise_count(nd ^ dn)
    assert np.all(changed[~ok] == 0)
    limit = {"hop": 2, "single": 2, "double": 4, "exchange": 4}[move]
    assert np.all((changed[ok] > 0) & (changed[ok] <= limit))


def _proposal_matrix(spec, moves, n_draw, seed):
    up, dn = sector_arrays(spec)
    keys = {(int(u), int(d)): k for k, (u, d) in enumerate(zip(up, dn))}
    rng = np.random.default_rng(seed)
    T = np.zeros((len(up), len(up)))
    for k in range(len(up)):
        nu, nd, ok = propose_batch(np.full(n_draw, up[k]), np.full(n_draw, dn[k]), rng, moves)
        for u, d in zip(nu[ok], nd[ok]):
            T[k, keys[int(u), int(d)]] += 1
    return T / n_draw


@pytest.mark.parametrize("mix, lattice", [(HUBBARD_MIX, True), (ABINITIO_MIX, False)])
def test_proposal_kernel_is_symmetric(mix, lattice):
    spec = SystemSpec(4, 2, 1)
    T = _proposal_matrix(spec, _moves(spec, mix, lattice), 20000, seed=3)
    # binomial noise on entries of size ~0.05 at 2e4 draws is ~1.5e-3
    assert np.abs(T - T.T).max() < 8e-3
    assert np.all(np.diag(T) == 0)


def test_move_mix_validation():
    with pytest.raises(ValueError):
        validate_mix({"hop": 0.5, "teleport": 0.5})
    with pytest.raises(ValueError):
        validate_mix({"hop": 0.7})
    with pytest.raises(ValueError):
        SamplerConfig(n_samples=100, n_chains=64)
    with pytest.raises(ValueError):
        _moves(SystemSpec(4, 2, 2), HUBBARD_MIX, lattice=False)
    with pytest.raises(SamplingError):
        _moves(SystemSpec(2, 2, 0), HUBBARD_MIX)  # filled polarized band: nothing can move


def _chi2(spec, H, params, cfg):
    up, dn = sector_arrays(spec)
    s, l = log_amplitudes(params, up, dn)
    p = np.exp(2 * (l - l.max()))
    p /= p.sum()
    batch = run_chains(params, H, cfg)
    index = {(int(u), int(d)): k for k, (u, d) in enumerate(zip(up, dn))}
    counts = np.bincount([index[int(u), int(d)] for u, d in zip(batch.up, batch.dn)], minlength=len(p))
    return chisquare(counts, p * counts.sum()).pvalue, batch


@pytest.mark.parametrize("engine", ["batch", "context"])
def test_chains_sample_born_distribution_hubbard(engine):
    spec = SystemSpec(4, 2, 1)
    H = build_hubbard(HubbardSpec((1, 4), 1.0, 4.0, "periodic"))
    params = random_params(spec, 2, LookupTable.full(4), seed=1, scale=0.5)
    n = 16384 if engine == "batch" else 4096  # the per-chain engine is pure Python
    cfg = SamplerConfig(n_samples=n, n_chains=32, seed=5, engine=engine)
    pval, batch = _chi2(spec, H, params, cfg)
    assert pval > 1e-4
    assert 0 < batch.acceptance <= 1


def test_chains_sample_born_distribution_abinitio():
    spec = SystemSpec(4, 2, 2)
    H = random_abinitio(4, seed=1)
    params = random_params(spec, 1, LookupTable.full(4), seed=2, scale=0.5)
    pval, _ = _chi2(spec, H, params, SamplerConfig(n_samples=8192, n_chains=64, seed=9, init="random"))
    assert pval > 1e-4


def test_uniform_wavefunction_accepts_every_legal_move():
    # all-ones tensor with M=1 and a single up electron: every orbital value is 1
    spec = SystemSpec(4, 1, 0)
    params = random_params(spec, 1, LookupTable.full(4), scale=0.0)
    H = build_hubbard(HubbardSpec((1, 4), 1.0, 0.0, "periodic"))
    batch = run_chains(params, H, SamplerConfig(n_samples=256, n_chains=16, move_mix={"hop": 1.0}))
    assert batch.acceptance == 1.0


def test_run_chains_deterministic_across_threads():
    spec = SystemSpec(6, 3, 3)
    H = build_hubbard(HubbardSpec((2, 3), 1.0, 8.0))
    params = random_params(spec, 2, LookupTable.full(6), seed=0)
    base = SamplerConfig(n_samples=1024, n_chains=64, chains_per_block=8, seed=42)
    a = run_chains(params, H, base, with_derivatives=True)
    b = run_chains(params, H, SamplerConfig(**{**base.__dict__, "threads": 3}), with_derivatives=True)
    for x, y in [(a.up, b.up), (a.dn, b.dn), (a.logabs, b.logabs), (a.local_energies, b.local_energies),
                 (a.derivs.vals, b.derivs.vals)]:
        assert x.tobytes() == y.tobytes()
    c = run_chains(params, H, SamplerConfig(**{**base.__dict__, "seed": 43}))
    assert not np.array_equal(a.up, c.up)


def test_warm_start_continues_chains():
    spec = SystemSpec(4, 2, 2)
    H = build_hubbard(HubbardSpec((1, 4), 1.0, 4.0))
    params = random_params(spec, 1, LookupTable.full(4), seed=0)
    cfg = SamplerConfig(n_samples=128, n_chains=16, seed=1)
    a = run_chains(params, H, cfg)
    b = run_chains(params, H, cfg, state=a.chain_state)
    assert len(b) == 128 and b.chain_state[0].shape == (16,)
    with pytest.raises(ValueError):
        run_chains(params, H, cfg, state=(a.chain_state[0][:3], a.chain_state[1][:3]))


def test_sampled_energy_matches_exact_sum():
    spec = SystemSpec(4, 2, 2)
    H = build_hubbard(HubbardSpec((2, 2), 1.0, 8.0, "periodic"))
    params = random_params(spec, 2, LookupTable.full(4), seed=3, scale=0.4)
    ref = exact_sum(params, H, with_derivatives=False).energy
    b = run_chains(params, H, SamplerConfig(n_samples=16384, n_chains=64, seed=0))
    assert abs(b.local_energies.mean() - ref) < 5 * blocking_error(b.local_energies)


def test_exact_sum_of_ground_state_vector(h4):
    spec = SystemSpec(4, 2, 2)
    e0, vec = ground_state(h4, spec)
    res = exact_sum(None, h4, spec, with_derivatives=False, amplitude=VectorEvaluator(spec, vec))
    assert res.energy == pytest.approx(e0, abs=1e-12)
    assert res.batch.weights.sum() == pytest.approx(1.0)
    with pytest.raises(SectorTooLarge):
        exact_sum(None, h4, spec, amplitude=VectorEvaluator(spec, vec), max_configs=10)


def test_exact_gradient_matches_finite_difference():
    spec = SystemSpec(3, 2, 1)
    H = build_hubbard(HubbardSpec((1, 3), 1.0, 4.0))
    params = random_params(spec, 2, LookupTable.full(3), seed=7)
    g = exact_sum(params, H).gradient
    theta = params.flat()
    for k in np.random.default_rng(0).choice(len(theta), 15, replace=False):
        tp, tm = theta.copy(), theta.copy()
        tp[k] += 1e-6
        tm[k] -= 1e-6
        fd = (exact_sum(params.with_flat(tp), H, with_derivatives=False).energy
              - exact_sum(params.with_flat(tm), H, with_derivatives=False).energy) / 2e-6
        assert g[k] == pytest.approx(fd, rel=1e-5, abs=1e-8)
