import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cpdvmc.ansatz import LookupTable, init_from_hf, load_checkpoint, random_params
from cpdvmc.fock import SystemSpec
from cpdvmc.hamiltonians import HubbardSpec, build_hubbard
from cpdvmc.hf import hartree_fock
from cpdvmc.sampler import SamplerConfig, exact_sum, run_chains
from cpdvmc.sr import (CenteredBatch, NonFiniteEnergy, RmsState, SrConfig, SrSolveError, assemble_centered,
                       clip_update, optimize, sr_update_kernel, sr_update_rmsprop, sr_update_standard, trajectory_csv)


def _random_cb(n_s, n_p, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n_s, n_p))
    X -= X.mean(axis=0)
    return CenteredBatch.from_dense(X / math.sqrt(n_s), rng.normal(size=n_s))


@pytest.mark.parametrize("lam", [1e-4, 1e-2, 1.0])
@given(seed=st.integers(0, 10**6))
def test_kernel_and_standard_agree(lam, seed):
    cb = _random_cb(32, 200, seed)
    a = sr_update_standard(cb, 0.1, lam)
    b = sr_update_kernel(cb, 0.1, lam)
    assert np.linalg.norm(a - b) <= 1e-8 * np.linalg.norm(a)


@pytest.mark.parametrize("solver", ["kernel", "cg"])
def test_solvers_agree_with_direct_formula(solver):
    cb = _random_cb(20, 50, 3)
    X, e = cb.dense(), cb.e
    ref = -0.3 * np.linalg.solve(X.T @ X + 0.05 * np.eye(50), X.T @ e)
    got = sr_update_standard(cb, 0.3, 0.05, solver=solver, tol=1e-12)
    assert np.allclose(got, ref, rtol=1e-8, atol=1e-12)


@given(st.integers(0, 10**6), st.floats(0.01, 10.0))
def test_rmsprop_uniform_accumulator_is_standard_sr(seed, c):
    # a flat accumulator v = c^2 turns diag(d) into c * I
    cb = _random_cb(16, 40, seed)
    state = RmsState(np.full(40, c * c))
    delta, new = sr_update_rmsprop(cb, 0.2, 1e-3, state, beta=1.0, floor=1e-12)  # beta=1 freezes v
    ref = sr_update_standard(cb, 0.2, 1e-3 * c)
    assert np.linalg.norm(delta - ref) <= 1e-8 * np.linalg.norm(ref)
    assert np.allclose(new.v, c * c)


def test_rmsprop_accumulator_recurrence():
    cb = _random_cb(8, 10, 0)
    g = cb.gradient()
    _, s1 = sr_update_rmsprop(cb, 0.1, 1e-3, RmsState.zeros(10), beta=0.9)
    assert np.allclose(s1.v, 0.1 * g * g)
    _, s2 = sr_update_rmsprop(cb, 0.1, 1e-3, s1, beta=0.9)
    assert np.allclose(s2.v, 0.9 * 0.1 * g * g + 0.1 * g * g)


def test_single_sample_gives_zero_update():
    cb = _random_cb(1, 5, 0)
    assert not np.any(cb.dense())
    assert not np.any(sr_update_standard(cb, 0.1, 1e-3))


def test_kernel_rejects_zero_shift():
    with pytest.raises(SrSolveError):
        sr_update_kernel(_random_cb(4, 10, 0), 0.1, 0.0)
    with pytest.raises(SrSolveError):
        sr_update_standard(_random_cb(4, 10, 0), 0.1, 0.0)  # rank 3 < 10


def test_config_validation():
    for bad in [dict(variant="adam"), dict(learning_rate=0.0), dict(diagonal_shift=-1.0),
                dict(rms_decay=1.0), dict(solver="qr")]:
        with pytest.raises(ValueError):
            SrConfig(**bad)
    assert SrConfig(learning_rate=0.1, lr_decay=1.0).eta(1) == pytest.approx(0.05)


def test_gradient_from_centered_batch_matches_exact_gradient():
    spec = SystemSpec(4, 2, 1)
    H = build_hubbard(HubbardSpec((1, 4), 1.0, 4.0))
    p = random_params(spec, 2, LookupTable.full(4), seed=1)
    res = exact_sum(p, H)
    assert np.allclose(assemble_centered(res.batch).gradient(), res.gradient, atol=1e-12)


def test_assemble_repeatable():
    spec = SystemSpec(4, 2, 2)
    H = build_hubbard(HubbardSpec((2, 2), 1.0, 8.0, "periodic"))
    p = random_params(spec, 2, LookupTable.full(4), seed=2)
    b = run_chains(p, H, SamplerConfig(n_samples=256, n_chains=16, seed=0), with_derivatives=True)
    a1, a2 = assemble_centered(b), assemble_centered(b)
    assert np.array_equal(a1.dense(), a2.dense())
    assert np.array_equal(a1.e, a2.e)


def _dimer():
    H = build_hubbard(HubbardSpec((1, 2), 1.0, 8.0))
    spec = SystemSpec(2, 1, 1)
    return H, init_from_hf(hartree_fock(H, 1, 1), spec, M=1, sigma=0.0)


def test_zero_iterations_and_hf_start():
    H, p = _dimer()
    res = optimize(H, p, None, SrConfig(n_iterations=1), exact=True)
    assert res.trajectory[0].energy == pytest.approx(hartree_fock(H, 1, 1).energy, abs=1e-12)
    assert optimize(H, p, None, SrConfig(n_iterations=0), exact=True).trajectory == []


def test_exact_mode_energy_never_increases():
    H = build_hubbard(HubbardSpec((1, 4), 1.0, 4.0))
    spec = SystemSpec(4, 2, 2)
    p = init_from_hf(hartree_fock(H, 2, 2), spec, M=2, sigma=0.01, seed=0)
    res = optimize(H, p, None, SrConfig(learning_rate=0.5, n_iterations=25), exact=True)
    e = [r.energy for r in res.trajectory]
    assert all(b <= a + 1e-12 * abs(a) for a, b in zip(e, e[1:]))
    assert e[-1] < e[0]


def test_sampled_optimization_reproducible_and_checkpoints(tmp_path):
    H = build_hubbard(HubbardSpec((2, 2), 1.0, 4.0, "periodic"))
    spec = SystemSpec(4, 2, 2)
    p = init_from_hf(hartree_fock(H, 2, 2), spec, M=1, sigma=0.01, seed=0)
    scfg = SamplerConfig(n_samples=256, n_chains=16, seed=11)
    srcfg = SrConfig(n_iterations=4, checkpoint_every=2)
    runs = []
    for k in range(2):
        d = tmp_path / str(k)
        d.mkdir()
        res = optimize(H, p, scfg, srcfg, output_dir=d)
        runs.append((trajectory_csv(res.trajectory, include_wallclock=False),
                     (d / "checkpoint_00004.cpdb").read_bytes()))
    assert runs[0] == runs[1]
    assert (tmp_path / "0" / "checkpoint_00002.cpdb").exists()
    assert np.array_equal(load_checkpoint(tmp_path / "0" / "checkpoint_00004.cpdb").flat(), res.params.flat())
    lines = runs[0][0].splitlines()
    assert lines[0] == "iter,energy,stderr,acceptance,update_norm,wallclock_s" and len(lines) == 5


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_energy_dumps_batch(tmp_path):
    # finite couplings whose energy overflows
    H = build_hubbard(HubbardSpec((1, 2), 1.5e308, 1.5e308))
    _, p = _dimer()
    with pytest.raises(NonFiniteEnergy) as info:
        optimize(H, p, None, SrConfig(n_iterations=2), exact=True, output_dir=tmp_path)
    assert info.value.dump_path and np.load(info.value.dump_path)["up"].shape == (4,)


def test_sampled_mode_needs_sampler_config():
    H, p = _dimer()
    with pytest.raises(ValueError):
        optimize(H, p, None, SrConfig(n_iterations=1))


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20), st.floats(1e-3, 10.0))
def test_clip_update_bounds_norm_and_keeps_direction(values, radius):
    d = np.array(values)
    c = clip_update(d, radius)
    assert np.linalg.norm(c) <= radius * (1 + 1e-12) or np.array_equal(c, d)
    if np.linalg.norm(d) <= radius:
        assert np.array_equal(c, d)
    else:
        assert np.allclose(c * np.linalg.norm(d) / radius, d)
    assert clip_update(d, None) is d


def test_trust_radius_follows_schedule():
    H = build_hubbard(HubbardSpec((2, 2), 1.0, 4.0, "periodic"))
    spec = SystemSpec(4, 2, 2)
    p = init_from_hf(hartree_fock(H, 2, 2), spec, M=2, sigma=0.01, seed=0)
    cfg = SrConfig(learning_rate=0.5, lr_decay=1.0, n_iterations=4, max_update_norm=1e-3)
    res = optimize(H, p, SamplerConfig(n_samples=256, n_chains=16, seed=0), cfg)
    for r in res.trajectory:
        assert r.update_norm <= 1e-3 / (1 + r.iter) * (1 + 1e-12)
    with pytest.raises(ValueError):
        SrConfig(max_update_norm=0.0)
