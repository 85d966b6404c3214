from math import comb

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cpdvmc.fock import (DN, UP, Config, Excitation, InvalidExcitation, SectorTooLarge, SystemSpec,
                         apply_excitation, apply_operators, apply_operators_batch, enumerate_sector,
                         occupied_indices, sector_arrays, site_state, spin_orbital_index)


def test_spin_orbital_index_examples():
    assert spin_orbital_index(0, UP, 4) == 0
    assert spin_orbital_index(3, DN, 4) == 7
    assert spin_orbital_index(2, DN, 6) == 8
    with pytest.raises(IndexError):
        spin_orbital_index(4, UP, 4)


def test_spin_orbital_index_is_bijective():
    L = 5
    idx = [spin_orbital_index(s, spin, L) for spin in (UP, DN) for s in range(L)]
    assert idx == list(range(2 * L))


def test_site_state_examples():
    assert site_state(Config(0b01, 0b01), 0) == 3
    assert site_state(Config(0b10, 0b00), 1) == 1
    assert all(site_state(Config(0, 0), s) == 0 for s in range(4))


@given(st.integers(0, 2**10 - 1), st.integers(0, 2**10 - 1))
def test_site_state_matches_bits(up, dn):
    cfg = Config(up, dn)
    states = cfg.states(10)
    for s in range(10):
        assert states[s] == site_state(cfg, s) == (up >> s & 1) + 2 * (dn >> s & 1)


def test_hop_parity_example():
    # c+_2 c_0 on c+_0 c+_1 |0>: passes over orbital 1
    new, sign = apply_excitation(Config(0b0011, 0), Excitation.single(0, 2), 4)
    assert new == Config(0b0110, 0)
    assert sign == -1


def test_identity_excitation():
    cfg = Config(0b0101, 0b0011)
    new, sign = apply_excitation(cfg, Excitation((2,), (2,)), 4)
    assert (new, sign) == (cfg, 1)


def _explicit_sign(occ, ops):
    """Act with an operator string on an ordered creation list by explicit anticommutation."""
    state = list(occ)
    sign = 1
    for p, dag in reversed(ops):
        if dag:
            if p in state:
                return None, 0
            state.insert(0, p)
        else:
            if p not in state:
                return None, 0
            k = state.index(p)
            sign *= (-1) ** k
            state.pop(k)
    # bubble-sort back to canonical order counting transpositions
    state = list(state)
    for i in range(len(state)):
        for j in range(len(state) - 1 - i):
            if state[j] > state[j + 1]:
                state[j], state[j + 1] = state[j + 1], state[j]
                sign = -sign
    return tuple(state), sign


def test_double_excitation_two_site_against_explicit_algebra():
    L = 2
    cfg = Config(0b01, 0b01)  # spin-orbitals 0 and 2
    ex = Excitation.double(0, 2, 1, 3)
    new, sign = apply_excitation(cfg, ex, L)
    ref_occ, ref_sign = _explicit_sign(cfg.occupied(L), [(1, True), (3, True), (2, False), (0, False)])
    assert tuple(new.occupied(L)) == ref_occ
    assert sign == ref_sign
    s1 = apply_excitation(cfg, Excitation.single(0, 1), L)
    s2 = apply_excitation(s1[0], Excitation.single(2, 3), L)
    assert sign == s1[1] * s2[1]


@given(st.integers(1, 6).flatmap(lambda n: st.tuples(
    st.just(n), st.lists(st.tuples(st.integers(0, 2 * n - 1), st.booleans()), min_size=1, max_size=4),
    st.integers(0, 2 ** (2 * n) - 1))))
def test_apply_operators_matches_explicit_algebra(args):
    L, ops, mask = args
    occ = [p for p in range(2 * L) if mask >> p & 1]
    creates = [p for p, d in ops if d]
    annih = [p for p, d in ops if not d]
    new, sign = apply_operators(mask, creates, annih)
    ref_occ, ref_sign = _explicit_sign(occ, [(p, True) for p in creates] + [(p, False) for p in annih])
    assert sign == ref_sign
    if sign:
        assert tuple(p for p in range(2 * L) if new >> p & 1) == ref_occ


@given(st.integers(2, 6).flatmap(lambda L: st.tuples(st.just(L), st.integers(0, 2**L - 1), st.integers(0, 2**L - 1),
                                                     st.randoms(use_true_random=False))))
def test_round_trip_restores_config(args):
    L, up, dn, rnd = args
    cfg = Config(up, dn)
    occ = cfg.occupied(L)
    vir = [p for p in range(2 * L) if p not in occ]
    if not occ or not vir:
        return
    p = rnd.choice(occ)
    same = [r for r in vir if (r >= L) == (p >= L)]
    if not same:
        return
    r = rnd.choice(same)
    ex = Excitation.single(p, r)
    new, s1 = apply_excitation(cfg, ex, L)
    back, s2 = apply_excitation(new, ex.inverse(), L)
    assert back == cfg and s1 * s2 == 1


@given(st.integers(3, 6).flatmap(lambda L: st.tuples(st.just(L), st.integers(0, 2**L - 1), st.randoms(use_true_random=False))))
def test_double_equals_product_of_singles(args):
    L, up, rnd = args
    cfg = Config(up, 0)
    occ = [s for s in range(L) if up >> s & 1]
    vir = [s for s in range(L) if not up >> s & 1]
    if len(occ) < 2 or len(vir) < 2:
        return
    p, q = sorted(rnd.sample(occ, 2))
    r, s = sorted(rnd.sample(vir, 2))
    new, sign = apply_excitation(cfg, Excitation.double(p, q, r, s), L)
    # (c+_r c_p)(c+_s c_q) = c+_r c+_s c_q c_p when all four indices differ
    mid, a = apply_excitation(cfg, Excitation.single(q, s), L)
    end, b = apply_excitation(mid, Excitation.single(p, r), L)
    assert end == new
    assert sign == a * b


def test_invalid_excitations():
    cfg = Config(0b01, 0b00)
    with pytest.raises(InvalidExcitation):
        apply_excitation(cfg, Excitation.single(1, 0), 2)  # annihilate a hole
    with pytest.raises(InvalidExcitation):
        apply_excitation(Config(0b11, 0), Excitation.single(0, 1), 2)  # create onto a particle
    with pytest.raises(InvalidExcitation):
        apply_excitation(cfg, Excitation.single(0, 2), 2)  # spin flip


def test_enumerate_sector_sizes():
    assert len(enumerate_sector(SystemSpec(2, 1, 1))) == 4
    assert len(enumerate_sector(SystemSpec(8, 4, 4))) == 4900
    assert enumerate_sector(SystemSpec(1, 1, 0)) == [Config(1, 0)]
    with pytest.raises(SectorTooLarge):
        enumerate_sector(SystemSpec(8, 4, 4), max_configs=100)


@given(st.integers(1, 6).flatmap(lambda L: st.tuples(st.just(L), st.integers(0, L), st.integers(0, L))))
def test_enumerate_sector_ordered_and_complete(args):
    L, nu, nd = args
    spec = SystemSpec(L, nu, nd)
    cfgs = enumerate_sector(spec)
    assert len(cfgs) == comb(L, nu) * comb(L, nd)
    assert all(a < b for a, b in zip(cfgs, cfgs[1:]))
    assert all(c.up.bit_count() == nu and c.dn.bit_count() == nd for c in cfgs)
    up, dn = sector_arrays(spec)
    assert [Config(int(u), int(d)) for u, d in zip(up, dn)] == cfgs


def test_system_spec_validation():
    with pytest.raises(ValueError):
        SystemSpec(0, 0, 0)
    with pytest.raises(ValueError):
        SystemSpec(2, 3, 0)
    with pytest.raises(ValueError):
        SystemSpec(2, 1, 1, "unrestricted")
    assert SystemSpec(4, 2, 1).N == 3


def test_occupied_indices_ascending():
    occ = occupied_indices(np.array([0b1010, 0b0110, 0b1001]), 4, 2)
    assert occ.tolist() == [[1, 3], [1, 2], [0, 3]]


@given(st.integers(1, 5).flatmap(lambda L: st.tuples(
    st.just(L), st.lists(st.tuples(st.integers(0, 2**L - 1), st.integers(0, 2**L - 1)), min_size=1, max_size=8),
    st.lists(st.integers(0, 2 * L - 1), max_size=2), st.lists(st.integers(0, 2 * L - 1), max_size=2))))
def test_batch_operators_match_scalar(args):
    L, cfgs, create, annih = args
    up = np.array([c[0] for c in cfgs])
    dn = np.array([c[1] for c in cfgs])
    nu, nd, sg = apply_operators_batch(up, dn, L, create, annih)
    for b, (u, d) in enumerate(cfgs):
        m, s = apply_operators(Config(u, d).combined(L), create, annih)
        assert sg[b] == s
        if s:
            assert Config(int(nu[b]), int(nd[b])) == Config.from_combined(m, L)
