"""Second-quantized configurations over spatial sites with spin.

Spin-orbital index convention: ``p = spin * L + site`` with the up block
first.  A configuration is stored as two bitmasks; the combined mask
``up | (dn << L)`` is the occupation string in canonical order, and
amplitudes are coefficients of ``c+_{p1} c+_{p2} ... |0>`` with
``p1 < p2 < ...``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb
from typing import Sequence

import numpy as np

UP, DN = 0, 1
RESTRICTED, GENERALIZED = "restricted", "generalized"
MAX_SITES = 63  # int64 mask arrays; bitwise_count is sign-agnostic


class SectorTooLarge(MemoryError):
    """Raised when a sector enumeration would exceed the caller's budget."""


class InvalidExcitation(ValueError):
    pass


@dataclass(frozen=True)
class SystemSpec:
    L: int
    Nup: int
    Ndn: int
    spin_mode: str = RESTRICTED

    def __post_init__(self):
        if not 1 <= self.L <= MAX_SITES:
            raise ValueError(f"L must be in 1..{MAX_SITES}, got {self.L}")
        if not (0 <= self.Nup <= self.L and 0 <= self.Ndn <= self.L):
            raise ValueError(f"electron counts ({self.Nup}, {self.Ndn}) out of range for L={self.L}")
        if self.spin_mode not in (RESTRICTED, GENERALIZED):
            raise ValueError(f"unknown spin_mode {self.spin_mode!r}")

    @property
    def N(self) -> int:
        return self.Nup + self.Ndn

    @property
    def sector_size(self) -> int:
        return comb(self.L, self.Nup) * comb(self.L, self.Ndn)


@dataclass(frozen=True, order=True)
class Config:
    """Occupation of L sites as (up bitmask, down bitmask)."""

    up: int
    dn: int

    def combined(self, L: int) -> int:
        return self.up | (self.dn << L)

    @classmethod
    def from_combined(cls, mask: int, L: int) -> "Config":
        return cls(mask & ((1 << L) - 1), mask >> L)

    @classmethod
    def from_occupations(cls, up_sites: Sequence[int], dn_sites: Sequence[int]) -> "Config":
        up = dn = 0
        for s in up_sites:
            up |= 1 << s
        for s in dn_sites:
            dn |= 1 << s
        return cls(up, dn)

    def states(self, L: int) -> np.ndarray:
        """Site occupation states n_v in {0,1,2,3} as an int array of length L."""
        return np.array([site_state(self, v) for v in range(L)], dtype=np.int64)

    def occupied(self, L: int) -> list[int]:
        """Occupied spin-orbitals in canonical ascending order."""
        m = self.combined(L)
        return [p for p in range(2 * L) if m >> p & 1]


@dataclass(frozen=True)
class Excitation:
    """Operator string ``c+_{create[0]} c+_{create[1]} c_{annihilate[0]} c_{annihilate[1]}``.

    Operators act right to left, so the last annihilator is applied first.
    A single hop ``p -> r`` is ``Excitation(create=(r,), annihilate=(p,))``.
    """

    create: tuple[int, ...]
    annihilate: tuple[int, ...]

    @classmethod
    def single(cls, src: int, dst: int) -> "Excitation":
        return cls((dst,), (src,))

    @classmethod
    def double(cls, p: int, q: int, r: int, s: int) -> "Excitation":
        """Move electrons p, q to r, s: the operator ``c+_r c+_s c_q c_p``."""
        return cls((r, s), (q, p))

    def inverse(self) -> "Excitation":
        return Excitation(tuple(reversed(self.annihilate)), tuple(reversed(self.create)))


def spin_orbital_index(site: int, spin: int, L: int) -> int:
    if not 0 <= site < L:
        raise IndexError(f"site {site} out of range for L={L}")
    if spin not in (UP, DN):
        raise ValueError(f"spin must be 0 (up) or 1 (dn), got {spin}")
    return spin * L + site


def site_state(cfg: Config, site: int) -> int:
    return (cfg.up >> site & 1) + 2 * (cfg.dn >> site & 1)


def _sign_below(mask: int, p: int) -> int:
    return -1 if (mask & ((1 << p) - 1)).bit_count() & 1 else 1


def apply_operators(mask: int, create: Sequence[int], annihilate: Sequence[int]) -> tuple[int, int]:
    """Apply ``c+_{create...} c_{annihilate...}`` to a combined occupation mask.

    Returns ``(new_mask, sign)``; ``sign == 0`` when the string annihilates
    the state.
    """
    sign = 1
    for p in reversed(annihilate):
        if not mask >> p & 1:
            return mask, 0
        sign *= _sign_below(mask, p)
        mask &= ~(1 << p)
    for p in reversed(create):
        if mask >> p & 1:
            return mask, 0
        sign *= _sign_below(mask, p)
        mask |= 1 << p
    return mask, sign


def apply_excitation(cfg: Config, ex: Excitation, L: int) -> tuple[Config, int]:
    """Return the target configuration and fermionic parity of ``ex`` acting on ``cfg``."""
    if len(ex.create) != len(ex.annihilate):
        raise InvalidExcitation("excitation must conserve particle number")
    mask, sign = apply_operators(cfg.combined(L), ex.create, ex.annihilate)
    if sign == 0:
        raise InvalidExcitation(f"{ex} is not valid for {cfg}")
    new = Config.from_combined(mask, L)
    if new.up.bit_count() != cfg.up.bit_count():
        raise InvalidExcitation("excitation changes the spin sector")
    return new, sign


def _masks(L: int, n: int) -> list[int]:
    out = []
    for occ in combinations(range(L), n):
        m = 0
        for s in occ:
            m |= 1 << s
        out.append(m)
    return sorted(out)


def enumerate_sector(spec: SystemSpec, max_configs: int = 5_000_000) -> list[Config]:
    """All configurations of the (Nup, Ndn) sector in lexicographic (up, dn) order."""
    if spec.sector_size > max_configs:
        raise SectorTooLarge(f"sector has {spec.sector_size} configurations (budget {max_configs})")
    ups, dns = _masks(spec.L, spec.Nup), _masks(spec.L, spec.Ndn)
    return [Config(u, d) for u in ups for d in dns]


def sector_arrays(spec: SystemSpec, max_configs: int = 5_000_000) -> tuple[np.ndarray, np.ndarray]:
    """Same ordering as :func:`enumerate_sector`, as int64 mask arrays."""
    if spec.sector_size > max_configs:
        raise SectorTooLarge(f"sector has {spec.sector_size} configurations (budget {max_configs})")
    ups = np.array(_masks(spec.L, spec.Nup), dtype=np.int64)
    dns = np.array(_masks(spec.L, spec.Ndn), dtype=np.int64)
    return np.repeat(ups, len(dns)), np.tile(dns, len(ups))


# ---------------------------------------------------------------------------
# vectorized helpers over arrays of masks

def popcount(x: np.ndarray) -> np.ndarray:
    return np.bitwise_count(np.asarray(x, dtype=np.int64)).astype(np.int64)


def mask_bits(masks: np.ndarray, L: int) -> np.ndarray:
    """(B,) masks -> (B, L) bool occupations."""
    masks = np.asarray(masks, dtype=np.int64)
    return (masks[:, None] >> np.arange(L, dtype=np.int64)) & 1 == 1


def bits_to_mask(bits: np.ndarray) -> np.ndarray:
    L = bits.shape[-1]
    return (bits.astype(np.int64) << np.arange(L, dtype=np.int64)).sum(axis=-1)


def states_array(up: np.ndarray, dn: np.ndarray, L: int) -> np.ndarray:
    """(B,) up/dn masks -> (B, L) site states in {0,1,2,3}."""
    return mask_bits(up, L).astype(np.int64) + 2 * mask_bits(dn, L).astype(np.int64)


def occupied_indices(masks: np.ndarray, L: int, n: int) -> np.ndarray:
    """(B,) masks with exactly n bits -> (B, n) ascending occupied sites."""
    bits = mask_bits(masks, L)
    if n == 0:
        return np.zeros((len(bits), 0), dtype=np.int64)
    # stable argsort on "not occupied" puts occupied sites first, ascending
    return np.argsort(~bits, axis=1, kind="stable")[:, :n].astype(np.int64)


def between_sign(masks: np.ndarray, i: int, j: int) -> np.ndarray:
    """(-1)^(popcount of bits strictly between i and j) for a same-block hop."""
    lo, hi = min(i, j), max(i, j)
    between = ((1 << hi) - 1) & ~((1 << (lo + 1)) - 1)
    return 1 - 2 * (popcount(np.asarray(masks) & between) & 1)


def apply_operators_batch(up: np.ndarray, dn: np.ndarray, L: int, create: Sequence[int],
                          annihilate: Sequence[int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`apply_operators` on split masks; returns (up, dn, sign)."""
    up = np.array(up, dtype=np.int64)
    dn = np.array(dn, dtype=np.int64)
    sign = np.ones(len(up), dtype=np.int64)
    one = np.int64(1)
    ops = [(p, False) for p in reversed(annihilate)] + [(p, True) for p in reversed(create)]
    for p, dag in ops:
        spin, site = divmod(p, L)
        bit = one << np.int64(site)
        m = up if spin == 0 else dn
        occ = (m & bit) != 0
        sign = np.where(occ != dag, sign, 0)
        below = popcount(m & (bit - 1))
        if spin == 1:
            below = below + popcount(up)
        sign = sign * (1 - 2 * (below & 1))
        if spin == 0:
            up = up ^ bit
        else:
            dn = dn ^ bit
    return up, dn, sign
