"""Hubbard and ab initio Hamiltonians, FCIDUMP I/O and local energies.

Two-electron integrals are stored in chemist notation ``h2[i, j, k, l] = (ij|kl)``
with the full 8-fold symmetry expanded, so

    H = sum_{ij,s} h1_ij c+_is c_js + 1/2 sum_{ijkl,st} (ij|kl) c+_is c+_kt c_lt c_js + e_core.
"""

from __future__ import annotations

import io
import logging
import math
import re
import warnings
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .fock import Config, Excitation, apply_excitation, between_sign, mask_bits, popcount

log = logging.getLogger(__name__)

OPEN, PERIODIC = "open", "periodic"


# ---------------------------------------------------------------------------
# Hubbard


@dataclass(frozen=True)
class HubbardSpec:
    dims: tuple[int, ...]
    t: float = 1.0
    U: float = 0.0
    boundary: tuple[str, ...] = (OPEN, OPEN)

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        b = self.boundary
        if isinstance(b, str):
            b = (b,) * len(self.dims)
        object.__setattr__(self, "boundary", tuple(b))
        if len(self.boundary) != len(self.dims):
            raise ValueError("need one boundary condition per lattice axis")
        if any(x not in (OPEN, PERIODIC) for x in self.boundary):
            raise ValueError(f"boundary must be 'open' or 'periodic', got {self.boundary}")
        if not (math.isfinite(self.t) and math.isfinite(self.U)):
            raise ValueError("t and U must be finite")

    @property
    def L(self) -> int:
        return int(np.prod(self.dims))

    def site(self, coords) -> int:
        return int(np.ravel_multi_index(tuple(coords), self.dims))

    def coords(self, site: int) -> tuple[int, ...]:
        return tuple(int(c) for c in np.unravel_index(site, self.dims))

    def neighbor_slots(self) -> np.ndarray:
        """(L, z) neighbor table, -1 where the step leaves an open lattice.

        One +/- slot per axis of length > 1, so a periodic axis of length 2
        lists the same neighbor twice (a doubled bond).
        """
        axes = [a for a, n in enumerate(self.dims) if n > 1]
        table = np.full((self.L, 2 * len(axes)), -1, dtype=np.int64)
        for s in range(self.L):
            c = self.coords(s)
            for k, a in enumerate(axes):
                for j, step in enumerate((1, -1)):
                    x = c[a] + step
                    if not 0 <= x < self.dims[a]:
                        if self.boundary[a] == OPEN:
                            continue
                        x %= self.dims[a]
                    nc = list(c)
                    nc[a] = x
                    table[s, 2 * k + j] = self.site(nc)
        return table

    def bonds(self) -> list[tuple[int, int, int]]:
        """Undirected bonds ``(i, j, multiplicity)`` with ``i < j``."""
        count: dict[tuple[int, int], int] = {}
        table = self.neighbor_slots()
        for s in range(self.L):
            for k in range(0, table.shape[1], 2):  # "+1" slots only
                j = table[s, k]
                if j < 0 or j == s:
                    continue
                key = (min(s, j), max(s, j))
                count[key] = count.get(key, 0) + 1
        return [(i, j, m) for (i, j), m in sorted(count.items())]

    def hopping_matrix(self) -> np.ndarray:
        h = np.zeros((self.L, self.L))
        for i, j, m in self.bonds():
            h[i, j] -= self.t * m
            h[j, i] -= self.t * m
        return h

    def graph_distances(self) -> np.ndarray:
        table = self.neighbor_slots()
        D = np.full((self.L, self.L), -1, dtype=np.int64)
        for src in range(self.L):
            D[src, src] = 0
            queue = deque([src])
            while queue:
                u = queue.popleft()
                for v in table[u]:
                    if v >= 0 and D[src, v] < 0:
                        D[src, v] = D[src, u] + 1
                        queue.append(v)
        return D

    def positions(self) -> np.ndarray:
        """Lattice coordinates padded to 3D, unit lattice constant."""
        pos = np.zeros((self.L, 3))
        for s in range(self.L):
            c = self.coords(s)
            pos[s, : len(c)] = c
        return pos


class HubbardHamiltonian:
    kind = "hubbard"

    def __init__(self, spec: HubbardSpec):
        self.spec = spec
        self.L = spec.L
        self.U = float(spec.U)
        self.e_core = 0.0
        self.h1 = spec.hopping_matrix()
        self.bond_list = spec.bonds()

    def __repr__(self):
        return f"HubbardHamiltonian({self.spec})"

    def to_abinitio(self) -> "AbInitioHamiltonian":
        L = self.L
        h2 = np.zeros((L, L, L, L))
        for i in range(L):
            h2[i, i, i, i] = self.U
        return AbInitioHamiltonian(h1=self.h1.copy(), h2=h2, e_core=0.0)


def build_hubbard(spec: HubbardSpec) -> HubbardHamiltonian:
    return HubbardHamiltonian(spec)


# ---------------------------------------------------------------------------
# ab initio


class FcidumpError(ValueError):
    pass


@dataclass
class AbInitioHamiltonian:
    h1: np.ndarray
    h2: np.ndarray
    e_core: float = 0.0
    nelec: int | None = None
    ms2: int = 0
    kind: str = field(default="abinitio", init=False)

    def __post_init__(self):
        self.h1 = np.asarray(self.h1, dtype=float)
        self.h2 = np.asarray(self.h2, dtype=float)
        L = self.h1.shape[0]
        if self.h1.shape != (L, L) or self.h2.shape != (L,) * 4:
            raise ValueError("integral shapes inconsistent")
        if not (np.all(np.isfinite(self.h1)) and np.all(np.isfinite(self.h2)) and math.isfinite(self.e_core)):
            raise ValueError("integrals must be finite")

    @property
    def L(self) -> int:
        return self.h1.shape[0]

    @cached_property
    def screening(self) -> "ScreeningIndex":
        return ScreeningIndex.build(self)

    def check_symmetry(self, atol: float = 1e-12) -> bool:
        h2 = self.h2
        perms = [(1, 0, 2, 3), (0, 1, 3, 2), (2, 3, 0, 1)]
        return bool(np.allclose(self.h1, self.h1.T, atol=atol)
                    and all(np.allclose(h2, h2.transpose(p), atol=atol) for p in perms))


def _symmetric_assign(h2: np.ndarray, i: int, j: int, k: int, l: int, v: float) -> None:
    for a, b, c, d in ((i, j, k, l), (j, i, k, l), (i, j, l, k), (j, i, l, k),
                       (k, l, i, j), (l, k, i, j), (k, l, j, i), (l, k, j, i)):
        h2[a, b, c, d] = v


_NAMELIST_END = re.compile(r"(&END|/)\s*$", re.IGNORECASE)


def _parse_namelist(text: str, first_line: int) -> dict[str, list[str]]:
    body = re.sub(r"^\s*&FCI", "", text, flags=re.IGNORECASE)
    body = re.sub(r"(&END|/)\s*$", "", body.strip(), flags=re.IGNORECASE)
    out: dict[str, list[str]] = {}
    for m in re.finditer(r"([A-Za-z_]\w*)\s*=\s*([^=]*?)(?=,?\s*[A-Za-z_]\w*\s*=|$)", body, flags=re.S):
        vals = [v for v in re.split(r"[,\s]+", m.group(2).strip()) if v]
        out[m.group(1).upper()] = vals
    if "NORB" not in out:
        raise FcidumpError(f"line {first_line}: namelist lacks NORB")
    return out


def parse_fcidump(source) -> AbInitioHamiltonian:
    """Read an FCIDUMP from a path, text stream or string contents."""
    if isinstance(source, (str, Path)) and "\n" not in str(source) and Path(source).exists():
        with open(source) as fh:
            return parse_fcidump(fh)
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and not source.lstrip().upper().startswith("&FCI")):
        raise FcidumpError(f"no such file: {source}")
    if isinstance(source, str):
        source = io.StringIO(source)
    lines = source.read().splitlines()

    header, n = [], 0
    if not lines or not lines[0].lstrip().upper().startswith("&FCI"):
        raise FcidumpError("line 1: expected '&FCI' namelist")
    while n < len(lines):
        header.append(lines[n])
        n += 1
        if _NAMELIST_END.search(lines[n - 1].strip()):
            break
    else:
        raise FcidumpError(f"line {n}: unterminated namelist")
    nml = _parse_namelist(" ".join(header), 1)
    try:
        norb = int(nml["NORB"][0])
        nelec = int(nml["NELEC"][0]) if "NELEC" in nml else None
        ms2 = int(nml["MS2"][0]) if "MS2" in nml else 0
    except (ValueError, IndexError) as exc:
        raise FcidumpError(f"line 1: malformed namelist value ({exc})") from None
    if norb < 1:
        raise FcidumpError("line 1: NORB must be positive")

    h1 = np.zeros((norb, norb))
    h2 = np.zeros((norb,) * 4)
    e_core = 0.0
    for lineno, line in enumerate(lines[n:], start=n + 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise FcidumpError(f"line {lineno}: expected 'value i j k l', got {line!r}")
        try:
            val = float(parts[0].replace("D", "E").replace("d", "e"))
            i, j, k, l = (int(x) for x in parts[1:])
        except ValueError:
            raise FcidumpError(f"line {lineno}: non-numeric field in {line!r}") from None
        if max(i, j, k, l) > norb or min(i, j, k, l) < 0:
            raise FcidumpError(f"line {lineno}: index out of range 0..{norb}")
        if i == j == k == l == 0:
            e_core = val
        elif k == 0 and l == 0:
            if i == 0 or j == 0:
                raise FcidumpError(f"line {lineno}: one-body entry needs i, j > 0")
            h1[i - 1, j - 1] = h1[j - 1, i - 1] = val
        elif min(i, j, k, l) == 0:
            # orbital energies (i 0 0 0) and other partial entries carry no integrals
            continue
        else:
            _symmetric_assign(h2, i - 1, j - 1, k - 1, l - 1, val)
    return AbInitioHamiltonian(h1=h1, h2=h2, e_core=e_core, nelec=nelec, ms2=ms2)


def write_fcidump(H: AbInitioHamiltonian, dest=None, tol: float = 0.0) -> str | None:
    """Write canonical-index integrals with 17 significant digits.

    Returns the text when ``dest`` is None.
    """
    L = H.L
    nelec = H.nelec if H.nelec is not None else 0
    out = [f"&FCI NORB={L},NELEC={nelec},MS2={H.ms2},", " ORBSYM=" + ",".join(["1"] * L) + ",", " ISYM=1,", "&END"]
    fmt = "{:.16e} {} {} {} {}"
    for i in range(L):
        for j in range(i + 1):
            ij = i * (i + 1) // 2 + j
            for k in range(L):
                for l in range(k + 1):
                    if k * (k + 1) // 2 + l > ij:
                        continue
                    v = H.h2[i, j, k, l]
                    if abs(v) > tol:
                        out.append(fmt.format(v, i + 1, j + 1, k + 1, l + 1))
    for i in range(L):
        for j in range(i + 1):
            v = H.h1[i, j]
            if abs(v) > tol:
                out.append(fmt.format(v, i + 1, j + 1, 0, 0))
    out.append(fmt.format(H.e_core, 0, 0, 0, 0))
    text = "\n".join(out) + "\n"
    if dest is None:
        return text
    if isinstance(dest, (str, Path)):
        Path(dest).write_text(text)
    else:
        dest.write(text)
    return None


@dataclass(frozen=True)
class ExchangeMatrix:
    K: np.ndarray


def exchange_matrix(H) -> ExchangeMatrix:
    """K_uv = (uv|uv)."""
    if H.kind == "hubbard":
        H = H.to_abinitio()
    L = H.L
    idx = np.arange(L)
    K = H.h2[idx[:, None], idx[None, :], idx[:, None], idx[None, :]].copy()
    off = K - np.diag(np.diag(K))
    if np.any(off.max(axis=1) > np.diag(K)):
        warnings.warn("exchange matrix has off-diagonal entries above the diagonal; basis may be delocalized")
    return ExchangeMatrix(K)


# ---------------------------------------------------------------------------
# connected configurations


@dataclass
class PairList:
    R: np.ndarray
    S: np.ndarray
    elem: np.ndarray
    mag: np.ndarray  # non-increasing

    def cutoff(self, threshold: float) -> int:
        if threshold <= 0:
            return len(self.mag)
        # first index with |elem| < threshold
        return int(np.searchsorted(-self.mag, -threshold, side="right"))


@dataclass
class ScreeningIndex:
    """Magnitude-sorted antisymmetrized double-excitation amplitudes.

    ``same[P, Q]`` (P < Q spatial, both electrons of one spin) lists target
    pairs R < S with element (RP|SQ) - (RQ|SP); ``opposite[P, Q]`` (P up,
    Q down) lists all (R up, S down) with element (RP|SQ).  Exact zeros are
    dropped.
    """

    same: dict[tuple[int, int], PairList]
    opposite: dict[tuple[int, int], PairList]

    @classmethod
    def build(cls, H: AbInitioHamiltonian) -> "ScreeningIndex":
        L, h2 = H.L, H.h2
        RR, SS = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
        lower = RR < SS
        same, opposite = {}, {}
        for P in range(L):
            for Q in range(L):
                el = h2[:, P, :, Q]  # (R P | S Q)
                opposite[P, Q] = _sorted_pairs(RR.ravel(), SS.ravel(), el.ravel())
                if P < Q:
                    anti = h2[:, P, :, Q] - h2[:, Q, :, P]  # (RP|SQ) - (RQ|SP)
                    same[P, Q] = _sorted_pairs(RR[lower], SS[lower], anti[lower])
        return cls(same, opposite)


def _sorted_pairs(R, S, elem) -> PairList:
    keep = elem != 0.0
    R, S, elem = R[keep], S[keep], elem[keep]
    order = np.lexsort((S, R, -np.abs(elem)))
    elem = elem[order]
    return PairList(R[order].astype(np.int64), S[order].astype(np.int64), elem, np.abs(elem))


def _hubbard_connected(H: HubbardHamiltonian, cfg: Config) -> Iterator[tuple[Config, float]]:
    L = H.L
    ndouble = (cfg.up & cfg.dn).bit_count()
    yield cfg, H.U * ndouble
    for spin in (0, 1):
        m = cfg.up if spin == 0 else cfg.dn
        for i, j, mult in H.bond_list:
            for a, b in ((i, j), (j, i)):
                if m >> a & 1 and not m >> b & 1:
                    p, r = spin * L + a, spin * L + b
                    new, sign = apply_excitation(cfg, Excitation.single(p, r), L)
                    yield new, -H.spec.t * mult * sign


def _spin_split(occ_so: list[int], L: int):
    return [p for p in occ_so if p < L], [p - L for p in occ_so if p >= L]


def _single_matrices(H: AbInitioHamiltonian, n_up: np.ndarray, n_dn: np.ndarray):
    """Occupation-dressed one-body elements F^s_rp for each spin."""
    h2 = H.h2
    ntot = n_up + n_dn
    J = np.einsum("rpqq,q->rp", h2, ntot)
    F_up = H.h1 + J - np.einsum("rqqp,q->rp", h2, n_up)
    F_dn = H.h1 + J - np.einsum("rqqp,q->rp", h2, n_dn)
    return F_up, F_dn


def diagonal_element(H: AbInitioHamiltonian, cfg: Config) -> float:
    L = H.L
    up = [s for s in range(L) if cfg.up >> s & 1]
    dn = [s for s in range(L) if cfg.dn >> s & 1]
    h1, h2 = H.h1, H.h2
    terms = [H.e_core]
    terms += [h1[p, p] for p in up + dn]
    allocc = up + dn
    for a, P in enumerate(allocc):
        for b, Q in enumerate(allocc):
            if a == b:
                continue
            same = (a < len(up)) == (b < len(up))
            v = h2[P, P, Q, Q] - (h2[P, Q, Q, P] if same else 0.0)
            terms.append(0.5 * v)
    return math.fsum(terms)


def _abinitio_connected(H: AbInitioHamiltonian, cfg: Config, threshold: float,
                        screened: bool) -> Iterator[tuple[Config, float]]:
    L = H.L
    yield cfg, diagonal_element(H, cfg)

    nb_up = np.array([cfg.up >> s & 1 for s in range(L)], dtype=float)
    nb_dn = np.array([cfg.dn >> s & 1 for s in range(L)], dtype=float)
    F = _single_matrices(H, nb_up, nb_dn)
    for spin, m in ((0, cfg.up), (1, cfg.dn)):
        occ = [s for s in range(L) if m >> s & 1]
        vir = [s for s in range(L) if not m >> s & 1]
        for P in occ:
            for R in vir:
                v = F[spin][R, P]
                if v == 0.0:
                    continue
                new, sign = apply_excitation(cfg, Excitation.single(spin * L + P, spin * L + R), L)
                yield new, sign * v

    up_occ = [s for s in range(L) if cfg.up >> s & 1]
    dn_occ = [s for s in range(L) if cfg.dn >> s & 1]
    up_vir = [s for s in range(L) if not cfg.up >> s & 1]
    dn_vir = [s for s in range(L) if not cfg.dn >> s & 1]
    if screened:
        yield from _doubles_screened(H, cfg, threshold, up_occ, dn_occ)
    else:
        yield from _doubles_direct(H, cfg, up_occ, dn_occ, up_vir, dn_vir)


def _emit_double(cfg, L, p, q, r, s, v):
    new, sign = apply_excitation(cfg, Excitation.double(p, q, r, s), L)
    return new, sign * v


def _doubles_direct(H, cfg, up_occ, dn_occ, up_vir, dn_vir):
    L, h2 = H.L, H.h2
    for spin, occ, vir in ((0, up_occ, up_vir), (1, dn_occ, dn_vir)):
        off = spin * L
        for a, P in enumerate(occ):
            for Q in occ[a + 1:]:
                for b, R in enumerate(vir):
                    for S in vir[b + 1:]:
                        v = h2[R, P, S, Q] - h2[R, Q, S, P]
                        if v != 0.0:
                            yield _emit_double(cfg, L, off + P, off + Q, off + R, off + S, v)
    for P in up_occ:
        for Q in dn_occ:
            for R in up_vir:
                for S in dn_vir:
                    v = h2[R, P, S, Q]
                    if v != 0.0:
                        yield _emit_double(cfg, L, P, L + Q, R, L + S, v)


def _doubles_screened(H, cfg, threshold, up_occ, dn_occ):
    L = H.L
    idx = H.screening
    free_up = ~mask_bits(np.array([cfg.up]), L)[0]
    free_dn = ~mask_bits(np.array([cfg.dn]), L)[0]
    for spin, occ, free in ((0, up_occ, free_up), (1, dn_occ, free_dn)):
        off = spin * L
        for a, P in enumerate(occ):
            for Q in occ[a + 1:]:
                pl = idx.same[P, Q]
                n = pl.cutoff(threshold)
                R, S, el = pl.R[:n], pl.S[:n], pl.elem[:n]
                ok = free[R] & free[S]
                for r, s, v in zip(R[ok], S[ok], el[ok]):
                    yield _emit_double(cfg, L, off + P, off + Q, off + int(r), off + int(s), float(v))
    for P in up_occ:
        for Q in dn_occ:
            pl = idx.opposite[P, Q]
            n = pl.cutoff(threshold)
            R, S, el = pl.R[:n], pl.S[:n], pl.elem[:n]
            ok = free_up[R] & free_dn[S]
            for r, s, v in zip(R[ok], S[ok], el[ok]):
                yield _emit_double(cfg, L, P, L + Q, int(r), L + int(s), float(v))


def connected_elements(H, cfg: Config, threshold: float = 0.0,
                       screened: bool = True) -> Iterator[tuple[Config, float]]:
    """Yield ``(n', <n'|H|n>)``: the diagonal first, then singles and doubles.

    With ``threshold > 0`` double excitations whose antisymmetrized element
    magnitude (before the parity sign) falls below it are dropped.
    ``screened=False`` enumerates doubles directly over virtual pairs and
    ignores the threshold.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    if H.kind == "hubbard":
        return _hubbard_connected(H, cfg)
    return _abinitio_connected(H, cfg, threshold, screened)


def local_energy(H, cfg: Config, amp: Callable[[Config], tuple[int, float]],
                 threshold: float = 0.0, screened: bool = True) -> float:
    """E_loc(n) = sum_n' <n|H|n'> psi(n')/psi(n) with ratios taken in log space.

    Returns NaN when psi(n) = 0.
    """
    s0, l0 = amp(cfg)
    if s0 == 0:
        return math.nan
    terms = []
    for new, el in connected_elements(H, cfg, threshold, screened):
        if new == cfg:
            terms.append(el)
            continue
        s, l = amp(new)
        if s != 0:
            terms.append(el * s * s0 * math.exp(l - l0))
    return math.fsum(terms)


# ---------------------------------------------------------------------------
# batched local energies


def connected_batch(H, up: np.ndarray, dn: np.ndarray, threshold: float = 0.0):
    """Off-diagonal connections for a batch of configurations.

    Returns ``(diag, src, new_up, new_dn, elem)`` where ``diag`` has one entry
    per input configuration and the remaining arrays list off-diagonal
    connections with ``src`` indexing the input batch.
    """
    up = np.asarray(up, dtype=np.int64)
    dn = np.asarray(dn, dtype=np.int64)
    if H.kind == "hubbard":
        return _hubbard_batch(H, up, dn)
    diag = np.empty(len(up))
    src, nu, nd, el = [], [], [], []
    for b, (u, d) in enumerate(zip(up.tolist(), dn.tolist())):
        cfg = Config(u, d)
        it = connected_elements(H, cfg, threshold)
        diag[b] = next(it)[1]
        for new, v in it:
            src.append(b)
            nu.append(new.up)
            nd.append(new.dn)
            el.append(v)
    return (diag, np.array(src, dtype=np.int64), np.array(nu, dtype=np.int64),
            np.array(nd, dtype=np.int64), np.array(el, dtype=float))


def _hubbard_batch(H: HubbardHamiltonian, up, dn):
    diag = H.U * popcount(up & dn).astype(float)
    src, nu, nd, el = [], [], [], []
    ar = np.arange(len(up))
    for spin in (0, 1):
        m = up if spin == 0 else dn
        for i, j, mult in H.bond_list:
            for a, b in ((i, j), (j, i)):
                ok = ((m >> a) & 1 == 1) & ((m >> b) & 1 == 0)
                if not ok.any():
                    continue
                mm = m[ok]
                new = mm ^ ((1 << a) | (1 << b))
                sign = between_sign(mm, a, b)
                src.append(ar[ok])
                if spin == 0:
                    nu.append(new)
                    nd.append(dn[ok])
                else:
                    nu.append(up[ok])
                    nd.append(new)
                el.append(-H.spec.t * mult * sign)
    if not src:
        z = np.zeros(0, dtype=np.int64)
        return diag, z, z, z, np.zeros(0)
    return diag, np.concatenate(src), np.concatenate(nu), np.concatenate(nd), np.concatenate(el).astype(float)


def local_energies(H, up, dn, logamp, threshold: float = 0.0, logpsi=None) -> np.ndarray:
    """Vectorized local energies.

    ``logamp(up, dn) -> (sign, log|psi|)`` evaluates amplitude arrays.
    Entries with zero amplitude come back as NaN.
    """
    up = np.asarray(up, dtype=np.int64)
    dn = np.asarray(dn, dtype=np.int64)
    s0, l0 = logpsi if logpsi is not None else logamp(up, dn)
    diag, src, nu, nd, el = connected_batch(H, up, dn, threshold)
    eloc = diag.copy()
    if len(src):
        s, l = logamp(nu, nd)
        with np.errstate(invalid="ignore", over="ignore"):
            ratio = np.where(s != 0, s * s0[src] * np.exp(l - l0[src]), 0.0)
        eloc += np.bincount(src, weights=el * ratio, minlength=len(up))
    eloc[s0 == 0] = np.nan
    return eloc
