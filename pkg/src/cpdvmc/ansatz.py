"""CP-decomposed backflow determinant.

Orbital ``i`` evaluated on row ``mu`` (a site in restricted mode, a
spin-orbital in generalized mode) for configuration ``n`` is

    phi[mu, i](n) = sum_m prod_v eps[mu, i, n(x[mu, v]), v, m]

where ``x`` is the L x K lookup table and ``n(site)`` the 4-valued site
occupation.  The amplitude is the determinant of the occupied rows,
factorized into up and down blocks in restricted mode.

Parameter blocks are stored as arrays of shape (rows, orbitals, 4, K, M);
restricted mode keeps an up block and a down block, generalized mode a single
(2L, N, 4, K, M) block.  The flat parameter vector is the concatenation of
the C-ordered blocks.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .fock import (GENERALIZED, RESTRICTED, Config, Excitation, SystemSpec, apply_excitation,
                   occupied_indices, states_array)
from .hamiltonians import ExchangeMatrix, HubbardHamiltonian, HubbardSpec
from .hf import HFOrbitals

log = logging.getLogger(__name__)

N_STATES = 4
DIV_GUARD = 1e-300
CHUNK = 4096


class SingularAmplitude(ArithmeticError):
    pass


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# lookup


@dataclass(frozen=True)
class LookupTable:
    x: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.int64)
        object.__setattr__(self, "x", x)
        L, K = x.shape
        if K > L:
            raise ValueError("K cannot exceed L")
        if np.any(x[:, 0] != np.arange(L)):
            raise ValueError("each lookup row must start with its own site")
        if any(len(set(row)) != K for row in x.tolist()) or x.min() < 0 or x.max() >= L:
            raise ValueError("lookup rows must be duplicate-free site indices")

    @property
    def L(self) -> int:
        return self.x.shape[0]

    @property
    def K(self) -> int:
        return self.x.shape[1]

    @classmethod
    def full(cls, L: int) -> "LookupTable":
        return cls(np.array([[mu] + [v for v in range(L) if v != mu] for mu in range(L)]))

    def positions(self) -> np.ndarray:
        """(L, L) map site row mu, site v -> slot index in row mu, or -1."""
        pos = np.full((self.L, self.L), -1, dtype=np.int64)
        for mu in range(self.L):
            pos[mu, self.x[mu]] = np.arange(self.K)
        return pos


def build_lookup(source, K: int) -> LookupTable:
    """Each row: the site itself, then its K-1 strongest partners.

    Partners rank by descending exchange integral for an ExchangeMatrix,
    by ascending lattice graph distance for a Hubbard lattice.  Ties go to
    the lower site index.
    """
    if isinstance(source, HubbardHamiltonian):
        source = source.spec
    if isinstance(source, HubbardSpec):
        D = source.graph_distances().astype(float)
        D[D < 0] = np.inf
        score = D
    elif isinstance(source, ExchangeMatrix):
        score = -np.asarray(source.K, dtype=float)
    else:
        raise TypeError(f"cannot build a lookup table from {type(source).__name__}")
    L = score.shape[0]
    if not 1 <= K <= L:
        raise ValueError(f"K must be in 1..{L}")
    rows = []
    for mu in range(L):
        others = [v for v in range(L) if v != mu]
        others.sort(key=lambda v: (score[mu, v], v))
        rows.append([mu] + others[: K - 1])
    return LookupTable(np.array(rows, dtype=np.int64))


# ---------------------------------------------------------------------------
# parameters


@dataclass
class CpdParams:
    spec: SystemSpec
    M: int
    lookup: LookupTable
    blocks: list[np.ndarray]
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.blocks = [np.ascontiguousarray(b, dtype=float) for b in self.blocks]
        for b, shape in zip(self.blocks, self.block_shapes(self.spec, self.K, self.M), strict=True):
            if b.shape != shape:
                raise ValueError(f"parameter block shape {b.shape} != expected {shape}")

    @property
    def L(self) -> int:
        return self.spec.L

    @property
    def K(self) -> int:
        return self.lookup.K

    @property
    def generalized(self) -> bool:
        return self.spec.spin_mode == GENERALIZED

    @staticmethod
    def block_shapes(spec: SystemSpec, K: int, M: int) -> list[tuple[int, ...]]:
        L = spec.L
        if spec.spin_mode == GENERALIZED:
            return [(2 * L, spec.N, N_STATES, K, M)]
        return [(L, spec.Nup, N_STATES, K, M), (L, spec.Ndn, N_STATES, K, M)]

    @property
    def n_params(self) -> int:
        return sum(b.size for b in self.blocks)

    @property
    def offsets(self) -> list[int]:
        return list(np.cumsum([0] + [b.size for b in self.blocks[:-1]]))

    def flat(self) -> np.ndarray:
        return np.concatenate([b.ravel() for b in self.blocks])

    def with_flat(self, theta: np.ndarray) -> "CpdParams":
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_params,):
            raise ValueError("flat parameter vector has wrong length")
        out, start = [], 0
        for b in self.blocks:
            out.append(theta[start:start + b.size].reshape(b.shape).copy())
            start += b.size
        return CpdParams(self.spec, self.M, self.lookup, out)

    def copy(self) -> "CpdParams":
        return CpdParams(self.spec, self.M, self.lookup, [b.copy() for b in self.blocks])

    def gathered(self, k: int) -> np.ndarray:
        """Block k reordered to (rows, state, slot, orbital, m) for row gathers."""
        key = ("gathered", k)
        if key not in self._cache:
            self._cache[key] = np.ascontiguousarray(self.blocks[k].transpose(0, 2, 3, 1, 4))
        return self._cache[key]

    def block_rows(self, up: np.ndarray, dn: np.ndarray) -> list[np.ndarray]:
        """Occupied rows (canonical ascending order) for each block."""
        L, s = self.L, self.spec
        ro_up = occupied_indices(up, L, s.Nup)
        ro_dn = occupied_indices(dn, L, s.Ndn)
        if self.generalized:
            return [np.concatenate([ro_up, ro_dn + L], axis=1)]
        return [ro_up, ro_dn]


def init_from_hf(hf: HFOrbitals, spec: SystemSpec, M: int = 1, K: int | None = None,
                 lookup: LookupTable | None = None, sigma: float = 0.01, seed: int = 0) -> CpdParams:
    """Seed the tensor so that it spans the given determinant exactly.

    Slot 0 (the row's own site) of component 0 holds the HF coefficient,
    other slots of component 0 hold 1, higher components are 0; i.i.d.
    normal noise of width ``sigma`` is added on top.
    """
    if lookup is None:
        lookup = LookupTable.full(spec.L) if K is None else None
    if lookup is None:
        raise ValueError("pass a lookup table when truncating K")
    if hf.up.shape != (spec.L, spec.Nup) or hf.dn.shape != (spec.L, spec.Ndn):
        raise ValueError("HF orbital shapes do not match the system")
    K = lookup.K
    phis = [hf.generalized()] if spec.spin_mode == GENERALIZED else [hf.up, hf.dn]
    rng = np.random.default_rng(seed)
    blocks = []
    for phi, shape in zip(phis, CpdParams.block_shapes(spec, K, M)):
        eps = np.zeros(shape)
        eps[:, :, :, 0, 0] = phi[:, :, None]
        eps[:, :, :, 1:, 0] = 1.0
        if sigma > 0:
            eps += rng.normal(0.0, sigma, size=shape)
        blocks.append(eps)
    return CpdParams(spec, M, lookup, blocks)


def random_params(spec: SystemSpec, M: int, lookup: LookupTable, seed: int = 0,
                  loc: float = 1.0, scale: float = 0.3) -> CpdParams:
    rng = np.random.default_rng(seed)
    blocks = [rng.normal(loc, scale, size=s) for s in CpdParams.block_shapes(spec, lookup.K, M)]
    return CpdParams(spec, M, lookup, blocks)


# ---------------------------------------------------------------------------
# batched evaluation


def _factors(p: CpdParams, k: int, rows: np.ndarray, states: np.ndarray) -> np.ndarray:
    """(B, R, K, N, M) factors eps[row, orbital, n(x[row, v]), v, m]."""
    L, K = p.L, p.K
    lk = p.lookup.x[rows % L]  # (B, R, K)
    s = states[np.arange(len(states))[:, None, None], lk]
    return p.gathered(k)[rows[:, :, None], s, np.arange(K)]


def orbital_rows(p: CpdParams, k: int, rows: np.ndarray, states: np.ndarray) -> np.ndarray:
    """(B, R, N) orbital values of block k on the given rows."""
    return _factors(p, k, rows, states).prod(axis=2).sum(axis=-1)


def _as_masks(up, dn):
    return np.atleast_1d(np.asarray(up, dtype=np.int64)), np.atleast_1d(np.asarray(dn, dtype=np.int64))


def log_amplitudes(p: CpdParams, up, dn) -> tuple[np.ndarray, np.ndarray]:
    """(sign, log|psi|) for arrays of configurations."""
    up, dn = _as_masks(up, dn)
    B = len(up)
    sign = np.ones(B)
    logabs = np.zeros(B)
    for start in range(0, B, CHUNK):
        sl = slice(start, start + CHUNK)
        states = states_array(up[sl], dn[sl], p.L)
        for k, rows in enumerate(p.block_rows(up[sl], dn[sl])):
            if rows.shape[1] == 0:
                continue
            A = orbital_rows(p, k, rows, states)
            if not np.all(np.isfinite(A)):
                raise FloatingPointError("non-finite orbital values")
            s, l = np.linalg.slogdet(A)
            sign[sl] *= s
            logabs[sl] += l
    logabs[sign == 0] = -np.inf
    return sign, logabs


def orbital_value(p: CpdParams, mu: int, i: int, cfg: Config) -> float:
    """phi[mu, i](n); ``i`` indexes the orbitals of the block that owns row ``mu``.

    In restricted mode rows 0..L-1 address the up block and L..2L-1 the down
    block.
    """
    states = cfg.states(p.L)[None]
    if p.generalized:
        k, row = 0, mu
    else:
        k, row = divmod(mu, p.L)
    return float(orbital_rows(p, k, np.array([[row]]), states)[0, 0, i])


def log_amplitude(p: CpdParams, cfg: Config) -> tuple[int, float]:
    s, l = log_amplitudes(p, [cfg.up], [cfg.dn])
    return int(s[0]), float(l[0])


@dataclass
class DerivativeRows:
    """Fixed-width sparse rows: ``cols[b]`` and ``vals[b]`` list the nonzeros of sample b."""

    cols: np.ndarray
    vals: np.ndarray
    n_params: int

    def tocsr(self) -> sp.csr_matrix:
        B, w = self.cols.shape
        indptr = np.arange(0, B * w + 1, w)
        # copies: scipy may canonicalize the index buffers in place
        return sp.csr_matrix((self.vals.ravel().copy(), self.cols.ravel().copy(), indptr), shape=(B, self.n_params))

    def dense(self) -> np.ndarray:
        out = np.zeros((len(self.cols), self.n_params))
        np.put_along_axis(out, self.cols, self.vals, axis=1)
        return out

    def __len__(self):
        return len(self.cols)


def _exclusive_products(f: np.ndarray, axis: int) -> np.ndarray:
    """prod over all entries along ``axis`` except the current one, without division."""
    f = np.moveaxis(f, axis, 0)
    K = f.shape[0]
    pre = np.ones_like(f)
    suf = np.ones_like(f)
    for k in range(1, K):
        pre[k] = pre[k - 1] * f[k - 1]
        suf[K - 1 - k] = suf[K - k] * f[K - k]
    return np.moveaxis(pre * suf, 0, axis)


def log_derivative_rows(p: CpdParams, up, dn) -> DerivativeRows:
    """d log|psi| / d eps for each configuration, as sparse rows.

    Raises SingularAmplitude if any configuration has a singular orbital
    matrix.
    """
    up, dn = _as_masks(up, dn)
    B = len(up)
    cols_all, vals_all = [], []
    states = states_array(up, dn, p.L)
    K, M = p.K, p.M
    for k, (rows, off) in enumerate(zip(p.block_rows(up, dn), p.offsets)):
        R = rows.shape[1]
        if R == 0:
            continue
        f = _factors(p, k, rows, states)  # (B, R, K, N, M)
        A = f.prod(axis=2).sum(axis=-1)
        try:
            Ainv = np.linalg.inv(A)  # (B, N, R)
        except np.linalg.LinAlgError:
            raise SingularAmplitude("singular orbital matrix") from None
        if not np.all(np.isfinite(Ainv)):
            raise SingularAmplitude("singular orbital matrix")
        G = np.swapaxes(Ainv, 1, 2)  # d log det / dA[r, i]
        vals = G[:, :, None, :, None] * _exclusive_products(f, axis=2)
        N = A.shape[2]
        s = states[np.arange(B)[:, None, None], p.lookup.x[rows % p.L]]  # (B, R, K)
        mu = rows[:, :, None, None, None]
        ii = np.arange(N)[None, None, None, :, None]
        ss = s[:, :, :, None, None]
        vv = np.arange(K)[None, None, :, None, None]
        mm = np.arange(M)[None, None, None, None, :]
        idx = off + (((mu * N + ii) * N_STATES + ss) * K + vv) * M + mm
        idx, vals = np.broadcast_arrays(idx, vals)
        cols_all.append(idx.reshape(B, -1))
        vals_all.append(vals.reshape(B, -1))
    if not cols_all:
        z = np.zeros((B, 0))
        return DerivativeRows(z.astype(np.int64), z, p.n_params)
    return DerivativeRows(np.concatenate(cols_all, axis=1), np.concatenate(vals_all, axis=1), p.n_params)


def log_derivatives(p: CpdParams, cfg: Config) -> dict[int, float]:
    rows = log_derivative_rows(p, [cfg.up], [cfg.dn])
    return dict(zip(rows.cols[0].tolist(), rows.vals[0].tolist()))


def hf_configuration(p: CpdParams | HFOrbitals) -> Config:
    """Configuration of largest determinant weight, by column-pivoted QR per spin."""
    hf = p
    if isinstance(p, CpdParams):
        if p.generalized:
            phi = np.stack([p.blocks[0][:, :, 0, 0, 0]])[0]
            L = p.L
            blocks = [(phi[:L, : p.spec.Nup]), (phi[L:, p.spec.Nup:])]
        else:
            blocks = [b[:, :, 0, 0, 0] for b in p.blocks]
    else:
        blocks = [hf.up, hf.dn]
    occ = []
    for phi in blocks:
        n = phi.shape[1]
        if n == 0:
            occ.append([])
            continue
        _, _, piv = scipy.linalg.qr(phi.T, pivoting=True, mode="economic")
        occ.append(sorted(int(x) for x in piv[:n]))
    return Config.from_occupations(occ[0], occ[1])


# ---------------------------------------------------------------------------
# incremental evaluation


@dataclass
class _BlockCache:
    prod: np.ndarray   # (rows, N, M) product of nonzero factors
    zeros: np.ndarray  # (rows, N, M) count of exact-zero factors

    def orbitals(self) -> np.ndarray:
        return np.where(self.zeros == 0, self.prod, 0.0).sum(axis=-1)


@dataclass
class Proposal:
    cfg: Config
    sign: int
    logabs: float
    caches: list[_BlockCache] | None
    states: np.ndarray


class EvalContext:
    """Per-chain cached orbital products supporting O(1)-site updates.

    ``propose`` computes the target amplitude without touching the committed
    state; ``commit`` swaps it in.  After ``rebuild_every`` commits (default
    L) the caches are recomputed from scratch.
    """

    def __init__(self, params: CpdParams, cfg: Config, rebuild_every: int | None = None):
        self.params = params
        self.L = params.L
        self.rebuild_every = rebuild_every or params.L
        self._pos = params.lookup.positions()
        self.n_rebuilds = 0
        self._set(cfg)

    def _set(self, cfg: Config):
        self.cfg = cfg
        self.states = cfg.states(self.L)
        self.caches = [self._full_cache(k) for k in range(len(self.params.blocks))]
        self.sign, self.logabs = self._determinant(self.caches, cfg)
        self.accepted = 0
        self.n_rebuilds += 1

    def rebuild(self):
        self._set(self.cfg)

    def _full_cache(self, k: int, states: np.ndarray | None = None) -> _BlockCache:
        states = self.states if states is None else states
        p = self.params
        eps = p.blocks[k]
        n_rows = eps.shape[0]
        lk = p.lookup.x[np.arange(n_rows) % self.L]  # (rows, K)
        f = eps[np.arange(n_rows)[:, None], :, states[lk], np.arange(p.K)]  # (rows, K, N, M)
        zero = f == 0.0
        return _BlockCache(np.where(zero, 1.0, f).prod(axis=1), zero.sum(axis=1))

    def _determinant(self, caches, cfg: Config) -> tuple[int, float]:
        p = self.params
        sign, logabs = 1.0, 0.0
        for cache, rows in zip(caches, p.block_rows(np.array([cfg.up]), np.array([cfg.dn]))):
            if rows.shape[1] == 0:
                continue
            A = cache.orbitals()[rows[0]]
            s, l = np.linalg.slogdet(A)
            sign *= s
            logabs += l
        if sign == 0:
            return 0, -np.inf
        return int(sign), float(logabs)

    def propose(self, ex: Excitation) -> Proposal:
        new_cfg, _ = apply_excitation(self.cfg, ex, self.L)
        new_states = new_cfg.states(self.L)
        changed = np.flatnonzero(new_states != self.states)
        caches = []
        for k, cache in enumerate(self.caches):
            updated = self._update_block(k, cache, changed, new_states)
            if updated is None:
                caches = None
                break
            caches.append(updated)
        if caches is None:
            caches = [self._full_cache(k, new_states) for k in range(len(self.caches))]
        sign, logabs = self._determinant(caches, new_cfg)
        return Proposal(new_cfg, sign, logabs, caches, new_states)

    def _update_block(self, k, cache, changed, new_states) -> _BlockCache | None:
        eps = self.params.blocks[k]
        n_rows = eps.shape[0]
        prod, zeros = cache.prod.copy(), cache.zeros.copy()
        row_sites = np.arange(n_rows) % self.L
        for c in changed:
            slots = self._pos[row_sites, c]
            rows = np.flatnonzero(slots >= 0)
            if len(rows) == 0:
                continue
            v = slots[rows]
            f_old = eps[rows, :, self.states[c], v]  # (r, N, M)
            f_new = eps[rows, :, new_states[c], v]
            z_old, z_new = f_old == 0.0, f_new == 0.0
            if np.any(~z_old & (np.abs(f_old) < DIV_GUARD)):
                return None
            prod[rows] = prod[rows] / np.where(z_old, 1.0, f_old) * np.where(z_new, 1.0, f_new)
            zeros[rows] += z_new.astype(zeros.dtype) - z_old.astype(zeros.dtype)
        return _BlockCache(prod, zeros)

    def commit(self, proposal: Proposal) -> None:
        self.cfg = proposal.cfg
        self.states = proposal.states
        self.caches = proposal.caches
        self.sign, self.logabs = proposal.sign, proposal.logabs
        self.accepted += 1
        if self.accepted >= self.rebuild_every:
            self.rebuild()

    def update(self, ex: Excitation) -> tuple[int, float]:
        prop = self.propose(ex)
        self.commit(prop)
        return self.sign, self.logabs


def make_context(params: CpdParams, cfg: Config, rebuild_every: int | None = None) -> EvalContext:
    return EvalContext(params, cfg, rebuild_every)


def update_context(ctx: EvalContext, ex: Excitation) -> tuple[int, float]:
    return ctx.update(ex)


# ---------------------------------------------------------------------------
# checkpoint I/O

MAGIC = b"CPDB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIII")


def save_checkpoint(p: CpdParams, dest=None) -> bytes:
    """Serialize to the little-endian binary layout; optionally also write ``dest``."""
    s = p.spec
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, int(p.generalized), s.L, p.K, p.M, s.Nup, s.Ndn))
    buf.write(p.lookup.x.astype("<u4").tobytes())
    buf.write(p.flat().astype("<f8").tobytes())
    data = buf.getvalue()
    if dest is not None:
        with open(dest, "wb") as fh:
            fh.write(data)
    return data


def load_checkpoint(data) -> CpdParams:
    if not isinstance(data, (bytes, bytearray, memoryview)):
        with open(data, "rb") as fh:
            data = fh.read()
    data = bytes(data)
    if len(data) < _HEADER.size:
        raise CheckpointError("checkpoint truncated: header incomplete")
    magic, version, mode, L, K, M, nup, ndn = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if mode not in (0, 1):
        raise CheckpointError(f"bad spin mode {mode}")
    spec = SystemSpec(L, nup, ndn, GENERALIZED if mode else RESTRICTED)
    n_params = sum(int(np.prod(s)) for s in CpdParams.block_shapes(spec, K, M))
    expected = _HEADER.size + 4 * L * K + 8 * n_params
    if len(data) != expected:
        raise CheckpointError(f"checkpoint length {len(data)} != expected {expected}")
    off = _HEADER.size
    x = np.frombuffer(data, dtype="<u4", count=L * K, offset=off).reshape(L, K).astype(np.int64)
    theta = np.frombuffer(data, dtype="<f8", count=n_params, offset=off + 4 * L * K).astype(float)
    shapes = CpdParams.block_shapes(spec, K, M)
    blocks, start = [], 0
    for s in shapes:
        size = int(np.prod(s))
        blocks.append(theta[start:start + size].reshape(s).copy())
        start += size
    return CpdParams(spec, M, LookupTable(x), blocks)
