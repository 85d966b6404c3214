"""Independent references for testing.

Nothing here calls the connected-element or fast-update code it is meant to
check.  Operators are applied term by term to whole sectors at once, with the
fermionic sign computed from popcounts on combined occupation masks.
"""

from __future__ import annotations

import logging
from itertools import product

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ansatz import CpdParams, LookupTable
from .fock import RESTRICTED, Config, SectorTooLarge, SystemSpec, sector_arrays
from .hf import HFOrbitals

log = logging.getLogger(__name__)

DENSE_LIMIT = 50_000
EIGH_LIMIT = 2_000


class LanczosNotConverged(ArithmeticError):
    pass


def _popcount(x):
    return np.bitwise_count(x).astype(np.int64)


def sector_keys(spec: SystemSpec) -> np.ndarray:
    """Combined masks ``up | dn << L`` of the sector, in enumerate_sector order."""
    if 2 * spec.L > 62:
        raise SectorTooLarge("oracle handles at most 31 sites")
    up, dn = sector_arrays(spec, max_configs=10**7)
    return up | (dn << spec.L)


class _Locator:
    """Maps combined masks to sector positions."""

    def __init__(self, keys: np.ndarray):
        self.keys = keys
        self.order = np.argsort(keys, kind="stable")
        self.sorted = keys[self.order]

    def find(self, masks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(positions, found) for each mask."""
        i = np.minimum(np.searchsorted(self.sorted, masks), len(self.sorted) - 1)
        return self.order[i], self.sorted[i] == masks


def apply_string(masks: np.ndarray, ops) -> tuple[np.ndarray, np.ndarray]:
    """Apply a product of ladder operators to every mask.

    ``ops`` is a sequence of (spin_orbital, is_creation) written left to right;
    operators act right to left.  Returns (new masks, sign), sign 0 where the
    string kills the state.
    """
    m = masks.copy()
    sign = np.ones(len(m), dtype=np.int64)
    for p, dag in reversed(ops):
        bit = np.int64(1) << np.int64(p)
        occ = (m & bit) != 0
        ok = ~occ if dag else occ
        sign = np.where(ok, sign, 0)
        below = _popcount(m & (bit - 1)) & 1
        sign = sign * (1 - 2 * below)
        m = m ^ bit
    return m, sign


def _integrals(H):
    if H.kind == "hubbard":
        H = H.to_abinitio()
    return H.h1, H.h2, H.e_core


def sparse_hamiltonian(H, spec: SystemSpec) -> sp.csr_matrix:
    """Second-quantized Hamiltonian on the sector, term by term.

    H = e_core + sum h1_ij c+_is c_js + 1/2 sum (ij|kl) c+_is c+_kt c_lt c_js
    """
    h1, h2, e_core = _integrals(H)
    L = spec.L
    keys = sector_keys(spec)
    loc = _Locator(keys)
    dim = len(keys)
    rows, cols, vals = [np.arange(dim)], [np.arange(dim)], [np.full(dim, float(e_core))]

    def add(coef, ops):
        new, sgn = apply_string(keys, ops)
        hit = sgn != 0
        if not np.any(hit):
            return
        tgt, ok = loc.find(new[hit])
        src = np.flatnonzero(hit)[ok]
        rows.append(tgt[ok])
        cols.append(src)
        vals.append(coef * sgn[hit][ok])

    for i, j in zip(*np.nonzero(h1)):
        for s in (0, 1):
            add(h1[i, j], [(s * L + i, True), (s * L + j, False)])
    for i, j, k, l in zip(*np.nonzero(h2)):
        for s, t in product((0, 1), repeat=2):
            add(0.5 * h2[i, j, k, l], [(s * L + i, True), (t * L + k, True),
                                       (t * L + l, False), (s * L + j, False)])
    M = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(dim, dim))
    return M.tocsr()


def dense_hamiltonian(H, spec: SystemSpec) -> np.ndarray:
    if spec.sector_size > DENSE_LIMIT:
        raise SectorTooLarge(f"dense Hamiltonian limited to {DENSE_LIMIT} configurations")
    return sparse_hamiltonian(H, spec).toarray()


def ground_state(H, spec: SystemSpec, tol: float = 1e-12, method: str = "auto") -> tuple[float, np.ndarray]:
    """Lowest eigenpair on the sector; sign fixed so the largest component is positive."""
    Hs = sparse_hamiltonian(H, spec)
    dim = Hs.shape[0]
    if method == "dense" or (method == "auto" and dim <= EIGH_LIMIT):
        w, V = np.linalg.eigh(Hs.toarray())
        e0, v = float(w[0]), V[:, 0]
    else:
        v0 = np.random.default_rng(0).standard_normal(dim)
        w, V = spla.eigsh(Hs, k=1, which="SA", tol=tol, v0=v0, maxiter=10 * dim)
        e0, v = float(w[0]), V[:, 0]
        resid = np.linalg.norm(Hs @ v - e0 * v)
        if resid > max(1e-6, 1e3 * tol * abs(e0)):
            raise LanczosNotConverged(f"Lanczos residual {resid:.2e}")
    v = v / np.linalg.norm(v)
    if v[np.argmax(np.abs(v))] < 0:
        v = -v
    return e0, v


class VectorEvaluator:
    """Amplitude lookup for an explicit sector vector, usable wherever (sign, log|psi|) is needed."""

    def __init__(self, spec: SystemSpec, vec: np.ndarray):
        self.spec = spec
        self.loc = _Locator(sector_keys(spec))
        self.vec = np.asarray(vec, dtype=float)

    def __call__(self, up, dn):
        up = np.atleast_1d(np.asarray(up, dtype=np.int64))
        dn = np.atleast_1d(np.asarray(dn, dtype=np.int64))
        k = up | (dn << self.spec.L)
        idx, found = self.loc.find(k)
        a = np.where(found, self.vec[idx], 0.0)
        with np.errstate(divide="ignore"):
            return np.sign(a), np.log(np.abs(a))


# ---------------------------------------------------------------------------
# direct expectation values on explicit vectors


def spin_rdms(spec: SystemSpec, vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Spin-resolved RDMs of a normalized sector vector.

    gamma[s, i, j] = <c+_is c_js>,
    Gamma[s, t, i, j, k, l] = <c+_is c+_kt c_lt c_js>.
    """
    L = spec.L
    keys = sector_keys(spec)
    loc = _Locator(keys)
    vec = np.asarray(vec, dtype=float)
    vec = vec / np.linalg.norm(vec)

    def expval(ops):
        new, sgn = apply_string(keys, ops)
        hit = np.flatnonzero(sgn != 0)
        if len(hit) == 0:
            return 0.0
        tgt, ok = loc.find(new[hit])
        return float(np.sum(vec[tgt[ok]] * sgn[hit[ok]] * vec[hit[ok]]))

    gamma = np.zeros((2, L, L))
    for s, i, j in product(range(2), range(L), range(L)):
        gamma[s, i, j] = expval([(s * L + i, True), (s * L + j, False)])
    Gamma = np.zeros((2, 2, L, L, L, L))
    for s, t in product(range(2), repeat=2):
        for i, j, k, l in product(range(L), repeat=4):
            Gamma[s, t, i, j, k, l] = expval([(s * L + i, True), (t * L + k, True),
                                              (t * L + l, False), (s * L + j, False)])
    return gamma, Gamma


def szsz_direct(spec: SystemSpec, vec: np.ndarray) -> np.ndarray:
    """<S^z_a S^z_b> for all site pairs from the diagonal occupations of the vector."""
    L = spec.L
    keys = sector_keys(spec)
    w = np.asarray(vec, dtype=float) ** 2
    w = w / w.sum()
    sites = np.arange(L, dtype=np.int64)
    nu = (keys[:, None] >> sites) & 1
    nd = (keys[:, None] >> (sites + L)) & 1
    sz = 0.5 * (nu - nd)
    return np.einsum("c,ca,cb->ab", w, sz, sz)


# ---------------------------------------------------------------------------
# brute-force ansatz evaluation


def _cofactor_det(A: np.ndarray) -> float:
    n = A.shape[0]
    if n == 0:
        return 1.0
    if n == 1:
        return float(A[0, 0])
    total = 0.0
    for c in range(n):
        minor = np.delete(np.delete(A, 0, axis=0), c, axis=1)
        total += (-1) ** c * A[0, c] * _cofactor_det(minor)
    return total


def naive_orbital(params: CpdParams, block: int, row: int, i: int, states) -> float:
    eps = params.blocks[block]
    x = params.lookup.x[row % params.L]
    total = 0.0
    for m in range(params.M):
        prod_ = 1.0
        for v in range(params.K):
            prod_ *= eps[row, i, states[x[v]], v, m]
        total += prod_
    return total


def brute_amplitude(params: CpdParams, cfg: Config) -> tuple[int, float]:
    """(sign, log|psi|) by direct loops and cofactor expansion (LU beyond 4x4)."""
    L = params.L
    states = [(cfg.up >> v & 1) + 2 * (cfg.dn >> v & 1) for v in range(L)]
    up_rows = [v for v in range(L) if cfg.up >> v & 1]
    dn_rows = [v for v in range(L) if cfg.dn >> v & 1]
    if params.generalized:
        groups = [(0, up_rows + [L + v for v in dn_rows])]
    else:
        groups = [(0, up_rows), (1, dn_rows)]
    amp = 1.0
    for block, rows in groups:
        n = params.blocks[block].shape[1]
        A = np.array([[naive_orbital(params, block, r, i, states) for i in range(n)] for r in rows]).reshape(len(rows), n)
        amp *= _cofactor_det(A) if n <= 4 else float(np.linalg.det(A))
    if amp == 0.0:
        return 0, -np.inf
    return int(np.sign(amp)), float(np.log(abs(amp)))


# ---------------------------------------------------------------------------
# representability constructors


def factored_cpd(hf: HFOrbitals, kappa_up: np.ndarray, kappa_dn: np.ndarray) -> CpdParams:
    """Slater-Jastrow subset: eps[mu, i, s, v, m] = kappa[i, s, x[mu, v], m] * (phi[mu, i] if v == 0).

    ``kappa_sigma`` has shape (N_sigma, 4, L, M) and defines per-orbital CP
    Jastrow factors CP_i(n) = sum_m prod_site kappa[i, n_site, site, m].  The
    lookup is the full K = L table, so every orbital sees every site once.
    """
    L = hf.L
    spec = SystemSpec(L, hf.up.shape[1], hf.dn.shape[1], RESTRICTED)
    lookup = LookupTable.full(L)
    M = kappa_up.shape[-1] if kappa_up.size else kappa_dn.shape[-1]
    blocks = []
    for phi, kappa in ((hf.up, kappa_up), (hf.dn, kappa_dn)):
        n = phi.shape[1]
        eps = np.zeros((L, n, 4, L, M))
        for mu in range(L):
            # kappa[i, s, x[mu, v], m] -> (i, s, v, m)
            eps[mu] = kappa[:, :, lookup.x[mu], :]
            eps[mu, :, :, 0, :] *= phi[mu][:, None, None]
        blocks.append(eps)
    return CpdParams(spec, M, lookup, blocks)


def gutzwiller_cpd(hf: HFOrbitals, g: np.ndarray) -> CpdParams:
    """M = 1 CPD amplitude exp(sum_v g_v [n_v = 3]) * det(phi_occ).

    The factor e^{g_v} sits on the doubly-occupied state of the first
    orbital's factors (the first up orbital, or the first down one when
    there are no up electrons); every other factor is 1.
    """
    L = hf.L
    g = np.asarray(g, dtype=float)
    nup, ndn = hf.up.shape[1], hf.dn.shape[1]
    ku, kd = np.ones((nup, 4, L, 1)), np.ones((ndn, 4, L, 1))
    target = ku if nup else kd
    target[0, 3, :, 0] = np.exp(g)
    return factored_cpd(hf, ku, kd)


def slater_jastrow_amplitude(hf: HFOrbitals, cfg: Config, kappa_up=None, kappa_dn=None,
                             g=None) -> float:
    """Direct product-of-CP (or Gutzwiller) times determinant evaluation."""
    L = hf.L
    states = [(cfg.up >> v & 1) + 2 * (cfg.dn >> v & 1) for v in range(L)]
    up_rows = [v for v in range(L) if cfg.up >> v & 1]
    dn_rows = [v for v in range(L) if cfg.dn >> v & 1]
    det = 1.0
    if up_rows:
        det *= float(np.linalg.det(hf.up[up_rows]))
    if dn_rows:
        det *= float(np.linalg.det(hf.dn[dn_rows]))
    factor = 1.0
    if g is not None:
        factor *= float(np.exp(sum(g[v] for v in range(L) if states[v] == 3)))
    for kappa in (kappa_up, kappa_dn):
        if kappa is None:
            continue
        for i in range(kappa.shape[0]):
            factor *= sum(np.prod([kappa[i, states[v], v, m] for v in range(L)])
                          for m in range(kappa.shape[-1]))
    return factor * det
