"""Energy error bars, local RDM estimators and spin-spin correlations.

RDM conventions (real orbitals):

    gamma[s, i, j]          = <c+_is c_js>
    Gamma[s, t, i, j, k, l] = <c+_is c+_kt c_lt c_js>

Spin-free tensors are the sums over spin labels.  For a singlet the
same-spin and opposite-spin blocks follow from the spin-free ones through

    Gamma^{aa}_{ijkl} = (Gamma_{ijkl} - Gamma_{kjil}) / 6
    Gamma^{ab}_{ijkl} = (2 Gamma_{ijkl} + Gamma_{kjil}) / 6
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .fock import apply_operators_batch, mask_bits

SPIN_SIGN = np.array([0.5, -0.5])


# ---------------------------------------------------------------------------
# energies


def blocking_error(x: np.ndarray, min_blocks: int = 16) -> float:
    """Standard error of the mean with serial correlation handled by pairwise blocking.

    Returns the largest estimate over blocking levels that keep at least
    ``min_blocks`` blocks.
    """
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        return float("nan")
    best = 0.0
    while len(x) >= max(min_blocks, 2):
        se = float(np.std(x, ddof=1) / np.sqrt(len(x)))
        best = max(best, se)
        n = len(x) // 2
        x = 0.5 * (x[: 2 * n: 2] + x[1: 2 * n: 2])
    return best


def energy_estimate(values) -> tuple[float, float]:
    """(mean, error).

    Given an array of independent evaluation means, the error is their
    sample standard deviation (ddof=1).  Given a SampleBatch, the error is a
    blocking estimate on its local energies.
    """
    if hasattr(values, "local_energies"):
        e = np.asarray(values.local_energies, dtype=float)
        if getattr(values, "weights", None) is not None:
            return float(np.dot(values.weights, e)), 0.0
        return float(np.mean(e)), blocking_error(e)
    v = np.asarray(values, dtype=float)
    if len(v) < 2:
        raise ValueError("need at least two evaluations for an error bar")
    return float(np.mean(v)), float(np.std(v, ddof=1))


# ---------------------------------------------------------------------------
# local RDM estimators


def _ratios(amp, up, dn, s0, l0, nu, nd, sgn):
    out = np.zeros(len(up))
    hit = np.flatnonzero(sgn != 0)
    if len(hit):
        s, l = amp(nu[hit], nd[hit])
        with np.errstate(invalid="ignore", over="ignore"):
            out[hit] = np.where(s != 0, sgn[hit] * s * s0[hit] * np.exp(l - l0[hit]), 0.0)
    return out


def rdm_local(up, dn, L: int, amp, one=(), two=(), logpsi=None):
    """Per-sample local estimators for the requested RDM elements.

    ``one`` is a list of (i, j) and ``two`` a list of (i, j, k, l).  Returns
    arrays g1 of shape (B, 2, len(one)) and g2 of shape (B, 2, 2, len(two)),
    where

        g1[b, s, x]    = <n_b| c+_is c_js |psi> / <n_b|psi>
        g2[b, s, t, x] = <n_b| c+_is c+_kt c_lt c_js |psi> / <n_b|psi>

    Samples with zero amplitude get NaN.
    """
    up = np.atleast_1d(np.asarray(up, dtype=np.int64))
    dn = np.atleast_1d(np.asarray(dn, dtype=np.int64))
    s0, l0 = logpsi if logpsi is not None else amp(up, dn)
    B = len(up)
    g1 = np.zeros((B, 2, len(one)))
    g2 = np.zeros((B, 2, 2, len(two)))
    for x, (i, j) in enumerate(one):
        for s in range(2):
            # <n|A|psi> = sum_n' <n'|A^+|n> psi(n'),  A^+ = c+_js c_is
            nu, nd, sg = apply_operators_batch(up, dn, L, [s * L + j], [s * L + i])
            g1[:, s, x] = _ratios(amp, up, dn, s0, l0, nu, nd, sg)
    for x, (i, j, k, l) in enumerate(two):
        for s in range(2):
            for t in range(2):
                # A^+ = c+_js c+_lt c_kt c_is
                nu, nd, sg = apply_operators_batch(up, dn, L, [s * L + j, t * L + l], [t * L + k, s * L + i])
                g2[:, s, t, x] = _ratios(amp, up, dn, s0, l0, nu, nd, sg)
    bad = s0 == 0
    g1[bad] = np.nan
    g2[bad] = np.nan
    return g1, g2


@dataclass
class Rdm:
    """Spin-resolved RDM elements for index subsets, with standard errors."""

    one: list
    two: list
    g1: np.ndarray  # (2, n_one)
    g2: np.ndarray  # (2, 2, n_two)
    g1_err: np.ndarray
    g2_err: np.ndarray

    def spin_free_one(self) -> np.ndarray:
        return self.g1.sum(axis=0)

    def spin_free_two(self) -> np.ndarray:
        return self.g2.sum(axis=(0, 1))


def rdm_estimate(batch, amp, L: int, one=(), two=()) -> Rdm:
    """Average local RDM estimators over a batch (Born weights if present)."""
    g1, g2 = rdm_local(batch.up, batch.dn, L, amp, one, two, logpsi=(batch.sign, batch.logabs))
    n = len(batch.up)
    w = np.full(n, 1.0 / n) if batch.weights is None else np.asarray(batch.weights)
    m1 = np.einsum("b,b...->...", w, g1)
    m2 = np.einsum("b,b...->...", w, g2)
    if batch.weights is None and n > 1:
        e1 = g1.std(axis=0, ddof=1) / np.sqrt(n)
        e2 = g2.std(axis=0, ddof=1) / np.sqrt(n)
    else:
        e1, e2 = np.zeros_like(m1), np.zeros_like(m2)
    return Rdm(list(one), list(two), m1, m2, e1, e2)


def full_rdms(batch, amp, L: int) -> tuple[np.ndarray, np.ndarray]:
    """Complete spin-resolved gamma (2, L, L) and Gamma (2, 2, L, L, L, L); small L only."""
    idx1 = [(i, j) for i in range(L) for j in range(L)]
    idx2 = [(i, j, k, l) for i in range(L) for j in range(L) for k in range(L) for l in range(L)]
    r = rdm_estimate(batch, amp, L, idx1, idx2)
    return r.g1.reshape(2, L, L), r.g2.reshape(2, 2, L, L, L, L)


# ---------------------------------------------------------------------------
# spin-spin correlation


def spin_spin_zz_spinned(gamma: np.ndarray, Gamma: np.ndarray, a: int, b: int) -> float:
    """<S^z_a S^z_b> from spin-resolved RDMs with single-orbital projectors.

    1/4 sum_st s_s s_t Gamma^{st}_{aabb} + 1/4 delta_ab sum_s gamma^s_aa
    (s = +-1).  Valid for any state.
    """
    sgn = np.array([1.0, -1.0])
    two = 0.25 * float(np.einsum("s,t,st->", sgn, sgn, Gamma[:, :, a, a, b, b]))
    one = 0.25 * float(gamma[0, a, a] + gamma[1, a, a]) if a == b else 0.0
    return two + one


def spin_spin_zz(gamma: np.ndarray, Gamma: np.ndarray, a: int, b: int) -> float:
    """<S^z_a S^z_b> from spin-free RDMs (singlet states only).

    -1/2 (Gamma_aabb / 6 + Gamma_baab / 3) + 1/4 delta_ab gamma_aa, where gamma
    and Gamma are summed over spin labels.
    """
    val = -0.5 * (Gamma[a, a, b, b] / 6.0 + Gamma[b, a, a, b] / 3.0)
    if a == b:
        val += 0.25 * gamma[a, a]
    return float(val)


def spin_blocks_from_spin_free(Gamma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(same-spin, opposite-spin) blocks of a singlet two-body RDM."""
    swap = np.einsum("ijkl->kjil", Gamma)
    return (Gamma - swap) / 6.0, (2.0 * Gamma + swap) / 6.0


def szsz_samples(up, dn, L: int) -> np.ndarray:
    """Per-sample diagonal S^z_a S^z_b values, shape (B, L, L)."""
    sz = 0.5 * (mask_bits(up, L).astype(float) - mask_bits(dn, L).astype(float))
    return sz[:, :, None] * sz[:, None, :]


def szsz_matrix(batch, L: int, chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Mean and naive standard error of <S^z_a S^z_b> over a batch (weighted if exact)."""
    n = len(batch.up)
    w = np.full(n, 1.0 / n) if batch.weights is None else np.asarray(batch.weights)
    m1 = np.zeros((L, L))
    m2 = np.zeros((L, L))
    for lo in range(0, n, chunk):
        z = szsz_samples(batch.up[lo:lo + chunk], batch.dn[lo:lo + chunk], L)
        ww = w[lo:lo + chunk]
        m1 += np.einsum("b,bij->ij", ww, z)
        m2 += np.einsum("b,bij->ij", ww, z * z)
    if batch.weights is not None or n < 2:
        return m1, np.zeros_like(m1)
    var = np.maximum(m2 - m1 * m1, 0.0) * n / (n - 1)
    return m1, np.sqrt(var / n)


# ---------------------------------------------------------------------------
# radial correlation function


@dataclass
class SpinCorrelation:
    r_over_d: np.ndarray
    C: np.ndarray
    stderr: np.ndarray
    n_pairs: np.ndarray

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["r_over_d", "C", "stderr", "n_pairs"])
        for row in zip(self.r_over_d, self.C, self.stderr, self.n_pairs):
            w.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), int(row[3])])
        text = buf.getvalue()
        if dest is not None:
            with open(dest, "w") as fh:
                fh.write(text)
        return text


def central_sites(positions: np.ndarray, n: int = 4) -> list[int]:
    """The ``n`` sites nearest the centroid (ties by index)."""
    pos = np.asarray(positions, dtype=float)
    dist = np.linalg.norm(pos - pos.mean(axis=0), axis=1)
    return sorted(np.lexsort((np.arange(len(pos)), np.round(dist, 9)))[:n].tolist())


def nearest_distance(positions: np.ndarray) -> float:
    pos = np.asarray(positions, dtype=float)
    D = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    return float(D[D > 1e-12].min())


def radial_correlation(corr: np.ndarray, positions: np.ndarray, bulk_sites, d: float | None = None,
                       stderr: np.ndarray | None = None) -> SpinCorrelation:
    """C(r) = (1/N_bulk) sum_{a in bulk} sum_{|r_a - r_b| = r} <S^z_a S^z_b>.

    Distances are normalized by ``d`` (default: nearest-neighbor distance)
    and grouped into shells with tolerance 1e-6 d.  Empty shells do not
    appear.  Errors are combined as independent.
    """
    pos = np.asarray(positions, dtype=float)
    corr = np.asarray(corr, dtype=float)
    d = nearest_distance(pos) if d is None else float(d)
    bulk = list(bulk_sites)
    tol = 1e-6
    r_list, c_list, e_list, n_list = [], [], [], []
    entries = []
    for a in bulk:
        for b in range(len(pos)):
            entries.append((np.linalg.norm(pos[a] - pos[b]) / d, a, b))
    entries.sort()
    i = 0
    while i < len(entries):
        r0 = entries[i][0]
        j = i
        while j < len(entries) and entries[j][0] - r0 <= tol:
            j += 1
        shell = entries[i:j]
        r_list.append(float(np.mean([e[0] for e in shell])))
        c_list.append(sum(corr[a, b] for _, a, b in shell) / len(bulk))
        if stderr is None:
            e_list.append(0.0)
        else:
            e_list.append(float(np.sqrt(sum(stderr[a, b] ** 2 for _, a, b in shell))) / len(bulk))
        n_list.append(len(shell))
        i = j
    return SpinCorrelation(np.array(r_list), np.array(c_list), np.array(e_list), np.array(n_list))


# ---------------------------------------------------------------------------
# geometry files


class GeometryError(ValueError):
    pass


def read_geometry(source) -> np.ndarray:
    """Plain text ``site_index x y z`` (Angstrom) -> (L, 3) positions ordered by site index."""
    if hasattr(source, "read"):
        text = source.read()
    else:
        with open(source) as fh:
            text = fh.read()
    rows = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise GeometryError(f"line {ln}: expected 'site_index x y z'")
        try:
            idx = int(parts[0])
            xyz = [float(v) for v in parts[1:]]
        except ValueError:
            raise GeometryError(f"line {ln}: non-numeric field") from None
        if idx in rows:
            raise GeometryError(f"line {ln}: duplicate site {idx}")
        rows[idx] = xyz
    if sorted(rows) != list(range(len(rows))):
        raise GeometryError("site indices must be 0..L-1")
    return np.array([rows[i] for i in range(len(rows))])


def write_geometry(positions: np.ndarray, dest=None) -> str:
    lines = [f"{i} {x!r} {y!r} {z!r}" for i, (x, y, z) in enumerate(np.asarray(positions, dtype=float).tolist())]
    text = "\n".join(lines) + "\n"
    if dest is not None:
        with open(dest, "w") as fh:
            fh.write(text)
    return text
