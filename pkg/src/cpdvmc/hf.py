"""Mean-field orbitals used to seed the backflow tensor."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HFOrbitals:
    """Occupied orbital coefficients per spin block, shape (L, N_sigma)."""

    up: np.ndarray
    dn: np.ndarray
    energy: float = float("nan")
    converged: bool = True

    @property
    def L(self) -> int:
        return self.up.shape[0]

    def generalized(self) -> np.ndarray:
        """Block-diagonal (2L, Nup + Ndn) spin-orbital coefficients."""
        L, nu, nd = self.L, self.up.shape[1], self.dn.shape[1]
        phi = np.zeros((2 * L, nu + nd))
        phi[:L, :nu] = self.up
        phi[L:, nu:] = self.dn
        return phi

    def check_rows(self, tol: float = 1e-10) -> None:
        for name, C in (("up", self.up), ("dn", self.dn)):
            if C.shape[1] == 0:
                continue
            norms = np.linalg.norm(C, axis=1)
            Cn = C[norms > tol] / norms[norms > tol, None]
            overlap = np.abs(Cn @ Cn.T) - np.eye(len(Cn))
            if np.any(overlap > 1 - tol):
                warnings.warn(f"{name} HF block has proportional rows; some determinants vanish")


def _integrals(H):
    if H.kind == "hubbard":
        H = H.to_abinitio()
    return H.h1, H.h2, H.e_core


def determinant_energy(H, C_up: np.ndarray, C_dn: np.ndarray) -> float:
    """<Phi|H|Phi>/<Phi|Phi> of a single determinant, via density matrices."""
    h1, h2, e_core = _integrals(H)

    def density(C):
        if C.shape[1] == 0:
            return np.zeros((C.shape[0], C.shape[0]))
        return C @ np.linalg.solve(C.T @ C, C.T)

    Du, Dd = density(C_up), density(C_dn)
    D = Du + Dd
    e1 = np.einsum("ij,ij", h1, D)
    ej = np.einsum("ijkl,ij,kl", h2, D, D)
    ek = np.einsum("ijkl,il,kj", h2, Du, Du) + np.einsum("ijkl,il,kj", h2, Dd, Dd)
    return float(e_core + e1 + 0.5 * (ej - ek))


def _fock(h1, h2, Du, Dd):
    J = np.einsum("ijkl,kl->ij", h2, Du + Dd)
    Ku = np.einsum("ilkj,kl->ij", h2, Du)
    Kd = np.einsum("ilkj,kl->ij", h2, Dd)
    return h1 + J - Ku, h1 + J - Kd


def hartree_fock(H, nup: int, ndn: int, restricted: bool = True, guess: np.ndarray | None = None,
                 max_iter: int = 500, tol: float = 1e-10, damping: float = 0.3,
                 seed: int = 0) -> HFOrbitals:
    """Self-consistent field in the orthonormal site/orbital basis.

    ``restricted`` shares spatial orbitals between spins (averaged Fock
    operator when Nup != Ndn).  ``guess`` is an optional (2, L) array of
    starting spin densities, e.g. a staggered pattern to seed an
    antiferromagnetic unrestricted solution.
    """
    h1, h2, _ = _integrals(H)
    L = h1.shape[0]
    if guess is None:
        e, C = np.linalg.eigh(h1)
        Du = C[:, :nup] @ C[:, :nup].T
        Dd = C[:, :ndn] @ C[:, :ndn].T
    else:
        guess = np.asarray(guess, dtype=float)
        Du, Dd = np.diag(guess[0]), np.diag(guess[1])
    rng = np.random.default_rng(seed)
    sym_break = 1e-9 * rng.standard_normal((L, L))
    sym_break = sym_break + sym_break.T

    energy_old, converged, stable = np.inf, False, 0
    for it in range(max_iter):
        Fu, Fd = _fock(h1, h2, Du, Dd)
        if restricted:
            Fu = Fd = 0.5 * (Fu + Fd)
        if it == 0:
            Fu, Fd = Fu + sym_break, Fd + sym_break
        _, Cu = np.linalg.eigh(Fu)
        _, Cd = np.linalg.eigh(Fd)
        Du_new = Cu[:, :nup] @ Cu[:, :nup].T
        Dd_new = Cd[:, :ndn] @ Cd[:, :ndn].T
        energy = determinant_energy(H, Cu[:, :nup], Cd[:, :ndn])
        change = max(np.abs(Du_new - Du).max(initial=0.0), np.abs(Dd_new - Dd).max(initial=0.0))
        Du = (1 - damping) * Du_new + damping * Du
        Dd = (1 - damping) * Dd_new + damping * Dd
        # degenerate open shells can keep rotating the density at fixed energy
        stable = stable + 1 if abs(energy - energy_old) < tol else 0
        if stable and change < np.sqrt(tol) or stable >= 20:
            converged = True
            break
        energy_old = energy
    if not converged:
        warnings.warn(f"SCF not converged after {max_iter} iterations (dE={energy - energy_old:.2e})")
    # final orbitals from the undamped Fock of the converged density
    Fu, Fd = _fock(h1, h2, Du, Dd)
    if restricted:
        Fu = Fd = 0.5 * (Fu + Fd)
    _, Cu = np.linalg.eigh(Fu)
    _, Cd = np.linalg.eigh(Fd)
    Cu, Cd = Cu[:, :nup].copy(), Cd[:, :ndn].copy()
    energy = determinant_energy(H, Cu, Cd)
    log.info("HF energy %.10f (converged=%s)", energy, converged)
    return HFOrbitals(Cu, Cd, energy, converged)


def staggered_guess(positions: np.ndarray, nup: int, ndn: int) -> np.ndarray:
    """Spin densities alternating on the two sublattices of a square lattice."""
    parity = np.rint(positions).astype(int).sum(axis=1) % 2
    up = np.where(parity == 0, 1.0, 0.0)
    dn = 1.0 - up
    return np.stack([up * nup / max(up.sum(), 1), dn * ndn / max(dn.sum(), 1)])
