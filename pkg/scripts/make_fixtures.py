"""Regenerate the integral fixtures in tests/data.

Needs pyscf (not a package dependency).  Outputs are committed so tests never
call pyscf.

    python3 scripts/make_fixtures.py
"""

from pathlib import Path

import numpy as np
from pyscf import ao2mo, gto, lo

from cpdvmc.hamiltonians import AbInitioHamiltonian, write_fcidump
from cpdvmc.observables import write_geometry

OUT = Path(__file__).resolve().parents[1] / "tests" / "data"


def lowdin_hamiltonian(atoms, basis="sto-6g", spin=0):
    mol = gto.M(atom=atoms, basis=basis, unit="Angstrom", spin=spin, verbose=0)
    C = lo.orth_ao(mol, "lowdin")
    return mol, _integrals(mol, C)


def _integrals(mol, C):
    h1 = C.T @ (mol.intor("int1e_kin") + mol.intor("int1e_nuc")) @ C
    h1 = 0.5 * (h1 + h1.T)
    n = C.shape[1]
    h2 = ao2mo.restore(1, ao2mo.kernel(mol, C), n)
    return AbInitioHamiltonian(h1, h2, float(mol.energy_nuc()), mol.nelectron, mol.spin)


def chain(n, d):
    return [("H", (0.0, 0.0, i * d)) for i in range(n)]


def square(n, d):
    return [("H", (i * d, j * d, 0.0)) for i in range(n) for j in range(n)]


def main():
    OUT.mkdir(parents=True, exist_ok=True)

    # small ab initio fixtures in a Lowdin-orthogonalized site basis
    for name, atoms in [("h4_chain", chain(4, 1.0)), ("h6_chain", chain(6, 1.68)),
                        ("h2_dissociated", chain(2, 3.0))]:
        mol, H = lowdin_hamiltonian(atoms)
        write_fcidump(H, OUT / f"{name}.fcidump")
        write_geometry(mol.atom_coords(unit="Angstrom"), OUT / f"{name}.xyz")

    # 6x6 lattice, Boys-localized minimal basis: exchange matrices and orbital centroids
    for d in (1.0, 2.0):
        mol = gto.M(atom=square(6, d), basis="sto-6g", unit="Angstrom", verbose=0)
        C0 = lo.orth_ao(mol, "lowdin")
        C = lo.Boys(mol, C0).kernel()
        n = C.shape[1]
        eri = ao2mo.restore(1, ao2mo.kernel(mol, C), n)
        K = np.einsum("uvuv->uv", eri)
        r = mol.intor("int1e_r")
        centroids = np.einsum("ui,xuv,vi->ix", C, r, C) / 1.8897261254578281  # Bohr -> Angstrom
        tag = f"{d:.1f}".replace(".", "p")
        np.save(OUT / f"h36_square_{tag}_exchange.npy", K)
        np.save(OUT / f"h36_square_{tag}_centroids.npy", centroids)
        np.save(OUT / f"h36_square_{tag}_atoms.npy", mol.atom_coords(unit="Angstrom"))


if __name__ == "__main__":
    main()
