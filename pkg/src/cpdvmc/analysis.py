"""Morse-potential fits of energy curves and derived spectroscopic constants."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import asdict, dataclass

import numpy as np
import scipy.optimize
from scipy import constants as C

H_MASS_AMU = 1.00782503207
ANGSTROM = 1e-10


class MorseFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class MorseFit:
    De: float  # eV
    a: float  # 1/Angstrom
    re: float  # Angstrom
    u: float  # eV
    omega_e: float  # cm^-1
    omega_e_chi_e: float  # cm^-1
    rms: float  # eV
    bound: bool
    mass_amu: float = H_MASS_AMU

    def to_csv(self, dest=None) -> str:
        buf = io.StringIO()
        row = asdict(self)
        w = csv.DictWriter(buf, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        text = buf.getvalue()
        if dest is not None:
            with open(dest, "w") as fh:
                fh.write(text)
        return text


def morse(r, De, a, re, u):
    return De * (1.0 - np.exp(-a * (np.asarray(r) - re))) ** 2 + u


def spectroscopic_constants(De: float, a: float, mass_amu: float = H_MASS_AMU) -> tuple[float, float]:
    """(omega_e, omega_e chi_e) in cm^-1 from De (eV), a (1/Angstrom) and the reduced mass."""
    mu = mass_amu * C.atomic_mass
    a_si = a / ANGSTROM
    De_si = De * C.electron_volt
    omega = a_si / (2 * np.pi * C.c) * np.sqrt(2 * De_si / mu)
    omega_chi = C.hbar * a_si ** 2 / (4 * np.pi * mu * C.c)
    return float(omega / 100.0), float(omega_chi / 100.0)


def _initial_guess(r, E):
    i = int(np.argmin(E))
    re, u = r[i], E[i]
    De = E[np.argmax(r)] - u
    if De <= 0:
        De = np.ptp(E) or 1.0
    # curvature from a parabola through the minimum and its neighbours
    lo, hi = max(i - 1, 0), min(i + 2, len(r))
    if hi - lo < 3:
        lo, hi = max(0, hi - 3), max(3, hi)
    k = 2.0 * np.polyfit(r[lo:hi], E[lo:hi], 2)[0]
    a = np.sqrt(k / (2 * De)) if k > 0 else 1.0
    return np.array([De, a, re, u])


def fit_morse(r, E, stderr=None, mass_amu: float = H_MASS_AMU, xtol: float = 1e-12) -> MorseFit:
    """Least-squares fit of V(r) = De (1 - exp(-a (r - re)))^2 + u.

    Points are weighted by 1/stderr when errors are supplied.
    """
    r = np.asarray(r, dtype=float)
    E = np.asarray(E, dtype=float)
    if len(r) < 4 or len(r) != len(E):
        raise ValueError("need at least four (r, E) points")
    order = np.argsort(r)
    r, E = r[order], E[order]
    sw = np.ones_like(E)
    if stderr is not None:
        s = np.asarray(stderr, dtype=float)[order]
        if np.all(s > 0):
            sw = 1.0 / s
    x0 = _initial_guess(r, E)
    scale = np.abs(x0) + 1e-3

    def resid(x):
        return sw * (morse(r, *x) - E)

    res = scipy.optimize.least_squares(resid, x0, method="lm", xtol=xtol, ftol=1e-15, gtol=1e-15,
                                       x_scale=scale, max_nfev=20000)
    if not res.success:
        raise MorseFitError(f"Morse fit did not converge: {res.message}")
    De, a, re, u = (float(v) for v in res.x)
    if a < 0:  # V is invariant under a -> -a only when De = 0; keep the physical branch
        a = -a
    bound = De > 0 and a > 0
    if not bound:
        warnings.warn("Morse fit is unbound (De <= 0)")
    we, wxe = spectroscopic_constants(abs(De), a, mass_amu)
    rms = float(np.sqrt(np.mean((morse(r, De, a, re, u) - E) ** 2)))
    return MorseFit(De, a, re, u, we, wxe, rms, bound, mass_amu)


def read_curve_csv(source) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """CSV with header ``r,E[,stderr]``."""
    fh = open(source) if not hasattr(source, "read") else source
    try:
        rows = list(csv.DictReader(fh))
    finally:
        if fh is not source:
            fh.close()
    if not rows or "r" not in rows[0] or "E" not in rows[0]:
        raise ValueError("curve CSV needs columns r,E[,stderr]")
    r = np.array([float(x["r"]) for x in rows])
    E = np.array([float(x["E"]) for x in rows])
    err = None
    if "stderr" in rows[0] and all(x.get("stderr") not in (None, "") for x in rows):
        err = np.array([float(x["stderr"]) for x in rows])
    return r, E, err


# Published reference rows (documentation only; mass convention of the source unknown)
TABLE_I = {
    "DMRG": dict(De=0.031, re=1.223, omega_e=1900.038, omega_e_chi_e=36.409),
    "CPD": dict(De=0.029, re=1.219, omega_e=1928.083, omega_e_chi_e=39.672),
    "CPD K=5": dict(De=0.028, re=1.229, omega_e=1865.462, omega_e_chi_e=38.586),
    "UCCSD": dict(De=0.163, re=1.225, omega_e=2177.988, omega_e_chi_e=9.007),
    "GPS": dict(De=0.029, re=1.237, omega_e=1748.939, omega_e_chi_e=33.247),
}
