"""Stochastic reconfiguration updates and the optimization loop.

With O the log-derivative rows and w_s the sample weights (1/sqrt(N_S) for
Markov samples, sqrt(p_s) for exact Born weights) the centered quantities are

    X[s, k] = w_s (O[s, k] - mean_k O),   e[s] = 2 w_s (E_loc[s] - mean E_loc)

so that g = X^T e is the energy gradient and S = X^T X the geometric tensor.
Only parameters touched by at least one sample enter the solve; the rest get
a zero update.

The RMSProp variant solves (S + lambda diag(d)) delta = g with
d_k = max(sqrt(v_k), eps_v) and v the running mean of g^2.  This is a
reconstruction: the method is only named by its source.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .ansatz import CpdParams, save_checkpoint
from .observables import blocking_error, energy_estimate
from .sampler import SampleBatch, SamplerConfig, exact_sum, run_chains

log = logging.getLogger(__name__)

VARIANTS = ("standard", "kernel", "rmsprop")
TRAJECTORY_FIELDS = ("iter", "energy", "stderr", "acceptance", "update_norm", "wallclock_s")


class SrSolveError(np.linalg.LinAlgError):
    pass


class NonFiniteEnergy(FloatingPointError):
    def __init__(self, msg, batch=None, dump_path=None):
        super().__init__(msg)
        self.batch = batch
        self.dump_path = dump_path


@dataclass
class SrConfig:
    variant: str = "rmsprop"
    learning_rate: float = 0.02
    diagonal_shift: float = 1e-3
    rms_decay: float = 0.9
    rms_floor: float = 1e-8
    n_iterations: int = 200
    solver: str = "auto"  # auto | parameter | kernel | cg
    lr_decay: float = 0.0  # eta_t = eta / (1 + lr_decay * t)
    backtracking: bool = True  # exact-sum mode only
    max_backtracks: int = 30
    checkpoint_every: int = 0
    cg_tol: float = 1e-10
    max_update_norm: float | None = None  # trust radius at t=0; shrinks with the eta schedule

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown SR variant {self.variant!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.diagonal_shift < 0:
            raise ValueError("diagonal shift must be non-negative")
        if not 0 < self.rms_decay < 1:
            raise ValueError("rms_decay must lie in (0, 1)")
        if self.solver not in ("auto", "parameter", "kernel", "cg"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.max_update_norm is not None and not self.max_update_norm > 0:
            raise ValueError("max_update_norm must be positive")

    def eta(self, t: int) -> float:
        return self.learning_rate / (1.0 + self.lr_decay * t)


# ---------------------------------------------------------------------------
# centered batch


@dataclass
class CenteredBatch:
    """X = diag(w) (O - 1 mean^T) restricted to touched columns, plus e."""

    O: sp.csr_matrix  # (N_S, n_touched)
    mean: np.ndarray
    w: np.ndarray
    e: np.ndarray
    cols: np.ndarray  # touched parameter indices
    n_params: int
    _dense: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_samples(self) -> int:
        return self.O.shape[0]

    def dense(self) -> np.ndarray:
        if self._dense is None:
            self._dense = self.w[:, None] * (self.O.toarray() - self.mean[None, :])
        return self._dense

    def matvec(self, v):
        return self.w * (self.O @ v - self.mean @ v)

    def rmatvec(self, u):
        wu = self.w * u
        return self.O.T @ wu - self.mean * wu.sum()

    def gradient(self) -> np.ndarray:
        return self.scatter(self.rmatvec(self.e))

    def scatter(self, x_touched: np.ndarray) -> np.ndarray:
        out = np.zeros(self.n_params)
        out[self.cols] = x_touched
        return out

    @classmethod
    def from_dense(cls, X: np.ndarray, e: np.ndarray) -> "CenteredBatch":
        """Wrap an already centered matrix (tests and synthetic problems)."""
        X = np.asarray(X, dtype=float)
        n, p = X.shape
        cb = cls(sp.csr_matrix(X), np.zeros(p), np.ones(n), np.asarray(e, dtype=float), np.arange(p), p)
        cb._dense = X
        return cb


def assemble_centered(batch: SampleBatch) -> CenteredBatch:
    if batch.derivs is None:
        raise ValueError("batch has no derivative rows")
    n = len(batch)
    O = batch.derivs.tocsr()
    O.sum_duplicates()
    if batch.weights is None:
        p = np.full(n, 1.0 / n)
    else:
        p = np.asarray(batch.weights, dtype=float)
    cols = np.unique(O.indices)
    O = O[:, cols].tocsr()
    mean = np.asarray(O.T @ p).ravel()
    eloc = batch.local_energies
    ebar = float(np.dot(p, eloc))
    w = np.sqrt(p)
    e = 2.0 * w * (eloc - ebar)
    return CenteredBatch(O, mean, w, e, cols, batch.derivs.n_params)


# ---------------------------------------------------------------------------
# linear solves


def _cholesky_solve(A: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    try:
        c = scipy.linalg.cho_factor(A, check_finite=True)
    except np.linalg.LinAlgError:
        raise SrSolveError(f"{what} is not positive definite; use a diagonal shift lambda > 0") from None
    return scipy.linalg.cho_solve(c, rhs)


def _solve_cg(cb: CenteredBatch, rhs: np.ndarray, lam: float, scale: np.ndarray | None, tol: float):
    n = len(cb.cols)
    s = np.ones(n) if scale is None else scale

    def mv(v):
        return s * cb.rmatvec(cb.matvec(s * v)) + lam * v

    op = spla.LinearOperator((n, n), matvec=mv, dtype=float)
    x, info = spla.cg(op, rhs, rtol=tol, atol=0.0, maxiter=10 * n)
    if info != 0:
        raise SrSolveError(f"conjugate gradient did not converge (info={info})")
    return x


def _choose(cb: CenteredBatch, solver: str) -> str:
    if solver != "auto":
        return solver
    return "kernel" if len(cb.cols) > cb.n_samples else "parameter"


def _update(cb: CenteredBatch, eta: float, lam: float, solver: str, d: np.ndarray | None,
            tol: float = 1e-10) -> np.ndarray:
    """-eta (X^T X + lam D)^-1 X^T e with D = diag(d) (identity if None), scattered to all params.

    Solved as (X~^T X~ + lam I) y = X~^T e with X~ = X D^-1/2 and x = D^-1/2 y.
    """
    if not np.any(cb.e):
        return np.zeros(cb.n_params)
    how = _choose(cb, solver)
    n_cols = len(cb.cols)
    s = np.ones(n_cols) if d is None else 1.0 / np.sqrt(d)
    rhs = s * cb.rmatvec(cb.e)
    if how == "cg":
        y = _solve_cg(cb, rhs, lam, s, tol)
    elif how == "kernel":
        X = cb.dense() * s[None, :]
        T = X @ X.T
        T[np.diag_indices_from(T)] += lam
        y = X.T @ _cholesky_solve(T, cb.e, "X X^T + lambda I")
    else:
        X = cb.dense() * s[None, :]
        S = X.T @ X
        S[np.diag_indices_from(S)] += lam
        y = _cholesky_solve(S, rhs, "S + lambda I")
    return cb.scatter(-eta * s * y)


def sr_update_standard(cb: CenteredBatch, eta: float, lam: float, solver: str = "parameter",
                       tol: float = 1e-10) -> np.ndarray:
    """delta = -eta (X^T X + lam I)^-1 X^T e."""
    if solver == "auto":
        solver = "parameter"
    return _update(cb, eta, lam, solver, None, tol)


def sr_update_kernel(cb: CenteredBatch, eta: float, lam: float) -> np.ndarray:
    """delta = -eta X^T (X X^T + lam I)^-1 e."""
    if lam <= 0:
        raise SrSolveError("the kernel form needs lambda > 0")
    return _update(cb, eta, lam, "kernel", None)


@dataclass
class RmsState:
    v: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "RmsState":
        return cls(np.zeros(n))


def sr_update_rmsprop(cb: CenteredBatch, eta: float, lam: float, state: RmsState, beta: float = 0.9,
                      floor: float = 1e-8, solver: str = "auto", tol: float = 1e-10) -> tuple[np.ndarray, RmsState]:
    g = cb.gradient()
    v = beta * state.v + (1.0 - beta) * g * g
    d = np.maximum(np.sqrt(v[cb.cols]), floor)
    return _update(cb, eta, lam, solver, d, tol), RmsState(v)


def clip_update(delta: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return delta
    n = float(np.linalg.norm(delta))
    return delta * (max_norm / n) if n > max_norm else delta


# ---------------------------------------------------------------------------
# optimization loop


@dataclass
class TrajectoryRecord:
    iter: int
    energy: float
    stderr: float
    acceptance: float
    update_norm: float
    wallclock_s: float


def trajectory_csv(records, include_wallclock: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJECTORY_FIELDS)
    for r in records:
        row = [r.iter, repr(float(r.energy)), repr(float(r.stderr)), repr(float(r.acceptance)),
               repr(float(r.update_norm)), f"{r.wallclock_s:.3f}" if include_wallclock else ""]
        w.writerow(row)
    return buf.getvalue()


@dataclass
class OptimizeResult:
    params: CpdParams
    trajectory: list[TrajectoryRecord]
    chain_state: tuple | None = None


def _dump(batch, directory, it) -> str | None:
    if directory is None:
        return None
    path = Path(directory) / f"nonfinite_batch_iter{it}.npz"
    np.savez(path, up=batch.up, dn=batch.dn, sign=batch.sign, logabs=batch.logabs,
             local_energies=batch.local_energies)
    return str(path)


def optimize(H, params: CpdParams, sampler_cfg: SamplerConfig | None, sr_cfg: SrConfig,
             exact: bool = False, threshold: float = 0.0, callbacks: tuple[Callable, ...] = (),
             output_dir=None) -> OptimizeResult:
    """Run ``sr_cfg.n_iterations`` SR steps.

    Each record holds the energy of the parameters *before* the step.  In
    exact-sum mode an optional backtracking guard halves the step until the
    energy does not increase.  Checkpoints are written to ``output_dir``
    every ``sr_cfg.checkpoint_every`` iterations when both are set.
    """
    if not exact and sampler_cfg is None:
        raise ValueError("sampled optimization needs a SamplerConfig")
    t0 = time.perf_counter()
    traj: list[TrajectoryRecord] = []
    rms = RmsState.zeros(params.n_params)
    state = None
    cached = None
    for it in range(sr_cfg.n_iterations):
        if exact:
            res = cached if cached is not None else exact_sum(params, H, threshold=threshold)
            batch, energy, stderr, acc = res.batch, res.energy, 0.0, 1.0
        else:
            cfg = _iteration_sampler(sampler_cfg, it)
            batch = run_chains(params, H, cfg, with_derivatives=True, threshold=threshold, state=state)
            state = batch.chain_state
            energy = float(np.mean(batch.local_energies))
            stderr = blocking_error(batch.local_energies)
            acc = batch.acceptance
        if not np.isfinite(energy):
            path = _dump(batch, output_dir, it)
            raise NonFiniteEnergy(f"non-finite energy at iteration {it}", batch, path)
        cb = assemble_centered(batch)
        eta = sr_cfg.eta(it)
        if sr_cfg.variant == "rmsprop":
            delta, rms = sr_update_rmsprop(cb, eta, sr_cfg.diagonal_shift, rms, sr_cfg.rms_decay,
                                           sr_cfg.rms_floor, sr_cfg.solver, sr_cfg.cg_tol)
        elif sr_cfg.variant == "kernel":
            delta = sr_update_kernel(cb, eta, sr_cfg.diagonal_shift)
        else:
            delta = sr_update_standard(cb, eta, sr_cfg.diagonal_shift, sr_cfg.solver, sr_cfg.cg_tol)
        if sr_cfg.max_update_norm is not None:
            delta = clip_update(delta, sr_cfg.max_update_norm * eta / sr_cfg.learning_rate)
        theta = params.flat()
        cached = None
        if exact and sr_cfg.backtracking:
            scale = 1.0
            for _ in range(sr_cfg.max_backtracks):
                trial = params.with_flat(theta + scale * delta)
                try:
                    res = exact_sum(trial, H, threshold=threshold)
                except np.linalg.LinAlgError:
                    res = None
                if res is not None and np.isfinite(res.energy) and res.energy <= energy + 1e-14 * abs(energy):
                    break
                scale *= 0.5
            else:
                scale, res = 0.0, None
            delta = scale * delta
            cached = res
        params = params.with_flat(theta + delta)
        rec = TrajectoryRecord(it, energy, stderr, acc, float(np.linalg.norm(delta)), time.perf_counter() - t0)
        traj.append(rec)
        log.info("iter %d E=%.10f +- %.2e acc=%.3f |d|=%.3e", it, energy, stderr, acc, rec.update_norm)
        for cb_fn in callbacks:
            cb_fn(rec, params)
        if output_dir is not None and sr_cfg.checkpoint_every and (it + 1) % sr_cfg.checkpoint_every == 0:
            save_checkpoint(params, Path(output_dir) / f"checkpoint_{it + 1:05d}.cpdb")
    return OptimizeResult(params, traj, state)


def _iteration_sampler(cfg: SamplerConfig, it: int) -> SamplerConfig:
    return replace(cfg, seed=int(np.random.SeedSequence([cfg.seed, it]).generate_state(1)[0]))


@dataclass
class Evaluation:
    mean: float
    std: float
    energies: np.ndarray
    stderrs: np.ndarray


def evaluate(H, params: CpdParams, sampler_cfg: SamplerConfig, n_evaluations: int = 50,
             threshold: float = 0.0) -> Evaluation:
    """Repeated independent energy evaluations with fresh seeds; error = spread across them."""
    energies, errs = [], []
    for k in range(n_evaluations):
        seed = int(np.random.SeedSequence([sampler_cfg.seed, 10**6 + k]).generate_state(1)[0])
        b = run_chains(params, H, replace(sampler_cfg, seed=seed), threshold=threshold)
        energies.append(float(np.mean(b.local_energies)))
        errs.append(blocking_error(b.local_energies))
    mean, std = energy_estimate(np.array(energies))
    return Evaluation(mean, std, np.array(energies), np.array(errs))
