"""Metropolis-Hastings sampling of |psi|^2 in a fixed (Nup, Ndn) sector.

Every move type proposes from an index set whose size depends only on the
sector, so the kernel is symmetric and the acceptance ratio is just
|psi(n')/psi(n)|^2.  Draws that land on an illegal target (occupied site,
edge of an open lattice, wrong site pattern for an exchange) count as
rejections.

Chains are grouped into fixed-size blocks; each block owns an RNG stream
seeded from (seed, block index) and is advanced in lockstep with batched
amplitude evaluations.  Output order is block-major, then chain, then time,
so it does not depend on how many worker threads run the blocks.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .ansatz import CpdParams, DerivativeRows, EvalContext, hf_configuration, log_amplitudes, log_derivative_rows
from .fock import Config, Excitation, SectorTooLarge, SystemSpec, sector_arrays
from .hamiltonians import local_energies

log = logging.getLogger(__name__)

MOVES = ("hop", "single", "double", "exchange")
HUBBARD_MIX = {"hop": 0.8, "single": 0.1, "double": 0.0, "exchange": 0.1}
ABINITIO_MIX = {"hop": 0.0, "single": 0.7, "double": 0.3, "exchange": 0.0}


class SamplingError(RuntimeError):
    pass


def default_mix(H) -> dict[str, float]:
    return dict(HUBBARD_MIX if H.kind == "hubbard" else ABINITIO_MIX)


@dataclass
class SamplerConfig:
    n_samples: int = 4096
    n_chains: int = 64
    burn_in_sweeps: int = 10
    moves_per_sample: int | None = None  # attempted moves between samples; default one sweep (L)
    move_mix: dict | None = None  # default depends on the Hamiltonian
    seed: int = 0
    engine: str = "batch"  # or "context"
    chains_per_block: int = 16
    threads: int = 1
    init: str = "hf"  # or "random"
    warm_burn_in_sweeps: int = 1  # burn-in when continuing chains from a previous batch

    def __post_init__(self):
        if self.n_samples <= 0 or self.n_chains <= 0:
            raise ValueError("n_samples and n_chains must be positive")
        if self.n_samples % self.n_chains:
            raise ValueError("n_samples must be divisible by n_chains")
        if self.engine not in ("batch", "context"):
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.init not in ("hf", "random"):
            raise ValueError(f"unknown chain init {self.init!r}")
        if self.move_mix is not None:
            self.move_mix = validate_mix(self.move_mix)

    def mix_for(self, H) -> dict[str, float]:
        return validate_mix(self.move_mix if self.move_mix is not None else default_mix(H))


def validate_mix(mix: dict) -> dict[str, float]:
    unknown = set(mix) - set(MOVES)
    if unknown:
        raise ValueError(f"unknown move types {sorted(unknown)}")
    mix = {k: float(mix.get(k, 0.0)) for k in MOVES}
    if any(v < 0 for v in mix.values()) or abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ValueError("move probabilities must be non-negative and sum to 1")
    return mix


@dataclass
class SampleBatch:
    up: np.ndarray
    dn: np.ndarray
    sign: np.ndarray
    logabs: np.ndarray
    local_energies: np.ndarray
    derivs: DerivativeRows | None = None
    acceptance: float = float("nan")
    chain_state: tuple[np.ndarray, np.ndarray] | None = None
    weights: np.ndarray | None = None  # exact Born weights; None for Markov samples

    def __len__(self):
        return len(self.up)

    def configs(self) -> list[Config]:
        return [Config(int(u), int(d)) for u, d in zip(self.up, self.dn)]


# ---------------------------------------------------------------------------
# proposals


@dataclass
class MoveSet:
    """Sector-dependent data shared by the proposal kernels."""

    spec: SystemSpec
    mix: dict[str, float]
    neighbors: np.ndarray | None = None  # (L, z) lattice neighbor table, -1 off lattice
    probs: np.ndarray = field(init=False)

    def __post_init__(self):
        s = self.spec
        legal = {
            "hop": self.neighbors is not None and self.neighbors.shape[1] > 0
            and any(0 < n < s.L for n in (s.Nup, s.Ndn)),
            "single": any(0 < n < s.L for n in (s.Nup, s.Ndn)),
            "double": any(n >= 2 and s.L - n >= 2 for n in (s.Nup, s.Ndn))
            or (0 < s.Nup < s.L and 0 < s.Ndn < s.L),
            "exchange": s.Nup > 0 and s.Ndn > 0 and s.L >= 2,
        }
        if self.mix["hop"] > 0 and self.neighbors is None:
            raise ValueError("hop moves need a lattice")
        w = np.array([self.mix[m] if legal[m] else 0.0 for m in MOVES])
        if w.sum() == 0:
            raise SamplingError("no legal move type for this sector and move mix")
        self.probs = w / w.sum()

    @classmethod
    def for_hamiltonian(cls, H, spec: SystemSpec, mix: dict[str, float]) -> "MoveSet":
        nb = H.spec.neighbor_slots() if H.kind == "hubbard" else None
        return cls(spec, mix, nb)


def _nth_set_bit(masks: np.ndarray, k: np.ndarray, L: int) -> np.ndarray:
    """Index of the k-th (0-based) set bit of each mask."""
    bits = (masks[:, None] >> np.arange(L, dtype=np.int64)) & 1
    csum = np.cumsum(bits, axis=1)
    return np.argmax((csum == (k[:, None] + 1)) & (bits == 1), axis=1).astype(np.int64)


def _random_electron(rng, up, dn, nup, ndn, L, allowed_up=True, allowed_dn=True):
    """Uniform electron among the allowed spins: returns (spin, site)."""
    n_up = nup if allowed_up else 0
    n_dn = ndn if allowed_dn else 0
    k = rng.integers(0, n_up + n_dn, size=len(up))
    spin = (k >= n_up).astype(np.int64)
    site_up = _nth_set_bit(up, np.clip(k, 0, max(nup - 1, 0)), L)
    site_dn = _nth_set_bit(dn, np.clip(k - n_up, 0, max(ndn - 1, 0)), L)
    return spin, np.where(spin == 0, site_up, site_dn)


def _flip(up, dn, spin, a, b, ok):
    """Move an electron of ``spin`` from site a to site b where ok."""
    one = np.int64(1)
    delta = np.where(ok, (one << a) | (one << b), 0)
    return np.where(spin == 0, up ^ delta, up), np.where(spin == 1, dn ^ delta, dn)


def propose_batch(up: np.ndarray, dn: np.ndarray, rng: np.random.Generator,
                  moves: MoveSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One proposal per chain; returns (new_up, new_dn, valid)."""
    s = moves.spec
    L, nup, ndn = s.L, s.Nup, s.Ndn
    B = len(up)
    kind = rng.choice(len(MOVES), size=B, p=moves.probs)
    new_up, new_dn = up.copy(), dn.copy()
    valid = np.zeros(B, dtype=bool)
    one = np.int64(1)

    sel = np.flatnonzero(kind == 0)
    if len(sel):
        nb = moves.neighbors
        u, d = up[sel], dn[sel]
        spin, a = _random_electron(rng, u, d, nup, ndn, L)
        b = nb[a, rng.integers(0, nb.shape[1], size=len(sel))]
        m = np.where(spin == 0, u, d)
        ok = (b >= 0) & (((m >> np.maximum(b, 0)) & 1) == 0)
        b = np.where(ok, b, a)
        new_up[sel], new_dn[sel] = _flip(u, d, spin, a, b, ok)
        valid[sel] = ok

    sel = np.flatnonzero(kind == 1)
    if len(sel):
        u, d = up[sel], dn[sel]
        spin, a = _random_electron(rng, u, d, nup, ndn, L, 0 < nup < L, 0 < ndn < L)
        holes = np.where(spin == 0, L - nup, L - ndn)
        k = (rng.random(len(sel)) * holes).astype(np.int64)
        m = np.where(spin == 0, u, d)
        full = (one << L) - 1
        b = _nth_set_bit(~m & full, k, L)
        new_up[sel], new_dn[sel] = _flip(u, d, spin, a, b, np.ones(len(sel), bool))
        valid[sel] = True

    sel = np.flatnonzero(kind == 2)
    if len(sel):
        u, d = up[sel], dn[sel]
        n = nup + ndn
        n_b = len(sel)
        # uniform unordered electron pair
        i = rng.integers(0, n, size=n_b)
        j = rng.integers(0, n - 1, size=n_b)
        j = np.where(j >= i, j + 1, j)
        i, j = np.minimum(i, j), np.maximum(i, j)
        spin_i, spin_j = (i >= nup).astype(np.int64), (j >= nup).astype(np.int64)
        site_i = np.where(spin_i == 0, _nth_set_bit(u, np.minimum(i, max(nup - 1, 0)), L),
                          _nth_set_bit(d, np.clip(i - nup, 0, max(ndn - 1, 0)), L))
        site_j = np.where(spin_j == 0, _nth_set_bit(u, np.minimum(j, max(nup - 1, 0)), L),
                          _nth_set_bit(d, np.clip(j - nup, 0, max(ndn - 1, 0)), L))
        full = (one << L) - 1
        hu, hd = ~u & full, ~d & full
        nh_i = np.where(spin_i == 0, L - nup, L - ndn)
        nh_j = np.where(spin_j == 0, L - nup, L - ndn)
        same = spin_i == spin_j
        # holes: for a same-spin pair two distinct holes, else one hole per spin
        x = (rng.random(n_b) * nh_i).astype(np.int64)
        y_same = (rng.random(n_b) * np.maximum(nh_i - 1, 1)).astype(np.int64)
        y_other = (rng.random(n_b) * np.maximum(nh_j, 1)).astype(np.int64)
        ok = np.where(same, nh_i >= 2, (nh_i >= 1) & (nh_j >= 1))
        hm_i = np.where(spin_i == 0, hu, hd)
        hm_j = np.where(spin_j == 0, hu, hd)
        ti = _nth_set_bit(hm_i, np.minimum(x, np.maximum(nh_i - 1, 0)), L)
        y = np.where(same, np.where(y_same >= x, y_same + 1, y_same), y_other)
        tj = _nth_set_bit(hm_j, np.minimum(y, np.maximum(nh_j - 1, 0)), L)
        ti, tj = np.where(ok, ti, site_i), np.where(ok, tj, site_j)
        nu, nd = _flip(u, d, spin_i, site_i, ti, ok)
        nu, nd = _flip(nu, nd, spin_j, site_j, tj, ok)
        new_up[sel], new_dn[sel] = nu, nd
        valid[sel] = ok

    sel = np.flatnonzero(kind == 3)
    if len(sel):
        u, d = up[sel], dn[sel]
        a = rng.integers(0, L, size=len(sel))
        b = rng.integers(0, L - 1, size=len(sel))
        b = np.where(b >= a, b + 1, b)
        sa = ((u >> a) & 1) + 2 * ((d >> a) & 1)
        sb = ((u >> b) & 1) + 2 * ((d >> b) & 1)
        ok = ((sa == 1) & (sb == 2)) | ((sa == 2) & (sb == 1))
        delta = np.where(ok, (one << a) | (one << b), 0)
        new_up[sel], new_dn[sel] = u ^ delta, d ^ delta
        valid[sel] = ok
    return new_up, new_dn, valid


def excitation_between(old: Config, new: Config, L: int) -> Excitation | None:
    """The excitation mapping ``old`` to ``new`` (annihilators in ascending order)."""
    a, b = old.combined(L), new.combined(L)
    removed = [p for p in range(2 * L) if (a & ~b) >> p & 1]
    added = [p for p in range(2 * L) if (b & ~a) >> p & 1]
    if not removed:
        return None
    if len(removed) == 1:
        return Excitation.single(removed[0], added[0])
    if len(removed) == 2:
        return Excitation.double(removed[0], removed[1], added[0], added[1])
    raise ValueError("configurations differ by more than two electrons")


def propose_move(cfg: Config, rng: np.random.Generator, moves: MoveSet) -> tuple[Excitation | None, float]:
    """Single-chain proposal.  Returns (excitation, proposal ratio); the excitation
    is None when the draw hit an illegal target, which the caller treats as a
    rejected step.  The ratio is always 1 for these kernels.
    """
    nu, nd, ok = propose_batch(np.array([cfg.up], dtype=np.int64), np.array([cfg.dn], dtype=np.int64), rng, moves)
    if not ok[0]:
        return None, 1.0
    return excitation_between(cfg, Config(int(nu[0]), int(nd[0])), moves.spec.L), 1.0


def mh_step(ctx: EvalContext, rng: np.random.Generator, moves: MoveSet) -> bool:
    ex, ratio = propose_move(ctx.cfg, rng, moves)
    u = rng.random()
    if ex is None:
        return False
    prop = ctx.propose(ex)
    if prop.sign == 0:
        if ctx.sign == 0:
            ctx.rebuild()
        return False
    if ctx.sign == 0 or np.log(u) < np.log(ratio) + 2.0 * (prop.logabs - ctx.logabs):
        ctx.commit(prop)
        return True
    return False


# ---------------------------------------------------------------------------
# chains


def initial_configs(params: CpdParams, n: int, how: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    spec = params.spec
    if how == "hf":
        cfg = hf_configuration(params)
        return np.full(n, cfg.up, dtype=np.int64), np.full(n, cfg.dn, dtype=np.int64)
    L = spec.L
    up = np.array([_random_mask(rng, L, spec.Nup) for _ in range(n)], dtype=np.int64)
    dn = np.array([_random_mask(rng, L, spec.Ndn) for _ in range(n)], dtype=np.int64)
    return up, dn


def _random_mask(rng, L, n):
    m = 0
    for s in rng.choice(L, size=n, replace=False):
        m |= 1 << int(s)
    return m


def _block_seeds(seed: int, n_blocks: int):
    return [np.random.default_rng(np.random.SeedSequence([seed, b])) for b in range(n_blocks)]


def _run_block_batch(params, moves, rng, up, dn, n_keep, stride, burn):
    sign, logabs = log_amplitudes(params, up, dn)
    out_up = np.empty((len(up), n_keep), dtype=np.int64)
    out_dn = np.empty_like(out_up)
    out_s = np.empty((len(up), n_keep))
    out_l = np.empty((len(up), n_keep))
    n_acc = n_try = 0
    step, kept = 0, 0
    total = burn + n_keep * stride
    while kept < n_keep:
        nu, nd, ok = propose_batch(up, dn, rng, moves)
        u = rng.random(len(up))
        if ok.any():
            s_new, l_new = log_amplitudes(params, nu[ok], nd[ok])
            cur_zero = sign[ok] == 0
            with np.errstate(invalid="ignore"):
                acc = (s_new != 0) & (cur_zero | (np.log(u[ok]) < 2.0 * (l_new - logabs[ok])))
            idx = np.flatnonzero(ok)[acc]
            up[idx], dn[idx] = nu[idx], nd[idx]
            sign[idx], logabs[idx] = s_new[acc], l_new[acc]
            if step >= burn:
                n_acc += int(acc.sum())
        if step >= burn:
            n_try += len(up)
        step += 1
        if step > burn and (step - burn) % stride == 0:
            if np.any(sign == 0):
                if step > 10 * total:
                    raise SamplingError("chains stuck on zero-amplitude configurations")
                continue  # redraw: chain has not reached the support yet
            out_up[:, kept], out_dn[:, kept] = up, dn
            out_s[:, kept], out_l[:, kept] = sign, logabs
            kept += 1
    return out_up, out_dn, out_s, out_l, n_acc, n_try, (up, dn)


def _run_block_context(params, moves, rng, up, dn, n_keep, stride, burn):
    B = len(up)
    out = [np.empty((B, n_keep), dtype=np.int64) for _ in range(2)] + [np.empty((B, n_keep)) for _ in range(2)]
    n_acc = n_try = 0
    end_up, end_dn = up.copy(), dn.copy()
    for c in range(B):
        ctx = EvalContext(params, Config(int(up[c]), int(dn[c])))
        kept, step = 0, 0
        while kept < n_keep:
            acc = mh_step(ctx, rng, moves)
            if step >= burn:
                n_acc += acc
                n_try += 1
            step += 1
            if step > burn and (step - burn) % stride == 0:
                if ctx.sign == 0:
                    continue
                out[0][c, kept], out[1][c, kept] = ctx.cfg.up, ctx.cfg.dn
                out[2][c, kept], out[3][c, kept] = ctx.sign, ctx.logabs
                kept += 1
        end_up[c], end_dn[c] = ctx.cfg.up, ctx.cfg.dn
    return (*out, n_acc, n_try, (end_up, end_dn))


def run_chains(params: CpdParams, H, cfg: SamplerConfig, with_derivatives: bool = False,
               threshold: float = 0.0, state: tuple[np.ndarray, np.ndarray] | None = None) -> SampleBatch:
    """Sample N_S configurations from |psi|^2.

    ``state`` optionally carries chain end points from a previous call (warm
    start); otherwise chains start at the HF configuration or random sector
    configurations per ``cfg.init``.
    """
    spec = params.spec
    L = spec.L
    moves = MoveSet.for_hamiltonian(H, spec, cfg.mix_for(H))
    stride = cfg.moves_per_sample or L
    burn = cfg.burn_in_sweeps * L
    n_keep = cfg.n_samples // cfg.n_chains
    block = max(1, min(cfg.chains_per_block, cfg.n_chains))
    bounds = [(b, min(b + block, cfg.n_chains)) for b in range(0, cfg.n_chains, block)]
    rngs = _block_seeds(cfg.seed, len(bounds))
    if state is None:
        init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2**31]))
        up0, dn0 = initial_configs(params, cfg.n_chains, cfg.init, init_rng)
    else:
        up0, dn0 = (np.array(a, dtype=np.int64) for a in state)
        if len(up0) != cfg.n_chains:
            raise ValueError("warm-start state has the wrong number of chains")
        burn = cfg.warm_burn_in_sweeps * L
    runner = _run_block_batch if cfg.engine == "batch" else _run_block_context

    def job(k):
        lo, hi = bounds[k]
        return runner(params, moves, rngs[k], up0[lo:hi].copy(), dn0[lo:hi].copy(), n_keep, stride, burn)

    t0 = time.perf_counter()
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as ex:
            results = list(ex.map(job, range(len(bounds))))
    else:
        results = [job(k) for k in range(len(bounds))]
    up = np.concatenate([r[0].ravel() for r in results])
    dn = np.concatenate([r[1].ravel() for r in results])
    sign = np.concatenate([r[2].ravel() for r in results])
    logabs = np.concatenate([r[3].ravel() for r in results])
    n_acc = sum(r[4] for r in results)
    n_try = sum(r[5] for r in results)
    end = (np.concatenate([r[6][0] for r in results]), np.concatenate([r[6][1] for r in results]))
    t1 = time.perf_counter()
    eloc = local_energies(H, up, dn, lambda u, d: log_amplitudes(params, u, d), threshold,
                          logpsi=(sign, logabs))
    derivs = log_derivative_rows(params, up, dn) if with_derivatives else None
    log.debug("sampling %.3fs, estimators %.3fs", t1 - t0, time.perf_counter() - t1)
    return SampleBatch(up, dn, sign, logabs, eloc, derivs, n_acc / max(n_try, 1), end)


# ---------------------------------------------------------------------------
# exact enumeration


@dataclass
class ExactSum:
    energy: float
    gradient: np.ndarray
    batch: SampleBatch


def exact_sum(params: CpdParams, H, spec: SystemSpec | None = None, threshold: float = 0.0,
              with_derivatives: bool = True, max_configs: int = 200_000, amplitude=None) -> ExactSum:
    """Born-weighted expectations over the whole sector.

    ``amplitude(up, dn) -> (sign, log|psi|)`` may replace the ansatz (e.g. an
    exact eigenvector lookup); derivatives then are unavailable.
    """
    spec = spec or params.spec
    if spec.sector_size > max_configs:
        raise SectorTooLarge(f"sector of {spec.sector_size} configurations exceeds exact-sum budget")
    up, dn = sector_arrays(spec)
    amp = amplitude or (lambda u, d: log_amplitudes(params, u, d))
    sign, logabs = amp(up, dn)
    keep = sign != 0
    up, dn, sign, logabs = up[keep], dn[keep], sign[keep], logabs[keep]
    w = np.exp(2.0 * (logabs - logabs.max()))
    w /= w.sum()
    eloc = local_energies(H, up, dn, amp, threshold, logpsi=(sign, logabs))
    energy = float(np.dot(w, eloc))
    derivs = None
    grad = np.zeros(params.n_params if params is not None else 0)
    if with_derivatives and amplitude is None:
        derivs = log_derivative_rows(params, up, dn)
        O = derivs.tocsr()
        de = w * (eloc - energy)
        grad = 2.0 * (O.T @ de)
    batch = SampleBatch(up, dn, sign, logabs, eloc, derivs, 1.0, None, w)
    return ExactSum(energy, np.asarray(grad).ravel(), batch)
