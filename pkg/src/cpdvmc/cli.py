"""Command-line entry point: ``cpdvmc <subcommand> --config run.yaml``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 unreadable or malformed input file, 4 numerical failure, 5 resource limit.
Errors are reported on stderr as one JSON object
``{"error": <category>, "message": ...}``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .analysis import MorseFitError, fit_morse, read_curve_csv
from .ansatz import CheckpointError, LookupTable, build_lookup, init_from_hf, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .fock import SectorTooLarge, SystemSpec
from .hamiltonians import (FcidumpError, HubbardSpec, build_hubbard, exchange_matrix, parse_fcidump,
                           write_fcidump)
from .hf import hartree_fock, staggered_guess
from .observables import (GeometryError, central_sites, radial_correlation, read_geometry, szsz_matrix)
from .oracle import ground_state, spin_rdms
from .sampler import SamplingError, run_chains
from .sr import NonFiniteEnergy, SrSolveError, evaluate, optimize, trajectory_csv

log = logging.getLogger("cpdvmc")

EXIT = {"config": 2, "input": 3, "numerical": 4, "resource": 5, "internal": 1}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------------------
# building blocks


def build_system(cfg: RunConfig):
    """(Hamiltonian, SystemSpec, positions or None)."""
    s = cfg.system
    if s.kind == "hubbard":
        boundary = s.boundary if isinstance(s.boundary, str) else tuple(s.boundary)
        H = build_hubbard(HubbardSpec(tuple(s.dims), float(s.t), float(s.U), boundary))
        L = H.L
        nup = s.nup if s.nup is not None else (L + 1) // 2
        ndn = s.ndn if s.ndn is not None else L // 2
        pos = H.spec.positions()
    else:
        H = parse_fcidump(s.fcidump)
        L = H.L
        if s.nup is not None and s.ndn is not None:
            nup, ndn = s.nup, s.ndn
        elif H.nelec is not None:
            ms2 = H.ms2 or 0
            nup, ndn = (H.nelec + ms2) // 2, (H.nelec - ms2) // 2
        else:
            raise CliError("config", "electron counts missing: set system.nup/ndn or NELEC in the FCIDUMP")
        pos = read_geometry(s.geometry) if s.geometry else None
    spec = SystemSpec(L, nup, ndn, s.spin_mode)
    return H, spec, pos


def initial_params(cfg: RunConfig, H, spec: SystemSpec):
    a = cfg.ansatz
    if a.checkpoint_in:
        p = load_checkpoint(a.checkpoint_in)
        if (p.spec.L, p.spec.Nup, p.spec.Ndn) != (spec.L, spec.Nup, spec.Ndn):
            raise CliError("config", "checkpoint does not match the configured system")
        return p
    restricted = a.init == "rhf"
    guess = None
    if not restricted and H.kind == "hubbard":
        guess = staggered_guess(H.spec.positions(), spec.Nup, spec.Ndn)
    hf = hartree_fock(H, spec.Nup, spec.Ndn, restricted=restricted, guess=guess)
    if a.K is None or a.K == spec.L:
        lookup = LookupTable.full(spec.L)
    else:
        source = H.spec if H.kind == "hubbard" else exchange_matrix(H)
        lookup = build_lookup(source, a.K)
    return init_from_hf(hf, spec, a.M, lookup=lookup, sigma=a.sigma, seed=a.seed)


def _outdir(cfg: RunConfig) -> Path:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_path(cfg: RunConfig) -> Path:
    p = Path(cfg.ansatz.checkpoint_out)
    return p if p.is_absolute() else Path(cfg.output) / p


def _load_for_eval(cfg: RunConfig, H, spec):
    path = cfg.ansatz.checkpoint_in or _checkpoint_path(cfg)
    if not Path(path).exists():
        raise CliError("input", f"checkpoint {path} not found; run 'optimize' first or set ansatz.checkpoint_in")
    return initial_params(replace(cfg, ansatz=replace(cfg.ansatz, checkpoint_in=str(path))), H, spec)


# ---------------------------------------------------------------------------
# subcommands


def cmd_optimize(cfg: RunConfig, args) -> int:
    H, spec, _ = build_system(cfg)
    params = initial_params(cfg, H, spec)
    out = _outdir(cfg)
    res = optimize(H, params, cfg.sampler, cfg.optimizer, exact=cfg.exact, threshold=cfg.threshold,
                   output_dir=out)
    (out / "trajectory.csv").write_text(trajectory_csv(res.trajectory))
    save_checkpoint(res.params, _checkpoint_path(cfg))
    if res.trajectory:
        last = res.trajectory[-1]
        print(f"final iteration {last.iter}: E = {last.energy:.10f} +- {last.stderr:.2e}")
    else:
        print("no iterations run; checkpoint holds the initial parameters")
    return 0


def cmd_evaluate(cfg: RunConfig, args) -> int:
    H, spec, _ = build_system(cfg)
    params = _load_for_eval(cfg, H, spec)
    ev = cfg.evaluate
    n_chains = ev.n_chains or cfg.sampler.n_chains
    scfg = replace(cfg.sampler, n_samples=ev.n_samples, n_chains=n_chains)
    res = evaluate(H, params, scfg, ev.n_evaluations, cfg.threshold)
    out = _outdir(cfg)
    with open(out / "evaluation.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["evaluation", "energy", "stderr"])
        for k, (e, s) in enumerate(zip(res.energies, res.stderrs)):
            w.writerow([k, repr(float(e)), repr(float(s))])
    print(f"E = {res.mean:.10f} +- {res.std:.2e} ({ev.n_evaluations} evaluations x {ev.n_samples} samples)")
    return 0


def cmd_correlate(cfg: RunConfig, args) -> int:
    H, spec, pos = build_system(cfg)
    if pos is None:
        raise CliError("config", "correlate needs system.geometry for ab initio systems")
    params = _load_for_eval(cfg, H, spec)
    scfg = replace(cfg.sampler, n_samples=cfg.correlate.n_samples)
    batch = run_chains(params, H, scfg, threshold=cfg.threshold)
    corr, err = szsz_matrix(batch, spec.L)
    bulk = cfg.correlate.bulk_sites or central_sites(pos, 4)
    sc = radial_correlation(corr, pos, bulk, stderr=err)
    out = _outdir(cfg)
    sc.to_csv(out / cfg.correlate.output)
    for r, c, e, n in zip(sc.r_over_d, sc.C, sc.stderr, sc.n_pairs):
        print(f"r/d={r:.4f} C={c:+.6f} +- {e:.1e} ({n} pairs)")
    return 0


def cmd_morsefit(cfg: RunConfig, args) -> int:
    src = args.input or cfg.analysis.input
    if not src:
        raise CliError("config", "morsefit needs --input or analysis.input")
    r, E, err = read_curve_csv(src)
    fit = fit_morse(r, E, err, mass_amu=cfg.analysis.mass_amu)
    out = _outdir(cfg)
    fit.to_csv(out / cfg.analysis.output)
    print(f"De={fit.De:.6f} eV a={fit.a:.6f} 1/A re={fit.re:.6f} A "
          f"we={fit.omega_e:.3f} cm-1 wexe={fit.omega_e_chi_e:.3f} cm-1")
    return 0


def cmd_ed(cfg: RunConfig, args) -> int:
    H, spec, _ = build_system(cfg)
    e0, vec = ground_state(H, spec)
    print(f"E0 = {e0:.12f}")
    if cfg.ed.rdm:
        gamma, _ = spin_rdms(spec, vec)
        out = _outdir(cfg)
        with open(out / "rdm1.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["spin", "i", "j", "value"])
            for s in range(2):
                for i in range(spec.L):
                    for j in range(spec.L):
                        w.writerow([s, i, j, repr(float(gamma[s, i, j]))])
    return 0


def cmd_fcidump_check(cfg: RunConfig, args) -> int:
    src = args.input or cfg.system.fcidump
    if not src:
        raise CliError("config", "fcidump-check needs --input or system.fcidump")
    H = parse_fcidump(src)
    sym = H.check_symmetry()
    again = parse_fcidump(write_fcidump(H))
    roundtrip = bool(np.array_equal(again.h1, H.h1) and np.array_equal(again.h2, H.h2)
                     and again.e_core == H.e_core)
    K = exchange_matrix(H)
    print(json.dumps({"norb": H.L, "nelec": H.nelec, "ms2": H.ms2, "e_core": H.e_core,
                      "symmetric": bool(sym), "roundtrip": roundtrip,
                      "max_exchange_offdiag": float((K.K - np.diag(np.diag(K.K))).max(initial=0.0))}))
    return 0 if sym and roundtrip else 4


COMMANDS = {
    "optimize": cmd_optimize,
    "evaluate": cmd_evaluate,
    "correlate": cmd_correlate,
    "morsefit": cmd_morsefit,
    "ed": cmd_ed,
    "fcidump-check": cmd_fcidump_check,
}


def make_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cpdvmc", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--output", type=str, default=None)
        if name in ("morsefit", "fcidump-check"):
            p.add_argument("--input", type=str, default=None)
    return ap


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if args.seed is not None:
        cfg = replace(cfg, ansatz=replace(cfg.ansatz, seed=args.seed), sampler=replace(cfg.sampler, seed=args.seed))
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError(["--threads: must be >= 1"])
        cfg = replace(cfg, sampler=replace(cfg.sampler, threads=args.threads))
    if args.output is not None:
        cfg = replace(cfg, output=args.output)
    return cfg


def _report(category: str, message: str) -> int:
    print(json.dumps({"error": category, "message": message}), file=sys.stderr)
    return EXIT[category]


def main(argv=None) -> int:
    level = os.environ.get("CPDVMC_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        cfg = _apply_overrides(cfg, args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        return _report("config", "; ".join(exc.problems))
    except CliError as exc:
        return _report(exc.category, str(exc))
    except (FcidumpError, CheckpointError, GeometryError, FileNotFoundError, IsADirectoryError) as exc:
        return _report("input", str(exc))
    except SectorTooLarge as exc:
        return _report("resource", str(exc))
    except (NonFiniteEnergy, SrSolveError, SamplingError, MorseFitError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        return _report("numerical", str(exc))
    except ValueError as exc:
        return _report("config", str(exc))


if __name__ == "__main__":
    sys.exit(main())
