"""Command-line front end: crystal documents in, JSON/CSV reports out.

Exit codes: 0 success, 2 validation problem (bad flags, missing or malformed
input), 3 analysis failure (unstable crystal, nonconverged solve, failed
measurement).  Every JSON report carries "schema_version" and the seed it
ran with.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import _kernels
from .cauchyborn import (CBError, cb_consistency, claimant_check,
                         elastic_tensor, reference_state)
from .crystals import Crystal, CrystalError, available_presets, load_crystal
from .energy import save_field, load_field
from .greens import (GreensError, greens_blocks, reconstruct_solution,
                     solution_decay_report)
from .lattice import LatticeError
from .potential import PotentialError
from .relax import RelaxError, relax, residual_f
from .spectral import (GREENS_BLOCKS, BrillouinGrid, SpectralError, phonons,
                       stability_certificate)

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FAILED = 3


# ---------------------------------------------------------------------------
# plumbing
# ---------------------------------------------------------------------------


def _apply_threads(threads):
    if threads is None:
        return
    if threads < 1:
        raise CrystalError("--threads must be a positive integer")
    if _kernels.backend_name() == "numba":
        import numba
        numba.set_num_threads(threads)


def _emit_json(args, payload: dict, path=None) -> dict:
    payload = {"schema_version": SCHEMA_VERSION, "seed": args.seed, **payload}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    if not args.quiet:
        print(text)
    return payload


def _fit_dict(fit) -> dict:
    return {
        "exponent": fit.exponent,
        "predicted": fit.predicted,
        "gap": fit.gap,
        "fit_rms": fit.residual,
        "R_max": fit.R_max,
        "annuli": len(fit.radii),
    }


def _load(args) -> Crystal:
    return load_crystal(args.crystal)


def _preset_path_hint(text: str) -> str:
    return f"{text!r} (presets: {', '.join(available_presets())})"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_stability(args) -> int:
    cr = _load(args)
    cert = stability_certificate(BrillouinGrid(cr.spec, args.grid), cr.pot)
    _emit_json(args, {"crystal": cr.name, "certificate": cert}, args.out)
    return EXIT_OK if cert["pass"] else EXIT_FAILED


def cmd_phonon(args) -> int:
    cr = _load(args)
    kgrid = BrillouinGrid(cr.spec, args.grid)
    spectrum = phonons(kgrid, cr.pot)
    table = spectrum.table()
    d = cr.spec.d
    header = [f"k{i}" for i in range(d)] \
        + [f"lambda{j}" for j in range(table.shape[1] - d)]
    out = args.out or "spectrum.csv"
    with open(out, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in table:
            wr.writerow([repr(float(x)) for x in row])
    if not args.quiet:
        lo = float(spectrum.eigenvalues.min())
        print(f"wrote {out}: {table.shape[0]} nodes x "
              f"{table.shape[1] - d} branches, min eigenvalue {lo:.6g}")
    return EXIT_OK


def cmd_relax(args) -> int:
    cr = _load(args)
    payload = {"crystal": cr.name, "R_win": args.rwin, "tol": args.tol}
    try:
        u, rep = relax(cr.pot, cr.defect, args.rwin, tol=args.tol,
                       max_iter=args.max_iter)
    except RelaxError as exc:
        payload["converged"] = False
        payload["error"] = str(exc)
        if exc.certificate is not None:
            payload["certificate"] = exc.certificate
        _emit_json(args, payload, args.report)
        return EXIT_FAILED
    if args.out:
        save_field(args.out, u)
        payload["field"] = str(args.out)
    payload.update(rep.as_dict())
    if rep.stability is not None:
        payload["certificate"] = rep.stability
    _emit_json(args, payload, args.report)
    return EXIT_OK if rep.converged else EXIT_FAILED


def cmd_cb(args) -> int:
    cr = _load(args)
    payload = {"crystal": cr.name, "check": args.check}
    if args.check == "claimant":
        tensor = elastic_tensor(reference_state(cr.spec)[0], cr.pot)
        nprng = np.random.default_rng(args.seed)
        worst = 0.0
        worst_probe = None
        for _ in range(args.probes):
            k = nprng.standard_normal(cr.spec.d)
            a = nprng.standard_normal(cr.spec.n)
            lhs, rhs, gap = claimant_check(k, a, cr.pot, tensor)
            if gap > worst:
                worst = gap
                worst_probe = {"k": k.tolist(), "a": a.tolist(),
                               "lhs": lhs, "rhs": rhs}
        payload.update(probes=args.probes, max_relgap=worst,
                       worst_probe=worst_probe)
    elif args.check == "consistency":
        table = cb_consistency(cr.pot)
        payload.update(table)
    else:  # tensor
        tensor = elastic_tensor(reference_state(cr.spec)[0], cr.pot)
        A = tensor.A
        sym = float(np.abs(A - A.transpose(2, 3, 0, 1)).max())
        payload.update(shape=list(A.shape), tensor=A.tolist(),
                       major_symmetry_gap=sym,
                       min_matrix_eigenvalue=float(
                           np.linalg.eigvalsh(tensor.matrix()).min()))
    _emit_json(args, payload, args.out)
    return EXIT_OK


def _kernel_fits(blocks, names):
    """Decay fits: one mesh-edge difference for Q_inv, none for the rest.

    Blocks with an empty shift sector (single-species crystals) carry no
    data and are skipped rather than fitted to an all-zero field.
    """
    d = blocks.spec.d
    e0 = tuple([1] + [0] * (d - 1))
    out = {}
    for name in names:
        if blocks.block(name).size == 0:
            out[name] = None
            continue
        rhos = [e0] if name == "Q_inv" else []
        out[name] = blocks.fit(name, rhos)
    return out


def cmd_greens(args) -> int:
    names = list(GREENS_BLOCKS) if args.blocks == "all" \
        else [s.strip() for s in args.blocks.split(",") if s.strip()]
    bad = [n for n in names if n not in GREENS_BLOCKS]
    if bad:
        raise CrystalError(f"unknown kernel block(s) {bad}; "
                           f"expected subset of {list(GREENS_BLOCKS)}")
    cr = _load(args)
    blocks = greens_blocks(cr.pot, args.N)
    payload = {"crystal": cr.name, "N": args.N, "blocks": {}}
    fits = {}
    if args.fit:
        fits = _kernel_fits(blocks, names)
        for name, fit in fits.items():
            payload["blocks"][name] = _fit_dict(fit) if fit is not None \
                else {"skipped": "empty block (single species)"}
    else:
        for name in names:
            payload["blocks"][name] = {
                "shape": list(blocks.block(name).shape)}
    csv_path = args.csv
    if csv_path is None and args.out and fits:
        csv_path = str(Path(args.out).with_suffix(".csv"))
    if csv_path and fits:
        with open(csv_path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["block", "r", "sup", "log10_r", "log10_sup"])
            for name, fit in fits.items():
                if fit is None:
                    continue
                for row in fit.table():
                    wr.writerow([name] + [repr(float(x)) for x in row])
        payload["csv"] = csv_path
    _emit_json(args, payload, args.out)
    return EXIT_OK


def _orders(text: str) -> list[int]:
    try:
        orders = sorted({int(s) for s in text.split(",") if s.strip()})
    except ValueError as exc:
        raise CrystalError(f"--orders must be a comma list of integers: {exc}")
    if not orders or any(j < 1 for j in orders):
        raise CrystalError("--orders must contain integers >= 1")
    return orders


def _field_view(data):
    """Wrap loaded field-file contents in the window/spec shape the
    measurement code expects (radii come from F, blocks from S; the stencil
    set is not needed)."""
    spec = SimpleNamespace(d=data.d, n=data.n, S=data.S, F=data.F)
    window = SimpleNamespace(spec=spec, coords=data.coords,
                             R_win=data.R_win, count=len(data.coords))
    return SimpleNamespace(window=window, values=data.values)


def _decay_payload(u, orders) -> dict:
    rep = solution_decay_report(u, orders_U=tuple(orders),
                                orders_p=tuple(j - 1 for j in orders))
    out = {"N": rep["N"], "R_win": rep["R_win"], "U": {}, "p": {}}
    for j, fit in rep["U"].items():
        out["U"][str(j)] = _fit_dict(fit)
    for j, fit in rep["p"].items():
        out["p"][str(j)] = _fit_dict(fit)
    return out


def cmd_decay(args) -> int:
    data = load_field(args.field)
    u = _field_view(data)
    if not np.any(data.values):
        _emit_json(args, {"field": str(args.field),
                          "skipped": "field is identically zero"}, args.out)
        return EXIT_OK
    payload = {"field": str(args.field)}
    payload.update(_decay_payload(u, _orders(args.orders)))
    _emit_json(args, payload, args.out)
    return EXIT_OK


def cmd_study(args) -> int:
    cr = _load(args)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    stages: dict = {}
    payload = {"crystal": cr.name, "R_win": args.rwin, "N": args.N,
               "stages": stages}

    def finish(code: int) -> int:
        _emit_json(args, payload, outdir / "study.json")
        return code

    cert = stability_certificate(BrillouinGrid(cr.spec, args.grid), cr.pot)
    stages["stability"] = cert
    if not cert["pass"]:
        return finish(EXIT_FAILED)

    try:
        u, rep = relax(cr.pot, cr.defect, args.rwin, tol=args.tol,
                       check_stability=False)
    except RelaxError as exc:
        stages["relax"] = {"converged": False, "error": str(exc)}
        return finish(EXIT_FAILED)
    save_field(outdir / "field.bin", u)
    stages["relax"] = rep.as_dict()
    if not rep.converged:
        return finish(EXIT_FAILED)

    f = residual_f(u, cr.pot, cr.defect)
    norms = f.site_norms()
    stages["residual"] = {
        "quad_order": f.quad_order,
        "quad_delta": f.quad_delta,
        "sup": float(norms.max()) if norms.size else 0.0,
        "active_sites": int(np.count_nonzero(norms > 0.0)),
    }

    trivial = cr.defect is None or cr.defect.is_empty() \
        or not np.any(u.values)
    if trivial:
        stages["decay"] = {"skipped": "no defect: the relaxed field is "
                                      "identically zero, nothing to fit"}
    else:
        try:
            stages["decay"] = _decay_payload(u, (1, 2, 3))
        except GreensError as exc:
            stages["decay"] = {"error": str(exc)}
            return finish(EXIT_FAILED)

    blocks = greens_blocks(cr.pot, args.N, check_stability=False)
    try:
        stages["greens"] = {
            name: _fit_dict(fit) if fit is not None
            else {"skipped": "empty block (single species)"}
            for name, fit in _kernel_fits(blocks, GREENS_BLOCKS).items()}
    except GreensError as exc:
        stages["greens"] = {"error": str(exc)}
        return finish(EXIT_FAILED)

    if trivial:
        stages["reconstruction"] = {"skipped": "zero residual load"}
        return finish(EXIT_OK)
    rec = reconstruct_solution(f, blocks)
    w = u.window
    limit = 0.5 * min(w.R_win, args.N // 2)
    keep = w.radii() <= limit
    idx = tuple((w.coords[keep, i] % args.N) for i in range(cr.spec.d))
    gap = float(np.abs(rec.species_field()[idx] - u.values[keep]).max())
    stages["reconstruction"] = {
        "solve_residual_max": rec.residual_max,
        "relax_gap_sup": gap,
        "compare_radius": limit,
    }
    return finish(EXIT_OK)


# ---------------------------------------------------------------------------
# parser / dispatch
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="seed for randomized sweeps (recorded in reports)")
    common.add_argument("--threads", type=int, default=None,
                        help="worker threads for the compiled kernels")
    common.add_argument("--quiet", action="store_true",
                        help="suppress report echo on stdout")

    parser = argparse.ArgumentParser(
        prog="latdef",
        description="Point-defect analysis in multilattice crystals.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    p = add("stability", cmd_stability,
            "phonon stability certificate over a Brillouin-zone grid")
    p.add_argument("--crystal", required=True,
                   help="crystal document (JSON path or preset name)")
    p.add_argument("--grid", type=int, default=64, help="grid order N")
    p.add_argument("--out", help="certificate JSON path")

    p = add("phonon", cmd_phonon, "dispersion table over a zone grid")
    p.add_argument("--crystal", required=True)
    p.add_argument("--grid", type=int, default=32)
    p.add_argument("--out", help="CSV path (default spectrum.csv)")

    p = add("relax", cmd_relax, "solve the defect equilibrium on a window")
    p.add_argument("--crystal", required=True)
    p.add_argument("--rwin", type=int, default=32, help="window radius")
    p.add_argument("--tol", type=float, default=1e-9,
                   help="dual-norm gradient tolerance")
    p.add_argument("--max-iter", type=int, default=50)
    p.add_argument("--out", help="binary field container path")
    p.add_argument("--report", help="solve report JSON path")

    p = add("cb", cmd_cb, "continuum (Cauchy-Born) checks")
    p.add_argument("--crystal", required=True)
    p.add_argument("--check", choices=("claimant", "consistency", "tensor"),
                   default="claimant")
    p.add_argument("--probes", type=int, default=200,
                   help="random (k, a) probes for --check claimant")
    p.add_argument("--out", help="report JSON path")

    p = add("greens", cmd_greens, "lattice Green's-kernel blocks and decay fits")
    p.add_argument("--crystal", required=True)
    p.add_argument("--N", type=int, default=256, help="supercell order")
    p.add_argument("--blocks", default="all",
                   help='comma list of block names, or "all"')
    p.add_argument("--fit", action="store_true",
                   help="fit annulus decay exponents")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--csv", help="annulus table CSV path "
                                 "(default: derived from --out)")

    p = add("decay", cmd_decay, "decay-exponent fits for a saved field")
    p.add_argument("--field", required=True, help="field container from relax")
    p.add_argument("--orders", default="1,2,3",
                   help="difference orders for the displacement sector")
    p.add_argument("--out", help="report JSON path")

    p = add("study", cmd_study,
            "full defect pipeline: certify, relax, residual, kernels, "
            "reconstruction, decay fits")
    p.add_argument("--crystal", required=True)
    p.add_argument("--rwin", type=int, default=32)
    p.add_argument("--N", type=int, default=64)
    p.add_argument("--grid", type=int, default=16,
                   help="certificate grid order")
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--outdir", default="study_out")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        code = exc.code
        return code if isinstance(code, int) else EXIT_USAGE
    try:
        _apply_threads(args.threads)
        return args.func(args)
    except (RelaxError, GreensError, SpectralError, CBError,
            np.linalg.LinAlgError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (CrystalError, LatticeError, PotentialError, OSError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
