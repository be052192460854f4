"""Command-line interface.

Subcommands::

    ingest    summarise a multi-model PDB and optionally dump its internal coordinates
    fit       fit the constrained precision model and save it (.npz) plus lambda.csv
    sample    draw structures from a saved model
    baseline  fit and sample one of the baseline Gaussians
    eval      compare sampled structures with a reference ensemble
    tica      TICA histograms of a reference trajectory and sample sets
    run       the whole pipeline from a config file and/or flags

Exit status: 0 on success, 1 when the multiplier fit did not converge, 2 on errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .constraint import FitOptions, sample
from .ensemble import BASELINE_KINDS, EnsembleDataset, fit_baseline, sample_baseline
from .pdbio import export, ingest, write_internal_table
from .pipeline import (
    HISTOGRAM_HEADER, LAMBDA_HEADER, SOLVERS, SUPERPOSITION_MODES, PipelineError, RunConfig,
    evaluate, file_digest, fit_model, histogram_rows, lambda_rows, load_model, profile_rows,
    resolve_targets, run_pipeline, save_model, tica_stage, write_csv,
)

log = logging.getLogger("backbone_maxent")

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_ERROR = 0, 1, 2


def _args_hash(args: argparse.Namespace, inputs=(), skip=("func", "out", "output_dir", "verbose")) -> str:
    payload = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    payload["_inputs"] = [file_digest(p) for p in inputs]
    blob = json.dumps(payload, sort_keys=True, default=str, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _dataset(path) -> EnsembleDataset:
    return ingest(path)


def _write_samples(kappa, lengths, names, out: Path) -> None:
    ds = EnsembleDataset(kappa, np.broadcast_to(lengths, (len(kappa), len(lengths))), names)
    export(ds, out)


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    ds = _dataset(args.pdb)
    print(f"conformations={ds.n_conformations} atoms={ds.n_atoms} "
          f"residues={ds.n_atoms // 3} coordinates={ds.layout.size}")
    if args.out:
        write_internal_table(ds, args.out)
    return EXIT_OK


def _fit_options(args) -> FitOptions:
    return FitOptions(tol=args.tol, max_iters=args.max_iters, damping=args.damping, method=args.solver)


def cmd_fit(args) -> int:
    ds = _dataset(args.pdb)
    targets, _ = resolve_targets(args.targets, ds)
    model, _ = fit_model(ds, args.a, targets, _fit_options(args))
    h = _args_hash(args, [args.pdb])
    out = Path(args.out)
    save_model(out, model, ds, h)
    write_csv(out.with_suffix(".lambda.csv"), LAMBDA_HEADER, lambda_rows(model, ds.layout, ds.residue_names), h)
    info = model.info
    print(f"converged={info['converged']} iterations={info['iterations']} "
          f"max_relative_residual={info['max_residual']:.3e}")
    return EXIT_OK if info["converged"] else EXIT_NOT_CONVERGED


def cmd_sample(args) -> int:
    lm = load_model(args.model)
    kappa = sample(lm.model, lm.mean, args.n, np.random.default_rng(args.seed))
    _write_samples(kappa, lm.bond_lengths, lm.residue_names, Path(args.out))
    return EXIT_OK


def cmd_baseline(args) -> int:
    ds = _dataset(args.pdb)
    bm = fit_baseline(ds, args.kind, a=args.a)
    kappa = sample_baseline(bm, args.n, np.random.default_rng(args.seed))
    _write_samples(kappa, ds.mean_bond_lengths, ds.residue_names, Path(args.out))
    if bm.shrinkage is not None:
        print(f"shrinkage={bm.shrinkage:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ref = _dataset(args.reference)
    sets = {Path(p).stem: _dataset(p).positions() for p in args.samples}
    modes = {"non-superposed": [False], "superposed": [True], "both": [False, True]}[args.superposition]
    profiles, rama, rows = evaluate(ref.positions(), sets, modes, args.bins)
    h = _args_hash(args, [args.reference, *args.samples])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    predicted = np.full(ref.n_atoms, np.nan)
    header, prow = profile_rows(ref.layout, ref.residue_names, profiles, predicted)
    write_csv(out / "profiles.csv", header, prow, h)
    write_csv(out / "metrics.csv", ("source", "metric", "value"), rows, h)
    write_csv(out / "ramachandran.csv", HISTOGRAM_HEADER,
              (r for src, hist in rama.items() for r in histogram_rows(src, hist)), h)
    for src, name, value in rows:
        print(f"{src},{name},{float(value)!r}")
    return EXIT_OK


def cmd_tica(args) -> int:
    ref = _dataset(args.reference)
    sets = {Path(p).stem: _dataset(p).kappa for p in args.samples}
    hists, rows = tica_stage(ref.kappa, sets, args.lag, args.bins)
    h = _args_hash(args, [args.reference, *args.samples])
    write_csv(args.out, HISTOGRAM_HEADER, (r for src, hist in hists.items() for r in histogram_rows(src, hist)), h)
    for src, name, value in rows:
        print(f"{src},{name},{float(value)!r}")
    return EXIT_OK


def cmd_run(args) -> int:
    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    if args.config:
        cfg = RunConfig.from_file(args.config, **overrides)
    else:
        missing = [k for k in ("input", "seed") if overrides.get(k) is None]
        if missing:
            raise ValueError(f"missing required settings: {', '.join(missing)} (or pass --config)")
        cfg = RunConfig(**{k: v for k, v in overrides.items() if v is not None})
    result = run_pipeline(cfg)
    fit = result.report["fit"]
    print(f"converged={fit['converged']} iterations={fit['iterations']} "
          f"max_relative_residual={fit['max_relative_residual']:.3e} output={cfg.output_dir}")
    return result.exit_code


# ---------------------------------------------------------------------------
# parser


def _add_fit_flags(p, defaults: bool = True):
    d = (lambda v: v) if defaults else (lambda v: None)
    p.add_argument("--a", type=float, default=d(50.0), help="prior strength (default 50)")
    p.add_argument("--targets", default=d("from-data"),
                   help="'from-data', a uniform value in A^2, or a CSV with a 'target' column")
    p.add_argument("--tol", type=float, default=d(1e-2), help="max relative constraint residual")
    p.add_argument("--max-iters", dest="max_iters", type=int, default=d(500))
    p.add_argument("--damping", type=float, default=d(0.5), help="fixed-point damping exponent")
    p.add_argument("--solver", choices=SOLVERS, default=d("newton"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="backbone-maxent", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="read a multi-model backbone PDB")
    p.add_argument("pdb")
    p.add_argument("--out", help="write the internal-coordinate table here")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("fit", help="fit the constrained model")
    p.add_argument("pdb")
    p.add_argument("--out", required=True, help="output model file (.npz)")
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("sample", help="sample structures from a fitted model")
    p.add_argument("model")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output PDB")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("baseline", help="fit and sample a baseline Gaussian")
    p.add_argument("pdb")
    p.add_argument("--kind", choices=BASELINE_KINDS, default="oas")
    p.add_argument("--a", type=float, default=1.0, help="strength of the diagonal baseline")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output PDB")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="compare sample PDBs with a reference PDB")
    p.add_argument("reference")
    p.add_argument("samples", nargs="+")
    p.add_argument("--superposition", choices=SUPERPOSITION_MODES, default="both")
    p.add_argument("--bins", type=int, default=60)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tica", help="TICA histograms")
    p.add_argument("reference", help="time-ordered multi-model PDB")
    p.add_argument("samples", nargs="*")
    p.add_argument("--lag", type=int, default=100)
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--out", required=True, help="output CSV")
    p.set_defaults(func=cmd_tica)

    p = sub.add_parser("run", help="full pipeline")
    p.add_argument("--config", help="flat YAML or JSON file; flags override its values")
    p.add_argument("--input")
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir", dest="output_dir")
    _add_fit_flags(p, defaults=False)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--superposition", choices=SUPERPOSITION_MODES)
    p.add_argument("--baselines", help="comma-separated subset of " + ",".join(BASELINE_KINDS))
    p.add_argument("--rama-bins", dest="rama_bins", type=int)
    p.add_argument("--tica-input", dest="tica_input")
    p.add_argument("--tica-lag", dest="tica_lag", type=int)
    p.add_argument("--tica-bins", dest="tica_bins", type=int)
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineError as err:
        print(f"error {err}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, OSError, RuntimeError) as err:
        print(f"error [{args.command}] {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
