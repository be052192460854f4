"""End-to-end orchestration: ingest, fit, sample, evaluate, write results."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import metrics as mt
from .constraint import (
    ConvergenceError, FitOptions, KappaPrior, PrecisionModel, build_prior, fit_lambda,
    floor_targets, sample, targets_from_axis_variances,
)
from .ensemble import BASELINE_KINDS, EnsembleDataset, fit_baseline, sample_baseline
from .geometry import KappaLayout, positions_from_kappa
from .jacobian import compute_gram_set, compute_jacobian
from .pdbio import BACKBONE_NAMES, ingest, write_pdb, write_internal_table, sidecar_path

log = logging.getLogger(__name__)

SUPERPOSITION_MODES = ("non-superposed", "superposed", "both")
SOLVERS = ("newton", "fixed_point")
# fields that only choose where things go, so they do not enter the hash
_UNHASHED = ("output_dir",)


class PipelineError(RuntimeError):
    """A failure tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    """Flat run configuration; every field has a matching CLI flag."""

    input: str
    seed: int
    output_dir: str = "results"
    a: float = 50.0
    targets: str = "from-data"  # "from-data", a number (uniform, Angstrom^2) or a CSV path
    tol: float = 1e-2
    max_iters: int = 500
    damping: float = 0.5
    solver: str = "newton"
    n_samples: int = 0  # 0 draws as many samples as there are reference conformations
    superposition: str = "both"
    baselines: str = "oas"  # comma-separated subset of empirical, oas, diagonal
    rama_bins: int = 60
    tica_input: str = ""  # time-ordered trajectory; defaults to the reference
    tica_lag: int = 100
    tica_bins: int = 100

    def __post_init__(self):
        if not self.input:
            raise ValueError("input path is required")
        if self.seed is None or isinstance(self.seed, bool) or int(self.seed) != self.seed:
            raise ValueError("seed must be an integer")
        self.seed = int(self.seed)
        for name in ("a", "tol", "damping"):
            if not float(getattr(self, name)) > 0:
                raise ValueError(f"{name} must be positive")
            setattr(self, name, float(getattr(self, name)))
        if self.damping > 1:
            raise ValueError("damping must be in (0, 1]")
        for name in ("max_iters", "rama_bins", "tica_lag", "tica_bins"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
            setattr(self, name, int(getattr(self, name)))
        if int(self.n_samples) < 0:
            raise ValueError("n_samples must be non-negative")
        self.n_samples = int(self.n_samples)
        if self.solver not in SOLVERS:
            raise ValueError(f"solver must be one of {SOLVERS}")
        if self.superposition not in SUPERPOSITION_MODES:
            raise ValueError(f"superposition must be one of {SUPERPOSITION_MODES}")
        for kind in self.baseline_kinds:
            if kind not in BASELINE_KINDS:
                raise ValueError(f"unknown baseline {kind!r}; expected a subset of {BASELINE_KINDS}")
        self.targets = str(self.targets)

    @property
    def baseline_kinds(self) -> list[str]:
        return [k.strip() for k in str(self.baselines).split(",") if k.strip()]

    @property
    def modes(self) -> list[bool]:
        """Superposition flags to evaluate, non-superposed first."""
        return {"non-superposed": [False], "superposed": [True], "both": [False, True]}[self.superposition]

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        """Load a flat YAML or JSON mapping; ``overrides`` that are not None win."""
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: configuration must be a flat mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"{path}: unknown configuration keys {unknown}")
        nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
        if nested:
            raise ValueError(f"{path}: configuration must be flat; nested values under {nested}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def hash(self) -> str:
        """Digest of the settings and of the input file contents."""
        payload = {k: v for k, v in asdict(self).items() if k not in _UNHASHED}
        for key in ("input", "tica_input"):
            if payload[key]:
                payload[key] = file_digest(payload[key])
        if _is_path_target(self.targets):
            payload["targets"] = file_digest(self.targets)
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _is_path_target(spec: str) -> bool:
    if spec == "from-data":
        return False
    try:
        float(spec)
        return False
    except ValueError:
        return True


# ---------------------------------------------------------------------------
# small CSV helpers


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows, config_hash: str) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header) + ["config_hash"])
        for row in rows:
            w.writerow([fmt(v) for v in row] + [config_hash])
    return Path(path)


def atom_labels(layout: KappaLayout, residue_names=None):
    names = residue_names or ["UNK"] * (layout.n_atoms // 3)
    return [(m, m // 3 + 1, names[m // 3], BACKBONE_NAMES[m % 3]) for m in range(layout.n_atoms)]


def lambda_rows(model: PrecisionModel, layout: KappaLayout, residue_names=None):
    info = model.info
    for (m, res, resname, atom) in atom_labels(layout, residue_names):
        yield (m, res, resname, atom, model.lam[m], info["targets"][m], info["achieved"][m],
               info["unconstrained"][m], info["residuals"][m], bool(model.lam[m] > 0))


LAMBDA_HEADER = ("atom", "residue", "residue_name", "atom_name", "lambda", "target",
                 "achieved", "unconstrained", "relative_residual", "active")


def histogram_rows(source: str, hist: mt.Histogram2D):
    p = hist.probabilities
    for i in range(hist.counts.shape[0]):
        for j in range(hist.counts.shape[1]):
            yield (source, i, j, hist.x_edges[i], hist.x_edges[i + 1], hist.y_edges[j],
                   hist.y_edges[j + 1], int(hist.counts[i, j]), p[i, j])


HISTOGRAM_HEADER = ("source", "i", "j", "x_lo", "x_hi", "y_lo", "y_hi", "count", "probability")


# ---------------------------------------------------------------------------
# model persistence


def save_model(path, model: PrecisionModel, ds: EnsembleDataset, config_hash: str) -> None:
    np.savez(
        path,
        mean=ds.circular_mean,
        bond_lengths=ds.mean_bond_lengths,
        precision=model.precision,
        lam=model.lam,
        prior_strength=model.prior.strength,
        data_variances=model.prior.data_variances,
        targets=model.info["targets"],
        achieved=model.info["achieved"],
        converged=bool(model.info["converged"]),
        residue_names=np.array(ds.residue_names or [], dtype=str),
        config_hash=config_hash,
    )


@dataclass
class LoadedModel:
    mean: np.ndarray
    bond_lengths: np.ndarray
    model: PrecisionModel
    residue_names: list[str] | None
    converged: bool


def load_model(path) -> LoadedModel:
    from .constraint import _factorise

    with np.load(path) as z:
        prior = KappaPrior(float(z["prior_strength"]), z["data_variances"])
        precision = z["precision"]
        model = PrecisionModel(prior, z["lam"], precision, _factorise(precision))
        model.info.update(targets=z["targets"], achieved=z["achieved"])
        names = [str(s) for s in z["residue_names"]] or None
        return LoadedModel(z["mean"], z["bond_lengths"], model, names, bool(z["converged"]))


# ---------------------------------------------------------------------------
# stages


def resolve_targets(spec: str, ds: EnsembleDataset) -> tuple[np.ndarray, str]:
    """Per-atom squared-displacement targets and a label for the report."""
    m = ds.n_atoms
    if spec == "from-data":
        profile = mt.fluctuation_profile(ds.positions(), superpose=False)
        return targets_from_axis_variances(profile.per_atom_variance), "from-data"
    try:
        value = float(spec)
    except ValueError:
        value = None
    if value is not None:
        if not value > 0:
            raise ValueError("uniform target must be positive")
        return floor_targets(np.full(m, value)), "uniform"
    with open(spec, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "target" not in rows[0]:
        raise ValueError(f"{spec}: expected a CSV with a 'target' column")
    if "atom" in rows[0]:
        rows.sort(key=lambda r: int(r["atom"]))
    targets = np.array([float(r["target"]) for r in rows])
    if targets.shape != (m,):
        raise ValueError(f"{spec}: {len(targets)} targets for {m} atoms")
    if np.any(~(targets > 0)):
        raise ValueError(f"{spec}: targets must be positive")
    return floor_targets(targets), "file"


def fit_model(ds: EnsembleDataset, a: float, targets, opts: FitOptions):
    """Linearise around the circular-mean chain and fit the multipliers.

    Returns ``(model, grams)``; a non-converged fit is returned with
    ``model.info["converged"] = False`` rather than raised.
    """
    chain = ds.mean_chain()
    grams = compute_gram_set(compute_jacobian(chain, ds.layout))
    prior = build_prior(ds.deviations, a)
    try:
        model = fit_lambda(prior, grams, targets, opts)
    except ConvergenceError as err:
        log.warning("%s", err)
        model = err.model
    return model, grams


def fit_baselines(ds: EnsembleDataset, kinds, a: float):
    """Fit the requested baselines, swapping a singular empirical fit for OAS."""
    out, substitutions = {}, []
    n, d = ds.deviations.shape
    for kind in kinds:
        used = kind
        if kind == "empirical" and n <= d:
            used = "oas"
            substitutions.append({
                "requested": "empirical", "used": "oas",
                "reason": f"empirical covariance is singular with N={n} <= D={d}",
            })
        if used not in out:
            out[used] = fit_baseline(ds, used, a=a)
    return out, substitutions


def profile_rows(layout, residue_names, profiles, predicted):
    """Wide per-atom table: one column per (source, mode)."""
    labels = atom_labels(layout, residue_names)
    cols = sorted(profiles)
    header = ("atom", "residue", "residue_name", "atom_name", "predicted_per_axis") + tuple(cols)
    rows = [
        (m, res, name, atom, predicted[m]) + tuple(profiles[c].per_atom_variance[m] for c in cols)
        for (m, res, name, atom) in labels
    ]
    return header, rows


def _mode_name(superposed: bool) -> str:
    return "superposed" if superposed else "non_superposed"


def evaluate(reference_xyz, sample_xyz: dict, modes, rama_bins: int):
    """Profiles, their errors and Ramachandran statistics per sample source."""
    profiles, rows = {}, []
    for sup in modes:
        mode = _mode_name(sup)
        ref = mt.fluctuation_profile(reference_xyz, sup)
        profiles[f"reference_{mode}"] = ref
        for src, xyz in sample_xyz.items():
            prof = mt.fluctuation_profile(xyz, sup)
            profiles[f"{src}_{mode}"] = prof
            rel = relative_profile_error(prof, ref)
            rows += [
                (src, f"profile_mse_{mode}", mt.profile_mse(prof, ref)),
                (src, f"profile_mean_relative_error_{mode}", rel["mean_relative_error"]),
                (src, f"fraction_atoms_over_3x_{mode}", rel["fraction_over_3x"]),
            ]
    hists = {"reference": mt.ramachandran_from_positions(reference_xyz, rama_bins)}
    for src, xyz in sample_xyz.items():
        hists[src] = mt.ramachandran_from_positions(xyz, rama_bins)
        rows += [
            (src, "ramachandran_js_distance", mt.js_distance(hists[src], hists["reference"])),
            (src, "ramachandran_coverage_dilated", mt.ramachandran_coverage(hists[src], hists["reference"])),
        ]
    return profiles, hists, rows


def relative_profile_error(sample: mt.FluctuationProfile, reference: mt.FluctuationProfile,
                           min_variance: float = 1e-4 / 3.0) -> dict:
    """Mean relative error and share of atoms at least 3x the reference.

    Atoms whose reference variance is below ``min_variance`` (the frame-fixed
    ones near the chain start) are left out.
    """
    ref = reference.per_atom_variance
    mask = ref > min_variance
    if not mask.any():
        return {"mean_relative_error": float("nan"), "fraction_over_3x": float("nan"), "n_atoms": 0}
    ratio = sample.per_atom_variance[mask] / ref[mask]
    return {
        "mean_relative_error": float(np.mean(np.abs(ratio - 1.0))),
        "fraction_over_3x": float(np.mean(ratio >= 3.0)),
        "n_atoms": int(mask.sum()),
    }


def tica_stage(series_kappa, sample_kappa: dict, lag: int, bins: int):
    """TICA on the reference trajectory; returns histograms and metric rows."""
    tm = mt.tica_fit(mt.angular_features(series_kappa), lag)
    ref_proj = mt.tica_project(tm, mt.angular_features(series_kappa))
    ex, ey = mt.tica_edges(ref_proj, bins)
    hists = {"reference": mt.tica_histogram(ref_proj, ex, ey)}
    rows = [("reference", f"tica_eigenvalue_{k + 1}", float(ev)) for k, ev in enumerate(tm.eigenvalues)]
    for src, kappa in sample_kappa.items():
        hists[src] = mt.tica_histogram(mt.tica_project(tm, mt.angular_features(kappa)), ex, ey)
        rows.append((src, "tica_js_distance", mt.js_distance(hists[src], hists["reference"])))
    return hists, rows


@dataclass
class RunResult:
    report: dict
    converged: bool
    outputs: dict = field(default_factory=dict)

    @property
    def exit_code(self) -> int:
        return 0 if self.converged else 1


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as err:  # noqa: BLE001 - re-raised with the stage label
        raise PipelineError(name, err) from err


def run_pipeline(cfg: RunConfig) -> RunResult:
    """Run ingest, fit, sample and evaluation, writing every table to ``cfg.output_dir``."""
    h = _stage("ingest", cfg.hash)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    notes: list[str] = []

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        ds = _stage("ingest", ingest, cfg.input)
        layout = ds.layout
        targets, target_source = _stage("targets", resolve_targets, cfg.targets, ds)
        opts = _stage("fit", FitOptions, tol=cfg.tol, max_iters=cfg.max_iters,
                      damping=cfg.damping, method=cfg.solver)
        model, grams = _stage("fit", fit_model, ds, cfg.a, targets, opts)
        info = model.info
    notes += [str(w.message) for w in caught]

    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_samples or ds.n_conformations
    ref_xyz = ds.positions()
    sample_kappa = {"model": _stage("sample", sample, model, ds.circular_mean, n, rng, layout)}
    baselines, substitutions = _stage("baseline", fit_baselines, ds, cfg.baseline_kinds, cfg.a)
    for kind, bm in baselines.items():
        sample_kappa[kind] = _stage("baseline", sample_baseline, bm, n, rng)
    sample_xyz = {k: positions_from_kappa(v, ds.mean_bond_lengths) for k, v in sample_kappa.items()}

    profiles, rama, metric_rows = _stage("metrics", evaluate, ref_xyz, sample_xyz, cfg.modes, cfg.rama_bins)

    tica_hists, tica_note = None, None
    series = ds
    if cfg.tica_input:
        series = _stage("tica", ingest, cfg.tica_input)
    n_pairs = series.n_conformations - cfg.tica_lag
    if n_pairs > 2 * series.layout.size:
        if series.layout != layout:
            raise PipelineError("tica", ValueError("TICA input has a different chain length"))
        tica_hists, rows = _stage("tica", tica_stage, series.kappa, sample_kappa, cfg.tica_lag, cfg.tica_bins)
        metric_rows += rows
    else:
        tica_note = (f"skipped: {series.n_conformations} frames at lag {cfg.tica_lag} leave {max(n_pairs, 0)} "
                     f"time-lagged pairs for {2 * series.layout.size} features")

    # outputs
    files = {}
    files["lambda"] = write_csv(out / "lambda.csv", LAMBDA_HEADER, lambda_rows(model, layout, ds.residue_names), h)
    header, rows = profile_rows(layout, ds.residue_names, profiles, info["achieved"] / 3.0)
    files["profiles"] = write_csv(out / "profiles.csv", header, rows, h)
    files["metrics"] = write_csv(out / "metrics.csv", ("source", "metric", "value"), metric_rows, h)
    files["ramachandran"] = write_csv(
        out / "ramachandran.csv", HISTOGRAM_HEADER,
        (r for src, hist in rama.items() for r in histogram_rows(src, hist)), h)
    if tica_hists is not None:
        files["tica"] = write_csv(
            out / "tica.csv", HISTOGRAM_HEADER,
            (r for src, hist in tica_hists.items() for r in histogram_rows(src, hist)), h)
    files["samples"] = out / "samples.pdb"
    write_pdb(sample_xyz["model"], files["samples"], ds.residue_names)
    model_ds = EnsembleDataset(sample_kappa["model"], np.broadcast_to(ds.mean_bond_lengths, (n, layout.n_atoms - 1)),
                               ds.residue_names)
    write_internal_table(model_ds, sidecar_path(files["samples"]))
    for kind in baselines:
        files[f"baseline_{kind}"] = out / f"baseline_{kind}.pdb"
        write_pdb(sample_xyz[kind], files[f"baseline_{kind}"], ds.residue_names)
    files["model"] = out / "model.npz"
    save_model(files["model"], model, ds, h)

    report = {
        "config": asdict(cfg),
        "config_hash": h,
        "reference": {
            "conformations": ds.n_conformations, "atoms": ds.n_atoms, "coordinates": layout.size,
            "residues": ds.n_atoms // 3,
        },
        "fit": {
            "converged": bool(info["converged"]),
            "iterations": int(info["iterations"]),
            "method": info["method"],
            "max_relative_residual": float(info["max_residual"]),
            "active_constraints": int(np.sum(model.lam > 0)),
            "unreachable_targets": int(np.sum(info["infeasible"])),
            "target_source": target_source,
        },
        "samples": n,
        "baselines": {k: {"shrinkage": bm.shrinkage} for k, bm in baselines.items()},
        "substitutions": substitutions,
        "tica": tica_note or "done",
        "metrics": {f"{src}/{name}": float(v) for src, name, v in metric_rows},
        "notes": notes,
        "outputs": {k: Path(v).name for k, v in files.items()},
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n")
    return RunResult(report, bool(info["converged"]), files)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")
