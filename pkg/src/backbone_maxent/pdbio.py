"""Multi-model PDB reading and writing for N/CA/C backbones.

Exported files come with a sidecar table (``<stem>.ic.csv``) holding the
internal coordinates at full precision, since PDB coordinates only carry
three decimals.  :func:`ingest` prefers the sidecar when it matches the PDB.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .ensemble import EnsembleDataset
from .geometry import GeometryError, InternalCoords, build_positions, cartesian_to_internal, BackboneChain

log = logging.getLogger(__name__)

BACKBONE_NAMES = ("N", "CA", "C")
ELEMENTS = {"N": "N", "CA": "C", "C": "C"}
SIDECAR_SUFFIX = ".ic.csv"
# three-decimal PDB rounding plus reconstruction noise
SIDECAR_MATCH_TOL = 2e-3


class PDBFormatError(ValueError):
    pass


@dataclass
class BackboneModel:
    """One MODEL block: backbone coordinates plus residue labels."""

    positions: np.ndarray  # (M, 3)
    residue_names: list[str]
    residue_ids: list[tuple[int, str]]


def read_backbone_models(path) -> list[BackboneModel]:
    """Parse N/CA/C ATOM records per MODEL block.

    Only the first chain of each model is used.  For alternate locations the
    first listed one wins; occupancy is ignored; HETATM and water are skipped.
    """
    path = Path(path)
    blocks: list[list[str]] = []
    current: list[str] | None = None
    saw_model = False
    with path.open() as fh:
        for line in fh:
            rec = line[:6]
            if rec.startswith("MODEL"):
                saw_model = True
                current = []
            elif rec.startswith("ENDMDL"):
                if current is not None:
                    blocks.append(current)
                current = None
            elif rec == "ATOM  ":
                if current is None:
                    if saw_model:
                        raise PDBFormatError(f"{path}: ATOM record outside a MODEL block")
                    current = []
                    blocks.append(current)
                current.append(line.rstrip("\n"))
            elif rec.startswith("END") and not rec.startswith("ENDMDL"):
                break
    if current is not None and saw_model and current not in blocks:
        blocks.append(current)
    blocks = [b for b in blocks if b]
    if not blocks:
        raise PDBFormatError(f"{path}: no models with ATOM records")
    return [_parse_block(b, k + 1, path) for k, b in enumerate(blocks)]


def _parse_block(lines: list[str], model_no: int, path) -> BackboneModel:
    chain_id = None
    residues: dict[tuple[int, str], dict] = {}
    order: list[tuple[int, str]] = []
    skipped_chains = set()
    for line in lines:
        if len(line) < 54:
            raise PDBFormatError(f"{path}: model {model_no}: truncated ATOM record: {line!r}")
        name = line[12:16].strip()
        resname = line[17:20].strip()
        if resname in ("HOH", "WAT"):
            continue
        chain = line[21]
        if chain_id is None:
            chain_id = chain
        elif chain != chain_id:
            skipped_chains.add(chain)
            continue
        try:
            key = (int(line[22:26]), line[26].strip())
            xyz = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
        except ValueError as err:
            raise PDBFormatError(f"{path}: model {model_no}: bad ATOM record {line!r}") from err
        if key not in residues:
            residues[key] = {"name": resname, "atoms": {}}
            order.append(key)
        atoms = residues[key]["atoms"]
        if name in BACKBONE_NAMES and name not in atoms:
            atoms[name] = xyz
    if skipped_chains:
        warnings.warn(f"{path}: model {model_no}: ignoring extra chains {sorted(skipped_chains)}", stacklevel=3)
    coords = []
    for key in order:
        atoms = residues[key]["atoms"]
        missing = [n for n in BACKBONE_NAMES if n not in atoms]
        if missing:
            raise PDBFormatError(
                f"{path}: model {model_no}, residue {residues[key]['name']} {key[0]}{key[1]}: "
                f"missing backbone atom(s) {', '.join(missing)}"
            )
        coords.extend(atoms[n] for n in BACKBONE_NAMES)
    return BackboneModel(
        np.array(coords, dtype=float).reshape(-1, 3),
        [residues[k]["name"] for k in order],
        order,
    )


def sidecar_path(pdb_path) -> Path:
    p = Path(pdb_path)
    return p.with_name(p.stem + SIDECAR_SUFFIX)


def write_internal_table(ds: EnsembleDataset, path) -> None:
    """Long-format table ``model,kind,index,value`` at full float precision."""
    layout = ds.layout
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "kind", "index", "value"])
        for n in range(ds.n_conformations):
            dih, ang = layout.split(ds.kappa[n])
            for kind, values in (("dihedral", dih), ("angle", ang), ("bond_length", ds.bond_lengths[n])):
                for i, v in enumerate(values):
                    w.writerow([n + 1, kind, i, repr(float(v))])


def read_internal_table(path) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(kappa, bond_lengths)`` stacked over models."""
    rows: dict[int, dict[str, dict[int, float]]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            model = rows.setdefault(int(rec["model"]), {"dihedral": {}, "angle": {}, "bond_length": {}})
            model[rec["kind"]][int(rec["index"])] = float(rec["value"])
    kappa, lengths = [], []
    for n in sorted(rows):
        r = rows[n]
        dih = [r["dihedral"][i] for i in range(len(r["dihedral"]))]
        ang = [r["angle"][i] for i in range(len(r["angle"]))]
        kappa.append(dih + ang)
        lengths.append([r["bond_length"][i] for i in range(len(r["bond_length"]))])
    return np.array(kappa), np.array(lengths)


def _sidecar_matches(kappa, lengths, models: list[BackboneModel]) -> bool:
    if len(kappa) != len(models) or lengths.shape[1] + 1 != len(models[0].positions):
        return False
    from .metrics import kabsch_superpose

    rebuilt = build_positions(*_split(kappa, lengths), lengths)
    for x, model in zip(rebuilt, models):
        moved = kabsch_superpose(model.positions, x)
        if np.abs(moved - model.positions).max() > SIDECAR_MATCH_TOL:
            return False
    return True


def _split(kappa, lengths):
    n_dih = lengths.shape[1] - 2
    return kappa[:, :n_dih], kappa[:, n_dih:]


def ingest(pdb_path, use_sidecar: bool = True) -> EnsembleDataset:
    """Read a multi-model backbone PDB into an :class:`EnsembleDataset`."""
    models = read_backbone_models(pdb_path)
    sizes = {len(m.positions) for m in models}
    if len(sizes) != 1:
        counts = ", ".join(f"model {k + 1}: {len(m.positions)}" for k, m in enumerate(models))
        raise PDBFormatError(f"{pdb_path}: inconsistent backbone atom counts across models ({counts})")
    names = models[0].residue_names

    side = sidecar_path(pdb_path)
    if use_sidecar and side.exists():
        kappa, lengths = read_internal_table(side)
        if _sidecar_matches(kappa, lengths, models):
            log.info("using internal coordinates from %s", side)
            return EnsembleDataset(kappa, lengths, names)
        warnings.warn(f"{side} does not match {pdb_path}; recomputing from coordinates", stacklevel=2)

    conformations: list[InternalCoords] = []
    for k, model in enumerate(models):
        try:
            conformations.append(cartesian_to_internal(BackboneChain(model.positions)))
        except GeometryError as err:
            raise GeometryError(f"{pdb_path}: model {k + 1}: {err}", err.atom_index) from err
        except ValueError as err:
            raise PDBFormatError(f"{pdb_path}: model {k + 1}: {err}") from err
    return EnsembleDataset.from_internal(conformations, names)


def format_atom(serial: int, name: str, resname: str, chain: str, resseq: int, xyz, element: str) -> str:
    padded = f" {name:<3s}" if len(name) < 4 else name
    return (
        f"ATOM  {serial % 100000:5d} {padded:<4s} {resname:>3s} {chain:1s}{resseq % 10000:4d}    "
        f"{xyz[0]:8.3f}{xyz[1]:8.3f}{xyz[2]:8.3f}{1.0:6.2f}{0.0:6.2f}          {element:>2s}  "
    )


def write_pdb(positions, path, residue_names=None, chain: str = "A") -> None:
    """Write ``(N, M, 3)`` backbone coordinates as a multi-model PDB."""
    x = np.asarray(positions, dtype=float)
    if x.ndim == 2:
        x = x[None]
    if len(x) == 0:
        raise ValueError("cannot write an empty ensemble")
    n_res = x.shape[1] // 3
    names = list(residue_names) if residue_names is not None else ["GLY"] * n_res
    lines = []
    for n, model in enumerate(x):
        lines.append(f"MODEL     {n + 1:4d}")
        serial = 1
        for r in range(n_res):
            for k, atom in enumerate(BACKBONE_NAMES):
                lines.append(format_atom(serial, atom, names[r], chain, r + 1, model[3 * r + k], ELEMENTS[atom]))
                serial += 1
        lines.append(f"TER   {serial:5d}      {names[-1]:>3s} {chain}{n_res:4d}")
        lines.append("ENDMDL")
    lines.append("END")
    Path(path).write_text("\n".join(lines) + "\n")


def export(ds: EnsembleDataset, path) -> Path:
    """Write the ensemble as a canonical-frame PDB plus its internal-coordinate sidecar."""
    if ds.n_conformations == 0:
        raise ValueError("cannot export an empty ensemble")
    path = Path(path)
    write_pdb(ds.positions(), path, ds.residue_names)
    side = sidecar_path(path)
    write_internal_table(ds, side)
    return side
