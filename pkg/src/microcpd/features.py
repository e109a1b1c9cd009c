"""Per-atom 7-dimensional features: element one-hot (C, N, O, S, H), charge, SASA."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .exceptions import MissingRadiusError
from .sasa import shrake_rupley
from .structure import NONSTANDARD_MAP, ProteinModel

logger = logging.getLogger(__name__)

N_FEATURES = 7


class ElementClass(enum.IntEnum):
    C = 0
    N = 1
    O = 2  # noqa: E741
    S = 3
    H = 4


_ELEMENT_ALIASES = {"SE": ElementClass.S, "D": ElementClass.H}


def classify_element(atom) -> Optional[ElementClass]:
    """Map an atom to its one-hot class, or ``None`` when it is excluded."""
    symbol = (atom.element or "").strip().upper()
    if symbol in ElementClass.__members__:
        return ElementClass[symbol]
    return _ELEMENT_ALIASES.get(symbol)


def _read_table(path, n_keys):
    if path is None:
        raise ValueError("path required")
    text = Path(path).read_text() if not hasattr(path, "read_text") else path.read_text()
    table = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != n_keys + 1:
            raise ValueError(f"{path}:{lineno}: expected {n_keys + 1} columns")
        key = tuple(p.upper() for p in parts[:n_keys])
        table[key if n_keys > 1 else key[0]] = float(parts[-1])
    return table


def load_charge_table(path=None) -> dict:
    """(residue, atom name) -> partial charge in e. Defaults to the shipped table."""
    if path is None:
        path = resources.files("microcpd.data").joinpath("charges.txt")
    return _read_table(path, 2)


def load_radii_table(path=None) -> dict:
    """element -> van der Waals radius in A. Defaults to the shipped Bondi table."""
    if path is None:
        path = resources.files("microcpd.data").joinpath("radii.txt")
    table = _read_table(path, 1)
    bad = {k: v for k, v in table.items() if not 0.5 < v < 3.0}
    if bad:
        raise ValueError(f"radii outside (0.5, 3.0) A: {bad}")
    return table


def _charge_key(atom):
    res = NONSTANDARD_MAP.get(atom.residue_name, atom.residue_name)
    name = "SD" if atom.residue_name == "MSE" and atom.name == "SE" else atom.name
    return (res, name)


def assign_charges(model: ProteinModel, table: Optional[dict] = None) -> tuple[ProteinModel, int]:
    """Fill in atom charges from ``table``; atoms that already carry one keep it.

    Returns the new model and the number of table misses (set to 0.0).
    """
    if table is None:
        table = load_charge_table()
    misses = 0
    atoms = []
    for atom in model.atoms:
        if atom.charge is None and classify_element(atom) is not None:
            q = table.get(_charge_key(atom))
            if q is None:
                misses += 1
                q = 0.0
            atom = replace(atom, charge=q)
        atoms.append(atom)
    if misses:
        logger.warning("%s: %d atoms missing from the charge table, set to 0.0", model.source_id, misses)
    return model.with_atoms(atoms), misses


def assign_radii(model: ProteinModel, table: Optional[dict] = None) -> ProteinModel:
    """Fill in van der Waals radii by element; atoms that already carry one keep it."""
    if table is None:
        table = load_radii_table()
    atoms = []
    for atom in model.atoms:
        if atom.vdw_radius is None:
            r = table.get(atom.element.upper())
            if r is not None:
                atom = replace(atom, vdw_radius=r)
        atoms.append(atom)
    return model.with_atoms(atoms)


def included_atom_ids(model: ProteinModel) -> np.ndarray:
    return np.array([i for i, a in enumerate(model.atoms) if classify_element(a) is not None], dtype=np.int64)


def residue_orientations(model: ProteinModel, atom_ids) -> np.ndarray:
    """Per-atom lattice orientation taken from the owning residue's backbone.

    Rows are x = N - CA, z = x cross (C - CA), y = z cross x. Atoms whose residue
    lacks a usable backbone get the identity.
    """
    frames = {}
    for site_atoms in _residue_groups(model).values():
        named = {model.atoms[i].name: model.atoms[i].position for i in site_atoms}
        frame = np.eye(3)
        if all(k in named for k in ("N", "CA", "C")):
            x = named["N"] - named["CA"]
            z = np.cross(x, named["C"] - named["CA"])
            nx, nz = np.linalg.norm(x), np.linalg.norm(z)
            if nx > 1e-6 and nz > 1e-6:
                x, z = x / nx, z / nz
                frame = np.stack([x, np.cross(z, x), z])
        for i in site_atoms:
            frames[i] = frame
    return np.stack([frames[i] for i in atom_ids]) if len(atom_ids) else np.zeros((0, 3, 3))


def _residue_groups(model):
    groups = {}
    for i, atom in enumerate(model.atoms):
        groups.setdefault(atom.residue_key, []).append(i)
    return groups


def compute_sasa(model: ProteinModel, probe_radius: float = 1.4, n_points: int = 960, atom_ids=None) -> np.ndarray:
    """SASA (A^2) for ``atom_ids`` (default: all included atoms), in that order.

    Only the selected atoms occlude one another.
    """
    if atom_ids is None:
        atom_ids = included_atom_ids(model)
    atom_ids = np.asarray(atom_ids, dtype=np.int64)
    radii = np.empty(len(atom_ids))
    for k, i in enumerate(atom_ids):
        atom = model.atoms[i]
        if atom.vdw_radius is None:
            raise MissingRadiusError(
                f"no vdW radius for atom {atom.serial} {atom.name} "
                f"{atom.residue_name} {atom.chain_id}{atom.residue_seq}"
            )
        radii[k] = atom.vdw_radius
    coords = np.array([model.atoms[i].position for i in atom_ids]).reshape(-1, 3)
    return shrake_rupley(coords, radii, probe_radius, n_points, residue_orientations(model, atom_ids))


@dataclass(frozen=True)
class AtomFeature:
    onehot: tuple
    fc: float
    sasa: float

    def as_vector(self) -> np.ndarray:
        return np.array([*self.onehot, self.fc, self.sasa], dtype=np.float64)


class AtomFeatures:
    """Mapping atom index -> 7-vector, backed by one ``(n, 7)`` array."""

    def __init__(self, atom_ids, values):
        self.atom_ids = np.asarray(atom_ids, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64).reshape(-1, N_FEATURES)
        if len(self.atom_ids) != len(self.values):
            raise ValueError("atom_ids and values length differ")
        self._row = {int(i): k for k, i in enumerate(self.atom_ids)}

    def __len__(self):
        return len(self.atom_ids)

    def __contains__(self, atom_id):
        return int(atom_id) in self._row

    def __iter__(self):
        return iter(int(i) for i in self.atom_ids)

    def __getitem__(self, atom_id) -> AtomFeature:
        v = self.values[self._row[int(atom_id)]]
        return AtomFeature(tuple(int(x) for x in v[:5]), float(v[5]), float(v[6]))

    def vector(self, atom_id) -> np.ndarray:
        return self.values[self._row[int(atom_id)]]


def featurize(
    model: ProteinModel,
    charge_table: Optional[dict] = None,
    radii_table: Optional[dict] = None,
    probe_radius: float = 1.4,
    n_points: int = 960,
) -> AtomFeatures:
    """Charges, radii and SASA for every included atom, packed as 7-vectors."""
    model, _ = assign_charges(model, charge_table)
    model = assign_radii(model, radii_table)
    ids = included_atom_ids(model)
    values = np.zeros((len(ids), N_FEATURES))
    for k, i in enumerate(ids):
        atom = model.atoms[i]
        values[k, int(classify_element(atom))] = 1.0
        values[k, 5] = atom.charge
    values[:, 6] = compute_sasa(model, probe_radius, n_points, ids)
    return AtomFeatures(ids, values)
