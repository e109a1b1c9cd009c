"""PDB / PQR parsing and residue-site extraction.

Coordinates are in Angstrom. Only the first MODEL of a PDB file is read and
alternate locations are resolved per atom by highest occupancy (first
encountered wins ties).
"""

from __future__ import annotations

import io
import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import IO, Iterable, Optional, Union

import numpy as np

from .exceptions import SelectionError, StructureParseError

logger = logging.getLogger(__name__)

# Canonical class order: alphabetical by three-letter code.
AMINO_ACIDS = (
    "ALA", "ARG", "ASN", "ASP", "CYS", "GLN", "GLU", "GLY", "HIS", "ILE",
    "LEU", "LYS", "MET", "PHE", "PRO", "SER", "THR", "TRP", "TYR", "VAL",
)
ONE_LETTER = (
    "A", "R", "N", "D", "C", "Q", "E", "G", "H", "I",
    "L", "K", "M", "F", "P", "S", "T", "W", "Y", "V",
)
CLASS_INDEX = {name: i for i, name in enumerate(AMINO_ACIDS)}
NONSTANDARD_MAP = {"MSE": "MET"}

# Atoms that stay in the grid when the central residue's side chain is removed.
BACKBONE_NAMES = frozenset({
    "N", "CA", "C", "O", "OXT", "OT1", "OT2",
    "H", "H1", "H2", "H3", "HN", "HA", "HA2", "HA3", "HXT",
})

_TWO_LETTER_ELEMENTS = frozenset({
    "FE", "ZN", "MG", "MN", "CA", "CL", "BR", "NA", "CU", "CO", "NI", "SE",
    "CD", "HG", "LI", "AL", "SI", "AS", "MO", "PT", "AU", "AG", "PB", "SR",
    "BA", "CS", "RB", "YB", "GD", "SM", "EU", "TB", "IR", "OS", "RU", "RH",
})

Source = Union[str, bytes, os.PathLike, IO]


@dataclass(eq=False)
class Atom:
    serial: int
    name: str
    element: str
    residue_name: str
    chain_id: str
    residue_seq: int
    insertion_code: str
    position: np.ndarray
    occupancy: float = 1.0
    charge: Optional[float] = None
    vdw_radius: Optional[float] = None
    hetero: bool = False

    @property
    def residue_key(self) -> tuple:
        return (self.chain_id, self.residue_seq, self.insertion_code)


@dataclass(eq=False)
class ResidueSite:
    """One classifiable residue: label, backbone, and the atoms it owns.

    ``atom_ids`` and ``sidechain_atom_ids`` index into the owning model's
    ``atoms`` list.
    """

    label: int
    residue_name: str
    chain_id: str
    residue_seq: int
    insertion_code: str
    backbone: dict
    cbeta: Optional[np.ndarray]
    atom_ids: tuple
    sidechain_atom_ids: tuple
    source_id: str = ""

    @property
    def site_id(self) -> str:
        return f"{self.source_id}:{self.chain_id}:{self.residue_seq}{self.insertion_code}"


@dataclass
class SiteReport:
    """Counts of residues skipped by :func:`extract_sites`."""

    incomplete_backbone: int = 0
    bad_geometry: int = 0
    nonstandard: int = 0
    nonstandard_names: dict = field(default_factory=dict)

    @property
    def skipped(self) -> int:
        return self.incomplete_backbone + self.bad_geometry + self.nonstandard


class ProteinModel:
    """Parsed structure: an ordered list of atoms plus derived residue sites."""

    def __init__(self, atoms: list, source_id: str = ""):
        serials = [a.serial for a in atoms]
        if len(set(serials)) != len(serials):
            raise StructureParseError(f"duplicate atom serials in {source_id or 'model'}")
        self.atoms = list(atoms)
        self.source_id = source_id
        self._sites = None
        self._report = None

    def __len__(self) -> int:
        return len(self.atoms)

    def __repr__(self) -> str:
        return f"ProteinModel({self.source_id!r}, atoms={len(self.atoms)})"

    @property
    def coordinates(self) -> np.ndarray:
        if not self.atoms:
            return np.zeros((0, 3))
        return np.array([a.position for a in self.atoms], dtype=np.float64)

    @property
    def chain_ids(self) -> list:
        return sorted({a.chain_id for a in self.atoms})

    @property
    def sites(self) -> list:
        if self._sites is None:
            self._report = SiteReport()
            self._sites = extract_sites(self, self._report)
        return self._sites

    @property
    def site_report(self) -> SiteReport:
        self.sites
        return self._report

    def with_atoms(self, atoms: list) -> "ProteinModel":
        return ProteinModel(atoms, self.source_id)


def _read_text(source: Source) -> tuple[str, str]:
    """Return (text, default source id) for a path, bytes, str or file object."""
    if hasattr(source, "read"):
        data = source.read()
        name = Path(getattr(source, "name", "stdin")).stem
    elif isinstance(source, bytes):
        data, name = source, ""
    elif isinstance(source, (str, os.PathLike)) and (
        isinstance(source, os.PathLike) or ("\n" not in source and os.path.exists(source))
    ):
        path = Path(source)
        data = path.read_bytes()
        name = path.stem
    else:
        data, name = source, ""
    if isinstance(data, bytes):
        data = data.decode("ascii", errors="replace")
    return data, name


def infer_element(name: str, residue_name: str = "", field4: Optional[str] = None) -> str:
    """Guess the element symbol from an atom name.

    ``field4`` is the raw, unstripped 4-character PDB name field; when given,
    the column convention (element right-justified in columns 13-14) is used.
    """
    if residue_name == "MSE" and name.strip() == "SE":
        return "SE"
    if field4 is not None and len(field4) == 4:
        head = field4[:2]
        if head[0] in " 0123456789":
            letters = "".join(ch for ch in head if ch.isalpha())
            if letters:
                return letters.upper()
        elif head.upper() in _TWO_LETTER_ELEMENTS and field4[2:].strip() == "":
            return head.upper()
    stripped = name.strip().lstrip("0123456789")
    if stripped[:2].upper() in _TWO_LETTER_ELEMENTS and len(stripped) <= 2 and residue_name not in AMINO_ACIDS:
        return stripped[:2].upper()
    return stripped[:1].upper()


def _float_field(line: str, start: int, stop: int, what: str, lineno: int) -> float:
    text = line[start:stop]
    try:
        value = float(text)
    except ValueError:
        raise StructureParseError(f"malformed {what} field {text!r}", lineno) from None
    if not np.isfinite(value):
        raise StructureParseError(f"non-finite {what} field {text!r}", lineno)
    return value


def parse_pdb(source: Source, *, include_hetero: bool = False, source_id: Optional[str] = None) -> ProteinModel:
    """Parse fixed-column PDB text into a :class:`ProteinModel`.

    Only ATOM records are read by default; HETATM records are added when
    ``include_hetero`` is set, except MSE residues which are always kept so
    that selenomethionine can be mapped to MET.
    """
    text, default_id = _read_text(source)
    chosen: dict = {}
    order: list = []
    in_model = False
    seen_model = False
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.rstrip("\r\n")
        record = line[:6]
        if record.startswith("MODEL"):
            if seen_model:
                break
            in_model = seen_model = True
            continue
        if record.startswith("ENDMDL"):
            if in_model:
                break
            continue
        if record == "ATOM  ":
            hetero = False
        elif record == "HETATM":
            hetero = True
            if not include_hetero and line[17:20].strip() not in NONSTANDARD_MAP:
                continue
        else:
            continue
        if len(line) < 54:
            raise StructureParseError(f"record too short for coordinates ({len(line)} columns)", lineno)
        line = line.ljust(80)
        x = _float_field(line, 30, 38, "x", lineno)
        y = _float_field(line, 38, 46, "y", lineno)
        z = _float_field(line, 46, 54, "z", lineno)
        occ_text = line[54:60].strip()
        occupancy = _float_field(line, 54, 60, "occupancy", lineno) if occ_text else 1.0
        if not 0.0 <= occupancy <= 1.0:
            raise StructureParseError(f"occupancy {occupancy} outside [0, 1]", lineno)
        try:
            residue_seq = int(line[22:26])
        except ValueError:
            raise StructureParseError(f"malformed residue number {line[22:26]!r}", lineno) from None
        try:
            serial = int(line[6:11])
        except ValueError:
            serial = -lineno
        name_field = line[12:16]
        name = name_field.strip()
        residue_name = line[17:20].strip()
        element = line[76:78].strip().upper() or infer_element(name, residue_name, name_field)
        atom = Atom(
            serial=serial,
            name=name,
            element=element,
            residue_name=residue_name,
            chain_id=line[21],
            residue_seq=residue_seq,
            insertion_code=line[26].strip(),
            position=np.array([x, y, z]),
            occupancy=occupancy,
            hetero=hetero,
        )
        key = (atom.chain_id, residue_seq, atom.insertion_code, name)
        if key not in chosen:
            chosen[key] = atom
            order.append(key)
        elif occupancy > chosen[key].occupancy:
            chosen[key] = replace(atom, serial=chosen[key].serial)
    if not order:
        raise StructureParseError("empty model: no ATOM records")
    return ProteinModel([chosen[k] for k in order], source_id if source_id is not None else default_id)


def parse_pqr(source: Source, *, source_id: Optional[str] = None) -> ProteinModel:
    """Parse whitespace-delimited PQR text (10 or 11 fields per atom row)."""
    text, default_id = _read_text(source)
    atoms = []
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        fields = raw.split()
        if not fields or fields[0] not in ("ATOM", "HETATM"):
            continue
        if len(fields) == 11:
            _, serial, name, residue_name, chain_id, seq, x, y, z, q, r = fields
        elif len(fields) == 10:
            _, serial, name, residue_name, seq, x, y, z, q, r = fields
            chain_id = " "
        else:
            raise StructureParseError(f"expected 10 or 11 fields, got {len(fields)}", lineno)
        icode = ""
        if seq and seq[-1].isalpha():
            seq, icode = seq[:-1], seq[-1]
        try:
            charge, radius = float(q), float(r)
        except ValueError:
            raise StructureParseError(f"non-numeric charge/radius {q!r} {r!r}", lineno) from None
        try:
            position = np.array([float(x), float(y), float(z)])
            residue_seq, serial_no = int(seq), int(serial)
        except ValueError:
            raise StructureParseError("malformed numeric field", lineno) from None
        if not (np.all(np.isfinite(position)) and np.isfinite(charge) and np.isfinite(radius)):
            raise StructureParseError("non-finite numeric field", lineno)
        atoms.append(Atom(
            serial=serial_no,
            name=name,
            element=infer_element(name, residue_name),
            residue_name=residue_name,
            chain_id=chain_id,
            residue_seq=residue_seq,
            insertion_code=icode,
            position=position,
            charge=charge,
            vdw_radius=radius,
            hetero=fields[0] == "HETATM",
        ))
    if not atoms:
        raise StructureParseError("empty model: no ATOM records")
    return ProteinModel(atoms, source_id if source_id is not None else default_id)


def write_pqr(model: ProteinModel) -> str:
    """Serialize to whitespace PQR (11 fields, with chain identifiers)."""
    lines = []
    for a in model.atoms:
        chain = a.chain_id.strip() or "X"
        q = 0.0 if a.charge is None else float(a.charge)
        r = 0.0 if a.vdw_radius is None else float(a.vdw_radius)
        x, y, z = (float(v) for v in a.position)
        record = "HETATM" if a.hetero else "ATOM"
        lines.append(
            f"{record:<6} {a.serial:5d} {a.name:<4} {a.residue_name:>3} {chain} "
            f"{a.residue_seq:4d}{a.insertion_code or ''} {x!r} {y!r} {z!r} {q!r} {r!r}"
        )
    lines.append("END")
    return "\n".join(lines) + "\n"


def read_structure(path: Union[str, os.PathLike], fmt: Optional[str] = None, **kwargs) -> ProteinModel:
    """Read a PDB or PQR file, choosing the parser from ``fmt`` or the suffix."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "pqr":
        kwargs.pop("include_hetero", None)
        return parse_pqr(path, **kwargs)
    return parse_pdb(path, **kwargs)


def select_chains(model: ProteinModel, chain_ids: Iterable[str]) -> ProteinModel:
    wanted = set(chain_ids)
    if not wanted:
        raise ValueError("chain_ids must be nonempty")
    kept = [a for a in model.atoms if a.chain_id in wanted]
    if not kept:
        raise SelectionError(
            f"no atoms in chains {sorted(wanted)}; model has chains {model.chain_ids}"
        )
    if len(kept) == len(model.atoms):
        return model
    suffix = "".join(sorted(wanted))
    return ProteinModel(kept, f"{model.source_id}{suffix}" if model.source_id else suffix)


def _backbone_ok(backbone: dict) -> bool:
    n, ca, c = backbone["N"], backbone["CA"], backbone["C"]
    for a, b in ((n, ca), (ca, c), (n, c)):
        d = float(np.linalg.norm(a - b))
        if not 0.5 < d < 3.0:
            return False
    return True


def extract_sites(model: ProteinModel, report: Optional[SiteReport] = None) -> list:
    """One :class:`ResidueSite` per standard residue with a complete backbone."""
    if report is None:
        report = SiteReport()
    groups: dict = {}
    for i, atom in enumerate(model.atoms):
        groups.setdefault(atom.residue_key, []).append(i)
    sites = []
    for (chain_id, seq, icode), ids in groups.items():
        resname = model.atoms[ids[0]].residue_name
        mapped = NONSTANDARD_MAP.get(resname, resname)
        if mapped not in CLASS_INDEX:
            if any(model.atoms[i].name == "CA" for i in ids):
                report.nonstandard += 1
                report.nonstandard_names[resname] = report.nonstandard_names.get(resname, 0) + 1
            continue
        named = {model.atoms[i].name: i for i in ids}
        if not all(k in named for k in ("N", "CA", "C")):
            report.incomplete_backbone += 1
            continue
        backbone = {k: model.atoms[named[k]].position.copy() for k in ("N", "CA", "C", "O") if k in named}
        if not _backbone_ok(backbone):
            report.bad_geometry += 1
            continue
        cbeta = model.atoms[named["CB"]].position.copy() if "CB" in named else None
        sidechain = tuple(i for i in ids if model.atoms[i].name not in BACKBONE_NAMES)
        sites.append(ResidueSite(
            label=CLASS_INDEX[mapped],
            residue_name=mapped,
            chain_id=chain_id,
            residue_seq=seq,
            insertion_code=icode,
            backbone=backbone,
            cbeta=cbeta,
            atom_ids=tuple(ids),
            sidechain_atom_ids=sidechain,
            source_id=model.source_id,
        ))
    if report.nonstandard:
        logger.warning("dropped %d non-standard residues: %s", report.nonstandard, report.nonstandard_names)
    return sites


def sample_sites(sites: list, threshold: int = 200, cap: int = 100, seed=None) -> list:
    """Subsample large proteins: more than ``threshold`` sites -> ``cap`` random sites.

    Sampling is uniform without replacement and the input order is kept.
    """
    if cap > threshold:
        raise ValueError(f"cap ({cap}) must not exceed threshold ({threshold})")
    if len(sites) <= threshold:
        return list(sites)
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(sites), size=cap, replace=False))
    return [sites[i] for i in picked]
