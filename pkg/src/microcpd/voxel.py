"""Residue-centred local frames and 7 x 20 x 20 x 20 microenvironment grids."""

from __future__ import annotations

import io
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .exceptions import FileFormatError, GeometryError, TruncatedFileError, VersionMismatchError
from .features import N_FEATURES, AtomFeatures
from .structure import ProteinModel, ResidueSite

logger = logging.getLogger(__name__)

CB_BOND = 1.522
CB_ANGLE = 110.4  # N-CA-CB, degrees
CB_DIHEDRAL = -122.55  # C-N-CA-CB, degrees

_DEGENERATE = 1e-6


def _unit(v):
    n = np.linalg.norm(v)
    if n < _DEGENERATE:
        raise GeometryError("degenerate vector")
    return v / n


def place_atom(a, b, c, bond, angle_deg, dihedral_deg):
    """Position d with |cd| = bond, angle(b, c, d) and dihedral(a, b, c, d) given."""
    bc = c - b
    normal = np.cross(b - a, bc)
    if np.linalg.norm(normal) < _DEGENERATE or np.linalg.norm(bc) < _DEGENERATE:
        raise GeometryError("collinear reference atoms")
    bc = bc / np.linalg.norm(bc)
    normal = normal / np.linalg.norm(normal)
    theta, phi = np.radians(angle_deg), np.radians(dihedral_deg)
    local = np.array([
        -bond * np.cos(theta),
        bond * np.sin(theta) * np.cos(phi),
        bond * np.sin(theta) * np.sin(phi),
    ])
    return c + local[0] * bc + local[1] * np.cross(normal, bc) + local[2] * normal


def virtual_cbeta(n, ca, c) -> np.ndarray:
    """Ideal-geometry C-beta from backbone N, CA, C."""
    n, ca, c = (np.asarray(p, dtype=np.float64) for p in (n, ca, c))
    return place_atom(c, n, ca, CB_BOND, CB_ANGLE, CB_DIHEDRAL)


@dataclass(frozen=True)
class LocalFrame:
    origin: np.ndarray
    axes: np.ndarray  # rows: x, y, z

    @property
    def x_axis(self):
        return self.axes[0]

    @property
    def y_axis(self):
        return self.axes[1]

    @property
    def z_axis(self):
        return self.axes[2]

    def to_local(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.origin) @ self.axes.T


def site_cbeta(site: ResidueSite) -> np.ndarray:
    if site.cbeta is not None:
        return site.cbeta
    bb = site.backbone
    return virtual_cbeta(bb["N"], bb["CA"], bb["C"])


def local_frame(site: ResidueSite) -> LocalFrame:
    """x along CA->N, z normal to the N-CA-C plane on the C-beta side, y = z x x."""
    n, ca, c = site.backbone["N"], site.backbone["CA"], site.backbone["C"]
    cb = site_cbeta(site)
    u = n - ca
    cross = np.cross(u, c - ca)
    if np.linalg.norm(cross) < _DEGENERATE or np.linalg.norm(u) < _DEGENERATE:
        raise GeometryError(f"collinear backbone at {site.site_id}")
    x = u / np.linalg.norm(u)
    z = cross / np.linalg.norm(cross)
    side = float(z @ (cb - ca))
    if abs(side) < 1e-9:
        raise GeometryError(f"C-beta lies in the backbone plane at {site.site_id}")
    if side < 0:
        z = -z
    y = np.cross(z, x)
    return LocalFrame(origin=np.array(cb, dtype=np.float64), axes=np.stack([x, y, z]))


@dataclass(frozen=True)
class GridSpec:
    extent: float = 20.0
    cell: float = 1.0
    channels: int = N_FEATURES

    def __post_init__(self):
        if self.extent / self.cell != 20:
            raise ValueError("grid must have exactly 20 cells per side")

    @property
    def size(self) -> int:
        return 20

    @property
    def shape(self) -> tuple:
        return (self.channels, self.size, self.size, self.size)


@dataclass
class MicroEnvGrid:
    values: np.ndarray  # (7, 20, 20, 20)
    label: int
    site_id: str


def build_grid(
    site: ResidueSite,
    features: AtomFeatures,
    coords: np.ndarray,
    spec: GridSpec = GridSpec(),
    frame: Optional[LocalFrame] = None,
) -> MicroEnvGrid:
    """Sum featured atoms into the cells of the site's local box.

    ``coords`` holds every atom position of the model, indexed like
    ``model.atoms``. Cells are half-open: cell i along an axis covers
    [i - 10, i - 9) A in local coordinates.
    """
    if frame is None:
        frame = local_frame(site)
    excluded = set(site.sidechain_atom_ids)
    keep = np.array([k for k, i in enumerate(features.atom_ids) if int(i) not in excluded], dtype=np.int64)
    n = spec.size
    grid = np.zeros((spec.channels, n * n * n), dtype=np.float64)
    if keep.size:
        local = frame.to_local(coords[features.atom_ids[keep]])
        idx = np.floor(local / spec.cell + n / 2).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < n), axis=1)
        flat = (idx[inside, 0] * n + idx[inside, 1]) * n + idx[inside, 2]
        vals = features.values[keep[inside]]
        for ch in range(spec.channels):
            grid[ch] = np.bincount(flat, weights=vals[:, ch], minlength=n ** 3)
    return MicroEnvGrid(grid.reshape(spec.shape), site.label, site.site_id)


@dataclass
class VoxelizeReport:
    sites: int = 0
    frame_failures: int = 0
    skipped_ids: list = field(default_factory=list)


def voxelize_sites(model: ProteinModel, features: AtomFeatures, sites: list, spec: GridSpec = GridSpec(),
                   report: Optional[VoxelizeReport] = None) -> list:
    """Grids for ``sites``; sites with degenerate frames are skipped and counted."""
    coords = model.coordinates
    out = []
    for site in sites:
        try:
            frame = local_frame(site)
        except GeometryError:
            if report is not None:
                report.frame_failures += 1
                report.skipped_ids.append(site.site_id)
            continue
        out.append(build_grid(site, features, coords, spec, frame))
    if report is not None:
        report.sites += len(out)
    return out


# EMOG grid dataset: "EMOG" | u16 version | u64 count | samples... | optional trailer
# sample: u8 label | u32 id length | utf-8 id | 7*20*20*20 float32 LE
# trailer: "EMOM" | u32 length | utf-8 JSON metadata
EMOG_MAGIC = b"EMOG"
EMOG_VERSION = 1
_TRAILER_MAGIC = b"EMOM"
_GRID_FLOATS = N_FEATURES * 20 * 20 * 20


@dataclass
class GridDataset:
    values: np.ndarray  # (n, 7, 20, 20, 20) float32
    labels: np.ndarray  # (n,) int64
    site_ids: list
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_grids(cls, grids: list, metadata: Optional[dict] = None) -> "GridDataset":
        values = np.zeros((len(grids), N_FEATURES, 20, 20, 20), dtype=np.float32)
        for k, g in enumerate(grids):
            values[k] = g.values
        labels = np.array([g.label for g in grids], dtype=np.int64)
        return cls(values, labels, [g.site_id for g in grids], dict(metadata or {}))

    @classmethod
    def concatenate(cls, parts: list) -> "GridDataset":
        if not parts:
            return cls(np.zeros((0, N_FEATURES, 20, 20, 20), np.float32), np.zeros(0, np.int64), [])
        return cls(
            np.concatenate([p.values for p in parts]),
            np.concatenate([p.labels for p in parts]),
            [s for p in parts for s in p.site_ids],
            {},
        )

    def class_histogram(self, n_classes: int = 20) -> np.ndarray:
        return np.bincount(self.labels, minlength=n_classes)


def encode_grid_dataset(dataset: GridDataset) -> bytes:
    buf = io.BytesIO()
    buf.write(EMOG_MAGIC)
    buf.write(struct.pack("<HQ", EMOG_VERSION, len(dataset)))
    for values, label, site_id in zip(dataset.values, dataset.labels, dataset.site_ids):
        if not 0 <= int(label) < 256:
            raise ValueError(f"label {label} does not fit in a byte")
        raw_id = site_id.encode("utf-8")
        buf.write(struct.pack("<BI", int(label), len(raw_id)))
        buf.write(raw_id)
        buf.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    if dataset.metadata:
        meta = json.dumps(dataset.metadata, sort_keys=True).encode("utf-8")
        buf.write(_TRAILER_MAGIC + struct.pack("<I", len(meta)) + meta)
    return buf.getvalue()


def _take(stream, n, what):
    data = stream.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"truncated grid file while reading {what}")
    return data


def iter_grid_file(stream) -> Iterator[MicroEnvGrid]:
    """Stream samples from an open EMOG file."""
    magic = stream.read(4)
    if magic != EMOG_MAGIC:
        raise FileFormatError(f"not a grid dataset (magic {magic!r})")
    version, count = struct.unpack("<HQ", _take(stream, 10, "header"))
    if version != EMOG_VERSION:
        raise VersionMismatchError(f"grid dataset version {version}, expected {EMOG_VERSION}")
    for _ in range(count):
        label, id_len = struct.unpack("<BI", _take(stream, 5, "sample header"))
        site_id = _take(stream, id_len, "site id").decode("utf-8")
        values = np.frombuffer(_take(stream, 4 * _GRID_FLOATS, "grid values"), dtype="<f4")
        yield MicroEnvGrid(values.reshape(N_FEATURES, 20, 20, 20).astype(np.float32), int(label), site_id)


def decode_grid_dataset(data: bytes) -> GridDataset:
    stream = io.BytesIO(data)
    grids = list(iter_grid_file(stream))
    metadata = {}
    tail = stream.read(8)
    if len(tail) == 8 and tail[:4] == _TRAILER_MAGIC:
        (n,) = struct.unpack("<I", tail[4:])
        metadata = json.loads(_take(stream, n, "metadata").decode("utf-8"))
    return GridDataset.from_grids(grids, metadata)


def read_grid_dataset(path) -> GridDataset:
    with open(path, "rb") as fh:
        return decode_grid_dataset(fh.read())
