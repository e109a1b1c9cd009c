"""Shrake-Rupley solvent accessible surface area.

Each atom carries a Fibonacci-lattice of test points on its probe-inflated
sphere. A point is exposed when it lies outside every neighbour's inflated
sphere. Lattices may be oriented per atom (see ``orientations``); orienting
them by a frame that moves with the molecule makes the result invariant to
rigid motions, while a fixed orientation keeps the classic behaviour.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

_GOLDEN_ANGLE = np.pi * (3.0 - np.sqrt(5.0))


@lru_cache(maxsize=8)
def sphere_points(n: int) -> np.ndarray:
    """Deterministic, near-uniform unit-sphere points (Fibonacci lattice), shape (n, 3)."""
    if n < 1:
        raise ValueError("n must be positive")
    k = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * k + 1.0) / n
    rho = np.sqrt(1.0 - z * z)
    phi = k * _GOLDEN_ANGLE
    pts = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    pts.setflags(write=False)
    return pts


def neighbor_lists(coords: np.ndarray, reach: np.ndarray) -> list:
    """Pairs closer than ``reach[i] + reach[j]``, found by spatial hashing.

    Returns one sorted index array per atom (self excluded).
    """
    n = len(coords)
    if n == 0:
        return []
    cell = max(2.0 * float(reach.max()), 1e-6)
    keys = np.floor(coords / cell).astype(np.int64)
    buckets: dict = {}
    for i, key in enumerate(map(tuple, keys)):
        buckets.setdefault(key, []).append(i)
    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]
    out = []
    for i in range(n):
        kx, ky, kz = keys[i]
        cand = []
        for dx, dy, dz in offsets:
            cand.extend(buckets.get((kx + dx, ky + dy, kz + dz), ()))
        cand = np.array(sorted(cand), dtype=np.int64)
        cand = cand[cand != i]
        d2 = ((coords[cand] - coords[i]) ** 2).sum(axis=1)
        out.append(cand[d2 < (reach[i] + reach[cand]) ** 2])
    return out


def shrake_rupley(coords, radii, probe_radius: float = 1.4, n_points: int = 960, orientations=None) -> np.ndarray:
    """Per-atom SASA in A^2.

    Parameters
    ----------
    coords : (n, 3) array
    radii : (n,) array of van der Waals radii
    probe_radius : float
    n_points : int
        Lattice points per atom.
    orientations : (n, 3, 3) array, optional
        Rows of ``orientations[i]`` are the axes used to place atom ``i``'s
        lattice. Identity when omitted.
    """
    coords = np.asarray(coords, dtype=np.float64)
    radii = np.asarray(radii, dtype=np.float64)
    n = len(coords)
    if radii.shape != (n,):
        raise ValueError("radii must have one entry per atom")
    inflated = radii + probe_radius
    unit = sphere_points(n_points)
    neighbors = neighbor_lists(coords, inflated)
    area = 4.0 * np.pi * inflated ** 2
    sasa = np.empty(n)
    for i in range(n):
        nb = neighbors[i]
        if nb.size == 0:
            sasa[i] = area[i]
            continue
        lattice = unit if orientations is None else unit @ orientations[i]
        pts = inflated[i] * lattice
        rel = coords[nb] - coords[i]
        d2 = ((pts[:, None, :] - rel[None, :, :]) ** 2).sum(axis=2)
        buried = (d2 < inflated[nb] ** 2).any(axis=1)
        sasa[i] = area[i] * (n_points - int(buried.sum())) / n_points
    return sasa
