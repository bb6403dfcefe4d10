"""Multilattice geometry: cell matrix, species shifts, bond stencils, finite windows.

A multilattice is a union of S copies of one Bravais lattice F·Z^d, each copy
("species") offset by a shift p_alpha with p_0 = 0.  Interactions are described
by bond triplets (rho, alpha, beta): species beta at site xi + F·rho against
species alpha at xi.  Everything downstream (energies, dynamical matrices,
Green's functions) indexes into the canonical triplet order fixed here.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LatticeError",
    "MultilatticeSpec",
    "BondTriplet",
    "InteractionRange",
    "LatticeWindow",
    "build_multilattice",
    "validate_range",
    "unit_cell_simplices",
    "mesh_edges",
]


class LatticeError(ValueError):
    """Invalid geometry or stencil input."""


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MultilatticeSpec:
    """Normalized multilattice: det(F) = 1, p_0 = 0, displacement dimension n."""

    d: int
    n: int
    F: np.ndarray          # (d, d), det = 1
    shifts: np.ndarray     # (S, d) physical shifts, shifts[0] = 0
    B: np.ndarray          # dual cell matrix F^{-T}
    scale: float           # factor the input cell was divided by

    @property
    def S(self) -> int:
        return self.shifts.shape[0]

    def sites_physical(self, coords: np.ndarray) -> np.ndarray:
        """Map integer lattice coordinates (…, d) to physical positions."""
        return np.asarray(coords, dtype=float) @ self.F.T


@dataclass(frozen=True, order=True)
class BondTriplet:
    """Stencil entry (rho, alpha, beta); rho in lattice coordinates."""

    alpha: int
    beta: int
    rho: tuple

    def reversed(self) -> "BondTriplet":
        return BondTriplet(self.beta, self.alpha, tuple(-r for r in self.rho))

    def __repr__(self):  # (rho, alpha, beta) reads like the math
        return f"BondTriplet(rho={self.rho}, alpha={self.alpha}, beta={self.beta})"


def make_triplet(rho, alpha: int, beta: int) -> BondTriplet:
    rho = tuple(int(r) for r in rho)
    if all(r == 0 for r in rho) and alpha == beta:
        raise LatticeError("triplet (0, alpha, alpha) compares a site with itself")
    return BondTriplet(int(alpha), int(beta), rho)


@dataclass(frozen=True)
class InteractionRange:
    """Validated, reversal-closed triplet set with cached index arrays."""

    spec: MultilatticeSpec
    triplets: tuple            # BondTriplet, canonical (alpha, beta, rho) order
    r1: tuple                  # distinct rho vectors incl. unit-cell mesh edges
    added: tuple               # triplets appended by validate_range
    rho: np.ndarray = field(repr=False)      # (T, d) int64
    alpha: np.ndarray = field(repr=False)    # (T,) int64
    beta: np.ndarray = field(repr=False)     # (T,) int64
    reversal: np.ndarray = field(repr=False) # (T,) index of (-rho, beta, alpha)

    @property
    def T(self) -> int:
        return len(self.triplets)

    def bond_vectors(self) -> np.ndarray:
        """Physical reference bond vectors F·rho + p_beta - p_alpha, shape (T, d)."""
        s = self.spec
        return self.rho @ s.F.T + s.shifts[self.beta] - s.shifts[self.alpha]

    def index_of(self, t: BondTriplet) -> int:
        return self.triplets.index(t)

    def rho_set(self) -> np.ndarray:
        """Distinct rho rows over all triplets, (R, d) int64."""
        return np.unique(self.rho, axis=0)


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def build_multilattice(F, shifts, n: int | None = None) -> MultilatticeSpec:
    """Normalize a cell matrix and shift list into a MultilatticeSpec.

    The input cell is rescaled so det(F) = 1 (shifts shrink by the same
    factor); the applied scale is recorded on the spec.
    """
    F = np.asarray(F, dtype=float)
    if F.ndim != 2 or F.shape[0] != F.shape[1]:
        raise LatticeError("cell matrix must be square")
    d = F.shape[0]
    if d not in (2, 3):
        raise LatticeError(f"spatial dimension must be 2 or 3, got {d}")
    det = np.linalg.det(F)
    if abs(det) < 1e-12:
        raise LatticeError("cell matrix is singular")
    if det < 0:
        raise LatticeError("cell matrix must be positively oriented")
    if n is None:
        n = d
    n = int(n)
    if not (n == d or (d == 2 and n == 3)):
        raise LatticeError(f"displacement dimension n={n} invalid for d={d}")

    shifts = np.atleast_2d(np.asarray(shifts, dtype=float))
    if shifts.shape[1] != d:
        raise LatticeError("shift vectors must have length d")
    if np.any(shifts[0] != 0.0):
        raise LatticeError("first shift p_0 must be exactly zero")

    scale = det ** (1.0 / d)
    Fn = F / scale
    sn = shifts / scale
    sn[0] = 0.0
    B = np.linalg.inv(Fn).T
    for a in (Fn, sn, B):
        a.setflags(write=False)
    return MultilatticeSpec(d=d, n=n, F=Fn, shifts=sn, B=B, scale=float(scale))


def unit_cell_simplices(d: int) -> np.ndarray:
    """Kuhn simplices of the unit cell, vertex lattice offsets, (ns, d+1, d)."""
    if d == 2:
        return np.array(
            [[[0, 0], [1, 0], [1, 1]],
             [[0, 0], [0, 1], [1, 1]]], dtype=np.int64)
    if d == 3:
        simps = []
        for perm in itertools.permutations(range(3)):
            v = np.zeros((4, 3), dtype=np.int64)
            for i, ax in enumerate(perm):
                v[i + 1] = v[i]
                v[i + 1, ax] += 1
            simps.append(v)
        return np.array(simps, dtype=np.int64)
    raise LatticeError(f"no simplicial decomposition for d={d}")


def mesh_edges(d: int) -> np.ndarray:
    """Edge vectors (both signs) of the unit-cell simplices, (m, d) int64."""
    simps = unit_cell_simplices(d)
    edges = set()
    for s in simps:
        for i in range(s.shape[0]):
            for j in range(i + 1, s.shape[0]):
                e = tuple(int(x) for x in (s[j] - s[i]))
                edges.add(e)
                edges.add(tuple(-x for x in e))
    return np.array(sorted(edges), dtype=np.int64)


def validate_range(spec: MultilatticeSpec, triplets) -> InteractionRange:
    """Close a triplet set under the stencil requirements and index it.

    Enlarges minimally: the zero-distance pair (0, alpha, beta) for every
    alpha != beta, and the reversal (-rho, beta, alpha) of every triplet.
    Same-species spanning failures cannot be fixed by enlargement and raise.
    """
    S = spec.S
    d = spec.d
    tset = set()
    for t in triplets:
        if not isinstance(t, BondTriplet):
            t = make_triplet(t[0], t[1], t[2])
        if len(t.rho) != d:
            raise LatticeError(f"rho has wrong dimension: {t}")
        if not (0 <= t.alpha < S and 0 <= t.beta < S):
            raise LatticeError(f"species index out of range: {t}")
        tset.add(t)
    if not tset:
        raise LatticeError("empty triplet set")

    added = []
    zero = (0,) * d
    for a in range(S):
        for b in range(S):
            if a != b and BondTriplet(a, b, zero) not in tset:
                t = BondTriplet(a, b, zero)
                tset.add(t)
                added.append(t)
    for t in list(tset):
        r = t.reversed()
        if r not in tset:
            tset.add(r)
            added.append(r)

    for a in range(S):
        vecs = [t.rho for t in tset if t.alpha == a and t.beta == a]
        if not vecs or np.linalg.matrix_rank(np.asarray(vecs, float) @ spec.F.T) < d:
            raise LatticeError(
                f"same-species vectors for species {a} do not span the space; "
                "add more (rho, a, a) triplets")

    ordered = tuple(sorted(tset))
    rho = np.array([t.rho for t in ordered], dtype=np.int64)
    alpha = np.array([t.alpha for t in ordered], dtype=np.int64)
    beta = np.array([t.beta for t in ordered], dtype=np.int64)
    lookup = {t: i for i, t in enumerate(ordered)}
    reversal = np.array([lookup[t.reversed()] for t in ordered], dtype=np.int64)

    r1 = {tuple(int(x) for x in row) for row in rho}
    r1.update(tuple(int(x) for x in row) for row in mesh_edges(d))
    for a in (rho, alpha, beta, reversal):
        a.setflags(write=False)
    return InteractionRange(
        spec=spec, triplets=ordered, r1=tuple(sorted(r1)),
        added=tuple(sorted(added)), rho=rho, alpha=alpha, beta=beta,
        reversal=reversal)


# ---------------------------------------------------------------------------
# finite windows
# ---------------------------------------------------------------------------


class LatticeWindow:
    """Ball of lattice sites |F·m| <= R_win plus a one-stencil halo.

    Sites are stored in integer coordinates (exact identity); ``coords`` lists
    interior sites first, then halo sites, each block in lexicographic order.
    ``nbr[i, t]`` is the row of coords[i] + rho[t], or -1 when that point lies
    outside the stored set (its field value is then zero by clamping).
    """

    def __init__(self, spec, rng, R_win, coords, n_interior, nbr,
                 box_origin, box_lookup):
        self.spec = spec
        self.rng = rng
        self.R_win = float(R_win)
        self.coords = coords
        self.n_interior = int(n_interior)
        self.nbr = nbr
        self._box_origin = box_origin
        self._box_lookup = box_lookup

    # -- construction --------------------------------------------------

    @classmethod
    def build(cls, spec: MultilatticeSpec, rng: InteractionRange,
              R_win: float) -> "LatticeWindow":
        if R_win <= 0:
            raise LatticeError("window radius must be positive")
        d = spec.d
        Finv = np.linalg.inv(spec.F)
        lim = np.ceil(R_win * np.linalg.norm(Finv, axis=1) + 1e-9).astype(int)
        axes = [np.arange(-l, l + 1, dtype=np.int64) for l in lim]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
        rad = np.linalg.norm(mesh @ spec.F.T, axis=1)
        interior = mesh[rad <= R_win + 1e-12]
        if interior.shape[0] == 0:
            raise LatticeError("window radius too small to contain any site")

        rhos = rng.rho_set()
        reach = np.abs(rhos).max(axis=0) if rhos.size else np.zeros(d, np.int64)
        origin = interior.min(axis=0) - reach
        shape = interior.max(axis=0) + reach - origin + 1
        stride = np.concatenate([np.cumprod(shape[::-1])[::-1][1:], [1]])

        def ravel(pts):
            rel = pts - origin
            ok = np.all((rel >= 0) & (rel < shape), axis=1)
            lin = rel @ stride
            return lin, ok

        lookup = np.full(int(np.prod(shape)), -1, dtype=np.int64)
        lin_int, _ = ravel(interior)
        lookup[lin_int] = 0  # mark membership first, rows assigned below

        cand = (interior[:, None, :] + rhos[None, :, :]).reshape(-1, d)
        lin_c, ok_c = ravel(cand)
        lin_c = np.unique(lin_c[ok_c])
        halo_lin = lin_c[lookup[lin_c] == -1]
        halo = np.stack(np.unravel_index(halo_lin, shape), axis=-1) + origin

        coords = np.vstack([interior, halo])
        lin_all, _ = ravel(coords)
        lookup[:] = -1
        lookup[lin_all] = np.arange(coords.shape[0])

        nbr_pts = (coords[:, None, :] + rng.rho[None, :, :]).reshape(-1, d)
        lin_n, ok_n = ravel(nbr_pts)
        nbr = np.full(lin_n.shape[0], -1, dtype=np.int64)
        nbr[ok_n] = lookup[lin_n[ok_n]]
        nbr = nbr.reshape(coords.shape[0], rng.T)

        coords.setflags(write=False)
        nbr.setflags(write=False)
        return cls(spec, rng, R_win, coords, interior.shape[0], nbr,
                   origin, (lookup, shape, stride))

    # -- queries ---------------------------------------------------------

    @property
    def count(self) -> int:
        return self.coords.shape[0]

    def lookup(self, pts) -> np.ndarray:
        """Rows of integer points (…, d); -1 where absent."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.int64))
        lookup, shape, stride = self._box_lookup
        rel = pts - self._box_origin
        ok = np.all((rel >= 0) & (rel < shape), axis=-1)
        out = np.full(pts.shape[0], -1, dtype=np.int64)
        lin = rel[ok] @ stride
        out[ok] = lookup[lin]
        return out

    def radii(self) -> np.ndarray:
        """Physical distances |F·m| of all stored sites."""
        return np.linalg.norm(self.coords @ self.spec.F.T, axis=1)

    def interior_mask(self) -> np.ndarray:
        m = np.zeros(self.count, dtype=bool)
        m[: self.n_interior] = True
        return m


# ---------------------------------------------------------------------------
# finite differences (reference implementations; kernels fuse these loops)
# ---------------------------------------------------------------------------


def finite_difference(u, t: BondTriplet, xi) -> np.ndarray:
    """u_beta(xi + F·rho) - u_alpha(xi) for one triplet at one site."""
    w = u.window
    i = int(w.lookup(np.asarray(xi, dtype=np.int64)[None, :])[0])
    if i < 0:
        raise LatticeError(f"site {tuple(xi)} outside window+halo")
    j = int(w.lookup((np.asarray(xi, np.int64) + np.asarray(t.rho, np.int64))[None, :])[0])
    vb = u.values[j, t.beta] if j >= 0 else np.zeros(u.values.shape[2])
    return vb - u.values[i, t.alpha]


def stencil_apply(u, rng: InteractionRange, xi) -> np.ndarray:
    """All triplet differences at one site, (T, n), canonical order."""
    return np.stack([finite_difference(u, t, xi) for t in rng.triplets])
