"""Renormalized lattice energy, its variations, and the three strain norms.

A DisplacementField stores one vector per (site, species) over a window;
halo rows are clamped to zero, so the field extends by zero to the infinite
lattice.  For fields supported away from the window boundary every quantity
below equals its infinite-lattice value exactly.
"""

from __future__ import annotations

import csv
import struct

import numpy as np

from . import _kernels
from .lattice import (InteractionRange, LatticeError, LatticeWindow,
                      MultilatticeSpec, unit_cell_simplices)
from .potential import DefectModel, SitePotential

MAGIC = b"MLDF"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIIIdQ")


class DisplacementField:
    """Values (count, S, n) over a window; rows past n_interior are halo."""

    __slots__ = ("window", "values")

    def __init__(self, window: LatticeWindow, values: np.ndarray | None = None):
        S, n = window.spec.S, window.spec.n
        if values is None:
            values = np.zeros((window.count, S, n))
        else:
            values = np.ascontiguousarray(values, dtype=float)
            if values.shape != (window.count, S, n):
                raise ValueError(
                    f"values shape {values.shape} does not match window "
                    f"({window.count}, {S}, {n})")
        self.window = window
        self.values = values

    @classmethod
    def zeros(cls, window: LatticeWindow) -> "DisplacementField":
        return cls(window)

    def copy(self) -> "DisplacementField":
        return DisplacementField(self.window, self.values.copy())

    def clamp(self) -> "DisplacementField":
        """Zero the halo rows in place (the admissible-field constraint)."""
        self.values[self.window.n_interior:] = 0.0
        return self

    @property
    def interior(self) -> np.ndarray:
        """Writable view of the interior (degree-of-freedom) rows."""
        return self.values[: self.window.n_interior]

    def dof_vector(self) -> np.ndarray:
        return self.interior.reshape(-1).copy()

    def set_dof_vector(self, x: np.ndarray) -> "DisplacementField":
        self.interior[...] = np.asarray(x, float).reshape(self.interior.shape)
        return self


def random_compact_field(window: LatticeWindow, radius: float,
                         nprng: np.random.Generator,
                         scale: float = 1.0) -> DisplacementField:
    """Gaussian values on interior sites with |F m| <= radius, zero elsewhere."""
    u = DisplacementField.zeros(window)
    r = window.radii()
    mask = (r <= radius) & window.interior_mask()
    if not mask.any():
        raise LatticeError("no interior sites within the requested support radius")
    S, n = window.spec.S, window.spec.n
    u.values[mask] = scale * nprng.standard_normal((int(mask.sum()), S, n))
    return u


# ---------------------------------------------------------------------------
# energy / gradient / hessian action
# ---------------------------------------------------------------------------


def _stencil_args(pot: SitePotential):
    kind, p1, p2, p3, rref, rnorm = pot.kernel_params()
    g0 = pot.grad(np.zeros_like(rref))
    return kind, p1, p2, p3, rref, rnorm, g0


def _du_at_rows(values: np.ndarray, window: LatticeWindow,
                rng: InteractionRange, rows: np.ndarray) -> np.ndarray:
    nbr = window.nbr[rows]
    du = values[nbr.clip(min=0), rng.beta[None, :], :] \
        - values[rows][:, rng.alpha, :]
    du[nbr < 0] = 0.0
    return du


def energy_renormalized(u: DisplacementField, pot: SitePotential,
                        defect: DefectModel | None = None) -> float:
    """Sum over sites of V_xi(Du) minus its linearization at the reference.

    Equals 0 at u = 0; for compactly supported u it is the exact energy
    difference from the reference state.
    """
    w = u.window
    rng = pot.rng
    impl = _kernels.get_impl()
    e = impl["energy"](u.values, w.nbr, rng.alpha, rng.beta,
                       *_stencil_args(pot))
    if defect is not None and not defect.is_empty():
        rows, g = defect.pack(w)
        du = _du_at_rows(u.values, w, rng, rows)
        e += float(np.sum(g * du))
    return float(e)


def gradient(u: DisplacementField, pot: SitePotential,
             defect: DefectModel | None = None) -> DisplacementField:
    """First variation as a field-shaped covector; halo rows are zero."""
    w = u.window
    rng = pot.rng
    impl = _kernels.get_impl()
    out = impl["grad"](u.values, w.nbr, rng.alpha, rng.beta,
                       *_stencil_args(pot))
    if defect is not None and not defect.is_empty():
        rows, g = defect.pack(w)
        nbr = w.nbr[rows]
        for t in range(rng.T):
            out[rows, rng.alpha[t]] -= g[:, t]
            j = nbr[:, t]
            m = j >= 0
            out[j[m], rng.beta[t]] += g[m, t]
    out[w.n_interior:] = 0.0
    return DisplacementField(w, out)


def hessian_apply(u: DisplacementField | None, v: DisplacementField,
                  pot: SitePotential) -> DisplacementField:
    """Action of the second variation at state u on direction v.

    u = None means the reference state.  Defect terms are linear in u and so
    never appear here.  Halo rows of the result are zero.
    """
    w = v.window
    rng = pot.rng
    impl = _kernels.get_impl()
    uvals = np.zeros_like(v.values) if u is None else u.values
    kind, p1, p2, p3, rref, rnorm, _ = _stencil_args(pot)
    out = impl["hess_apply"](uvals, v.values, w.nbr, rng.alpha, rng.beta,
                             kind, p1, p2, p3, rref, rnorm)
    out[w.n_interior:] = 0.0
    return DisplacementField(w, out)


def diag_blocks(u: DisplacementField | None, pot: SitePotential) -> np.ndarray:
    """Per-(site, species) n x n diagonal blocks of the hessian, (count,S,n,n)."""
    w = u.window if u is not None else None
    if w is None:
        raise ValueError("diag_blocks needs a field to define the window")
    rng = pot.rng
    impl = _kernels.get_impl()
    kind, p1, p2, p3, rref, rnorm, _ = _stencil_args(pot)
    return impl["diag_blocks"](u.values, w.nbr, rng.alpha, rng.beta,
                               kind, p1, p2, p3, rref, rnorm)


def inner(a, b) -> float:
    """Euclidean pairing of two field-shaped arrays (covector . vector)."""
    av = a.values if isinstance(a, DisplacementField) else a
    bv = b.values if isinstance(b, DisplacementField) else b
    return float(np.sum(av * bv))


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------


def norm_a1(u: DisplacementField, rng: InteractionRange | None = None) -> float:
    """Root sum of squared stencil differences over the whole range."""
    if rng is None:
        rng = u.window.rng
    impl = _kernels.get_impl()
    du = impl["du_field"](u.values, u.window.nbr, rng.alpha, rng.beta)
    return float(np.sqrt(np.sum(du * du)))


_P1_MASS_CACHE: dict[int, np.ndarray] = {}


def _p1_mass(d: int) -> np.ndarray:
    M = _P1_MASS_CACHE.get(d)
    if M is None:
        M = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
        _P1_MASS_CACHE[d] = M
    return M


def norm_a2(u: DisplacementField, spec: MultilatticeSpec | None = None) -> float:
    """Interpolant norm: |grad I u_0|_L2 plus the L2 norms of I u_alpha - I u_0.

    Piecewise-affine interpolation on the fixed simplicial mesh of the
    deformed lattice; cells with an unstored corner are skipped (their values
    vanish for admissible fields).
    """
    w = u.window
    if spec is None:
        spec = w.spec
    d, S, n = spec.d, spec.S, spec.n
    simps = unit_cell_simplices(d)
    corners = np.stack(np.meshgrid(*([np.array([0, 1])] * d), indexing="ij"),
                       axis=-1).reshape(-1, d).astype(np.int64)
    ncor = corners.shape[0]
    # cells that can touch a nonzero value: origins = stored coords - corner
    origins = np.unique(
        (w.coords[:, None, :] - corners[None, :, :]).reshape(-1, d), axis=0)
    pts = (origins[:, None, :] + corners[None, :, :]).reshape(-1, d)
    rows = w.lookup(pts).reshape(-1, ncor)
    keep = np.all(rows >= 0, axis=1)
    rows = rows[keep]
    cvals = u.values[rows]                       # (M, ncor, S, n)

    # corner index of each simplex vertex inside the corner list
    weights = (2 ** np.arange(d - 1, -1, -1)).astype(np.int64)
    grad_sq = 0.0
    mass_sq = np.zeros(S)
    vol = 1.0 / np.prod(np.arange(1, d + 1))
    M = _p1_mass(d)
    for simp in simps:
        idx = simp @ weights
        sv = cvals[:, idx]                       # (M, d+1, S, n)
        edges = (simp[1:] - simp[0]).astype(float) @ spec.F.T   # (d, d)
        dv = sv[:, 1:] - sv[:, :1]               # (M, d, S, n)
        g0 = np.linalg.solve(edges, dv[:, :, 0, :].reshape(-1, d, n))
        grad_sq += vol * float(np.sum(g0 * g0))
        diff = sv - sv[:, :, :1]                 # u_alpha - u_0 at vertices
        mass_sq += vol * np.einsum("misc,ij,mjsc->s", diff, M, diff)
    return float(np.sqrt(grad_sq) + np.sum(np.sqrt(mass_sq[1:])))


def norm_a3(u: DisplacementField, spec: MultilatticeSpec | None = None,
            kgrid=None) -> float:
    """Spectral norm: L2 of 2 pi |k| Z-hat plus L2 of the shift transforms.

    Z = u_0 and q_alpha = u_alpha - u_0 are embedded in a periodic box of
    kgrid.N points per axis (wrap-around must not fold the window onto
    itself) and transformed with the discrete transform of module spectral.
    The halo-mean of u_0 is subtracted before embedding: it vanishes for
    admissible (halo-clamped) fields and makes the norm exactly zero on
    uniform translations, matching the other two norms.
    """
    w = u.window
    if spec is None:
        spec = w.spec
    if kgrid is None:
        from .spectral import BrillouinGrid
        ext = int(np.abs(w.coords).max()) if w.count else 0
        N = 1
        while N < 2 * ext + 2:
            N *= 2
        kgrid = BrillouinGrid(spec, N)
    d, S, n = spec.d, spec.S, spec.n
    N = kgrid.N
    span = w.coords.max(axis=0) - w.coords.min(axis=0)
    if np.any(span >= N):
        raise LatticeError(
            f"periodic box N={N} folds the window (span {span.tolist()})")
    idx = tuple((w.coords % N).T)
    knorm_sq = np.sum(kgrid.kphys ** 2, axis=-1)
    total = 0.0
    gauge = u.values[w.n_interior:, 0, :]
    c0 = gauge.mean(axis=0) if gauge.shape[0] else np.zeros(n)
    box = np.zeros((N,) * d + (n,))
    box[idx] = u.values[:, 0, :] - c0
    zh = np.fft.fftn(box, axes=tuple(range(d)))
    total += float(np.sum((2.0 * np.pi) ** 2 * knorm_sq[..., None]
                          * (zh.real ** 2 + zh.imag ** 2)))
    for a in range(1, S):
        box[...] = 0.0
        box[idx] = u.values[:, a, :] - u.values[:, 0, :]
        qh = np.fft.fftn(box, axes=tuple(range(d)))
        total += float(np.sum(qh.real ** 2 + qh.imag ** 2))
    return float(np.sqrt(total / N ** d))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def save_field(path, u: DisplacementField) -> None:
    """Binary container: header (d, n, S, R_win, count), then F, coords, values."""
    w = u.window
    spec = w.spec
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, spec.d, spec.n, spec.S,
                              w.R_win, w.count))
        fh.write(np.ascontiguousarray(spec.F, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(w.coords, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(u.values, dtype="<f8").tobytes())


class FieldData:
    """Field file contents, self-sufficient for decay measurements."""

    def __init__(self, d, n, S, R_win, F, coords, values):
        self.d, self.n, self.S = d, n, S
        self.R_win = R_win
        self.F = F
        self.coords = coords
        self.values = values

    def radii(self) -> np.ndarray:
        return np.linalg.norm(self.coords @ self.F.T, axis=1)


def load_field(path) -> FieldData:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        magic, ver, d, n, S, R_win, count = _HEADER.unpack(head)
        if magic != MAGIC:
            raise ValueError(f"not a field container: bad magic {magic!r}")
        if ver != FORMAT_VERSION:
            raise ValueError(f"unsupported field container version {ver}")
        F = np.frombuffer(fh.read(8 * d * d), dtype="<f8").reshape(d, d).copy()
        coords = np.frombuffer(fh.read(8 * count * d),
                               dtype="<i8").reshape(count, d).copy()
        values = np.frombuffer(fh.read(8 * count * S * n),
                               dtype="<f8").reshape(count, S, n).copy()
    return FieldData(d, n, S, R_win, F, coords, values)


def field_from_data(data: FieldData, window: LatticeWindow) -> DisplacementField:
    """Re-attach loaded values to a freshly built window (coords must agree)."""
    if data.coords.shape != window.coords.shape or \
            not np.array_equal(data.coords, window.coords):
        raise LatticeError("stored site list does not match the window")
    return DisplacementField(window, data.values)


def save_field_csv(path, u: DisplacementField) -> None:
    w = u.window
    d, S, n = w.spec.d, w.spec.S, w.spec.n
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"m{i}" for i in range(d)] + ["species"]
                    + [f"v{c}" for c in range(n)])
        for i in range(w.count):
            for a in range(S):
                wr.writerow([*map(int, w.coords[i]), a,
                             *(repr(float(x)) for x in u.values[i, a])])
