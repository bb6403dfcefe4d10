"""Discrete Fourier machinery for the periodic lattice: the dynamical matrix
H(k) in displacement/shift coordinates, its Schur-complement block inverses,
phonon branches, a grid stability certificate, and the decay-exponent table
for the lattice Green's function blocks.

Coordinates: a species field u_alpha splits as u_0 = U (displacement slot)
and p_alpha = u_alpha - u_0 (shift slots, alpha >= 1).  The quadratic form of
the second variation at the reference state diagonalizes over the Brillouin
zone into (Sn x Sn) Hermitian sandwiches in these coordinates.
"""

from __future__ import annotations

import numpy as np

from .lattice import InteractionRange, MultilatticeSpec
from .potential import SitePotential


class SpectralError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Brillouin grid and transforms
# ---------------------------------------------------------------------------


class BrillouinGrid:
    """N^d nodes k = B (j/N), integer reps j in (-N/2, N/2]^d, FFT order.

    ``kphys`` is grid-shaped (N, ..., N, d): entry at FFT index j holds the
    centered representative, so norms are measured in the fundamental
    parallelepiped around the origin.
    """

    def __init__(self, spec: MultilatticeSpec, N: int):
        if N < 2 or N % 2 != 0:
            raise SpectralError(f"grid order must be even and >= 2, got {N}")
        self.spec = spec
        self.N = int(N)
        d = spec.d
        j = np.arange(N, dtype=np.int64)
        jc = np.where(j <= N // 2, j, j - N)
        mesh = np.stack(np.meshgrid(*([jc] * d), indexing="ij"), axis=-1)
        self.jcent = mesh                          # (N,)*d + (d,)
        self.kfrac = mesh / float(N)
        self.kphys = self.kfrac @ spec.B.T

    @property
    def d(self) -> int:
        return self.spec.d

    @property
    def num_nodes(self) -> int:
        return self.N ** self.d

    def knorm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.kphys ** 2, axis=-1))

    def nonzero_mask(self) -> np.ndarray:
        m = np.ones((self.N,) * self.d, dtype=bool)
        m[(0,) * self.d] = False
        return m


def sdft(arr: np.ndarray, d: int) -> np.ndarray:
    """Transform over the first d axes: sum_xi e^{-2 pi i xi.k} u(xi)."""
    return np.fft.fftn(arr, axes=tuple(range(d)))


def isdft(arr: np.ndarray, d: int) -> np.ndarray:
    return np.fft.ifftn(arr, axes=tuple(range(d)))


def periodic_diff(arr: np.ndarray, rho, d: int) -> np.ndarray:
    """D_rho on a periodic box: value at m becomes arr(m + rho) - arr(m)."""
    shift = tuple(-int(r) for r in rho)
    return np.roll(arr, shift, axis=tuple(range(d))) - arr


# ---------------------------------------------------------------------------
# dynamical matrix
# ---------------------------------------------------------------------------


class BlockHermitian:
    """H(k) split into displacement/shift blocks; Hp0 is the adjoint view."""

    def __init__(self, k, H00, H0p, Hpp):
        self.k = np.asarray(k, dtype=float)
        self.H00 = H00
        self.H0p = H0p
        self.Hpp = Hpp

    @property
    def Hp0(self) -> np.ndarray:
        return self.H0p.conj().T

    def full(self) -> np.ndarray:
        top = np.hstack([self.H00, self.H0p])
        bot = np.hstack([self.Hp0, self.Hpp])
        return np.vstack([top, bot])

    def hermiticity_gap(self) -> float:
        F = self.full()
        return float(np.linalg.norm(F - F.conj().T))


def _slot_weights(ph: np.ndarray, rng: InteractionRange, S: int):
    """Column weights per triplet and slot; rows use the conjugate.

    ph: e^{2 pi i k.(F rho_t)}, shape (..., T).  Returns (wU, wP) with
    wU[..., t] = ph - 1 and wP[..., t, a-1] = ph * [beta_t = a] - [alpha_t = a].
    """
    wU = ph - 1.0
    if S == 1:
        wP = np.zeros(ph.shape + (0,), dtype=complex)
        return wU, wP
    beta_is = np.stack([(rng.beta == a) for a in range(1, S)], axis=-1)
    alpha_is = np.stack([(rng.alpha == a) for a in range(1, S)], axis=-1)
    wP = ph[..., None] * beta_is - alpha_is.astype(float)
    return wU, wP


def _grid_kdots(jgrid: np.ndarray, N: int, rng: InteractionRange) -> np.ndarray:
    """Exact phases k.(F rho) = (j . rho)/N on transform nodes."""
    return (jgrid @ rng.rho.T) / float(N)


def _kdots(kpts: np.ndarray, rng: InteractionRange,
           spec: MultilatticeSpec) -> np.ndarray:
    return np.atleast_2d(kpts) @ (rng.rho @ spec.F.T).T


_CHUNK = 16384


def hblocks(kdots: np.ndarray, pot: SitePotential, spec: MultilatticeSpec):
    """(H00, H0p, Hpp) arrays over a batch of k, from phase dot-products.

    kdots has shape (M, T) holding k.(F rho_t); outputs are (M, n, n),
    (M, n, (S-1)n), (M, (S-1)n, (S-1)n).
    """
    S, n = spec.S, spec.n
    C = pot.hess(np.zeros((pot.rng.T, n)))
    M = kdots.shape[0]
    H00 = np.empty((M, n, n), dtype=complex)
    H0p = np.empty((M, n, (S - 1) * n), dtype=complex)
    Hpp = np.empty((M, (S - 1) * n, (S - 1) * n), dtype=complex)
    for lo in range(0, M, _CHUNK):
        hi = min(lo + _CHUNK, M)
        ph = np.exp(2j * np.pi * kdots[lo:hi])
        wU, wP = _slot_weights(ph, pot.rng, S)
        cwU = wU.conj()
        cwP = wP.conj()
        H00[lo:hi] = np.einsum("mt,tisj,ms->mij", cwU, C, wU, optimize=True)
        if S > 1:
            H0p[lo:hi] = np.einsum("mt,tisj,msc->micj", cwU, C, wP,
                                   optimize=True).reshape(hi - lo, n, (S - 1) * n)
            Hpp[lo:hi] = np.einsum("mtr,tisj,msc->mricj", cwP, C, wP,
                                   optimize=True).reshape(
                                       hi - lo, (S - 1) * n, (S - 1) * n)
    return H00, H0p, Hpp


def assemble_H(k, pot: SitePotential,
               spec: MultilatticeSpec | None = None) -> BlockHermitian:
    """Dynamical matrix at one physical wavevector k."""
    if spec is None:
        spec = pot.rng.spec
    kdots = _kdots(np.asarray(k, dtype=float), pot.rng, spec)
    H00, H0p, Hpp = hblocks(kdots, pot, spec)
    H = BlockHermitian(k, H00[0], H0p[0], Hpp[0])
    scale = max(np.linalg.norm(H.full()), 1.0)
    if H.hermiticity_gap() > 1e-12 * scale:
        raise SpectralError("assembled dynamical matrix is not Hermitian")
    return H


def hgrid_full(kgrid: BrillouinGrid, pot: SitePotential) -> np.ndarray:
    """H(k) at every grid node, (num_nodes, Sn, Sn), FFT flat order.

    Phases use the exact integer representation (j . rho)/N.
    """
    spec = kgrid.spec
    S, n = spec.S, spec.n
    jflat = kgrid.jcent.reshape(-1, spec.d)
    kdots = _grid_kdots(jflat, kgrid.N, pot.rng)
    H00, H0p, Hpp = hblocks(kdots, pot, spec)
    M = jflat.shape[0]
    out = np.empty((M, S * n, S * n), dtype=complex)
    out[:, :n, :n] = H00
    out[:, :n, n:] = H0p
    out[:, n:, :n] = H0p.conj().transpose(0, 2, 1)
    out[:, n:, n:] = Hpp
    return out


# ---------------------------------------------------------------------------
# real-space / k-space consistency
# ---------------------------------------------------------------------------


def _shift_coords(arr: np.ndarray, d: int) -> np.ndarray:
    """Periodic species field (N,)*d + (S, n) -> stacked [U; p] (..., S*n)."""
    S = arr.shape[d]
    U = arr[..., 0, :]
    parts = [U] + [arr[..., a, :] - U for a in range(1, S)]
    return np.concatenate(parts, axis=-1)


def quadratic_form_check(u: np.ndarray, v: np.ndarray, pot: SitePotential,
                         spec: MultilatticeSpec | None = None) -> float:
    """Relative gap between the two evaluations of <d2E(0) u, v>.

    u, v are periodic species fields of shape (N,)*d + (S, n).  The real-space
    side pairs stencil differences through the second derivative at the
    reference state; the k-space side is the mean over the transform grid of
    the H(k) sandwich in displacement/shift coordinates.  The two are equal
    identities, so the gap is pure roundoff.
    """
    if spec is None:
        spec = pot.rng.spec
    d, S, n = spec.d, spec.S, spec.n
    if u.shape != v.shape or u.shape[d:] != (S, n):
        raise SpectralError(f"field shape {u.shape} does not match (N,)*{d}+({S},{n})")
    N = u.shape[0]
    rng = pot.rng
    C = pot.hess(np.zeros((rng.T, n)))

    DU = np.stack([periodic_diff(u[..., rng.beta[t], :], rng.rho[t], d)
                   + u[..., rng.beta[t], :] - u[..., rng.alpha[t], :]
                   for t in range(rng.T)])
    DV = np.stack([periodic_diff(v[..., rng.beta[t], :], rng.rho[t], d)
                   + v[..., rng.beta[t], :] - v[..., rng.alpha[t], :]
                   for t in range(rng.T)])
    DU = DU.reshape(rng.T, -1, n)
    DV = DV.reshape(rng.T, -1, n)
    lhs = float(np.einsum("tmi,tisj,smj->", DV, C, DU, optimize=True))

    grid = BrillouinGrid(spec, N)
    xu = sdft(_shift_coords(u, d), d).reshape(-1, S * n)
    xv = sdft(_shift_coords(v, d), d).reshape(-1, S * n)
    H = hgrid_full(grid, pot)
    rhs = np.einsum("mi,mij,mj->", xv.conj(), H, xu, optimize=True)
    rhs = float(rhs.real) / N ** d

    denom = max(abs(lhs), abs(rhs))
    if denom < 1e-300:
        return 0.0
    return abs(lhs - rhs) / denom


# ---------------------------------------------------------------------------
# block inverses
# ---------------------------------------------------------------------------


class SchurInverse:
    """Both Schur complements of H(k) and the four blocks of H(k)^{-1}."""

    def __init__(self, Q, P, inv00, inv0p, invp0, invpp):
        self.Q = Q
        self.P = P
        self.inv00 = inv00
        self.inv0p = inv0p
        self.invp0 = invp0
        self.invpp = invpp

    def full(self) -> np.ndarray:
        top = np.hstack([self.inv00, self.inv0p])
        bot = np.hstack([self.invp0, self.invpp])
        return np.vstack([top, bot])


def schur_inverse(H: BlockHermitian) -> SchurInverse:
    """Blocks of H^{-1} via the shift-sector Schur complement Q.

    Q = H00 - H0p Hpp^{-1} Hp0 and P = Hpp - Hp0 H00^{-1} H0p; the inverse
    uses Q (always well defined away from k = 0 for stable crystals).
    """
    n = H.H00.shape[0]
    m = H.Hpp.shape[0]
    if m == 0:
        Q = H.H00.copy()
        try:
            inv00 = np.linalg.inv(H.H00)
        except np.linalg.LinAlgError as exc:
            raise SpectralError(f"singular dynamical matrix at k={H.k}") from exc
        z = np.zeros((0, 0), dtype=complex)
        return SchurInverse(Q, z.copy(),
                            inv00, np.zeros((n, 0), complex),
                            np.zeros((0, n), complex), z.copy())
    try:
        ipp_h0pT = np.linalg.solve(H.Hpp, H.Hp0)          # Hpp^{-1} Hp0
        Q = H.H00 - H.H0p @ ipp_h0pT
        invQ = np.linalg.inv(Q)
    except np.linalg.LinAlgError as exc:
        raise SpectralError(
            f"singular dynamical matrix at k={H.k} (acoustic zero mode?)") from exc
    invpp_plain = np.linalg.inv(H.Hpp)
    inv0p = -invQ @ H.H0p @ invpp_plain
    invp0 = -ipp_h0pT @ invQ
    invpp = invpp_plain + ipp_h0pT @ invQ @ H.H0p @ invpp_plain
    P = None
    try:
        P = H.Hpp - H.Hp0 @ np.linalg.solve(H.H00, H.H0p)
    except np.linalg.LinAlgError:
        P = None                      # H00 singular: second form undefined
    out = SchurInverse(Q, P, invQ, inv0p, invp0, invpp)
    return out


# ---------------------------------------------------------------------------
# phonons and stability
# ---------------------------------------------------------------------------


class PhononSpectrum:
    """Sorted eigenvalues of H(k) over a grid; lowest n branches are acoustic."""

    def __init__(self, kgrid: BrillouinGrid, eigenvalues: np.ndarray):
        self.kgrid = kgrid
        self.eigenvalues = eigenvalues           # (num_nodes, S*n) ascending
        self.n_acoustic = kgrid.spec.n

    def acoustic(self) -> np.ndarray:
        return self.eigenvalues[:, : self.n_acoustic]

    def optical(self) -> np.ndarray:
        return self.eigenvalues[:, self.n_acoustic:]

    def table(self) -> np.ndarray:
        """Plot-ready rows [k components..., eigenvalues ascending...]."""
        kflat = self.kgrid.kphys.reshape(-1, self.kgrid.d)
        return np.hstack([kflat, self.eigenvalues])


def phonons(kgrid: BrillouinGrid, pot: SitePotential) -> PhononSpectrum:
    H = hgrid_full(kgrid, pot)
    eigs = np.linalg.eigvalsh(H)
    return PhononSpectrum(kgrid, eigs)


def stability_certificate(kgrid: BrillouinGrid, pot: SitePotential,
                          eps_acoustic: float = 1e-8,
                          eps_optical: float = 1e-8) -> dict:
    """Grid sweep of the phonon bounds: acoustic lambda/|k|^2 and optical gap.

    The zero node carries the pinned translation modes and is excluded from
    the acoustic quotient.  Fails locate the worst node and eigenvalue.
    """
    spec = kgrid.spec
    ph = phonons(kgrid, pot)
    knsq = np.sum(kgrid.kphys.reshape(-1, spec.d) ** 2, axis=1)
    mask = kgrid.nonzero_mask().reshape(-1)
    ac = ph.acoustic()[mask] / knsq[mask, None]
    gamma_low = float(ac.min())
    gamma_high = float(ac.max())
    report = {
        "gamma_acoustic_low": gamma_low,
        "gamma_acoustic_high": gamma_high,
        "grid_order": kgrid.N,
        "num_nodes": kgrid.num_nodes,
        "acoustic_branches": spec.n,
    }
    ok = gamma_low >= eps_acoustic
    if ph.optical().shape[1] == 0:
        report["gamma_optical"] = None           # S = 1: no optical branches
    else:
        gamma_o = float(ph.optical().min())
        report["gamma_optical"] = gamma_o
        ok = ok and gamma_o >= eps_optical
    report["pass"] = bool(ok)
    if not ok:
        kflat = kgrid.kphys.reshape(-1, spec.d)
        quot = np.where(mask, ph.acoustic()[:, 0] / np.where(knsq > 0, knsq, 1.0),
                        np.inf)
        ia = int(np.argmin(quot))
        report["worst_acoustic"] = {
            "k": kflat[ia].tolist(),
            "eigenvalue": float(ph.eigenvalues[ia, 0]),
            "quotient": float(quot[ia]),
        }
        if ph.optical().shape[1] > 0:
            opt = ph.optical().min(axis=1)
            io = int(np.argmin(opt))
            report["worst_optical"] = {
                "k": kflat[io].tolist(),
                "eigenvalue": float(opt[io]),
            }
    return report


# ---------------------------------------------------------------------------
# decay-exponent table
# ---------------------------------------------------------------------------

GREENS_BLOCKS = ("Q_inv", "Q_inv_H0p_Hpp_inv", "Hpp_terms")


def predict_exponent(block: str, t: int, d: int) -> int:
    """Algebraic decay power of the t-th stencil difference of a kernel block.

    Q_inv: displacement/displacement kernel, power -d - t + 2;
    Q_inv_H0p_Hpp_inv: displacement/shift coupling, power -d - t + 1;
    Hpp_terms: shift-sector kernels, power -d - t.
    """
    if t < 0:
        raise ValueError("stencil order must be nonnegative")
    if block == "Q_inv":
        return -d - t + 2
    if block == "Q_inv_H0p_Hpp_inv":
        return -d - t + 1
    if block == "Hpp_terms":
        return -d - t
    raise ValueError(f"unknown kernel block {block!r}; expected one of {GREENS_BLOCKS}")
