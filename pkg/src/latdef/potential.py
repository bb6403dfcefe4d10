"""Site potentials on bond stencils: value, derivatives to third order, defects.

A site potential V maps the tuple of finite differences g = (g_t) at one site
to an energy.  All values are in energy-difference form: V(0) = 0 at the
reference lattice.  Two families ship: full-vector harmonic springs (linear
response, zero third derivatives) and Morse pair bonds on the deformed bond
length (nonzero third derivatives).  Point defects are per-site linear
perturbations V_xi(g) = V(g) + g_xi . g inside a core radius.
"""

from __future__ import annotations

import numpy as np

from .lattice import BondTriplet, InteractionRange, make_triplet

__all__ = [
    "PotentialError",
    "SitePotential",
    "HarmonicPotential",
    "MorsePotential",
    "DefectModel",
    "make_harmonic",
    "make_morse_pair",
    "defect_site_potential",
]


class PotentialError(ValueError):
    """Invalid potential parameters."""


def _embed(vecs: np.ndarray, n: int) -> np.ndarray:
    """Pad (…, d) physical vectors with trailing zeros up to (…, n)."""
    vecs = np.asarray(vecs, dtype=float)
    if vecs.shape[-1] == n:
        return vecs.copy()
    out = np.zeros(vecs.shape[:-1] + (n,))
    out[..., : vecs.shape[-1]] = vecs
    return out


class SitePotential:
    """Common interface: stencil-tuple energy and derivatives.

    g arguments are (T, n) arrays in canonical triplet order; ``ref_bonds``
    holds the embedded reference bond vectors F rho + p_beta - p_alpha, so the
    absolute bond of triplet t under displacement difference g_t is
    ref_bonds[t] + g_t.
    """

    kind = "base"
    homogeneous = True

    def __init__(self, rng: InteractionRange):
        self.rng = rng
        spec = rng.spec
        self.n = spec.n
        self.ref_bonds = _embed(rng.bond_vectors(), spec.n)
        self.ref_bonds.setflags(write=False)

    # -- required per family --------------------------------------------

    def value_batch(self, g) -> np.ndarray:
        """Energy per stencil batch: (..., T, n) -> (...,)."""
        raise NotImplementedError

    def value(self, g) -> float:
        return float(np.sum(self.value_batch(g)))

    def grad(self, g) -> np.ndarray:
        raise NotImplementedError

    def hess_diag(self, g) -> np.ndarray:
        """Per-triplet (T, n, n) blocks; pair potentials have no cross terms."""
        raise NotImplementedError

    def third_contract(self, g, w) -> np.ndarray:
        """(d^3 V(g))[w, w] as a (T, n) tuple."""
        raise NotImplementedError

    def kernel_params(self):
        """(kind, p1, p2, p3, rref, rnorm) arrays consumed by the kernels."""
        raise NotImplementedError

    # -- shared ----------------------------------------------------------

    def hess(self, g) -> np.ndarray:
        """Dense (T, n, T, n) second derivative at g."""
        T, n = self.rng.T, self.n
        out = np.zeros((T, n, T, n))
        blocks = self.hess_diag(g)
        for t in range(T):
            out[t, :, t, :] = blocks[t]
        return out

    def force_sums(self) -> np.ndarray:
        """Net reference force per species, (S, n); zero at an equilibrium."""
        g0 = self.grad(np.zeros((self.rng.T, self.n)))
        out = np.zeros((self.rng.spec.S, self.n))
        np.add.at(out, self.rng.beta, g0)
        np.add.at(out, self.rng.alpha, -g0)
        return out

    def _check_equilibrium(self, tol=1e-10):
        res = np.abs(self.force_sums()).max()
        if res > tol:
            raise PotentialError(
                f"reference state is not an equilibrium (net force {res:.2e}); "
                "adjust the parameters so per-shell forces balance")


class HarmonicPotential(SitePotential):
    """V(g) = 1/2 sum_t k_t |g_t|^2 with full-vector springs."""

    kind = "harmonic"

    def __init__(self, rng, k: np.ndarray):
        super().__init__(rng)
        self.k = np.asarray(k, dtype=float)
        self.k.setflags(write=False)

    def value_batch(self, g):
        g = np.asarray(g, dtype=float)
        return 0.5 * np.sum(self.k[:, None] * g * g, axis=(-2, -1))

    def grad(self, g):
        return self.k[:, None] * np.asarray(g, dtype=float)

    def hess_diag(self, g):
        return self.k[:, None, None] * np.eye(self.n)[None, :, :]

    def third_contract(self, g, w):
        return np.zeros((self.rng.T, self.n))

    def kernel_params(self):
        T = self.rng.T
        z = np.zeros(T)
        return (0, self.k, z, z, self.ref_bonds,
                np.linalg.norm(self.ref_bonds, axis=1))


def _morse_derivs(D, a, r0, r):
    """phi, phi', phi'', phi''' of D(1 - e^{-a(r - r0)})^2, elementwise."""
    q = np.exp(-a * (r - r0))
    phi = D * (1.0 - q) ** 2
    d1 = 2.0 * D * a * (q - q * q)
    d2 = 2.0 * D * a * a * (2.0 * q * q - q)
    d3 = 2.0 * D * a ** 3 * (q - 4.0 * q * q)
    return phi, d1, d2, d3


class MorsePotential(SitePotential):
    """V(g) = sum_t [phi_t(|b_t + g_t|) - phi_t(|b_t|)], Morse phi per bond."""

    kind = "morse"

    def __init__(self, rng, D, a, r0):
        super().__init__(rng)
        self.D = np.asarray(D, dtype=float)
        self.a = np.asarray(a, dtype=float)
        self.r0 = np.asarray(r0, dtype=float)
        self.rnorm = np.linalg.norm(self.ref_bonds, axis=1)
        if np.any(self.rnorm < 1e-12):
            raise PotentialError("zero-length reference bond in the range")
        for arr in (self.D, self.a, self.r0, self.rnorm):
            arr.setflags(write=False)
        self._check_equilibrium()

    def _bonds(self, g):
        b = self.ref_bonds + np.asarray(g, dtype=float)
        r = np.linalg.norm(b, axis=-1)
        return b, r

    def value_batch(self, g):
        _, r = self._bonds(g)
        phi = _morse_derivs(self.D, self.a, self.r0, r)[0]
        phi0 = _morse_derivs(self.D, self.a, self.r0, self.rnorm)[0]
        return np.sum(phi - phi0, axis=-1)

    def grad(self, g):
        b, r = self._bonds(g)
        d1 = _morse_derivs(self.D, self.a, self.r0, r)[1]
        return (d1 / r)[:, None] * b

    def hess_diag(self, g):
        b, r = self._bonds(g)
        _, d1, d2, _ = _morse_derivs(self.D, self.a, self.r0, r)
        x = b / r[:, None]
        eye = np.eye(self.n)
        xx = x[:, :, None] * x[:, None, :]
        return d2[:, None, None] * xx + (d1 / r)[:, None, None] * (eye - xx)

    def third_contract(self, g, w):
        b, r = self._bonds(g)
        _, d1, d2, d3 = _morse_derivs(self.D, self.a, self.r0, r)
        x = b / r[:, None]
        w = np.asarray(w, dtype=float)
        xw = np.sum(x * w, axis=1)
        ww = np.sum(w * w, axis=1)
        c1 = d3 - 3.0 * d2 / r + 3.0 * d1 / (r * r)
        c2 = d2 / r - d1 / (r * r)
        return (c1 * xw * xw)[:, None] * x + c2[:, None] * (
            ww[:, None] * x + 2.0 * xw[:, None] * w)

    def kernel_params(self):
        return (1, self.D, self.a, self.r0, self.ref_bonds, self.rnorm)


# ---------------------------------------------------------------------------
# constructors
# ---------------------------------------------------------------------------


def _per_triplet(rng, value, name) -> np.ndarray:
    """Broadcast scalar | pair-keyed dict | length-T sequence to (T,)."""
    T = rng.T
    if np.isscalar(value):
        return np.full(T, float(value))
    if isinstance(value, dict):
        out = np.empty(T)
        for t in range(T):
            key = (min(rng.alpha[t], rng.beta[t]), max(rng.alpha[t], rng.beta[t]))
            skey = f"{key[0]}-{key[1]}"
            if key in value:
                out[t] = value[key]
            elif skey in value:
                out[t] = value[skey]
            elif "default" in value:
                out[t] = value["default"]
            else:
                raise PotentialError(f"no {name} for species pair {skey}")
        return out
    out = np.asarray(value, dtype=float)
    if out.shape != (T,):
        raise PotentialError(f"{name} must be scalar, pair dict, or length {T}")
    return out.copy()


def make_harmonic(rng: InteractionRange, stiffness, *,
                  allow_indefinite: bool = False) -> HarmonicPotential:
    """Full-vector springs 1/2 sum k_t |g_t|^2.

    Negative stiffness is rejected unless allow_indefinite=True (used to build
    deliberately unstable crystals for certificate testing).
    """
    k = _per_triplet(rng, stiffness, "stiffness")
    if np.any(k < 0) and not allow_indefinite:
        raise PotentialError("negative stiffness (pass allow_indefinite=True "
                             "to build a deliberately unstable model)")
    rev = k[rng.reversal]
    if not np.allclose(k, rev, rtol=1e-12, atol=0):
        raise PotentialError("stiffness must be symmetric under triplet reversal")
    return HarmonicPotential(rng, k)


def make_morse_pair(rng: InteractionRange, pairs=None, *, D=1.0, a=3.0,
                    r0=None, r0_scale=None) -> MorsePotential:
    """Morse bonds phi(|b|) = D (1 - e^{-a(|b| - r0)})^2 per species pair.

    ``pairs`` maps "alpha-beta" (unordered) to {"D":, "a":, "r0": | "r0_scale":};
    missing entries fall back to the keyword defaults.  r0_scale sets
    r0 = r0_scale * |reference bond| (r0_scale < 1 pre-tensions the bonds,
    which is what gives 2d crystals their out-of-plane stiffness).  With both
    r0 and r0_scale unset each bond sits exactly at its Morse minimum.
    """
    T = rng.T
    ref_len = np.linalg.norm(_embed(rng.bond_vectors(), rng.spec.n), axis=1)
    Dv = np.full(T, float(D))
    av = np.full(T, float(a))
    if r0 is not None and r0_scale is not None:
        raise PotentialError("give r0 or r0_scale, not both")
    if r0 is not None:
        r0v = np.full(T, float(r0))
    elif r0_scale is not None:
        r0v = float(r0_scale) * ref_len
    else:
        r0v = ref_len.copy()

    if pairs:
        for key, par in pairs.items():
            if isinstance(key, str):
                i, j = (int(x) for x in key.split("-"))
            else:
                i, j = key
            lo, hi = min(i, j), max(i, j)
            sel = (np.minimum(rng.alpha, rng.beta) == lo) & \
                  (np.maximum(rng.alpha, rng.beta) == hi)
            if not np.any(sel):
                raise PotentialError(f"no triplets for species pair {lo}-{hi}")
            if "D" in par:
                Dv[sel] = float(par["D"])
            if "a" in par:
                av[sel] = float(par["a"])
            if "r0" in par and "r0_scale" in par:
                raise PotentialError(f"pair {lo}-{hi}: give r0 or r0_scale, not both")
            if "r0" in par:
                r0v[sel] = float(par["r0"])
            elif "r0_scale" in par:
                r0v[sel] = float(par["r0_scale"]) * ref_len[sel]
    if np.any(Dv <= 0) or np.any(av <= 0):
        raise PotentialError("Morse depth and width must be positive")
    return MorsePotential(rng, Dv, av, r0v)


# ---------------------------------------------------------------------------
# defects
# ---------------------------------------------------------------------------


class DefectModel:
    """Force dipoles g_xi on finitely many sites inside |xi| <= R_def."""

    def __init__(self, rng: InteractionRange, R_def: float, dipoles: dict):
        self.rng = rng
        self.R_def = float(R_def)
        if self.R_def < 0:
            raise PotentialError("core radius must be nonnegative")
        spec = rng.spec
        self._map = {}
        for site, g in dipoles.items():
            site = tuple(int(x) for x in site)
            g = np.asarray(g, dtype=float)
            if g.shape != (rng.T, spec.n):
                raise PotentialError(f"dipole at {site} must have shape (T, n)")
            r = np.linalg.norm(spec.F @ np.asarray(site, dtype=float))
            if r > self.R_def + 1e-12:
                raise PotentialError(
                    f"dipole site {site} lies outside the core radius {R_def}")
            if np.any(g != 0.0):
                g = g.copy()
                g.setflags(write=False)
                self._map[site] = g

    @classmethod
    def from_entries(cls, rng, R_def, entries):
        """entries: iterable of (site, triplet | triplet-index, n-vector)."""
        dip = {}
        for site, trip, g in entries:
            site = tuple(int(x) for x in site)
            if isinstance(trip, BondTriplet):
                t = rng.index_of(trip)
            elif isinstance(trip, (list, tuple, np.ndarray)):
                seq = list(trip)
                t = rng.index_of(make_triplet(seq[:-2], seq[-2], seq[-1]))
            else:
                t = int(trip)
            arr = dip.setdefault(site, np.zeros((rng.T, rng.spec.n)))
            arr[t] += np.asarray(g, dtype=float)
        return cls(rng, R_def, dip)

    @property
    def sites(self):
        return sorted(self._map.keys())

    def g_at(self, xi):
        return self._map.get(tuple(int(x) for x in xi))

    def pack(self, window):
        """(rows, g) arrays for kernel use; every dipole site must be stored."""
        sites = self.sites
        if not sites:
            T, n = self.rng.T, self.rng.spec.n
            return np.zeros(0, np.int64), np.zeros((0, T, n))
        rows = window.lookup(np.asarray(sites, dtype=np.int64))
        if np.any(rows < 0):
            raise PotentialError("defect core lies outside the window")
        g = np.stack([self._map[s] for s in sites])
        return rows, g

    def is_empty(self):
        return not self._map


class _DefectSiteView(SitePotential):
    """V at one site with its dipole term: value/grad shift, hess/third as base."""

    def __init__(self, base: SitePotential, g_xi):
        self.base = base
        self.rng = base.rng
        self.n = base.n
        self.ref_bonds = base.ref_bonds
        self.kind = base.kind
        self.homogeneous = False
        self.g_xi = np.zeros((base.rng.T, base.n)) if g_xi is None else g_xi

    def value_batch(self, g):
        g = np.asarray(g, dtype=float)
        return self.base.value_batch(g) + np.sum(self.g_xi * g, axis=(-2, -1))

    def grad(self, g):
        return self.base.grad(g) + self.g_xi

    def hess_diag(self, g):
        return self.base.hess_diag(g)

    def third_contract(self, g, w):
        return self.base.third_contract(g, w)

    def kernel_params(self):
        return self.base.kernel_params()


def defect_site_potential(base: SitePotential, defect: DefectModel, xi):
    """Per-site potential view V_xi = V + g_xi . (.)"""
    return _DefectSiteView(base, defect.g_at(xi) if defect is not None else None)
