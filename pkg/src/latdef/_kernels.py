"""Site-loop kernels: numba-accelerated with a pure-numpy fallback.

The active backend is chosen at import from the environment variable
``LATDEF_KERNELS`` ("numba" | "numpy"); default is numba when importable.
Both implementations stay importable so tests and the benchmark can compare
them in one process.

Field layout: ``vals`` is (count, S, n); ``nbr[i, t]`` is the row index of
site i shifted by triplet t's rho, or -1 when that point is not stored.  A
stencil with an unstored endpoint contributes nothing (du treated as zero);
for admissible fields (halo clamped to zero) this agrees exactly with
zero-extension, and it keeps every assembled quantity invariant under adding
one constant vector per species.  Potential parameters arrive as flat arrays from
SitePotential.kernel_params(): kind 0 = harmonic (p1 = stiffness), kind 1 =
Morse (p1 = depth, p2 = width, p3 = r0) on bonds rref + du; ``g0`` is the
stencil gradient at zero used by the renormalized forms.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba as nb
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an install requirement
    HAVE_NUMBA = False

nopython = True
cache = True

# ---------------------------------------------------------------------------
# numpy backend
# ---------------------------------------------------------------------------


def np_du_field(vals, nbr, alpha, beta):
    """All stencil differences, (count, T, n); absent stencils give zero."""
    du = vals[nbr.clip(min=0), beta[None, :], :] - vals[:, alpha, :]
    du[nbr < 0] = 0.0
    return du


def _np_morse_geom(du, p1, p2, p3, rref):
    b = rref[None, :, :] + du
    r = np.sqrt(np.sum(b * b, axis=2))
    q = np.exp(-p2[None, :] * (r - p3[None, :]))
    return b, r, q


def np_energy(vals, nbr, alpha, beta, kind, p1, p2, p3, rref, rnorm, g0):
    du = np_du_field(vals, nbr, alpha, beta)
    if kind == 0:
        e = 0.5 * np.sum(p1[None, :, None] * du * du)
    else:
        _, _, q = _np_morse_geom(du, p1, p2, p3, rref)
        q0 = np.exp(-p2 * (rnorm - p3))
        terms = p1[None, :] * ((1.0 - q) ** 2 - (1.0 - q0[None, :]) ** 2)
        terms[nbr < 0] = 0.0
        e = np.sum(terms)
    return float(e - np.sum(g0[None, :, :] * du))


def np_grad(vals, nbr, alpha, beta, kind, p1, p2, p3, rref, rnorm, g0):
    du = np_du_field(vals, nbr, alpha, beta)
    if kind == 0:
        F = p1[None, :, None] * du
    else:
        b, r, q = _np_morse_geom(du, p1, p2, p3, rref)
        d1 = 2.0 * p1[None, :] * p2[None, :] * (q - q * q)
        F = (d1 / r)[:, :, None] * b - g0[None, :, :]
        F[nbr < 0] = 0.0
    return _np_scatter(F, vals.shape, nbr, alpha, beta)


def np_hess_apply(vals_u, vals_v, nbr, alpha, beta, kind, p1, p2, p3,
                  rref, rnorm):
    dv = np_du_field(vals_v, nbr, alpha, beta)
    if kind == 0:
        Hd = p1[None, :, None] * dv
    else:
        du = np_du_field(vals_u, nbr, alpha, beta)
        b, r, q = _np_morse_geom(du, p1, p2, p3, rref)
        d1 = 2.0 * p1[None, :] * p2[None, :] * (q - q * q)
        d2 = 2.0 * p1[None, :] * p2[None, :] ** 2 * (2.0 * q * q - q)
        x = b / r[:, :, None]
        xdv = np.sum(x * dv, axis=2)
        Hd = d2[:, :, None] * xdv[:, :, None] * x \
            + (d1 / r)[:, :, None] * (dv - xdv[:, :, None] * x)
    return _np_scatter(Hd, vals_v.shape, nbr, alpha, beta)


def np_third_field(du_s, du_w, kind, p1, p2, p3, rref, rnorm):
    if kind == 0:
        return np.zeros_like(du_w)
    b, r, q = _np_morse_geom(du_s, p1, p2, p3, rref)
    d1 = 2.0 * p1[None, :] * p2[None, :] * (q - q * q)
    d2 = 2.0 * p1[None, :] * p2[None, :] ** 2 * (2.0 * q * q - q)
    d3 = 2.0 * p1[None, :] * p2[None, :] ** 3 * (q - 4.0 * q * q)
    x = b / r[:, :, None]
    xw = np.sum(x * du_w, axis=2)
    ww = np.sum(du_w * du_w, axis=2)
    c1 = d3 - 3.0 * d2 / r + 3.0 * d1 / (r * r)
    c2 = d2 / r - d1 / (r * r)
    return (c1 * xw * xw)[:, :, None] * x + c2[:, :, None] * (
        ww[:, :, None] * x + 2.0 * xw[:, :, None] * du_w)


def np_diag_blocks(vals_u, nbr, alpha, beta, kind, p1, p2, p3, rref, rnorm):
    count, S, n = vals_u.shape
    T = nbr.shape[1]
    if kind == 0:
        C = np.broadcast_to(
            p1[None, :, None, None] * np.eye(n)[None, None, :, :],
            (count, T, n, n))
    else:
        du = np_du_field(vals_u, nbr, alpha, beta)
        b, r, q = _np_morse_geom(du, p1, p2, p3, rref)
        d1 = 2.0 * p1[None, :] * p2[None, :] * (q - q * q)
        d2 = 2.0 * p1[None, :] * p2[None, :] ** 2 * (2.0 * q * q - q)
        x = b / r[:, :, None]
        xx = x[:, :, :, None] * x[:, :, None, :]
        C = d2[:, :, None, None] * xx \
            + (d1 / r)[:, :, None, None] * (np.eye(n)[None, None] - xx)
    out = np.zeros((count, S, n, n))
    for t in range(T):
        j = nbr[:, t]
        m = j >= 0
        out[m, alpha[t]] += C[m, t]
        out[j[m], beta[t]] += C[m, t]
    return out


def _np_scatter(F, shape, nbr, alpha, beta):
    out = np.zeros(shape)
    for t in range(nbr.shape[1]):
        j = nbr[:, t]
        m = j >= 0
        out[m, alpha[t], :] -= F[m, t, :]
        out[j[m], beta[t], :] += F[m, t, :]
    return out


# ---------------------------------------------------------------------------
# numba backend: same math, fused per-site loops
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @nb.jit(nopython=nopython, cache=cache)
    def nb_du_field(vals, nbr, alpha, beta):
        count, _, n = vals.shape
        T = nbr.shape[1]
        out = np.zeros((count, T, n))
        for i in range(count):
            for t in range(T):
                j = nbr[i, t]
                if j < 0:
                    continue
                a = alpha[t]
                bt = beta[t]
                for c in range(n):
                    out[i, t, c] = vals[j, bt, c] - vals[i, a, c]
        return out

    @nb.jit(nopython=nopython, cache=cache)
    def nb_energy(vals, nbr, alpha, beta, kind, p1, p2, p3, rref, rnorm, g0):
        count, _, n = vals.shape
        T = nbr.shape[1]
        du = np.zeros(n)
        total = 0.0
        for i in range(count):
            for t in range(T):
                j = nbr[i, t]
                if j < 0:
                    continue
                a = alpha[t]
                bt = beta[t]
                nz = False
                for c in range(n):
                    du[c] = vals[j, bt, c] - vals[i, a, c]
                    if du[c] != 0.0:
                        nz = True
                if not nz:
                    continue
                if kind == 0:
                    s = 0.0
                    for c in range(n):
                        s += du[c] * du[c]
                    total += 0.5 * p1[t] * s
                else:
                    rr = 0.0
                    for c in range(n):
                        bc = rref[t, c] + du[c]
                        rr += bc * bc
                    r = np.sqrt(rr)
                    q = np.exp(-p2[t] * (r - p3[t]))
                    q0 = np.exp(-p2[t] * (rnorm[t] - p3[t]))
                    total += p1[t] * ((1.0 - q) ** 2 - (1.0 - q0) ** 2)
                for c in range(n):
                    total -= g0[t, c] * du[c]
        return total

    @nb.jit(nopython=nopython, cache=cache)
    def nb_grad(vals, nbr, alpha, beta, kind, p1, p2, p3, rref, rnorm, g0):
        count, S, n = vals.shape
        T = nbr.shape[1]
        out = np.zeros((count, S, n))
        du = np.zeros(n)
        F = np.zeros(n)
        for i in range(count):
            for t in range(T):
                j = nbr[i, t]
                if j < 0:
                    continue
                a = alpha[t]
                bt = beta[t]
                for c in range(n):
                    du[c] = vals[j, bt, c] - vals[i, a, c]
                if kind == 0:
                    for c in range(n):
                        F[c] = p1[t] * du[c] - g0[t, c]
                else:
                    rr = 0.0
                    for c in range(n):
                        rr += (rref[t, c] + du[c]) ** 2
                    r = np.sqrt(rr)
                    q = np.exp(-p2[t] * (r - p3[t]))
                    gm = 2.0 * p1[t] * p2[t] * (q - q * q) / r
                    for c in range(n):
                        F[c] = gm * (rref[t, c] + du[c]) - g0[t, c]
                for c in range(n):
                    out[i, a, c] -= F[c]
                for c in range(n):
                    out[j, bt, c] += F[c]
        return out

    @nb.jit(nopython=nopython, cache=cache)
    def nb_hess_apply(vals_u, vals_v, nbr, alpha, beta, kind, p1, p2, p3,
                      rref, rnorm):
        count, S, n = vals_v.shape
        T = nbr.shape[1]
        out = np.zeros((count, S, n))
        dv = np.zeros(n)
        Hd = np.zeros(n)
        for i in range(count):
            for t in range(T):
                j = nbr[i, t]
                if j < 0:
                    continue
                a = alpha[t]
                bt = beta[t]
                nz = False
                for c in range(n):
                    dv[c] = vals_v[j, bt, c] - vals_v[i, a, c]
                    if dv[c] != 0.0:
                        nz = True
                if not nz:
                    continue
                if kind == 0:
                    for c in range(n):
                        Hd[c] = p1[t] * dv[c]
                else:
                    rr = 0.0
                    xdv = 0.0
                    for c in range(n):
                        bc = rref[t, c] + vals_u[j, bt, c] - vals_u[i, a, c]
                        Hd[c] = bc  # reuse as bond scratch
                        rr += bc * bc
                    r = np.sqrt(rr)
                    q = np.exp(-p2[t] * (r - p3[t]))
                    d1 = 2.0 * p1[t] * p2[t] * (q - q * q)
                    d2 = 2.0 * p1[t] * p2[t] * p2[t] * (2.0 * q * q - q)
                    for c in range(n):
                        Hd[c] /= r
                        xdv += Hd[c] * dv[c]
                    for c in range(n):
                        Hd[c] = d2 * xdv * Hd[c] + (d1 / r) * (dv[c] - xdv * Hd[c])
                for c in range(n):
                    out[i, a, c] -= Hd[c]
                for c in range(n):
                    out[j, bt, c] += Hd[c]
        return out

    @nb.jit(nopython=nopython, cache=cache)
    def nb_third_field(du_s, du_w, kind, p1, p2, p3, rref, rnorm):
        count, T, n = du_w.shape
        out = np.zeros((count, T, n))
        if kind == 0:
            return out
        for i in range(count):
            for t in range(T):
                rr = 0.0
                for c in range(n):
                    bc = rref[t, c] + du_s[i, t, c]
                    out[i, t, c] = bc
                    rr += bc * bc
                r = np.sqrt(rr)
                xw = 0.0
                ww = 0.0
                for c in range(n):
                    out[i, t, c] /= r
                    xw += out[i, t, c] * du_w[i, t, c]
                    ww += du_w[i, t, c] * du_w[i, t, c]
                q = np.exp(-p2[t] * (r - p3[t]))
                d1 = 2.0 * p1[t] * p2[t] * (q - q * q)
                d2 = 2.0 * p1[t] * p2[t] * p2[t] * (2.0 * q * q - q)
                d3 = 2.0 * p1[t] * p2[t] ** 3 * (q - 4.0 * q * q)
                c1 = d3 - 3.0 * d2 / r + 3.0 * d1 / (r * r)
                c2 = d2 / r - d1 / (r * r)
                for c in range(n):
                    x = out[i, t, c]
                    out[i, t, c] = c1 * xw * xw * x + c2 * (
                        ww * x + 2.0 * xw * du_w[i, t, c])
        return out

    @nb.jit(nopython=nopython, cache=cache)
    def nb_diag_blocks(vals_u, nbr, alpha, beta, kind, p1, p2, p3, rref, rnorm):
        count, S, n = vals_u.shape
        T = nbr.shape[1]
        out = np.zeros((count, S, n, n))
        C = np.zeros((n, n))
        x = np.zeros(n)
        for i in range(count):
            for t in range(T):
                j = nbr[i, t]
                if j < 0:
                    continue
                a = alpha[t]
                bt = beta[t]
                if kind == 0:
                    for c in range(n):
                        for e in range(n):
                            C[c, e] = p1[t] if c == e else 0.0
                else:
                    rr = 0.0
                    for c in range(n):
                        x[c] = rref[t, c] + vals_u[j, bt, c] - vals_u[i, a, c]
                        rr += x[c] * x[c]
                    r = np.sqrt(rr)
                    q = np.exp(-p2[t] * (r - p3[t]))
                    d1 = 2.0 * p1[t] * p2[t] * (q - q * q)
                    d2 = 2.0 * p1[t] * p2[t] * p2[t] * (2.0 * q * q - q)
                    for c in range(n):
                        x[c] /= r
                    for c in range(n):
                        for e in range(n):
                            xx = x[c] * x[e]
                            C[c, e] = d2 * xx + (d1 / r) * ((1.0 if c == e else 0.0) - xx)
                for c in range(n):
                    for e in range(n):
                        out[i, a, c, e] += C[c, e]
                for c in range(n):
                    for e in range(n):
                        out[j, bt, c, e] += C[c, e]
        return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------

_NAMES = ("du_field", "energy", "grad", "hess_apply", "third_field",
          "diag_blocks")

IMPLS = {
    "numpy": {
        "du_field": np_du_field,
        "energy": np_energy,
        "grad": np_grad,
        "hess_apply": np_hess_apply,
        "third_field": np_third_field,
        "diag_blocks": np_diag_blocks,
    }
}
if HAVE_NUMBA:
    IMPLS["numba"] = {
        "du_field": nb_du_field,
        "energy": nb_energy,
        "grad": nb_grad,
        "hess_apply": nb_hess_apply,
        "third_field": nb_third_field,
        "diag_blocks": nb_diag_blocks,
    }


def _pick_backend() -> str:
    want = os.environ.get("LATDEF_KERNELS", "").strip().lower()
    if want == "":
        return "numba" if HAVE_NUMBA else "numpy"
    if want not in ("numba", "numpy"):
        raise RuntimeError(f"LATDEF_KERNELS must be 'numba' or 'numpy', got {want!r}")
    if want == "numba" and not HAVE_NUMBA:
        raise RuntimeError("LATDEF_KERNELS=numba but numba is not importable")
    return want


BACKEND = _pick_backend()


def backend_name() -> str:
    return BACKEND


def get_impl(name: str | None = None) -> dict:
    """Kernel table for a backend ("numba" | "numpy"); active one by default."""
    return IMPLS[name or BACKEND]


def __getattr__(attr):
    if attr in _NAMES:
        return IMPLS[BACKEND][attr]
    raise AttributeError(attr)
