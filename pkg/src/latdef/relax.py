"""Finite-window equilibria of defective crystals and their residual loads.

``relax`` solves the clamped force-balance problem by Newton's method with
matrix-free conjugate-gradient inner solves: per-(site, species) diagonal
block preconditioning, Armijo backtracking, and preconditioned steepest
descent as the fallback direction.  Convergence is measured in the dual of
the stencil-difference norm (computed through the unit-spring Gram operator
on the same window), so "converged" means no admissible test function sees
a residual force above tolerance.

``residual_f`` converts a relaxed field into the per-stencil load f whose
pairing <f, Dv> reproduces the reference-Hessian action on u.  Outside the
defect core f is quadratically small in Du, which is what makes the
far-field of a defect look like a lattice Green's function.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .energy import (
    DisplacementField,
    _stencil_args,
    diag_blocks,
    energy_renormalized,
    gradient,
    hessian_apply,
)
from .lattice import LatticeWindow
from .potential import DefectModel, SitePotential, make_harmonic
from .spectral import BrillouinGrid, stability_certificate

__all__ = [
    "RelaxError",
    "SolveReport",
    "ResidualField",
    "relax",
    "residual_f",
]


class RelaxError(RuntimeError):
    """Relaxation could not be set up (unstable crystal, bad arguments)."""

    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


@dataclass
class SolveReport:
    iterations: int
    gradient_norm: float
    energy: float
    converged: bool
    wall_time: float
    cg_iterations: int = 0
    line_search_backtracks: int = 0
    stability: dict | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "gradient_norm": self.gradient_norm,
            "energy": self.energy,
            "converged": self.converged,
            "wall_time": self.wall_time,
            "cg_iterations": self.cg_iterations,
            "line_search_backtracks": self.line_search_backtracks,
        }


def _pcg(apply_fn, b, precon_fn, *, rtol, atol, maxiter):
    """Preconditioned conjugate gradients on flat vectors, x0 = 0.

    Returns (x, iterations).  Stops early on a direction of nonpositive
    curvature (truncated-Newton convention: keep the iterate found so far).
    """
    x = np.zeros_like(b)
    r = b.copy()
    bnorm = float(np.linalg.norm(b))
    stop = max(atol, rtol * bnorm)
    if bnorm <= stop:
        return x, 0
    z = precon_fn(r)
    p = z.copy()
    rz = float(r @ z)
    it = 0
    while it < maxiter:
        it += 1
        Ap = apply_fn(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            break
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        if np.linalg.norm(r) <= stop:
            break
        z = precon_fn(r)
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, it


class _WindowOperator:
    """Flat-vector view of hessian_apply at a fixed state."""

    def __init__(self, window, pot, state: DisplacementField | None):
        self.window = window
        self.pot = pot
        self.state = state
        self._buf = DisplacementField.zeros(window)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        self._buf.set_dof_vector(x)
        out = hessian_apply(self.state, self._buf, self.pot)
        return out.dof_vector()


def _block_preconditioner(window, pot, state: DisplacementField):
    """Inverse of the per-(site, species) diagonal hessian blocks."""
    blocks = diag_blocks(state, pot)[: window.n_interior]
    n = blocks.shape[-1]
    ridge = 1e-12 * max(1.0, float(np.abs(blocks).max()))
    try:
        inv = np.linalg.inv(blocks + ridge * np.eye(n))
    except np.linalg.LinAlgError:
        inv = np.broadcast_to(np.eye(n), blocks.shape).copy()

    def apply(x):
        r = x.reshape(blocks.shape[:2] + (n,))
        return np.einsum("msij,msj->msi", inv, r).reshape(-1)

    return apply


def _dual_norm_solver(window, rng):
    """|g|_* = sqrt(<g, A^{-1} g>) with A the unit-spring stencil Gram.

    A is the reference hessian of the k = 1 harmonic potential on the same
    interaction range; clamping makes it positive definite, so the dual norm
    is finite and measures g against every admissible test direction.
    """
    aux = make_harmonic(rng, 1.0)
    op = _WindowOperator(window, aux, None)
    zero = DisplacementField.zeros(window)
    precon = _block_preconditioner(window, aux, zero)

    def dual(gvec: np.ndarray) -> float:
        if not gvec.any():
            return 0.0
        w, _ = _pcg(op, gvec, precon, rtol=1e-8, atol=0.0, maxiter=20000)
        return float(np.sqrt(max(0.0, gvec @ w)))

    return dual


def _scaled_defect(defect: DefectModel, fac: float) -> DefectModel:
    dip = {site: fac * defect.g_at(site) for site in defect.sites}
    return DefectModel(defect.rng, defect.R_def, dip)


def relax(pot: SitePotential, defect: DefectModel | None,
          window: LatticeWindow | float, *, tol: float = 1e-9,
          max_iter: int = 50, cg_maxiter: int = 20000,
          check_stability: bool = True, stability_order: int = 16,
          continuation_steps: int = 1):
    """Minimize the windowed defect energy; returns (field, SolveReport).

    The boundary ring is clamped to zero, which also removes the translation
    null space.  A phonon stability certificate is evaluated first and an
    unstable crystal aborts with RelaxError (carrying the certificate).
    Non-convergence within max_iter is not an exception: the best iterate
    seen is returned with converged=False.

    continuation_steps > 1 ramps the defect strength in equal increments,
    warm-starting each solve from the previous one (useful for strong
    dipoles that would otherwise leave the basin of the reference state).
    """
    rng = pot.rng
    spec = rng.spec
    if tol <= 0:
        raise RelaxError("tolerance must be positive")
    if not isinstance(window, LatticeWindow):
        window = LatticeWindow.build(spec, rng, float(window))

    cert = None
    if check_stability:
        cert = stability_certificate(BrillouinGrid(spec, stability_order), pot)
        if not cert["pass"]:
            raise RelaxError(
                "crystal fails the phonon stability certificate; "
                "refusing to relax", certificate=cert)

    t0 = time.perf_counter()
    dual = _dual_norm_solver(window, rng)
    u = DisplacementField.zeros(window)
    report = SolveReport(iterations=0, gradient_norm=np.inf, energy=0.0,
                         converged=False, wall_time=0.0, stability=cert)

    K = max(1, int(continuation_steps))
    if defect is None or defect.is_empty() or K == 1:
        stages = [defect]
    else:
        stages = [_scaled_defect(defect, (s + 1) / K) for s in range(K)]

    best_dual, best_u = np.inf, u.copy()
    gdual = np.inf
    for stage, dfct in enumerate(stages):
        last_stage = stage == len(stages) - 1
        while True:
            g = gradient(u, pot, dfct)
            gvec = g.dof_vector()
            gdual = dual(gvec)
            if last_stage and gdual < best_dual:
                best_dual, best_u = gdual, u.copy()
            if gdual <= tol or report.iterations >= max_iter:
                break

            op = _WindowOperator(window, pot, u)
            precon = _block_preconditioner(window, pot, u)
            step, cg_it = _pcg(op, -gvec, precon,
                               rtol=1e-12, atol=0.01 * tol, maxiter=cg_maxiter)
            report.cg_iterations += cg_it
            slope = float(gvec @ step)
            if not step.any() or slope >= 0.0:
                step = -precon(gvec)
                slope = float(gvec @ step)

            e0 = energy_renormalized(u, pot, dfct)
            u0vec = u.dof_vector()
            trial = u.copy()
            if -slope <= 1e-13 * max(1.0, abs(e0)):
                # the predicted decrease sits below the noise floor of the
                # energy sum, so a sufficient-decrease test can only reject
                # good steps; we are in the quadratic basin -- take the full
                # Newton step and let the gradient check decide
                trial.set_dof_vector(u0vec + step)
            else:
                alpha = 1.0
                for _ in range(40):
                    trial.set_dof_vector(u0vec + alpha * step)
                    if (energy_renormalized(trial, pot, dfct)
                            <= e0 + 1e-4 * alpha * slope):
                        break
                    alpha *= 0.5
                    report.line_search_backtracks += 1
            u = trial
            report.iterations += 1

    if best_dual < gdual:
        u, gdual = best_u, best_dual
    report.gradient_norm = float(gdual)
    report.converged = bool(gdual <= tol)
    report.energy = energy_renormalized(u, pot, stages[-1])
    report.wall_time = time.perf_counter() - t0
    return u, report


# ---------------------------------------------------------------------------
# linearization residual
# ---------------------------------------------------------------------------


@dataclass
class ResidualField:
    """Per-stencil loads f over a window: values[site, t] in R^n.

    Satisfies <d2E_hom(0) u, v> = sum_xi sum_t f_t(xi) . D_t v(xi) for every
    compactly supported v, up to the recorded quadrature delta and the
    solver residual of u.
    """

    window: LatticeWindow
    values: np.ndarray
    quad_order: int
    quad_delta: float

    def pairing(self, v: DisplacementField) -> float:
        impl = _kernels.get_impl()
        rng = self.window.rng
        dv = impl["du_field"](v.values, self.window.nbr, rng.alpha, rng.beta)
        return float(np.sum(self.values * dv))

    def site_norms(self) -> np.ndarray:
        return np.sqrt(np.sum(self.values ** 2, axis=(1, 2)))


def residual_f(u: DisplacementField, pot: SitePotential,
               defect: DefectModel | None = None, *, order: int = 8,
               max_order: int = 64, quad_rtol: float = 1e-12) -> ResidualField:
    """Stencil load of the linearized equation at the relaxed field u.

        f_t(xi) = -[defect dipole]_t(xi)
                  - int_0^1 (1-s) [d3V(s Du(xi))[Du(xi), Du(xi)]]_t ds

    The integral (exact remainder of the first-order Taylor expansion of the
    site gradient around the reference) is evaluated by Gauss-Legendre
    quadrature whose order is doubled until the result is stationary to
    quad_rtol in sup norm; the achieved order and step-to-step delta are
    recorded on the result.
    """
    w = u.window
    rng = pot.rng
    impl = _kernels.get_impl()
    kind, p1, p2, p3, rref, rnorm, _ = _stencil_args(pot)
    du = impl["du_field"](u.values, w.nbr, rng.alpha, rng.beta)

    def quad(q):
        x, wt = np.polynomial.legendre.leggauss(q)
        s = 0.5 * (x + 1.0)
        ws = 0.5 * wt
        acc = np.zeros_like(du)
        for sq, wq in zip(s, ws):
            acc += (wq * (1.0 - sq)) * impl["third_field"](
                sq * du, du, kind, p1, p2, p3, rref, rnorm)
        return acc

    if kind == 0:
        # quadratic site energies have no Taylor remainder
        vals = np.zeros_like(du)
        q, delta = order, 0.0
    else:
        q = order
        cur = quad(q)
        delta = 0.0
        while q < max_order:
            nxt = quad(2 * q)
            delta = float(np.abs(nxt - cur).max())
            cur = nxt
            q *= 2
            if delta <= quad_rtol * max(1.0, float(np.abs(cur).max())):
                break
        vals = cur
    vals = -vals

    if defect is not None and not defect.is_empty():
        rows, gd = defect.pack(w)
        vals[rows] -= gd
    return ResidualField(window=w, values=vals, quad_order=q,
                         quad_delta=delta)
