import os

import numpy as np
import pytest

from latdef import _kernels
from latdef.energy import (
    DisplacementField,
    energy_renormalized,
    field_from_data,
    gradient,
    hessian_apply,
    inner,
    load_field,
    norm_a1,
    norm_a2,
    norm_a3,
    random_compact_field,
    save_field,
    save_field_csv,
)
from latdef.lattice import LatticeWindow, finite_difference, make_triplet
from latdef.potential import DefectModel, make_harmonic, make_morse_pair

from test_lattice import hex_range, hex_spec, square_range, square_spec


@pytest.fixture(scope="module")
def hex_case():
    spec = hex_spec()
    rng = hex_range(spec)
    window = LatticeWindow.build(spec, rng, 8.0)
    pot = make_morse_pair(
        rng, {"0-1": {"D": 1.0, "a": 4.0, "r0_scale": 0.9},
              "0-0": {"D": 0.5, "a": 4.0, "r0_scale": 0.9},
              "1-1": {"D": 0.5, "a": 4.0, "r0_scale": 0.9}})
    hpot = make_harmonic(rng, {"0-1": 1.0, "0-0": 0.5, "1-1": 0.5})
    defect = DefectModel.from_entries(
        rng, 1.0, [([0, 0], [0, 0, 0, 1], [0.1, 0.05, 0.0])])
    return spec, rng, window, pot, hpot, defect


@pytest.fixture(scope="module")
def square_case():
    spec = square_spec()
    rng = square_range(spec)
    window = LatticeWindow.build(spec, rng, 8.0)
    pot = make_harmonic(rng, 1.0)
    return spec, rng, window, pot


def rand_field(window, nprng, radius=6.0, scale=0.05):
    return random_compact_field(window, radius, nprng, scale=scale)


class TestKernelBackends:
    def test_both_backends_agree(self, hex_case):
        if "numba" not in _kernels.IMPLS:
            pytest.skip("numba unavailable")
        spec, rng, window, pot, hpot, _ = hex_case
        nprng = np.random.default_rng(7)
        u = rand_field(window, nprng)
        v = rand_field(window, nprng)
        for potential in (pot, hpot):
            kind, p1, p2, p3, rref, rnorm = potential.kernel_params()
            g0 = potential.grad(np.zeros_like(rref))
            a = rng.alpha, rng.beta
            for name, args in [
                ("du_field", (u.values, window.nbr, *a)),
                ("energy", (u.values, window.nbr, *a, kind, p1, p2, p3,
                            rref, rnorm, g0)),
                ("grad", (u.values, window.nbr, *a, kind, p1, p2, p3,
                          rref, rnorm, g0)),
                ("hess_apply", (u.values, v.values, window.nbr, *a, kind,
                                p1, p2, p3, rref, rnorm)),
                ("diag_blocks", (u.values, window.nbr, *a, kind, p1, p2, p3,
                                 rref, rnorm)),
            ]:
                got_np = _kernels.IMPLS["numpy"][name](*args)
                got_nb = _kernels.IMPLS["numba"][name](*args)
                assert np.allclose(got_np, got_nb, rtol=1e-12, atol=1e-14), name

    def test_third_field_backends_agree(self, hex_case):
        if "numba" not in _kernels.IMPLS:
            pytest.skip("numba unavailable")
        spec, rng, window, pot, _, _ = hex_case
        nprng = np.random.default_rng(8)
        u = rand_field(window, nprng)
        w = rand_field(window, nprng)
        kind, p1, p2, p3, rref, rnorm = pot.kernel_params()
        du = _kernels.IMPLS["numpy"]["du_field"](u.values, window.nbr,
                                                 rng.alpha, rng.beta)
        dw = _kernels.IMPLS["numpy"]["du_field"](w.values, window.nbr,
                                                 rng.alpha, rng.beta)
        args = (du, dw, kind, p1, p2, p3, rref, rnorm)
        got_np = _kernels.IMPLS["numpy"]["third_field"](*args)
        got_nb = _kernels.IMPLS["numba"]["third_field"](*args)
        assert np.allclose(got_np, got_nb, rtol=1e-12, atol=1e-14)

    def test_env_flag_respected(self):
        want = os.environ.get("LATDEF_KERNELS", "").strip().lower()
        if want:
            assert _kernels.backend_name() == want
        else:
            assert _kernels.backend_name() in ("numba", "numpy")


class TestEnergy:
    def test_zero_field_zero_energy(self, hex_case):
        spec, rng, window, pot, hpot, defect = hex_case
        u = DisplacementField.zeros(window)
        assert energy_renormalized(u, pot) == 0.0
        assert energy_renormalized(u, hpot) == 0.0
        assert energy_renormalized(u, pot, defect) == 0.0

    def test_gradient_matches_fd(self, hex_case):
        spec, rng, window, pot, hpot, defect = hex_case
        nprng = np.random.default_rng(11)
        for potential in (pot, hpot):
            u = rand_field(window, nprng)
            v = rand_field(window, nprng)
            g = gradient(u, potential, defect)
            h = 1e-6
            up = u.copy()
            um = u.copy()
            up.values += h * v.values
            um.values -= h * v.values
            fd = (energy_renormalized(up, potential, defect)
                  - energy_renormalized(um, potential, defect)) / (2 * h)
            pair = inner(g, v)
            assert abs(pair - fd) <= 1e-7 * max(1.0, abs(fd))

    def test_gradient_zero_at_reference(self, hex_case):
        spec, rng, window, pot, hpot, _ = hex_case
        u = DisplacementField.zeros(window)
        for potential in (pot, hpot):
            g = gradient(u, potential)
            assert np.abs(g.values).max() <= 1e-14

    def test_dipole_gradient_is_scattered_pattern(self, hex_case):
        spec, rng, window, pot, hpot, _ = hex_case
        e = np.array([0.3, -0.2, 0.1])
        trip = [0, 0, 0, 1]          # rho = 0, species 0 -> 1
        defect = DefectModel.from_entries(rng, 1.0,
                                          [([0, 0], trip, e.tolist())])
        u = DisplacementField.zeros(window)
        g = gradient(u, hpot, defect)
        row = int(window.lookup(np.array([[0, 0]]))[0])
        t = rng.index_of(make_triplet([0, 0], 0, 1))
        jrow = int(window.nbr[row, t])
        expect = np.zeros_like(g.values)
        expect[row, 0] -= e
        expect[jrow, 1] += e
        assert np.allclose(g.values, expect, atol=1e-15)

    def test_hessian_symmetry_and_fd(self, hex_case):
        spec, rng, window, pot, hpot, _ = hex_case
        nprng = np.random.default_rng(12)
        u = rand_field(window, nprng)
        v = rand_field(window, nprng)
        w = rand_field(window, nprng)
        for potential in (pot, hpot):
            hv = hessian_apply(u, v, potential)
            hw = hessian_apply(u, w, potential)
            s1 = inner(hv, w)
            s2 = inner(hw, v)
            assert abs(s1 - s2) <= 1e-12 * max(1.0, abs(s1))
            # finite difference of the gradient along v
            h = 1e-6
            up = u.copy()
            um = u.copy()
            up.values += h * v.values
            um.values -= h * v.values
            fd = (gradient(up, potential).values
                  - gradient(um, potential).values) / (2 * h)
            assert np.allclose(hv.values, fd, rtol=0, atol=1e-6)

    def test_hessian_independent_of_state_for_harmonic(self, hex_case):
        spec, rng, window, pot, hpot, _ = hex_case
        nprng = np.random.default_rng(13)
        u = rand_field(window, nprng)
        v = rand_field(window, nprng)
        h0 = hessian_apply(None, v, hpot)
        hu = hessian_apply(u, v, hpot)
        assert np.array_equal(h0.values, hu.values)

    def test_harmonic_quadratic_identity(self, hex_case):
        spec, rng, window, pot, hpot, defect = hex_case
        nprng = np.random.default_rng(14)
        u = rand_field(window, nprng, scale=0.3)
        e = energy_renormalized(u, hpot)
        quad = 0.5 * inner(hessian_apply(None, u, hpot), u)
        assert abs(e - quad) <= 1e-12 * max(1.0, abs(e))
        # the defect adds exactly the packed linear pairing
        rows, g = defect.pack(window)
        lin = 0.0
        for m, site in enumerate(defect.sites):
            for t, trip in enumerate(rng.triplets):
                lin += float(np.dot(g[m, t], finite_difference(u, trip, site)))
        e_def = energy_renormalized(u, hpot, defect)
        assert abs(e_def - (e + lin)) <= 1e-12 * max(1.0, abs(e_def))

    def test_constant_direction_in_hessian_kernel(self, hex_case):
        spec, rng, window, pot, _, _ = hex_case
        v = DisplacementField.zeros(window)
        v.values[...] = np.array([0.2, -0.1, 0.4])      # same for all species
        hv_field = _kernels.get_impl()["hess_apply"](
            np.zeros_like(v.values), v.values, window.nbr, rng.alpha, rng.beta,
            *pot.kernel_params())
        assert np.abs(hv_field).max() <= 1e-14

    def test_translation_invariance(self, hex_case):
        spec, rng, window, pot, hpot, defect = hex_case
        nprng = np.random.default_rng(15)
        u = rand_field(window, nprng)
        c = np.array([0.7, -0.4, 0.25])
        ut = u.copy()
        ut.values += c                                 # every site and species
        for potential in (pot, hpot):
            e0 = energy_renormalized(u, potential, defect)
            e1 = energy_renormalized(ut, potential, defect)
            assert abs(e1 - e0) <= 1e-12 * max(1.0, abs(e0))
            v = rand_field(window, nprng)
            p0 = inner(gradient(u, potential, defect), v)
            p1 = inner(gradient(ut, potential, defect), v)
            assert abs(p1 - p0) <= 1e-12 * max(1.0, abs(p0))
        for nf in (norm_a1, norm_a2, norm_a3):
            assert abs(nf(u) - nf(ut)) <= 1e-12 * max(1.0, nf(u))


class TestNorms:
    def test_translation_field_has_zero_norms(self, hex_case):
        spec, rng, window, pot, hpot, _ = hex_case
        u = DisplacementField.zeros(window)
        u.values[...] = np.array([1.3, 0.2, -0.8])
        assert norm_a1(u) == 0.0
        assert norm_a2(u) == 0.0
        assert norm_a3(u) <= 1e-12

    def test_norms_positive_on_random_fields(self, hex_case):
        spec, rng, window, pot, hpot, _ = hex_case
        nprng = np.random.default_rng(16)
        u = rand_field(window, nprng)
        assert norm_a1(u) > 0
        assert norm_a2(u) > 0
        assert norm_a3(u) > 0

    def test_a1_matches_reference_differences(self, square_case):
        spec, rng, window, pot = square_case
        nprng = np.random.default_rng(17)
        u = rand_field(window, nprng, radius=5.0)
        total = 0.0
        for i in range(window.count):
            for trip in rng.triplets:
                dv = finite_difference(u, trip, window.coords[i])
                total += float(np.sum(dv * dv))
        assert np.isclose(norm_a1(u), np.sqrt(total), rtol=1e-12)

    def test_a3_single_site_shift_parseval(self, hex_case):
        spec, rng, window, pot, hpot, _ = hex_case
        u = DisplacementField.zeros(window)
        row = int(window.lookup(np.array([[0, 0]]))[0])
        e = np.array([0.3, 0.4, 1.2])
        u.values[row, 1] = e
        u.values[row, 0] = 0.0
        # q_1 = e at one site; the displacement part stays zero only if u_0 = 0
        got = norm_a3(u)
        # u_0 = 0 everywhere, so a3^2 = |e|^2 exactly plus the U-part of zero
        assert np.isclose(got, np.linalg.norm(e), rtol=1e-12)

    def test_a2_scales_with_amplitude(self, hex_case):
        spec, rng, window, pot, hpot, _ = hex_case
        nprng = np.random.default_rng(18)
        u = rand_field(window, nprng)
        u2 = u.copy()
        u2.values *= 3.0
        assert np.isclose(norm_a2(u2), 3.0 * norm_a2(u), rtol=1e-12)
        assert np.isclose(norm_a1(u2), 3.0 * norm_a1(u), rtol=1e-12)
        assert np.isclose(norm_a3(u2), 3.0 * norm_a3(u), rtol=1e-12)


class TestSerialization:
    def test_roundtrip_binary(self, hex_case, tmp_path):
        spec, rng, window, pot, hpot, _ = hex_case
        nprng = np.random.default_rng(19)
        u = rand_field(window, nprng)
        path = tmp_path / "field.bin"
        save_field(path, u)
        data = load_field(path)
        assert (data.d, data.n, data.S) == (spec.d, spec.n, spec.S)
        assert data.R_win == window.R_win
        assert np.array_equal(data.coords, window.coords)
        assert np.array_equal(data.values, u.values)
        u2 = field_from_data(data, window)
        assert np.array_equal(u2.values, u.values)

    def test_csv_export(self, hex_case, tmp_path):
        spec, rng, window, pot, hpot, _ = hex_case
        nprng = np.random.default_rng(20)
        u = rand_field(window, nprng)
        path = tmp_path / "field.csv"
        save_field_csv(path, u)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 1 + window.count * spec.S
        first = lines[1].split(",")
        m = np.array([int(first[0]), int(first[1])])
        assert np.array_equal(m, window.coords[0])
        vals = np.array([float(x) for x in first[3:]])
        assert np.array_equal(vals, u.values[0, 0])


class TestRandomCompact:
    def test_support_and_halo(self, hex_case):
        spec, rng, window, pot, hpot, _ = hex_case
        nprng = np.random.default_rng(21)
        u = random_compact_field(window, 4.0, nprng)
        r = window.radii()
        outside = r > 4.0
        assert np.abs(u.values[outside]).max() == 0.0
        assert np.abs(u.values[window.n_interior:]).max() == 0.0
        assert np.abs(u.values).max() > 0.0


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
