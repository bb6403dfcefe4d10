import numpy as np
import pytest

from latdef.lattice import build_multilattice, make_triplet, validate_range
from latdef.potential import make_harmonic, make_morse_pair
from latdef.spectral import (
    BlockHermitian,
    BrillouinGrid,
    SpectralError,
    assemble_H,
    hgrid_full,
    isdft,
    periodic_diff,
    phonons,
    predict_exponent,
    quadratic_form_check,
    schur_inverse,
    sdft,
    stability_certificate,
)

from test_lattice import hex_range, hex_spec, square_range, square_spec


def diamond_spec():
    F = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])
    p1 = F @ np.array([0.25, 0.25, 0.25])
    return build_multilattice(F, [[0.0, 0.0, 0.0], p1], n=3)


def diamond_range(spec):
    trip = [make_triplet((0, 0, 0), 0, 1)]
    for i in range(3):
        r = [0, 0, 0]
        r[i] = -1
        trip.append(make_triplet(r, 0, 1))
    same = []
    for i in range(3):
        e = [0, 0, 0]
        e[i] = 1
        same.append(tuple(e))
        same.append(tuple(-x for x in e))
    for i in range(3):
        for j in range(i + 1, 3):
            e = [0, 0, 0]
            e[i] = 1
            e[j] = -1
            same.append(tuple(e))
            same.append(tuple(-x for x in e))
    for r in same:
        trip.append(make_triplet(r, 0, 0))
        trip.append(make_triplet(r, 1, 1))
    return validate_range(spec, trip)


@pytest.fixture(scope="module")
def square1():
    spec = square_spec()
    rng = square_range(spec)
    return spec, rng, make_harmonic(rng, 1.0)


@pytest.fixture(scope="module")
def hexes():
    spec = hex_spec()
    rng = hex_range(spec)
    hpot = make_harmonic(rng, {"0-1": 1.0, "0-0": 0.5, "1-1": 0.5})
    mpot = make_morse_pair(
        rng, {"0-1": {"D": 1.0, "a": 4.0, "r0_scale": 0.9},
              "0-0": {"D": 0.5, "a": 4.0, "r0_scale": 0.9},
              "1-1": {"D": 0.5, "a": 4.0, "r0_scale": 0.9}})
    return spec, rng, hpot, mpot


@pytest.fixture(scope="module")
def diamond():
    spec = diamond_spec()
    rng = diamond_range(spec)
    return spec, rng, make_harmonic(rng, {"0-1": 1.0, "default": 0.3})


def oracle_H(k, pot, spec):
    """Slow direct double sum over triplet pairs with explicit slot loops."""
    rng = pot.rng
    S, n = spec.S, spec.n
    T = rng.T
    C = pot.hess(np.zeros((T, n)))
    nslot = S            # displacement slot + S-1 shift slots
    H = np.zeros((nslot * n, nslot * n), dtype=complex)

    def weights(t):
        ph = np.exp(2j * np.pi * float(np.dot(k, spec.F @ rng.rho[t])))
        w = np.zeros(nslot, dtype=complex)
        w[0] = ph - 1.0
        if rng.beta[t] >= 1:
            w[rng.beta[t]] += ph
        if rng.alpha[t] >= 1:
            w[rng.alpha[t]] -= 1.0
        return w

    for t in range(T):
        wt = weights(t)
        for s in range(T):
            ws = weights(s)
            for r in range(nslot):
                for c in range(nslot):
                    H[r * n:(r + 1) * n, c * n:(c + 1) * n] += \
                        np.conj(wt[r]) * C[t, :, s, :] * ws[c]
    return H


class TestTransforms:
    def test_delta_to_ones(self):
        u = np.zeros((8, 8))
        u[0, 0] = 1.0
        assert np.allclose(sdft(u, 2), np.ones((8, 8)))

    def test_plane_wave_to_delta(self):
        N = 8
        j0 = (2, 5)
        m = np.stack(np.meshgrid(*([np.arange(N)] * 2), indexing="ij"), -1)
        u = np.exp(2j * np.pi * (m @ np.array(j0)) / N)
        uh = sdft(u, 2)
        expect = np.zeros((N, N), complex)
        expect[j0] = N * N
        assert np.allclose(uh, expect, atol=1e-10)

    def test_roundtrip_and_parseval(self):
        nprng = np.random.default_rng(0)
        u = nprng.standard_normal((6, 6, 2, 3))
        back = isdft(sdft(u, 2), 2)
        assert np.allclose(back.real, u, atol=1e-12)
        uh = sdft(u, 2)
        lhs = np.sum(u * u)
        rhs = np.sum(np.abs(uh) ** 2) / 36
        assert abs(lhs - rhs) <= 1e-12 * abs(lhs)

    def test_periodic_diff_matches_roll_definition(self):
        nprng = np.random.default_rng(1)
        u = nprng.standard_normal((5, 5))
        d = periodic_diff(u, (1, 0), 2)
        for i in range(5):
            for j in range(5):
                assert d[i, j] == u[(i + 1) % 5, j] - u[i, j]


class TestAssembleH:
    def test_square_closed_form(self, square1):
        spec, rng, pot = square1
        nprng = np.random.default_rng(2)
        for _ in range(200):
            k = nprng.uniform(-0.5, 0.5, size=2)
            H = assemble_H(k, pot)
            lam = 8 * np.sin(np.pi * k[0]) ** 2 + 8 * np.sin(np.pi * k[1]) ** 2
            assert np.allclose(H.H00, lam * np.eye(2), atol=1e-12)
            assert H.H0p.shape == (2, 0)
            assert H.Hpp.shape == (0, 0)

    def test_matches_direct_double_sum(self, hexes):
        spec, rng, hpot, mpot = hexes
        nprng = np.random.default_rng(3)
        for pot in (hpot, mpot):
            for _ in range(5):
                k = nprng.uniform(-0.6, 0.6, size=2)
                H = assemble_H(k, pot).full()
                Ho = oracle_H(k, pot, spec)
                assert np.allclose(H, Ho, atol=1e-12 * max(1, np.abs(Ho).max()))

    def test_zero_k_blocks_vanish(self, hexes):
        spec, rng, hpot, mpot = hexes
        H = assemble_H(np.zeros(2), mpot)
        assert np.abs(H.H00).max() <= 1e-12
        assert np.abs(H.H0p).max() <= 1e-12
        assert np.abs(H.Hpp).max() > 0.1      # shift sector stays stiff

    def test_hermitian_at_random_k(self, hexes):
        spec, rng, hpot, mpot = hexes
        nprng = np.random.default_rng(4)
        for _ in range(1000):
            k = nprng.uniform(-1.0, 1.0, size=2)
            H = assemble_H(k, mpot)
            F = H.full()
            scale = max(1.0, np.abs(F).max())
            assert H.hermiticity_gap() <= 1e-12 * scale

    def test_minus_k_is_conjugate(self, hexes):
        spec, rng, hpot, mpot = hexes
        nprng = np.random.default_rng(5)
        for _ in range(20):
            k = nprng.uniform(-1.0, 1.0, size=2)
            A = assemble_H(k, mpot).full()
            B = assemble_H(-k, mpot).full()
            assert np.allclose(B, A.conj(), atol=1e-12 * max(1, np.abs(A).max()))

    def test_relabeled_species_gauge(self, hexes):
        # Swapping the two species (anchoring the lattice on the other
        # sublattice) acts on the (U, p) frame by a non-unitary change of
        # variables, so the raw block-matrix eigenvalues are frame-dependent.
        # In species amplitudes (u_0, u_1) the swap is a permutation times
        # diagonal phases -- unitary -- so the species-frame spectra must
        # agree exactly, and the signature of the form itself is preserved.
        spec, rng, hpot, mpot = hexes
        F = np.array([[1.0, 0.5], [0.0, np.sqrt(3) / 2]])
        # anchor on the other sublattice: p_1' = -p_1, so the zero-offset
        # inter-species pair stays a physical nearest-neighbour bond and the
        # closed triplet sets of the two labelings swap into each other
        spec2 = build_multilattice(F, [[0.0, 0.0], -F @ np.array([1 / 3, 1 / 3])],
                                   n=3)
        trip = [make_triplet(r, 0, 1) for r in [(0, 0), (1, 0), (0, 1)]]
        for r in [(1, 0), (-1, 0), (0, 1), (0, -1), (1, -1), (-1, 1)]:
            trip.append(make_triplet(r, 0, 0))
            trip.append(make_triplet(r, 1, 1))
        rng2 = validate_range(spec2, trip)
        pot2 = make_harmonic(rng2, {"0-1": 1.0, "0-0": 0.5, "1-1": 0.5})
        n = spec.n
        A = np.eye(2 * n)
        A[n:, :n] = -np.eye(n)  # columns (u_0, u_1) -> rows (U, p)
        nprng = np.random.default_rng(6)
        for _ in range(50):
            k = nprng.uniform(-1.0, 1.0, size=2)
            H1 = assemble_H(k, hpot).full()
            H2 = assemble_H(k, pot2).full()
            d1 = np.linalg.eigvalsh(A.T @ H1 @ A)
            d2 = np.linalg.eigvalsh(A.T @ H2 @ A)
            assert np.allclose(d1, d2, atol=1e-10 * max(1.0, d1.max()))
            e1 = np.linalg.eigvalsh(H1)
            e2 = np.linalg.eigvalsh(H2)
            assert np.sum(e1 > 1e-12) == np.sum(e2 > 1e-12)


class TestQuadraticFormCheck:
    def test_zero_fields(self, hexes):
        spec, rng, hpot, mpot = hexes
        u = np.zeros((8, 8, 2, 3))
        assert quadratic_form_check(u, u, mpot) == 0.0

    def test_random_fields_all_presets(self, square1, hexes, diamond):
        cases = [
            (square1[0], square1[2], (16, 16, 1, 2)),
            (hexes[0], hexes[2], (16, 16, 2, 3)),
            (hexes[0], hexes[3], (16, 16, 2, 3)),
            (diamond[0], diamond[2], (8, 8, 8, 2, 3)),
        ]
        nprng = np.random.default_rng(7)
        for spec, pot, shape in cases:
            for _ in range(3):
                u = nprng.standard_normal(shape)
                v = nprng.standard_normal(shape)
                assert quadratic_form_check(u, v, pot) <= 1e-10

    def test_single_plane_wave(self, hexes):
        spec, rng, hpot, mpot = hexes
        N = 16
        uh = np.zeros((N, N, 2, 3), dtype=complex)
        uh[3, 5] = np.arange(6).reshape(2, 3) + 1.0
        uh[(N - 3) % N, (N - 5) % N] = uh[3, 5].conj()
        u = isdft(uh, 2).real
        assert quadratic_form_check(u, u, mpot) <= 1e-10

    def test_shape_mismatch_raises(self, hexes):
        spec, rng, hpot, mpot = hexes
        with pytest.raises(SpectralError):
            quadratic_form_check(np.zeros((8, 8, 2, 2)),
                                 np.zeros((8, 8, 2, 2)), mpot)


class TestSchurInverse:
    def test_single_species_inverse(self, square1):
        spec, rng, pot = square1
        H = assemble_H(np.array([0.21, -0.37]), pot)
        inv = schur_inverse(H)
        assert np.allclose(inv.Q, H.H00)
        assert np.allclose(inv.inv00 @ H.H00, np.eye(2), atol=1e-12)

    def test_block_diagonal_case(self, hexes):
        spec, rng, hpot, mpot = hexes
        H = assemble_H(np.array([0.3, 0.11]), mpot)
        Hbd = BlockHermitian(H.k, H.H00, np.zeros_like(H.H0p), H.Hpp)
        inv = schur_inverse(Hbd)
        assert np.allclose(inv.inv00, np.linalg.inv(H.H00), atol=1e-10)
        assert np.allclose(inv.invpp, np.linalg.inv(H.Hpp), atol=1e-10)
        assert np.abs(inv.inv0p).max() <= 1e-14
        assert np.abs(inv.invp0).max() <= 1e-14

    def test_inverse_multiplication(self, hexes, diamond):
        nprng = np.random.default_rng(8)
        for spec, rng, pot in ((hexes[0], hexes[1], hexes[3]),
                               (diamond[0], diamond[1], diamond[2])):
            Sn = spec.S * spec.n
            for _ in range(20):
                k = nprng.uniform(0.05, 0.45, size=spec.d)
                H = assemble_H(k, pot)
                inv = schur_inverse(H)
                assert np.allclose(inv.full() @ H.full(), np.eye(Sn),
                                   atol=1e-10)

    def test_second_formula_agrees(self, hexes):
        spec, rng, hpot, mpot = hexes
        nprng = np.random.default_rng(9)
        for _ in range(20):
            k = nprng.uniform(0.05, 0.45, size=2)
            H = assemble_H(k, mpot)
            inv = schur_inverse(H)
            assert inv.P is not None
            invP = np.linalg.inv(inv.P)
            h00i = np.linalg.inv(H.H00)
            alt00 = h00i + h00i @ H.H0p @ invP @ H.Hp0 @ h00i
            assert np.allclose(inv.inv00, alt00, atol=1e-10 * np.abs(alt00).max())
            assert np.allclose(inv.invpp, invP, atol=1e-10 * np.abs(invP).max())

    def test_zero_k_singular(self, hexes):
        spec, rng, hpot, mpot = hexes
        H = assemble_H(np.zeros(2), mpot)
        with pytest.raises(SpectralError):
            schur_inverse(H)


class TestPhonons:
    def test_square_branches_closed_form(self, square1):
        spec, rng, pot = square1
        grid = BrillouinGrid(spec, 8)
        ph = phonons(grid, pot)
        kf = grid.kfrac.reshape(-1, 2)
        lam = 8 * np.sin(np.pi * kf[:, 0]) ** 2 + 8 * np.sin(np.pi * kf[:, 1]) ** 2
        assert np.allclose(ph.eigenvalues, np.stack([lam, lam], axis=1),
                           atol=1e-10)

    def test_acoustic_limit_square(self, square1):
        spec, rng, pot = square1
        direction = np.array([0.6, 0.8])
        t = 1e-3
        H = assemble_H(t * direction, pot)
        lam = np.linalg.eigvalsh(H.H00)[0]
        assert abs(lam / t ** 2 - 8 * np.pi ** 2) <= 1e-3 * 8 * np.pi ** 2

    def test_acoustic_limit_converges_hex(self, hexes):
        spec, rng, hpot, mpot = hexes
        direction = np.array([1.0, 0.3])
        direction /= np.linalg.norm(direction)
        ratios = []
        # quartic corrections scale like t**2, so keep t small enough that
        # they sit below the comparison tolerance
        for t in (1e-3, 1e-4):
            H = assemble_H(t * direction, mpot).full()
            lam = np.linalg.eigvalsh(H)[:3]
            ratios.append(lam / t ** 2)
        assert np.all(ratios[1] > 0)
        assert np.allclose(ratios[0], ratios[1], rtol=1e-3)

    def test_hex_optical_gap(self, hexes):
        spec, rng, hpot, mpot = hexes
        grid = BrillouinGrid(spec, 16)
        ph = phonons(grid, mpot)
        assert ph.optical().min() > 0.05

    def test_table_shape(self, hexes):
        spec, rng, hpot, mpot = hexes
        grid = BrillouinGrid(spec, 8)
        tab = phonons(grid, mpot).table()
        assert tab.shape == (64, 2 + 6)


class TestStabilityCertificate:
    def test_stable_hex_presets(self, hexes):
        spec, rng, hpot, mpot = hexes
        grid = BrillouinGrid(spec, 16)
        for pot in (hpot, mpot):
            rep = stability_certificate(grid, pot)
            assert rep["pass"], rep
            assert rep["gamma_acoustic_low"] > 0
            assert rep["gamma_acoustic_high"] >= rep["gamma_acoustic_low"]
            assert rep["gamma_optical"] > 0

    def test_stable_diamond(self, diamond):
        spec, rng, pot = diamond
        grid = BrillouinGrid(spec, 8)
        rep = stability_certificate(grid, pot)
        assert rep["pass"], rep

    def test_single_species_optical_not_applicable(self, square1):
        spec, rng, pot = square1
        grid = BrillouinGrid(spec, 8)
        rep = stability_certificate(grid, pot)
        assert rep["pass"]
        assert rep["gamma_optical"] is None

    def test_softened_square_fails_with_location(self, square1):
        spec, rng, _ = square1
        pot = make_harmonic(rng, [1.0, -0.2, -0.2, 1.0], allow_indefinite=True)
        grid = BrillouinGrid(spec, 16)
        rep = stability_certificate(grid, pot)
        assert not rep["pass"]
        assert rep["worst_acoustic"]["eigenvalue"] < 0

    def test_certificate_is_json_ready(self, hexes):
        import json
        spec, rng, hpot, mpot = hexes
        grid = BrillouinGrid(spec, 8)
        json.dumps(stability_certificate(grid, mpot))


class TestPredictExponent:
    def test_table(self):
        assert predict_exponent("Q_inv", 1, 2) == -1
        assert predict_exponent("Q_inv_H0p_Hpp_inv", 0, 2) == -1
        assert predict_exponent("Hpp_terms", 0, 3) == -3
        assert predict_exponent("Q_inv", 2, 2) == -2
        assert predict_exponent("Q_inv", 3, 2) == -3
        assert predict_exponent("Hpp_terms", 0, 2) == -2

    def test_rejects_unknown(self):
        with pytest.raises(ValueError):
            predict_exponent("nope", 1, 2)
        with pytest.raises(ValueError):
            predict_exponent("Q_inv", -1, 2)


class TestBrillouinGrid:
    def test_centered_representatives(self, square1):
        spec, rng, pot = square1
        grid = BrillouinGrid(spec, 6)
        assert grid.num_nodes == 36
        assert grid.jcent.min() == -2
        assert grid.jcent.max() == 3
        assert grid.kphys[0, 0] @ grid.kphys[0, 0] == 0.0
        mask = grid.nonzero_mask()
        assert mask.sum() == 35 and not mask[0, 0]

    def test_odd_order_rejected(self, square1):
        spec, rng, pot = square1
        with pytest.raises(SpectralError):
            BrillouinGrid(spec, 7)

    def test_kphys_uses_dual_matrix(self, hexes):
        spec, rng, hpot, mpot = hexes
        grid = BrillouinGrid(spec, 8)
        j = grid.jcent[2, 5]
        assert np.allclose(grid.kphys[2, 5], spec.B @ (j / 8.0))


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
