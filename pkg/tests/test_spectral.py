import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kubolab.model import LatticeSpec, build_hofstadter
from kubolab.spectral import (NoGap, _canonical_block, diagonalize, fermi_projector, largest_spacing_energy,
                              riesz_sandwich, spectral_function)

from oracles import contour_sandwich, hand_b1
from setups import first_gap_fermi_energy


def random_hermitian(rng, n, scale=1.0):
    A = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    return scale * (A + A.conj().T) / 2


def gapped_system(seed, n=6, occupied=3):
    rng = np.random.default_rng(seed)
    levels = np.concatenate([np.linspace(-2, -1, occupied), np.linspace(1, 2, n - occupied)])
    H = np.diag(levels) + random_hermitian(rng, n, 0.1)
    eig = diagonalize(H)
    E_F = 0.5 * (eig.energies[occupied - 1] + eig.energies[occupied])
    return H, eig, E_F, rng


def test_diagonal_input():
    eig = diagonalize(np.diag([1.0, 3.0, 5.0]))
    assert np.array_equal(eig.energies, [1.0, 3.0, 5.0])
    assert np.abs(eig.vectors - np.eye(3)).max() < 1e-15


def test_pauli_x():
    eig = diagonalize(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.allclose(eig.energies, [-1.0, 1.0], atol=1e-15)
    assert eig.residual < 1e-14


def test_torus_spectrum_has_three_bands():
    E = diagonalize(build_hofstadter(LatticeSpec(12, 1, 3, "torus"))).energies
    assert np.count_nonzero(np.diff(E) > 0.5) == 2


def test_degenerate_blocks_get_a_canonical_basis():
    rng = np.random.default_rng(3)
    Q, _ = np.linalg.qr(rng.normal(size=(8, 3)) + 1j * rng.normal(size=(8, 3)))
    R, _ = np.linalg.qr(rng.normal(size=(3, 3)) + 1j * rng.normal(size=(3, 3)))
    assert np.abs(_canonical_block(Q) - _canonical_block(Q @ R)).max() < 1e-12

    model = build_hofstadter(LatticeSpec(8, 0, 1, "torus"))
    a, b = diagonalize(model), diagonalize(model)
    assert np.array_equal(a.vectors, b.vectors)


def test_eigensystem_cache(tmp_path, monkeypatch):
    monkeypatch.setenv("KUBOLAB_CACHE_DIR", str(tmp_path))
    model = build_hofstadter(LatticeSpec(12, 1, 3, "open"))
    first = diagonalize(model)
    files = list(tmp_path.glob("eig-*.npz"))
    assert [f.name for f in files] == [f"eig-{model.content_hash}.npz"]
    second = diagonalize(model)
    monkeypatch.delenv("KUBOLAB_CACHE_DIR")
    fresh = diagonalize(model)
    for other in (second, fresh):
        assert np.array_equal(other.energies, first.energies)
        assert np.array_equal(other.vectors, first.vectors)


def test_projector_extremes():
    eig = diagonalize(build_hofstadter(LatticeSpec(12, 1, 3, "open")))
    empty = fermi_projector(eig, eig.energies[0] - 1)
    assert empty.occupied_count == 0 and np.abs(empty.matrix).max() == 0.0
    full = fermi_projector(eig, eig.energies[-1] + 1)
    assert full.occupied_count == eig.energies.size
    assert np.abs(full.matrix - np.eye(eig.energies.size)).max() < 1e-12


def test_first_gap_occupation_counts_the_lowest_band():
    model = build_hofstadter(LatticeSpec(24, 1, 3, "open"))
    eig = diagonalize(model)
    P = fermi_projector(eig, first_gap_fermi_energy(eig))
    edge_correction = P.occupied_count - model.dim // 3
    print(f"occupied {P.occupied_count} = D/3 + {edge_correction} edge states")
    assert abs(edge_correction) <= 2 * 24
    M = P.matrix
    assert np.abs(M @ M - M).max() < 1e-10 and np.abs(M - M.conj().T).max() < 1e-10
    assert P.gap_lower < P.fermi_energy < P.gap_upper and P.gap_width > 0
    info = P.gap_info()
    assert info.fermi_margin > 0


def test_torus_gap_info_reports_band_index():
    eig = diagonalize(build_hofstadter(LatticeSpec(12, 1, 3, "torus")))
    P = fermi_projector(eig, -1.4)
    assert P.occupied_count == 48 and P.gap_info().band_index == 1
    assert fermi_projector(eig, 1.4).gap_info().band_index == 2


def test_fermi_energy_without_gap():
    eig = diagonalize(np.diag([0.0, 1.0, 2.0]))
    with pytest.raises(NoGap):
        fermi_projector(eig, 1.0)
    with pytest.raises(NoGap):
        fermi_projector(eig, 1.001)
    fermi_projector(eig, 1.001, delta_min=1e-4)


def test_largest_spacing_energy():
    eig = diagonalize(np.diag([0.0, 1.0, 1.1, 3.0]))
    assert largest_spacing_energy(eig, -0.5, 2.5) == pytest.approx(1.8)


def test_sandwich_of_diagonal_operators_vanishes():
    H, eig, E_F, _ = gapped_system(1)
    P = fermi_projector(eig, E_F).matrix
    assert np.abs(riesz_sandwich(eig, E_F, H)).max() < 1e-13
    assert np.abs(riesz_sandwich(eig, E_F, P)).max() < 1e-13


def test_sandwich_matches_hand_formula_and_contour():
    H, eig, E_F, rng = gapped_system(2, n=4, occupied=2)
    C = random_hermitian(rng, 4)
    out = riesz_sandwich(eig, E_F, C)
    assert np.abs(out - hand_b1(eig.energies, eig.vectors, E_F, C)).max() < 1e-12
    contour = contour_sandwich(H, C, eig.energies[0] - 1.0, E_F)
    assert np.abs(out - contour).max() < 1e-8


def test_sandwich_is_off_diagonal_and_linear():
    H, eig, E_F, rng = gapped_system(4, n=8, occupied=3)
    P = fermi_projector(eig, E_F).matrix
    Q = np.eye(8) - P
    C1, C2 = random_hermitian(rng, 8), rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))
    out1, out2 = riesz_sandwich(eig, E_F, C1), riesz_sandwich(eig, E_F, C2)
    assert np.abs(P @ out1 @ P).max() < 1e-10 and np.abs(Q @ out1 @ Q).max() < 1e-10
    combo = riesz_sandwich(eig, E_F, 0.7 * C1 - 2.5j * C2)
    assert np.abs(combo - (0.7 * out1 - 2.5j * out2)).max() < 1e-10


@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 5))
@settings(max_examples=60, deadline=None)
def test_sandwich_solves_commutator_equation(seed, occupied):
    # [H, X] = [P, C] characterizes the sandwich on P-off-diagonal blocks
    H, eig, E_F, rng = gapped_system(seed, n=6, occupied=occupied)
    P = fermi_projector(eig, E_F).matrix
    C = rng.normal(size=(6, 6)) + 1j * rng.normal(size=(6, 6))
    X = riesz_sandwich(eig, E_F, C)
    assert np.abs(H @ X - X @ H - (P @ C - C @ P)).max() < 1e-10


def test_spectral_function_cases():
    H, eig, E_F, _ = gapped_system(5)
    assert np.abs(spectral_function(eig, lambda E: E) - H).max() < 1e-10
    P = fermi_projector(eig, E_F).matrix
    assert np.abs(spectral_function(eig, lambda E: (E < E_F).astype(float)) - P).max() < 1e-12
    U = spectral_function(eig, lambda E: np.exp(-0.37j * E))
    assert np.abs(U.conj().T @ U - np.eye(6)).max() < 1e-10

    levels = np.array([0.5, 1.5, 4.0])
    phases = spectral_function(diagonalize(np.diag(levels)), lambda E: np.exp(-0.1j * E))
    assert np.abs(phases - np.diag(np.exp(-0.1j * levels))).max() < 1e-15
