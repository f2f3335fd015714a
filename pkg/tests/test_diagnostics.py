import numpy as np
import pytest

from kubolab.adiabatic import driving_profile
from kubolab.diagnostics import (BoundaryReflection, band_wave_packet, energy_bound_check, kernel_decay,
                                 lightcone_check, projector_locality)
from kubolab.kubo import bulk_gap
from kubolab.model import LatticeSpec, build_hofstadter, build_landau_truncated, commutator_with, make_switch
from kubolab.spectral import diagonalize, fermi_projector

from setups import open_lattice, ramp

OFF = driving_profile("ramp", 4, amplitude=0.0)


@pytest.fixture(scope="module")
def wide_torus():
    model = build_hofstadter(LatticeSpec(36, 1, 3, "torus"))
    lo, hi = bulk_gap(1, 3, 1)
    return model, fermi_projector(diagonalize(model), 0.5 * (lo + hi))


@pytest.fixture(scope="module")
def small_open():
    model = build_hofstadter(LatticeSpec(12, 1, 3, "open"))
    return model, diagonalize(model), make_switch("x1", 2.0, 3, model)


def test_switch_profile_has_plateaus():
    S = open_lattice(24)
    m = S.lam1.half_width_m
    prof = kernel_decay(np.diag(S.lam1.as_diagonal), S.model, "x1", {"half_width": m})
    plus, minus = prof.distances > 0, prof.distances < 0
    assert np.all(np.abs(prof.norms[plus] - 1) <= 1e-14)
    assert np.all(prof.norms[minus] == 0)
    assert prof.at(3.0) == pytest.approx(1.0)


def test_commutator_with_switch_decays_away_from_it(wide_torus):
    model, P = wide_torus
    ell = model.lattice.magnetic_length
    lam1 = make_switch("x1", 1.0, 3, model, sharp=True)
    prof = kernel_decay(commutator_with(P.matrix, lam1), model, "x1", {"half_width": 1.0})
    ratio = prof.at(2 * ell) / prof.at(10 * ell)
    print(f"[P, L1] block norm ratio between 2 and 10 magnetic lengths: {ratio:.1f}")
    assert ratio >= 10
    assert prof.fit_exponent < 0


def test_current_commutator_lives_in_the_strip():
    S = open_lattice(24)
    m = S.lam2.half_width_m
    prof = kernel_decay(commutator_with(S.model.hamiltonian, S.lam2), S.model, "x2", {"half_width": m})
    assert np.all(prof.norms[np.abs(prof.distances) > 1] == 0)
    assert prof.norms.max() > 0


def test_projector_is_local(wide_torus):
    model, P = wide_torus
    ell = model.lattice.magnetic_length
    d, top = projector_locality(P.matrix, model)
    assert top[0] == pytest.approx(P.occupied_count / model.dim, rel=0.05)
    far = float(np.exp(np.interp(1 + 8 * ell, d, np.log(top))))
    print(f"largest |P_ij| at distance 1: {top[1]:.3g}, at {1 + 8 * ell:.2f}: {far:.3g}")
    assert top[1] / far >= 10


def test_projector_locality_needs_a_lattice():
    model = build_landau_truncated(1.0, 2, 6)
    with pytest.raises(ValueError):
        projector_locality(np.eye(model.dim), model)


def test_eigenstate_does_not_spread(small_open):
    model, eig, lam1 = small_open
    psi = eig.vectors[:, 10]
    rep = lightcone_check(model, OFF, lam1, 20.0, psi, eig=eig, samples=17)
    assert np.abs(rep.spreads - rep.spreads[0]).max() <= 1e-6
    assert rep.growth_exponent == 0.0


def test_wave_packet_spread_is_ballistic_at_most():
    S = open_lattice(24)
    psi = band_wave_packet(S.model, S.eig, S.P.fermi_energy)
    assert abs(np.linalg.norm(psi) - 1) < 1e-12
    rep = lightcone_check(S.model, OFF, S.lam1, 8.0, psi, eig=S.eig)
    print(f"light-cone exponent {rep.growth_exponent:.3f}")
    assert rep.growth_exponent <= 1.2


def test_doubling_tau_overlays_in_physical_time(small_open):
    model, eig, lam1 = small_open
    psi = band_wave_packet(model, eig, -1.0)
    short = lightcone_check(model, OFF, lam1, 4.0, psi, eig=eig, samples=33)
    long = lightcone_check(model, OFF, lam1, 8.0, psi, eig=eig, samples=33, limit=np.inf)
    # physical times of the short run are every other sample of the long one
    t_long = long.times[:17]
    assert np.allclose(short.times[::2], t_long)
    rel = np.abs(long.spreads[:17] - short.spreads[::2]) / short.spreads[::2]
    assert rel.max() <= 0.05


def test_boundary_reflection_is_flagged(small_open):
    model, eig, lam1 = small_open
    psi = band_wave_packet(model, eig, -1.0)
    with pytest.raises(BoundaryReflection):
        lightcone_check(model, OFF, lam1, 8.0, psi, eig=eig, samples=9, limit=1e-3)
    with pytest.raises(ValueError):
        lightcone_check(model, OFF, lam1, 8.0, 2 * psi, eig=eig)


def test_energy_bound_trivial_cases(small_open):
    model, eig, lam1 = small_open
    unitary = energy_bound_check(model, ramp(), lam1, 16.0, 0, eig=eig, samples=5)
    assert abs(unitary.value - 1) <= 1e-9
    frozen = energy_bound_check(model, OFF, lam1, 16.0, 2, eig=eig, samples=5)
    assert abs(frozen.value - 1) <= 1e-12
    assert frozen.table.shape == (5, 5) and frozen.m == 2


def test_energy_bound_grows_with_the_weight(small_open):
    model, eig, lam1 = small_open
    values = [energy_bound_check(model, ramp(), lam1, 16.0, m, eig=eig, samples=5).value for m in (0, 1, 2)]
    assert values[0] <= values[1] <= values[2]
    assert values[2] > 1
