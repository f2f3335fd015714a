"""Configurations shared by the acceptance suite (cached per session)."""
from functools import lru_cache

import numpy as np

from kubolab.adiabatic import driving_profile
from kubolab.kubo import bulk_gap, bulk_window, kubo_streda_trace
from kubolab.model import LatticeSpec, PotentialSpec, build_hofstadter, make_switch
from kubolab.spectral import diagonalize, fermi_projector, largest_spacing_energy

ASYMMETRIC_BUMPS = (((1.3, 2.1), 1.5, 1.0), ((-2.2, -0.7), 2.0, -0.6), ((0.4, -2.9), 1.2, 0.8))
TAUS = (32.0, 64.0, 128.0, 256.0, 512.0)


def first_gap_fermi_energy(eig, p=1, q=3, r=1):
    lo, hi = bulk_gap(p, q, r)
    third = (hi - lo) / 3
    return largest_spacing_energy(eig, lo + third, hi - third)


class Setup:
    def __init__(self, model, E_F, m=1.0, order=3, sharp=False, window_half_width=None):
        self.model = model
        self.eig = diagonalize(model)
        self.P = fermi_projector(self.eig, E_F)
        self.lam1 = make_switch("x1", m, order, model, sharp)
        self.lam2 = make_switch("x2", m, order, model, sharp)
        self.window = bulk_window(model, window_half_width)

    @property
    def conductance(self):
        return kubo_streda_trace(self.P, self.lam1, self.lam2, self.window)


@lru_cache(maxsize=None)
def open_lattice(L):
    """Flux 1/3 on an open L x L lattice, Fermi level in the first gap."""
    model = build_hofstadter(LatticeSpec(L, 1, 3, "open"))
    eig = diagonalize(model)
    return Setup(model, first_gap_fermi_energy(eig))


@lru_cache(maxsize=None)
def driven_torus():
    """Flux 1/8 torus L=24 with an asymmetric bump potential at coupling 0.4."""
    pot = PotentialSpec("gaussian_bumps", ASYMMETRIC_BUMPS, 1.0)
    model = build_hofstadter(LatticeSpec(24, 1, 8, "torus"), pot, 0.4)
    eig = diagonalize(model)
    lo, hi = bulk_gap(1, 8, 1)
    # the first gap of the perturbed torus: largest spacing above the lowest band
    E_F = largest_spacing_energy(eig, lo - 0.4, hi + 0.4)
    return Setup(model, E_F)


@lru_cache(maxsize=None)
def identity_torus():
    """Flux 1/6 torus L=36, clean, Fermi level in the first gap."""
    model = build_hofstadter(LatticeSpec(36, 1, 6, "torus"))
    lo, hi = bulk_gap(1, 6, 1)
    return Setup(model, 0.5 * (lo + hi), window_half_width=9.0)


def ramp(k=4):
    return driving_profile("ramp", k)
