"""Measurable surrogates for locality, propagation speed and energy bounds."""
import math
from dataclasses import dataclass

import numpy as np

from .adiabatic import GaugeFrame, _propagate, step_rule
from .fitting import loglog_fit
from .spectral import diagonalize, spectral_function


class BoundaryReflection(RuntimeError):
    pass


@dataclass(frozen=True)
class DecayProfile:
    axis: str
    distances: np.ndarray
    norms: np.ndarray
    fit_exponent: float

    def at(self, d):
        """Log-linear interpolation of the norms at distance ``d``."""
        order = np.argsort(self.distances)
        ds, ns = self.distances[order], np.maximum(self.norms[order], 1e-300)
        return float(np.exp(np.interp(d, ds, np.log(ns))))


def _require_lattice(model):
    if not model.diagonal_coordinates:
        raise ValueError("position-resolved diagnostics need a lattice model")


def kernel_decay(operator, model, axis, reference_region=None):
    """Norm of the row block of ``operator`` on each line x_axis = const.

    ``reference_region`` may give ``center`` (default 0), ``half_width`` of the
    region (default 0; use the switch half-width m) and ``transverse``, a
    half-width restricting the other coordinate to stay clear of edges.
    Distances are signed offsets from the region, zero inside it.
    ``fit_exponent`` is the exponential rate fitted over 0 < d <= extent/4.
    """
    _require_lattice(model)
    ref = reference_region or {}
    center = ref.get("center", 0.0)
    half = ref.get("half_width", 0.0)
    other = "x2" if axis == "x1" else "x1"
    x = model.coordinate(axis) - center
    mask = np.ones(model.dim, bool)
    if ref.get("transverse") is not None:
        mask &= np.abs(model.coordinate(other)) < ref["transverse"]
    xs = np.unique(x[mask])
    norms = []
    for v in xs:
        rows = np.flatnonzero(mask & (x == v))
        block = operator[rows]
        norms.append(float(np.linalg.svd(block, compute_uv=False)[0]) if np.any(block) else 0.0)
    norms = np.array(norms)
    ds = np.sign(xs) * np.maximum(np.abs(xs) - half, 0.0)
    keep = (ds > 0) & (ds <= model.extent(axis) / 4) & (norms > 1e-14 * max(norms.max(), 1e-300))
    if keep.sum() >= 2:
        rate = float(np.polyfit(ds[keep], np.log(norms[keep]), 1)[0])
    else:
        rate = math.nan
    return DecayProfile(axis, ds, norms, rate)


def projector_locality(P, model, mask=None, max_distance=None):
    """Largest |P_ij| per integer distance bin |x_i - x_j| (minimum image on the torus)."""
    _require_lattice(model)
    idx = np.flatnonzero(mask) if mask is not None else np.arange(model.dim)
    x1, x2 = model.x1_op[idx], model.x2_op[idx]
    d1 = x1[:, None] - x1[None, :]
    d2 = x2[:, None] - x2[None, :]
    if model.periodic:
        L = model.lattice.width
        d1 = (d1 + L / 2) % L - L / 2
        d2 = (d2 + L / 2) % L - L / 2
    dist = np.hypot(d1, d2)
    vals = np.abs(P[np.ix_(idx, idx)])
    bins = np.floor(dist + 0.5).astype(int)
    top = bins.max() if max_distance is None else int(max_distance)
    out = np.zeros(top + 1)
    np.maximum.at(out, np.minimum(bins, top + 1)[bins <= top], vals[bins <= top])
    return np.arange(top + 1, dtype=float), out


@dataclass(frozen=True)
class LightconeReport:
    times: np.ndarray
    spreads: np.ndarray
    growth_exponent: float
    fit_window: tuple
    reflected: bool


def band_wave_packet(model, eig, energy_cut, center=(0.0, 0.0)):
    """Site delta nearest ``center`` filtered to energies below ``energy_cut``."""
    _require_lattice(model)
    k = int(np.argmin((model.x1_op - center[0]) ** 2 + (model.x2_op - center[1]) ** 2))
    delta = np.zeros(model.dim, complex)
    delta[k] = 1.0
    psi = spectral_function(eig, lambda E: (E < energy_cut).astype(float)) @ delta
    return psi / np.linalg.norm(psi)


def _spread(psi, x):
    w = np.abs(psi) ** 2
    w = w / w.sum()
    mean = np.sum(w * x)
    return math.sqrt(max(np.sum(w * x * x) - mean * mean, 0.0))


def lightcone_check(model, profile, lam1, tau, initial, eig=None, samples=65, n_steps=None,
                    method="yoshida4", limit=None):
    """Spread of x2 in the evolved state against physical time t = tau s.

    The growth exponent is the log-log slope over t > 0, stopping before the
    spread reaches a third of the sample (BoundaryReflection if too few points remain).
    """
    _require_lattice(model)
    psi = np.asarray(initial, complex)
    if abs(np.linalg.norm(psi) - 1) > 1e-10:
        raise ValueError("initial state must be normalized")
    eig = eig or diagonalize(model)
    n_steps = n_steps or step_rule(tau, eig.norm)
    s = np.linspace(0, 1, samples)
    Xs = _propagate(eig, GaugeFrame(lam1), profile, tau, psi[:, None], list(s), n_steps, method)
    spreads = np.array([_spread(X[:, 0], model.x2_op) for X in Xs])
    times = tau * s
    limit = model.extent("x2") / 3 if limit is None else limit
    over = np.flatnonzero(spreads > limit)
    end = int(over[0]) if over.size else samples
    reflected = bool(over.size)
    lo = 1
    if end - lo < 3:
        raise BoundaryReflection(f"spread exceeds {limit:.3g} after {end} samples")
    growth = spreads[lo:end] - spreads[0]
    if np.all(np.abs(growth) <= 1e-12 * max(spreads[0], 1.0)):
        return LightconeReport(times, spreads, 0.0, (lo, end), reflected)
    fit = loglog_fit(times[lo:end], spreads[lo:end], "all")
    return LightconeReport(times, spreads, fit.slope, (lo, end), reflected)


@dataclass(frozen=True)
class EnergyBound:
    value: float
    m: int
    tau: float
    s_samples: np.ndarray
    table: np.ndarray


def energy_bound_check(model, profile, lam1, tau, m, eig=None, samples=9, n_steps=None, method="yoshida4"):
    """max over sampled (s, t) of |H(s)^(-m/2) U(s, t) H(t)^(m/2)| with H shifted to have spectrum >= 1.

    With W_k = V^dagger G(s_k)^dagger U(s_k, 0) the quantity is
    |E^(-m/2) W_k W_l^dagger E^(m/2)|, E the shifted eigenvalues.
    """
    eig = eig or diagonalize(model)
    E = eig.energies + (1.0 - eig.energies.min())
    n_steps = n_steps or step_rule(tau, eig.norm)
    s = np.linspace(0, 1, samples)
    frame = GaugeFrame(lam1)
    Us = _propagate(eig, frame, profile, tau, np.eye(model.dim, dtype=complex), list(s), n_steps, method)
    V = eig.vectors
    Ws = []
    for sk, U in zip(s, Us):
        GU = frame.apply(U, -profile.phi(sk))
        Ws.append(V.conj().T @ GU)
    left = E ** (-m / 2)
    right = E ** (m / 2)
    table = np.zeros((samples, samples))
    for a in range(samples):
        for b in range(samples):
            M = left[:, None] * (Ws[a] @ Ws[b].conj().T) * right[None, :]
            table[a, b] = np.linalg.svd(M, compute_uv=False)[0]
    return EnergyBound(float(table.max()), int(m), float(tau), s, table)
