"""Kubo-Streda conductance trace, Chern-number oracle and lambda-stability sweeps.

On a finite sample the full trace Tr P[[P,L1],[P,L2]]P vanishes identically
(it equals Tr [PL1P, PL2P]). The conductance is read off from a trace
restricted to a bulk window around the crossing of the two switches, which
is where the operator is concentrated.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import MagneticModel, SwitchFunction, commutator_with, step_profile
from .spectral import FermiProjector, NoGap, diagonalize, fermi_projector

log = logging.getLogger(__name__)

CANONICAL_CONSTANTS = {
    "i/2pi": 1j / (2 * np.pi), "-i/2pi": -1j / (2 * np.pi),
    "2pi i": 2j * np.pi, "-2pi i": -2j * np.pi,
    "i": 1j, "-i": -1j,
}


class KuboError(RuntimeError):
    pass


class EmptyGrid(RuntimeError):
    pass


class ChernError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class BulkWindow:
    """Symmetric restriction W X W; ``weights`` is a diagonal or a dense Hermitian matrix."""
    weights: np.ndarray
    half_width: float

    def apply(self, X):
        w = self.weights
        if w.ndim == 1:
            return w[:, None] * X * w[None, :]
        return w @ X @ w

    def trace(self, X):
        w = self.weights
        if w.ndim == 1:
            return complex(np.sum(w * w * np.diagonal(X)))
        return complex(np.sum((w @ w).T * X))


def bulk_window(model: MagneticModel, half_width=None):
    """Indicator of the square |x1|, |x2| < R (R defaults to a quarter of the extent)."""
    R = half_width if half_width is not None else model.extent("x1") / 4
    if model.diagonal_coordinates:
        w = ((np.abs(model.x1_op) < R) & (np.abs(model.x2_op) < R)).astype(float)
    else:
        edge = step_profile(2.0, 3)

        def box(u, v):
            return edge(R - np.abs(u)) * edge(R - np.abs(v))
        w = model.basis.project(box, tol=1e-6)
    return BulkWindow(w, float(R))


@dataclass(frozen=True)
class ConductanceResult:
    raw_trace: complex
    cyclic_trace: complex
    full_trace: complex
    normalized: float
    imag_purity: float
    convention_constant: Optional[complex]


def _apply(sw, X):
    if sw.is_diagonal:
        return sw.as_diagonal[:, None] * X
    return sw.as_diagonal @ X


def kubo_operator(P, lam1, lam2):
    """P [[P, L1], [P, L2]] P as a dense matrix."""
    A1 = commutator_with(P, lam1)
    A2 = commutator_with(P, lam2)
    return P @ (A1 @ A2 - A2 @ A1) @ P


def kubo_streda_trace(P: FermiProjector, lam1: SwitchFunction, lam2: SwitchFunction,
                      window: BulkWindow = None, convention=None, model=None, tol=1e-9):
    if not isinstance(P, FermiProjector):
        raise KuboError("needs a gap-certified FermiProjector")
    if lam1.direction != "x1" or lam2.direction != "x2":
        raise KuboError("expects an x1 switch and an x2 switch")
    if window is None:
        if model is None:
            raise KuboError("pass a bulk window or the model to build one")
        window = bulk_window(model)
    Pm = P.matrix
    K = kubo_operator(Pm, lam1, lam2)
    raw = window.trace(K)
    full = complex(np.trace(K))

    Vo = P.occupied_vectors
    a1 = Vo.conj().T @ _apply(lam1, Vo)
    a2 = Vo.conj().T @ _apply(lam2, Vo)
    reduced = Vo @ (a1 @ a2 - a2 @ a1) @ Vo.conj().T
    if not (lam1.is_diagonal and lam2.is_diagonal):
        # truncated switches need not commute: add P [L2, L1] P
        L1, L2 = lam1.matrix, lam2.matrix
        reduced = reduced + Pm @ (L2 @ L1 - L1 @ L2) @ Pm
    cyc = window.trace(reduced)
    if abs(raw - cyc) > tol * max(1.0, abs(raw)):
        raise KuboError(f"cyclic identity broken: {raw} vs {cyc}")
    if abs(raw.real) > tol * max(1.0, abs(raw)):
        raise KuboError(f"windowed trace is not imaginary: {raw}")
    purity = abs(raw.real) / abs(raw) if raw != 0 else 0.0
    norm = float((raw / convention).real) if convention is not None else math.nan
    return ConductanceResult(raw, cyc, full, norm, purity, convention)


# --- Chern number oracle on the magnetic Brillouin zone ---------------------

def bloch_hamiltonian(p, q, k1, k2, hopping=1.0):
    """q x q Bloch matrices for the magnetic cell (q sites along x2), batched over k.

    k2 is the Bloch phase across one magnetic cell, so both momenta run over [0, 2 pi).
    """
    k1 = np.asarray(k1, float)
    k2 = np.asarray(k2, float)
    a = p / q
    shape = np.broadcast(k1, k2).shape
    H = np.zeros(shape + (q, q), complex)
    j = np.arange(q)
    diag = -2 * hopping * np.cos(k1[..., None] + 2 * np.pi * a * j)
    H[..., j, j] = diag
    for r in range(q - 1):
        H[..., r, r + 1] += -hopping
        H[..., r + 1, r] += -hopping
    wrap = -hopping * np.exp(1j * k2)
    H[..., q - 1, 0] += wrap
    H[..., 0, q - 1] += np.conj(wrap)
    return H


@dataclass(frozen=True)
class ChernResult:
    value: int
    residue: float
    grid: int
    max_plaquette_angle: float
    min_gap: float


def _band_slice(band_range, q):
    if isinstance(band_range, (int, np.integer)):
        return 0, int(band_range)
    lo, hi = band_range
    if not 0 <= lo < hi <= q:
        raise ValueError(f"band range {band_range} outside 0..{q}")
    return int(lo), int(hi)


def chern_fhs(spec, band_range, grid=24, max_grid=192):
    """Lattice field-strength Chern number of a group of magnetic bands.

    ``band_range`` is either the number of lowest bands or a (start, stop) pair.
    The grid is doubled while any plaquette angle exceeds pi/2.
    """
    if getattr(spec, "boundary", "torus") != "torus":
        raise ChernError("the Chern oracle needs the periodic companion lattice")
    p, q, t = spec.p, spec.q, getattr(spec, "hopping", 1.0)
    lo, hi = _band_slice(band_range, q)
    N = grid
    while True:
        k = 2 * np.pi * np.arange(N) / N
        K1, K2 = np.meshgrid(k, k, indexing="ij")
        E, V = np.linalg.eigh(bloch_hamiltonian(p, q, K1, K2, t))
        gaps = []
        if lo > 0:
            gaps.append((E[..., lo] - E[..., lo - 1]).min())
        if hi < q:
            gaps.append((E[..., hi] - E[..., hi - 1]).min())
        min_gap = float(min(gaps)) if gaps else math.inf
        if min_gap < 1e-9:
            raise ChernError(f"band group {lo}:{hi} touches its neighbours (gap {min_gap:.2g})")
        psi = V[..., lo:hi]

        def link(shift_axis):
            nxt = np.roll(psi, -1, axis=shift_axis)
            d = np.linalg.det(np.swapaxes(psi.conj(), -1, -2) @ nxt)
            return d / np.abs(d)

        U1, U2 = link(0), link(1)
        F = np.angle(U1 * np.roll(U2, -1, axis=0) / np.roll(U1, -1, axis=1) / U2)
        total = F.sum() / (2 * np.pi)
        value = int(round(total))
        res = abs(total - value)
        maxF = float(np.abs(F).max())
        if (maxF <= np.pi / 2 and res <= 0.1) or 2 * N > max_grid:
            break
        N *= 2
    if res > 0.1 or maxF > np.pi / 2:
        raise ChernError(f"FHS not resolved at grid {N}: residue {res:.3g}, max angle {maxF:.3g}")
    return ChernResult(value, float(res), N, maxF, min_gap)


def tknn_hall(p, q, r):
    """Hall integer of the r-th gap from r = q s + p t with |t| <= q/2."""
    if not 0 < r < q:
        raise ValueError("gap index must satisfy 0 < r < q")
    if p == 0:
        return 0
    t = (r * pow(p, -1, q)) % q
    if t > q / 2:
        t -= q
    if 2 * abs(t) == q:
        raise ValueError("gap closes: Diophantine solution is not unique")
    return int(t)


def bloch_bands(p, q, hopping=1.0, nk=96):
    k = 2 * np.pi * np.arange(nk) / nk
    K1, K2 = np.meshgrid(k, k, indexing="ij")
    return np.linalg.eigvalsh(bloch_hamiltonian(p, q, K1, K2, hopping))


def bulk_gap(p, q, r, hopping=1.0, nk=96):
    """(top of band r, bottom of band r+1) of the clean infinite lattice, bands counted from 1."""
    E = bloch_bands(p, q, hopping, nk)
    return float(E[..., r - 1].max()), float(E[..., r].min())


# --- convention calibration -------------------------------------------------

@dataclass(frozen=True)
class ConventionCalibration:
    constant: complex
    oracle: int
    nearest_label: str
    nearest_value: complex
    relative_deviation: float


_REGISTRY = {}


def model_family(model: MagneticModel):
    if model.backend == "hofstadter":
        s = model.lattice
        return ("hofstadter", s.p, s.q, s.hopping)
    return ("landau_basis", model.field_B)


def calibrate_convention(reference, oracle, family=None):
    """constant = raw / oracle, compared with the usual candidates; stored under ``family``."""
    if oracle == 0:
        raise KuboError("cannot calibrate against a vanishing oracle")
    raw = reference.raw_trace if isinstance(reference, ConductanceResult) else complex(reference)
    c = raw / oracle
    label = min(CANONICAL_CONSTANTS, key=lambda k: abs(c - CANONICAL_CONSTANTS[k]) / abs(CANONICAL_CONSTANTS[k]))
    ref = CANONICAL_CONSTANTS[label]
    cal = ConventionCalibration(c, int(oracle), label, ref, float(abs(c - ref) / abs(ref)))
    if family is not None:
        _REGISTRY[family] = cal
    return cal


def lookup_convention(family):
    return _REGISTRY.get(family)


# --- lambda stability ---------------------------------------------------------

@dataclass(frozen=True)
class StabilityReport:
    lambda_grid: np.ndarray
    K_values: np.ndarray
    raw_traces: np.ndarray
    gap_margins: np.ndarray
    fermi_energies: np.ndarray
    max_deviation: float
    dropped: tuple = ()


def lambda_stability_sweep(model_family, lambda_grid, E_F, switches, convention,
                           window_half_width=None, threads=1, delta_min=None):
    """Normalized conductance over a grid of couplings.

    ``model_family(lam)`` builds the model, ``switches(model)`` returns (L1, L2).
    ``E_F`` is a number or a callable of the eigensystem. Points whose gap
    cannot be certified are dropped and reported.
    """
    def one(lam):
        try:
            model = model_family(lam)
            eig = diagonalize(model)
            ef = E_F(eig) if callable(E_F) else E_F
            P = fermi_projector(eig, ef, delta_min)
        except NoGap as exc:
            log.warning("lambda=%g dropped: %s", lam, exc)
            return lam, None
        l1, l2 = switches(model)
        res = kubo_streda_trace(P, l1, l2, bulk_window(model, window_half_width), convention)
        return lam, (res, P.fermi_margin, P.fermi_energy)

    grid = [float(x) for x in lambda_grid]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            out = list(ex.map(one, grid))
    else:
        out = [one(x) for x in grid]
    out.sort(key=lambda r: r[0])
    kept = [(lam, r) for lam, r in out if r is not None]
    dropped = tuple(lam for lam, r in out if r is None)
    if not kept:
        raise EmptyGrid("no coupling in the grid retains a certified gap")
    lams = np.array([lam for lam, _ in kept])
    K = np.array([r[0].normalized for _, r in kept])
    raw = np.array([r[0].raw_trace for _, r in kept])
    margins = np.array([r[1] for _, r in kept])
    efs = np.array([r[2] for _, r in kept])
    return StabilityReport(lams, K, raw, margins, efs, float(K.max() - K.min()), dropped)
