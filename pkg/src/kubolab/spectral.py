"""Dense eigendecomposition, certified Fermi projectors and the exact resolvent sandwich."""
import logging
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

log = logging.getLogger(__name__)

CACHE_ENV = "KUBOLAB_CACHE_DIR"


class NoGap(RuntimeError):
    """The Fermi energy is not separated from the spectrum by the required margin."""


class SpectralError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EigenSystem:
    energies: np.ndarray
    vectors: np.ndarray
    residual: float

    @property
    def norm(self):
        return float(np.abs(self.energies).max())

    def save(self, path):
        np.savez(path, energies=self.energies, vectors=self.vectors, residual=self.residual)

    @classmethod
    def load(cls, path):
        with np.load(path) as z:
            return cls(z["energies"], z["vectors"], float(z["residual"]))


def _canonical_block(Vb):
    """Basis of span(Vb) that depends only on the subspace.

    Pivot rows are picked greedily in basis order, the block is brought to
    identity on them, then orthonormalized with a positive-diagonal QR.
    """
    d = Vb.shape[1]
    piv, Q = [], np.zeros((0, d), complex)
    for k in range(Vb.shape[0]):
        r = Vb[k] - (Vb[k] @ Q.conj().T) @ Q
        nr = np.linalg.norm(r)
        if nr > 1e-6:
            piv.append(k)
            Q = np.vstack([Q, r / nr])
            if len(piv) == d:
                break
    W = Vb @ np.linalg.inv(Vb[piv])
    q, R = np.linalg.qr(W)
    return q * (np.sign(np.diag(R).real)[None, :])


def _cache_dir(cache_dir):
    if cache_dir is None:
        cache_dir = os.environ.get(CACHE_ENV)
    return cache_dir or None


def diagonalize(model, degeneracy_tol=1e-9, cache_dir=None):
    """Full spectral decomposition with a reproducible basis in degenerate blocks.

    ``model`` is a MagneticModel or a Hermitian array. With a cache directory
    (argument or the KUBOLAB_CACHE_DIR environment variable) results are keyed
    by the model's content hash.
    """
    H = model if isinstance(model, np.ndarray) else model.hamiltonian
    H = np.asarray(H, dtype=complex)
    cache_dir = _cache_dir(cache_dir)
    path = None
    if cache_dir is not None and not isinstance(model, np.ndarray):
        os.makedirs(cache_dir, exist_ok=True)
        path = os.path.join(cache_dir, f"eig-{model.content_hash}.npz")
        if os.path.exists(path):
            return EigenSystem.load(path)

    E, V = sla.eigh(H, driver="evd")
    scale = max(np.abs(E).max(), 1e-300)
    start = 0
    for k in range(1, len(E) + 1):
        if k == len(E) or E[k] - E[k - 1] > degeneracy_tol * scale:
            if k - start > 1:
                V[:, start:k] = _canonical_block(V[:, start:k])
            start = k
    for k in range(len(E)):
        # fix the global phase of nondegenerate vectors too
        j = np.argmax(np.abs(V[:, k]) > 1e-3 * np.abs(V[:, k]).max())
        ph = V[j, k] / abs(V[j, k])
        V[:, k] /= ph
    resid = float(np.linalg.norm(H @ V - V * E[None, :], axis=0).max())
    if resid > 1e-10 * scale:
        raise SpectralError(f"eigen-residual {resid:.3g} exceeds 1e-10 |H|")
    unit = float(np.abs(V.conj().T @ V - np.eye(len(E))).max())
    if unit > 1e-10:
        raise SpectralError(f"eigenvectors unitary only to {unit:.3g}")
    eig = EigenSystem(E, V, resid)
    if path is not None:
        eig.save(path)
    return eig


@dataclass(frozen=True)
class GapInfo:
    band_index: int
    gap_interval: tuple
    fermi_margin: float


@dataclass(frozen=True, eq=False)
class FermiProjector:
    matrix: np.ndarray
    fermi_energy: float
    occupied_count: int
    gap_lower: float
    gap_upper: float
    gap_width: float
    eig: EigenSystem

    @property
    def occupied(self):
        return self.eig.energies < self.fermi_energy

    @property
    def occupied_vectors(self):
        return self.eig.vectors[:, :self.occupied_count]

    @property
    def fermi_margin(self):
        return float(min(self.fermi_energy - self.gap_lower, self.gap_upper - self.fermi_energy))

    def gap_info(self, cluster_gap=0.1):
        """Band index = number of spectral clusters below E_F.

        A spacing separates clusters when it exceeds ``cluster_gap`` and half
        the width of the gap that holds E_F.
        """
        E = self.eig.energies[:self.occupied_count]
        cut = max(cluster_gap, 0.5 * self.gap_width) if np.isfinite(self.gap_width) else cluster_gap
        j = int(np.count_nonzero(np.diff(E) > cut)) + (1 if len(E) else 0)
        return GapInfo(j, (self.gap_lower, self.gap_upper), self.fermi_margin)


def fermi_projector(eig: EigenSystem, E_F, delta_min=None):
    E = eig.energies
    dist = np.abs(E - E_F).min()
    if dist < 1e-8:
        raise NoGap(f"E_F = {E_F} sits on an eigenvalue")
    if delta_min is None:
        delta_min = 1e-3 * eig.norm
    if dist < delta_min:
        raise NoGap(f"Fermi margin {dist:.3g} below delta_min {delta_min:.3g}")
    n = int(np.count_nonzero(E < E_F))
    Vo = eig.vectors[:, :n]
    P = Vo @ Vo.conj().T
    lower = float(E[n - 1]) if n > 0 else -np.inf
    upper = float(E[n]) if n < len(E) else np.inf
    P.flags.writeable = False
    return FermiProjector(P, float(E_F), n, lower, upper, upper - lower, eig)


def largest_spacing_energy(eig: EigenSystem, lo, hi):
    """Midpoint of the widest eigenvalue spacing inside (lo, hi).

    Used to place E_F in a bulk gap that is crossed by edge states.
    """
    E = eig.energies
    inside = E[(E > lo) & (E < hi)]
    pts = np.concatenate([[lo], inside, [hi]])
    k = int(np.argmax(np.diff(pts)))
    return float(0.5 * (pts[k] + pts[k + 1]))


def riesz_sandwich(eig: EigenSystem, E_F, C):
    """(2 pi i)^-1 times the counter-clockwise contour integral of R_z C R_z around the occupied spectrum.

    In the eigenbasis this is C_mn (f_m - f_n) / (E_m - E_n), where f is the occupation.
    """
    E, V = eig.energies, eig.vectors
    if np.abs(E - E_F).min() < 1e-8:
        raise NoGap(f"E_F = {E_F} sits on an eigenvalue")
    n = int(np.count_nonzero(E < E_F))
    Vo, Vu = V[:, :n], V[:, n:]
    Eo, Eu = E[:n], E[n:]
    denom = Eo[:, None] - Eu[None, :]
    A = (Vo.conj().T @ C @ Vu) / denom          # occupied-unoccupied block
    Bk = (Vu.conj().T @ C @ Vo) / denom.T        # unoccupied-occupied block
    return Vo @ A @ Vu.conj().T + Vu @ Bk @ Vo.conj().T


def spectral_function(eig: EigenSystem, f):
    E, V = eig.energies, eig.vectors
    return (V * np.asarray(f(E))[None, :]) @ V.conj().T
