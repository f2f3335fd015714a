"""Truncated symmetric-gauge Landau basis for H = (p1 - B x2/2)^2 + (p2 + B x1/2)^2.

States |n, m> have energy (2n+1)B. With z = x1 + i x2 and rho = B r^2 / 2,

    m >= n :  psi ~ conj(z)^(m-n) L_n^(m-n)(rho) exp(-rho/2)
    m <  n :  psi ~ z^(n-m)       L_m^(n-m)(rho) exp(-rho/2)

Matrix elements of multiplication operators use tensor Gauss-Hermite
quadrature in the scaled variables u = x * sqrt(B/2).
"""
import math

import numpy as np
from scipy.special import eval_genlaguerre, gammaln, roots_hermite


class QuadratureError(RuntimeError):
    pass


def wavefunction(n, m, B, x1, x2, with_gaussian=True):
    """Normalized |n, m> evaluated at points (x1, x2)."""
    x1 = np.asarray(x1, float)
    x2 = np.asarray(x2, float)
    d = abs(m - n)
    lo, hi = min(n, m), max(n, m)
    rho = 0.5 * B * (x1 ** 2 + x2 ** 2)
    lognorm = 0.5 * (math.log(B / (2 * math.pi)) + d * math.log(B / 2) + gammaln(lo + 1) - gammaln(hi + 1))
    w = (x1 - 1j * x2) if m >= n else (x1 + 1j * x2)
    out = w ** d * eval_genlaguerre(lo, d, rho) * math.exp(lognorm)
    if with_gaussian:
        out = out * np.exp(-rho / 2)
    return out


class LandauBasis:
    def __init__(self, B, n_levels, m_max):
        if B <= 0:
            raise ValueError("B must be positive")
        self.B = float(B)
        self.n_levels = int(n_levels)
        self.m_max = int(m_max)
        self.states = [(n, m) for n in range(self.n_levels) for m in range(self.m_max + 1)]
        self.energies = np.array([(2 * n + 1) * self.B for n, _ in self.states])
        self.number = np.array([n for n, _ in self.states])
        self._cache = {}

    @property
    def dim(self):
        return len(self.states)

    @property
    def radius(self):
        # classical radius of the outermost orbit
        return math.sqrt(2 * (self.m_max + self.n_levels) / self.B)

    def _sampled(self, order):
        """Basis functions times sqrt of the quadrature weights on an order x order grid."""
        if order not in self._cache:
            u, w = roots_hermite(order)
            s = math.sqrt(2 / self.B)
            U1, U2 = np.meshgrid(u, u, indexing="ij")
            W = np.outer(w, w).ravel() * s * s
            x1, x2 = (s * U1).ravel(), (s * U2).ravel()
            # exp(-rho/2) per function; the weights already carry exp(-u1^2 - u2^2) = exp(-rho)
            A = np.array([wavefunction(n, m, self.B, x1, x2, with_gaussian=False)
                          for n, m in self.states])
            A = A * np.sqrt(W)[None, :]
            self._cache[order] = (x1, x2, A)
        return self._cache[order]

    def project(self, f, tol=1e-8, order=None, max_order=512):
        """<a| f(x1, x2) |b> with order doubling until the relative change is below ``tol``."""
        order = order or max(32, 2 * (self.m_max + self.n_levels) + 8)
        prev = None
        while order <= max_order:
            x1, x2, A = self._sampled(order)
            M = (A.conj() * f(x1, x2)[None, :]) @ A.T
            M = 0.5 * (M + M.conj().T)
            if prev is not None:
                scale = max(np.abs(M).max(), 1e-300)
                if np.abs(M - prev).max() <= tol * scale:
                    return M
            prev = M
            order *= 2
        raise QuadratureError(f"matrix elements did not converge to {tol} by order {max_order}")

    def overlap(self, order=None):
        return self.project(lambda u, v: np.ones_like(u), order=order)

    def sup_grid(self, n=201):
        """Points covering the disk where the basis lives, for sup-norm estimates."""
        R = self.radius + 4 / math.sqrt(self.B)
        g = np.linspace(-R, R, n)
        X1, X2 = np.meshgrid(g, g, indexing="ij")
        return X1.ravel(), X2.ravel()
