"""Adiabatic expansion P_tau(s) ~ sum_j tau^-j B_j(s).

B_0 = P(s) and, for j >= 1,

    B_j = kappa * R_s([P, dB_{j-1}/ds]) + S_j - 2 P S_j P,   S_j = sum_{m=1}^{j-1} B_m B_{j-m},

where R_s is the resolvent sandwich of ``spectral.riesz_sandwich`` taken
with H(s). Derivatives of B_j (j >= 1) are Richardson-extrapolated central
differences; dP/ds = i g [L1, P] is used in closed form.
"""
import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adiabatic import GaugeFrame, evolve, step_rule
from .fitting import loglog_fit
from .kubo import bulk_window
from .model import commutator_with
from .spectral import riesz_sandwich

log = logging.getLogger(__name__)


class FDUnstable(RuntimeError):
    pass


def opnorm(X):
    """Largest singular value; Hermitian and anti-Hermitian inputs go through eigvalsh."""
    X = np.asarray(X)
    if X.size == 0:
        return 0.0
    scale = np.abs(X).max()
    if scale == 0:
        return 0.0
    if np.abs(X - X.conj().T).max() <= 1e-13 * scale:
        return float(np.abs(np.linalg.eigvalsh(X)).max())
    if np.abs(X + X.conj().T).max() <= 1e-13 * scale:
        return float(np.abs(np.linalg.eigvalsh(1j * X)).max())
    return float(np.linalg.svd(X, compute_uv=False)[0])


KAPPA_CANDIDATES = {
    "1": 1.0, "-1": -1.0, "i": 1j, "-i": -1j,
    "1/2pi": 1 / (2 * np.pi), "-1/2pi": -1 / (2 * np.pi),
    "i/2pi": 1j / (2 * np.pi), "-i/2pi": -1j / (2 * np.pi),
    "2pi": 2 * np.pi, "-2pi": -2 * np.pi, "2pi i": 2j * np.pi, "-2pi i": -2j * np.pi,
}


@dataclass(frozen=True)
class KappaCalibration:
    kappa: complex
    label: str
    residual: float
    s: float
    table: dict


_KAPPA_CACHE = {}


def _pdot(frame, P_lambda, lam1, profile, s):
    Ps = frame.conj(P_lambda, profile.phi(s))
    return Ps, -1j * float(profile.g(s)) * commutator_with(Ps, lam1)


def calibrate_kappa(model, P0, profile, lam1, s=None, candidates=None):
    """Pick the recursion constant that makes i dP/ds = [H(s), B_1(s)] hold.

    The residual is linear in kappa, so one sandwich serves every candidate.
    """
    candidates = candidates or KAPPA_CANDIDATES
    if s is None:
        s = profile.onset + 0.5 * profile.width
    if profile.g(s) == 0:
        raise ValueError("calibration point needs g(s) != 0")
    key = (model.content_hash, round(P0.fermi_energy, 12), profile.kind, profile.k, float(s), tuple(candidates))
    if key in _KAPPA_CACHE:
        return _KAPPA_CACHE[key]
    frame = GaugeFrame(lam1)
    ph = profile.phi(s)
    Ps, Pdot = _pdot(frame, P0.matrix, lam1, profile, s)
    Hs = frame.conj(model.hamiltonian, ph)
    X = Ps @ Pdot - Pdot @ Ps
    R = frame.conj(riesz_sandwich(P0.eig, P0.fermi_energy, frame.conj(X, -ph)), ph)
    M = Hs @ R - R @ Hs
    table = {lab: opnorm(1j * Pdot - c * M) for lab, c in candidates.items()}
    best = min(table, key=table.get)
    cal = KappaCalibration(candidates[best], best, table[best], float(s), table)
    _KAPPA_CACHE[key] = cal
    return cal


@dataclass(frozen=True, eq=False)
class ExpansionTerms:
    s: float
    order: int
    terms: list
    S_terms: list
    residual_ode: np.ndarray
    residual_alg: np.ndarray
    fd_step: float
    kappa: complex
    derivatives: list = field(repr=False, default_factory=list)
    pdot_exact: np.ndarray = field(repr=False, default=None)
    residual_ode_exact0: float = float("nan")
    fd_ratios: list = field(default_factory=list)
    switch: object = field(repr=False, default=None)

    @property
    def norms(self):
        return [opnorm(B) for B in self.terms]


def b_terms(model, P0, profile, lam1, s, k=3, h=1e-3, kappa=None, check_fd=True):
    """Expansion terms B_0..B_k at s, with hierarchy residuals."""
    if kappa is None:
        kappa = calibrate_kappa(model, P0, profile, lam1).kappa
    reach = max(1, 2 * (k - 1))
    if s - reach * h < 0 or s + reach * h > 1:
        raise ValueError(f"finite-difference stencil s +- {reach}h leaves [0, 1]")
    frame = GaugeFrame(lam1)
    eig, E_F, Pl = P0.eig, P0.fermi_energy, P0.matrix
    memo = {}
    fd_ratios = []

    def phi(n):
        return profile.phi(s + n * h)

    def B(j, n):
        if (j, n) in memo:
            return memo[(j, n)]
        if j == 0:
            out = frame.conj(Pl, phi(n))
        else:
            Pn = B(0, n)
            D = _pdot(frame, Pl, lam1, profile, s + n * h)[1] if j == 1 else rich(j - 1, n)
            X = Pn @ D - D @ Pn
            out = kappa * frame.conj(riesz_sandwich(eig, E_F, frame.conj(X, -phi(n))), phi(n))
            if j >= 2:
                S = sum(B(m, n) @ B(j - m, n) for m in range(1, j))
                out = out + S - 2 * Pn @ S @ Pn
        memo[(j, n)] = out
        return out

    def rich(j, n):
        a1, b1 = B(j, n + 1), B(j, n - 1)
        a2, b2 = B(j, n + 2), B(j, n - 2)
        R = (8 * (a1 - b1) - (a2 - b2)) / (12 * h)
        if check_fd:
            # the error of Dh is h^2/6 f''' to leading order; the half-step difference
            # estimates it independently, Dh - D(h/2) = h^2/8 f''' + O(h^4)
            Dh = (a1 - b1) / (2 * h)
            Dhalf = (B(j, n + 0.5) - B(j, n - 0.5)) / h
            expected = 4 / 3 * np.linalg.norm(Dh - Dhalf)
            floor = 1e-11 * max(np.linalg.norm(a1), 1.0) / h
            gap = np.linalg.norm(Dh - R)
            fd_ratios.append(gap / (expected + floor))
            if gap > 10 * expected + floor:
                raise FDUnstable(f"Richardson and central differences of B_{j} disagree "
                                 f"({gap:.3g} vs expected {expected:.3g})")
        return R

    terms = [B(j, 0) for j in range(k + 1)]
    S_terms = [np.zeros_like(terms[0])] + [
        sum((terms[m] @ terms[j - m] for m in range(1, j)), np.zeros_like(terms[0])) for j in range(1, k + 1)]
    # plain central derivatives for the ODE residual (so the FD error is O(h^2))
    derivs = [(B(j, 1) - B(j, -1)) / (2 * h) for j in range(k)]
    Ps, pdot = _pdot(frame, Pl, lam1, profile, s)
    Hs = frame.conj(model.hamiltonian, profile.phi(s))
    ode = np.array([opnorm(1j * derivs[j] - (Hs @ terms[j + 1] - terms[j + 1] @ Hs)) for j in range(k)])
    alg = np.array([opnorm(terms[j] - sum(terms[m] @ terms[j - m] for m in range(j + 1))) for j in range(k + 1)])
    exact0 = opnorm(1j * pdot - (Hs @ terms[1] - terms[1] @ Hs)) if k >= 1 else float("nan")
    return ExpansionTerms(float(s), k, terms, S_terms, ode, alg, h, kappa, derivs, pdot, exact0, fd_ratios, lam1)


def hierarchy_residuals(terms: ExpansionTerms, model, profile, lam1):
    """(residual_ode, residual_alg) recomputed from the stored terms."""
    frame = GaugeFrame(lam1)
    Hs = frame.conj(model.hamiltonian, profile.phi(terms.s))
    B = terms.terms
    ode = np.array([opnorm(1j * terms.derivatives[j] - (Hs @ B[j + 1] - B[j + 1] @ Hs))
                    for j in range(terms.order)])
    alg = np.array([opnorm(B[j] - sum(B[m] @ B[j - m] for m in range(j + 1)))
                    for j in range(terms.order + 1)])
    return ode, alg


# --- exact construction in the static frame ----------------------------------

def _gpoly_deriv(poly):
    out = defaultdict(lambda: 0)
    for key, M in poly.items():
        for i, e in enumerate(key):
            if e:
                new = list(key) + [0]
                new[i] -= 1
                new[i + 1] += 1
                nk = tuple(new)
                while len(nk) > 1 and nk[-1] == 0:
                    nk = nk[:-1]
                out[nk] = out[nk] + e * M
    return dict(out)


def _gpoly_mul(p1, p2):
    out = defaultdict(lambda: 0)
    for k1, M1 in p1.items():
        for k2, M2 in p2.items():
            n = max(len(k1), len(k2))
            key = tuple((k1[i] if i < len(k1) else 0) + (k2[i] if i < len(k2) else 0) for i in range(n))
            out[key] = out[key] + M1 @ M2
    return dict(out)


def _gpoly_add(p1, p2, c=1.0):
    out = dict(p1)
    for k2, M in p2.items():
        out[k2] = out.get(k2, 0) + c * M
    return out


def _gpoly_map(poly, f):
    return {k: f(M) for k, M in poly.items()}


def _gpoly_eval(poly, profile, s, dim):
    out = np.zeros((dim, dim), complex)
    for key, M in poly.items():
        c = 1.0
        for i, e in enumerate(key):
            if e:
                c *= float(profile.derivative(s, i)) ** e
        out = out + c * M
    return out


def static_frame_terms(model, P0, profile, lam1, s, k=2, kappa=1j):
    """B_j(s) without finite differences.

    In the frame b_j = G^dagger B_j G everything is built from the fixed H and P;
    d/ds acts as the covariant derivative d/ds + i g [L1, .], so each b_j is a
    polynomial in g, g', g'', ... with constant matrix coefficients.
    """
    Pl = P0.matrix
    eig, E_F = P0.eig, P0.fermi_energy

    def cov(poly):
        d = _gpoly_deriv(poly)
        rot = {}
        for key, M in poly.items():
            nk = (key[0] + 1,) + tuple(key[1:]) if key else (1,)
            rot[nk] = -1j * commutator_with(M, lam1)   # i [L1, M]
        return _gpoly_add(d, rot)

    b = [{(): Pl}]
    for j in range(1, k + 1):
        D = cov(b[j - 1])
        X = _gpoly_map(D, lambda M: Pl @ M - M @ Pl)
        new = _gpoly_map(X, lambda M: kappa * riesz_sandwich(eig, E_F, M))
        if j >= 2:
            S = {}
            for m in range(1, j):
                S = _gpoly_add(S, _gpoly_mul(b[m], b[j - m]))
            new = _gpoly_add(new, S)
            new = _gpoly_add(new, _gpoly_map(S, lambda M: Pl @ M @ Pl), -2.0)
        b.append(new)
    frame = GaugeFrame(lam1)
    ph = profile.phi(s)
    return [frame.conj(_gpoly_eval(p, profile, s, model.dim), ph) for p in b]


# --- comparison with the evolved state ----------------------------------------

@dataclass(frozen=True)
class RemainderReport:
    taus: np.ndarray
    s: float
    remainders: dict
    remainders_half: dict
    fits: dict
    relative_changes: dict
    certified: bool


def truncation_remainder(model, P0, profile, lam1, tau_list, s, k, terms=None, states=None,
                         method="yoshida4", certify=True, threads=1, window_policy="all",
                         state_kind="vectors"):
    """r(tau) = |P_tau(s) - sum_{j<=k} tau^-j B_j(s)| in operator norm, with log-log slopes.

    ``k`` may be an int or a sequence of orders. ``states`` optionally maps
    tau -> (occupied vectors, occupied vectors at half the step count); with
    ``state_kind="projectors"`` the entries are the matrices P_tau themselves.
    """
    from .adiabatic import IntegratorDominated

    orders = [k] if np.isscalar(k) else list(k)
    kmax = max(orders)
    if terms is None:
        terms = b_terms(model, P0, profile, lam1, s, k=max(kmax, 1))
    taus = sorted(float(t) for t in tau_list)
    hnorm = P0.eig.norm

    def run(tau, halve):
        n = step_rule(tau, hnorm)
        if halve:
            n //= 2
        tr = evolve(model, P0, profile, lam1, tau, n_steps=n, s_values=[s], uniform_samples=0,
                    method=method, step_factor=3.9 * hnorm if halve else None)
        return tr.at(s).vectors

    if states is None:
        work = [(t, False) for t in taus] + ([(t, True) for t in taus] if certify else [])
        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                vecs = list(ex.map(lambda a: run(*a), work))
        else:
            vecs = [run(*a) for a in work]
        got = dict(zip(work, vecs))
        states = {t: (got[(t, False)], got.get((t, True))) for t in taus}

    rem, rem_half, fits, changes = {}, {}, {}, {}
    for kk in orders:
        r, rh = [], []
        for t in taus:
            approx = sum(terms.terms[j] / t ** j for j in range(kk + 1))
            X, Xh = states[t]
            if state_kind == "vectors":
                X = X @ X.conj().T
                Xh = Xh @ Xh.conj().T if Xh is not None else None
            r.append(opnorm(X - approx))
            rh.append(opnorm(Xh - approx) if Xh is not None else np.nan)
        r, rh = np.array(r), np.array(rh)
        rem[kk], rem_half[kk] = r, rh
        if np.all(r > 0):
            changes[kk] = np.abs(rh - r) / r
            fits[kk] = loglog_fit(taus, r, window_policy)
        else:
            # an exact expansion leaves nothing to fit
            changes[kk] = np.zeros(len(taus)) if np.all(np.nan_to_num(rh) == 0) else np.full(len(taus), np.inf)
            fits[kk] = None
    ok = bool(certify and all(np.all(c < 0.2) for c in changes.values()))
    report = RemainderReport(np.array(taus), float(s), rem, rem_half, fits, changes, ok)
    if certify and not ok:
        raise IntegratorDominated("step halving moves remainders by more than 20%", report)
    return report


def kubo_from_b1(terms: ExpansionTerms, model, lam2, profile, s=None, window=None):
    """Tr W B_1(s) [H(s), L2] W."""
    if terms.order < 1:
        raise ValueError("needs B_1")
    if s is not None and abs(s - terms.s) > 1e-12:
        raise ValueError("terms were computed at a different s")
    window = window or bulk_window(model)
    Hs = GaugeFrame(terms.switch).conj(model.hamiltonian, profile.phi(terms.s))
    O = window.apply(commutator_with(Hs, lam2))
    return complex(np.sum(terms.terms[1] * O.T))
