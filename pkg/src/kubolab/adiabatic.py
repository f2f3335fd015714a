"""Adiabatic driving in the iso-spectral gauge frame.

The drive (1/tau) g(t/tau) L1 is removed by the gauge transformation
exp(i phi(s) L1) with phi' = g, which turns the problem into the family
H(s) = G(s) H G(s)^dagger. One step over [s, s + ds] is

    X <- G(s_mid) exp(-i tau ds H) G(s_mid)^dagger X,

a symmetric second-order method. The default composes it into a
fourth-order triple jump, which keeps every state exactly unitary.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Optional

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial.legendre import leggauss
from scipy.integrate import simpson
from scipy.special import comb

from .fitting import loglog_fit
from .kubo import BulkWindow, bulk_window
from .model import MagneticModel, SwitchFunction, commutator_with
from .spectral import FermiProjector, diagonalize

log = logging.getLogger(__name__)


class StepBudget(RuntimeError):
    pass


class IntegratorDominated(RuntimeError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


class ChargeQuadratureError(RuntimeError):
    pass


@lru_cache(maxsize=None)
def _gauss_legendre(n):
    return leggauss(n)


def _smoothstep_poly(order):
    k = order
    c = np.zeros(2 * k + 2)
    for j in range(k + 1):
        c[k + 1 + j] = comb(k + j, j) * comb(2 * k + 1, k - j) * (-1) ** j
    return Polynomial(c)


class DrivingProfile:
    """Schedule g(s) on [0, 1], polynomial on [onset, offset] and flat elsewhere.

    ramp:  g rises from 0 to ``amplitude`` (C^(k+1) smoothstep, so g' is C^k)
    pulse: g = amplitude * (4u(1-u))^(k+2), back to 0 at ``offset``
    off:   g = 0
    """

    def __init__(self, kind="ramp", k=4, onset=None, offset=None, amplitude=1.0):
        if k < 1:
            raise ValueError("smoothness k must be at least 1")
        if kind not in ("ramp", "pulse", "off"):
            raise ValueError(f"unknown profile kind {kind!r}")
        if onset is None:
            onset = 0.05 if kind == "ramp" else 0.1
        if offset is None:
            offset = 0.45 if kind == "ramp" else 0.9
        if not 0 < onset < offset < 1:
            raise ValueError("need 0 < onset < offset < 1 so that g' vanishes near 0 and 1")
        self.kind, self.k = kind, int(k)
        self.onset, self.offset = float(onset), float(offset)
        self.amplitude = float(amplitude)
        if kind == "ramp":
            poly = self.amplitude * _smoothstep_poly(self.k + 1)
        elif kind == "pulse":
            poly = self.amplitude * Polynomial([0, 4, -4]) ** (self.k + 2)
        else:
            poly = Polynomial([0.0])
        self.poly = poly
        self._primitive = poly.integ()
        self._nodes = _gauss_legendre(max(1, poly.degree() // 2 + 1))

    @property
    def width(self):
        return self.offset - self.onset

    def _u(self, s):
        return (np.asarray(s, float) - self.onset) / self.width

    def derivative(self, s, n=0):
        """n-th derivative of g."""
        u = self._u(s)
        p = self.poly.deriv(n) if n else self.poly
        inside = p(np.clip(u, 0, 1)) / self.width ** n
        if n == 0:
            end = self.poly(1.0)
            return np.where(u <= 0, 0.0, np.where(u >= 1, end, inside))
        return np.where((u <= 0) | (u >= 1), 0.0, inside)

    def g(self, s):
        return self.derivative(s, 0)

    def g_dot(self, s):
        return self.derivative(s, 1)

    def phi(self, s):
        """Primitive of g from 0, by Gauss-Legendre quadrature (exact for the polynomial piece)."""
        s_arr = np.atleast_1d(np.asarray(s, float))
        u = np.clip(self._u(s_arr), 0, 1)
        x, w = self._nodes
        # map nodes to [0, u] for every requested point
        pts = 0.5 * u[:, None] * (x[None, :] + 1)
        core = 0.5 * u * (self.poly(pts) @ w) * self.width
        tail = np.maximum(s_arr - self.offset, 0.0) * self.poly(1.0)
        out = core + tail
        return out if np.ndim(s) else float(out[0])

    def phi_exact(self, s):
        """Same primitive from the exact polynomial antiderivative (cross-check)."""
        s_arr = np.asarray(s, float)
        u = np.clip(self._u(s_arr), 0, 1)
        return self.width * self._primitive(u) + np.maximum(s_arr - self.offset, 0.0) * self.poly(1.0)

    @property
    def integral(self):
        return self.phi(1.0)

    def describe(self):
        return dict(kind=self.kind, k=self.k, onset=self.onset, offset=self.offset,
                    amplitude=self.amplitude)


def driving_profile(kind, k=4, **kw):
    return DrivingProfile(kind, k, **kw)


class GaugeFrame:
    """G(phi) = exp(i phi L1) for a diagonal or dense switch."""

    def __init__(self, lam1: SwitchFunction):
        self.lam1 = lam1
        self.diagonal = lam1.is_diagonal
        if self.diagonal:
            self.d = np.asarray(lam1.as_diagonal, float)
        else:
            self.eig = diagonalize(np.asarray(lam1.as_diagonal))

    def phases(self, phi):
        if self.diagonal:
            return np.exp(1j * phi * self.d)
        E, V = self.eig.energies, self.eig.vectors
        return (V * np.exp(1j * phi * E)[None, :]) @ V.conj().T

    def conj(self, X, phi):
        """G X G^dagger."""
        if self.diagonal:
            g = np.exp(1j * phi * self.d)
            return g[:, None] * X * g.conj()[None, :]
        G = self.phases(phi)
        return G @ X @ G.conj().T

    def apply(self, X, phi):
        if self.diagonal:
            return np.exp(1j * phi * self.d)[:, None] * X
        return self.phases(phi) @ X


def gauge_hamiltonian(model: MagneticModel, lam1: SwitchFunction, phi_s):
    return GaugeFrame(lam1).conj(model.hamiltonian, phi_s)


def step_rule(tau, hnorm, factor=8.0, floor=4096):
    return int(max(floor, math.ceil(factor * tau * hnorm)))


_W1 = 1.0 / (2.0 - 2.0 ** (1.0 / 3.0))
SCHEMES = {
    "midpoint": (1.0,),
    "yoshida4": (_W1, 1.0 - 2.0 * _W1, _W1),
}


@dataclass(frozen=True, eq=False)
class EvolutionState:
    tau: float
    s: float
    vectors: np.ndarray
    n_steps_used: int
    unitarity_defect: float
    propagator: Optional[np.ndarray] = None

    @cached_property
    def P_tau(self):
        X = self.vectors
        return X @ X.conj().T

    @property
    def U(self):
        return self.propagator


@dataclass(frozen=True, eq=False)
class Trajectory:
    tau: float
    states: list
    n_steps: int
    method: str

    def at(self, s):
        for st in self.states:
            if abs(st.s - s) < 1e-12:
                return st
        raise KeyError(f"no sample at s={s}")

    @property
    def s_values(self):
        return np.array([st.s for st in self.states])


def _propagate(eig, frame, profile, tau, X, s_points, n_steps, method):
    """Advance X from s_points[0] through the remaining points; yields X at each."""
    E, V = eig.energies, eig.vectors
    weights = SCHEMES[method]
    exps = {}

    def expo(h):
        key = round(h, 14)
        if key not in exps:
            exps[key] = (V * np.exp(-1j * tau * h * E)[None, :]) @ V.conj().T
        return exps[key]

    out = [X.copy()]
    for a, b in zip(s_points[:-1], s_points[1:]):
        n_seg = max(1, math.ceil((b - a) * n_steps - 1e-9))
        ds = (b - a) / n_seg
        hs = [w * ds for w in weights]
        offs = np.cumsum([0.0] + hs[:-1]) + 0.5 * np.array(hs)
        mids = (a + ds * np.arange(n_seg))[:, None] + offs[None, :]
        phis = profile.phi(mids.ravel()).reshape(mids.shape)
        if np.all(phis == phis[0, 0]) and profile.phi(a) == phis[0, 0] == profile.phi(b):
            # frozen gauge phase: the segment propagator is a single exponential
            G = frame.phases(phis[0, 0]) if phis[0, 0] != 0.0 else None
            Eh = expo(b - a)
            if G is None:
                X = Eh @ X
            elif frame.diagonal:
                X = G[:, None] * (Eh @ (G.conj()[:, None] * X))
            else:
                X = G @ (Eh @ (G.conj().T @ X))
            out.append(X.copy())
            continue
        Es = [expo(h) for h in hs]
        for i in range(n_seg):
            for j, Eh in enumerate(Es):
                ph = phis[i, j]
                if ph == 0.0:
                    X = Eh @ X
                elif frame.diagonal:
                    g = np.exp(1j * ph * frame.d)
                    X = g[:, None] * (Eh @ (g.conj()[:, None] * X))
                else:
                    G = frame.phases(ph)
                    X = G @ (Eh @ (G.conj().T @ X))
        out.append(X.copy())
    return out


def _defect(X):
    M = X.conj().T @ X
    return float(np.abs(np.linalg.eigvalsh(M - np.eye(M.shape[0]))).max()) if M.size else 0.0


def evolve(model: MagneticModel, P0: FermiProjector, profile: DrivingProfile, lam1: SwitchFunction,
           tau, n_steps=None, s_values=(), uniform_samples=33, method="yoshida4",
           keep_propagator=False, step_factor=None, initial=None):
    """Propagate the occupied subspace (or the full propagator) of P0.

    Returns the states at the 33 uniform points (if ``uniform_samples``) plus
    ``s_values``. ``n_steps`` counts steps per unit of s; the default is
    max(4096, ceil(8 tau |H|)).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if method not in SCHEMES:
        raise ValueError(f"unknown scheme {method!r}")
    hnorm = P0.eig.norm
    factor = 8.0 * hnorm if step_factor is None else step_factor
    minimum = math.ceil(factor * tau)
    if n_steps is None:
        n_steps = max(4096, minimum)
    elif n_steps < minimum:
        raise StepBudget(f"n_steps={n_steps} below the budget ceil({factor:.3g} tau) = {minimum}")
    pts = set(float(s) for s in s_values)
    if uniform_samples:
        pts.update(np.linspace(0, 1, uniform_samples).tolist())
    pts.add(0.0)
    pts = sorted(pts)
    if pts[-1] > 1 or pts[0] < 0:
        raise ValueError("s values must lie in [0, 1]")

    if initial is not None:
        X0 = np.asarray(initial, complex)
        if X0.ndim == 1:
            X0 = X0[:, None]
    elif keep_propagator:
        X0 = np.eye(model.dim, dtype=complex)
    else:
        X0 = P0.occupied_vectors.astype(complex)
    frame = GaugeFrame(lam1)
    Xs = _propagate(P0.eig, frame, profile, tau, X0, pts, n_steps, method)
    states = []
    for s, X in zip(pts, Xs):
        if keep_propagator:
            U = X
            vec = U @ P0.occupied_vectors
            dfc = _defect(U)
        else:
            U, vec, dfc = None, X, _defect(X)
        if dfc > 1e-9:
            raise StepBudget(f"unitarity defect {dfc:.3g} at s={s}")
        states.append(EvolutionState(float(tau), float(s), vec, int(n_steps), dfc, U))
    return Trajectory(float(tau), states, int(n_steps), method)


@dataclass(frozen=True)
class CurrentSample:
    s: float
    tau: float
    J: complex
    kubo_prediction: complex
    residual: float


def current_from_state(P_tau, model, lam1, lam2, profile, s, window, P_lambda, frame=None):
    """-i Tr (P_tau - P(s)) W [H(s), L2] W in the gauge frame."""
    frame = frame or GaugeFrame(lam1)
    ph = profile.phi(s)
    Ps = frame.conj(P_lambda, ph)
    Hs = frame.conj(model.hamiltonian, ph)
    O = window.apply(commutator_with(Hs, lam2))
    return complex(-1j * np.sum((P_tau - Ps) * O.T))


def lab_frame_current(rho, model, lam2, window, P_lambda):
    """-i Tr (rho - P_lambda) W [H_lambda, L2] W."""
    O = window.apply(commutator_with(model.hamiltonian, lam2))
    return complex(-1j * np.sum((rho - P_lambda) * O.T))


def instantaneous_current(state: EvolutionState, model, lam1, lam2, profile, P0: FermiProjector,
                          K_raw=None, window: BulkWindow = None, P_tau=None):
    window = window or bulk_window(model)
    Pt = state.P_tau if P_tau is None else P_tau
    J = current_from_state(Pt, model, lam1, lam2, profile, state.s, window, P0.matrix)
    if K_raw is None:
        pred = complex("nan")
        res = math.nan
    else:
        pred = -1j * float(profile.g(state.s)) * complex(K_raw) / state.tau
        res = abs(J - pred)
    return CurrentSample(state.s, state.tau, J, pred, res)


@dataclass(frozen=True)
class TauSweepReport:
    taus: np.ndarray
    s_probe: float
    J: np.ndarray
    residuals: np.ndarray
    residuals_half: np.ndarray
    relative_changes: np.ndarray
    n_steps: np.ndarray
    fit: object
    fit_all: object
    certified: bool


def _is_geometric(taus):
    r = np.asarray(taus[1:], float) / np.asarray(taus[:-1], float)
    return len(taus) >= 4 and np.allclose(r, r[0], rtol=1e-9) and r[0] > 1


def tau_sweep(model, P0, profile, lam1, lam2, tau_list, s_probe, K_raw, window=None,
              method="yoshida4", certify=True, threads=1, step_factor=None, window_policy="drop_first",
              states=None):
    """Residual |J + i g K / tau| at ``s_probe`` over a geometric tau grid.

    Each tau is also run with half as many steps; if any residual moves by
    more than 20% the integrator, not the physics, sets the residual.
    ``states`` optionally maps tau -> (occupied vectors, vectors at half the steps).
    """
    taus = sorted(float(t) for t in tau_list)
    if not _is_geometric(taus):
        raise ValueError("tau_list must be geometric with at least four points")
    window = window or bulk_window(model)
    hnorm = P0.eig.norm
    factor = 8.0 * hnorm if step_factor is None else step_factor

    def item(args):
        tau, halve = args
        n = max(4096, math.ceil(factor * tau))
        if halve:
            n //= 2
        if states is not None:
            X = states[tau][1 if halve else 0]
            st = EvolutionState(tau, float(s_probe), X, n, _defect(X))
            cs = instantaneous_current(st, model, lam1, lam2, profile, P0, K_raw, window)
            return (tau, halve), (cs, n)
        traj = evolve(model, P0, profile, lam1, tau, n_steps=n, s_values=[s_probe],
                      uniform_samples=0, method=method, step_factor=0.49 * factor if halve else factor)
        st = traj.at(s_probe)
        cs = instantaneous_current(st, model, lam1, lam2, profile, P0, K_raw, window)
        return (tau, halve), (cs, n)

    work = [(t, False) for t in taus] + ([(t, True) for t in taus] if certify else [])
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            done = dict(ex.map(item, work))
    else:
        done = dict(item(w) for w in work)
    J = np.array([done[(t, False)][0].J for t in taus])
    res = np.array([done[(t, False)][0].residual for t in taus])
    nst = np.array([done[(t, False)][1] for t in taus])
    if certify:
        half = np.array([done[(t, True)][0].residual for t in taus])
        change = np.abs(half - res) / res
    else:
        half = np.full(len(taus), np.nan)
        change = np.full(len(taus), np.nan)
    fit = loglog_fit(taus, res, window_policy)
    fit_all = loglog_fit(taus, res, "all")
    ok = bool(certify and np.all(change < 0.2))
    report = TauSweepReport(np.array(taus), float(s_probe), J, res, half, change, nst, fit, fit_all, ok)
    if certify and not ok:
        raise IntegratorDominated(f"step halving moves residuals by up to {change.max():.2%}", report)
    return report


def probe_states(model, P0, profile, lam1, tau_list, s, method="yoshida4", threads=1, certify=True):
    """Occupied vectors at ``s`` for each tau, plus a run at half the step count.

    The result plugs into the ``states`` argument of ``tau_sweep`` and
    ``truncation_remainder`` so both can share one set of trajectories.
    """
    hnorm = P0.eig.norm

    def run(args):
        tau, halve = args
        n = step_rule(tau, hnorm)
        if halve:
            n //= 2
        tr = evolve(model, P0, profile, lam1, tau, n_steps=n, s_values=[s], uniform_samples=0,
                    method=method, step_factor=3.9 * hnorm if halve else None)
        return args, tr.at(s).vectors

    taus = sorted(float(t) for t in tau_list)
    work = [(t, False) for t in taus] + ([(t, True) for t in taus] if certify else [])
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            got = dict(ex.map(run, work))
    else:
        got = dict(run(w) for w in work)
    return {t: (got[(t, False)], got.get((t, True))) for t in taus}


@dataclass(frozen=True)
class ChargeResult:
    charge: complex
    coarse_charge: complex
    s: np.ndarray
    J: np.ndarray
    converged: bool


def accumulated_charge(model, P0, profile, lam1, lam2, tau, window=None, samples=33, n_steps=None,
                       method="yoshida4", rtol=2e-2, strict=True):
    """Charge through the x2 switch, tau * int_0^1 J(s) ds, by composite Simpson.

    Refinement check: Simpson on every other sample must agree within ``rtol``.
    """
    window = window or bulk_window(model)
    if samples % 2 == 0 or samples < 5:
        raise ValueError("samples must be odd and at least 5")
    traj = evolve(model, P0, profile, lam1, tau, n_steps=n_steps, uniform_samples=samples, method=method)
    frame = GaugeFrame(lam1)
    s = traj.s_values
    J = np.array([current_from_state(st.P_tau, model, lam1, lam2, profile, st.s, window, P0.matrix, frame)
                  for st in traj.states])
    Q = tau * (simpson(J.real, x=s) + 1j * simpson(J.imag, x=s))
    Qc = tau * (simpson(J.real[::2], x=s[::2]) + 1j * simpson(J.imag[::2], x=s[::2]))
    ok = abs(Q - Qc) <= rtol * abs(Q) + 1e-12
    if strict and not ok:
        raise ChargeQuadratureError(f"charge quadrature unresolved: {Q} vs {Qc}")
    return ChargeResult(complex(Q), complex(Qc), s, J, bool(ok))
