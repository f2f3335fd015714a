"""Finite magnetic Hamiltonians, switch functions and the current observable.

Two backends: a Hofstadter lattice (Landau gauge, flux p/q per plaquette)
and a truncated symmetric-gauge Landau basis (see ``landau.py``).
"""
import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np
from scipy.special import comb


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class LatticeSpec:
    """Square lattice of ``width x width`` sites with flux p/q per plaquette.

    Zero flux is written p=0, q=1.
    """
    width: int
    p: int
    q: int
    boundary: str = "open"
    hopping: float = 1.0

    def __post_init__(self):
        if self.boundary not in ("open", "torus"):
            raise ModelError(f"boundary must be 'open' or 'torus', got {self.boundary!r}")
        if self.q < 1 or self.p < 0 or (self.p >= self.q and self.p != 0):
            raise ModelError(f"need 0 < p < q (or p=0, q=1), got p={self.p}, q={self.q}")
        if math.gcd(self.p, self.q) != 1:
            raise ModelError(f"flux {self.p}/{self.q} is not in lowest terms")
        if self.width < 2 * self.q:
            raise ModelError(f"width {self.width} < 2q = {2 * self.q}")
        if self.boundary == "torus" and self.width % self.q:
            raise ModelError("torus width must be a multiple of q for uniform flux")

    @property
    def flux(self):
        return self.p / self.q

    @property
    def magnetic_length(self):
        if self.p == 0:
            return math.inf
        return math.sqrt(self.q / (2 * math.pi * self.p))


@dataclass(frozen=True)
class PotentialSpec:
    """Smooth external potential.

    ``parameters`` holds (center, width, amplitude) triples for gaussian bumps,
    and (wavevector, phase, amplitude) triples for cosines. With ``normalize``
    the sampled potential is rescaled so that its sup norm equals ``sup_norm``.
    """
    kind: str = "zero"
    parameters: tuple = ()
    sup_norm: float = 1.0
    smoothness_order: int = 6
    normalize: bool = True

    def __post_init__(self):
        if self.kind not in ("zero", "gaussian_bumps", "cosine"):
            raise ModelError(f"unknown potential kind {self.kind!r}")
        params = tuple((tuple(float(c) for c in a), float(b), float(amp))
                       for a, b, amp in self.parameters)
        object.__setattr__(self, "parameters", params)
        if self.sup_norm < 0:
            raise ModelError("sup_norm must be nonnegative")

    @classmethod
    def random_bumps(cls, n, radius, seed, width=(1.0, 2.5), sup_norm=1.0):
        rng = np.random.default_rng(seed)
        r = radius * np.sqrt(rng.uniform(0, 1, n))
        ang = rng.uniform(0, 2 * np.pi, n)
        widths = rng.uniform(*width, n)
        amps = rng.uniform(-1, 1, n)
        params = [((r[i] * np.cos(ang[i]), r[i] * np.sin(ang[i])), widths[i], amps[i])
                  for i in range(n)]
        return cls("gaussian_bumps", tuple(params), sup_norm)

    def raw(self, x1, x2):
        x1 = np.asarray(x1, float)
        x2 = np.asarray(x2, float)
        v = np.zeros(np.broadcast(x1, x2).shape)
        if self.kind == "gaussian_bumps":
            for (c1, c2), w, a in self.parameters:
                v += a * np.exp(-((x1 - c1) ** 2 + (x2 - c2) ** 2) / (2 * w * w))
        elif self.kind == "cosine":
            for (k1, k2), ph, a in self.parameters:
                v += a * np.cos(k1 * x1 + k2 * x2 + ph)
        return v

    def values(self, x1, x2, sample=None):
        """Potential at (x1, x2); the sup norm is taken over ``sample`` (default: the points)."""
        v = self.raw(x1, x2)
        if self.kind == "zero":
            return v
        ref = v if sample is None else self.raw(*sample)
        peak = np.abs(ref).max()
        if peak == 0:
            return v
        if self.normalize:
            return v * (self.sup_norm / peak)
        if peak > self.sup_norm * (1 + 1e-12):
            raise ModelError(f"sampled |V| reaches {peak:.4g} > sup_norm {self.sup_norm}")
        return v


@dataclass(frozen=True, eq=False)
class MagneticModel:
    hamiltonian: np.ndarray
    x1_op: np.ndarray
    x2_op: np.ndarray
    field_B: float
    lam: float
    potential: PotentialSpec
    backend: str
    lattice: Optional[LatticeSpec] = None
    landau: Optional[dict] = None
    basis: object = field(default=None, repr=False)

    def __post_init__(self):
        H = np.ascontiguousarray(self.hamiltonian, dtype=complex)
        object.__setattr__(self, "hamiltonian", H)
        if H.ndim != 2 or H.shape[0] != H.shape[1]:
            raise ModelError("hamiltonian must be square")
        scale = max(np.linalg.norm(H), 1e-300)
        if np.linalg.norm(H - H.conj().T) > 1e-12 * scale:
            raise ModelError("hamiltonian is not Hermitian")
        if self.lam < 0:
            raise ModelError("lambda must be nonnegative")
        if self.lam > 0 and not self.lam * self.potential.sup_norm < self.field_B:
            raise ModelError(f"lambda*|V| = {self.lam * self.potential.sup_norm:.4g} "
                             f"is not below B = {self.field_B:.4g}")
        for name in ("hamiltonian", "x1_op", "x2_op"):
            a = getattr(self, name)
            if not isinstance(a, np.ndarray):
                a = np.asarray(a)
                object.__setattr__(self, name, a)
            a.flags.writeable = False

    @property
    def dim(self):
        return self.hamiltonian.shape[0]

    @property
    def diagonal_coordinates(self):
        return self.x1_op.ndim == 1

    def coordinate(self, direction):
        if direction not in ("x1", "x2"):
            raise ModelError(f"direction must be 'x1' or 'x2', got {direction!r}")
        return self.x1_op if direction == "x1" else self.x2_op

    @cached_property
    def norm(self):
        return float(np.abs(np.linalg.eigvalsh(self.hamiltonian)).max())

    @cached_property
    def content_hash(self):
        h = hashlib.sha256()
        for a in (self.hamiltonian, self.x1_op, self.x2_op):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    def extent(self, direction):
        """Sample size along a coordinate (site span for the lattice)."""
        if self.backend == "hofstadter":
            L = self.lattice.width
            return float(L if self.lattice.boundary == "torus" else L - 1)
        return 2 * self.basis.radius

    def boundary_margin(self):
        if self.backend == "hofstadter":
            return 4 * min(self.lattice.magnetic_length, self.lattice.width)
        return 4 / math.sqrt(self.field_B)

    @property
    def periodic(self):
        return self.backend == "hofstadter" and self.lattice.boundary == "torus"


def build_hofstadter(spec: LatticeSpec, pot: PotentialSpec = None, lam=0.0, B_label=None):
    """Nearest-neighbour lattice with Peierls phases on x1-hops (Landau gauge).

    The hop (i1, i2) -> (i1+1, i2) carries -t exp(-2 pi i a i2) with a = p/q,
    which puts exp(2 pi i a) around every counter-clockwise plaquette.
    """
    pot = pot or PotentialSpec()
    L, t, a = spec.width, spec.hopping, spec.flux
    idx = np.arange(L * L).reshape(L, L)
    H = np.zeros((L * L, L * L), complex)
    phase = np.exp(-2j * np.pi * a * np.arange(L))
    torus = spec.boundary == "torus"
    for i1 in range(L if torus else L - 1):
        H[idx[(i1 + 1) % L], idx[i1]] += -t * phase
    for i2 in range(L if torus else L - 1):
        H[idx[:, (i2 + 1) % L], idx[:, i2]] += -t
    H = H + H.conj().T

    c = np.arange(L) - (L - 1) / 2
    x1 = np.repeat(c, L)
    x2 = np.tile(c, L)
    if lam:
        H[np.diag_indices_from(H)] += lam * pot.values(x1, x2)
    if B_label is None:
        B_label = 2 * np.pi * a
    return MagneticModel(H, x1, x2, float(B_label), float(lam), pot, "hofstadter", lattice=spec)


def build_landau_truncated(B, n_levels, m_max, pot: PotentialSpec = None, lam=0.0, tol=1e-8):
    from .landau import LandauBasis

    pot = pot or PotentialSpec()
    if n_levels < 2:
        raise ModelError("n_levels must be at least 2")
    basis = LandauBasis(B, n_levels, m_max)
    H = np.diag(basis.energies).astype(complex)
    x1 = basis.project(lambda u, v: u, tol=tol)
    x2 = basis.project(lambda u, v: v, tol=tol)
    if lam and pot.kind != "zero":
        g = basis.sup_grid()

        def vfun(u, v):
            return pot.values(u, v, sample=g)

        H = H + lam * basis.project(vfun, tol=tol)
    return MagneticModel(H, x1, x2, float(B), float(lam), pot, "landau_basis",
                         landau=dict(B=B, n_levels=n_levels, m_max=m_max), basis=basis)


def smoothstep(u, order):
    """C^order polynomial step on [0, 1] (all derivatives up to ``order`` vanish at both ends)."""
    u = np.clip(u, 0.0, 1.0)
    k = order
    s = sum(comb(k + j, j) * comb(2 * k + 1, k - j) * (-u) ** j for j in range(k + 1))
    return u ** (k + 1) * s


def step_profile(m, order=3, sharp=False):
    """Monotone 0 -> 1 profile across [-m, m], exactly 0 / 1 outside."""
    def profile(x):
        x = np.asarray(x, float)
        if sharp:
            return np.heaviside(x, 0.5)
        out = smoothstep((x + m) / (2 * m), order)
        out = np.where(x <= -m, 0.0, out)
        return np.where(x >= m, 1.0, out)
    return profile


def periodic_profile(m, period, order=3, sharp=False):
    """Step up at 0 and back down at +-period/2, for coordinates in (-period/2, period/2]."""
    up = step_profile(m, order, sharp)

    def profile(x):
        x = np.asarray(x, float)
        h = period / 2
        return np.where(np.abs(x) <= h / 2, up(x),
                        np.where(x > 0, 1.0 - up(x - h), 1.0 - up(x + h)))
    return profile


@dataclass(frozen=True, eq=False)
class SwitchFunction:
    direction: str
    half_width_m: float
    order: int
    profile: Callable
    as_diagonal: np.ndarray
    sharp: bool = False
    period: Optional[float] = None

    @property
    def is_diagonal(self):
        return self.as_diagonal.ndim == 1

    @property
    def matrix(self):
        if self.is_diagonal:
            return np.diag(self.as_diagonal).astype(complex)
        return self.as_diagonal


def make_switch(direction, m, order, model: MagneticModel, sharp=False, check_margin=True, tol=1e-6):
    """Switch function along ``direction`` with transition on [-m, m].

    On the torus the profile steps back down at the antipode, so it is periodic.
    """
    if m <= 0:
        raise ModelError("switch half-width must be positive")
    extent = model.extent(direction)
    if check_margin and not m < extent / 4:
        raise ModelError(f"half-width {m} is not below a quarter of the extent {extent}")
    period = None
    if model.periodic:
        period = float(model.lattice.width)
        profile = periodic_profile(m, period, order, sharp)
    else:
        profile = step_profile(m, order, sharp)
        if check_margin and m + model.boundary_margin() > extent / 2:
            raise ModelError(f"switch support [-{m}, {m}] reaches the boundary margin "
                             f"({model.boundary_margin():.3g}) of a sample of extent {extent}")
    if model.diagonal_coordinates:
        values = profile(model.coordinate(direction))
    else:
        if direction == "x1":
            values = model.basis.project(lambda u, v: profile(u), tol=tol)
        else:
            values = model.basis.project(lambda u, v: profile(v), tol=tol)
    values = np.array(values)
    values.flags.writeable = False
    return SwitchFunction(direction, float(m), order, profile, values, sharp, period)


def constant_switch(model: MagneticModel, direction, value=1.0):
    """Degenerate switch, identically ``value``."""
    def profile(x):
        return np.full(np.shape(x), float(value))
    if model.diagonal_coordinates:
        values = np.full(model.dim, float(value))
    else:
        values = float(value) * np.eye(model.dim, dtype=complex)
    values.flags.writeable = False
    return SwitchFunction(direction, 1.0, 0, profile, values)


def commutator_with(A, sw):
    """[A, Lambda] for a switch (diagonal or dense)."""
    if isinstance(sw, SwitchFunction):
        sw = sw.as_diagonal
    if sw.ndim == 1:
        return A * (sw[None, :] - sw[:, None])
    return A @ sw - sw @ A


def current_operator(model: MagneticModel, lam2: SwitchFunction):
    """[H, Lambda2]; anti-Hermitian."""
    if lam2.direction != "x2":
        raise ModelError("current operator needs an x2-direction switch")
    if lam2.as_diagonal.shape[0] != model.dim:
        raise ModelError("switch does not match the model dimension")
    return commutator_with(model.hamiltonian, lam2)


def _pack_upper(H):
    iu = np.triu_indices(H.shape[0])
    return H[iu]


def _unpack_upper(packed, D):
    H = np.zeros((D, D), complex)
    iu = np.triu_indices(D)
    H[iu] = packed
    H = H + np.triu(H, 1).conj().T
    return H


def save_model(model: MagneticModel, path):
    """Snapshot to .npz (binary) or .json; the Hamiltonian is stored as its packed upper triangle, row-major."""
    path = str(path)
    packed = _pack_upper(model.hamiltonian)
    meta = dict(backend=model.backend, field_B=model.field_B, lam=model.lam,
                potential=dict(kind=model.potential.kind,
                               parameters=[[c[0], c[1], w, a] for c, w, a in model.potential.parameters],
                               sup_norm=model.potential.sup_norm,
                               smoothness_order=model.potential.smoothness_order),
                lattice=None if model.lattice is None else dict(
                    width=model.lattice.width, p=model.lattice.p, q=model.lattice.q,
                    boundary=model.lattice.boundary, hopping=model.lattice.hopping),
                landau=model.landau, hash=model.content_hash)
    if path.endswith(".json"):
        doc = dict(dimension=model.dim, meta=meta,
                   x1=np.asarray(model.x1_op).real.ravel().tolist(),
                   x2=np.asarray(model.x2_op).real.ravel().tolist(),
                   x_shape=list(model.x1_op.shape),
                   hamiltonian_packed_re=packed.real.tolist(),
                   hamiltonian_packed_im=packed.imag.tolist())
        if not model.diagonal_coordinates:
            doc["x1_im"] = np.asarray(model.x1_op).imag.ravel().tolist()
            doc["x2_im"] = np.asarray(model.x2_op).imag.ravel().tolist()
        with open(path, "w") as fh:
            json.dump(doc, fh)
    else:
        np.savez(path, dimension=model.dim, hamiltonian_packed=packed,
                 x1=model.x1_op, x2=model.x2_op, meta=json.dumps(meta))


def load_model(path):
    """Inverse of ``save_model``. Landau snapshots come back without the quadrature basis."""
    path = str(path)
    if path.endswith(".json"):
        with open(path) as fh:
            doc = json.load(fh)
        D, meta = doc["dimension"], doc["meta"]
        packed = np.array(doc["hamiltonian_packed_re"]) + 1j * np.array(doc["hamiltonian_packed_im"])
        shape = tuple(doc["x_shape"])
        x1 = np.array(doc["x1"]).reshape(shape)
        x2 = np.array(doc["x2"]).reshape(shape)
        if "x1_im" in doc:
            x1 = x1 + 1j * np.array(doc["x1_im"]).reshape(shape)
            x2 = x2 + 1j * np.array(doc["x2_im"]).reshape(shape)
    else:
        with np.load(path) as z:
            D = int(z["dimension"])
            packed, x1, x2 = z["hamiltonian_packed"], z["x1"], z["x2"]
            meta = json.loads(str(z["meta"]))
    pm = meta["potential"]
    pot = PotentialSpec(pm["kind"], tuple(((p[0], p[1]), p[2], p[3]) for p in pm["parameters"]),
                        pm["sup_norm"], pm["smoothness_order"])
    lat = LatticeSpec(**meta["lattice"]) if meta["lattice"] else None
    return MagneticModel(_unpack_upper(packed, D), x1, x2, meta["field_B"], meta["lam"], pot,
                         meta["backend"], lattice=lat, landau=meta["landau"])
