"""Finite-volume solver for the limiting density equation.

The density ``x_t(u)`` on the orthant obeys

    d_t x + sum_k d_k( x F^k ) = int x(u') phibar(u', u) du' - (phi(u) + eps(u) R_t) x(u)

with drift ``F^k(u) = u_k (beta_k - delta_k - mu_k)(u) + c^k_t`` where
``c^k_t = int u_k mu_k x / R_t`` and ``R_t = int x``.  The orthant is
truncated to the box ``[0, U]^l`` and discretised on a cell-centred tensor
grid.  One step is a Strang splitting of three substeps:

* ``a``: conservative transport with the local velocity ``u_k (...)``,
  MUSCL reconstruction with the minmod limiter and SSP-RK2;
* ``b``: rigid shift by ``c dt``, flux-form semi-Lagrangian;
* ``c``: fission and extinction, exponential midpoint.

``c_t`` is frozen over the step at its predictor-corrector midpoint value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import (
    ConstantRate,
    FissionLaw,
    NonproperLaw,
    RateForm,
    RateSpec,
    UniformBoxLaw,
    box_lattice,
    eta,
    make_rate,
)


_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class SingularDriftError(ZeroDivisionError):
    pass


class CFLError(ValueError):
    def __init__(self, dt: float, admissible: float):
        super().__init__(f"time step {dt:g} exceeds the transport CFL limit; admissible dt <= {admissible:g}")
        self.dt = dt
        self.admissible = admissible


class MassUnderflowError(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# Grid


@dataclass(frozen=True)
class Grid:
    """Cell-centred tensor grid over ``[0, upper]^ntypes`` with ``cells`` cells per axis."""

    ntypes: int
    upper: float
    cells: int

    @property
    def h(self) -> float:
        return self.upper / self.cells

    @property
    def shape(self) -> tuple:
        return (self.cells,) * self.ntypes

    @property
    def volume(self) -> float:
        return self.h ** self.ntypes

    @property
    def centers1d(self) -> np.ndarray:
        return (np.arange(self.cells) + 0.5) * self.h

    def points(self) -> np.ndarray:
        """Cell centres as a ``(cells**l, l)`` array in C order."""
        axes = np.meshgrid(*([self.centers1d] * self.ntypes), indexing="ij")
        return np.stack([a.ravel() for a in axes], axis=1)

    def face_points(self, axis: int) -> np.ndarray:
        """Face centres normal to ``axis``; shape ``(prod, l)`` for a grid with ``cells+1`` faces on ``axis``."""
        coords = [self.centers1d] * self.ntypes
        coords[axis] = np.arange(self.cells + 1) * self.h
        mesh = np.meshgrid(*coords, indexing="ij")
        return np.stack([a.ravel() for a in mesh], axis=1)

    def face_shape(self, axis: int) -> tuple:
        s = list(self.shape)
        s[axis] += 1
        return tuple(s)

    def evaluate(self, f: Callable) -> np.ndarray:
        """Evaluate ``f`` (rows of points -> values) at the centres."""
        return np.asarray(f(self.points()), dtype=float).reshape(self.shape)

    def integrate(self, values: np.ndarray) -> float:
        return float(values.sum() * self.volume)


@dataclass
class DensityGrid:
    grid: Grid
    values: np.ndarray
    t: float = 0.0

    @property
    def mass(self) -> float:
        return self.grid.integrate(self.values)

    def moments(self) -> np.ndarray:
        pts = self.grid.points()
        flat = self.values.ravel()
        return pts.T @ flat * self.grid.volume

    def pair(self, f: Callable) -> float:
        return float(np.dot(np.asarray(f(self.grid.points()), float), self.values.ravel()) * self.grid.volume)


# ----------------------------------------------------------------------------
# Fission kernels
#
# A kernel discretises ``int y(u') phibar(u, u') du'`` on a grid.  Offspring
# positions are assigned to neighbouring cell centres with linear ("fixed
# pivot") weights, which preserves the offspring number and first moment.
# Offspring below the first centre are pinned to it (number preserved).


def _uniform_pivot_matrix(grid: Grid) -> np.ndarray:
    """Column ``p``: uniform law on ``[0, u_p]`` distributed onto centres."""
    N = grid.cells
    W = np.zeros((N, N))
    for p in range(N):
        if p == 0:
            W[0, 0] = 1.0
            continue
        up = (p + 0.5)
        W[:p, p] = 1.0 / up
        half = 0.5 / up               # partial cell [p h, u_p], mean (p + 1/4) h
        W[p, p] += 0.75 * half
        W[p - 1, p] += 0.25 * half
    return W


def _apply_axis(mat: np.ndarray, arr: np.ndarray, axis: int) -> np.ndarray:
    return np.moveaxis(np.tensordot(mat, arr, axes=([1], [axis])), 0, axis)


class Kernel:
    """Offspring kernel ``phibar(u, u')`` together with its rate ``phi(u)``."""

    bound = 1
    conservative = True
    analytic = False

    def __init__(self, phi: RateForm):
        self.phi = make_rate(phi)

    def phi_values(self, u) -> np.ndarray:
        return self.phi.limit(np.atleast_2d(u))

    def moments(self, u) -> tuple[np.ndarray, np.ndarray]:
        """``(int phibar(u, u') du', int u' phibar(u, u') du')`` at the rows of ``u``."""
        raise NotImplementedError

    def operator(self, grid: Grid) -> "SourceOperator":
        raise NotImplementedError

    def params(self) -> dict:
        return {"kernel": self.name, "phi": {"form": self.phi.name, **self.phi.params()}}


class SourceOperator:
    """Discrete ``S = M x`` (offspring density) and its adjoint ``M^T f``."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint(self, f: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class _SeparableOperator(SourceOperator):
    def __init__(self, phi: np.ndarray, W: np.ndarray, pieces: float):
        self.phi = phi
        self.W = W
        self.pieces = pieces

    def forward(self, x):
        y = self.pieces * self.phi * x
        for axis in range(x.ndim):
            y = _apply_axis(self.W, y, axis)
        return y

    def adjoint(self, f):
        y = f
        for axis in range(f.ndim):
            y = _apply_axis(self.W.T, y, axis)
        return self.pieces * self.phi * y


class _DiagonalOperator(SourceOperator):
    def __init__(self, phi: np.ndarray):
        self.phi = phi

    def forward(self, x):
        return self.phi * x

    def adjoint(self, f):
        return self.phi * f


class _DenseOperator(SourceOperator):
    def __init__(self, M: np.ndarray, shape: tuple):
        self.M = M
        self.shape = shape

    def forward(self, x):
        return (self.M @ x.ravel()).reshape(self.shape)

    def adjoint(self, f):
        return (self.M.T @ f.ravel()).reshape(self.shape)


class UniformBoxKernel(Kernel):
    """Two offspring, each uniform on the box ``[0, u]``: ``phibar = phi(u) 2/prod(u) 1_{[0,u]}(u')``."""

    name = "uniform_box"
    bound = 2
    analytic = True

    def density(self, u, v) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, float))
        v = np.atleast_2d(np.asarray(v, float))
        inside = np.all((v >= 0) & (v <= u), axis=1)
        vol = np.prod(u, axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            dens = np.where(inside & (vol > 0), 2.0 * self.phi_values(u) / np.where(vol > 0, vol, 1.0), 0.0)
        return dens

    def moments(self, u, order: int = 8):
        """Tensor Gauss-Legendre over ``[0, u]`` of the analytic density."""
        u = np.atleast_2d(np.asarray(u, float))
        ell = u.shape[1]
        x, w = np.polynomial.legendre.leggauss(order)
        x, w = 0.5 * (x + 1.0), 0.5 * w
        mesh = np.stack([g.ravel() for g in np.meshgrid(*([x] * ell), indexing="ij")], axis=1)
        wts = np.prod(np.stack([g.ravel() for g in np.meshgrid(*([w] * ell), indexing="ij")], axis=1), axis=1)
        mass = np.zeros(len(u))
        first = np.zeros_like(u)
        for q, wq in zip(mesh, wts):
            v = u * q
            jac = np.prod(u, axis=1)
            d = self.density(u, v) * jac * wq
            mass += d
            first += d[:, None] * v
        return mass, first

    def operator(self, grid):
        return _SeparableOperator(grid.evaluate(self.phi_values), _uniform_pivot_matrix(grid), 2.0)


class NonproperKernel(Kernel):
    """Every fission returns the parent unchanged: ``phibar(u, .) = phi(u) delta_u``."""

    name = "nonproper"
    bound = 1
    analytic = True

    def moments(self, u):
        u = np.atleast_2d(np.asarray(u, float))
        phi = self.phi_values(u)
        return phi, phi[:, None] * u

    def operator(self, grid):
        return _DiagonalOperator(grid.evaluate(self.phi_values))


class TabulatedKernel(Kernel):
    """``phi(u) sum_{i'} eta(floor(n u), i') delta_{i'/n}`` for a partition law at fixed ``n``."""

    name = "tabulated"

    def __init__(self, phi: RateForm, law: FissionLaw, n: int):
        super().__init__(phi)
        self.law = law
        self.n = int(n)
        self.bound = law.max_pieces
        self._cache: dict = {}

    def _atoms(self, comp):
        if comp not in self._cache:
            children = [c for c in box_lattice(comp) if any(c)]
            w = np.array([eta(self.law, comp, c) for c in children])
            keep = w > 0
            self._cache[comp] = (np.array(children, float)[keep] / self.n, w[keep])
        return self._cache[comp]

    def moments(self, u):
        u = np.atleast_2d(np.asarray(u, float))
        phi = self.phi_values(u)
        mass = np.zeros(len(u))
        first = np.zeros_like(u)
        for r, row in enumerate(u):
            comp = tuple(int(v) for v in np.floor(self.n * row + 1e-12))
            if not any(comp):
                continue
            locs, w = self._atoms(comp)
            mass[r] = phi[r] * w.sum()
            first[r] = phi[r] * (w @ locs)
        return mass, first

    def operator(self, grid):
        pts = grid.points()
        phi = self.phi_values(pts)
        size = len(pts)
        M = np.zeros((size, size))
        for p, row in enumerate(pts):
            comp = tuple(int(v) for v in np.floor(self.n * row + 1e-12))
            if not any(comp) or phi[p] == 0:
                continue
            locs, w = self._atoms(comp)
            M[:, p] = phi[p] * _pivot_nd(locs, w, grid)
        return _DenseOperator(M, grid.shape)

    def params(self):
        out = super().params()
        out.update({"law": self.law.params(), "n": self.n})
        return out


def _pivot_nd(locs: np.ndarray, w: np.ndarray, grid: Grid) -> np.ndarray:
    """Multilinear assignment of weighted atoms to cell centres (flattened)."""
    ell = grid.ntypes
    N = grid.cells
    s = locs / grid.h - 0.5
    lo = np.clip(np.floor(s).astype(np.int64), 0, N - 2) if N > 1 else np.zeros_like(s, dtype=np.int64)
    frac = np.clip(s - lo, 0.0, 1.0)
    out = np.zeros(grid.shape)
    for corner in range(1 << ell):
        idx = []
        wt = w.copy()
        for k in range(ell):
            bit = (corner >> k) & 1
            idx.append(lo[:, k] + bit if N > 1 else lo[:, k])
            wt = wt * (frac[:, k] if bit else 1.0 - frac[:, k])
        np.add.at(out, tuple(idx), wt)
    return out.ravel()


class ZeroKernel(Kernel):
    name = "none"
    bound = 0

    def __init__(self):
        super().__init__(ConstantRate(0.0))

    def moments(self, u):
        u = np.atleast_2d(np.asarray(u, float))
        return np.zeros(len(u)), np.zeros_like(u)

    def operator(self, grid):
        return _DiagonalOperator(np.zeros(grid.shape))


def kernel_for(law: FissionLaw, phi: RateForm, tabulate_n: int | None = None) -> Kernel:
    """Limit kernel of a partition law: analytic when known, else tabulated at ``tabulate_n``."""
    phi = make_rate(phi)
    if phi.is_constant() and phi.limit(np.zeros((1, 1)))[0] == 0:
        return ZeroKernel()
    if isinstance(law, UniformBoxLaw):
        return UniformBoxKernel(phi)
    if isinstance(law, NonproperLaw):
        return NonproperKernel(phi)
    if tabulate_n is None:
        raise ValueError(f"law {law.name!r} has no analytic limit kernel; give tabulate_n")
    return TabulatedKernel(phi, law, tabulate_n)


# ----------------------------------------------------------------------------
# Coefficients


@dataclass
class LimitCoefficients:
    ntypes: int
    birth: tuple
    death: tuple
    migration: tuple
    kernel: Kernel
    extinction: RateForm

    @classmethod
    def constant(cls, ntypes=1, birth=0.0, death=0.0, migration=0.0, fission=0.0, extinction=0.0,
                 kernel: str = "uniform_box") -> "LimitCoefficients":
        def per_type(v):
            v = np.broadcast_to(np.asarray(v, float), (ntypes,))
            return tuple(ConstantRate(float(x)) for x in v)
        phi = make_rate(fission)
        if fission == 0:
            kern = ZeroKernel()
        elif kernel == "uniform_box":
            kern = UniformBoxKernel(phi)
        elif kernel == "nonproper":
            kern = NonproperKernel(phi)
        else:
            raise ValueError(f"unknown kernel {kernel!r}")
        return cls(ntypes, per_type(birth), per_type(death), per_type(migration), kern, make_rate(extinction))

    @classmethod
    def from_rates(cls, rates: RateSpec, law: FissionLaw, tabulate_n: int | None = None) -> "LimitCoefficients":
        return cls(rates.ntypes, rates.birth, rates.death, rates.migration,
                   kernel_for(law, rates.fission, tabulate_n), rates.extinction)

    def growth(self, u) -> np.ndarray:
        """``(beta_k - delta_k - mu_k)(u)`` as a ``(P, l)`` array."""
        u = np.atleast_2d(np.asarray(u, float))
        cols = [self.birth[k].limit(u) - self.death[k].limit(u) - self.migration[k].limit(u)
                for k in range(self.ntypes)]
        return np.stack(cols, axis=1)

    def net_birth(self, u) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, float))
        return np.stack([self.birth[k].limit(u) - self.death[k].limit(u) for k in range(self.ntypes)], axis=1)

    def mu(self, u) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, float))
        return np.stack([self.migration[k].limit(u) for k in range(self.ntypes)], axis=1)

    def phi(self, u) -> np.ndarray:
        return self.kernel.phi_values(u)

    def eps(self, u) -> np.ndarray:
        return self.extinction.limit(np.atleast_2d(np.asarray(u, float)))

    def is_constant(self) -> bool:
        forms = list(self.birth) + list(self.death) + list(self.migration) + [self.kernel.phi, self.extinction]
        return all(f.is_constant() for f in forms)

    def lipschitz_estimates(self, grid: Grid) -> dict:
        """Finite-difference Lipschitz estimates of ``u_k beta_k`` etc. on the grid (for reports)."""
        pts = grid.points()
        out = {}
        for name in ("birth", "death", "migration"):
            forms = getattr(self, name)
            vals = np.stack([pts[:, k] * forms[k].limit(pts) for k in range(self.ntypes)], axis=1)
            vals = vals.reshape(grid.shape + (self.ntypes,))
            worst = 0.0
            for axis in range(self.ntypes):
                d = np.abs(np.diff(vals, axis=axis)) / grid.h
                worst = max(worst, float(d.max()) if d.size else 0.0)
            out[name] = worst
        return out


class Discretization:
    """Grid-resident coefficient arrays, built once per (coefficients, grid)."""

    def __init__(self, coeffs: LimitCoefficients, grid: Grid):
        if coeffs.ntypes != grid.ntypes:
            raise ValueError("grid and coefficients disagree on the number of types")
        self.coeffs = coeffs
        self.grid = grid
        pts = grid.points()
        self.face_velocity = []
        for k in range(grid.ntypes):
            fp = grid.face_points(k)
            v = fp[:, k] * coeffs.growth(fp)[:, k]
            v = v.reshape(grid.face_shape(k))
            idx = [slice(None)] * grid.ntypes
            idx[k] = 0
            v[tuple(idx)] = 0.0
            self.face_velocity.append(v)
        self.face_mu = []
        for k in range(grid.ntypes):
            fp = grid.face_points(k)
            self.face_mu.append((fp[:, k] * coeffs.mu(fp)[:, k]).reshape(grid.face_shape(k)))
        self.mu_weight = [(pts[:, k] * coeffs.mu(pts)[:, k]).reshape(grid.shape) for k in range(grid.ntypes)]
        self.phi = coeffs.phi(pts).reshape(grid.shape)
        self.eps = coeffs.eps(pts).reshape(grid.shape)
        self.source = coeffs.kernel.operator(grid)
        self.max_speed = sum(float(np.abs(v).max()) for v in self.face_velocity)

    def cfl_limit(self, fraction: float = 0.5) -> float:
        if self.max_speed == 0:
            return math.inf
        return fraction * self.grid.h / self.max_speed


# ----------------------------------------------------------------------------
# Drift


def migration_drift(disc: Discretization, x: np.ndarray) -> np.ndarray:
    """``c^k = int u_k mu_k x / int x`` by upwind face quadrature.

    The integral uses the same face values as the transport fluxes, so the
    first moment removed by emigration in the transport substep is returned
    by the shift substep to rounding and time-splitting error.
    """
    mass = x.sum()
    if not mass > 0:
        raise SingularDriftError("migration drift is undefined at zero total mass")
    out = np.zeros(disc.grid.ntypes)
    for k, (v, w) in enumerate(zip(disc.face_velocity, disc.face_mu)):
        if np.any(w):
            out[k] = float((w * _upwind_faces(x, v, k)).sum() / mass)
    return out


def drift_field(coeffs: LimitCoefficients, density: DensityGrid) -> np.ndarray:
    """``F^k`` at the cell centres, shape ``(l,) + grid.shape``."""
    grid = density.grid
    pts = grid.points()
    mass = density.mass
    if not mass > 0:
        raise SingularDriftError("migration drift is undefined at zero total mass")
    flat = density.values.ravel()
    mu = coeffs.mu(pts)
    c = (pts * mu).T @ flat * grid.volume / mass
    F = pts * coeffs.growth(pts) + c[None, :]
    return np.stack([F[:, k].reshape(grid.shape) for k in range(grid.ntypes)])


# ----------------------------------------------------------------------------
# Substeps


def _minmod(a, b):
    return np.where(a * b > 0, np.sign(a) * np.minimum(np.abs(a), np.abs(b)), 0.0)


def _slopes(x: np.ndarray, axis: int) -> np.ndarray:
    """Minmod slope times ``h`` (zero-gradient ghost cells at both ends)."""
    pad = [(0, 0)] * x.ndim
    pad[axis] = (1, 1)
    xp = np.pad(x, pad, mode="edge")
    n = x.shape[axis]
    fwd = np.take(xp, np.arange(2, n + 2), axis=axis) - x
    bwd = x - np.take(xp, np.arange(0, n), axis=axis)
    return _minmod(fwd, bwd)


def _upwind_faces(x: np.ndarray, v: np.ndarray, axis: int) -> np.ndarray:
    """MUSCL-minmod face values upwinded by the face velocity ``v`` (no inflow from outside)."""
    s = _slopes(x, axis)
    zero = np.zeros_like(np.take(x, [0], axis=axis))
    xl = np.concatenate([zero, x + 0.5 * s], axis=axis)   # from the cell left of each face
    xr = np.concatenate([x - 0.5 * s, zero], axis=axis)   # from the cell right of each face
    return np.where(v > 0, xl, np.where(v < 0, xr, 0.0))


def _transport_rhs(x: np.ndarray, disc: Discretization) -> tuple[np.ndarray, float]:
    h = disc.grid.h
    out = np.zeros_like(x)
    outflow = 0.0
    for axis, v in enumerate(disc.face_velocity):
        flux = v * _upwind_faces(x, v, axis)
        n = x.shape[axis]
        out -= (np.take(flux, np.arange(1, n + 1), axis=axis) - np.take(flux, np.arange(0, n), axis=axis)) / h
        outflow += float(np.take(flux, [n], axis=axis).sum()) * disc.grid.volume / h
    return out, outflow


def transport_step(x: np.ndarray, disc: Discretization, dt: float) -> tuple[np.ndarray, float]:
    """SSP-RK2 step of the local transport; returns the new density and escaped mass."""
    if dt == 0:
        return x, 0.0
    lim = disc.cfl_limit()
    if dt > lim * (1 + 1e-12):
        raise CFLError(dt, lim)
    k1, o1 = _transport_rhs(x, disc)
    x1 = x + dt * k1
    k2, o2 = _transport_rhs(x1, disc)
    x2 = 0.5 * x + 0.5 * (x1 + dt * k2)
    np.maximum(x2, 0.0, out=x2)
    return x2, 0.5 * dt * (o1 + o2)


def shift_step(x: np.ndarray, grid: Grid, shift: Sequence[float]) -> tuple[np.ndarray, float]:
    """Translate the density by ``shift`` (nonnegative per axis), conservatively."""
    before = x.sum()
    h = grid.h
    for axis, s in enumerate(shift):
        if s < 0:
            raise ValueError("migration drift must be nonnegative")
        if s == 0:
            continue
        sl = _slopes(x, axis)
        # the reconstruction adds theta (1 - theta) h/2 sum(slopes) to the
        # first moment; shorten the shift to cancel it
        tot = float(x.sum())
        bias = float(sl.sum()) / tot if tot > 0 else 0.0
        adj = s / h
        theta = adj - math.floor(adj)
        for _ in range(3):
            adj = max(s / h - 0.5 * theta * (1.0 - theta) * bias, 0.0)
            theta = adj - math.floor(adj)
        J = int(math.floor(adj))
        right_part = x + 0.5 * (1.0 - theta) * sl
        left_part = x - 0.5 * theta * sl
        n = x.shape[axis]
        new = np.zeros_like(x)

        def place(src, offset, weight):
            # new[j] += weight * src[j - offset] for valid indices
            if offset >= n or weight == 0:
                return
            dst = [slice(None)] * x.ndim
            sec = [slice(None)] * x.ndim
            dst[axis] = slice(offset, n)
            sec[axis] = slice(0, n - offset)
            new[tuple(dst)] += weight * src[tuple(sec)]

        place(right_part, J + 1, theta)
        place(left_part, J, 1.0 - theta)
        x = new
    return x, float(before - x.sum()) * grid.volume


def reaction_step(x: np.ndarray, disc: Discretization, dt: float) -> np.ndarray:
    """Exponential midpoint for ``x' = S(x) - (phi + eps R) x`` with ``S`` the offspring source."""
    if dt == 0:
        return x
    vol = disc.grid.volume
    phi, eps = disc.phi, disc.eps
    R0 = x.sum() * vol
    a0 = phi + eps * R0
    x_half = x * np.exp(-0.5 * dt * a0) + 0.5 * dt * disc.source.forward(x)
    R_half = x_half.sum() * vol
    a_half = phi + eps * R_half
    decay = np.exp(-dt * a_half)
    out = x * decay + dt * np.exp(-0.5 * dt * a_half) * disc.source.forward(x_half)
    np.maximum(out, 0.0, out=out)
    return out


def _strang(x, disc, dt, c, order):
    esc = 0.0
    if order == "abc":
        x, e = transport_step(x, disc, 0.5 * dt); esc += e
        x, e = shift_step(x, disc.grid, 0.5 * dt * c); esc += e
        x = reaction_step(x, disc, dt)
        x, e = shift_step(x, disc.grid, 0.5 * dt * c); esc += e
        x, e = transport_step(x, disc, 0.5 * dt); esc += e
    elif order == "cba":
        x = reaction_step(x, disc, 0.5 * dt)
        x, e = shift_step(x, disc.grid, 0.5 * dt * c); esc += e
        x, e = transport_step(x, disc, dt); esc += e
        x, e = shift_step(x, disc.grid, 0.5 * dt * c); esc += e
        x = reaction_step(x, disc, 0.5 * dt)
    else:
        raise ValueError("splitting order must be 'abc' or 'cba'")
    return x, esc


def admissible_dt(disc: Discretization, order: str = "abc") -> float:
    lim = disc.cfl_limit()
    return 2.0 * lim if order == "abc" else lim


def step_density(coeffs: LimitCoefficients | Discretization, density: DensityGrid, dt: float,
                 order: str = "abc") -> DensityGrid:
    """One Strang step; the density is returned as a new ``DensityGrid``."""
    disc = coeffs if isinstance(coeffs, Discretization) else Discretization(coeffs, density.grid)
    x, _, _ = _step(disc, density.values, dt, order)
    return DensityGrid(density.grid, x, density.t + dt)


def _step(disc, x, dt, order):
    lim = admissible_dt(disc, order)
    if dt > lim * (1 + 1e-12):
        raise CFLError(dt, lim)
    if not any(np.any(w) for w in disc.mu_weight):
        c = np.zeros(disc.grid.ntypes)
        x_new, esc = _strang(x, disc, dt, c, order)
        return x_new, esc, c
    c0 = migration_drift(disc, x)
    pred, _ = _strang(x, disc, dt, c0, order)
    c_half = 0.5 * (c0 + migration_drift(disc, pred))
    x_new, esc = _strang(x, disc, dt, c_half, order)
    return x_new, esc, c_half


# ----------------------------------------------------------------------------
# Trajectories


@dataclass
class DensityTrajectory:
    grid: Grid
    coeffs: LimitCoefficients
    times: np.ndarray                 # snapshot times
    densities: list                   # arrays on grid.shape
    step_times: np.ndarray            # every step boundary
    mass: np.ndarray                  # mass at step boundaries
    moments: np.ndarray               # (steps+1, l) first moments
    drift: np.ndarray                 # (steps+1, l) migration drift c at step boundaries
    escaped: float = 0.0
    dt: float = 0.0
    order: str = "abc"

    def snapshot(self, t: float) -> DensityGrid:
        j = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[j] - t) > 1e-9:
            raise KeyError(f"no snapshot at t={t}")
        return DensityGrid(self.grid, self.densities[j], float(self.times[j]))

    def drift_at(self, t: float) -> np.ndarray:
        """Piecewise-linear interpolation of the recorded migration drift."""
        return np.array([np.interp(t, self.step_times, self.drift[:, k]) for k in range(self.grid.ntypes)])


def solve(coeffs: LimitCoefficients, x0: DensityGrid, horizon: float, dt: float,
          sample_times: Sequence[float] | None = None, *, order: str = "abc",
          mass_floor: float = 1e-12, record_all: bool = False) -> DensityTrajectory:
    """Integrate from ``x0`` to ``horizon`` with steps of at most ``dt``.

    Steps are shrunk so that every sample time is hit exactly.  With
    ``record_all`` a snapshot is kept at every step.
    """
    grid = x0.grid
    if np.any(x0.values < 0):
        raise ValueError("initial density must be nonnegative")
    if not x0.mass > 0:
        raise MassUnderflowError("initial density has zero mass")
    disc = Discretization(coeffs, grid)
    marks = sorted({0.0, float(horizon)} | {float(t) for t in (() if sample_times is None else sample_times) if 0 <= t <= horizon})
    keep = set(marks) if sample_times is not None else {0.0, float(horizon)}
    x = x0.values.astype(float).copy()
    t = 0.0
    times, dens = [0.0], [x.copy()]
    step_times, mass, moms, drifts = [0.0], [grid.integrate(x)], [DensityGrid(grid, x).moments()], []
    escaped = 0.0
    has_mu = any(np.any(w) for w in disc.mu_weight)
    drifts.append(migration_drift(disc, x) if has_mu else np.zeros(grid.ntypes))
    for a, b in zip(marks[:-1], marks[1:]):
        nsteps = max(1, int(math.ceil((b - a) / dt - 1e-9)))
        step = (b - a) / nsteps
        for s in range(nsteps):
            x, esc, _ = _step(disc, x, step, order)
            escaped += esc
            t = a + (s + 1) * step if s < nsteps - 1 else b
            R = grid.integrate(x)
            if R < mass_floor:
                raise MassUnderflowError(f"mass {R:.3e} fell below the floor {mass_floor:.1e} at t={t:.4f}")
            step_times.append(t)
            mass.append(R)
            moms.append(DensityGrid(grid, x).moments())
            drifts.append(migration_drift(disc, x) if has_mu else np.zeros(grid.ntypes))
            if record_all and s < nsteps - 1:
                times.append(t)
                dens.append(x.copy())
        if b in keep or record_all:
            times.append(b)
            dens.append(x.copy())
    return DensityTrajectory(grid, coeffs, np.array(times), dens, np.array(step_times), np.array(mass),
                             np.array(moms), np.array(drifts), escaped, dt, order)


# ----------------------------------------------------------------------------
# Characteristics


@dataclass
class FlowMap:
    s: float
    t: float
    points: np.ndarray
    forward: np.ndarray
    inverse: np.ndarray
    exits: int = 0


def _drift_schedule(schedule, ntypes):
    if schedule is None:
        return lambda t: np.zeros(ntypes)
    if isinstance(schedule, DensityTrajectory):
        return schedule.drift_at
    if callable(schedule):
        return lambda t: np.asarray(schedule(t), float)
    c = np.broadcast_to(np.asarray(schedule, float), (ntypes,)).copy()
    return lambda t: c


def _integrate_flow(coeffs, cfun, s, t, pts, step, upper):
    if s == t:
        return pts.copy(), 0
    nsteps = max(1, int(math.ceil(abs(t - s) / step - 1e-12)))
    hstep = (t - s) / nsteps
    y = pts.astype(float).copy()
    exited = np.zeros(len(y), dtype=bool)

    def F(y, tau):
        return y * coeffs.growth(y) + cfun(tau)[None, :]

    tau = s
    for _ in range(nsteps):
        k1 = F(y, tau)
        k2 = F(y + 0.5 * hstep * k1, tau + 0.5 * hstep)
        k3 = F(y + 0.5 * hstep * k2, tau + 0.5 * hstep)
        k4 = F(y + hstep * k3, tau + hstep)
        y = y + hstep / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        tau += hstep
        if upper is not None:
            out = np.any((y < 0) | (y > upper), axis=1)
            exited |= out
            np.clip(y, 0.0, upper, out=y)
        else:
            np.maximum(y, 0.0, out=y)
    return y, int(exited.sum())


def advance_flow(coeffs: LimitCoefficients, schedule, s: float, t: float, points,
                 step: float = 1e-2, upper: float | None = None) -> FlowMap:
    """Characteristics ``psi_{s,t}`` of ``du/dt = F_tau(u)`` and the inverse map.

    ``schedule`` gives the migration drift: a ``DensityTrajectory``, a
    callable of time, a constant vector, or ``None`` for zero.  The inverse
    integrates the same equation backwards from ``t`` to ``s``.
    """
    if t < s:
        raise ValueError("advance_flow needs s <= t")
    pts = np.atleast_2d(np.asarray(points, float))
    cfun = _drift_schedule(schedule, coeffs.ntypes)
    fwd, e1 = _integrate_flow(coeffs, cfun, s, t, pts, step, upper)
    inv, e2 = _integrate_flow(coeffs, cfun, t, s, pts, step, upper)
    return FlowMap(s, t, pts, fwd, inv, e1 + e2)


# ----------------------------------------------------------------------------
# Operators and checks


def apply_B(coeffs: LimitCoefficients | Discretization, mass: float, f: np.ndarray,
            grid: Grid | None = None) -> np.ndarray:
    """``B(nu) f = int f(u') phibar(u, du') - (phi(u) + eps(u) nu(R^l)) f(u)`` on the grid."""
    if mass < 0:
        raise ValueError("mass must be nonnegative")
    disc = coeffs if isinstance(coeffs, Discretization) else Discretization(coeffs, grid)
    f = np.asarray(f, float).reshape(disc.grid.shape)
    return disc.source.adjoint(f) - (disc.phi + disc.eps * mass) * f


def _numeric_gradient(f: Callable, pts: np.ndarray, delta: float = 1e-5) -> np.ndarray:
    grads = []
    for k in range(pts.shape[1]):
        e = np.zeros(pts.shape[1])
        e[k] = delta
        grads.append((np.asarray(f(pts + e), float) - np.asarray(f(pts - e), float)) / (2 * delta))
    return np.stack(grads, axis=1)


def weak_rhs(disc: Discretization, x: np.ndarray, f: Callable, grad: Callable | None = None,
             c: np.ndarray | None = None) -> float:
    """Right-hand side of the weak equation for ``d/dt <f, x>``."""
    grid = disc.grid
    pts = grid.points()
    flat = x.ravel()
    mass = flat.sum() * grid.volume
    if c is None:
        c = migration_drift(disc, x) if mass > 0 else np.zeros(grid.ntypes)
    drift = pts * disc.coeffs.growth(pts) + c[None, :]
    g = grad(pts) if grad is not None else _numeric_gradient(f, pts)
    fv = np.asarray(f(pts), float)
    transport = np.sum(g * drift, axis=1)
    react = apply_B(disc, mass, fv.reshape(grid.shape)).ravel()
    return float(np.dot(transport + react, flat) * grid.volume)


@dataclass
class WeakResidual:
    times: np.ndarray
    residual: np.ndarray

    @property
    def max_abs(self) -> float:
        return float(np.max(np.abs(self.residual))) if self.residual.size else 0.0


def weak_residual(traj: DensityTrajectory, f: Callable, grad: Callable | None = None) -> WeakResidual:
    """Central-difference ``d/dt <f, x_t>`` minus the weak right-hand side, at interior snapshots."""
    disc = Discretization(traj.coeffs, traj.grid)
    pts = traj.grid.points()
    fv = np.asarray(f(pts), float)
    pairs = np.array([float(np.dot(fv, d.ravel()) * traj.grid.volume) for d in traj.densities])
    t = traj.times
    if len(t) < 3:
        return WeakResidual(np.zeros(0), np.zeros(0))
    res = []
    for j in range(1, len(t) - 1):
        h1, h2 = t[j] - t[j - 1], t[j + 1] - t[j]
        deriv = (-(h2 / (h1 * (h1 + h2))) * pairs[j - 1] + ((h2 - h1) / (h1 * h2)) * pairs[j]
                 + (h1 / (h2 * (h1 + h2))) * pairs[j + 1])
        rhs = weak_rhs(disc, traj.densities[j], f, grad, traj.drift_at(t[j]))
        res.append(deriv - rhs)
    return WeakResidual(t[1:-1], np.array(res))


@dataclass
class MildCheck:
    lhs: float
    rhs: float

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)


def mild_solution_check(coeffs: LimitCoefficients, traj: DensityTrajectory, f: Callable, t: float,
                        flow_step: float = 1e-2) -> MildCheck:
    """Both sides of ``<f, x_t> = <U_{0,t} f, x_0> + int_0^t <B(x_s) U_{s,t} f, x_s> ds``.

    The time integral uses the trapezoid rule over the snapshots in ``[0, t]``.
    """
    grid = traj.grid
    pts = grid.points()
    vol = grid.volume
    end = traj.snapshot(t)
    lhs = float(np.dot(np.asarray(f(pts), float), end.values.ravel()) * vol)
    if t == 0:
        return MildCheck(lhs, lhs)
    disc = Discretization(coeffs, grid)
    idx = [j for j, s in enumerate(traj.times) if s <= t + 1e-12]
    svals, integrand = [], []
    first = None
    for j in idx:
        s = float(traj.times[j])
        x = traj.densities[j]
        flow = advance_flow(coeffs, traj, s, t, pts, step=flow_step)
        pulled = np.asarray(f(flow.forward), float).reshape(grid.shape)
        if j == idx[0]:
            first = float(np.sum(pulled * x) * vol)
        mass = x.sum() * vol
        integrand.append(float(np.sum(apply_B(disc, mass, pulled) * x) * vol))
        svals.append(s)
    integral = float(_trapezoid(integrand, svals)) if len(svals) > 1 else 0.0
    return MildCheck(lhs, first + integral)


def moment_ode(coeffs: LimitCoefficients, mass: float, moment, density: DensityGrid | None = None):
    """``(dR/dt, dI/dt)`` for ``R = int x`` and ``I_k = int u_k x``.

    The first-moment equation relies on offspring conserving the parent's
    composition, so non-conservative kernels are refused.  Without a
    density the coefficients must be constant.
    """
    kern = coeffs.kernel
    if not kern.conservative:
        raise ValueError("moment equations need a conservative fission kernel")
    moment = np.broadcast_to(np.asarray(moment, float), (coeffs.ntypes,))
    if density is None:
        if not coeffs.is_constant():
            raise ValueError("non-constant coefficients need the density to close the moment equations")
        z = np.ones((1, coeffs.ntypes))
        net = coeffs.net_birth(z)[0]
        eps = float(coeffs.eps(z)[0])
        phi = float(coeffs.phi(z)[0])
        pieces = float(kern.moments(z)[0][0] / phi) if phi else 0.0
        dR = (pieces - 1.0) * phi * mass - eps * mass * mass
        dI = net * moment - eps * mass * moment
        return dR, dI
    grid = density.grid
    pts = grid.points()
    x = density.values.ravel()
    vol = grid.volume
    kmass, _ = kern.moments(pts)
    phi = coeffs.phi(pts)
    eps = coeffs.eps(pts)
    dR = float(np.dot(kmass - phi, x) * vol - mass * np.dot(eps, x) * vol)
    dI = (pts * coeffs.net_birth(pts)).T @ x * vol - mass * (pts * eps[:, None]).T @ x * vol
    return dR, dI


def rk4_moments(coeffs: LimitCoefficients, mass0: float, moment0, horizon: float, step: float = 1e-3):
    """Integrate the constant-coefficient moment equations with classical RK4."""
    y = np.concatenate([[mass0], np.broadcast_to(np.asarray(moment0, float), (coeffs.ntypes,))])

    def F(y):
        dR, dI = moment_ode(coeffs, y[0], y[1:])
        return np.concatenate([[dR], dI])

    n = max(1, int(math.ceil(horizon / step)))
    hs = horizon / n
    ts = [0.0]
    out = [y.copy()]
    for j in range(n):
        k1 = F(y)
        k2 = F(y + 0.5 * hs * k1)
        k3 = F(y + 0.5 * hs * k2)
        k4 = F(y + hs * k3)
        y = y + hs / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        ts.append((j + 1) * hs)
        out.append(y.copy())
    return np.array(ts), np.array(out)
