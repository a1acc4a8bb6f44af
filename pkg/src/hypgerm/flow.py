"""Normal Riccati flow, Fermi metric and the trace dynamics in the phase plane.

Pointwise, with ``gamma`` and ``mu`` expressed in the orthonormal frame of
``g`` at ``t = 0``, the flow is

    d gamma / dt = 2 gamma mu,     d mu / dt = -mu^2 + I / 6,

with ``gamma(0) = I`` and ``mu(0) = m``.  The ambient metric is
``gamma_AB dz^A dz^B + dt^2``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .germ import Germ, norm_squared
from .surface import covariant_derivative, scalar_curvature

SQRT6 = np.sqrt(6.0)
DECAY_RATE = np.sqrt(2.0 / 3.0)
MU_CAP = 1e6
STENCIL_H = 1e-2
IDENTITY = np.eye(2)


class BlowUpError(RuntimeError):
    """Finite-time escape of the Riccati flow."""

    def __init__(self, message, vertex=None, time=None):
        super().__init__(message)
        self.vertex = vertex
        self.time = time


class StepUnderflowError(RuntimeError):
    """Adaptive step halving went below the minimum step."""


# ---------------------------------------------------------------------------
# Matrix Riccati integration

def riccati_rhs(gamma: np.ndarray, mu: np.ndarray):
    """Right-hand side of the pointwise flow for stacked 2x2 matrices."""
    return 2.0 * gamma @ mu, -mu @ mu + IDENTITY / 6.0


def riccati_step(gamma: np.ndarray, mu: np.ndarray, dt: float):
    """One classical RK4 step."""
    k1g, k1m = riccati_rhs(gamma, mu)
    k2g, k2m = riccati_rhs(gamma + 0.5 * dt * k1g, mu + 0.5 * dt * k1m)
    k3g, k3m = riccati_rhs(gamma + 0.5 * dt * k2g, mu + 0.5 * dt * k2m)
    k4g, k4m = riccati_rhs(gamma + dt * k3g, mu + dt * k3m)
    return (gamma + dt / 6.0 * (k1g + 2 * k2g + 2 * k3g + k4g),
            mu + dt / 6.0 * (k1m + 2 * k2m + 2 * k3m + k4m))


@dataclass
class FlowTrajectory:
    """Sampled solution of the Riccati flow at one or many points.

    Attributes
    ----------
    t : (T,) array
    gamma, mu : (T, n, 2, 2) arrays
    blowup : dict
        Vertex index -> escape time for trajectories that hit the cap.
    """

    t: np.ndarray
    gamma: np.ndarray
    mu: np.ndarray
    blowup: dict = field(default_factory=dict)

    @property
    def x(self) -> np.ndarray:
        return np.trace(self.mu, axis1=-2, axis2=-1)

    @property
    def y(self) -> np.ndarray:
        return np.trace(self.mu @ self.mu, axis1=-2, axis2=-1)

    @property
    def nu(self) -> np.ndarray:
        return self.mu - 0.5 * self.x[..., None, None] * IDENTITY

    @property
    def nu_norm(self) -> np.ndarray:
        return np.sqrt(norm_squared(self.nu))


def integrate_riccati(gamma0, mu0, t_end: float, dt: float = 1e-3,
                      t_eval: Optional[Sequence[float]] = None, store_all: bool = True,
                      raise_on_blowup: bool = False, min_dt: float = 1e-12) -> FlowTrajectory:
    """Integrate the pointwise flow for a stack of initial conditions.

    Steps of size ``dt`` (negative for backward flow) are halved while the
    norm of ``mu`` grows by more than 10% of ``max(|mu|, 1/sqrt(6))`` in a
    step.  A point whose ``|mu|`` exceeds ``1e6`` is frozen and recorded in
    ``blowup``.

    Parameters
    ----------
    gamma0, mu0 : array (..., 2, 2)
    t_end : float
        Final time (sign fixes the direction).
    dt : float
        Base step size (its sign is ignored).
    t_eval : sequence of float, optional
        Times at which to store the state (always hit exactly).
    store_all : bool
        Store every accepted step when ``t_eval`` is not given.
    """
    gamma = np.array(gamma0, dtype=float)
    mu = np.array(mu0, dtype=float)
    single = gamma.ndim == 2
    if single:
        gamma, mu = gamma[None], mu[None]
    if np.any(np.linalg.eigvalsh(0.5 * (gamma + np.swapaxes(gamma, 1, 2))) <= 0):
        raise ValueError("gamma0 must be symmetric positive definite")
    direction = 1.0 if t_end >= 0 else -1.0
    h0 = abs(dt) * direction
    if t_eval is None:
        targets = [t_end]
    else:
        targets = sorted({float(t) for t in t_eval if direction * t >= 0 and direction * (t_end - t) >= 0},
                         key=lambda s: direction * s)
    n = len(gamma)
    alive = np.ones(n, dtype=bool)
    blowup = {}
    ts, gs, ms = [0.0], [gamma.copy()], [mu.copy()]
    t = 0.0
    target_idx = 0
    while target_idx < len(targets):
        target = targets[target_idx]
        if direction * (target - t) <= 1e-14 * max(1.0, abs(target)):
            if t_eval is not None and (ts[-1] != target):
                ts.append(target)
                gs.append(gamma.copy())
                ms.append(mu.copy())
            target_idx += 1
            continue
        h = h0
        if direction * (t + h - target) > 0:
            h = target - t
        while True:
            g_new, m_new = riccati_step(gamma[alive], mu[alive], h)
            old = np.sqrt(norm_squared(mu[alive]))
            new = np.sqrt(norm_squared(m_new))
            finite = np.all(np.isfinite(new))
            grow = np.any(new - old > 0.1 * np.maximum(old, 1.0 / SQRT6)) if finite else True
            if not grow:
                break
            h *= 0.5
            if abs(h) < min_dt:
                bad = np.flatnonzero(alive)[np.argmax(np.where(np.isfinite(new), new, np.inf))] \
                    if finite else int(np.flatnonzero(alive)[0])
                raise StepUnderflowError(f"step underflow near t = {t:.6g} at vertex {bad}")
        idx = np.flatnonzero(alive)
        gamma[idx], mu[idx] = g_new, m_new
        t = t + h
        over = idx[new > MU_CAP]
        for v in over:
            blowup[int(v)] = t
            alive[v] = False
        if len(over) and raise_on_blowup:
            raise BlowUpError(f"flow escapes at vertex {int(over[0])}, t = {t:.6g}", int(over[0]), t)
        if not alive.any():
            break
        if t_eval is None and store_all:
            ts.append(t)
            gs.append(gamma.copy())
            ms.append(mu.copy())
    if t_eval is None and not store_all and ts[-1] != t:
        ts.append(t)
        gs.append(gamma.copy())
        ms.append(mu.copy())
    traj = FlowTrajectory(np.array(ts), np.array(gs), np.array(ms), blowup)
    if single:
        traj.gamma, traj.mu = traj.gamma[:, 0], traj.mu[:, 0]
    return traj


def flow_point(gamma0, mu0, t_span, dt: float = 1e-3) -> FlowTrajectory:
    """Flow a single point over ``[0, t_end]`` storing every step."""
    t_end = t_span[1] if np.ndim(t_span) else float(t_span)
    return integrate_riccati(gamma0, mu0, t_end, dt)


def fuchsian_closed_form(t):
    """``(gamma, mu)`` factors of the isotropic solution: ``cosh^2(t/sqrt6)``, ``tanh(t/sqrt6)/sqrt6``."""
    t = np.asarray(t, dtype=float)
    return np.cosh(t / SQRT6) ** 2, np.tanh(t / SQRT6) / SQRT6


def eigenvalue_closed_form(lam0, t):
    """Scalar solution of ``l' = -l^2 + 1/6`` with ``l(0) = lam0``."""
    t = np.asarray(t, dtype=float)
    a = 1.0 / SQRT6
    if abs(lam0) < a:
        c = np.arctanh(lam0 / a)
        return a * np.tanh(t / SQRT6 + c)
    if abs(lam0) == a:
        return np.full_like(t, lam0)
    c = np.arctanh(a / lam0)
    return a / np.tanh(t / SQRT6 + c)


# ---------------------------------------------------------------------------
# Surface flow

@dataclass
class FermiMetric:
    """Ambient metric ``gamma_AB(t, z) dz^A dz^B + dt^2`` on a germ's mesh.

    ``gamma`` is stored per class in the orthonormal frame of the germ's
    metric at ``t = 0``.
    """

    germ: Germ
    t: np.ndarray
    gamma: np.ndarray
    mu: np.ndarray
    blowup: dict = field(default_factory=dict)

    def chart_gamma(self, k: int) -> np.ndarray:
        """Chart components of ``gamma`` at time index ``k`` and chart vertices."""
        mesh = self.germ.mesh
        return mesh.expand(self.gamma[k]) * self.germ.g.chart_lam[:, None, None]

    def line_element(self, k: int) -> np.ndarray:
        """3x3 ambient metric in the orthonormal frame at time index ``k``."""
        n = self.gamma.shape[1]
        out = np.zeros((n, 3, 3))
        out[:, :2, :2] = self.gamma[k]
        out[:, 2, 2] = 1.0
        return out


def flow_surface(germ: Germ, t_span, dt: float = 1e-3, t_eval=None) -> FermiMetric:
    """Integrate the flow at every vertex with ``gamma(0) = I``, ``mu(0) = m``.

    Raises
    ------
    BlowUpError
        If any vertex escapes; the message names the vertex and time.
    """
    t_end = t_span[1] if np.ndim(t_span) else float(t_span)
    n = germ.mesh.n_classes
    gamma0 = np.broadcast_to(IDENTITY, (n, 2, 2))
    if t_eval is None:
        t_eval = np.linspace(0.0, t_end, 11)
    # stop at the first escape rather than resolving every later one
    traj = integrate_riccati(gamma0, germ.m, t_end, dt, t_eval=t_eval, raise_on_blowup=True)
    return FermiMetric(germ, traj.t, traj.gamma, traj.mu)


class RiccatiFlow(BaseEstimator):
    """Estimator wrapper of :func:`flow_surface`; ``fit(germ)`` sets ``fermi_``."""

    def __init__(self, t_end: float = 10.0, dt: float = 1e-3, n_samples: int = 11):
        self.t_end = t_end
        self.dt = dt
        self.n_samples = n_samples

    def fit(self, germ: Germ, y=None):
        t_eval = np.linspace(0.0, self.t_end, self.n_samples)
        self.fermi_ = flow_surface(germ, (0.0, self.t_end), self.dt, t_eval)
        return self


def expansion_deviation(germ: Germ, t_values, dt: float = 1e-3) -> np.ndarray:
    """Max over vertices of ``|gamma(t) - (g + 2tm + t^2/2 (|m|^2 + 1/3) g)|_g``."""
    t_values = np.atleast_1d(np.asarray(t_values, dtype=float))
    if np.any(np.abs(t_values) > 0.2 + 1e-12):
        raise ValueError("expansion check expects |t| <= 0.2")
    n = germ.mesh.n_classes
    out = np.zeros(len(t_values))
    m2 = norm_squared(germ.m)
    for sign in (1.0, -1.0):
        sel = np.flatnonzero(np.sign(t_values) == sign)
        if len(sel) == 0:
            continue
        traj = integrate_riccati(np.broadcast_to(IDENTITY, (n, 2, 2)), germ.m,
                                 float(np.max(np.abs(t_values[sel]))) * sign, dt, t_eval=t_values[sel])
        for i in sel:
            k = int(np.argmin(np.abs(traj.t - t_values[i])))
            t = traj.t[k]
            model = IDENTITY + 2 * t * germ.m + 0.5 * t**2 * (m2 + 1.0 / 3.0)[:, None, None] * IDENTITY
            out[i] = np.sqrt(norm_squared(traj.gamma[k] - model)).max()
    return out


def expansion_check(germ: Germ, t_small: float, dt: float = 1e-3) -> float:
    """Deviation of the flow metric from its second-order expansion at ``t_small``."""
    if abs(t_small) > 0.1 + 1e-12:
        raise ValueError("t_small must satisfy |t| <= 0.1")
    if t_small == 0:
        return 0.0
    return float(expansion_deviation(germ, [t_small], dt)[0])


def expansion_order(germ: Germ, t_values=(0.025, 0.05, 0.1, 0.2), dt: float = 1e-3) -> float:
    """Least-squares log-log slope of the expansion deviation."""
    t = np.asarray(t_values, dtype=float)
    dev = expansion_deviation(germ, t, dt)
    return float(np.polyfit(np.log(t), np.log(dev), 1)[0])


def _stencil_derivatives(germ: Germ, h: float = STENCIL_H, dt: float = 1e-3):
    """``Gamma'(0)`` and ``Gamma''(0)`` from 5-point centred stencils."""
    n = germ.mesh.n_classes
    g0 = np.broadcast_to(IDENTITY, (n, 2, 2))
    fwd = integrate_riccati(g0, germ.m, 2 * h, dt, t_eval=[h, 2 * h])
    bwd = integrate_riccati(g0, germ.m, -2 * h, dt, t_eval=[-h, -2 * h])
    G = {0.0: np.array(g0)}
    for tr in (fwd, bwd):
        for k, t in enumerate(tr.t):
            if t != 0.0:
                G[round(t / h)] = tr.gamma[k]
    Gm2, Gm1, G0, Gp1, Gp2 = G[-2], G[-1], G[0.0], G[1], G[2]
    d1 = (Gm2 - 8 * Gm1 + 8 * Gp1 - Gp2) / (12 * h)
    d2 = (-Gm2 + 16 * Gm1 - 30 * G0 + 16 * Gp1 - Gp2) / (12 * h**2)
    return d1, d2


def ambient_ricci(germ: Germ, h: float = STENCIL_H, dt: float = 1e-3,
                  curvature_method: str = "fit") -> np.ndarray:
    """Ricci tensor of the Fermi metric at ``t = 0`` in the orthonormal frame.

    Gaussian normal formulas with ``K = Gamma'/2``:

    * ``R_tt = -tr S' - tr S^2`` with ``S' = Gamma''/2 - Gamma'^2/2``,
    * ``R_tA = d_B K_BA - d_A tr K``,
    * ``R_AB = (r/2) delta_AB - Gamma''_AB/2 - tr(K) K_AB + 2 (K^2)_AB``.

    The intrinsic curvature ``r`` is evaluated with ``curvature_method``
    (least-squares fits by default, independent of the germ solver).
    Index 2 is the normal direction.
    """
    d1, d2 = _stencil_derivatives(germ, h, dt)
    g = germ.g
    K = 0.5 * d1
    K = 0.5 * (K + np.swapaxes(K, 1, 2))
    trK = np.trace(K, axis1=1, axis2=2)
    Sp = 0.5 * d2 - 0.5 * d1 @ d1
    KK = K @ K
    n = g.mesh.n_classes
    R = np.zeros((n, 3, 3))
    R[:, 2, 2] = -np.trace(Sp, axis1=1, axis2=2) - np.trace(KK, axis1=1, axis2=2)
    dK = covariant_derivative(K, g)
    div = np.einsum("qbba->qa", dK)
    dtr = covariant_derivative(trK, g)
    R[:, :2, 2] = div - dtr
    R[:, 2, :2] = div - dtr
    r = scalar_curvature(g, curvature_method)
    R[:, :2, :2] = (0.5 * r[:, None, None] * IDENTITY - 0.5 * d2 - trK[:, None, None] * K + 2 * KK)
    return R


def ambient_einstein_residual(germ: Germ, h: float = STENCIL_H, dt: float = 1e-3,
                              curvature_method: str = "fit") -> float:
    """``max |R_ij + g_ij / 3|`` at ``t = 0``."""
    R = ambient_ricci(germ, h, dt, curvature_method)
    return float(np.abs(R + np.eye(3) / 3.0).max())


def mean_curvature_check(germ: Germ, h: float = STENCIL_H, dt: float = 1e-3):
    """``(max |tr kappa|, max |kappa - m|)`` with ``kappa = Gamma'(0)/2``."""
    d1, _ = _stencil_derivatives(germ, h, dt)
    kappa = 0.5 * d1
    return (float(np.abs(np.trace(kappa, axis1=1, axis2=2)).max()),
            float(np.sqrt(norm_squared(kappa - germ.m)).max()))


def principal_curvature_margin(germ_or_m) -> float:
    """``sqrt(6) max |lambda|`` over principal curvatures; below 1 inside U."""
    m = germ_or_m.m if isinstance(germ_or_m, Germ) else np.asarray(germ_or_m)
    lam = np.linalg.eigvalsh(0.5 * (m + np.swapaxes(m, -1, -2)))
    return float(np.abs(lam).max() * SQRT6)


# ---------------------------------------------------------------------------
# Phase plane

def phase_rhs(x, y):
    return -y + 1.0 / 3.0, -x * (3 * y - x**2 - 1.0 / 3.0)


def phase_trajectory(x0: float, y0: float, t_span, dt: float = 1e-3) -> np.ndarray:
    """RK4 path of the trace dynamics; returns columns ``t, x, y``."""
    if y0 < 0.5 * x0**2 - 1e-15:
        raise ValueError("unrealizable start: need y0 >= x0^2 / 2")
    t_end = t_span[1] if np.ndim(t_span) else float(t_span)
    n = int(round(abs(t_end) / dt))
    h = t_end / n if n else 0.0
    out = np.empty((n + 1, 3))
    x, y = float(x0), float(y0)
    out[0] = 0.0, x, y
    for k in range(1, n + 1):
        k1 = phase_rhs(x, y)
        k2 = phase_rhs(x + 0.5 * h * k1[0], y + 0.5 * h * k1[1])
        k3 = phase_rhs(x + 0.5 * h * k2[0], y + 0.5 * h * k2[1])
        k4 = phase_rhs(x + h * k3[0], y + h * k3[1])
        x += h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        y += h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        out[k] = k * h, x, y
    return out


def trapping_check(path: np.ndarray, tol: float = 1e-12):
    """Check the trapping region and the identity for ``w = y - x^2/2``.

    Returns ``(trapped, margin, identity_residual)`` where ``margin`` is the
    smallest slack of ``0 <= x``, ``x^2/2 <= y <= 1/3`` and the residual is
    ``max |w' + 2 x w|`` with ``w'`` from fourth-order differences.
    """
    t, x, y = path[:, 0], path[:, 1], path[:, 2]
    slack = np.minimum.reduce([x, y - 0.5 * x**2, 1.0 / 3.0 - y])
    margin = float(slack.min())
    w = y - 0.5 * x**2
    h = t[1] - t[0]
    dw = (w[:-4] - 8 * w[1:-3] + 8 * w[3:-1] - w[4:]) / (12 * h)
    resid = float(np.abs(dw + 2 * x[2:-2] * w[2:-2]).max()) if len(w) > 4 else 0.0
    return margin >= -tol, margin, resid


def traceless_matrix(lam0: float) -> np.ndarray:
    return np.diag([lam0, -lam0])


def traceless_decay(traj: FlowTrajectory, floor: float = 1e-13):
    """Least-squares slope of ``log |nu|`` over the last half of the trajectory.

    Returns ``None`` (undefined rate) when ``nu`` vanishes identically.
    """
    nu = traj.nu_norm
    if nu.ndim > 1:
        nu = nu[:, 0]
    t = traj.t
    keep = (t >= 0.5 * t[-1]) & (nu >= floor)
    if np.all(nu < floor) or keep.sum() < 2:
        return None
    return float(np.polyfit(t[keep], np.log(nu[keep]), 1)[0])


def asymptotic_metric(traj: FlowTrajectory, times=(15.0, 20.0)):
    """Estimates ``gamma(t) exp(-sqrt(2/3) t)`` at the given times.

    Returns ``(estimates, relative_change, spd)``.
    """
    ests = []
    for s in times:
        k = int(np.argmin(np.abs(traj.t - s)))
        ests.append(traj.gamma[k] * np.exp(-DECAY_RATE * traj.t[k]))
    a, b = ests[-2], ests[-1]
    rel = float(np.sqrt(norm_squared(a - b)).max() / np.sqrt(norm_squared(b)).max())
    spd = bool(np.all(np.linalg.eigvalsh(0.5 * (b + np.swapaxes(b, -1, -2))) > 0))
    return ests, rel, spd


def trajectory_rows(traj: FlowTrajectory, vertex: int = 0):
    """Rows for the trajectory CSV at one point."""
    g = traj.gamma if traj.gamma.ndim == 3 else traj.gamma[:, vertex]
    m = traj.mu if traj.mu.ndim == 3 else traj.mu[:, vertex]
    x = np.trace(m, axis1=1, axis2=2)
    y = np.trace(m @ m, axis1=1, axis2=2)
    nu = np.sqrt(norm_squared(m - 0.5 * x[:, None, None] * IDENTITY))
    for k in range(len(traj.t)):
        yield (float(traj.t[k]), float(x[k]), float(y[k]), float(nu[k]),
               float(g[k, 0, 0]), float(g[k, 0, 1]), float(g[k, 1, 1]),
               float(m[k, 0, 0]), float(m[k, 0, 1]), float(m[k, 1, 0]), float(m[k, 1, 1]))


TRAJECTORY_HEADER = ["t", "x", "y", "nu_norm", "gamma_11", "gamma_12", "gamma_22",
                     "mu_11", "mu_12", "mu_21", "mu_22"]
PHASE_HEADER = ["t", "x", "y"]
