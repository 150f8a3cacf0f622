"""Regression Monte Carlo dual bound for the worst-case price.

The dual value at (t0, x0) is the supremum, over piecewise-constant
adverse/shake controls on a knot lattice, of backward-SDE values whose
forward state runs under shifted coefficients and whose terminal data is the
payoff raised by 2 eps. Backward induction regresses one-step values on
polynomial features of the forward state (with the martingale-increment
estimator for the Z slot) and takes the pointwise maximum across controls;
with eps = 0 the estimate converges to the primal PDE price from below as
the lattice refines.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import product

import numpy as np

from .model import HedgeGameError, ModelSpec, shake_lattice

_BOOTSTRAP = 200


@dataclass(frozen=True)
class ControlLattice:
    """Knot grid and control points for piecewise-constant adverse play."""

    time_knots: tuple
    gamma_points: tuple  # pairs (a_point, base-point shift in R^{d+1})
    substeps: int = 25

    def __post_init__(self):
        knots = tuple(float(t) for t in self.time_knots)
        object.__setattr__(self, "time_knots", knots)
        if len(knots) < 2 or any(b <= a for a, b in zip(knots, knots[1:])):
            raise HedgeGameError("time_knots must be strictly increasing with >= 2 entries")
        gp = tuple(
            (np.asarray(a, dtype=float).reshape(-1), np.asarray(b, dtype=float).reshape(-1))
            for a, b in self.gamma_points
        )
        object.__setattr__(self, "gamma_points", gp)
        if len(gp) == 0:
            raise HedgeGameError("gamma_points must be nonempty")
        if self.substeps < 1:
            raise HedgeGameError("substeps must be >= 1")


def make_lattice(model: ModelSpec, t0: float, n_intervals: int, eps: float,
                 substeps: int = 25) -> ControlLattice:
    """Uniform knots on [t0, T]; controls = adverse points x shake lattice."""
    knots = np.linspace(t0, model.horizon_T, n_intervals + 1)
    shakes = shake_lattice(eps, model.dim)
    gamma = [(a, b) for a in model.A_points for b in shakes]
    return ControlLattice(tuple(knots), tuple(gamma), substeps)


@dataclass
class DualEstimate:
    value: float
    std_error: float
    n_paths: int
    basis_degree: int
    knot_count: int
    eps: float
    seed: int

    def to_dict(self):
        return {
            "value": self.value, "std_error": self.std_error,
            "n_paths": self.n_paths, "basis_degree": self.basis_degree,
            "knot_count": self.knot_count, "eps": self.eps, "seed": self.seed,
        }


# ---------------------------------------------------------------------------
# polynomial regression helpers
# ---------------------------------------------------------------------------


class _Basis:
    """Tensor monomials of the state, standardised for conditioning."""

    def __init__(self, xs: np.ndarray, degree: int):
        self.degree = int(degree)
        self.mean = xs.mean(axis=0)
        self.std = np.where(xs.std(axis=0) > 1e-12, xs.std(axis=0), 1.0)
        d = xs.shape[1]
        self.powers = [p for p in product(range(self.degree + 1), repeat=d)]

    def features(self, xs: np.ndarray) -> np.ndarray:
        z = (xs - self.mean) / self.std
        cols = [np.prod([z[:, i] ** p[i] for i in range(z.shape[1])], axis=0)
                for p in self.powers]
        return np.stack(cols, axis=1)


def _fit(basis: _Basis, xs: np.ndarray, ys: np.ndarray):
    """Least squares onto the basis, reducing degree on rank deficiency."""
    B = basis.features(xs)
    coef, _, rank, _ = np.linalg.lstsq(B, ys, rcond=None)
    if rank < B.shape[1] and basis.degree > 0:
        warnings.warn(
            f"rank-deficient regression (rank {rank} < {B.shape[1]}); "
            f"falling back to degree {basis.degree - 1}",
            RuntimeWarning,
        )
        smaller = _Basis(xs, basis.degree - 1)
        return _fit(smaller, xs, ys)
    return basis, coef


class _PolyMax:
    """Pointwise maximum of per-control regression polynomials."""

    def __init__(self, fits):
        self.fits = fits  # list of (basis, coef)

    def __call__(self, xs: np.ndarray) -> np.ndarray:
        vals = np.stack([b.features(xs) @ c for b, c in self.fits], axis=0)
        return vals.max(axis=0)


# ---------------------------------------------------------------------------
# forward segments under shifted coefficients
# ---------------------------------------------------------------------------


def _euler_segment(model, gamma, t_from, t_to, X0, substeps, rng):
    """Euler forward run under one control; returns endpoint and summed dW."""
    a, b = gamma
    T = model.horizon_T
    n, d = X0.shape
    dt = (t_to - t_from) / substeps
    sq = np.sqrt(dt)
    X = X0.copy()
    dW_sum = np.zeros((n, d))
    for m in range(substeps):
        s = t_from + m * dt
        t_eff = min(max(s + b[0], 0.0), T)
        x_eff = X + b[1:]
        dW = rng.standard_normal((n, d)) * sq
        mu = np.asarray(model.mu_X(t_eff, x_eff, a), dtype=float)
        sig = np.asarray(model.sigma_X(t_eff, x_eff, a), dtype=float)
        X = X + mu * dt + np.einsum("...ij,...j->...i", sig, dW)
        dW_sum += dW
    return X, dW_sum


def _driver(model, gamma, t, xs, ys, zs):
    """Hedged wealth drift at the shifted base point (the BSDE driver)."""
    a, b = gamma
    t_eff = min(max(t + b[0], 0.0), model.horizon_T)
    x_eff = xs + b[1:]
    u = model.u_hat(t_eff, x_eff, ys, zs, a)
    return np.asarray(model.mu_Y(t_eff, x_eff, ys, u, a), dtype=float)


# ---------------------------------------------------------------------------
# backward induction
# ---------------------------------------------------------------------------


def _training_cloud(model, lattice, x0, n_paths, rng_mix, rng_path):
    """Forward states at every knot under randomly mixed controls.

    ``x0`` may be a single point (tiled across paths) or a full start cloud
    of shape (n_paths, d).
    """
    knots = lattice.time_knots
    d = model.dim
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim <= 1:
        X = np.tile(x0.reshape(1, d), (n_paths, 1))
    else:
        X = x0.copy()
    clouds = [X.copy()]
    n_g = len(lattice.gamma_points)
    for j in range(len(knots) - 1):
        pick = rng_mix.integers(0, n_g, n_paths)
        X_next = np.empty_like(X)
        for i in range(n_g):
            mask = pick == i
            if not np.any(mask):
                continue
            X_next[mask], _ = _euler_segment(
                model, lattice.gamma_points[i], knots[j], knots[j + 1],
                X[mask], lattice.substeps, rng_path,
            )
        X = X_next
        clouds.append(X.copy())
    return clouds


def _terminal_payoff(model, eps):
    def terminal_fn(xs):
        return np.asarray(model.payoff_g(xs), dtype=float) + 2.0 * eps

    return terminal_fn


def _fit_tables(model, eps, lattice, clouds, degree, rng_branch, terminal_fn):
    """Backward regression sweep over knots.

    At each knot the one-step BSDE value under every control is regressed on
    state features (with the martingale-increment estimator for the z slot)
    and the pointwise maximum of the fitted polynomials becomes the
    continuation function. Returns per-knot per-control fits plus the
    knot-0 continuation function.
    """
    knots = lattice.time_knots
    tables = [None] * (len(knots) - 1)
    V_next = terminal_fn
    for j in range(len(knots) - 2, -1, -1):
        xj = clouds[j]
        dtau = knots[j + 1] - knots[j]
        deg = 0 if bool(np.all(xj.std(axis=0) < 1e-12)) else degree
        row = []
        for gamma in lattice.gamma_points:
            x_end, dW = _euler_segment(model, gamma, knots[j], knots[j + 1],
                                       xj, lattice.substeps, rng_branch)
            y_next = np.asarray(V_next(x_end), dtype=float)
            basis = _Basis(xj, deg)
            b_y, c_y = _fit(basis, xj, y_next)
            yhat = b_y.features(xj) @ c_y
            resid = y_next - yhat
            z_fits = []
            zhat = np.empty((xj.shape[0], model.dim))
            for kdim in range(model.dim):
                b_z, c_z = _fit(basis, xj, resid * dW[:, kdim] / dtau)
                z_fits.append((b_z, c_z))
                zhat[:, kdim] = b_z.features(xj) @ c_z
            f = _driver(model, gamma, knots[j], xj, yhat, zhat)
            v_fit = _fit(basis, xj, yhat - dtau * f)
            row.append({"v": v_fit, "y": (b_y, c_y), "z": z_fits})
        tables[j] = row
        V_next = _PolyMax([r["v"] for r in row])
    return tables, V_next


def _policy_rollout(model, eps, lattice, x0, tables, n_paths, rng):
    """Simulate fresh paths under the fitted control policy.

    Per knot each path plays the control whose fitted value polynomial is
    largest (ties to the lowest index). Returns the per-knot states, the
    chosen control indices and the per-segment Brownian sums.
    """
    knots = lattice.time_knots
    d = model.dim
    X = np.tile(np.asarray(x0, dtype=float).reshape(1, d), (n_paths, 1))
    states = [X.copy()]
    picks = []
    dWs = []
    for j in range(len(knots) - 1):
        row = tables[j]
        scores = np.stack([b.features(X) @ c for b, c in (r["v"] for r in row)], axis=0)
        pick = np.argmax(scores, axis=0)
        X_next = np.empty_like(X)
        dW = np.empty_like(X)
        for i in range(len(row)):
            mask = pick == i
            if not np.any(mask):
                continue
            X_next[mask], dW[mask] = _euler_segment(
                model, lattice.gamma_points[i], knots[j], knots[j + 1],
                X[mask], lattice.substeps, rng,
            )
        X = X_next
        states.append(X.copy())
        picks.append(pick)
        dWs.append(dW)
    return states, picks, dWs


def _policy_value(model, lattice, states, picks, dWs, terminal_fn, degree):
    """Backward BSDE evaluation along the frozen-policy paths.

    Conditional (y, z) are re-regressed on the policy's own state
    distribution, so the driver correction is measure-consistent; the mean
    of the per-path values is then a lower bound for the control supremum
    up to Monte Carlo noise and knot-discretisation error.
    """
    knots = lattice.time_knots
    d = model.dim
    Y = np.asarray(terminal_fn(states[-1]), dtype=float)
    for j in range(len(knots) - 2, -1, -1):
        xj = states[j]
        dtau = knots[j + 1] - knots[j]
        deg = 0 if bool(np.all(xj.std(axis=0) < 1e-12)) else degree
        basis = _Basis(xj, deg)
        b_y, c_y = _fit(basis, xj, Y)
        yhat = b_y.features(xj) @ c_y
        resid = Y - yhat
        zhat = np.empty((xj.shape[0], d))
        for kdim in range(d):
            b_z, c_z = _fit(basis, xj, resid * dWs[j][:, kdim] / dtau)
            zhat[:, kdim] = b_z.features(xj) @ c_z
        f = np.empty(xj.shape[0])
        for i, gamma in enumerate(lattice.gamma_points):
            mask = picks[j] == i
            if not np.any(mask):
                continue
            f[mask] = _driver(model, gamma, knots[j], xj[mask], yhat[mask], zhat[mask])
        Y = Y - dtau * f
    return Y


def dual_value_lsmc(model: ModelSpec, eps: float, t0: float, x0, lattice: ControlLattice,
                    basis_degree: int, n_paths: int, seed: int,
                    terminal_fn=None) -> DualEstimate:
    """Dual estimate at (t0, x0) with a bootstrap standard error.

    Regression pass first, then an independent rollout of the fitted control
    policy; the reported value is the rollout mean. Collapsing lattices
    (t0 = T) return the terminal data exactly.
    """
    if basis_degree < 0:
        raise HedgeGameError("basis_degree must be >= 0")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    T = model.horizon_T
    if T - t0 <= 1e-12:
        g = float(np.asarray(model.payoff_g(x0.reshape(1, -1)))[0]) + 2.0 * eps
        return DualEstimate(g, 0.0, n_paths, basis_degree, 1, eps, int(seed))
    if terminal_fn is None:
        terminal_fn = _terminal_payoff(model, eps)
    ss = np.random.SeedSequence(int(seed))
    s_mix, s_path, s_branch, s_roll, s_boot = ss.spawn(5)
    rng_mix = np.random.Generator(np.random.Philox(s_mix))
    rng_path = np.random.Generator(np.random.Philox(s_path))
    rng_branch = np.random.Generator(np.random.Philox(s_branch))
    clouds = _training_cloud(model, lattice, x0, n_paths, rng_mix, rng_path)
    tables, _ = _fit_tables(model, eps, lattice, clouds, basis_degree,
                            rng_branch, terminal_fn)
    states, picks, dWs = _policy_rollout(model, eps, lattice, x0, tables, n_paths,
                                         np.random.Generator(np.random.Philox(s_roll)))
    vals = _policy_value(model, lattice, states, picks, dWs, terminal_fn, basis_degree)
    value = float(vals.mean())
    rng_boot = np.random.Generator(np.random.Philox(s_boot))
    boots = np.empty(_BOOTSTRAP)
    for bidx in range(_BOOTSTRAP):
        idx = rng_boot.integers(0, n_paths, n_paths)
        boots[bidx] = vals[idx].mean()
    return DualEstimate(value, float(boots.std(ddof=1)), int(n_paths),
                        int(basis_degree), len(lattice.time_knots) - 1,
                        float(eps), int(seed))


@dataclass
class DppReport:
    direct: DualEstimate
    composed: DualEstimate
    mid_time: float
    difference: float
    combined_std_error: float

    def to_dict(self):
        return {
            "direct": self.direct.to_dict(),
            "composed": self.composed.to_dict(),
            "mid_time": self.mid_time,
            "difference": self.difference,
            "combined_std_error": self.combined_std_error,
        }


def dpp_check(model: ModelSpec, eps: float, t0: float, x0, mid_time: float,
              lattice: ControlLattice, n_paths: int, seed: int) -> DppReport:
    """Compare the direct estimate with the two-leg composition through mid_time.

    The inner leg regresses the dual value at mid_time as a function of the
    state (trained on a mixed-control cloud propagated from (t0, x0)); the
    outer leg then uses that function as terminal data. Inner-regression
    bias is not part of the reported standard error.
    """
    if not (t0 < mid_time < model.horizon_T):
        raise HedgeGameError("need t0 < mid_time < horizon_T")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    knots = np.asarray(lattice.time_knots)
    if not np.any(np.isclose(knots, mid_time, atol=1e-12)):
        raise HedgeGameError("mid_time must be one of the lattice knots")

    direct = dual_value_lsmc(model, eps, t0, x0, lattice, 2, n_paths, seed)

    inner_knots = tuple(float(t) for t in knots[knots >= mid_time - 1e-12])
    outer_knots = tuple(float(t) for t in knots[knots <= mid_time + 1e-12])
    inner_lat = ControlLattice(inner_knots, lattice.gamma_points, lattice.substeps)
    outer_lat = ControlLattice(outer_knots, lattice.gamma_points, lattice.substeps)

    ss = np.random.SeedSequence(int(seed) + 1)
    s_mix, s_path, s_cloud, s_branch = ss.spawn(4)
    rng_mix = np.random.Generator(np.random.Philox(s_mix))
    rng_path = np.random.Generator(np.random.Philox(s_path))
    rng_branch = np.random.Generator(np.random.Philox(s_branch))
    # cloud at mid_time from mixed play over [t0, mid], then inner backward
    to_mid = ControlLattice(outer_knots, lattice.gamma_points, lattice.substeps)
    mid_cloud = _training_cloud(model, to_mid, x0, n_paths, rng_mix, rng_path)[-1]
    inner_clouds = _training_cloud(
        model, inner_lat, mid_cloud, n_paths,
        np.random.Generator(np.random.Philox(s_cloud)), rng_path,
    )
    _, v_mid = _fit_tables(model, eps, inner_lat, inner_clouds, 2, rng_branch,
                           _terminal_payoff(model, eps))
    composed = dual_value_lsmc(model, eps, t0, x0, outer_lat, 2, n_paths,
                               seed + 2, terminal_fn=v_mid)
    diff = abs(direct.value - composed.value)
    combined = float(np.hypot(direct.std_error, composed.std_error))
    return DppReport(direct, composed, float(mid_time), float(diff), combined)
