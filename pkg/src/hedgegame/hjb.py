"""Backward finite-difference solver for the worst-case pricing equation.

The terminal-value problem  min_a La(., v, dv/dt, Dv, D^2v) = 0, v(T) = g
is integrated backward with an explicit monotone scheme: central second
differences, first differences upwinded against the effective drift, and the
adverse minimum taken pointwise inside a damped fixed-point loop that
resolves the semilinear dependence of the wealth drift on the value itself.

Grids are rectangular in (t, x) with d <= 2 spatial axes. Surfaces are
immutable once solved.
"""

from __future__ import annotations

import io
import json
import struct
from collections import namedtuple
from dataclasses import dataclass
from itertools import product

import numpy as np

from .model import HedgeGameError, ModelSpec, validate_assumptions

_PROBE_H = 1e-6
_FP_TOL = 1e-10
_FP_MAX_ITERS = 50

BINARY_MAGIC = b"HJBSURF1"


class NumericsError(HedgeGameError):
    """Numerical failure of the scheme (instability, non-convergence)."""


class CFLError(NumericsError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Rectangular space-time lattice for the solver.

    ``t_steps`` time steps over a model horizon, ``x_steps[i]`` cells on
    spatial axis i spanning [x_min[i], x_max[i]].
    """

    t_steps: int
    x_min: tuple
    x_max: tuple
    x_steps: tuple
    boundary_mode: str = "extrapolate_linear"

    def __post_init__(self):
        object.__setattr__(self, "x_min", tuple(float(v) for v in np.atleast_1d(self.x_min)))
        object.__setattr__(self, "x_max", tuple(float(v) for v in np.atleast_1d(self.x_max)))
        object.__setattr__(self, "x_steps", tuple(int(v) for v in np.atleast_1d(self.x_steps)))
        if self.boundary_mode not in ("extrapolate_linear", "clamp_payoff"):
            raise HedgeGameError(f"unknown boundary_mode {self.boundary_mode!r}")
        if self.t_steps < 1 or any(s < 2 for s in self.x_steps):
            raise HedgeGameError("t_steps >= 1 and x_steps >= 2 required")
        if len(self.x_min) != len(self.x_max) or len(self.x_min) != len(self.x_steps):
            raise HedgeGameError("x_min/x_max/x_steps must have equal length")
        if any(lo >= hi for lo, hi in zip(self.x_min, self.x_max)):
            raise HedgeGameError("x_min < x_max required componentwise")
        if len(self.x_steps) > 2:
            raise HedgeGameError("grids with d > 2 are not supported")

    @property
    def dim(self) -> int:
        return len(self.x_steps)

    @property
    def dx(self) -> tuple:
        return tuple((hi - lo) / s for lo, hi, s in zip(self.x_min, self.x_max, self.x_steps))

    def axes(self) -> list:
        return [np.linspace(lo, hi, s + 1) for lo, hi, s in zip(self.x_min, self.x_max, self.x_steps)]

    def mesh(self) -> np.ndarray:
        """Node coordinates, shape (n1, ..., nd, d)."""
        return np.stack(np.meshgrid(*self.axes(), indexing="ij"), axis=-1)

    def cfl_number(self, lipschitz_K: float, dt: float) -> float:
        """Stability number from the coefficient bound K; must stay <= 1."""
        K = float(lipschitz_K)
        return dt * sum(K * K / h / h + K / h for h in self.dx)


EvalPack = namedtuple("EvalPack", ["value", "p", "M", "q"])


class ValueSurface:
    """Solved value/policy fields on a grid; read-only after construction."""

    def __init__(self, grid, model_hash, t, axes, values, policy, a_count, meta):
        self.grid = grid
        self.model_hash = model_hash
        self.t = np.asarray(t, dtype=float)
        self.axes = [np.asarray(ax, dtype=float) for ax in axes]
        self.values = np.asarray(values, dtype=float)
        self.policy = np.asarray(policy, dtype=np.int32)
        self.a_count = int(a_count)
        self.meta = dict(meta)
        for arr in (self.t, self.values, self.policy, *self.axes):
            arr.flags.writeable = False
        self._fields = None

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def t_start(self) -> float:
        return float(self.t[0])

    @property
    def horizon_T(self) -> float:
        return float(self.t[-1])

    def node_shape(self):
        return self.values.shape

    # -- derivative fields -------------------------------------------------

    def _derivative_fields(self):
        """Per-node q/p/M from finite differences of the stored values."""
        if self._fields is not None:
            return self._fields
        v = self.values
        dt = float(self.t[1] - self.t[0])
        d = self.dim
        hx = [float(ax[1] - ax[0]) for ax in self.axes]
        q = np.gradient(v, dt, axis=0, edge_order=2)
        p = [np.gradient(v, hx[i], axis=1 + i, edge_order=2) for i in range(d)]
        M = {}
        for i in range(d):
            h = self.axes[i][1] - self.axes[i][0]
            sec = np.empty_like(v)
            core = [slice(None)] * v.ndim
            core[1 + i] = slice(1, -1)
            up = [slice(None)] * v.ndim
            up[1 + i] = slice(2, None)
            lo = [slice(None)] * v.ndim
            lo[1 + i] = slice(None, -2)
            sec[tuple(core)] = (v[tuple(up)] - 2.0 * v[tuple(core)] + v[tuple(lo)]) / (h * h)
            first = [slice(None)] * v.ndim
            first[1 + i] = slice(0, 1)
            second = [slice(None)] * v.ndim
            second[1 + i] = slice(1, 2)
            sec[tuple(first)] = sec[tuple(second)]
            first[1 + i] = slice(-1, None)
            second[1 + i] = slice(-2, -1)
            sec[tuple(first)] = sec[tuple(second)]
            M[(i, i)] = sec
        if d == 2:
            M[(0, 1)] = np.gradient(np.gradient(v, hx[0], axis=1, edge_order=2),
                                    hx[1], axis=2, edge_order=2)
        self._fields = (q, p, M)
        return self._fields

    def _locate(self, axis, query):
        lo, hi = axis[0], axis[-1]
        q = np.asarray(query, dtype=float)
        if np.any(q < lo - 1e-12) or np.any(q > hi + 1e-12):
            raise HedgeGameError(f"query outside grid range [{lo}, {hi}]")
        h = axis[1] - axis[0]
        idx = np.clip(((q - lo) / h).astype(int), 0, len(axis) - 2)
        w = np.clip((q - axis[idx]) / h, 0.0, 1.0)
        return idx, w

    def _interp(self, field, tq, xq):
        """Multilinear interpolation of a node field at (tq, xq)."""
        xq = np.atleast_2d(np.asarray(xq, dtype=float))
        n = xq.shape[0]
        tq = np.broadcast_to(np.asarray(tq, dtype=float), (n,))
        it, wt = self._locate(self.t, tq)
        locs = [self._locate(self.axes[i], xq[:, i]) for i in range(self.dim)]
        out = np.zeros(n)
        for corner in product((0, 1), repeat=1 + self.dim):
            wgt = np.where(corner[0], wt, 1.0 - wt)
            idx = (it + corner[0],)
            for i in range(self.dim):
                ii, wi = locs[i]
                wgt = wgt * np.where(corner[1 + i], wi, 1.0 - wi)
                idx = idx + (ii + corner[1 + i],)
            out += wgt * field[idx]
        return out

    def value(self, t, x):
        scalar = np.asarray(x).ndim == 1
        out = self._interp(self.values, t, x)
        return float(out[0]) if scalar and np.isscalar(t) else out

    def eval(self, t, x) -> EvalPack:
        """Interpolated (value, gradient, hessian, time derivative) at (t, x).

        Exact at grid nodes; derivatives come from finite differences of the
        stored layers, multilinearly interpolated between nodes.
        """
        scalar = np.asarray(x).ndim == 1 and np.isscalar(t)
        q, p, M = self._derivative_fields()
        xq = np.atleast_2d(np.asarray(x, dtype=float))
        n = xq.shape[0]
        d = self.dim
        val = self._interp(self.values, t, xq)
        qv = self._interp(q, t, xq)
        pv = np.stack([self._interp(p[i], t, xq) for i in range(d)], axis=-1)
        Mv = np.zeros((n, d, d))
        for i in range(d):
            Mv[:, i, i] = self._interp(M[(i, i)], t, xq)
        if d == 2:
            cross = self._interp(M[(0, 1)], t, xq)
            Mv[:, 0, 1] = cross
            Mv[:, 1, 0] = cross
        if scalar:
            return EvalPack(float(val[0]), pv[0], Mv[0], float(qv[0]))
        return EvalPack(val, pv, Mv, qv)


# ---------------------------------------------------------------------------
# scheme internals
# ---------------------------------------------------------------------------


def _pad_linear(v: np.ndarray) -> np.ndarray:
    """Add one ghost node per side and axis by linear extrapolation."""
    out = v
    for ax in range(v.ndim):
        lo = 2.0 * np.take(out, [0], axis=ax) - np.take(out, [1], axis=ax)
        hi = 2.0 * np.take(out, [-1], axis=ax) - np.take(out, [-2], axis=ax)
        out = np.concatenate([lo, out, hi], axis=ax)
    return out


def _shift(vp: np.ndarray, axis: int, off: int, d: int) -> np.ndarray:
    """Core-shaped view of the padded array shifted by ``off`` along ``axis``."""
    sl = []
    for ax in range(d):
        o = off if ax == axis else 0
        sl.append(slice(1 + o, vp.shape[ax] - 1 + o))
    return vp[tuple(sl)]


class _LayerOps:
    """Finite differences of one known layer, shared across adverse points."""

    def __init__(self, v: np.ndarray, dx: tuple):
        d = v.ndim
        vp = _pad_linear(v)
        self.center = v
        self.fwd = [( _shift(vp, i, +1, d) - v) / dx[i] for i in range(d)]
        self.bwd = [(v - _shift(vp, i, -1, d)) / dx[i] for i in range(d)]
        self.cen = [(_shift(vp, i, +1, d) - _shift(vp, i, -1, d)) / (2.0 * dx[i]) for i in range(d)]
        self.sec = [(_shift(vp, i, +1, d) - 2.0 * v + _shift(vp, i, -1, d)) / (dx[i] ** 2) for i in range(d)]
        self.cross = None
        if d == 2:
            pp = vp[2:, 2:]
            mm = vp[:-2, :-2]
            pm = vp[2:, :-2]
            mp = vp[:-2, 2:]
            self.cross = (pp + mm - pm - mp) / (4.0 * dx[0] * dx[1])
        self.p_cen = np.stack(self.cen, axis=-1)


def _adverse_terms(model, t_eff, x_eff, y_ref, ops: _LayerOps, a):
    """Per-adverse-point pieces of the discrete generator.

    Returns (z_c, const) with const = everything except the hedged drift:
    the drift/diffusion terms with the p-dependence linearised around the
    centered gradient and its linear part moved onto upwind differences.
    """
    d = x_eff.shape[-1]
    mu = np.asarray(model.mu_X(t_eff, x_eff, a), dtype=float)
    sig = np.asarray(model.sigma_X(t_eff, x_eff, a), dtype=float)
    Sig = np.einsum("...ik,...jk->...ij", sig, sig)
    z_c = np.einsum("...ji,...j->...i", sig, ops.p_cen)
    fz = np.empty_like(z_c)
    for j in range(d):
        h = _PROBE_H * (1.0 + np.abs(z_c[..., j]))
        zp = z_c.copy()
        zp[..., j] += h
        zm = z_c.copy()
        zm[..., j] -= h
        fp = np.asarray(model.mu_Y(t_eff, x_eff, y_ref, model.u_hat(t_eff, x_eff, y_ref, zp, a), a))
        fm = np.asarray(model.mu_Y(t_eff, x_eff, y_ref, model.u_hat(t_eff, x_eff, y_ref, zm, a), a))
        fz[..., j] = (fp - fm) / (2.0 * h)
    drift_eff = mu - np.einsum("...ij,...j->...i", sig, fz)
    const = np.zeros(ops.center.shape)
    for i in range(d):
        p_up = np.where(drift_eff[..., i] > 0.0, ops.fwd[i], ops.bwd[i])
        const -= mu[..., i] * ops.cen[i]
        const -= drift_eff[..., i] * (p_up - ops.cen[i])
        const -= 0.5 * Sig[..., i, i] * ops.sec[i]
    if d == 2:
        const -= Sig[..., 0, 1] * ops.cross
    return z_c, const


def _clamped(t, T):
    return min(max(t, 0.0), T)


def solve(model: ModelSpec, grid: GridSpec, *, pad_layers: int = 0,
          terminal=None, shake_points=None, validate: bool = True,
          validate_samples: int = 128) -> ValueSurface:
    """Backward sweep for the worst-case value surface.

    ``terminal`` overrides the model payoff as terminal data. With
    ``shake_points`` given, the adverse minimum additionally ranges over the
    listed base-point shifts of (t, x), with shifted times clamped to
    [0, T]. ``pad_layers`` extends the sweep below t = 0 with coefficients
    frozen at their t = 0 values.

    Refuses to run when the K-based stability number exceeds 1; the
    semilinear wealth term is resolved per node by damped fixed-point
    iteration to 1e-10 (at most 50 rounds).
    """
    if grid.dim != model.dim:
        raise HedgeGameError(f"grid dim {grid.dim} != model dim {model.dim}")
    if validate:
        rep = validate_assumptions(model, sample_count=validate_samples, rng_seed=0,
                                   x_box=(min(grid.x_min), max(grid.x_max)))
        if not rep.ok:
            raise HedgeGameError(
                "model violates standing assumptions (pass validate=False to override):\n"
                + rep.summary()
            )
    T = model.horizon_T
    dt = T / grid.t_steps
    cfl = grid.cfl_number(model.lipschitz_K, dt)
    if cfl > 1.0 + 1e-9:
        raise CFLError(
            f"explicit scheme unstable: CFL {cfl:.3f} > 1 "
            f"(t_steps={grid.t_steps}, dx={grid.dx}); refine the time axis"
        )

    n_layers = grid.t_steps + pad_layers
    t_vals = T - dt * np.arange(n_layers, 0, -1)
    t_vals = np.concatenate([t_vals, [T]])
    axes = grid.axes()
    X = grid.mesh()
    dx = grid.dx
    d = grid.dim

    g_term = terminal if terminal is not None else model.payoff_g
    shakes = None
    if shake_points is not None:
        shakes = np.atleast_2d(np.asarray(shake_points, dtype=float))
    pairs = []
    for a in model.A_points:
        if shakes is None:
            pairs.append((a, None))
        else:
            for b in shakes:
                pairs.append((a, b))

    values = np.empty((n_layers + 1,) + X.shape[:-1])
    policy = np.zeros((n_layers + 1,) + X.shape[:-1], dtype=np.int32)
    values[-1] = np.asarray(g_term(X), dtype=float)

    clamp_mode = grid.boundary_mode == "clamp_payoff"
    boundary_mask = None
    g_boundary = None
    if clamp_mode:
        boundary_mask = np.zeros(X.shape[:-1], dtype=bool)
        for i in range(d):
            sl = [slice(None)] * d
            sl[i] = 0
            boundary_mask[tuple(sl)] = True
            sl[i] = -1
            boundary_mask[tuple(sl)] = True
        g_boundary = values[-1][boundary_mask]

    max_iters_seen = 0
    for k in range(n_layers - 1, -1, -1):
        t_k = float(t_vals[k])
        v_next = values[k + 1]
        ops = _LayerOps(v_next, dx)
        terms = []
        for a, b in pairs:
            if b is None:
                t_eff, x_eff = _clamped(t_k, T), X
            else:
                t_eff, x_eff = _clamped(t_k + b[0], T), X + b[1:]
            z_c, const = _adverse_terms(model, t_eff, x_eff, v_next, ops, a)
            terms.append((a, t_eff, x_eff, z_c, const))

        y = v_next.copy()
        converged = False
        for it in range(_FP_MAX_ITERS):
            stack = np.empty((len(terms),) + y.shape)
            for j, (a, t_eff, x_eff, z_c, const) in enumerate(terms):
                u = model.u_hat(t_eff, x_eff, y, z_c, a)
                stack[j] = np.asarray(model.mu_Y(t_eff, x_eff, y, u, a)) + const
            s_min = stack.min(axis=0)
            y_new = v_next - dt * s_min
            delta = float(np.max(np.abs(y_new - y)))
            omega = 1.0 if it < 8 else 0.5
            y = y + omega * (y_new - y)
            max_iters_seen = max(max_iters_seen, it + 1)
            if delta < _FP_TOL:
                converged = True
                break
        if not converged:
            worst = np.unravel_index(int(np.argmax(np.abs(y_new - y))), y.shape)
            raise NumericsError(
                f"fixed point did not converge at layer t={t_k:.6g}, node {worst}, "
                f"residual {delta:.3e}"
            )
        values[k] = y
        policy[k] = np.argmin(stack, axis=0).astype(np.int32)
        if clamp_mode:
            r = 0.0
            if model.finance is not None:
                xb = X[boundary_mask]
                r = np.asarray(model.finance.r_lend(t_k, xb, model.A_points[0]), dtype=float)
            values[k][boundary_mask] = g_boundary * np.exp(-r * (T - t_k))

    g_abs = float(np.max(np.abs(values[-1])))
    K = model.lipschitz_K
    meta = {
        "cfl": cfl,
        "dt": dt,
        "pad_layers": pad_layers,
        "bound": g_abs * float(np.exp(K * T)) + K * T,
        "max_abs_value": float(np.max(np.abs(values))),
        "fixed_point_max_iters": max_iters_seen,
        "boundary_mode": grid.boundary_mode,
        "n_pairs": len(pairs),
    }
    return ValueSurface(grid, model.hash, t_vals, axes, values, policy,
                        a_count=len(pairs), meta=meta)


def policy(surface: ValueSurface) -> np.ndarray:
    """Adverse argmin indices chosen in the final fixed-point round."""
    return surface.policy


@dataclass
class ResidualReport:
    grid: np.ndarray
    max_abs: float
    min_value: float
    argmin: tuple

    def to_dict(self):
        return {"max_abs": self.max_abs, "min_value": self.min_value,
                "argmin": [float(v) for v in self.argmin]}


def min_generator_field(model: ModelSpec, t: float, X, y, q, p, M):
    """Vectorised min_a La over a field of derivative packs."""
    best = None
    idx = None
    for j, a in enumerate(model.A_points):
        mu = np.asarray(model.mu_X(t, X, a), dtype=float)
        sig = np.asarray(model.sigma_X(t, X, a), dtype=float)
        Sig = np.einsum("...ik,...jk->...ij", sig, sig)
        z = np.einsum("...ji,...j->...i", sig, p)
        u = model.u_hat(t, X, y, z, a)
        f = np.asarray(model.mu_Y(t, X, y, u, a), dtype=float)
        val = f - q - np.einsum("...i,...i->...", mu, p) - 0.5 * np.einsum("...ij,...ij->...", Sig, M)
        if best is None:
            best, idx = val, np.zeros(val.shape, dtype=np.int32)
        else:
            take = val < best
            best = np.where(take, val, best)
            idx = np.where(take, j, idx)
    return best, idx


def residual(surface: ValueSurface, model: ModelSpec) -> ResidualReport:
    """Centered-difference residual of the solved surface at interior nodes.

    A numerical certificate that the discrete solution drives the worst-case
    generator to ~0 away from kinks; boundary and terminal nodes are NaN.
    """
    v = surface.values
    t = surface.t
    dt = float(t[1] - t[0])
    d = surface.dim
    dx = [ax[1] - ax[0] for ax in surface.axes]
    X = np.stack(np.meshgrid(*surface.axes, indexing="ij"), axis=-1)
    out = np.full(v.shape, np.nan)
    interior = tuple(slice(1, -1) for _ in range(d))
    for k in range(1, v.shape[0] - 1):
        q = (v[k + 1] - v[k - 1]) / (2.0 * dt)
        layer = v[k]
        p = np.stack([np.gradient(layer, dx[i], axis=i) for i in range(d)], axis=-1)
        M = np.zeros(layer.shape + (d, d))
        for i in range(d):
            M[..., i, i] = np.gradient(np.gradient(layer, dx[i], axis=i), dx[i], axis=i)
        if d == 2:
            cr = np.gradient(np.gradient(layer, dx[0], axis=0), dx[1], axis=1)
            M[..., 0, 1] = cr
            M[..., 1, 0] = cr
        best, _ = min_generator_field(model, float(t[k]), X, layer, q, p, M)
        res = np.full(layer.shape, np.nan)
        res[interior] = best[interior]
        out[k] = res
    finite = out[np.isfinite(out)]
    max_abs = float(np.max(np.abs(finite)))
    min_val = float(np.min(finite))
    flat_arg = int(np.nanargmin(np.where(np.isfinite(out), out, np.inf)))
    loc = np.unravel_index(flat_arg, out.shape)
    coords = (float(t[loc[0]]),) + tuple(float(surface.axes[i][loc[1 + i]]) for i in range(d))
    return ResidualReport(out, max_abs, min_val, coords)


# ---------------------------------------------------------------------------
# surface IO
# ---------------------------------------------------------------------------


def save_csv(surface: ValueSurface, path):
    d = surface.dim
    cols = ["t_index", "t"] + [f"x{i}" for i in range(d)] + ["value", "policy_index"]
    buf = io.StringIO()
    buf.write(",".join(cols) + "\n")
    mesh = np.stack(np.meshgrid(*surface.axes, indexing="ij"), axis=-1).reshape(-1, d)
    for k in range(surface.values.shape[0]):
        vals = surface.values[k].reshape(-1)
        pol = surface.policy[k].reshape(-1)
        tk = surface.t[k]
        for row in range(mesh.shape[0]):
            xs = ",".join(f"{c:.17g}" for c in mesh[row])
            buf.write(f"{k},{tk:.17g},{xs},{vals[row]:.17g},{pol[row]}\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def save_binary(surface: ValueSurface, path):
    header = {
        "t_steps": surface.grid.t_steps,
        "x_min": list(surface.grid.x_min),
        "x_max": list(surface.grid.x_max),
        "x_steps": list(surface.grid.x_steps),
        "boundary_mode": surface.grid.boundary_mode,
        "t_start": surface.t_start,
        "horizon_T": surface.horizon_T,
        "n_layers": int(surface.values.shape[0]),
        "a_count": surface.a_count,
        "model_hash": surface.model_hash,
        "meta": {k: v for k, v in surface.meta.items() if isinstance(v, (int, float, str))},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        fh.write(np.ascontiguousarray(surface.values, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(surface.policy, dtype="<i4").tobytes())


def load_binary(path) -> ValueSurface:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != BINARY_MAGIC:
            raise HedgeGameError(f"not a surface cache file: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        grid = GridSpec(
            t_steps=header["t_steps"],
            x_min=tuple(header["x_min"]),
            x_max=tuple(header["x_max"]),
            x_steps=tuple(header["x_steps"]),
            boundary_mode=header["boundary_mode"],
        )
        shape = (header["n_layers"],) + tuple(s + 1 for s in grid.x_steps)
        count = int(np.prod(shape))
        values = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
        policy_arr = np.frombuffer(fh.read(count * 4), dtype="<i4").reshape(shape)
    n_layers = header["n_layers"] - 1
    dt = (header["horizon_T"] - header["t_start"]) / n_layers
    t = header["t_start"] + dt * np.arange(n_layers + 1)
    t[-1] = header["horizon_T"]
    return ValueSurface(grid, header["model_hash"], t, grid.axes(), values.copy(),
                        policy_arr.copy(), header["a_count"], header.get("meta", {}))
