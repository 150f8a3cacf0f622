"""Smooth supersolution construction by coefficient shaking.

Pipeline: solve the pricing equation with shaken coefficients (adverse
minimum extended over small base-point shifts, terminal data raised by 2
eps), take a quadratic inf-convolution (Moreau envelope) of the node values,
then mollify with a one-sided-in-time polynomial bump kernel. Parameters
(eps, k, delta) are selected on a ladder until the result certifies as a
classical supersolution that stays below a prescribed target on a compact
box. The certified output drives the feedback hedge of the game module.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import hjb
from .model import HedgeGameError, ModelSpec, shake_lattice

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(5)

# normalised bump constants: int (1-s^2)^4 over [-1,1] is 256/315
_C_SPACE = 315.0 / 256.0
_C_TIME = 315.0 / 128.0


class CertificationError(HedgeGameError):
    """Smooth supersolution construction ran out of ladder rungs."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class Box:
    """Compact (t, x) box used for target domination and certification."""

    t_lo: float
    t_hi: float
    x_lo: tuple
    x_hi: tuple

    def __post_init__(self):
        object.__setattr__(self, "x_lo", tuple(float(v) for v in np.atleast_1d(self.x_lo)))
        object.__setattr__(self, "x_hi", tuple(float(v) for v in np.atleast_1d(self.x_hi)))
        if self.t_lo > self.t_hi or any(a > b for a, b in zip(self.x_lo, self.x_hi)):
            raise HedgeGameError("empty box")


# ---------------------------------------------------------------------------
# shaken solve
# ---------------------------------------------------------------------------


@dataclass
class ShakenSurface:
    """Solution of the shaken equation with terminal data g + 2 eps."""

    eps: float
    surface: hjb.ValueSurface
    shake_points: np.ndarray
    c_reg: float
    c_eps: float
    terminal_band_ok: bool

    @property
    def values(self):
        return self.surface.values


def solve_shaken(model: ModelSpec, grid: hjb.GridSpec, eps: float,
                 shake_points=None, *, pad_layers: int = 0,
                 validate: bool = False) -> ShakenSurface:
    """Solve with base points shaken over the eps-ball and payoff g + 2 eps.

    With eps = 0 this reproduces the plain solver bit for bit. The empirical
    regularity constant c_reg = max |w - g_eps| / sqrt(T - t) over the
    terminal-adjacent layers calibrates the band [T - c_eps, T] on which
    w >= g + eps is expected and checked.
    """
    if not 0.0 <= eps <= 1.0:
        raise HedgeGameError("eps must lie in [0, 1]")
    if shake_points is None:
        shake_points = shake_lattice(eps, model.dim)
    shake_points = np.atleast_2d(np.asarray(shake_points, dtype=float))

    def terminal(x, _g=model.payoff_g, _e=eps):
        return _g(x) + 2.0 * _e

    surface = hjb.solve(model, grid, pad_layers=pad_layers, terminal=terminal,
                        shake_points=shake_points, validate=validate)
    T = surface.horizon_T
    g_eps = surface.values[-1]
    n_adj = min(10, len(surface.t) - 1)
    c_reg = 0.0
    for k in range(len(surface.t) - 1 - n_adj, len(surface.t) - 1):
        tau = T - float(surface.t[k])
        gap = float(np.max(np.abs(surface.values[k] - g_eps)))
        c_reg = max(c_reg, gap / math.sqrt(tau))
    if c_reg > 0.0:
        c_eps = (eps / c_reg) ** 2
    else:
        c_eps = T - max(surface.t_start, 0.0)
    c_eps = min(c_eps, T - max(surface.t_start, 0.0))
    band_ok = True
    if eps > 0.0:
        g_plain = g_eps - 2.0 * eps
        for k in range(len(surface.t)):
            if T - float(surface.t[k]) <= c_eps + 1e-12:
                if np.min(surface.values[k] - (g_plain + eps)) < -1e-9:
                    band_ok = False
                    break
    return ShakenSurface(eps, surface, shake_points, c_reg, c_eps, band_ok)


# ---------------------------------------------------------------------------
# quadratic inf-convolution (Moreau envelope) on the grid
# ---------------------------------------------------------------------------


def _axis_pass(arr: np.ndarray, axis: int, coords: np.ndarray, k: float):
    """Exact 1-d Moreau envelope along one axis, all lines at once.

    Candidates are restricted to the window guaranteed to contain the
    minimiser by the displacement bound k |z - z*|^2 <= max(w) - min(w);
    within it every candidate is evaluated, so the result equals the full
    quadratic scan exactly (same FP expressions, first-index tie rule).
    """
    n = arr.shape[axis]
    rng = float(np.max(arr) - np.min(arr))
    if k <= 0.0:
        raise HedgeGameError("inf-convolution requires k > 0")
    h = float(np.min(np.diff(coords))) if n > 1 else 1.0
    reach = math.sqrt(max(rng, 0.0) / k)
    r = min(n - 1, int(math.ceil(reach / h)) + 1)
    moved = np.moveaxis(arr, axis, -1)
    out = None
    arg = None
    c = coords
    big = np.inf
    # ascending shifts with strict replacement: ties keep the lowest source
    # index, matching an ascending full scan
    for s in range(-r, r + 1):
        if s <= 0:
            src = slice(None, n + s) if s < 0 else slice(None)
            dst = slice(-s, None)
        else:
            src = slice(s, None)
            dst = slice(None, n - s)
        cand = np.full(moved.shape, big)
        dist = np.full(n, big)
        dist[dst] = c[dst] - c[src]
        cand[..., dst] = moved[..., src] + k * dist[dst] ** 2
        q_idx = np.full(n, -1, dtype=np.int64)
        q_idx[dst] = np.arange(n)[src]
        if out is None:
            out = cand
            arg = np.broadcast_to(q_idx, moved.shape).copy()
        else:
            take = cand < out
            out = np.where(take, cand, out)
            arg = np.where(take, q_idx, arg)
    return np.moveaxis(out, -1, axis), np.moveaxis(arg, -1, axis)


def inf_convolution(values: np.ndarray, k: float, coords, weights=None):
    """Discrete quadratic inf-convolution over all grid nodes.

    Computes min over nodes z' of values(z') + k sum_ax (w_ax (z_ax-z'_ax))^2
    one axis at a time (the separable distance-transform factorisation) and
    returns the envelope together with the argmin multi-index per node.
    """
    values = np.asarray(values, dtype=float)
    coords = [np.asarray(c, dtype=float) for c in coords]
    if len(coords) != values.ndim:
        raise HedgeGameError("one coordinate array per axis required")
    if weights is None:
        weights = np.ones(values.ndim)
    weights = np.asarray(weights, dtype=float)
    out = values
    args = []
    for ax in range(values.ndim):
        scaled = weights[ax] * coords[ax]
        out, win = _axis_pass(out, ax, scaled, k)
        for j in range(len(args)):
            args[j] = np.take_along_axis(np.moveaxis(args[j], ax, -1),
                                         np.moveaxis(win, ax, -1),
                                         axis=-1)
            args[j] = np.moveaxis(args[j], -1, ax)
        args.append(win)
    argmin = np.stack(args, axis=-1)
    return out, argmin


# ---------------------------------------------------------------------------
# mollification
# ---------------------------------------------------------------------------


def _bump(s):
    v = 1.0 - s * s
    return np.where(np.abs(s) <= 1.0, v**4, 0.0)


def _bump_d1(s):
    v = 1.0 - s * s
    return np.where(np.abs(s) <= 1.0, -8.0 * s * v**3, 0.0)


def _bump_d2(s):
    v = 1.0 - s * s
    return np.where(np.abs(s) <= 1.0, -8.0 * v**3 + 48.0 * s * s * v**2, 0.0)


class MollifierKernel:
    """Product bump kernel: support [-1, 0] in time, [-1, 1]^d in space.

    Each factor is a normalised polynomial bump (1 - s^2)^4; the time factor
    is the same bump shifted onto [-1, 0]. All derivatives are closed-form.
    """

    def time_value(self, s):
        return _C_TIME * _bump(2.0 * s + 1.0)

    def time_d1(self, s):
        return _C_TIME * 2.0 * _bump_d1(2.0 * s + 1.0)

    def space_value(self, s):
        return _C_SPACE * _bump(s)

    def space_d1(self, s):
        return _C_SPACE * _bump_d1(s)

    def space_d2(self, s):
        return _C_SPACE * _bump_d2(s)


def _subdivide(lo: float, hi: float, knots: np.ndarray):
    """Gauss-Legendre nodes/weights on [lo, hi] split at interior knots."""
    inner = knots[(knots > lo + 1e-15) & (knots < hi - 1e-15)]
    edges = np.concatenate([[lo], np.sort(inner), [hi]])
    nodes = []
    wgts = []
    for a, b in zip(edges[:-1], edges[1:]):
        half = 0.5 * (b - a)
        mid = 0.5 * (a + b)
        nodes.append(mid + half * _GL_NODES)
        wgts.append(half * _GL_WEIGHTS)
    return np.concatenate(nodes), np.concatenate(wgts)


def _interp_clamped(t_nodes, axes, values, tq, xq):
    """Multilinear interpolation with constant extension outside the grid."""
    d = len(axes)
    out_idx = []
    out_w = []
    for coords, q in [(t_nodes, tq)] + [(axes[i], xq[..., i]) for i in range(d)]:
        h = coords[1] - coords[0]
        pos = np.clip((q - coords[0]) / h, 0.0, len(coords) - 1.0)
        idx = np.minimum(pos.astype(int), len(coords) - 2)
        out_idx.append(idx)
        out_w.append(np.clip(pos - idx, 0.0, 1.0))
    res = np.zeros(np.asarray(tq).shape)
    for corner in product((0, 1), repeat=1 + d):
        wgt = np.ones_like(res)
        sel = []
        for j, c in enumerate(corner):
            wgt = wgt * (out_w[j] if c else (1.0 - out_w[j]))
            sel.append(out_idx[j] + c)
        res += wgt * values[tuple(sel)]
    return res


class SmoothSurface:
    """Mollified envelope surface with analytic-kernel derivatives.

    Holds inf-convolved node values on the (time-extended) solve grid plus
    the mollification parameters; point evaluation integrates the exactly
    differentiated kernel against the multilinearly interpolated nodes, with
    the integration split at grid lines so the quadrature is exact.
    """

    def __init__(self, t_nodes, axes, node_values, delta, *, eps=0.0, k=0.0,
                 weights=None, B_set=None, model_hash="", meta=None):
        self.t_nodes = np.asarray(t_nodes, dtype=float)
        self.axes = [np.asarray(a, dtype=float) for a in axes]
        self.node_values = np.asarray(node_values, dtype=float)
        self.delta = float(delta)
        self.eps = float(eps)
        self.k = float(k)
        self.weights = None if weights is None else np.asarray(weights, dtype=float)
        self.B_set = B_set
        self.model_hash = model_hash
        self.meta = dict(meta or {})
        self.kernel = MollifierKernel()
        self.certificate = None
        self._grad_cache = None
        if self.delta <= 0.0:
            raise HedgeGameError("delta must be positive")
        steps = [self.t_nodes[1] - self.t_nodes[0]] + [a[1] - a[0] for a in self.axes]
        if self.delta < max(steps):
            warnings.warn(
                f"mollifier width {self.delta:.3g} below one grid cell "
                f"{max(steps):.3g}: quadrature degenerates to interpolation noise",
                RuntimeWarning,
            )

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def horizon_T(self) -> float:
        return float(self.t_nodes[-1])

    def _quad_1d(self, centre, lo_off, hi_off, coords):
        return _subdivide(centre + lo_off, centre + hi_off, coords)

    def eval(self, t: float, x, need_second: bool = True) -> hjb.EvalPack:
        """(value, gradient, hessian, time derivative) at one point."""
        d = self.dim
        dl = self.delta
        x = np.asarray(x, dtype=float).reshape(d)
        tq, tw = self._quad_1d(float(t), -dl, 0.0, self.t_nodes)
        xqs = [self._quad_1d(x[i], -dl, dl, self.axes[i]) for i in range(d)]
        grids = np.meshgrid(tq, *[q for q, _ in xqs], indexing="ij")
        wgts = np.meshgrid(tw, *[w for _, w in xqs], indexing="ij")
        pts_t = grids[0].reshape(-1)
        pts_x = np.stack([g.reshape(-1) for g in grids[1:]], axis=-1)
        weight = np.ones_like(pts_t)
        for w in wgts:
            weight = weight * w.reshape(-1)
        W = _interp_clamped(self.t_nodes, self.axes, self.node_values, pts_t, pts_x)

        st = (pts_t - t) / dl
        sx = [(pts_x[:, i] - x[i]) / dl for i in range(d)]
        kt = self.kernel.time_value(st)
        kx = [self.kernel.space_value(s) for s in sx]
        scale = dl ** (-(d + 1))
        base = weight * W * scale

        prod_all = kt.copy()
        for f in kx:
            prod_all = prod_all * f
        value = float(np.sum(base * prod_all))

        # d/dt picks the differentiated time factor, with a 1/delta chain term
        dt_fac = self.kernel.time_d1(st) / dl
        for f in kx:
            dt_fac = dt_fac * f
        q = -float(np.sum(base * dt_fac))

        p = np.zeros(d)
        for i in range(d):
            fac = kt * (self.kernel.space_d1(sx[i]) / dl)
            for j in range(d):
                if j != i:
                    fac = fac * kx[j]
            p[i] = -float(np.sum(base * fac))

        M = np.zeros((d, d))
        if need_second:
            for i in range(d):
                fac = kt * (self.kernel.space_d2(sx[i]) / dl**2)
                for j in range(d):
                    if j != i:
                        fac = fac * kx[j]
                M[i, i] = float(np.sum(base * fac))
            if d == 2:
                fac = kt * (self.kernel.space_d1(sx[0]) / dl) * (self.kernel.space_d1(sx[1]) / dl)
                M[0, 1] = M[1, 0] = float(np.sum(base * fac))
        return hjb.EvalPack(value, p, M, q)

    def eval_batch(self, ts, xs, need_second: bool = True):
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        n = xs.shape[0]
        ts = np.broadcast_to(np.asarray(ts, dtype=float), (n,))
        vals = np.empty(n)
        qs = np.empty(n)
        ps = np.empty((n, self.dim))
        Ms = np.empty((n, self.dim, self.dim))
        for i in range(n):
            pk = self.eval(float(ts[i]), xs[i], need_second=need_second)
            vals[i], qs[i], ps[i], Ms[i] = pk.value, pk.q, pk.p, pk.M
        return hjb.EvalPack(vals, ps, Ms, qs)

    def value(self, t, x):
        return self.eval(float(t), x, need_second=False).value

    # -- fast path for simulation ------------------------------------------

    def gradient_lattice(self, nt: int = 81, nx_per_axis: int = 241):
        """Cache (value, gradient) on a lattice for cheap interpolated reads."""
        if self._grad_cache is not None:
            return self._grad_cache
        t_lo = max(float(self.t_nodes[0]) + self.delta, 0.0)
        t_axis = np.linspace(t_lo, self.horizon_T, nt)
        axes = [np.linspace(a[0], a[-1], nx_per_axis) for a in self.axes]
        mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.dim)
        vshape = (nt,) + tuple(nx_per_axis for _ in range(self.dim))
        vals = np.empty(vshape)
        grads = np.empty(vshape + (self.dim,))
        for it, tv in enumerate(t_axis):
            pk = self.eval_batch(tv, mesh, need_second=False)
            vals[it] = pk.value.reshape(vshape[1:])
            grads[it] = pk.p.reshape(vshape[1:] + (self.dim,))
        self._grad_cache = (t_axis, axes, vals, grads)
        return self._grad_cache

    def fast_value_grad(self, t, xs):
        """Interpolated (value, gradient) from the cached lattice."""
        t_axis, axes, vals, grads = self.gradient_lattice()
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        tq = np.broadcast_to(np.asarray(t, dtype=float), (xs.shape[0],))
        tq = np.clip(tq, t_axis[0], t_axis[-1])
        xc = np.stack([np.clip(xs[:, i], axes[i][0], axes[i][-1])
                       for i in range(self.dim)], axis=-1)
        v = _interp_clamped(t_axis, axes, vals, tq, xc)
        g = np.stack(
            [_interp_clamped(t_axis, axes, grads[..., i], tq, xc) for i in range(self.dim)],
            axis=-1,
        )
        return v, g


def mollify(node_values, t_nodes, axes, delta: float, *, kernel=None,
            eps: float = 0.0, k: float = 0.0, weights=None, B_set=None,
            model_hash: str = "", meta=None) -> SmoothSurface:
    """Wrap grid values into a smooth surface mollified at width delta."""
    surf = SmoothSurface(t_nodes, axes, node_values, delta, eps=eps, k=k,
                         weights=weights, B_set=B_set, model_hash=model_hash,
                         meta=meta)
    if kernel is not None:
        surf.kernel = kernel
    return surf


# ---------------------------------------------------------------------------
# certification
# ---------------------------------------------------------------------------


@dataclass
class CertReport:
    passed: bool
    min_residual: float
    argmin: tuple
    terminal_margin: float
    phi_margin: float
    tol: float
    eps: float
    k: float
    delta: float
    n_checked: int
    c_curve: list = field(default_factory=list)

    def to_dict(self):
        return {
            "passed": bool(self.passed),
            "min_residual": float(self.min_residual),
            "argmin": [float(v) for v in self.argmin],
            "terminal_margin": float(self.terminal_margin),
            "phi_margin": float(self.phi_margin),
            "tol": float(self.tol),
            "eps": float(self.eps),
            "k": float(self.k),
            "delta": float(self.delta),
            "n_checked": int(self.n_checked),
            "c_curve": [[float(e), float(c)] for e, c in self.c_curve],
        }


def make_check_grid(t_lo, t_hi, x_lo, x_hi, shape=(50, 100)):
    """Rectangular certification lattice: shape[0] times x shape[1] nodes."""
    t_nodes = np.linspace(t_lo, t_hi, shape[0])
    x_lo = np.atleast_1d(np.asarray(x_lo, dtype=float))
    x_hi = np.atleast_1d(np.asarray(x_hi, dtype=float))
    per_axis = max(2, int(round(shape[1] ** (1.0 / len(x_lo)))))
    axes = [np.linspace(lo, hi, shape[1] if len(x_lo) == 1 else per_axis)
            for lo, hi in zip(x_lo, x_hi)]
    return t_nodes, axes


def verify_supersolution(smooth: SmoothSurface, model: ModelSpec, check_grid,
                         tol: float = 1e-3, phi=None, B_set: Box | None = None) -> CertReport:
    """Evaluate the worst-case generator on the smooth surface.

    PASS iff the minimum residual over the check nodes is >= -tol and the
    terminal layer dominates the payoff to within tol. When a target phi and
    a box are supplied, domination w <= phi on the box is checked as well.
    """
    t_nodes, axes = check_grid
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, model.dim)
    min_res = np.inf
    argmin = (np.nan,) * (1 + model.dim)
    n_total = 0
    for tv in t_nodes:
        pk = smooth.eval_batch(float(tv), mesh)
        best, _ = hjb.min_generator_field(model, float(tv), mesh, pk.value, pk.q, pk.p, pk.M)
        n_total += best.size
        i = int(np.argmin(best))
        if best[i] < min_res:
            min_res = float(best[i])
            argmin = (float(tv),) + tuple(mesh[i])
    T = model.horizon_T
    term = smooth.eval_batch(T, mesh, need_second=False).value
    g = np.asarray(model.payoff_g(mesh), dtype=float)
    terminal_margin = float(np.min(term - g))
    phi_margin = np.inf
    if phi is not None and B_set is not None:
        sel = np.ones(mesh.shape[0], dtype=bool)
        for i in range(model.dim):
            sel &= (mesh[:, i] >= B_set.x_lo[i] - 1e-12) & (mesh[:, i] <= B_set.x_hi[i] + 1e-12)
        for tv in t_nodes:
            if not (B_set.t_lo - 1e-12 <= tv <= B_set.t_hi + 1e-12):
                continue
            w = smooth.eval_batch(float(tv), mesh[sel], need_second=False).value
            target = np.asarray(phi(float(tv), mesh[sel]), dtype=float)
            phi_margin = min(phi_margin, float(np.min(target - w)))
    passed = (min_res >= -tol) and (terminal_margin >= -tol)
    if phi is not None and B_set is not None:
        passed = passed and (phi_margin >= -1e-9)
    return CertReport(passed, min_res, argmin, terminal_margin, phi_margin,
                      tol, smooth.eps, smooth.k, smooth.delta, n_total)


def phi_from_surface(surface: hjb.ValueSurface, margin: float):
    """Target callable phi = v + margin read off a solved surface."""

    def phi(t, xs):
        return surface._interp(surface.values, t, xs) + margin

    return phi


DEFAULT_EPS_LADDER = (0.2, 0.1, 0.05, 0.025, 0.0125)


def build_smooth_supersolution(model: ModelSpec, phi, B_set: Box, eta: float,
                               grid: hjb.GridSpec, *,
                               eps_ladder=DEFAULT_EPS_LADDER,
                               tol: float = 1e-3,
                               check_shape=(50, 100),
                               terminal_buffer=None,
                               delta_halvings: int = 6,
                               base_surface: ShakenSurface | None = None,
                               infconv_weights=None,
                               validate: bool = True) -> SmoothSurface:
    """Certified smooth supersolution below phi on B, built on a ladder.

    Walks eps down until the uniform gap max_B(w_eps - w_0) falls below
    eta/2, fixes k from the displacement budget (shift at most eps/2), then
    shrinks the mollifier width from eps/2 until the certificate passes.
    Raises CertificationError with the best report when every rung fails.
    """
    if eta <= 0:
        raise HedgeGameError("eta must be positive")
    T = model.horizon_T
    dt = T / grid.t_steps
    pad_layers = int(math.ceil(0.5 * max(eps_ladder) / dt)) + 2
    if base_surface is None:
        base = solve_shaken(model, grid, 0.0, pad_layers=pad_layers, validate=validate)
    else:
        base = base_surface

    # target must clear the base solution by eta on B
    t_sel = [k for k, tv in enumerate(base.surface.t)
             if B_set.t_lo - 1e-12 <= tv <= B_set.t_hi + 1e-12]
    mesh = np.stack(np.meshgrid(*base.surface.axes, indexing="ij"), axis=-1)
    b_mask = np.ones(mesh.shape[:-1], dtype=bool)
    for i in range(model.dim):
        b_mask &= (mesh[..., i] >= B_set.x_lo[i] - 1e-12) & (mesh[..., i] <= B_set.x_hi[i] + 1e-12)
    xb = mesh[b_mask]
    for k_idx in t_sel:
        tv = float(base.surface.t[k_idx])
        gap = np.asarray(phi(tv, xb), dtype=float) - base.surface.values[k_idx][b_mask]
        if np.min(gap) < eta - 1e-9:
            raise HedgeGameError(
                f"target fails phi >= v + eta on B at t={tv:.4g} "
                f"(min gap {float(np.min(gap)):.4g} < eta {eta})"
            )

    c_curve = []
    best_report = None
    for eps in eps_ladder:
        shaken = solve_shaken(model, grid, float(eps), pad_layers=pad_layers, validate=False)
        diff = shaken.surface.values[t_sel][:, b_mask] - base.surface.values[t_sel][:, b_mask]
        c_B = float(np.max(diff))
        c_curve.append((float(eps), c_B))
        if c_B > 0.5 * eta + 1e-12:
            continue

        w_inf = float(np.max(np.abs(shaken.surface.values)))
        k_conv = math.ceil(8.0 * w_inf / eps**2)
        coords = [shaken.surface.t] + list(shaken.surface.axes)
        conv, _ = inf_convolution(shaken.surface.values, float(k_conv), coords,
                                  weights=infconv_weights)

        pad_time = -float(shaken.surface.t[0])
        delta0 = min(0.5 * eps, 0.9 * shaken.c_eps if shaken.c_eps > 0 else 0.5 * eps,
                     pad_time)
        delta = delta0
        for _ in range(delta_halvings):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                smooth = SmoothSurface(
                    shaken.surface.t, shaken.surface.axes, conv, delta,
                    eps=float(eps), k=float(k_conv), weights=infconv_weights,
                    B_set=B_set, model_hash=shaken.surface.model_hash,
                    meta={"c_reg": shaken.c_reg, "c_eps": shaken.c_eps,
                          "c_eps_B": c_B, "pad_layers": pad_layers},
                )
            buf = terminal_buffer
            if buf is None:
                buf = max(3.0 * delta, 10.0 * dt)
            t_hi = max(T - buf, 0.5 * T)
            cg = make_check_grid(max(B_set.t_lo, 0.0), min(B_set.t_hi, t_hi),
                                 B_set.x_lo, B_set.x_hi, check_shape)
            report = verify_supersolution(smooth, model, cg, tol=tol, phi=phi, B_set=B_set)
            report.c_curve = list(c_curve)
            if best_report is None or report.min_residual > best_report.min_residual:
                best_report = report
            if report.passed:
                smooth.certificate = report
                return smooth
            cell = max([dt] + [a[1] - a[0] for a in shaken.surface.axes])
            if delta * 0.5 < cell:
                break  # a kernel under one cell only degrades further
            delta *= 0.5
    raise CertificationError(
        "shaken/mollified ladder exhausted without certification"
        + ("" if best_report is None else
           f" (best min residual {best_report.min_residual:.3e})"),
        report=best_report,
    )
