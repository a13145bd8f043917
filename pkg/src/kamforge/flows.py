"""Flows of finite-rank generators and pushforward conjugation.

The flow of a finite-rank field is triangular: the angle equation closes on
itself, the w equation is a quadrature along the angle flow, and the y
equation is linear nonautonomous.  All of it is integrated on the oversampled
angle grid in one fixed-step Runge-Kutta pass, then transformed back to
coefficient tables.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dcfield

import numpy as np

from .errors import SmallnessViolated
from .fields import FourierTaylorField, RegularField, lie_bracket, regular_norm
from .gridmaps import (
    Grid,
    GridMap,
    PhaseEval,
    pushforward_gridmap,
    torus_diffeo_invert as _torus_invert_grid,
)

GAUSS5_NODES = (0.04691007703066800, 0.23076534494715845, 0.5, 0.76923465505284155, 0.95308992296933200)
GAUSS5_WEIGHTS = (0.11846344252809454, 0.23931433524968324, 0.28444444444444444, 0.23931433524968324, 0.11846344252809454)
GAUSS3_NODES = (0.11270166537925831, 0.5, 0.88729833462074169)
GAUSS3_WEIGHTS = (0.2777777777777778, 0.4444444444444444, 0.2777777777777778)


@dataclass
class NearIdentityMap:
    """Identity plus a finite-rank displacement, with domain bookkeeping."""

    displacement: RegularField
    grid_map: GridMap
    rho_consumed: float = 0.0
    reports: dict = dcfield(default_factory=dict)

    @property
    def geom(self):
        return self.displacement.geom

    def is_identity(self):
        return self.grid_map.is_identity()


def make_grid(geom, factor=4):
    return Grid(geom, factor=factor)


def torus_diffeo_invert(beta_tables, grid, max_iter=50, tol=None):
    """Inverse displacement of the torus map theta -> theta + beta(theta)."""
    return _torus_invert_grid(beta_tables, grid, max_iter=max_iter, tol=tol)


# ---------------------------------------------------------------------------
# the flow
# ---------------------------------------------------------------------------

def _block_tables(reg):
    g = reg.geom
    return {
        "theta": [reg.theta_table(i) for i in range(g.d)],
        "y0": [reg.y_table(i) for i in range(g.d1)],
        "w0": [reg.w_table(k) for k in range(g.n_w)],
        "yy": [[reg.yy_table(i, j) for j in range(g.d1)] for i in range(g.d1)],
        "yw": [[reg.yw_table(i, k) for k in range(g.n_w)] for i in range(g.d1)],
    }


def flow_of_regular(gen, t=1.0, grid=None, n_steps=32, params=None, smallness=0.25):
    """Time-t map of the flow of a finite-rank generator as a near-identity map.

    The generator must be small (sup of its blocks below `smallness`); the
    returned map carries the norm-doubling report |f_t| <= 2 |g| when params
    are supplied.
    """
    if not isinstance(gen, RegularField):
        gen = RegularField(gen)
    g = gen.geom
    if not 0.0 <= t <= 1.0:
        raise ValueError("flow time must lie in [0, 1]")
    if grid is None:
        grid = Grid(g)
    blocks = _block_tables(gen)
    sup = max(
        (
            float(np.max(np.abs(grid.values(tab))))
            for group in ("theta", "y0", "w0")
            for tab in blocks[group]
            if tab
        ),
        default=0.0,
    )
    if sup > smallness:
        raise SmallnessViolated(f"generator sup {sup:.3e} exceeds {smallness}")
    size = grid.size
    d, d1, nw = g.d, g.d1, g.n_w

    # all states are displacements; Mt is the fundamental matrix minus 1
    h = np.zeros((d, size), dtype=np.complex128)
    Wacc = np.zeros((nw, size), dtype=np.complex128)
    Mt = np.zeros((size, d1, d1), dtype=np.complex128)
    P = np.zeros((size, d1, nw), dtype=np.complex128)
    q = np.zeros((size, d1), dtype=np.complex128)

    def rhs(state):
        h_, W_, M_, P_, q_ = state
        pe = PhaseEval(grid, grid.theta + h_)
        gth = np.stack([pe.eval(tab) if tab else np.zeros(size, dtype=np.complex128) for tab in blocks["theta"]])
        gw = np.stack([pe.eval(tab) if tab else np.zeros(size, dtype=np.complex128) for tab in blocks["w0"]])
        gy0 = np.stack([pe.eval(tab) if tab else np.zeros(size, dtype=np.complex128) for tab in blocks["y0"]], axis=1)
        A = np.zeros((size, d1, d1), dtype=np.complex128)
        B = np.zeros((size, d1, nw), dtype=np.complex128)
        for i in range(d1):
            for j in range(d1):
                if blocks["yy"][i][j]:
                    A[:, i, j] = pe.eval(blocks["yy"][i][j])
            for k in range(nw):
                if blocks["yw"][i][k]:
                    B[:, i, k] = pe.eval(blocks["yw"][i][k])
        dh = gth
        dW = gw
        dM = A @ M_ + A
        dP = A @ P_ + B
        dq = np.einsum("sij,sj->si", A, q_) + gy0 + np.einsum("sik,ks->si", B, W_)
        return (dh, dW, dM, dP, dq)

    state = (h, Wacc, Mt, P, q)
    dt = t / n_steps
    for _ in range(n_steps):
        k1 = rhs(state)
        k2 = rhs(tuple(s + 0.5 * dt * k for s, k in zip(state, k1)))
        k3 = rhs(tuple(s + 0.5 * dt * k for s, k in zip(state, k2)))
        k4 = rhs(tuple(s + dt * k for s, k in zip(state, k3)))
        state = tuple(
            s + dt / 6.0 * (a + 2 * b + 2 * c + e)
            for s, a, b, c, e in zip(state, k1, k2, k3, k4)
        )
    h, Wacc, Mt, P, q = state

    coeffs = {}
    zero = g.zero_alpha()

    def put(c, alpha, values):
        tab, _ = grid.table(values)
        for ell, v in tab.items():
            coeffs[(c, alpha, ell)] = v

    for k in range(d):
        put(k, zero, h[k])
    for i in range(d1):
        put(g.d + i, zero, q[:, i])
        for j in range(d1):
            vals = Mt[:, i, j]
            if np.max(np.abs(vals)) > g.drop_tol:
                a = [0] * g.n_taylor
                a[j] = 1
                put(g.d + i, tuple(a), vals)
        for k in range(nw):
            if np.max(np.abs(P[:, i, k])) > g.drop_tol:
                a = [0] * g.n_taylor
                a[g.d1 + k] = 1
                put(g.d + i, tuple(a), P[:, i, k])
    for k in range(nw):
        put(g.d + g.d1 + k, zero, Wacc[k])

    disp = RegularField(FourierTaylorField(g, coeffs))
    # no inverse factory: the left inverse inverts the constructed map itself
    # to machine precision (reversing the integrator would not)
    gm = GridMap.from_regular_displacement(grid, disp)
    reports = {"generator_sup": sup, "n_steps": n_steps}
    if params is not None:
        gn = regular_norm(gen, params, params.p1)
        fn = regular_norm(disp, params, params.p1)
        reports["doubling_ratio"] = fn / gn if gn > 0 else 0.0
    return NearIdentityMap(displacement=disp, grid_map=gm, reports=reports)


def left_inverse(phi):
    """Left inverse of a near-identity map; the composite is the identity on
    the shrunken sampled domain."""
    inv_gm = phi.grid_map.inverse()
    disp = RegularField(inv_gm.displacement_field())
    return NearIdentityMap(displacement=disp, grid_map=inv_gm, rho_consumed=phi.rho_consumed)


def pushforward(phi, F, center=None):
    """Conjugate a field by a change of variables (near-identity or grid map).

    `center` may be a diagonal model field whose coefficients are carried
    through the conjugation exactly (roundoff-free relative computation).
    """
    gm = phi.grid_map if isinstance(phi, NearIdentityMap) else phi
    return pushforward_gridmap(gm, F, center=center)


def compose_maps(maps):
    """Flatten a sequence of maps applied left to right into one grid map."""
    gms = [m.grid_map if isinstance(m, NearIdentityMap) else m for m in maps]
    if not gms:
        raise ValueError("nothing to compose")
    acc = gms[0]
    for gm in gms[1:]:
        acc = gm.compose(acc)
    return acc


def lie_remainders(gen, F, grid=None, n_steps=32):
    """Linear and quadratic conjugation remainders by Gauss quadrature.

    Returns (L, Q, report): L integrates the pushforward of the bracket over
    the flow time, Q subtracts the linearization from the full pushforward.
    The report carries a 3-node Richardson comparison for L.
    """
    if not isinstance(gen, RegularField):
        gen = RegularField(gen)
    g = gen.geom
    if grid is None:
        grid = Grid(g)
    bracket = lie_bracket(F, gen.field)

    def quad(nodes, weights):
        acc = FourierTaylorField.zero(g)
        for t, w in zip(nodes, weights):
            phi_t = flow_of_regular(gen, t, grid, n_steps)
            acc = acc + w * pushforward(phi_t, bracket)
        return acc

    L5 = quad(GAUSS5_NODES, GAUSS5_WEIGHTS)
    L3 = quad(GAUSS3_NODES, GAUSS3_WEIGHTS)
    phi1 = flow_of_regular(gen, 1.0, grid, n_steps)
    full = pushforward(phi1, F)
    Q = full - bracket - F
    report = {
        "richardson": (L5 - L3).max_abs(),
        "consistency": (F + L5 - full).max_abs(),
    }
    return L5, Q, report
