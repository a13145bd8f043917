"""Grid-based composition machinery for near-identity changes of variables.

Maps are stored semi-spectrally: the angle displacement as Fourier tables,
the (y, w) displacements as polynomials in the Taylor variables whose
coefficients are function values on an oversampled angle grid.  Only the
displacement is ever stored (never 1 + small), so compositions, inverses and
pushforwards stay free of identity-scale cancellation; everything reduces to
evaluating Fourier tables at displaced angles plus truncated polynomial
arithmetic over the grid, with a final FFT back to coefficient tables.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import NoContraction
from .fields import FourierTaylorField, RegularField, ell_norm


# ---------------------------------------------------------------------------
# the grid
# ---------------------------------------------------------------------------

class Grid:
    """Oversampled FFT grid on the angle torus (>= 4x the Fourier cutoff)."""

    def __init__(self, geom, factor=4):
        self.geom = geom
        L = max(geom.fourier_cutoff, 1)
        n = factor * L + 4
        self.n = n
        self.shape = (n,) * geom.d
        self.size = n ** geom.d
        axes = [2.0 * math.pi * np.arange(n) / n for _ in range(geom.d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        self.theta = np.stack([m.ravel() for m in mesh]).astype(np.complex128)
        self._freqs = np.fft.fftfreq(n, d=1.0 / n).astype(np.int64)

    def values(self, table):
        """Grid values of a Fourier coefficient table."""
        spec = np.zeros(self.shape, dtype=np.complex128)
        for ell, v in table.items():
            idx = tuple(int(x) % self.n for x in ell)
            spec[idx] += v
        return (np.fft.ifftn(spec) * self.size).ravel()

    def table(self, values, cutoff=None, tol=None):
        """Fourier table of grid values, truncated at the field cutoff.

        Returns (table, aliasing_tail), the tail being the l2 mass beyond the
        cutoff.  Without an explicit tol the threshold is relative to the data
        scale (machine noise only); final field outputs pass the geometry
        drop tolerance instead.
        """
        g = self.geom
        cutoff = g.fourier_cutoff if cutoff is None else cutoff
        if tol is None:
            scale = float(np.max(np.abs(values))) if values.size else 0.0
            tol = 3e-15 * scale
        spec = np.fft.fftn(values.reshape(self.shape)) / self.size
        table = {}
        tail = 0.0
        nz = np.argwhere(np.abs(spec) > tol)
        for idx in nz:
            ell = tuple(int(self._freqs[k]) for k in idx)
            v = spec[tuple(idx)]
            if ell_norm(ell) <= cutoff:
                table[ell] = complex(v)
            else:
                tail += abs(v) ** 2
        return table, math.sqrt(tail)


class PhaseEval:
    """Evaluates Fourier tables at displaced angle values via phase powers."""

    def __init__(self, grid, theta_values):
        self.grid = grid
        self._base = [np.exp(1j * theta_values[k]) for k in range(grid.geom.d)]
        self._pows = [dict() for _ in range(grid.geom.d)]
        self._phase_cache = {}

    def _pow(self, k, m):
        cache = self._pows[k]
        arr = cache.get(m)
        if arr is None:
            if m == 0:
                arr = np.ones(self.grid.size, dtype=np.complex128)
            elif m > 0:
                arr = self._pow(k, m - 1) * self._base[k]
            else:
                arr = self._pow(k, m + 1) / self._base[k]
            cache[m] = arr
        return arr

    def phase(self, ell):
        arr = self._phase_cache.get(ell)
        if arr is None:
            arr = self._pow(0, ell[0])
            for k in range(1, len(ell)):
                arr = arr * self._pow(k, ell[k])
            self._phase_cache[ell] = arr
        return arr

    def eval(self, table):
        out = np.zeros(self.grid.size, dtype=np.complex128)
        for ell, v in table.items():
            out += v * self.phase(ell)
        return out


# ---------------------------------------------------------------------------
# truncated polynomial ring over grid functions
# ---------------------------------------------------------------------------

class RingPoly:
    """Polynomial in the Taylor variables with grid-function coefficients."""

    __slots__ = ("grid", "entries")

    def __init__(self, grid, entries=None):
        self.grid = grid
        self.entries = dict(entries or {})

    @classmethod
    def zero(cls, grid):
        return cls(grid)

    @classmethod
    def constant(cls, grid, values):
        return cls(grid, {grid.geom.zero_alpha(): np.asarray(values, dtype=np.complex128)})

    @classmethod
    def variable(cls, grid, v):
        a = [0] * grid.geom.n_taylor
        a[v] = 1
        return cls(grid, {tuple(a): np.ones(grid.size, dtype=np.complex128)})

    def copy(self):
        return RingPoly(self.grid, {a: arr.copy() for a, arr in self.entries.items()})

    def add_entry(self, alpha, values):
        cur = self.entries.get(alpha)
        if cur is None:
            self.entries[alpha] = np.array(values, dtype=np.complex128)
        else:
            cur += values

    def __add__(self, other):
        out = self.copy()
        for a, arr in other.entries.items():
            out.add_entry(a, arr)
        return out

    def __sub__(self, other):
        out = self.copy()
        for a, arr in other.entries.items():
            out.add_entry(a, -arr)
        return out

    def scale(self, factor):
        return RingPoly(self.grid, {a: arr * factor for a, arr in self.entries.items()})

    def mul(self, other, prune_tol=0.0):
        cap = self.grid.geom.taylor_cutoff
        out = RingPoly(self.grid)
        for a1, arr1 in self.entries.items():
            d1 = sum(a1)
            for a2, arr2 in other.entries.items():
                if d1 + sum(a2) > cap:
                    continue
                out.add_entry(tuple(x + y for x, y in zip(a1, a2)), arr1 * arr2)
        if prune_tol:
            out.prune(prune_tol)
        return out

    def derivative(self, v):
        out = RingPoly(self.grid)
        for a, arr in self.entries.items():
            if a[v] == 0:
                continue
            aa = list(a)
            aa[v] -= 1
            out.add_entry(tuple(aa), a[v] * arr)
        return out

    def prune(self, tol):
        drop = [a for a, arr in self.entries.items() if np.max(np.abs(arr)) <= tol]
        for a in drop:
            del self.entries[a]
        return self

    def eval_point(self, idx, point):
        total = 0.0 + 0.0j
        for a, arr in self.entries.items():
            mono = arr[idx]
            for v, p in enumerate(a):
                if p:
                    mono *= point[v] ** p
            total += mono
        return total

    def max_abs(self):
        return max((float(np.max(np.abs(arr))) for arr in self.entries.values()), default=0.0)


class Substituter:
    """Memoized powers of substituted Taylor variables."""

    def __init__(self, grid, variables, prune_tol):
        self.grid = grid
        self.vars = variables
        self.prune_tol = prune_tol
        self._memo = {}

    def power(self, alpha):
        if sum(alpha) == 0:
            return RingPoly.constant(self.grid, np.ones(self.grid.size, dtype=np.complex128))
        got = self._memo.get(alpha)
        if got is None:
            v = next(i for i, a in enumerate(alpha) if a)
            lower = list(alpha)
            lower[v] -= 1
            got = self.power(tuple(lower)).mul(self.vars[v], self.prune_tol)
            self._memo[alpha] = got
        return got


# ---------------------------------------------------------------------------
# the map
# ---------------------------------------------------------------------------

class GridMap:
    """A change of variables in displacement form.

    disp_theta: list of d Fourier tables for the angle displacement.
    eta_y, eta_w: RingPoly displacements per y / w component (the map is
    variable + displacement).  inverse_factory, when given, builds the
    (left) inverse lazily.
    """

    def __init__(self, grid, disp_theta, eta_y, eta_w, inverse_factory=None):
        self.grid = grid
        self.disp_theta = disp_theta
        self.eta_y = eta_y
        self.eta_w = eta_w
        self._inverse_factory = inverse_factory
        self._inverse = None
        self._theta_values = None
        self._disp_values = None
        self.aliasing_tail = 0.0

    # -- constructors -------------------------------------------------------
    @classmethod
    def identity(cls, grid):
        g = grid.geom
        m = cls(
            grid,
            [dict() for _ in range(g.d)],
            [RingPoly.zero(grid) for _ in range(g.d1)],
            [RingPoly.zero(grid) for _ in range(g.n_w)],
        )
        m._inverse_factory = lambda: m
        return m

    @classmethod
    def from_regular_displacement(cls, grid, f, inverse_factory=None):
        """Near-identity map 1 + f with f a finite-rank field."""
        reg = f if isinstance(f, RegularField) else RegularField(f)
        g = grid.geom
        disp = [reg.theta_table(i) for i in range(g.d)]
        eta_y = []
        for i in range(g.d1):
            p = RingPoly.zero(grid)
            tab = reg.y_table(i)
            if tab:
                p.add_entry(g.zero_alpha(), grid.values(tab))
            for j in range(g.d1):
                t = reg.yy_table(i, j)
                if t:
                    a = [0] * g.n_taylor
                    a[j] = 1
                    p.add_entry(tuple(a), grid.values(t))
            for k in range(g.n_w):
                t = reg.yw_table(i, k)
                if t:
                    a = [0] * g.n_taylor
                    a[g.d1 + k] = 1
                    p.add_entry(tuple(a), grid.values(t))
            eta_y.append(p)
        eta_w = []
        for k in range(g.n_w):
            p = RingPoly.zero(grid)
            tab = reg.w_table(k)
            if tab:
                p.add_entry(g.zero_alpha(), grid.values(tab))
            eta_w.append(p)
        return cls(grid, disp, eta_y, eta_w, inverse_factory)

    # -- basics ---------------------------------------------------------------
    @property
    def geom(self):
        return self.grid.geom

    def eta(self, v):
        """Displacement ring of Taylor variable v."""
        g = self.geom
        return self.eta_y[v] if v < g.d1 else self.eta_w[v - g.d1]

    def full_var(self, v):
        """variable + displacement as a ring (for substitution products)."""
        return RingPoly.variable(self.grid, v) + self.eta(v)

    def full_vars(self):
        return [self.full_var(v) for v in range(self.geom.n_taylor)]

    def is_identity(self):
        if any(self.disp_theta[k] for k in range(self.geom.d)):
            return False
        return all(not p.entries for p in (*self.eta_y, *self.eta_w))

    @property
    def disp_theta_values(self):
        if self._disp_values is None:
            disp = np.zeros_like(self.grid.theta)
            for k in range(self.geom.d):
                if self.disp_theta[k]:
                    disp[k] = self.grid.values(self.disp_theta[k])
            self._disp_values = disp
        return self._disp_values

    @property
    def theta_values(self):
        if self._theta_values is None:
            self._theta_values = self.grid.theta + self.disp_theta_values
        return self._theta_values

    def prune_tol(self):
        return self.geom.drop_tol * 1e-3

    def inverse(self):
        if self._inverse is None:
            if self._inverse_factory is None:
                self._inverse = left_inverse_gridmap(self)
            else:
                self._inverse = self._inverse_factory()
        return self._inverse

    # -- pointwise application (used by sampling tests) ----------------------
    def apply_at_index(self, idx, y, w):
        g = self.geom
        theta = self.theta_values[:, idx].copy()
        point = tuple(y) + tuple(w)
        yy = [point[i] + self.eta_y[i].eval_point(idx, point) for i in range(g.d1)]
        ww = [point[g.d1 + k] + self.eta_w[k].eval_point(idx, point) for k in range(g.n_w)]
        return theta, np.array(yy), np.array(ww)

    # -- displacement as a field ----------------------------------------------
    def displacement_field(self):
        g = self.geom
        coeffs = {}
        for k in range(g.d):
            for ell, v in self.disp_theta[k].items():
                coeffs[(k, g.zero_alpha(), ell)] = v
        for comp0, polys in ((g.d, self.eta_y), (g.d + g.d1, self.eta_w)):
            for off, poly in enumerate(polys):
                for a, arr in poly.entries.items():
                    tab, _ = self.grid.table(arr)
                    for ell, v in tab.items():
                        key = (comp0 + off, a, ell)
                        coeffs[key] = coeffs.get(key, 0.0) + v
        return FourierTaylorField(g, coeffs)

    # -- composition -----------------------------------------------------------
    def compose(self, other):
        """self after other, i.e. x -> self(other(x))."""
        grid = self.grid
        g = self.geom
        pe = PhaseEval(grid, other.theta_values)
        ptol = self.prune_tol()
        sub = Substituter(grid, other.full_vars(), ptol)

        disp = []
        for k in range(g.d):
            vals = other.disp_theta_values[k]
            if self.disp_theta[k]:
                vals = vals + pe.eval(self.disp_theta[k])
            tab, _ = grid.table(vals)
            disp.append(tab)

        def push_disp(poly):
            out = RingPoly.zero(grid)
            for a, arr in poly.entries.items():
                tab, _ = grid.table(arr, cutoff=grid.n // 2 - 1)
                coeff_vals = pe.eval(tab)
                term = sub.power(a)
                for aa, arr2 in term.entries.items():
                    out.add_entry(aa, coeff_vals * arr2)
            out.prune(ptol)
            return out

        eta_y = [other.eta_y[i] + push_disp(self.eta_y[i]) for i in range(g.d1)]
        eta_w = [other.eta_w[k] + push_disp(self.eta_w[k]) for k in range(g.n_w)]

        def inv_factory(a=self, b=other):
            return b.inverse().compose(a.inverse())

        return GridMap(grid, disp, eta_y, eta_w, inverse_factory=inv_factory)

    # -- jacobian (displacement part only; identity implicit) ------------------
    def jacobian(self):
        """dict (row component, column variable index) -> RingPoly of the
        displacement jacobian.  Columns: 0..d-1 angle directions, then the
        Taylor variables."""
        grid = self.grid
        g = self.geom
        J = {}
        for i in range(g.d):
            if not self.disp_theta[i]:
                continue
            for k in range(g.d):
                dt = {ell: 1j * ell[k] * v for ell, v in self.disp_theta[i].items() if ell[k]}
                if dt:
                    J[(i, k)] = RingPoly.constant(grid, grid.values(dt))
        for comp0, polys in ((g.d, self.eta_y), (g.d + g.d1, self.eta_w)):
            for off, poly in enumerate(polys):
                r = comp0 + off
                for k in range(g.d):
                    ent = RingPoly.zero(grid)
                    for a, arr in poly.entries.items():
                        tab, _ = grid.table(arr, cutoff=grid.n // 2 - 1)
                        dt = {ell: 1j * ell[k] * v for ell, v in tab.items() if ell[k]}
                        if dt:
                            ent.add_entry(a, grid.values(dt))
                    if ent.entries:
                        J[(r, k)] = ent
                for v in range(g.n_taylor):
                    ent = poly.derivative(v)
                    if ent.entries:
                        J[(r, g.d + v)] = ent
        return J


# ---------------------------------------------------------------------------
# torus diffeomorphism inversion
# ---------------------------------------------------------------------------

def torus_diffeo_invert(beta_tables, grid, max_iter=50, tol=None):
    """Inverse displacement of theta -> theta + beta(theta) by fixed-point
    iteration on the grid.  Returns (tables, report); raises NoContraction
    when the iteration stalls."""
    g = grid.geom
    cur = [np.zeros(grid.size, dtype=np.complex128) for _ in range(g.d)]
    sup = max(
        (float(np.max(np.abs(grid.values(t)))) for t in beta_tables if t), default=0.0
    )
    if sup == 0.0:
        return [dict() for _ in range(g.d)], {"iterations": 0, "update": 0.0}
    if tol is None:
        # converge relative to the displacement scale (machine floor)
        tol = 3e-15 * sup
    last = math.inf
    for it in range(1, max_iter + 1):
        pe = PhaseEval(grid, grid.theta + np.stack(cur))
        new = [
            -pe.eval(beta_tables[k]) if beta_tables[k] else np.zeros(grid.size, dtype=np.complex128)
            for k in range(g.d)
        ]
        update = max(float(np.max(np.abs(new[k] - cur[k]))) for k in range(g.d))
        cur = new
        if update < tol:
            break
        if update > last * 1.5 and it > 3:
            raise NoContraction(f"torus inversion diverging at iteration {it}")
        last = update
    else:
        raise NoContraction(f"torus inversion did not reach {tol:g} in {max_iter} steps")
    tables = []
    for k in range(g.d):
        tab, _ = grid.table(cur[k], cutoff=grid.n // 2 - 1)
        tables.append(tab)
    return tables, {"iterations": it, "update": update}


def left_inverse_gridmap(phi):
    """Left inverse of a near-identity map with affine (y, w) displacement:
    invert the angle part by fixed point, then solve the block-affine
    system, keeping every stored quantity at displacement scale."""
    grid = phi.grid
    g = grid.geom
    inv_disp, _ = torus_diffeo_invert(phi.disp_theta, grid)
    theta_inv = grid.theta + np.stack(
        [grid.values(t) if t else np.zeros(grid.size, dtype=np.complex128) for t in inv_disp]
    )
    pe = PhaseEval(grid, theta_inv)
    zero = g.zero_alpha()
    size = grid.size

    def unit(i):
        a = [0] * g.n_taylor
        a[i] = 1
        return tuple(a)

    def eval_entry(poly, alpha):
        arr = poly.entries.get(alpha)
        if arr is None:
            return None
        tab, _ = grid.table(arr, cutoff=grid.n // 2 - 1)
        return pe.eval(tab)

    # w displacement must be translation-only
    cw = np.zeros((size, g.n_w), dtype=np.complex128)
    for k in range(g.n_w):
        for a, arr in phi.eta_w[k].entries.items():
            if sum(a) == 0:
                cw[:, k] = eval_entry(phi.eta_w[k], zero)
            elif np.max(np.abs(arr)) > 0:
                raise ValueError("left inverse requires translation-only w displacement")
    eta_w = []
    for k in range(g.n_w):
        p = RingPoly.zero(grid)
        if np.max(np.abs(cw[:, k])) > 0:
            p.add_entry(zero, -cw[:, k])
        eta_w.append(p)

    A = np.zeros((size, g.d1, g.d1), dtype=np.complex128)
    B = np.zeros((size, g.d1, g.n_w), dtype=np.complex128)
    cy = np.zeros((size, g.d1), dtype=np.complex128)
    for i in range(g.d1):
        for a, arr in phi.eta_y[i].entries.items():
            deg = sum(a)
            if deg == 0:
                cy[:, i] = eval_entry(phi.eta_y[i], zero)
            elif deg == 1:
                v = next(idx for idx, p_ in enumerate(a) if p_)
                vals = eval_entry(phi.eta_y[i], a)
                if v < g.d1:
                    A[:, i, v] = vals
                else:
                    B[:, i, v - g.d1] = vals
            elif np.max(np.abs(arr)) > 0:
                raise ValueError("left inverse requires affine y displacement")
    M = np.linalg.inv(np.eye(g.d1)[None, :, :] + A)
    # displacement blocks, all products of small factors
    lin_y = -np.einsum("sij,sjk->sik", M, A)
    lin_w = -np.einsum("sij,sjk->sik", M, B)
    const = -np.einsum("sij,sj->si", M, cy - np.einsum("sik,sk->si", B, cw))
    eta_y = []
    for i in range(g.d1):
        p = RingPoly.zero(grid)
        if np.max(np.abs(const[:, i])) > 0:
            p.add_entry(zero, const[:, i])
        for j in range(g.d1):
            if np.max(np.abs(lin_y[:, i, j])) > 0:
                p.add_entry(unit(j), lin_y[:, i, j])
        for k in range(g.n_w):
            if np.max(np.abs(lin_w[:, i, k])) > 0:
                p.add_entry(unit(g.d1 + k), lin_w[:, i, k])
        eta_y.append(p)
    return GridMap(grid, inv_disp, eta_y, eta_w, inverse_factory=lambda: phi)


# ---------------------------------------------------------------------------
# pushforward
# ---------------------------------------------------------------------------

def pushforward_gridmap(phi, F, center=None):
    """Conjugated field: the map's differential, evaluated along the inverse,
    applied to the field composed with the inverse.  Fourier-truncated, with
    the aliasing tail recorded on the map.

    When `center` (a diagonal model field) is given, the conjugation is
    computed relative to it: the model's coefficients ride through exactly
    and only displacement-scale data passes the transforms.
    """
    g = F.geom
    if phi.is_identity():
        return FourierTaylorField(g, dict(F.coeffs), clean=False)
    grid = phi.grid
    psi = phi.inverse()
    pe = PhaseEval(grid, psi.theta_values)
    ptol = phi.prune_tol()
    sub = Substituter(grid, psi.full_vars(), ptol)

    base = None
    Fsmall = F
    if center is not None:
        base = _diagonal_parts(center, grid)
        Fsmall = F - center

    V = [RingPoly.zero(grid) for _ in range(g.n_components)]
    for (c, alpha), (ells, vals) in Fsmall.grouped().items():
        tab = {tuple(int(x) for x in ells[r]): vals[r] for r in range(len(vals))}
        coeff_vals = pe.eval(tab)
        term = sub.power(alpha)
        for aa, arr in term.entries.items():
            V[c].add_entry(aa, coeff_vals * arr)
    if base is not None:
        # center(psi(x)) - center(x): only the w rows move, by the small
        # displacement of the inverse
        for k in range(g.n_w):
            lamc = base["w_coeff"][k]
            if lamc == 0.0:
                continue
            for aa, arr in psi.eta_w[k].entries.items():
                V[g.d + g.d1 + k].add_entry(aa, lamc * arr)
    for c in range(g.n_components):
        V[c].prune(ptol)

    J = phi.jacobian()
    out_rows = [V[c].copy() for c in range(g.n_components)]
    for (r, col), entry in J.items():
        ent_eval = RingPoly.zero(grid)
        for a, arr in entry.entries.items():
            tab, _ = grid.table(arr, cutoff=grid.n // 2 - 1)
            coeff_vals = pe.eval(tab)
            term = sub.power(a)
            for aa, arr2 in term.entries.items():
                ent_eval.add_entry(aa, coeff_vals * arr2)
        ent_eval.prune(ptol)
        comp = col if col < g.d else g.d + (col - g.d)
        out_rows[r] = out_rows[r] + ent_eval.mul(V[comp], ptol)
        if base is not None:
            extra = _center_column(base, grid, comp, psi)
            if extra is not None:
                out_rows[r] = out_rows[r] + ent_eval.mul(extra, ptol)

    coeffs = dict(center.coeffs) if center is not None else {}
    tail = 0.0
    for c in range(g.n_components):
        for a, arr in out_rows[c].entries.items():
            tab, t = grid.table(arr, tol=g.drop_tol)
            tail += t ** 2
            for ell, v in tab.items():
                key = (c, a, ell)
                coeffs[key] = coeffs.get(key, 0.0) + v
    phi.aliasing_tail = math.sqrt(tail)
    return FourierTaylorField(g, coeffs)


def _diagonal_parts(center, grid):
    """Constant frequency data of a diagonal model field."""
    g = center.geom
    zero = g.zero_alpha()
    ell0 = (0,) * g.d
    theta_c = [complex(center.coeffs.get((i, zero, ell0), 0.0)) for i in range(g.d)]
    w_coeff = []
    for k in range(g.n_w):
        a = [0] * g.n_taylor
        a[g.d1 + k] = 1
        w_coeff.append(complex(center.coeffs.get((g.d + g.d1 + k, tuple(a), ell0), 0.0)))
    return {"theta": theta_c, "w_coeff": w_coeff}


def _center_column(base, grid, comp, psi):
    """center evaluated along the inverse map, as a ring (None when zero)."""
    g = grid.geom
    if comp < g.d:
        c = base["theta"][comp]
        if c == 0.0:
            return None
        return RingPoly.constant(grid, np.full(grid.size, c, dtype=np.complex128))
    if comp < g.d + g.d1:
        return None
    k = comp - g.d - g.d1
    c = base["w_coeff"][k]
    if c == 0.0:
        return None
    return (RingPoly.variable(grid, g.d1 + k) + psi.eta_w[k]).scale(c)