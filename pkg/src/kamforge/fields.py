"""Sparse Fourier-Taylor algebra for vector fields on T^d x C^d1 x C^{2J}.

A vector field is stored as a sparse table of monomial coefficients

    coeff * y^a * w^b * exp(i l.theta) * d/d(component)

keyed by (component index, taylor multi-index, fourier index).  The normal
variables come in conjugate pairs w = (z^+_j, z^-_j), j = 0..J-1, each pair
carrying a positive weight lambda_j.  Everything is truncated: |l|_1 <= L in
Fourier and total Taylor degree <= dmax.  Coefficients whose magnitude falls
below the drop tolerance are discarded after every operation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import product as _iproduct

import numpy as np

DEFAULT_DROP_TOL = 1e-14


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModeSet:
    """Normal-mode weights lambda_j > 0, nondecreasing.  Total w-dimension 2J."""

    lam: tuple

    def __post_init__(self):
        lam = tuple(float(x) for x in self.lam)
        object.__setattr__(self, "lam", lam)
        if not lam:
            raise ValueError("need at least one normal mode")
        if any(x <= 0 for x in lam):
            raise ValueError("mode weights must be positive")
        if any(lam[i] > lam[i + 1] for i in range(len(lam) - 1)):
            raise ValueError("mode weights must be nondecreasing")

    @property
    def J(self):
        return len(self.lam)

    @property
    def w_dim(self):
        return 2 * len(self.lam)


@dataclass(frozen=True)
class Geometry:
    """Dimensions and cutoffs shared by all fields in a computation.

    Variables are ordered theta_0..theta_{d-1}, y_0..y_{d1-1}, then the
    normal pairs interleaved as zp_0, zm_0, zp_1, zm_1, ...
    """

    d: int
    d1: int
    modes: ModeSet
    fourier_cutoff: int
    taylor_cutoff: int = 3
    drop_tol: float = DEFAULT_DROP_TOL

    def __post_init__(self):
        if self.d < 1 or self.d1 < 0:
            raise ValueError("bad dimensions")
        if self.fourier_cutoff < 0 or self.taylor_cutoff < 0:
            raise ValueError("bad cutoffs")

    # -- component indexing ------------------------------------------------
    @property
    def n_w(self):
        return self.modes.w_dim

    @property
    def n_taylor(self):
        """Number of Taylor variables (y's then w's)."""
        return self.d1 + self.n_w

    @property
    def n_components(self):
        return self.d + self.n_taylor

    def is_theta(self, c):
        return c < self.d

    def is_y(self, c):
        return self.d <= c < self.d + self.d1

    def is_w(self, c):
        return c >= self.d + self.d1

    def component_group(self, c):
        if self.is_theta(c):
            return "theta"
        if self.is_y(c):
            return "y"
        return "w"

    def w_sign(self, c):
        """+1 for a z^+ component, -1 for z^-."""
        k = c - self.d - self.d1
        return 1 if k % 2 == 0 else -1

    def w_mode(self, c):
        return (c - self.d - self.d1) // 2

    def w_conjugate(self, c):
        """Component index with the z^+ / z^- roles swapped."""
        k = c - self.d - self.d1
        return self.d + self.d1 + (k ^ 1)

    def component_label(self, c):
        if self.is_theta(c):
            return f"t{c}"
        if self.is_y(c):
            return f"y{c - self.d}"
        j, s = self.w_mode(c), self.w_sign(c)
        return ("zp" if s > 0 else "zm") + str(j)

    def component_index(self, label):
        if isinstance(label, (int, np.integer)):
            c = int(label)
            if not 0 <= c < self.n_components:
                raise KeyError(label)
            return c
        if label.startswith("t"):
            c = int(label[1:])
        elif label.startswith("y"):
            c = self.d + int(label[1:])
        elif label.startswith("zp"):
            c = self.d + self.d1 + 2 * int(label[2:])
        elif label.startswith("zm"):
            c = self.d + self.d1 + 2 * int(label[2:]) + 1
        else:
            raise KeyError(label)
        if not 0 <= c < self.n_components:
            raise KeyError(label)
        return c

    # -- taylor variable indexing (0..n_taylor-1 maps to component d+v) ----
    def var_of_component(self, c):
        if c < self.d:
            raise ValueError("theta components are not Taylor variables")
        return c - self.d

    def var_is_w(self, v):
        return v >= self.d1

    def var_lambda(self, v):
        """Weight lambda for a w Taylor variable, None for y."""
        if v < self.d1:
            return None
        return self.modes.lam[(v - self.d1) // 2]

    def var_w_sign(self, v):
        return 1 if (v - self.d1) % 2 == 0 else -1

    def var_w_mode(self, v):
        return (v - self.d1) // 2

    def var_conjugate(self, v):
        if v < self.d1:
            return v
        return self.d1 + ((v - self.d1) ^ 1)

    def swap_alpha(self, alpha):
        """Swap z^+ and z^- exponents in a Taylor multi-index."""
        a = list(alpha)
        for j in range(self.modes.J):
            i1 = self.d1 + 2 * j
            a[i1], a[i1 + 1] = a[i1 + 1], a[i1]
        return tuple(a)

    def zero_alpha(self):
        return (0,) * self.n_taylor

    def taylor_index(self, spec):
        """Build a multi-index from a dict like {'y0': 1, 'zp2': 1}."""
        if isinstance(spec, tuple):
            if len(spec) != self.n_taylor:
                raise ValueError("multi-index length mismatch")
            return spec
        a = [0] * self.n_taylor
        for lab, p in (spec or {}).items():
            c = self.component_index(lab)
            a[self.var_of_component(c)] += int(p)
        return tuple(a)

    def ells(self, cutoff=None):
        """All Fourier indices with |l|_1 <= cutoff (default: the field cutoff)."""
        L = self.fourier_cutoff if cutoff is None else min(cutoff, self.fourier_cutoff)
        L = int(math.floor(L))
        out = []
        for ell in _iproduct(range(-L, L + 1), repeat=self.d):
            if sum(abs(x) for x in ell) <= L:
                out.append(ell)
        out.sort()
        return out


def ell_norm(ell):
    return sum(abs(x) for x in ell)


def ell_bracket(ell):
    """<l> = max(1, |l|_1)."""
    return max(1, ell_norm(ell))


# ---------------------------------------------------------------------------
# norm parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormParams:
    """Analyticity widths, radii and Sobolev indices used by the norms.

    y_scaling is the exponent of the y-ball radius r**y_scaling.
    """

    s0: float = 0.0
    a0: float = 0.0
    r0: float = 1.0
    s: float = 0.0
    a: float = 0.0
    r: float = 1.0
    p0: float = 2.0
    p1: float = 3.0
    p2: float = 5.0
    nu: float = 0.0
    y_scaling: float = 2.0

    def __post_init__(self):
        if self.r0 <= 0 or self.r <= 0:
            raise ValueError("radii must be positive")
        if not (0 <= self.s <= max(self.s0, 0)) and self.s0 > 0:
            raise ValueError("need 0 <= s <= s0")
        if self.r > self.r0 or self.a > self.a0 + 1e-15:
            raise ValueError("current widths exceed base widths")
        if not (self.p0 < self.p1):
            raise ValueError("need p0 < p1")
        if self.p1 < self.p0 + self.nu + 1 - 1e-12:
            raise ValueError("need p1 >= p0 + nu + 1")
        if self.y_scaling <= 0:
            raise ValueError("y_scaling must be positive")

    def validate_for_dimension(self, d):
        if self.p0 <= d / 2:
            raise ValueError(f"p0 = {self.p0} must exceed d/2 = {d / 2}")
        if self.p2 < self.p1:
            raise ValueError("need p2 >= p1")

    def shrunk(self, rho):
        """Shrink s, a, r by rho times the base widths."""
        return replace(
            self,
            s=max(self.s - rho * self.s0, 0.0),
            a=max(self.a - rho * self.a0, 0.0),
            r=max(self.r - rho * self.r0, 1e-12),
        )


# ---------------------------------------------------------------------------
# monomial classes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MonomialClass:
    """A monomial subspace: target component group and source multiset.

    sources is a tuple over {"y", "w"}; e.g. ("w", "w") for fields quadratic
    in the normal variables.  average_only keeps only l = 0, zero_average_only
    drops l = 0.
    """

    target: str
    sources: tuple = ()
    average_only: bool = False
    zero_average_only: bool = False

    def __post_init__(self):
        if self.target not in ("theta", "y", "w"):
            raise ValueError("target must be one of theta, y, w")
        src = tuple(sorted(self.sources))
        if any(u not in ("y", "w") for u in src):
            raise ValueError("sources must be 'y' or 'w'")
        object.__setattr__(self, "sources", src)
        if self.average_only and self.zero_average_only:
            raise ValueError("average flags are mutually exclusive")

    @property
    def y_degree(self):
        return sum(1 for u in self.sources if u == "y")

    @property
    def w_degree(self):
        return sum(1 for u in self.sources if u == "w")

    def signature(self):
        return (self.target, self.y_degree, self.w_degree)

    def matches(self, geom, key):
        c, alpha, ell = key
        if geom.component_group(c) != self.target:
            return False
        jy = sum(alpha[: geom.d1])
        kw = sum(alpha[geom.d1:])
        if (jy, kw) != (self.y_degree, self.w_degree):
            return False
        at_zero = all(x == 0 for x in ell)
        if self.average_only and not at_zero:
            return False
        if self.zero_average_only and at_zero:
            return False
        return True

    def label(self):
        src = ",".join(self.sources) if self.sources else "0"
        tag = ""
        if self.average_only:
            tag = ":avg"
        elif self.zero_average_only:
            tag = ":osc"
        return f"({self.target};{src}){tag}"


def key_signature(geom, key):
    """(target group, y-degree, w-degree) of a coefficient key."""
    c, alpha, _ = key
    return (geom.component_group(c), sum(alpha[: geom.d1]), sum(alpha[geom.d1:]))


# ---------------------------------------------------------------------------
# the field
# ---------------------------------------------------------------------------

class FourierTaylorField:
    """Sparse truncated Fourier-Taylor vector field.

    Treat instances as immutable; all operations return new fields.
    """

    __slots__ = ("geom", "coeffs")

    def __init__(self, geom, coeffs=None, clean=True):
        self.geom = geom
        self.coeffs = dict(coeffs or {})
        if clean:
            tol = geom.drop_tol
            self.coeffs = {k: v for k, v in self.coeffs.items() if abs(v) > tol}

    # -- constructors -------------------------------------------------------
    @classmethod
    def zero(cls, geom):
        return cls(geom, {})

    @classmethod
    def from_terms(cls, geom, terms):
        """terms: iterable of (component, taylor_spec, ell, value)."""
        coeffs = {}
        for comp, tay, ell, val in terms:
            c = geom.component_index(comp)
            alpha = geom.taylor_index(tay)
            ell = tuple(int(x) for x in ell)
            key = (c, alpha, ell)
            _validate_key(geom, key)
            coeffs[key] = coeffs.get(key, 0.0) + complex(val)
        return cls(geom, coeffs)

    # -- basic algebra -------------------------------------------------------
    def __add__(self, other):
        _same_geom(self, other)
        out = dict(self.coeffs)
        for k, v in other.coeffs.items():
            out[k] = out.get(k, 0.0) + v
        return FourierTaylorField(self.geom, out)

    def __sub__(self, other):
        _same_geom(self, other)
        out = dict(self.coeffs)
        for k, v in other.coeffs.items():
            out[k] = out.get(k, 0.0) - v
        return FourierTaylorField(self.geom, out)

    def __mul__(self, scalar):
        s = complex(scalar)
        return FourierTaylorField(self.geom, {k: s * v for k, v in self.coeffs.items()})

    __rmul__ = __mul__

    def __neg__(self):
        return self * (-1.0)

    def __len__(self):
        return len(self.coeffs)

    def is_zero(self):
        return not self.coeffs

    def max_abs(self):
        return max((abs(v) for v in self.coeffs.values()), default=0.0)

    def restrict(self, predicate):
        return FourierTaylorField(
            self.geom, {k: v for k, v in self.coeffs.items() if predicate(k)}, clean=False
        )

    def coefficient(self, comp, tay, ell):
        c = self.geom.component_index(comp)
        alpha = self.geom.taylor_index(tay)
        return self.coeffs.get((c, alpha, tuple(ell)), 0.0)

    def component_table(self, c, alpha=None):
        """Fourier table {ell: coeff} of one (component, multi-index) slot."""
        if alpha is None:
            alpha = self.geom.zero_alpha()
        return {
            ell: v for (cc, aa, ell), v in self.coeffs.items() if cc == c and aa == alpha
        }

    def grouped(self):
        """dict (c, alpha) -> (ells array (n, d), values array (n,))."""
        buckets = {}
        for (c, alpha, ell), v in self.coeffs.items():
            buckets.setdefault((c, alpha), []).append((ell, v))
        out = {}
        for ca, items in buckets.items():
            ells = np.array([e for e, _ in items], dtype=np.int64).reshape(len(items), self.geom.d)
            vals = np.array([v for _, v in items], dtype=np.complex128)
            out[ca] = (ells, vals)
        return out

    def reality_defect(self):
        """Max violation of the real-on-real coefficient symmetry.

        The field is real on the real subspace (theta, y real, z^- = conj z^+)
        iff conj(coeff(cbar, swap(alpha), -l)) equals sigma * coeff(c, alpha, l)
        with sigma and cbar from the component group.
        """
        g = self.geom
        worst = 0.0
        for (c, alpha, ell), v in self.coeffs.items():
            if g.is_w(c):
                cbar = g.w_conjugate(c)
            else:
                cbar = c
            mirror = (cbar, g.swap_alpha(alpha), tuple(-x for x in ell))
            w = self.coeffs.get(mirror, 0.0)
            worst = max(worst, abs(np.conj(w) - v))
        return worst

    def __repr__(self):
        return f"FourierTaylorField({len(self.coeffs)} coeffs, L={self.geom.fourier_cutoff}, dmax={self.geom.taylor_cutoff})"


def _same_geom(a, b):
    if a.geom is not b.geom and a.geom != b.geom:
        raise ValueError("incompatible field geometries")


def _validate_key(geom, key):
    c, alpha, ell = key
    if not 0 <= c < geom.n_components:
        raise ValueError(f"bad component {c}")
    if len(alpha) != geom.n_taylor or any(a < 0 for a in alpha):
        raise ValueError(f"bad multi-index {alpha}")
    if sum(alpha) > geom.taylor_cutoff:
        raise ValueError(f"Taylor degree {sum(alpha)} exceeds cutoff")
    if len(ell) != geom.d:
        raise ValueError(f"bad Fourier index {ell}")
    if ell_norm(ell) > geom.fourier_cutoff:
        raise ValueError(f"Fourier index {ell} exceeds cutoff")


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def scalar_norm(table, s, p):
    """Weighted l2 norm of a Fourier coefficient table.

    sqrt( sum |u_l|^2 exp(2 s |l|_1) <l>^(2p) ) with <l> = max(1, |l|_1).
    """
    if s < 0:
        raise ValueError("s must be nonnegative")
    total = 0.0
    for ell, v in table.items():
        n1 = ell_norm(ell)
        total += abs(v) ** 2 * math.exp(2.0 * s * n1) * ell_bracket(ell) ** (2.0 * p)
    return math.sqrt(total)


def w_value_norm(geom, wvec_table, a, q):
    """Norm of a w-valued Fourier table: per l, sqrt(sum_k lam^2q e^2a lam |v_k|^2).

    wvec_table maps ell -> dict {w-component-index-in-0..2J-1: value}.
    Returns the scalar table ell -> ||value||_{a,q}.
    """
    lam = geom.modes.lam
    out = {}
    for ell, vec in wvec_table.items():
        acc = 0.0
        for k, v in vec.items():
            lj = lam[k // 2]
            acc += lj ** (2.0 * q) * math.exp(2.0 * a * lj) * abs(v) ** 2
        out[ell] = math.sqrt(acc)
    return out


def _theta_scale(params):
    return 1.0 / max(1.0, params.s0)


def evaluate_tables(field, y, w):
    """Per-component Fourier tables of the Taylor polynomial at a point.

    Returns (theta_tables, y_tables, w_table) where the first two are lists of
    {ell: value} and w_table maps ell -> {w-index: value}.
    """
    g = field.geom
    y = tuple(complex(v) for v in y)
    w = tuple(complex(v) for v in w)
    if len(y) != g.d1 or len(w) != g.n_w:
        raise ValueError("evaluation point has wrong shape")
    point = y + w
    th = [dict() for _ in range(g.d)]
    yy = [dict() for _ in range(g.d1)]
    ww = {}
    for (c, alpha, ell), v in field.coeffs.items():
        mono = v
        for i, a in enumerate(alpha):
            if a:
                mono *= point[i] ** a
        if mono == 0:
            continue
        if g.is_theta(c):
            th[c][ell] = th[c].get(ell, 0.0) + mono
        elif g.is_y(c):
            yy[c - g.d][ell] = yy[c - g.d].get(ell, 0.0) + mono
        else:
            k = c - g.d - g.d1
            ww.setdefault(ell, {})
            ww[ell][k] = ww[ell].get(k, 0.0) + mono
    return th, yy, ww


def field_norm(field, params, p, at=None):
    """Pointwise-in-(y, w) field norm: sum of theta, y, and w block norms.

    The theta block is the sup over angles of H^p norms scaled by
    1/max(1, s0); the y block is the sum scaled by 1/r0**y_scaling; the w
    block combines the two mixed Sobolev norms scaled by 1/r0.
    """
    g = field.geom
    if at is None:
        y = (0.0,) * g.d1
        w = (0.0,) * g.n_w
    else:
        y, w = at
    _check_in_ball(g, params, y, w)
    th, yy, ww = evaluate_tables(field, y, w)
    s = params.s
    theta_part = _theta_scale(params) * max(
        (scalar_norm(t, s, p) for t in th), default=0.0
    )
    y_part = sum(scalar_norm(t, s, p) for t in yy) / params.r0 ** params.y_scaling
    t_low = w_value_norm(g, ww, params.a, params.p0)
    t_high = w_value_norm(g, ww, params.a, p)
    w_part = (scalar_norm(t_low, s, p) + scalar_norm(t_high, s, params.p0)) / params.r0
    return theta_part + y_part + w_part


def _check_in_ball(geom, params, y, w):
    if sum(abs(v) for v in y) > params.r ** params.y_scaling + 1e-12:
        raise ValueError("y outside the domain ball")
    lam = geom.modes.lam
    nrm = math.sqrt(
        sum(
            lam[k // 2] ** (2 * params.p1) * math.exp(2 * params.a * lam[k // 2]) * abs(v) ** 2
            for k, v in enumerate(w)
        )
    )
    if nrm > params.r + 1e-12:
        raise ValueError("w outside the domain ball")


# ---------------------------------------------------------------------------
# regular (finite rank) fields
# ---------------------------------------------------------------------------

REGULAR_CLASSES = (
    MonomialClass("theta", (), zero_average_only=True),
    MonomialClass("y", ()),
    MonomialClass("w", ()),
    MonomialClass("y", ("y",)),
    MonomialClass("y", ("w",)),
)


def is_regular_key(geom, key):
    return any(cl.matches(geom, key) for cl in REGULAR_CLASSES)


class RegularField:
    """Finite-rank field: blocks (theta,0) zero-average, (y,0), (w,0), (y,y), (y,w)."""

    __slots__ = ("field",)

    def __init__(self, field):
        g = field.geom
        for key in field.coeffs:
            if not is_regular_key(g, key):
                raise ValueError(f"non-regular coefficient {key}")
        self.field = field

    @property
    def geom(self):
        return self.field.geom

    @classmethod
    def zero(cls, geom):
        return cls(FourierTaylorField.zero(geom))

    def is_zero(self):
        return self.field.is_zero()

    def scaled(self, t):
        return RegularField(self.field * t)

    # block accessors used by the flow and inverse formulas
    def theta_table(self, i):
        return self.field.component_table(i)

    def y_table(self, i):
        return self.field.component_table(self.geom.d + i)

    def w_table(self, k):
        return self.field.component_table(self.geom.d + self.geom.d1 + k)

    def yy_table(self, i, j):
        g = self.geom
        alpha = [0] * g.n_taylor
        alpha[j] = 1
        return self.field.component_table(g.d + i, tuple(alpha))

    def yw_table(self, i, k):
        g = self.geom
        alpha = [0] * g.n_taylor
        alpha[g.d1 + k] = 1
        return self.field.component_table(g.d + i, tuple(alpha))

    def __repr__(self):
        return f"RegularField({len(self.field.coeffs)} coeffs)"


def regular_norm(f, params, p):
    """Finite-rank field norm: constant blocks in the field norm, the (y, y)
    block in plain H^p, and the (y, w) block in the dual weights
    (-a, -p0-nu) and (-a, p-p1-p0-nu)."""
    if isinstance(f, RegularField):
        f = f.field
    g = f.geom
    s, a = params.s, params.a
    lam = g.modes.lam
    zero_a = g.zero_alpha()

    th = [dict() for _ in range(g.d)]
    yc = [dict() for _ in range(g.d1)]
    wc = {}
    yy = {}
    yw = [dict() for _ in range(g.d1)]
    for (c, alpha, ell), v in f.coeffs.items():
        deg = sum(alpha)
        if g.is_theta(c):
            th[c][ell] = v
        elif g.is_y(c):
            i = c - g.d
            if deg == 0:
                yc[i][ell] = v
            else:
                vpos = next(k for k, x in enumerate(alpha) if x)
                if vpos < g.d1:
                    yy.setdefault((i, vpos), {})[ell] = v
                else:
                    yw[i].setdefault(ell, {})[vpos - g.d1] = v
        else:
            if deg != 0:
                raise ValueError("not a regular field")
            wc.setdefault(ell, {})[c - g.d - g.d1] = v

    total = _theta_scale(params) * max((scalar_norm(t, s, p) for t in th), default=0.0)
    total += sum(scalar_norm(t, s, p) for t in yc) / params.r0 ** params.y_scaling
    t_low = w_value_norm(g, wc, a, params.p0)
    t_high = w_value_norm(g, wc, a, p)
    total += (scalar_norm(t_low, s, p) + scalar_norm(t_high, s, params.p0)) / params.r0
    total += max((scalar_norm(t, s, p) for t in yy.values()), default=0.0)

    q1 = -(params.p0 + params.nu)
    q2 = p - params.p1 - params.p0 - params.nu
    best = 0.0
    for i in range(g.d1):
        if not yw[i]:
            continue
        t1 = w_value_norm(g, yw[i], -a, q1)
        t2 = w_value_norm(g, yw[i], -a, q2)
        best = max(best, scalar_norm(t1, s, p) + scalar_norm(t2, s, params.p0))
    total += best / params.r0 ** params.y_scaling
    return total


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

def project_monomial(field, mclass):
    """Extract the coefficients matched by one monomial class."""
    g = field.geom
    if mclass.y_degree + mclass.w_degree > g.taylor_cutoff:
        raise ValueError("class degree exceeds the Taylor cutoff")
    return field.restrict(lambda k: mclass.matches(g, k))


def project_classes(field, classes):
    g = field.geom
    sigs = {}
    for cl in classes:
        sigs.setdefault(cl.signature(), []).append(cl)

    def keep(key):
        cands = sigs.get(key_signature(g, key))
        if not cands:
            return False
        return any(cl.matches(g, key) for cl in cands)

    return field.restrict(keep)


def smoothing_project(field, K):
    """Ultraviolet projector: keep |l|_1 <= K and normal modes with lambda <= K.

    The mode truncation applies to w components and to w Taylor sources, so
    the projector squares to itself on every block.
    """
    g = field.geom
    lam = g.modes.lam

    def keep(key):
        c, alpha, ell = key
        if ell_norm(ell) > K:
            return False
        if g.is_w(c) and lam[g.w_mode(c)] > K:
            return False
        for v in range(g.d1, g.n_taylor):
            if alpha[v] and lam[(v - g.d1) // 2] > K:
                return False
        return True

    return field.restrict(keep)


def smoothing_complement(field, K):
    low = smoothing_project(field, K)
    return field - low


# ---------------------------------------------------------------------------
# Lie bracket
# ---------------------------------------------------------------------------

def lie_bracket(F, G):
    """[F, G] = dG[F] - dF[G], truncated in degree and Fourier support.

    With this orientation [N0, g] acts on e^(i l.theta) d/dy as multiplication
    by i omega.l.
    """
    _same_geom(F, G)
    g = F.geom
    acc = _BracketAccumulator(g)
    _directional(acc, G, F, +1.0)
    _directional(acc, F, G, -1.0)
    return acc.result()


class _BracketAccumulator:
    """Accumulates convolution contributions on a doubled Fourier box."""

    def __init__(self, geom):
        self.geom = geom
        self.side = 4 * geom.fourier_cutoff + 1
        self.half = 2 * geom.fourier_cutoff
        self.slots = {}

    def add(self, c, alpha, ells, vals):
        key = (c, alpha)
        box = self.slots.get(key)
        if box is None:
            box = np.zeros(self.side ** self.geom.d, dtype=np.complex128)
            self.slots[key] = box
        idx = np.zeros(len(ells), dtype=np.int64)
        for k in range(self.geom.d):
            idx = idx * self.side + (ells[:, k] + self.half)
        np.add.at(box, idx, vals)

    def result(self):
        g = self.geom
        L = g.fourier_cutoff
        coeffs = {}
        tol = g.drop_tol
        for (c, alpha), box in self.slots.items():
            nz = np.nonzero(np.abs(box) > tol)[0]
            for flat in nz:
                ell = []
                rem = int(flat)
                for _ in range(g.d):
                    ell.append(rem % self.side - self.half)
                    rem //= self.side
                ell = tuple(reversed(ell))
                if ell_norm(ell) <= L:
                    coeffs[(c, alpha, ell)] = box[flat]
        return FourierTaylorField(g, coeffs, clean=False)


def _directional(acc, A, B, sign):
    """Accumulate sign * dA[B] into acc."""
    g = acc.geom
    gA = A.grouped()
    gB = B.grouped()
    by_comp = {}
    for (c, alpha), data in gB.items():
        by_comp.setdefault(c, []).append((alpha, data))
    dmax = g.taylor_cutoff
    for (cA, aA), (ellsA, valsA) in gA.items():
        degA = sum(aA)
        # theta directions: derivative multiplies by i l_k
        for k in range(g.d):
            for aB, (ellsB, valsB) in by_comp.get(k, ()):
                if degA + sum(aB) > dmax:
                    continue
                dvals = (1j * ellsA[:, k].astype(np.complex128)) * valsA
                if not np.any(dvals):
                    continue
                _conv_into(acc, cA, _add_alpha(aA, aB), ellsA, dvals, ellsB, valsB, sign)
        # Taylor directions
        for v in range(g.n_taylor):
            if aA[v] == 0:
                continue
            a_red = list(aA)
            a_red[v] -= 1
            a_red = tuple(a_red)
            for aB, (ellsB, valsB) in by_comp.get(g.d + v, ()):
                if degA - 1 + sum(aB) > dmax:
                    continue
                _conv_into(acc, cA, _add_alpha(a_red, aB), ellsA, aA[v] * valsA, ellsB, valsB, sign)


def _add_alpha(a, b):
    return tuple(x + y for x, y in zip(a, b))


def _conv_into(acc, c, alpha, ellsA, valsA, ellsB, valsB, sign):
    ells = (ellsA[:, None, :] + ellsB[None, :, :]).reshape(-1, ellsA.shape[1])
    vals = (sign * np.outer(valsA, valsB)).ravel()
    acc.add(c, alpha, ells, vals)
