"""Non-resonance checks and the homological-equation solve.

The linearized conjugation equation is solved blockwise on the degree-graded
removable subspace.  The normal-form part is replaced by its angle average,
whose adjoint action is Fourier-diagonal; each (block, l) system is a small
dense solve.  The remainder couplings enter through a finite Neumann series
(the upper-triangular operator is nilpotent at the block count), and whatever
the angle-dependent normal-form corrections spoil ends up in the returned
residual, which is always recomputed from an independent bracket evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dcfield
from itertools import combinations_with_replacement

import numpy as np

from .decomposition import decompose, project_classes
from .errors import NotInXError, SmallDivisorError, TriangularityViolation
from .fields import (
    FourierTaylorField,
    RegularField,
    ell_norm,
    lie_bracket,
    regular_norm,
    smoothing_project,
)


@dataclass(frozen=True)
class DiagonalNormalForm:
    """Frequency vector and normal frequencies of the model field
    omega . d/dtheta + i Omega_j z+_j d/dz+_j - i Omega_j z-_j d/dz-_j."""

    omega: tuple
    Omega: tuple

    def __post_init__(self):
        object.__setattr__(self, "omega", tuple(float(x) for x in self.omega))
        object.__setattr__(self, "Omega", tuple(float(x) for x in self.Omega))
        if any(not math.isfinite(x) for x in self.omega + self.Omega):
            raise ValueError("frequencies must be finite")

    def as_field(self, geom):
        if len(self.omega) != geom.d or len(self.Omega) != geom.modes.J:
            raise ValueError("dimension mismatch")
        terms = []
        ell0 = (0,) * geom.d
        for i, w in enumerate(self.omega):
            terms.append((f"t{i}", {}, ell0, w))
        for j, Om in enumerate(self.Omega):
            terms.append((f"zp{j}", {f"zp{j}": 1}, ell0, 1j * Om))
            terms.append((f"zm{j}", {f"zm{j}": 1}, ell0, -1j * Om))
        return FourierTaylorField.from_terms(geom, terms)


@dataclass(frozen=True)
class DiophantineParams:
    gamma: float
    tau: float
    M: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0 or self.tau <= 0:
            raise ValueError("gamma and tau must be positive")

    def threshold(self, K):
        return self.M * self.gamma / float(K) ** self.tau


@dataclass
class DivisorCheck:
    ok: bool
    value: float
    threshold: float
    margin: float
    resonant_by_construction: bool = False


def divisor_check(omega, ell, shift, dio, K, shift_kind="none"):
    """Lower bound |omega.l + shift| >= M gamma / K^tau.

    l = 0 with zero shift is resonant by construction and never passes.
    """
    # callers normally keep |l|_1 <= K; the bound itself is defined regardless
    value = float(np.dot(omega, ell)) + float(shift)
    threshold = dio.threshold(K)
    if all(x == 0 for x in ell) and shift == 0:
        return DivisorCheck(False, value, threshold, -threshold, resonant_by_construction=True)
    return DivisorCheck(abs(value) >= threshold, value, threshold, abs(value) - threshold)


@dataclass
class HomologicalSolution:
    g: RegularField
    u: FourierTaylorField
    divisor_min: float
    neumann_depth: int
    audit: list = dcfield(default_factory=list)
    reports: dict = dcfield(default_factory=dict)


def neumann_bound_poly(j, theta, gamma):
    """The bookkeeping polynomials of the finite Neumann series:
    P_1 = 1 and P_j = theta^(j-1) + 2 theta (1 + gamma) P_{j-1}."""
    if j < 1:
        raise ValueError("j must be >= 1")
    p = 1.0
    for m in range(2, j + 1):
        p = theta ** (m - 1) + 2.0 * theta * (1.0 + gamma) * p
    return p


# ---------------------------------------------------------------------------
# slot enumeration and the block solver
# ---------------------------------------------------------------------------

def _slots_for_class(geom, mclass, K):
    """All (component, multi-index) pairs of one class, mode-truncated at K."""
    lam = geom.modes.lam
    if mclass.target == "theta":
        comps = list(range(geom.d))
    elif mclass.target == "y":
        comps = list(range(geom.d, geom.d + geom.d1))
    else:
        comps = [
            geom.d + geom.d1 + k
            for k in range(geom.n_w)
            if lam[k // 2] <= K
        ]
    yvars = list(range(geom.d1))
    wvars = [v for v in range(geom.d1, geom.n_taylor) if lam[(v - geom.d1) // 2] <= K]
    alphas = []
    for ys in combinations_with_replacement(yvars, mclass.y_degree):
        for ws in combinations_with_replacement(wvars, mclass.w_degree):
            a = [0] * geom.n_taylor
            for v in ys + ws:
                a[v] += 1
            alphas.append(tuple(a))
    return [(c, a) for c in comps for a in alphas]


def _slot_shift(geom, slot, Omega):
    """Normal-frequency combination of a slot, with audit metadata.

    Sources add sign * Omega_j, a w target subtracts its own.
    Returns (shift value, kind, j, k).
    """
    c, alpha = slot
    contribs = []
    for v in range(geom.d1, geom.n_taylor):
        if alpha[v]:
            j = (v - geom.d1) // 2
            s = 1 if (v - geom.d1) % 2 == 0 else -1
            contribs.extend([(s, j)] * alpha[v])
    if geom.is_w(c):
        contribs.append((-geom.w_sign(c), geom.w_mode(c)))
    shift = sum(s * Omega[j] for s, j in contribs)
    if not contribs:
        return 0.0, "none", -1, -1
    if len(contribs) == 1:
        return shift, "normal", contribs[0][1], -1
    if len(contribs) == 2:
        (s1, j1), (s2, j2) = contribs
        kind = "sum" if s1 == s2 else "difference"
        return shift, kind, j1, j2
    return shift, "higher", contribs[0][1], contribs[1][1]


def theta_average(field):
    g = field.geom
    return field.restrict(lambda k: all(x == 0 for x in k[2]))


def extract_frequencies(nfield):
    """(omega, Omega) read off the angle average of a normal-form field."""
    g = nfield.geom
    D = theta_average(nfield)
    ell0 = (0,) * g.d
    omega = tuple(float(np.real(D.coeffs.get((i, g.zero_alpha(), ell0), 0.0))) for i in range(g.d))
    Omega = []
    for j in range(g.modes.J):
        c = g.d + g.d1 + 2 * j
        a = [0] * g.n_taylor
        a[g.d1 + 2 * j] = 1
        Omega.append(float(np.imag(D.coeffs.get((c, tuple(a), ell0), 0.0))))
    return omega, tuple(Omega)


class BlockSolver:
    """Exact blockwise inverse of the adjoint action of the angle-averaged
    normal-form part, restricted to the removable subspace at cutoff K.

    Since the averaged field is angle independent, the operator never moves
    the Fourier index: each block contributes a small dense system
    i (omega.l) Id + A per index l, with A assembled once by bracketing the
    block's unit monomials.
    """

    def __init__(self, nfield, spec, dio, K, zero_rhs_tol=None):
        self.geom = nfield.geom
        self.spec = spec
        self.dio = dio
        self.K = float(K)
        self.D = theta_average(nfield)
        self.omega, self.Omega = extract_frequencies(nfield)
        self.audit = []
        self._seen = {}
        self.divisor_min = math.inf
        g = self.geom
        tol = g.drop_tol
        self.zero_rhs_tol = tol if zero_rhs_tol is None else zero_rhs_tol
        self.blocks = []
        for classes in spec.blocks():
            slots = []
            owners = []
            for cl in classes:
                for slot in _slots_for_class(g, cl, self.K):
                    slots.append(slot)
                    owners.append(cl)
            index = {slot: i for i, slot in enumerate(slots)}
            A = self._assemble(slots, index)
            shifts = [_slot_shift(g, slot, self.Omega) for slot in slots]
            self.blocks.append(
                {"classes": classes, "slots": slots, "index": index, "A": A, "shifts": shifts}
            )

    def _assemble(self, slots, index):
        g = self.geom
        n = len(slots)
        A = np.zeros((n, n), dtype=np.complex128)
        ell0 = (0,) * g.d
        for col, (c, alpha) in enumerate(slots):
            unit = FourierTaylorField(g, {(c, alpha, ell0): 1.0}, clean=False)
            br = lie_bracket(self.D, unit)
            for (cc, aa, ee), v in br.coeffs.items():
                if ee != ell0:
                    continue
                row = index.get((cc, aa))
                if row is not None:
                    A[row, col] = v
        return A

    def slot_block(self, key):
        """(block index, slot index) of a coefficient key, or None."""
        g = self.geom
        c, alpha, ell = key
        for bi, blk in enumerate(self.blocks):
            si = blk["index"].get((c, alpha))
            if si is None:
                continue
            cl = blk["classes"]
            at_zero = all(x == 0 for x in ell)
            for owner in cl:
                if owner.matches(g, key):
                    return bi, si
            # slot exists but the average flag excludes this l
            return None
        return None

    def _audit_divisor(self, ell, shift, kind, j, k, rhs_size):
        sig = (ell, round(shift, 12), kind, j, k)
        cached = self._seen.get(sig)
        if cached is None:
            chk = divisor_check(self.omega, ell, shift, self.dio, self.K, kind)
            self._seen[sig] = chk
            self.audit.append(
                {
                    "ell": ell,
                    "kind": kind,
                    "j": j,
                    "k": k,
                    "value": chk.value,
                    "threshold": chk.threshold,
                    "ok": chk.ok,
                }
            )
            if chk.ok:
                self.divisor_min = min(self.divisor_min, abs(chk.value))
        else:
            chk = cached
        if not chk.ok and rhs_size > self.zero_rhs_tol:
            raise SmallDivisorError(ell, kind, chk.value, chk.threshold)
        return chk.ok

    def apply_inverse(self, X, strict=True):
        """Solve the block systems for the right-hand side X (already inside
        the removable subspace at cutoff K)."""
        g = self.geom
        rhs = {}
        for key, v in X.coeffs.items():
            loc = self.slot_block(key)
            if loc is None:
                if strict and abs(v) > self.zero_rhs_tol:
                    raise NotInXError(f"coefficient {key} outside the removable subspace")
                continue
            bi, si = loc
            rhs.setdefault((bi, key[2]), {})[si] = v
        out = {}
        for (bi, ell), entries in sorted(rhs.items()):
            blk = self.blocks[bi]
            n = len(blk["slots"])
            b = np.zeros(n, dtype=np.complex128)
            for si, v in entries.items():
                b[si] = v
            sol = self._solve_cell(blk, ell, b)
            for si, val in enumerate(sol):
                if abs(val) > g.drop_tol:
                    c, alpha = blk["slots"][si]
                    out[(c, alpha, ell)] = out.get((c, alpha, ell), 0.0) + val
        return FourierTaylorField(g, out, clean=False)

    def _solve_cell(self, blk, ell, b):
        n = len(blk["slots"])
        at_zero = all(x == 0 for x in ell)
        keep = []
        for si, owner in enumerate(self._owners(blk)):
            if at_zero and owner.zero_average_only:
                if abs(b[si]) > self.zero_rhs_tol:
                    raise NotInXError(
                        f"average part of {blk['slots'][si]} is outside the subspace"
                    )
                continue
            if not at_zero and owner.average_only:
                if abs(b[si]) > self.zero_rhs_tol:
                    raise NotInXError(
                        f"oscillating part of {blk['slots'][si]} is outside the subspace"
                    )
                continue
            keep.append(si)
        if not keep:
            return np.zeros(n, dtype=np.complex128)
        # audit the model divisors; slots with a failed divisor but negligible
        # data (structural zeros up to roundoff) are dropped from the system
        live = []
        for si in keep:
            shift, kind, j, k = blk["shifts"][si]
            if self._audit_divisor(ell, shift, kind, j, k, abs(b[si])):
                live.append(si)
        keep = live
        if not keep:
            return np.zeros(n, dtype=np.complex128)
        keep = np.array(keep, dtype=np.intp)
        omdl = float(np.dot(self.omega, ell))
        M = blk["A"][np.ix_(keep, keep)] + 1j * omdl * np.eye(len(keep))
        bb = b[keep]
        if not np.any(bb):
            return np.zeros(n, dtype=np.complex128)
        try:
            x = np.linalg.solve(M, bb)
        except np.linalg.LinAlgError as exc:
            raise SmallDivisorError(ell, "matrix", 0.0, self.dio.threshold(self.K)) from exc
        res = np.linalg.norm(M @ x - bb)
        if res > 1e-8 * max(np.linalg.norm(bb), 1e-300):
            raise SmallDivisorError(ell, "matrix", res, self.dio.threshold(self.K))
        sol = np.zeros(n, dtype=np.complex128)
        sol[keep] = x
        return sol

    def _owners(self, blk):
        owners = []
        i = 0
        for cl in blk["classes"]:
            cnt = len(_slots_for_class(self.geom, cl, self.K))
            owners.extend([cl] * cnt)
            i += cnt
        return owners


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def invert_ad_normal(N, X, spec, dio, K):
    """Solve the block-diagonal part of the adjoint equation: returns g with
    ad(N_avg)[g] = X on the removable subspace at cutoff K."""
    solver = BlockSolver(N, spec, dio, K)
    g = solver.apply_inverse(X, strict=True)
    return RegularField(g), solver


def solve_homological(F, spec, dio, K, params, report_exponents=None):
    """Full homological solve at cutoff K via the finite Neumann series.

    Computes X0 = the projected right-hand side, applies exactly b alternating
    Neumann terms driven by the remainder couplings, and returns the solution
    together with the residual of the defining equation, recomputed from an
    independent bracket evaluation of the full non-removable part.
    """
    g = F.geom
    N, X, R = decompose(F, spec)
    X0 = smoothing_project(X, K)
    # structural zeros (resonant slots the structure class keeps empty) may
    # carry roundoff residue; treat anything this far below the data as zero
    rhs_floor = max(g.drop_tol, 1e-8 * X0.max_abs())
    solver = BlockSolver(N, spec, dio, K, zero_rhs_tol=rhs_floor)
    b = spec.block_count

    gsum = FourierTaylorField.zero(g)
    term = X0
    depth = 0
    for j in range(b):
        w = solver.apply_inverse(term, strict=(j == 0))
        sign = 1.0 if j % 2 == 0 else -1.0
        gsum = gsum + sign * w
        depth = j + 1
        term = smoothing_project(project_classes(lie_bracket(R, w), spec.classes_x), K)
        if term.is_zero():
            break
    else:
        scale = max(X0.max_abs(), 1.0)
        if term.max_abs() > 1e-10 * scale:
            raise TriangularityViolation(
                f"upper-triangular operator not nilpotent at depth {b}: "
                f"residual term {term.max_abs():.3e}"
            )

    residual = (
        smoothing_project(project_classes(lie_bracket(N + R, gsum), spec.classes_x), K) - X0
    )
    gout = RegularField(gsum)
    reports = {
        "g_norm_p1": regular_norm(gout, params, params.p1),
        "g_norm_p2": regular_norm(gout, params, params.p2),
        "rhs_norm_p1": regular_norm(RegularField(_regular_part(X0)), params, params.p1)
        if _is_regular(X0)
        else None,
        "residual_norm_p1": _loose_norm(residual, params),
    }
    if report_exponents:
        reports.update(_template_reports(reports, dio, K, report_exponents))
    return HomologicalSolution(
        g=gout,
        u=residual,
        divisor_min=solver.divisor_min,
        neumann_depth=depth,
        audit=solver.audit,
        reports=reports,
    )


def _is_regular(X):
    from .fields import is_regular_key

    return all(is_regular_key(X.geom, k) for k in X.coeffs)


def _regular_part(X):
    from .fields import is_regular_key

    return X.restrict(lambda k: is_regular_key(X.geom, k))


def _loose_norm(field, params):
    """Regular norm when the support allows it, max coefficient otherwise."""
    if _is_regular(field):
        return regular_norm(RegularField(field), params, params.p1)
    return field.max_abs()


def _template_reports(base, dio, K, exps):
    """Measured-over-template ratios for the solution and residual bounds."""
    mu = exps.get("mu", 0.0)
    eta = exps.get("eta", 0.0)
    eps0 = exps.get("eps0", 1.0)
    gamma = dio.gamma
    rhs = base.get("rhs_norm_p1") or 0.0
    out = {}
    if rhs > 0:
        template_g = K ** mu * rhs / gamma
        out["solution_bound_ratio"] = base["g_norm_p1"] / template_g
        template_u = eps0 / gamma * K ** (mu - eta) * rhs
        ru = base["residual_norm_p1"]
        out["residual_bound_ratio"] = (ru / template_u) if template_u > 0 else math.inf
        out["mu_measured"] = (
            math.log(max(gamma * base["g_norm_p1"] / rhs, 1e-300)) / math.log(K)
            if K > 1
            else 0.0
        )
    return out
