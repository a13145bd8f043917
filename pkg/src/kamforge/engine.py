"""The iteration driver: schedules, exponent constraints, the quadratic step,
compatible change-of-variables hooks, the reducibility step, and diagnostics.

Desk-scale note: the exponent inequalities are asymptotic statements; presets
may run with them violated (warn-and-continue), while every step still checks
the measured smallness condition and records measured-versus-template ratios
for the step bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dcfield, replace
from fractions import Fraction

import numpy as np

from .decomposition import (
    decompose,
    generator_symmetry_defect,
    project_classes,
    structure_check,
)
from .errors import CompatViolation, SmallDivisorError, SmallnessViolated
from .fields import (
    FourierTaylorField,
    RegularField,
    field_norm,
    lie_bracket,
    regular_norm,
    smoothing_project,
)
from .flows import compose_maps, flow_of_regular, pushforward
from .gridmaps import Grid, GridMap, PhaseEval, RingPoly, torus_diffeo_invert
from .homological import (
    BlockSolver,
    DiagonalNormalForm,
    DiophantineParams,
    divisor_check,
    solve_homological,
)

INF = math.inf


# ---------------------------------------------------------------------------
# exponent budget
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExponentBudget:
    """All iteration exponents and smallness constants, with the derived
    kappa0 = mu + nu + 4."""

    eps0: float
    R0: float
    G0: float
    mu: float
    nu: float
    eta: float
    chi: float
    alpha: float
    kappa1: float
    kappa2: float
    kappa3: float
    p2: float
    K0: float
    gamma0: float
    mode: str = "Sobolev"

    def __post_init__(self):
        if self.mode not in ("Sobolev", "Analytic"):
            raise ValueError("mode must be Sobolev or Analytic")

    @property
    def kappa0(self):
        return self.mu + self.nu + 4.0


def _log10(x):
    if x <= 0:
        return -INF
    return math.log10(x)


def validate_constraints(budget, p1, s0=0.0):
    """Evaluate every inequality of the active mode numerically.

    Returns {"ok": bool, "checks": [{name, ok, lhs, rhs}, ...]}.  Smallness
    products are evaluated in log10 to survive extreme exponents.
    """
    b = budget
    k0 = b.kappa0
    checks = []

    def add(name, lhs, rhs, strict=True):
        if math.isnan(lhs) or math.isnan(rhs):
            ok = False
        else:
            ok = lhs < rhs if strict else lhs <= rhs
        checks.append({"name": name, "ok": bool(ok), "lhs": lhs, "rhs": rhs})

    add("positivity", 0.0, b.eps0)
    add("ordering-eps-R", b.eps0, b.R0, strict=False)
    add("ordering-R-G", b.R0, b.G0, strict=False)
    add("smallness-eG3", _log10(b.eps0) + 3 * _log10(b.G0), 0.0)
    add("smallness-eG2R", _log10(b.eps0) + 2 * _log10(b.G0) - _log10(b.R0), 0.0)
    add("chi-low", 1.0, b.chi)
    add("chi-high", b.chi, 2.0)
    lk = _log10(b.K0)

    if b.mode == "Analytic":
        add("exp-a-kappa2", 2 * k0 / (2 - b.chi) if b.chi < 2 else INF, b.kappa2)
        add("exp-a-eta", b.mu + (b.chi - 1) * b.kappa2 + 1, b.eta)
        l1 = (
            2 * _log10(b.G0) - _log10(b.R0) + _log10(b.eps0) + k0 * lk
            + max(0.0, _log10(b.R0) + _log10(b.G0) + (k0 + (b.chi - 1) * b.kappa2) * lk)
        )
        add("small-a", l1, 0.0)
        l2 = (
            (k0 + (b.chi - 1) * b.kappa2) * lk
            - (s0 * b.K0 / 32.0) / math.log(10.0)
            + _log10(b.G0) - _log10(b.eps0) + max(0.0, _log10(b.R0))
        )
        add("small-b", l2, 0.0, strict=False)
        return {"ok": all(c["ok"] for c in checks), "checks": checks}

    dp = b.p2 - p1
    add("alpha-low", -1e-300, b.alpha + 1e-300)
    add("alpha-high", b.alpha, 1.0)
    add("alphachi", b.alpha * b.chi, 1.0)
    add("p2-above-p1", p1, b.p2)
    kmax = max(b.kappa1, b.kappa3)
    rhs1 = max((k0 + b.kappa3) / b.chi, k0 / (b.chi - 1) if b.chi > 1 else INF)
    add("exp1", rhs1, b.kappa1)
    if b.chi >= 2:
        rhs2a = INF
    else:
        rhs2a = 2 * k0 / (2 - b.chi)
    if b.alpha * b.chi >= 1:
        rhs2b = INF
    else:
        rhs2b = ((1 + b.alpha) * k0 + 2 * kmax - b.chi * b.kappa1) / (1 - b.alpha * b.chi)
    add("exp2", max(rhs2a, rhs2b), b.kappa2)
    add("exp3", b.mu + (b.chi - 1) * b.kappa2 + 1, b.eta)
    rhs4a = k0 + b.chi * b.kappa2 + kmax
    rhs4b = (k0 + (b.chi - 1) * b.kappa2 + kmax) / (1 - b.alpha) if b.alpha < 1 else INF
    add("exp4", max(rhs4a, rhs4b), dp)
    add("exp5", b.alpha * dp, b.kappa2 + b.chi * b.kappa1 - k0 - kmax, strict=False)

    # smallness in log10
    l1 = (
        2 * _log10(b.G0) - _log10(b.R0) + _log10(b.eps0) + k0 * lk
        + max(0.0, _log10(b.R0) + _log10(b.G0) + (k0 + (b.chi - 1) * b.kappa2) * lk)
    )
    add("small-a", l1, 0.0)
    head = max(b.kappa1 * lk, _log10(b.eps0) + b.kappa3 * lk)
    tail = max(0.0, _log10(b.R0), _log10(b.eps0) + _log10(b.G0) + b.alpha * dp * lk)
    l2 = head + (k0 - dp + (b.chi - 1) * b.kappa2) * lk + _log10(b.G0) - _log10(b.eps0) + tail
    add("small-b", l2, 0.0, strict=False)
    tail3 = max(_log10(b.R0), _log10(b.eps0) + _log10(b.G0) + b.alpha * dp * lk)
    l3 = head + (k0 - b.chi * b.kappa1) * lk + _log10(b.G0) - _log10(b.R0) + tail3
    add("small-c", l3, 0.0, strict=False)
    return {"ok": all(c["ok"] for c in checks), "checks": checks}


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------

@dataclass
class ScheduleValues:
    n: int
    K: float
    K_exponent: Fraction
    gamma: Fraction
    s: Fraction
    a: Fraction
    r: Fraction
    rho: Fraction
    G_bound: Fraction
    R_bound: Fraction


def schedule(n, budget, s0, a0, r0):
    """Exact step-n values of the iteration schedule (rational arithmetic
    where exact; the cutoff is K0 to the power chi^n)."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    chi = Fraction(budget.chi)
    kexp = chi ** n
    try:
        K = float(budget.K0) ** float(kexp)
    except OverflowError:
        K = INF
    gamma = Fraction(budget.gamma0)
    for m in range(1, n + 1):
        gamma *= 1 - Fraction(1, 2 ** (m + 2))
    shrink = (1 + Fraction(1, 2 ** n)) / 2  # 1 - (1/2) sum_{j<=n} 2^-j
    return ScheduleValues(
        n=n,
        K=K,
        K_exponent=kexp,
        gamma=gamma,
        s=Fraction(s0) * shrink,
        a=Fraction(a0) * shrink,
        r=Fraction(r0) * shrink,
        rho=Fraction(1, 2 ** (n + 5)),
        G_bound=Fraction(budget.G0) * (2 - Fraction(1, 2 ** n)),
        R_bound=Fraction(budget.R0) * (2 - Fraction(1, 2 ** n)),
    )


@dataclass
class IterationState:
    n: int
    K: float
    gamma: float
    s: float
    a: float
    r: float
    rho: float
    diagnostics: dict = dcfield(default_factory=dict)


# ---------------------------------------------------------------------------
# measured tameness surrogates
# ---------------------------------------------------------------------------

def probe_points(geom, params):
    """A small probe set in the domain ball: the origin plus scaled unit
    probes in y, in w, and in both."""
    r = params.r
    d1, nw = geom.d1, geom.n_w
    lam = geom.modes.lam
    y_unit = tuple(r ** params.y_scaling / max(d1, 1) * 0.5 for _ in range(d1))
    denom = math.sqrt(nw) if nw else 1.0
    w_unit = tuple(
        0.5 * r / (denom * lam[k // 2] ** params.p1 * math.exp(params.a * lam[k // 2]))
        for k in range(nw)
    )
    zeros_y = (0.0,) * d1
    zeros_w = (0.0,) * nw
    return [(zeros_y, zeros_w), (y_unit, zeros_w), (zeros_y, w_unit), (y_unit, w_unit)]


def tameness_surrogate(field, params, p):
    """Computable stand-in for a tameness constant: the largest field norm
    over the probe set (any upper bound is an admissible constant)."""
    return max(field_norm(field, params, p, at=pt) for pt in probe_points(field.geom, params))


def measure_sizes(F, nf, spec, params, gamma):
    """Per-step size diagnostics, normalized by gamma."""
    G = F - nf.as_field(F.geom)
    N, X, R = decompose(G, spec)
    out = {
        "Gamma_p1": tameness_surrogate(G, params, params.p1) / gamma,
        "Gamma_p2": tameness_surrogate(G, params, params.p2) / gamma,
        "Theta_p1": tameness_surrogate(X + R, params, params.p1) / gamma,
        "Theta_p2": tameness_surrogate(X + R, params, params.p2) / gamma,
    }
    if X.is_zero():
        out["delta"] = 0.0
        out["delta_p2"] = 0.0
    else:
        out["delta"] = regular_norm(RegularField(X), params, params.p1) / gamma
        out["delta_p2"] = regular_norm(RegularField(X), params, params.p2) / gamma
    return out


# ---------------------------------------------------------------------------
# compatible change-of-variables hooks
# ---------------------------------------------------------------------------

class IdentityHook:
    """The trivial compatible change of variables."""

    name = "identity"

    def build(self, ctx, F, state):
        return None, {}


class AngleAverageHook:
    """Torus diffeomorphism pushing the angle component toward its mean.

    Solves the linearized averaging equation for the angle displacement;
    meant for decompositions keeping the full angle block in the normal part.
    """

    name = "angle_average"

    def build(self, ctx, F, state):
        g = F.geom
        omega = ctx.nf.omega
        zero = g.zero_alpha()
        beta = [dict() for _ in range(g.d)]
        worst = 0.0
        for (c, alpha, ell), v in F.coeffs.items():
            if not g.is_theta(c) or alpha != zero or all(x == 0 for x in ell):
                continue
            if sum(abs(x) for x in ell) > state.K:
                continue
            chk = divisor_check(omega, ell, 0.0, ctx.dio, min(state.K, g.fourier_cutoff))
            if not chk.ok:
                raise SmallDivisorError(ell, "none", chk.value, chk.threshold)
            beta[c][ell] = -v / (1j * chk.value)
            worst = max(worst, abs(beta[c][ell]))
        if worst == 0.0:
            return None, {"beta_sup": 0.0}
        disp = FourierTaylorField(
            g, {(k, zero, ell): v for k in range(g.d) for ell, v in beta[k].items()}
        )
        gm = GridMap.from_regular_displacement(ctx.grid, RegularField(disp))
        return gm, {"beta_sup": worst}


def verify_compat(ctx, lmap, F, spec, tol):
    """Post-hoc check of the decomposition-preservation identities."""
    N, X, R = decompose(F, spec)
    lead1 = project_classes(pushforward(lmap, N), spec.classes_x)
    drift1 = max(lead1.max_abs(), 0.0)
    lead2 = project_classes(pushforward(lmap, N + R), spec.classes_x)
    drift2 = lead2.max_abs()
    worst = max(drift1, drift2)
    if worst > tol:
        raise CompatViolation(f"hook broke the split by {worst:.3e} (tol {tol:.3e})")
    return worst


# ---------------------------------------------------------------------------
# the quadratic step
# ---------------------------------------------------------------------------

@dataclass
class EngineContext:
    nf: DiagonalNormalForm
    spec: object
    dio: DiophantineParams
    budget: ExponentBudget
    params: object
    grid: Grid
    smallness_eps: float = 0.1
    structure_tol: float = 1e-10
    compat_tol: float = 1e-8
    flow_steps: int = 32

    def __post_init__(self):
        # one shared copy so the model coefficients stay bit-identical
        self.nf_field = self.nf.as_field_cached(self.grid.geom) if hasattr(self.nf, "as_field_cached") else self.nf.as_field(self.grid.geom)


def kam_step(ctx, F, state, compat_hook=None):
    """One conjugation step: optional compatible change of variables, the
    homological solve at the current cutoff, the time-1 flow, and the
    pushforward.  Returns (F_next, generator, report)."""
    params = ctx.params
    b = ctx.budget
    sizes = measure_sizes(F, ctx.nf, ctx.spec, params, state.gamma)
    # the effective cutoff saturates at the geometry's Fourier band
    K_eff = min(state.K, float(F.geom.fourier_cutoff))
    smallness = (
        (1.0 / state.rho) * K_eff ** (b.mu + b.nu + 3.0)
        * sizes["Gamma_p1"] * sizes["delta"]
    )
    if smallness > ctx.smallness_eps:
        raise SmallnessViolated(
            f"step smallness {smallness:.3e} exceeds {ctx.smallness_eps}"
        )
    report = {"sizes": sizes, "smallness": smallness, "hook": None}

    Fhat = F
    hook = compat_hook or IdentityHook()
    lmap, hook_rep = hook.build(ctx, F, state)
    if lmap is not None:
        drift = verify_compat(ctx, lmap, F, ctx.spec, ctx.compat_tol * max(1.0, F.max_abs()))
        Fhat = pushforward(lmap, F, center=ctx.nf_field)
        hook_rep["split_drift"] = drift
        report["hook"] = {"name": hook.name, **hook_rep}

    sol = solve_homological(
        Fhat,
        ctx.spec,
        ctx.dio,
        state.K,
        params,
        report_exponents={"mu": b.mu, "eta": b.eta, "eps0": b.eps0},
    )
    report["homological"] = sol.reports
    report["divisor_min"] = sol.divisor_min
    report["neumann_depth"] = sol.neumann_depth
    report["audit"] = sol.audit

    if sol.g.is_zero():
        F_next = Fhat
        phi = None
        report["generator_norm"] = 0.0
    else:
        gen = sol.g.scaled(-1.0)  # the flow must remove the oscillating part
        sym = generator_symmetry_defect(gen.field, ctx.spec.structure)
        report["generator_symmetry"] = sym
        phi = flow_of_regular(gen, 1.0, ctx.grid, n_steps=ctx.flow_steps, params=params)
        report["generator_norm"] = regular_norm(gen, params, params.p1)
        report["flow"] = phi.reports
        F_next = pushforward(phi, Fhat, center=ctx.nf_field)

    new_sizes = measure_sizes(F_next, ctx.nf, ctx.spec, params, state.gamma)
    report["sizes_next"] = new_sizes
    report["bound_ratios"] = _bound_ratios(b, params, state, sizes, new_sizes)
    if ctx.spec.structure != "None":
        sc = structure_check(F_next, ctx.spec.structure, tol=ctx.structure_tol)
        report["structure"] = sc
    return F_next, (sol.g if phi is not None else None), phi, lmap, report


def _bound_ratios(b, params, state, sizes, new_sizes):
    """Measured-over-template ratios for the step bounds (templates with
    unit constants, evaluated on measured inputs)."""
    K = min(state.K, 1e8)
    dp = b.p2 - params.p1
    G1, G2 = sizes["Gamma_p1"], sizes["Gamma_p2"]
    T1, T2 = sizes["Theta_p1"], sizes["Theta_p2"]
    de = sizes["delta"]
    e0, k3, al = b.eps0, b.kappa3, b.alpha
    high = T2 + e0 * K ** k3 * T1 + K ** (al * dp) * de * (G2 + e0 * K ** k3 * G1)
    tpl_gamma1 = (1 + e0 / K) * G1 + K ** b.mu * G1 * de * (K ** (b.nu + 1) * G1 + e0 * K ** -b.eta)
    tpl_theta1 = (1 + e0 / K) * T1 + K ** b.mu * G1 * de * (K ** (b.nu + 1) * G1 + e0 * K ** -b.eta)
    tpl_delta = (
        G1 * (de ** 2 * G1 ** 2 * K ** (2 * b.mu + 2 * b.nu + 4) + de * e0 * K ** (b.mu - b.eta))
        + K ** (b.mu + b.nu + 2 - dp) * (T2 + e0 * K ** k3 * T1)
        + G1 * K ** (b.mu + b.nu + 2 - dp) * high
    )
    out = {}
    for name, measured, template in (
        ("Gamma_p1", new_sizes["Gamma_p1"], tpl_gamma1),
        ("Theta_p1", new_sizes["Theta_p1"], tpl_theta1),
        ("delta", new_sizes["delta"], tpl_delta),
    ):
        out[name] = measured / template if template > 0 else (0.0 if measured == 0 else INF)
    return out


# ---------------------------------------------------------------------------
# the run driver
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    history: list
    F_final: FourierTaylorField
    H: GridMap
    embedding: dict
    stop_reason: str
    constraint_report: dict


def extract_embedding(H, grid):
    """Graph form of the approximate torus: the image of the zero section,
    reparametrized over the angle by inverting the angle part."""
    g = grid.geom
    zero_y = (0.0,) * g.d1
    zero_w = (0.0,) * g.n_w
    theta_vals = H.theta_values
    disp = [theta_vals[k] - grid.theta[k] for k in range(g.d)]
    tabs = [grid.table(disp[k], cutoff=grid.n // 2 - 1)[0] for k in range(g.d)]
    inv_disp, _ = torus_diffeo_invert(tabs, grid)
    inv_theta = grid.theta + np.stack(
        [grid.values(t) if t else np.zeros(grid.size, dtype=np.complex128) for t in inv_disp]
    )
    pe = PhaseEval(grid, inv_theta)
    zero = g.zero_alpha()

    def graph_block(poly):
        arr = poly.entries.get(zero)
        if arr is None:
            return np.zeros(grid.size, dtype=np.complex128)
        tab, _ = grid.table(arr, cutoff=grid.n // 2 - 1)
        return pe.eval(tab)

    h_y = [graph_block(H.eta_y[i]) for i in range(g.d1)]
    h_w = [graph_block(H.eta_w[k]) for k in range(g.n_w)]
    return {
        "y_values": np.stack(h_y) if h_y else np.zeros((0, grid.size)),
        "w_values": np.stack(h_w) if h_w else np.zeros((0, grid.size)),
        "y_tables": [grid.table(v)[0] for v in h_y],
        "w_tables": [grid.table(v)[0] for v in h_w],
    }


def run(ctx, F0, max_steps, compat_hook=None, check_every=3, delta_floor=1e-13,
        warn_on_constraints=True, residual_fn=None):
    """Iterate the quadratic step, accumulating the change of variables and
    per-step diagnostics.  Stops on the step budget, a divisor failure, or
    the residual floor (floor steps still count as completed fixed points)."""
    params = ctx.params
    creport = validate_constraints(ctx.budget, params.p1, s0=params.s0)
    if not creport["ok"] and not warn_on_constraints:
        raise SmallnessViolated("exponent constraints violated")
    history = []
    F = F0
    H = GridMap.identity(ctx.grid)
    stop = "max_steps"
    for n in range(max_steps):
        sched = schedule(n, ctx.budget, params.s0, params.a0, params.r0)
        state = IterationState(
            n=n, K=sched.K, gamma=float(sched.gamma), s=float(sched.s),
            a=float(sched.a), r=float(sched.r), rho=float(sched.rho),
        )
        try:
            F_next, gsol, phi, lmap, rep = kam_step(ctx, F, state, compat_hook)
        except SmallDivisorError as exc:
            stop = f"small_divisor:{exc}"
            break
        except SmallnessViolated as exc:
            stop = f"smallness:{exc}"
            break
        maps = [m for m in (lmap, phi) if m is not None]
        if maps:
            H = compose_maps([H, *maps])
        entry = {
            "n": n,
            "K": state.K,
            "gamma": state.gamma,
            "delta": rep["sizes"]["delta"],
            "delta_next": rep["sizes_next"]["delta"],
            "Gamma_p1": rep["sizes"]["Gamma_p1"],
            "Theta_p1": rep["sizes"]["Theta_p1"],
            "divisor_min": rep.get("divisor_min", INF),
            "bound_ratios": rep["bound_ratios"],
            "report": rep,
        }
        if residual_fn is not None:
            emb = extract_embedding(H.inverse(), ctx.grid)
            entry["torus_residual"] = residual_fn(emb)
        if check_every and (n + 1) % check_every == 0:
            entry["conjugacy_error"] = conjugacy_error(ctx, F0, F_next, H)
        history.append(entry)
        F = F_next
        if rep["sizes_next"]["delta"] <= delta_floor and rep["sizes"]["delta"] <= delta_floor:
            # fixed point reached: remaining steps would be no-ops
            pass
    emb = extract_embedding(H.inverse(), ctx.grid)
    return RunResult(
        history=history,
        F_final=F,
        H=H,
        embedding=emb,
        stop_reason=stop,
        constraint_report=creport,
    )


def conjugacy_error(ctx, F0, F_n, H):
    """Relative defect of the conjugation identity, recomputed with a single
    pushforward by the flattened composed map."""
    direct = pushforward(H, F0, center=ctx.nf_field)
    diff = direct - F_n
    scale = max(F_n.max_abs(), 1e-300)
    return diff.max_abs() / scale


# ---------------------------------------------------------------------------
# reducibility
# ---------------------------------------------------------------------------

@dataclass
class ReducibilityState:
    """Diagonal frequencies plus the angle-dependent normal block to be
    killed, stored as Fourier tables of (2J x 2J) matrices."""

    omega: tuple
    Omega: tuple
    P: dict
    geom: object
    S: dict = dcfield(default_factory=dict)

    def P_values(self, grid):
        out = np.zeros((grid.size, self.geom.n_w, self.geom.n_w), dtype=np.complex128)
        for ell, mat in self.P.items():
            phase = grid.values({ell: 1.0})
            out += phase[:, None, None] * mat[None, :, :]
        return out


def hamiltonian_block_defect(P, geom):
    """Symmetry defect of a (w, w) block family under the symplectic pairing:
    J M must be symmetric after the conjugate Fourier flip."""
    nw = geom.n_w
    J = np.zeros((nw, nw))
    for j in range(geom.modes.J):
        J[2 * j, 2 * j + 1] = -1.0
        J[2 * j + 1, 2 * j] = 1.0
    worst = 0.0
    for ell, mat in P.items():
        JM = J @ mat
        worst = max(worst, float(np.max(np.abs(JM - JM.T))))
    return worst


def decay_norm(P, geom, s, a, p):
    """Off-diagonal decay norm of an angle-dependent block operator.

    Entries are grouped into 2x2 sign blocks per mode pair; the weight is
    <h>^p exp(a|h1| + s|h2|_1) on the (mode offset, Fourier index) lattice.
    """
    J = geom.modes.J
    sup = {}
    for ell, mat in P.items():
        h2 = sum(abs(x) for x in ell)
        for j in range(J):
            for k in range(J):
                block = mat[2 * j: 2 * j + 2, 2 * k: 2 * k + 2]
                nrm = float(np.linalg.norm(block, 2))
                if nrm == 0.0:
                    continue
                key = (j - k, ell)
                sup[key] = max(sup.get(key, 0.0), nrm)
    total = 0.0
    for (h1, ell), v in sup.items():
        h2 = sum(abs(x) for x in ell)
        br = max(1, abs(h1) + h2)
        total += br ** (2.0 * p) * math.exp(2.0 * (a * abs(h1) + s * h2)) * v ** 2
    return math.sqrt(total)


def _matrix_exp_series(S_vals, terms=16):
    size, n, _ = S_vals.shape
    out = np.tile(np.eye(n, dtype=np.complex128), (size, 1, 1))
    term = out.copy()
    for m in range(1, terms + 1):
        term = term @ S_vals / m
        out = out + term
        if float(np.max(np.abs(term))) < 1e-18:
            break
    return out


def _omega_derivative(values, grid, omega):
    """omega . d/dtheta of gridded matrix entries, spectrally."""
    size, n, _ = values.shape
    spec = np.fft.fftn(values.reshape(grid.shape + (n * n,)), axes=range(grid.geom.d))
    freqs = grid._freqs
    mult = np.zeros(grid.shape, dtype=np.complex128)
    for k in range(grid.geom.d):
        shape = [1] * grid.geom.d
        shape[k] = grid.n
        mult = mult + 1j * omega[k] * freqs.reshape(shape)
    spec = spec * mult[..., None]
    out = np.fft.ifftn(spec, axes=range(grid.geom.d))
    return out.reshape(size, n, n)


def reducibility_step(red, K, gamma, rho, dio, grid=None, p1=3.0, p2=5.0,
                      smallness_limit=0.1):
    """One reduction of the angle-dependent normal block.

    Solves the entrywise homological equation on the band-truncated block,
    conjugates by the time-1 flow of the solution, and returns the new
    diagonal and remainder with measured decay norms against the step bound.
    """
    geom = red.geom
    if grid is None:
        grid = Grid(geom)
    nw = geom.n_w
    lam_sign = np.array([1.0 if k % 2 == 0 else -1.0 for k in range(nw)])
    Om = np.array([red.Omega[k // 2] for k in range(nw)]) * lam_sign

    p_dec_p1 = decay_norm(red.P, geom, 0.0, 0.0, p1)
    p_dec_p2 = decay_norm(red.P, geom, 0.0, 0.0, p2)
    small = rho / (dio.M * gamma) * float(K) ** (2 * dio.tau + 1) * p_dec_p1
    if small > smallness_limit:
        raise SmallnessViolated(f"reduction smallness {small:.3e} > {smallness_limit}")

    audit = []
    S_tables = {}
    for ell, mat in red.P.items():
        if sum(abs(x) for x in ell) > K:
            continue
        S = np.zeros_like(mat)
        omdl = float(np.dot(red.omega, ell))
        for r in range(nw):
            for c in range(nw):
                v = mat[r, c]
                if abs(v) == 0.0:
                    continue
                if abs((r // 2) - (c // 2)) > K:
                    continue
                div = omdl + Om[c] - Om[r]
                kind = "difference" if lam_sign[r] == lam_sign[c] else "sum"
                thr = dio.threshold(K)
                ok = abs(div) >= thr
                audit.append(
                    {"ell": ell, "kind": kind, "j": r // 2, "k": c // 2,
                     "value": div, "threshold": thr, "ok": ok}
                )
                if not ok:
                    raise SmallDivisorError(ell, kind, div, thr)
                S[r, c] = v / (1j * div)
        if np.max(np.abs(S)) > 0:
            S_tables[ell] = S

    # conjugate: Lambda_hat = E^-1 (D + P) E - E^-1 (omega.d_theta E)
    S_vals = np.zeros((grid.size, nw, nw), dtype=np.complex128)
    for ell, mat in S_tables.items():
        phase = grid.values({ell: 1.0})
        S_vals += phase[:, None, None] * mat[None, :, :]
    E = _matrix_exp_series(S_vals)
    Einv = _matrix_exp_series(-S_vals)
    D = np.diag(1j * Om)
    lam_vals = red.P_values(grid) + D[None, :, :]
    dE = _omega_derivative(E, grid, red.omega)
    new_vals = Einv @ lam_vals @ E - Einv @ dE

    # split diagonal update from the remainder
    new_P = {}
    diag_update = np.zeros(nw, dtype=np.complex128)
    for r in range(nw):
        for c in range(nw):
            tab, _ = grid.table(new_vals[:, r, c], cutoff=geom.fourier_cutoff)
            for ell, v in tab.items():
                if r == c and all(x == 0 for x in ell):
                    diag_update[r] = v
                    continue
                new_P.setdefault(ell, np.zeros((nw, nw), dtype=np.complex128))[r, c] = v
    Omega_new = tuple(
        float(np.imag(diag_update[2 * j])) for j in range(geom.modes.J)
    )
    new_red = ReducibilityState(
        omega=red.omega, Omega=Omega_new, P=new_P, geom=geom, S=S_tables
    )
    s_dec_p1 = decay_norm(S_tables, geom, 0.0, 0.0, p1)
    new_p1 = decay_norm(new_P, geom, 0.0, 0.0, p1)
    bound = s_dec_p1 * p_dec_p1 + float(K) ** (-(p2 - p1)) * p_dec_p2
    report = {
        "S_decay_p1": s_dec_p1,
        "S_bound": dio.M / gamma * float(K) ** (2 * dio.tau + 1) * p_dec_p1,
        "P_decay_p1_before": p_dec_p1,
        "P_decay_p1_after": new_p1,
        "P_decay_p2_before": p_dec_p2,
        "P_decay_p2_after": decay_norm(new_P, geom, 0.0, 0.0, p2),
        "step_bound": bound,
        "bound_ok": new_p1 <= bound,
        "audit": audit,
        "smallness": small,
        "Omega_shift": float(np.max(np.abs(np.array(Omega_new) - np.array(red.Omega)))),
    }
    return new_red, report
