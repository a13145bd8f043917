"""Concrete model vector fields and the torus-residual functional.

All Hamiltonian models are built by writing down a scalar generating
polynomial and applying the symplectic pairing, so the structure identities
hold by construction.  Sign conventions: mode weights are the squared
wavenumbers (positive), and the model rotates with positive normal
frequencies; this fixes the time orientation once and for all.
"""

from __future__ import annotations

import math
from itertools import product as _iproduct

import numpy as np

from .decomposition import decompose, reversal_transform
from .fields import FourierTaylorField, Geometry, ModeSet, ell_norm
from .gridmaps import Grid, PhaseEval
from .homological import DiagonalNormalForm


# ---------------------------------------------------------------------------
# Hamiltonian machinery: field of a generating polynomial
# ---------------------------------------------------------------------------

def hamiltonian_field(geom, hterms):
    """Vector field of a scalar polynomial given as {(alpha, ell): coeff}.

    Components: d/dt theta_i = dH/dy_i, d/dt y_i = -dH/dtheta_i,
    d/dt z+_j = -i dH/dz-_j, d/dt z-_j = +i dH/dz+_j.
    """
    g = geom
    coeffs = {}

    def put(c, alpha, ell, v):
        key = (c, alpha, ell)
        coeffs[key] = coeffs.get(key, 0.0) + v

    for (alpha, ell), h in hterms.items():
        for i in range(g.d1):
            if alpha[i]:
                a = list(alpha)
                a[i] -= 1
                put(i, tuple(a), ell, alpha[i] * h)  # theta_i row (d1 == d)
        for i in range(g.d):
            if ell[i]:
                put(g.d + i, alpha, ell, -1j * ell[i] * h)
        for j in range(g.modes.J):
            vp = g.d1 + 2 * j
            vm = vp + 1
            if alpha[vm]:
                a = list(alpha)
                a[vm] -= 1
                put(g.d + vp, tuple(a), ell, -1j * alpha[vm] * h)
            if alpha[vp]:
                a = list(alpha)
                a[vp] -= 1
                put(g.d + vm, tuple(a), ell, 1j * alpha[vp] * h)
    return FourierTaylorField(geom, coeffs)


def symmetrize_hterms(geom, hterms):
    """Make the generating polynomial real on the real subspace:
    coeff(swap(alpha), -ell) = conj(coeff(alpha, ell))."""
    out = {}
    for (alpha, ell), v in hterms.items():
        mirror = (geom.swap_alpha(alpha), tuple(-x for x in ell))
        if mirror == (alpha, ell):
            out[(alpha, ell)] = float(np.real(v))
        else:
            out[(alpha, ell)] = out.get((alpha, ell), 0.0) + 0.5 * v
            out[mirror] = out.get(mirror, 0.0) + 0.5 * np.conj(v)
    return out


# ---------------------------------------------------------------------------
# toy models
# ---------------------------------------------------------------------------

TOY_OMEGA = (math.sqrt(2.0), math.sqrt(3.0))


def toy_geometry(d=2, d1=2, J=8, L=16, dmax=3, drop_tol=1e-14):
    lam = tuple(float((j + 1) ** 2) for j in range(J))
    return Geometry(d=d, d1=d1, modes=ModeSet(lam), fourier_cutoff=L, taylor_cutoff=dmax,
                    drop_tol=drop_tol)


def canonical_params(geom, **overrides):
    """Default norm parameters for a geometry (Sobolev regime, unit radii)."""
    from .fields import NormParams

    kw = dict(s0=0.0, a0=0.0, r0=1.0, s=0.0, a=0.0, r=1.0, p0=2.0, p1=3.0,
              p2=5.0, nu=0.0, y_scaling=2.0)
    kw.update(overrides)
    return NormParams(**kw)


def _normalize_perturbation(pert, spec, coupling, params):
    """Scale so the removable part measures `coupling` in the p1 norm."""
    from .fields import RegularField, regular_norm

    _, X, _ = decompose(pert, spec)
    if X.is_zero():
        scale = pert.max_abs()
        return pert * (coupling / scale) if scale > 0 else pert
    base = regular_norm(RegularField(X), params, params.p1)
    return pert * (coupling / base)


def _pert_monomials(geom, rng, ell_band, n_terms, families, mode_band=3):
    """Random generating-polynomial monomials from the requested families.

    Normal-variable picks stay within the lowest mode_band mode pairs, so the
    removable content sits where the divisors are smallest.
    """
    g = geom
    ells = [e for e in g.ells(ell_band)]
    nz = 2 * min(mode_band, g.modes.J)
    picks = []
    for fam in families:
        for _ in range(n_terms):
            ell = ells[rng.integers(0, len(ells))]
            alpha = [0] * g.n_taylor
            if fam == "angle-linear":
                if all(x == 0 for x in ell):
                    ell = ells[1]
                alpha[rng.integers(0, g.d1)] += 1
            elif fam == "normal-linear":
                alpha[g.d1 + rng.integers(0, nz)] += 1
            elif fam == "action-quadratic":
                alpha[rng.integers(0, g.d1)] += 1
                alpha[rng.integers(0, g.d1)] += 1
            elif fam == "normal-cubic":
                for _ in range(3):
                    alpha[g.d1 + rng.integers(0, nz)] += 1
            elif fam == "mixed":
                alpha[rng.integers(0, g.d1)] += 1
                alpha[g.d1 + rng.integers(0, nz)] += 1
                alpha[g.d1 + rng.integers(0, nz)] += 1
            else:
                raise ValueError(fam)
            c = rng.normal() + 1j * rng.normal()
            picks.append(((tuple(alpha), ell), c))
    return picks


def toy_hamiltonian(geom=None, coupling=1e-4, seed=7, omega=None, ell_band=2,
                    n_terms=3, params=None, spec=None, mode_band=3):
    """A diophantine-by-construction diagonal model plus a random Hamiltonian
    perturbation supported off the normal-form classes.

    Returns (field, diagonal normal form).  Deterministic given the seed;
    coupling zero returns the diagonal model exactly.
    """
    if geom is None:
        geom = toy_geometry()
    if omega is None:
        omega = TOY_OMEGA[: geom.d]
    nf = DiagonalNormalForm(omega, geom.modes.lam)
    F = nf.as_field(geom)
    if coupling == 0.0:
        return F, nf
    rng = np.random.default_rng(seed)
    raw = dict(
        _pert_monomials(
            geom, rng, ell_band, n_terms,
            ("angle-linear", "normal-linear", "action-quadratic", "normal-cubic", "mixed"),
            mode_band=mode_band,
        )
    )
    hterms = symmetrize_hterms(geom, raw)
    pert = hamiltonian_field(geom, hterms)
    if spec is None:
        from .decomposition import preset_spec
        spec = preset_spec("hamiltonian")
    if params is None:
        params = canonical_params(geom)
    pert = _normalize_perturbation(pert, spec, coupling, params)
    return F + pert, nf


def toy_reversible(geom=None, coupling=1e-4, seed=11, omega=None, ell_band=2,
                   n_terms=4, spec=None, params=None):
    """Diagonal model plus a random reversible (non-Hamiltonian) perturbation
    supported away from the normal-form classes of the given split."""
    from .decomposition import preset_spec

    if geom is None:
        geom = toy_geometry()
    if omega is None:
        omega = TOY_OMEGA[: geom.d]
    if spec is None:
        spec = preset_spec("reversible2")
    nf = DiagonalNormalForm(omega, geom.modes.lam)
    F = nf.as_field(geom)
    if coupling == 0.0:
        return F, nf
    rng = np.random.default_rng(seed)
    terms = []
    ells = geom.ells(ell_band)
    for _ in range(n_terms * 5):
        c = rng.integers(0, geom.n_components)
        ell = ells[rng.integers(0, len(ells))]
        alpha = [0] * geom.n_taylor
        deg = rng.integers(0, 2)
        for _ in range(deg):
            alpha[rng.integers(0, geom.n_taylor)] += 1
        v = rng.normal() + 1j * rng.normal()
        terms.append(((int(c), tuple(alpha), ell), v))
    raw = FourierTaylorField(geom, dict(terms))
    # project onto the reversible subspace, then off the normal-form classes
    rev = 0.5 * (raw - reversal_transform(raw))
    _, X, R = decompose(rev, spec)
    pert = X + R
    if params is None:
        params = canonical_params(geom)
    pert = _normalize_perturbation(pert, spec, coupling, params)
    return F + pert, nf


# ---------------------------------------------------------------------------
# NLS on the circle
# ---------------------------------------------------------------------------

def _normal_sites(tangential, J):
    taken = set(tangential)
    out = []
    n = 1
    while len(out) < J:
        for cand in (n, -n):
            if cand not in taken and len(out) < J:
                out.append(cand)
        n += 1
    return out


def nls_field(g_taylor, xi, tangential_sites, J=8, L=16, dmax=3, eps=1e-3,
              actions=None, drop_tol=1e-14):
    """Action-angle truncation of the cubic-type Schrodinger model on the
    circle with Fourier-multiplier parameters.

    g_taylor are the Taylor coefficients of the real nonlinearity g (so the
    potential is G with G' = g), xi shifts the tangential frequencies, and
    the normal block keeps the J lowest remaining wavenumbers.  Returns
    (field, diagonal normal form) with frequencies lambda_site + xi.
    """
    d = len(tangential_sites)
    if len(set(tangential_sites)) != d:
        raise ValueError("tangential sites must be distinct")
    if len(xi) != d:
        raise ValueError("xi must match the site count")
    actions = tuple(1.0 for _ in range(d)) if actions is None else tuple(actions)
    if any(I <= 0 for I in actions):
        raise ValueError("actions must be positive")
    normal = _normal_sites(tangential_sites, J)
    order = sorted(range(J), key=lambda j: (normal[j] ** 2, normal[j]))
    normal = [normal[j] for j in order]
    lam = tuple(float(n * n) for n in normal)
    geom = Geometry(d=d, d1=d, modes=ModeSet(lam), fourier_cutoff=L, taylor_cutoff=dmax,
                    drop_tol=drop_tol)
    omega = tuple(float(s * s) + float(x) for s, x in zip(tangential_sites, xi))
    nf = DiagonalNormalForm(omega, lam)

    hterms = {}
    zero_a = geom.zero_alpha()
    zero_l = (0,) * d
    for i in range(d):
        a = list(zero_a)
        a[i] = 1
        hterms[(tuple(a), zero_l)] = omega[i]
    for j in range(J):
        a = list(zero_a)
        a[d + 2 * j] = 1
        a[d + 2 * j + 1] = 1
        hterms[(tuple(a), zero_l)] = -lam[j]

    if eps != 0.0 and any(abs(c) > 0 for c in g_taylor):
        pert = _nls_potential_terms(geom, g_taylor, tangential_sites, normal, actions, dmax)
        for key, v in pert.items():
            hterms[key] = hterms.get(key, 0.0) - eps * v
    return hamiltonian_field(geom, hterms), nf


def _sqrt_series(I, max_deg):
    """Taylor coefficients of sqrt(I + y) about y = 0, up to max_deg."""
    out = [math.sqrt(I)]
    # d/dy sqrt(I+y) = 1/2 (I+y)^(-1/2): binomial series
    coeff = math.sqrt(I)
    half = 0.5
    from math import comb

    c = 1.0
    out = []
    for k in range(max_deg + 1):
        # binomial(1/2, k) I^(1/2 - k)
        b = 1.0
        for m in range(k):
            b *= (half - m) / (m + 1)
        out.append(b * I ** (half - k))
    return out


def _nls_potential_terms(geom, g_taylor, sites, normal, actions, dmax):
    """Angle average of G(|u|^2) written over the truncated variables.

    Terms are (coeff, y-multi, z-multi, theta wave vector, spatial momentum);
    the spatial integral keeps total momentum zero.
    """
    d = len(sites)
    J = len(normal)
    cap = dmax + 1  # generating-polynomial degree cap

    # u and conj(u) as term lists
    def site_terms(conjugate):
        out = []
        for i, n in enumerate(sites):
            series = _sqrt_series(actions[i], cap)
            for k, c in enumerate(series):
                if k > cap:
                    break
                ymul = [0] * geom.n_taylor
                ymul[i] = k
                th = [0] * d
                th[i] = -1 if conjugate else 1
                mom = -n if conjugate else n
                out.append((c, tuple(ymul), tuple(th), mom))
        for j, n in enumerate(normal):
            zmul = [0] * geom.n_taylor
            zmul[d + 2 * j + (1 if conjugate else 0)] = 1
            out.append((1.0, tuple(zmul), (0,) * d, -n if conjugate else n))
        return out

    u = site_terms(False)
    ubar = site_terms(True)

    def multiply(A, B):
        acc = {}
        for ca, aa, tha, ma in A:
            for cb, ab, thb, mb in B:
                alpha = tuple(x + y for x, y in zip(aa, ab))
                if _weighted_degree(geom, alpha) > cap:
                    continue
                key = (alpha, tuple(x + y for x, y in zip(tha, thb)), ma + mb)
                acc[key] = acc.get(key, 0.0) + ca * cb
        return [(v, *k) for k, v in acc.items() if abs(v) > 1e-16]

    def _as_terms(d_):
        return [(v, alpha, th, m) for v, alpha, th, m in d_]

    rho = multiply(u, ubar)
    out = {}
    power = [(1.0, geom.zero_alpha(), (0,) * d, 0)]
    for k, gk in enumerate(g_taylor):
        power = multiply(power, rho)
        if gk == 0.0:
            continue
        w = gk / (k + 1.0)
        for c, alpha, th, mom in power:
            if mom != 0:
                continue
            if ell_norm(th) > geom.fourier_cutoff:
                continue
            key = (alpha, th)
            out[key] = out.get(key, 0.0) + w * c
    return out


def _weighted_degree(geom, alpha):
    # y counts double in the generating polynomial (scaling degree 2)
    return sum(alpha[geom.d1:]) + 2 * sum(alpha[: geom.d1])


# ---------------------------------------------------------------------------
# torus residual
# ---------------------------------------------------------------------------

def torus_residual(F, embedding, grid=None):
    """Sup over the sampled angles of the tangency defect of the embedding:
    the y / w components of the field along the graph minus the angle
    derivative of the graph times the angle component."""
    g = F.geom
    if grid is None:
        grid = Grid(g)
    size = grid.size
    if isinstance(embedding, dict) and "y_values" in embedding:
        y_vals = np.asarray(embedding["y_values"], dtype=np.complex128)
        w_vals = np.asarray(embedding["w_values"], dtype=np.complex128)
    else:
        y_tabs, w_tabs = embedding
        y_vals = np.stack([grid.values(t) for t in y_tabs]) if y_tabs else np.zeros((0, size))
        w_vals = np.stack([grid.values(t) for t in w_tabs]) if w_tabs else np.zeros((0, size))
    if y_vals.shape != (g.d1, size) or w_vals.shape != (g.n_w, size):
        raise ValueError("embedding values have the wrong shape")

    point = np.concatenate([y_vals, w_vals], axis=0)  # (n_taylor, size)
    comp_vals = np.zeros((g.n_components, size), dtype=np.complex128)
    for (c, alpha), (ells, vals) in F.grouped().items():
        tab = {tuple(int(x) for x in ells[r]): vals[r] for r in range(len(vals))}
        base = grid.values(tab)
        for v, p in enumerate(alpha):
            for _ in range(p):
                base = base * point[v]
        comp_vals[c] += base

    # spectral angle derivatives of the graph
    freqs = grid._freqs
    derivs = np.zeros((g.n_taylor, g.d, size), dtype=np.complex128)
    for v in range(g.n_taylor):
        spec = np.fft.fftn(point[v].reshape(grid.shape))
        for k in range(g.d):
            shape = [1] * g.d
            shape[k] = grid.n
            dspec = spec * (1j * freqs.reshape(shape))
            derivs[v, k] = np.fft.ifftn(dspec).ravel()

    worst = 0.0
    for v in range(g.n_taylor):
        c = g.d + v
        res = comp_vals[c].copy()
        for k in range(g.d):
            res -= derivs[v, k] * comp_vals[k]
        worst = max(worst, float(np.max(np.abs(res))))
    return worst


# ---------------------------------------------------------------------------
# reducibility preset
# ---------------------------------------------------------------------------

def reducible_block_state(geom, omega=None, seed=3, strength=1e-3, ell_band=2,
                          offdiag_decay=0.5):
    """Random angle-dependent normal block with the symplectic symmetry,
    plus the diagonal frequencies, for exercising the reduction step."""
    from .engine import ReducibilityState

    if omega is None:
        omega = TOY_OMEGA[: geom.d]
    rng = np.random.default_rng(seed)
    nw = geom.n_w
    Jmat = np.zeros((nw, nw))
    for j in range(geom.modes.J):
        Jmat[2 * j, 2 * j + 1] = -1.0
        Jmat[2 * j + 1, 2 * j] = 1.0
    P = {}
    for ell in geom.ells(ell_band):
        Q = rng.normal(size=(nw, nw)) + 1j * rng.normal(size=(nw, nw))
        Q = 0.5 * (Q + Q.T)
        for r in range(nw):
            for c in range(nw):
                Q[r, c] *= offdiag_decay ** abs(r // 2 - c // 2)
        M = 1j * Jmat @ Q * strength
        if all(x == 0 for x in ell):
            for k in range(nw):
                M[k, k] = 0.0  # the diagonal average lives in the model part
        P[ell] = M
    return ReducibilityState(omega=tuple(omega), Omega=tuple(geom.modes.lam), P=P, geom=geom)
