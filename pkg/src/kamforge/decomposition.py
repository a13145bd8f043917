"""Normal-form / oscillating / remainder splitting of fields.

A DecompositionSpec assigns monomial classes to the kept normal-form part and
to the part to be removed by conjugation; everything else is remainder.  The
module also grades the removable part by degree (used by the finite Neumann
series), verifies triangularity, checks reversible or Hamiltonian structure
identities on coefficients, and rescales fields by their scaling degree.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product as _iproduct

import numpy as np

from .fields import (
    FourierTaylorField,
    MonomialClass,
    ell_norm,
    key_signature,
    lie_bracket,
    project_classes,
)

STRUCCLASSES = ("Reversible0", "ReversibleFiniteRank", "Hamiltonian", "HamiltonianReducible", "None")


@dataclass(frozen=True)
class DecompositionSpec:
    """Assignment of monomial classes: normal-form classes, removable classes,
    degree weight for y, the degree-graded blocks of the removable part, the
    structure class and the maximal degree appearing."""

    classes_n: tuple
    classes_x: tuple
    deg_y: float
    structure: str = "None"
    n_max: int = 2

    def __post_init__(self):
        if self.structure not in STRUCCLASSES:
            raise ValueError(f"unknown structure {self.structure}")
        labels_n = {c.label() for c in self.classes_n}
        labels_x = {c.label() for c in self.classes_x}
        if labels_n & labels_x:
            raise ValueError("normal-form and removable classes overlap")
        for cls, target in ((_c, _c.target) for _c in self.classes_x):
            pass
        for target in ("y", "w"):
            root = MonomialClass(target, ())
            if not any(_covers(c, root) for c in self.classes_x):
                raise ValueError(f"the constant {target}-block must be removable")
        if self.deg_y <= 0:
            raise ValueError("deg_y must be positive")

    def blocks(self):
        """Removable classes grouped by degree, increasing."""
        by_deg = {}
        for c in self.classes_x:
            by_deg.setdefault(round(degree_of(c, self.deg_y), 12), []).append(c)
        return [tuple(by_deg[d]) for d in sorted(by_deg)]

    @property
    def block_count(self):
        return len(self.blocks())


def _covers(cls, root):
    """cls matches at least the monomials of root (same signature, laxer flags)."""
    if cls.signature() != root.signature():
        return False
    return not (cls.average_only or cls.zero_average_only)


def degree_of(mclass, deg_y):
    """deg(y^j w^a d/dv) = j*deg_y + |a| - deg(v), with deg(theta)=0, deg(w)=1."""
    tgt = {"theta": 0.0, "w": 1.0, "y": float(deg_y)}[mclass.target]
    return mclass.y_degree * float(deg_y) + mclass.w_degree - tgt


def decompose(field, spec):
    """Split coefficientwise into (normal part, removable part, remainder).

    The three parts sum to the input exactly.
    """
    g = field.geom
    n_keys, x_keys, r_keys = {}, {}, {}
    n_by_sig, x_by_sig = {}, {}
    for c in spec.classes_n:
        n_by_sig.setdefault(c.signature(), []).append(c)
    for c in spec.classes_x:
        x_by_sig.setdefault(c.signature(), []).append(c)
    for key, v in field.coeffs.items():
        sig = key_signature(g, key)
        if any(c.matches(g, key) for c in n_by_sig.get(sig, ())):
            n_keys[key] = v
        elif any(c.matches(g, key) for c in x_by_sig.get(sig, ())):
            x_keys[key] = v
        else:
            r_keys[key] = v
    mk = lambda d: FourierTaylorField(g, d, clean=False)
    return mk(n_keys), mk(x_keys), mk(r_keys)


def project_block(field, spec, block_index):
    return project_classes(field, spec.blocks()[block_index])


def all_monomial_classes(max_degree):
    """Every (target; sources) class with at most max_degree sources,
    split into average and zero-average halves."""
    out = []
    for target in ("theta", "y", "w"):
        for jy in range(max_degree + 1):
            for kw in range(max_degree + 1 - jy):
                sources = ("y",) * jy + ("w",) * kw
                out.append(MonomialClass(target, sources, average_only=True))
                out.append(MonomialClass(target, sources, zero_average_only=True))
    return out


def check_triangular(spec, max_degree=None):
    """True iff normal-form classes all sit at degree zero and every class
    outside the split has positive degree.  Returns (ok, report)."""
    if max_degree is None:
        max_degree = max(2, spec.n_max)
    offenders = []
    for c in spec.classes_n:
        d = degree_of(c, spec.deg_y)
        if abs(d) > 1e-12:
            offenders.append((c.label(), d, "normal-form class off degree zero"))
    covered = _coverage_table(spec)
    for c in all_monomial_classes(max_degree):
        owner = covered.get(_half_key(c))
        if owner is not None:
            continue
        d = degree_of(c, spec.deg_y)
        if d <= 1e-12:
            offenders.append((c.label(), d, "remainder class at nonpositive degree"))
    report = {
        "ok": not offenders,
        "offenders": offenders,
        "block_count": spec.block_count,
        "block_degrees": [degree_of(b[0], spec.deg_y) for b in spec.blocks()],
    }
    return not offenders, report


def _half_key(c):
    avg = "avg" if c.average_only else ("osc" if c.zero_average_only else None)
    return (c.signature(), avg)


def _coverage_table(spec):
    """Map from (signature, half) to owning side, halves being avg / osc."""
    table = {}
    for side, classes in (("N", spec.classes_n), ("X", spec.classes_x)):
        for c in classes:
            sig = c.signature()
            if c.average_only:
                table[(sig, "avg")] = side
            elif c.zero_average_only:
                table[(sig, "osc")] = side
            else:
                table[(sig, "avg")] = side
                table[(sig, "osc")] = side
    return table


# ---------------------------------------------------------------------------
# structure checks
# ---------------------------------------------------------------------------

def reversal_transform(field):
    """Push the field through the involution (theta, y, z+, z-) ->
    (-theta, y, z-, z+); the field is reversible iff this equals -field."""
    g = field.geom
    out = {}
    for (c, alpha, ell), v in field.coeffs.items():
        cc = g.w_conjugate(c) if g.is_w(c) else c
        sign = -1.0 if g.is_theta(c) else 1.0
        key = (cc, g.swap_alpha(alpha), tuple(-x for x in ell))
        out[key] = out.get(key, 0.0) + sign * v
    return FourierTaylorField(g, out, clean=False)


def reversibility_defect(field):
    diff = reversal_transform(field) + field
    return diff.max_abs()


def hamiltonian_defect(field):
    """Max violation of the closedness identities characterizing a Hamiltonian
    field for dtheta^dy + i dz+^dz- (requires d1 == d).

    The candidate gradient is rebuilt from the components and all mixed
    second derivatives are compared.
    """
    g = field.geom
    if g.d1 != g.d:
        raise ValueError("Hamiltonian check needs d1 == d")
    grad = _candidate_gradient(field)
    worst = 0.0
    nthvars = g.d + g.n_taylor
    for a in range(nthvars):
        for b in range(a + 1, nthvars):
            ga = _derive(grad[b], a, g)
            gb = _derive(grad[a], b, g)
            keys = set(ga) | set(gb)
            for k in keys:
                worst = max(worst, abs(ga.get(k, 0.0) - gb.get(k, 0.0)))
    return worst


def _candidate_gradient(field):
    """grad[v] = dH/dv as coefficient dicts, reconstructed from the field.

    dH/dtheta_i = -F^(y_i); dH/dy_i = F^(theta_i);
    dH/dz+_j = -i F^(z-_j); dH/dz-_j = i F^(z+_j).
    """
    g = field.geom
    grads = [dict() for _ in range(g.d + g.n_taylor)]
    for (c, alpha, ell), v in field.coeffs.items():
        if g.is_theta(c):
            grads[g.d + (c - 0)][(alpha, ell)] = v
        elif g.is_y(c):
            grads[c - g.d][(alpha, ell)] = -v
        else:
            k = c - g.d - g.d1
            target = g.d + g.d1 + (k ^ 1)
            sgn = -1j if g.w_sign(c) < 0 else 1j
            grads[target][(alpha, ell)] = sgn * v
    return grads


def _derive(table, var, g):
    """Formal derivative of {(alpha, ell): v} w.r.t. variable index var
    (var < d: theta derivative, else Taylor variable)."""
    out = {}
    for (alpha, ell), v in table.items():
        if var < g.d:
            if ell[var] == 0:
                continue
            out[(alpha, ell)] = out.get((alpha, ell), 0.0) + 1j * ell[var] * v
        else:
            t = var - g.d
            if alpha[t] == 0:
                continue
            a = list(alpha)
            a[t] -= 1
            key = (tuple(a), ell)
            out[key] = out.get(key, 0.0) + alpha[t] * v
    return out


def structure_check(field, structure, tol=1e-10):
    """Verify the coefficient identities of the declared structure class.

    Returns a report dict with the max violation; raises on unknown tags.
    """
    if structure in ("Reversible0", "ReversibleFiniteRank"):
        defect = reversibility_defect(field)
    elif structure in ("Hamiltonian", "HamiltonianReducible"):
        defect = hamiltonian_defect(field)
    elif structure == "None":
        defect = 0.0
    else:
        raise ValueError(f"unknown structure {structure}")
    return {"structure": structure, "defect": defect, "ok": defect <= tol, "tol": tol}


def generator_symmetry_defect(gfield, structure):
    """Membership test for generators of structure-preserving flows.

    Hamiltonian generators must be Hamiltonian fields; reversible ones obey
    the opposite parity (the transform equals +g).
    """
    if structure in ("Hamiltonian", "HamiltonianReducible"):
        return hamiltonian_defect(gfield)
    if structure in ("Reversible0", "ReversibleFiniteRank"):
        diff = reversal_transform(gfield) - gfield
        return diff.max_abs()
    return 0.0


# ---------------------------------------------------------------------------
# rescaling
# ---------------------------------------------------------------------------

def rescale(field, delta, y_exp):
    """Substitute y -> delta^s y, w -> delta w and divide component v by its
    scaling weight; each coefficient picks up delta**(scaling degree)."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    g = field.geom
    out = {}
    for (c, alpha, ell), v in field.coeffs.items():
        jy = sum(alpha[: g.d1])
        kw = sum(alpha[g.d1:])
        tgt = 0.0 if g.is_theta(c) else (float(y_exp) if g.is_y(c) else 1.0)
        deg = float(y_exp) * jy + kw - tgt
        out[(c, alpha, ell)] = v * delta ** deg
    return FourierTaylorField(g, out, clean=False)


# ---------------------------------------------------------------------------
# shipped decomposition presets
# ---------------------------------------------------------------------------

def _cl(target, sources=(), avg=False, osc=False):
    return MonomialClass(target, sources, average_only=avg, zero_average_only=osc)


def preset_spec(name):
    """Decomposition presets selectable by name in run configurations."""
    name = name.lower()
    if name == "minimal":
        # the plainest split: remove only the torus displacement blocks
        return DecompositionSpec(
            classes_n=(
                _cl("theta"), _cl("w", ("w",)), _cl("y", ("y",)),
                _cl("y", ("w",)), _cl("w", ("y",)),
            ),
            classes_x=(_cl("y"), _cl("w")),
            deg_y=1.0,
            structure="Reversible0",
            n_max=1,
        )
    if name == "minimal2":
        # same but the oscillating part of the angle block is removable too
        return DecompositionSpec(
            classes_n=(
                _cl("theta", avg=True), _cl("w", ("w",)), _cl("y", ("y",)),
                _cl("y", ("w",)), _cl("w", ("y",)),
            ),
            classes_x=(_cl("y"), _cl("w"), _cl("theta", osc=True)),
            deg_y=1.0,
            structure="Reversible0",
            n_max=1,
        )
    if name in ("hamiltonian", "reducible"):
        struct = "Hamiltonian" if name == "hamiltonian" else "HamiltonianReducible"
        return DecompositionSpec(
            classes_n=(_cl("theta", avg=True), _cl("w", ("w",)), _cl("y", ("w", "w"))),
            classes_x=(
                _cl("theta", osc=True), _cl("y"), _cl("y", ("y",)),
                _cl("y", ("w",)), _cl("w"),
            ),
            deg_y=2.0,
            structure=struct,
            n_max=2,
        )
    if name == "reversible":
        return DecompositionSpec(
            classes_n=(_cl("theta"), _cl("w", ("w",))),
            classes_x=(_cl("y"), _cl("y", ("y",)), _cl("y", ("w",)), _cl("w")),
            deg_y=1.5,
            structure="ReversibleFiniteRank",
            n_max=1,
        )
    if name == "reversible2":
        return DecompositionSpec(
            classes_n=(_cl("theta", avg=True), _cl("w", ("w",))),
            classes_x=(
                _cl("theta", osc=True), _cl("y"), _cl("y", ("y",)),
                _cl("y", ("w",)), _cl("w"),
            ),
            deg_y=1.5,
            structure="ReversibleFiniteRank",
            n_max=1,
        )
    raise KeyError(f"unknown decomposition preset {name!r}")


PRESET_NAMES = ("minimal", "minimal2", "hamiltonian", "reversible", "reversible2", "reducible")
