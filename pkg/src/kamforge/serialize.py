"""Field serialization: a line-oriented text format and a JSON equivalent.

Text rows are `component taylor-multiindex fourier-index re im`, one
coefficient per line, preceded by `#`-comment header lines carrying the
geometry.  Floats are written with repr, so decimal-representable values
round-trip bit-exact.
"""

from __future__ import annotations

import json

from .fields import FourierTaylorField, Geometry, ModeSet


def geometry_header(geom):
    return {
        "d": geom.d,
        "d1": geom.d1,
        "lambda": list(geom.modes.lam),
        "fourier_cutoff": geom.fourier_cutoff,
        "taylor_cutoff": geom.taylor_cutoff,
        "drop_tol": geom.drop_tol,
    }


def geometry_from_header(h):
    return Geometry(
        d=int(h["d"]),
        d1=int(h["d1"]),
        modes=ModeSet(tuple(float(x) for x in h["lambda"])),
        fourier_cutoff=int(h["fourier_cutoff"]),
        taylor_cutoff=int(h["taylor_cutoff"]),
        drop_tol=float(h.get("drop_tol", 1e-14)),
    )


def _sorted_items(field):
    g = field.geom
    return sorted(field.coeffs.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2]))


def field_to_text(field):
    g = field.geom
    lines = ["# kamforge field v1"]
    hdr = geometry_header(g)
    for k in ("d", "d1", "fourier_cutoff", "taylor_cutoff"):
        lines.append(f"# {k} {hdr[k]}")
    lines.append("# lambda " + ",".join(repr(x) for x in g.modes.lam))
    lines.append("# drop_tol " + repr(g.drop_tol))
    for (c, alpha, ell), v in _sorted_items(field):
        lines.append(
            " ".join(
                [
                    g.component_label(c),
                    ",".join(str(a) for a in alpha),
                    ",".join(str(x) for x in ell),
                    repr(float(v.real)),
                    repr(float(v.imag)),
                ]
            )
        )
    return "\n".join(lines) + "\n"


def field_from_text(text):
    hdr = {}
    rows = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) >= 2:
                hdr[parts[0]] = parts[1]
            continue
        rows.append(line.split())
    geom = Geometry(
        d=int(hdr["d"]),
        d1=int(hdr["d1"]),
        modes=ModeSet(tuple(float(x) for x in hdr["lambda"].split(","))),
        fourier_cutoff=int(hdr["fourier_cutoff"]),
        taylor_cutoff=int(hdr["taylor_cutoff"]),
        drop_tol=float(hdr.get("drop_tol", "1e-14")),
    )
    coeffs = {}
    for comp, tay, ell, re, im in rows:
        c = geom.component_index(comp)
        alpha = tuple(int(a) for a in tay.split(","))
        lvec = tuple(int(x) for x in ell.split(","))
        coeffs[(c, alpha, lvec)] = complex(float(re), float(im))
    return FourierTaylorField(geom, coeffs, clean=False)


def field_to_json(field):
    g = field.geom
    return json.dumps(
        {
            "format": "kamforge-field-v1",
            "geometry": geometry_header(g),
            "coeffs": [
                [
                    g.component_label(c),
                    list(alpha),
                    list(ell),
                    repr(float(v.real)),
                    repr(float(v.imag)),
                ]
                for (c, alpha, ell), v in _sorted_items(field)
            ],
        },
        indent=1,
    )


def field_from_json(text):
    doc = json.loads(text)
    geom = geometry_from_header(doc["geometry"])
    coeffs = {}
    for comp, alpha, ell, re, im in doc["coeffs"]:
        c = geom.component_index(comp)
        coeffs[(c, tuple(alpha), tuple(ell))] = complex(float(re), float(im))
    return FourierTaylorField(geom, coeffs, clean=False)
