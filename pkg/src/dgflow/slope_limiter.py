"""Vertex-based slope limiting of marked elements.

Elements whose vertex values leave [s_lower, s_upper] are marked; on those,
the gradient is scaled by the largest beta in [0, 1] keeping every vertex
value inside the min/max of the cell averages over the elements sharing that
vertex.  Cell averages are untouched, so the mass distribution set by the
flux limiter survives.
"""

from __future__ import annotations

import numpy as np

_MARK_TOL = 1e-12
_DENOM_GUARD = 1e-14


def mark_violations(field, bounds):
    """Ids of elements with a vertex value outside the physical bounds."""
    vv = field.vertex_values()
    with np.errstate(invalid="ignore"):
        bad = (vv > bounds.upper + _MARK_TOL) | (vv < bounds.lower - _MARK_TOL)
    return np.where(np.any(np.nan_to_num(bad, nan=False), axis=1))[0]


def vertex_patch_bounds(averages, mesh):
    """Per-vertex (min, max) of cell averages over the incident elements."""
    averages = np.asarray(averages, dtype=float)
    lo = np.full(mesh.n_vertices, np.inf)
    hi = np.full(mesh.n_vertices, -np.inf)
    for v in range(mesh.n_vertices):
        patch = mesh.patch_elems[mesh.patch_ptr[v]: mesh.patch_ptr[v + 1]]
        if len(patch):
            vals = averages[patch]
            lo[v] = vals.min()
            hi[v] = vals.max()
    return lo, hi


def _patch_bounds_fast(averages, mesh):
    """Same as vertex_patch_bounds, scatter-vectorized for the time loop."""
    lo = np.full(mesh.n_vertices, np.inf)
    hi = np.full(mesh.n_vertices, -np.inf)
    vals = np.asarray(averages, dtype=float)
    for i in range(4):
        sel = mesh.elem_verts[:, i] >= 0
        v = mesh.elem_verts[sel, i]
        np.minimum.at(lo, v, vals[sel])
        np.maximum.at(hi, v, vals[sel])
    return lo, hi


def compute_beta(field, marked, patch_lo, patch_hi):
    """Gradient scaling factor per marked element (three-case vertex rule)."""
    m = field.mesh
    beta = np.ones(len(marked))
    avg = field.coef[:, 0]
    for idx, e in enumerate(marked):
        vs = m.element_vertices(e)
        d = m.verts[vs] - m.centroids[e]
        vals = avg[e] + field.coef[e, 1] * d[:, 0] + field.coef[e, 2] * d[:, 1]
        b = 1.0
        for v, val in zip(vs, vals):
            dv = val - avg[e]
            if abs(dv) <= _DENOM_GUARD:
                continue
            if val > patch_hi[v]:
                b = min(b, (patch_hi[v] - avg[e]) / dv)
            elif val < patch_lo[v]:
                b = min(b, (patch_lo[v] - avg[e]) / dv)
        beta[idx] = min(max(b, 0.0), 1.0)
    return beta


def limit_slopes(field, marked, patch_lo, patch_hi):
    """Scale gradients of marked elements; averages are preserved exactly."""
    out = field.copy()
    if len(marked) == 0:
        return out
    beta = compute_beta(field, marked, patch_lo, patch_hi)
    out.coef[marked, 1:] *= beta[:, None]
    return out


def slope_limit(field, bounds):
    """Mark, compute patch bounds from cell averages, and limit; one call."""
    marked = mark_violations(field, bounds)
    if len(marked) == 0:
        return field.copy(), marked
    lo, hi = _patch_bounds_fast(field.coef[:, 0], field.mesh)
    return limit_slopes(field, marked, lo, hi), marked
