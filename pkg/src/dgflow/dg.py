"""Piecewise-linear discontinuous scalar fields and quadrature.

Fields store one coefficient triple per element in the centroid-Taylor basis
{1, x - c_x, y - c_y}; the constant coefficient is then the exact cell average
on triangles and rectangles, and slope limiting is a pure gradient scaling.

Quadrature: element rules exact for polynomial degree >= 4 (6-point triangle
rule, 3x3 Gauss-Legendre on rectangles), face rule exact for degree >= 5
(3-point Gauss-Legendre).
"""

from __future__ import annotations

import numpy as np

# 6-point degree-4 triangle rule (two symmetric orbits, weights sum to 1)
_TRI_A1, _TRI_W1 = 0.445948490915965, 0.223381589678011
_TRI_A2, _TRI_W2 = 0.091576213509771, 0.109951743655322
_TRI_BARY = np.array(
    [
        [1 - 2 * _TRI_A1, _TRI_A1, _TRI_A1],
        [_TRI_A1, 1 - 2 * _TRI_A1, _TRI_A1],
        [_TRI_A1, _TRI_A1, 1 - 2 * _TRI_A1],
        [1 - 2 * _TRI_A2, _TRI_A2, _TRI_A2],
        [_TRI_A2, 1 - 2 * _TRI_A2, _TRI_A2],
        [_TRI_A2, _TRI_A2, 1 - 2 * _TRI_A2],
    ]
)
_TRI_W = np.array([_TRI_W1] * 3 + [_TRI_W2] * 3)

# 3-point Gauss-Legendre on [-1, 1]
_GL3_X = np.array([-np.sqrt(3.0 / 5.0), 0.0, np.sqrt(3.0 / 5.0)])
_GL3_W = np.array([5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0])

# 4-point Gauss-Legendre (rectangles use the 4x4 tensor rule, degree 7:
# comfortably past the required degree and tight enough that projections of
# smooth data match analytic element integrals to ~1e-13 on coarse cells)
_GL4_X, _GL4_W = np.polynomial.legendre.leggauss(4)

N_FACE_Q = 3


class Quadrature:
    """Element and face quadrature tables for one mesh.

    Attributes:
        elem_pts: (Ne, nq, 2) points, zero-weight padded for mixed meshes.
        elem_w:   (Ne, nq) weights summing to the element area.
        face_pts: (Nf, 3, 2), face_w: (Nf, 3) weights summing to face length.
        basis:    (Ne, nq, 3) centroid basis values at element points.
    """

    def __init__(self, mesh):
        self.mesh = mesh
        ne = mesh.n_elements
        nq = 6 if np.all(mesh.elem_nv == 3) else 16
        self.elem_pts = np.zeros((ne, nq, 2))
        self.elem_w = np.zeros((ne, nq))

        tri = np.where(mesh.elem_nv == 3)[0]
        if len(tri):
            corners = mesh.verts[mesh.elem_verts[tri, :3]]  # (nt, 3, 2)
            pts = np.einsum("qb,tbx->tqx", _TRI_BARY, corners)
            self.elem_pts[tri, :6] = pts
            self.elem_w[tri, :6] = mesh.areas[tri][:, None] * _TRI_W[None, :]

        quad = np.where(mesh.elem_nv == 4)[0]
        if len(quad):
            # axis-aligned rectangles only: map the tensor rule by bounding box
            corners = mesh.verts[mesh.elem_verts[quad, :4]]
            lo = corners.min(axis=1)
            hi = corners.max(axis=1)
            gx, gy = np.meshgrid(_GL4_X, _GL4_X, indexing="ij")
            wx, wy = np.meshgrid(_GL4_W, _GL4_W, indexing="ij")
            ref = np.column_stack((gx.ravel(), gy.ravel()))  # (16, 2)
            wt = (wx * wy).ravel() / 4.0
            mid = 0.5 * (lo + hi)
            half = 0.5 * (hi - lo)
            self.elem_pts[quad] = mid[:, None, :] + ref[None, :, :] * half[:, None, :]
            self.elem_w[quad] = mesh.areas[quad][:, None] * wt[None, :]

        p0 = mesh.verts[mesh.face_verts[:, 0]]
        p1 = mesh.verts[mesh.face_verts[:, 1]]
        t = 0.5 * (_GL3_X + 1.0)
        self.face_pts = p0[:, None, :] + t[None, :, None] * (p1 - p0)[:, None, :]
        self.face_w = mesh.face_lengths[:, None] * (_GL3_W[None, :] / 2.0)

        d = self.elem_pts - mesh.centroids[:, None, :]
        self.basis = np.concatenate((np.ones((ne, nq, 1)), d), axis=2)

        for arr in (self.elem_pts, self.elem_w, self.face_pts, self.face_w, self.basis):
            arr.setflags(write=False)

    def face_basis(self, side_elems):
        """Centroid-basis values of given elements at face quad points.

        side_elems: (Nf,) element id per face (e.g. face_eplus).  Returns
        (Nf, 3, 3) array; entries for id -1 are garbage and must be masked.
        """
        c = self.mesh.centroids[np.clip(side_elems, 0, None)]
        d = self.face_pts - c[:, None, :]
        return np.concatenate((np.ones(d.shape[:2] + (1,)), d), axis=2)


class DGField:
    """Element-wise linear scalar field in the centroid basis."""

    __slots__ = ("mesh", "coef")

    def __init__(self, mesh, coef=None):
        self.mesh = mesh
        if coef is None:
            coef = np.zeros((mesh.n_elements, 3))
        else:
            coef = np.array(coef, dtype=float)
            if coef.shape != (mesh.n_elements, 3):
                raise ValueError(f"coef must be ({mesh.n_elements}, 3)")
        self.coef = coef

    def copy(self):
        return DGField(self.mesh, self.coef.copy())

    def averages(self):
        """Cell average per element (exact in the centroid basis)."""
        return self.coef[:, 0].copy()

    def gradients(self):
        return self.coef[:, 1:].copy()

    def eval(self, elems, points):
        """Evaluate at points, each attributed to the element in `elems`."""
        elems = np.asarray(elems, dtype=np.int64)
        points = np.asarray(points, dtype=float)
        d = points - self.mesh.centroids[elems]
        c = self.coef[elems]
        return c[..., 0] + c[..., 1] * d[..., 0] + c[..., 2] * d[..., 1]

    def eval_at_quad(self, quad):
        """Values at all element quadrature points, (Ne, nq)."""
        return np.einsum("eqb,eb->eq", quad.basis, self.coef)

    def vertex_values(self):
        """Values at element corners, (Ne, 4) with NaN padding on triangles."""
        m = self.mesh
        out = np.full((m.n_elements, 4), np.nan)
        vid = m.elem_verts
        for i in range(4):
            sel = vid[:, i] >= 0
            d = m.verts[vid[sel, i]] - m.centroids[sel]
            c = self.coef[sel]
            out[sel, i] = c[:, 0] + c[:, 1] * d[:, 0] + c[:, 2] * d[:, 1]
        return out

    def vertex_min_max(self):
        vv = self.vertex_values()
        return np.nanmin(vv), np.nanmax(vv)

    def with_averages(self, new_avg):
        """Same gradients, cell averages replaced by `new_avg`."""
        coef = self.coef.copy()
        coef[:, 0] = new_avg
        return DGField(self.mesh, coef)


def evaluate_at_vertices(field, elem):
    """Exact values of `field` at the corners of one element."""
    m = field.mesh
    vs = m.element_vertices(elem)
    d = m.verts[vs] - m.centroids[elem]
    c = field.coef[elem]
    return c[0] + c[1] * d[:, 0] + c[2] * d[:, 1]


def project_l2(f, mesh, quad=None):
    """L2 projection of a pointwise function onto the P1 DG space.

    f maps (x, y) arrays to values; constants are accepted too.
    """
    quad = quad or Quadrature(mesh)
    if np.isscalar(f):
        val = float(f)
        coef = np.zeros((mesh.n_elements, 3))
        coef[:, 0] = val
        return DGField(mesh, coef)

    fv = f(quad.elem_pts[..., 0], quad.elem_pts[..., 1])
    fv = np.broadcast_to(np.asarray(fv, dtype=float), quad.elem_w.shape)
    b = np.einsum("eq,eqb->eb", quad.elem_w * fv, quad.basis)
    # mass matrix blocks: constant decouples from the centered linear part
    m00 = quad.elem_w.sum(axis=1)  # = |E|
    d = quad.elem_pts - mesh.centroids[:, None, :]
    mxx = np.einsum("eq,eq->e", quad.elem_w, d[..., 0] ** 2)
    mxy = np.einsum("eq,eq->e", quad.elem_w, d[..., 0] * d[..., 1])
    myy = np.einsum("eq,eq->e", quad.elem_w, d[..., 1] ** 2)
    # odd moments vanish for simplices/rectangles about the centroid, but the
    # quadrature realizes that only to rule exactness; include them anyway
    mx = np.einsum("eq,eq->e", quad.elem_w, d[..., 0])
    my = np.einsum("eq,eq->e", quad.elem_w, d[..., 1])

    coef = np.zeros((mesh.n_elements, 3))
    mat = np.zeros((mesh.n_elements, 3, 3))
    mat[:, 0, 0] = m00
    mat[:, 0, 1] = mat[:, 1, 0] = mx
    mat[:, 0, 2] = mat[:, 2, 0] = my
    mat[:, 1, 1] = mxx
    mat[:, 1, 2] = mat[:, 2, 1] = mxy
    mat[:, 2, 2] = myy
    coef[:] = np.linalg.solve(mat, b[:, :, None])[:, :, 0]
    return DGField(mesh, coef)


def cell_average_quadrature(field, quad):
    """Cell averages by explicit quadrature (an independent cross-check)."""
    vals = field.eval_at_quad(quad)
    return np.einsum("eq,eq->e", quad.elem_w, vals) / quad.elem_w.sum(axis=1)
