"""Fully implicit DG residuals and Jacobians.

Two systems are assembled here:

* the coupled pressure/saturation system (backward Euler in time, interior
  penalty DG in space, mobilities upwinded with respect to phase velocities
  frozen at the previous time level), and
* the scalar conservation-law system used by the Buckley-Leverett benchmarks
  (centered flux plus a first-order |f'| jump dissipation lagged in time).

Unknown layout for the coupled system: pressure coefficients first
(3 per element), then saturation coefficients.  Residual rows follow the same
layout: row 3*E+i is the pressure equation tested with basis i of element E.

Penalties: sigma/h_e on interior faces and 10*sigma/h_e on Dirichlet faces,
with h_e the face length, applied to pressure jumps on interior plus
Dirichlet-pressure faces and to saturation jumps on interior plus
Dirichlet-saturation faces.  (A flag restores the variant with pressure
penalty on every boundary face; it pins the pressure on Neumann boundaries
and is kept for sensitivity checks only.)

Signs of the wetting face flux on Neumann/outflow faces follow the outflux
convention so that the flux function telescopes exactly to the mean-tested
saturation residual; see `wetting_face_flux`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .dg import DGField, Quadrature


class AssemblyError(RuntimeError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass
class SystemState:
    """Discrete pressure/saturation pair at one time level."""

    P: DGField
    S: DGField
    time: float = 0.0

    def __post_init__(self):
        if self.P.mesh is not self.S.mesh:
            raise ValueError("pressure and saturation must share one mesh")

    @property
    def mesh(self):
        return self.P.mesh

    def copy(self):
        return SystemState(self.P.copy(), self.S.copy(), self.time)


@dataclass
class BoundaryCondition:
    """Roles and data for one boundary tag.

    p_role: 'dirichlet' (g_p) or 'neumann' (j_p).
    s_role: 'dirichlet' (g_s), 'neumann' (j_s) or 'outflow'.
    Data entries are scalars or callables (x, y, t) -> value.
    """

    p_role: str = "neumann"
    s_role: str = "neumann"
    g_p: object = 0.0
    g_s: object = 0.0
    j_p: object = 0.0
    j_s: object = 0.0

    def __post_init__(self):
        if self.p_role not in ("dirichlet", "neumann"):
            raise ConfigurationError(f"bad pressure role {self.p_role!r}")
        if self.s_role not in ("dirichlet", "neumann", "outflow"):
            raise ConfigurationError(f"bad saturation role {self.s_role!r}")


NOFLOW = BoundaryCondition()


@dataclass
class BoundaryConditionSet:
    """Per-tag boundary conditions plus the penalty parameters."""

    conditions: dict
    sigma: float = 100.0
    dirichlet_factor: float = 10.0
    pressure_penalty_all_faces: bool = False

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigurationError("penalty sigma must be positive")

    def lookup(self, tag):
        if tag in self.conditions:
            return self.conditions[tag]
        raise ConfigurationError(f"boundary tag {tag!r} has no boundary condition")


@dataclass
class Wells:
    """Piecewise-constant injection/production rate densities (1/s)."""

    qbar: np.ndarray  # (Ne,) injection
    qunder: np.ndarray  # (Ne,) production
    s_in: float = 0.85

    @classmethod
    def none(cls, n_elements):
        z = np.zeros(n_elements)
        return cls(z, z.copy(), 0.85)

    @property
    def active(self):
        return bool(np.any(self.qbar != 0) or np.any(self.qunder != 0))


@dataclass
class BodySources:
    """Pointwise body-force sources, used by manufactured-solution runs."""

    q_w: Callable
    q_l: Callable


def _eval_data(value, pts, t):
    """Evaluate boundary/source data at points (..., 2) and time t."""
    if callable(value):
        out = value(pts[..., 0], pts[..., 1], t)
        return np.broadcast_to(np.asarray(out, dtype=float), pts.shape[:-1])
    return np.full(pts.shape[:-1], float(value))


# ----------------------------------------------------------------------
# upwinding

def upwind_trace(avg_velocity_dot_n, plus_value, minus_value):
    """Upwind selection: plus side iff {v}.n > 0, minus side otherwise."""
    return np.where(np.asarray(avg_velocity_dot_n) > 0.0, plus_value, minus_value)


@dataclass
class ScaledVelocities:
    """Lagged scaled phase velocities at interior-face quadrature points.

    v_w = -K (grad P_n - rho_w g), v_l = -K (grad P_n + Pc'(S_n) grad S_n
    - rho_l g), each evaluated from both sides; `sel_w` / `sel_l` hold the
    resulting upwind choices ({v}.n > 0 selects the plus side).
    """

    vw_plus: np.ndarray  # (nfi, nq, 2)
    vw_minus: np.ndarray
    vl_plus: np.ndarray
    vl_minus: np.ndarray
    sel_w: np.ndarray  # (nfi, nq) bool, True -> plus side
    sel_l: np.ndarray


# ----------------------------------------------------------------------

class TwoPhaseSystem:
    """Assembler bound to one (mesh, model, boundary conditions, sources)."""

    def __init__(self, mesh, model, bcs, wells=None, body_sources=None, quad=None):
        self.mesh = mesh
        self.model = model
        self.bcs = bcs
        self.wells = wells if wells is not None else Wells.none(mesh.n_elements)
        self.body = body_sources
        self.quad = quad or Quadrature(mesh)
        self._csc_cache = None
        self._anchor_mask = None
        self._precompute()
        # with no Dirichlet pressure anywhere the pressure is defined only up
        # to a constant: pin the mean coefficient of element 0 to its value
        self.anchor_dof = None if self.has_dirichlet_p else 0

    # -- static tables --------------------------------------------------
    def _precompute(self):
        m, q = self.mesh, self.quad
        self.ne = m.n_elements
        self.ndof = 3 * self.ne
        self.phi_e = np.broadcast_to(np.asarray(self.model.porosity, dtype=float), (self.ne,)).copy()
        self.K_e = np.broadcast_to(np.asarray(self.model.permeability, dtype=float), (self.ne,)).copy()
        self.g = np.asarray(self.model.gravity, dtype=float)

        self.mass = np.einsum("eq,eqi,eqj->eij", q.elem_w, q.basis, q.basis)

        ifc = m.interior_faces
        self.ifc = ifc
        self.iep = m.face_eplus[ifc]
        self.iem = m.face_eminus[ifc]
        self.inrm = m.face_normals[ifc]
        self.ib_p = self._face_basis(ifc, self.iep)
        self.ib_m = self._face_basis(ifc, self.iem)
        self.iw = q.face_w[ifc]

        # boundary groups by role
        groups = {"dirichlet_p": [], "neumann_p": [], "dirichlet_s": [], "neumann_s": [], "outflow_s": []}
        for f in m.boundary_faces:
            bc = self.bcs.lookup(m.face_tag_name(f))
            groups["dirichlet_p" if bc.p_role == "dirichlet" else "neumann_p"].append(f)
            key = {"dirichlet": "dirichlet_s", "neumann": "neumann_s", "outflow": "outflow_s"}[bc.s_role]
            groups[key].append(f)
        self.bgroups = {}
        for name, faces in groups.items():
            faces = np.array(sorted(faces), dtype=np.int64)
            owners = m.face_eplus[faces]
            self.bgroups[name] = {
                "faces": faces,
                "owners": owners,
                "normals": m.face_normals[faces],
                "basis": self._face_basis(faces, owners),
                "w": q.face_w[faces],
                "pts": q.face_pts[faces],
            }

        sig = self.bcs.sigma
        self.pen_int = sig / m.face_lengths[ifc]
        self.pen_dirp = self.bcs.dirichlet_factor * sig / m.face_lengths[self.bgroups["dirichlet_p"]["faces"]]
        self.pen_dirs = self.bcs.dirichlet_factor * sig / m.face_lengths[self.bgroups["dirichlet_s"]["faces"]]
        self.pen_neup = sig / m.face_lengths[self.bgroups["neumann_p"]["faces"]]

        self.prow = np.arange(3)[None, :] + 3 * np.arange(self.ne)[:, None]  # (Ne,3)
        self.srow = self.prow + self.ndof
        self.has_dirichlet_p = len(self.bgroups["dirichlet_p"]["faces"]) > 0

    def _face_basis(self, faces, elems):
        pts = self.quad.face_pts[faces]
        d = pts - self.mesh.centroids[elems][:, None, :]
        return np.concatenate((np.ones(d.shape[:2] + (1,)), d), axis=2)

    # -- state evaluation helpers ----------------------------------------
    def _trace(self, field, basis, elems):
        return np.einsum("fqb,fb->fq", basis, field.coef[elems])

    def scaled_velocities(self, state_n):
        """Lagged upwinding data from the time-n state."""
        model = self.model
        gP = state_n.P.coef[:, 1:]
        gS = state_n.S.coef[:, 1:]
        out = {}
        for side, elems, basis in (("p", self.iep, self.ib_p), ("m", self.iem, self.ib_m)):
            K = self.K_e[elems]
            Sq = model.clamped(self._trace(state_n.S, basis, elems))
            pcp = model.dpc(Sq)
            gPe = gP[elems]
            gSe = gS[elems]
            vw = -(K[:, None, None]) * (gPe[:, None, :] - model.rho_w * self.g)
            vw = np.broadcast_to(vw, Sq.shape + (2,)).copy()
            vl = -(K[:, None, None]) * (
                gPe[:, None, :] + pcp[:, :, None] * gSe[:, None, :] - model.rho_l * self.g
            )
            out[side] = (vw, vl)
        vw_p, vl_p = out["p"]
        vw_m, vl_m = out["m"]
        avg_w = 0.5 * np.einsum("fqx,fx->fq", vw_p + vw_m, self.inrm)
        avg_l = 0.5 * np.einsum("fqx,fx->fq", vl_p + vl_m, self.inrm)
        return ScaledVelocities(vw_p, vw_m, vl_p, vl_m, avg_w > 0.0, avg_l > 0.0)

    def source_values(self, state_n, t_new):
        """(q_w, q_l) at element quadrature points; wells are lagged at t_n."""
        q = self.quad
        if self.body is not None:
            pts = q.elem_pts
            qw = _eval_data(self.body.q_w, pts, t_new)
            ql = _eval_data(self.body.q_l, pts, t_new)
            return qw, ql
        if not self.wells.active:
            return None, None
        Snq = self.model.clamped(state_n.S.eval_at_quad(q))
        fw_n = self.model.f_w(Snq)
        fw_in = float(self.model.f_w(self.wells.s_in))
        qw = fw_in * self.wells.qbar[:, None] - fw_n * self.wells.qunder[:, None]
        ql = (1.0 - fw_in) * self.wells.qbar[:, None] - (1.0 - fw_n) * self.wells.qunder[:, None]
        return qw, ql

    def well_element_averages(self, state_n):
        """f_w(s_in) qbar_E - mean(f_w(S_n)) qunder_E per element (for M(E))."""
        if self.body is not None or not self.wells.active:
            return np.zeros(self.ne)
        q = self.quad
        Snq = self.model.clamped(state_n.S.eval_at_quad(q))
        fw_avg = np.einsum("eq,eq->e", q.elem_w, self.model.f_w(Snq)) / self.mesh.areas
        fw_in = float(self.model.f_w(self.wells.s_in))
        return fw_in * self.wells.qbar - fw_avg * self.wells.qunder

    # -- assembly ---------------------------------------------------------
    def assemble(self, state_new, state_old, dt, upwind=None, want_jac=True):
        """Residual (and Jacobian) of the coupled system at `state_new`.

        `upwind` holds the frozen velocities from `state_old`; it is computed
        here when not supplied but should be reused across Newton iterations.
        """
        if dt <= 0:
            raise ValueError("dt must be positive")
        if upwind is None:
            upwind = self.scaled_velocities(state_old)
        model, q = self.model, self.quad
        t_new = state_old.time + dt

        R = np.zeros(2 * self.ndof)
        coo = _CooCollector() if want_jac else None

        # ---- volume terms ----
        Sq = state_new.S.eval_at_quad(q)
        Sq_old = state_old.S.eval_at_quad(q)
        Sc = model.clamped(Sq)
        mask = ((Sq == Sc)).astype(float)
        lw, ll, dlw, dll = model.mobilities(Sc, derivatives=True)
        dlw = dlw * mask
        dll = dll * mask
        pcp = model.dpc(Sc)
        pcpp = model.d2pc(Sc) * mask

        gP = state_new.P.coef[:, 1:]
        gS = state_new.S.coef[:, 1:]
        phi = self.phi_e
        K = self.K_e

        # time terms
        dS = np.einsum("eq,eq,eqi->ei", q.elem_w, Sq - Sq_old, q.basis)
        np.add.at(R, self.prow, -(phi / dt)[:, None] * dS)
        np.add.at(R, self.srow, +(phi / dt)[:, None] * dS)
        if want_jac:
            mass_by_dt = self.mass * (phi / dt)[:, None, None]
            coo.add_blocks(self.prow, self.srow, -mass_by_dt)
            coo.add_blocks(self.srow, self.srow, +mass_by_dt)

        # diffusion volume terms; gradients of the basis are constant
        vec_l = K[:, None, None] * (
            gP[:, None, :] + pcp[:, :, None] * gS[:, None, :] - model.rho_l * self.g
        )  # (Ne, nq, 2)
        vec_w = K[:, None, None] * np.broadcast_to(
            (gP - model.rho_w * self.g)[:, None, :], vec_l.shape
        )
        for i in (1, 2):
            R[self.prow[:, i]] += np.einsum("eq,eq->e", q.elem_w * ll, vec_l[..., i - 1])
            R[self.srow[:, i]] += np.einsum("eq,eq->e", q.elem_w * lw, vec_w[..., i - 1])
        if want_jac:
            wl = np.einsum("eq,eq->e", q.elem_w, ll) * K
            ww = np.einsum("eq,eq->e", q.elem_w, lw) * K
            jpp = np.zeros((self.ne, 3, 3))
            jpp[:, 1, 1] = wl
            jpp[:, 2, 2] = wl
            coo.add_blocks(self.prow, self.prow, jpp)
            jsp = np.zeros((self.ne, 3, 3))
            jsp[:, 1, 1] = ww
            jsp[:, 2, 2] = ww
            coo.add_blocks(self.srow, self.prow, jsp)
            # d/ds of the volume terms
            for i in (1, 2):
                wvl = q.elem_w * (dll * vec_l[..., i - 1] + ll * pcpp * K[:, None] * gS[:, None, i - 1])
                blk = np.einsum("eq,eqj->ej", wvl, q.basis)
                coo.add_rows(self.prow[:, i], self.srow, blk)
                # lambda_l * Pc' * K * dphi_j . e_i  (j = i only)
                extra = np.einsum("eq,eq->e", q.elem_w, ll * pcp) * K
                coo.add_entries(self.prow[:, i], self.srow[:, i], extra)
                wvw = q.elem_w * (dlw * vec_w[..., i - 1])
                coo.add_rows(self.srow[:, i], self.srow, np.einsum("eq,eqj->ej", wvw, q.basis))

        # sources (lagged; no Jacobian)
        qw, ql = self.source_values(state_old, t_new)
        if qw is not None:
            np.add.at(R, self.prow, -np.einsum("eq,eqi->ei", q.elem_w * ql, q.basis))
            np.add.at(R, self.srow, -np.einsum("eq,eqi->ei", q.elem_w * qw, q.basis))

        # ---- interior faces ----
        self._interior_faces(R, coo, state_new, upwind)

        # ---- boundary faces ----
        self._boundary_faces(R, coo, state_new, t_new)

        if not np.all(np.isfinite(R)):
            bad = np.where(~np.isfinite(R))[0][0]
            var = "pressure" if bad < self.ndof else "saturation"
            elem = (bad % self.ndof) // 3
            raise AssemblyError(f"non-finite residual entry ({var} equation, element {elem})")

        if self.anchor_dof is not None:
            R[self.anchor_dof] = 0.0
            if want_jac:
                coo.add_entries([self.anchor_dof], [self.anchor_dof], [1.0])

        if not want_jac:
            return R, None
        return R, self._to_csc(coo)

    # -- interior face kernels -------------------------------------------
    def _interior_faces(self, R, coo, state, upwind):
        if len(self.ifc) == 0:
            return
        model = self.model
        n = self.inrm
        w = self.iw
        Kp, Km = self.K_e[self.iep], self.K_e[self.iem]

        Sp = self._trace(state.S, self.ib_p, self.iep)
        Sm = self._trace(state.S, self.ib_m, self.iem)
        Pp = self._trace(state.P, self.ib_p, self.iep)
        Pm = self._trace(state.P, self.ib_m, self.iem)
        Scp, Scm = model.clamped(Sp), model.clamped(Sm)
        maskp, maskm = (Sp == Scp).astype(float), (Sm == Scm).astype(float)

        gPp = state.P.coef[self.iep, 1:]
        gPm = state.P.coef[self.iem, 1:]
        gSp = state.S.coef[self.iep, 1:]
        gSm = state.S.coef[self.iem, 1:]
        gPp_n = np.einsum("fx,fx->f", gPp, n)
        gPm_n = np.einsum("fx,fx->f", gPm, n)
        gSp_n = np.einsum("fx,fx->f", gSp, n)
        gSm_n = np.einsum("fx,fx->f", gSm, n)
        g_n = n @ self.g

        lwp, llp, dlwp, dllp = model.mobilities(Scp, derivatives=True)
        lwm, llm, dlwm, dllm = model.mobilities(Scm, derivatives=True)
        dlwp *= maskp
        dllp *= maskp
        dlwm *= maskm
        dllm *= maskm
        pcp_p, pcp_m = model.dpc(Scp), model.dpc(Scm)
        pcpp_p, pcpp_m = model.d2pc(Scp) * maskp, model.d2pc(Scm) * maskm

        # normal fluxes per side (pressure equation carries the capillary term)
        fl_p = Kp[:, None] * (gPp_n[:, None] + pcp_p * gSp_n[:, None] - model.rho_l * g_n[:, None])
        fl_m = Km[:, None] * (gPm_n[:, None] + pcp_m * gSm_n[:, None] - model.rho_l * g_n[:, None])
        fw_p = np.broadcast_to((Kp * (gPp_n - model.rho_w * g_n))[:, None], fl_p.shape)
        fw_m = np.broadcast_to((Km * (gPm_n - model.rho_w * g_n))[:, None], fl_p.shape)
        avg_l = 0.5 * (fl_p + fl_m)
        avg_w = 0.5 * (fw_p + fw_m)

        lam_l_up = np.where(upwind.sel_l, llp, llm)
        lam_w_up = np.where(upwind.sel_w, lwp, lwm)

        jump_P = Pp - Pm
        jump_S = Sp - Sm

        sides = ((1.0, self.iep, self.ib_p), (-1.0, self.iem, self.ib_m))

        # residual: consistency + penalty, both equations
        for sgn, elems, basis in sides:
            rows_p = 3 * elems[:, None] + np.arange(3)[None, :]
            rows_s = rows_p + self.ndof
            val_p = np.einsum("fq,fqi->fi", w * (-lam_l_up * avg_l + self.pen_int[:, None] * jump_P), basis)
            val_s = np.einsum("fq,fqi->fi", w * (-lam_w_up * avg_w + self.pen_int[:, None] * jump_S), basis)
            np.add.at(R, rows_p, sgn * val_p)
            np.add.at(R, rows_s, sgn * val_s)

        if coo is None:
            return

        nvec = np.concatenate((np.zeros((len(n), 1)), n), axis=1)  # dphi_j . n per j
        selp_l = upwind.sel_l.astype(float)
        selp_w = upwind.sel_w.astype(float)

        for sgn_t, elems_t, basis_t in sides:
            rows_p = 3 * elems_t[:, None] + np.arange(3)[None, :]
            rows_s = rows_p + self.ndof
            for sgn_c, elems_c, basis_c, Kc, pcp_c, pcpp_c, gS_nc, dll_c, dlw_c, sel in (
                (1.0, self.iep, self.ib_p, Kp, pcp_p, pcpp_p, gSp_n, dllp, dlwp, selp_l),
                (-1.0, self.iem, self.ib_m, Km, pcp_m, pcpp_m, gSm_n, dllm, dlwm, 1.0 - selp_l),
            ):
                cols_p = 3 * elems_c[:, None] + np.arange(3)[None, :]
                cols_s = cols_p + self.ndof
                up_l = sel
                up_w = selp_w if sgn_c > 0 else 1.0 - selp_w

                # pressure eq wrt pressure: average-flux derivative + penalty
                base = np.einsum("fq,fqi->fi", w * (-lam_l_up), basis_t) * (0.5 * Kc)[:, None]
                blk = sgn_t * np.einsum("fi,fj->fij", base, nvec)
                blk += (sgn_t * sgn_c) * np.einsum(
                    "fq,fqi,fqj->fij", w * self.pen_int[:, None], basis_t, basis_c
                )
                coo.add_blocks(rows_p, cols_p, blk)

                # pressure eq wrt saturation: capillary terms + upwinded mobility
                coefq = w * (-lam_l_up) * (0.5 * Kc[:, None]) * pcpp_c * gS_nc[:, None]
                blk = np.einsum("fq,fqi,fqj->fij", coefq, basis_t, basis_c)
                base = np.einsum("fq,fqi->fi", w * (-lam_l_up) * (0.5 * Kc[:, None]) * pcp_c, basis_t)
                blk += np.einsum("fi,fj->fij", base, nvec)
                coefq = w * (-avg_l) * dll_c * up_l
                blk += np.einsum("fq,fqi,fqj->fij", coefq, basis_t, basis_c)
                coo.add_blocks(rows_p, cols_s, sgn_t * blk)

                # saturation eq wrt pressure
                base = np.einsum("fq,fqi->fi", w * (-lam_w_up), basis_t) * (0.5 * Kc)[:, None]
                blk = sgn_t * np.einsum("fi,fj->fij", base, nvec)
                coo.add_blocks(rows_s, cols_p, blk)

                # saturation eq wrt saturation: upwinded mobility + penalty
                coefq = w * (-avg_w) * dlw_c * up_w
                blk = np.einsum("fq,fqi,fqj->fij", coefq, basis_t, basis_c)
                blk += sgn_c * np.einsum("fq,fqi,fqj->fij", w * self.pen_int[:, None], basis_t, basis_c)
                coo.add_blocks(rows_s, cols_s, sgn_t * blk)

    # -- boundary face kernels ---------------------------------------------
    def _boundary_faces(self, R, coo, state, t_new):
        model = self.model
        ndof = self.ndof

        def traces(grp):
            el = grp["owners"]
            b = grp["basis"]
            Sq = self._trace(state.S, b, el)
            Pq = self._trace(state.P, b, el)
            return el, b, Sq, Pq

        # Dirichlet pressure: consistency (interior-trace mobility) + penalty
        grp = self.bgroups["dirichlet_p"]
        if len(grp["faces"]):
            el, b, Sq, Pq = traces(grp)
            n, w = grp["normals"], grp["w"]
            K = self.K_e[el]
            Sc = model.clamped(Sq)
            mask = (Sq == Sc).astype(float)
            lw_, ll, dlw_, dll = model.mobilities(Sc, derivatives=True)
            dll *= mask
            pcp = model.dpc(Sc)
            pcpp = model.d2pc(Sc) * mask
            gP_n = np.einsum("fx,fx->f", state.P.coef[el, 1:], n)
            gS_n = np.einsum("fx,fx->f", state.S.coef[el, 1:], n)
            g_n = n @ self.g
            flux = K[:, None] * (gP_n[:, None] + pcp * gS_n[:, None] - model.rho_l * g_n[:, None])
            gp = self._bc_values(grp["faces"], "g_p", grp["pts"], t_new)
            pen = self.pen_dirp[:, None]
            rows = 3 * el[:, None] + np.arange(3)[None, :]
            np.add.at(R, rows, np.einsum("fq,fqi->fi", w * (-ll * flux + pen * (Pq - gp)), b))
            if coo is not None:
                nvec = np.concatenate((np.zeros((len(n), 1)), n), axis=1)
                base = np.einsum("fq,fqi->fi", w * (-ll), b) * K[:, None]
                blk = np.einsum("fi,fj->fij", base, nvec)
                blk += np.einsum("fq,fqi,fqj->fij", w * pen, b, b)
                coo.add_blocks(rows, 3 * el[:, None] + np.arange(3)[None, :], blk)
                coefq = w * (-(dll * flux + ll * (K[:, None] * pcpp * gS_n[:, None])))
                blk = np.einsum("fq,fqi,fqj->fij", coefq, b, b)
                base = np.einsum("fq,fqi->fi", w * (-ll * K[:, None] * pcp), b)
                blk += np.einsum("fi,fj->fij", base, nvec)
                coo.add_blocks(rows, ndof + 3 * el[:, None] + np.arange(3)[None, :], blk)

        # Neumann pressure: data term (+ optional literal penalty variant)
        grp = self.bgroups["neumann_p"]
        if len(grp["faces"]):
            el, b = grp["owners"], grp["basis"]
            w = grp["w"]
            jp = self._bc_values(grp["faces"], "j_p", grp["pts"], t_new)
            rows = 3 * el[:, None] + np.arange(3)[None, :]
            np.add.at(R, rows, -np.einsum("fq,fqi->fi", w * jp, b))
            if self.bcs.pressure_penalty_all_faces:
                Pq = self._trace(state.P, b, el)
                pen = self.pen_neup[:, None]
                np.add.at(R, rows, np.einsum("fq,fqi->fi", w * pen * Pq, b))
                if coo is not None:
                    blk = np.einsum("fq,fqi,fqj->fij", w * pen, b, b)
                    coo.add_blocks(rows, 3 * el[:, None] + np.arange(3)[None, :], blk)

        # Dirichlet saturation: boundary-data mobility + penalty
        grp = self.bgroups["dirichlet_s"]
        if len(grp["faces"]):
            el, b, Sq, Pq = traces(grp)
            n, w = grp["normals"], grp["w"]
            K = self.K_e[el]
            gs = self._bc_values(grp["faces"], "g_s", grp["pts"], t_new)
            lw_b, _ = model.mobilities(model.clamped(gs))
            gP_n = np.einsum("fx,fx->f", state.P.coef[el, 1:], n)
            g_n = n @ self.g
            flux = np.broadcast_to((K * 1.0)[:, None] * (gP_n[:, None] - model.rho_w * g_n[:, None]), Sq.shape)
            pen = self.pen_dirs[:, None]
            rows = ndof + 3 * el[:, None] + np.arange(3)[None, :]
            np.add.at(R, rows, np.einsum("fq,fqi->fi", w * (-lw_b * flux + pen * (Sq - gs)), b))
            if coo is not None:
                nvec = np.concatenate((np.zeros((len(n), 1)), n), axis=1)
                base = np.einsum("fq,fqi->fi", w * (-lw_b), b) * K[:, None]
                coo.add_blocks(rows, 3 * el[:, None] + np.arange(3)[None, :], np.einsum("fi,fj->fij", base, nvec))
                blk = np.einsum("fq,fqi,fqj->fij", w * pen, b, b)
                coo.add_blocks(rows, ndof + 3 * el[:, None] + np.arange(3)[None, :], blk)

        # Neumann saturation: data term
        grp = self.bgroups["neumann_s"]
        if len(grp["faces"]):
            el, b = grp["owners"], grp["basis"]
            w = grp["w"]
            js = self._bc_values(grp["faces"], "j_s", grp["pts"], t_new)
            rows = ndof + 3 * el[:, None] + np.arange(3)[None, :]
            np.add.at(R, rows, -np.einsum("fq,fqi->fi", w * js, b))

        # outflow: free boundary, interior-trace mobility
        grp = self.bgroups["outflow_s"]
        if len(grp["faces"]):
            el, b, Sq, Pq = traces(grp)
            n, w = grp["normals"], grp["w"]
            K = self.K_e[el]
            Sc = model.clamped(Sq)
            mask = (Sq == Sc).astype(float)
            lw_, _, dlw_, _ = model.mobilities(Sc, derivatives=True)
            dlw_ *= mask
            gP_n = np.einsum("fx,fx->f", state.P.coef[el, 1:], n)
            g_n = n @ self.g
            flux = np.broadcast_to((K * 1.0)[:, None] * (gP_n[:, None] - model.rho_w * g_n[:, None]), Sq.shape)
            rows = ndof + 3 * el[:, None] + np.arange(3)[None, :]
            np.add.at(R, rows, np.einsum("fq,fqi->fi", w * (-lw_ * flux), b))
            if coo is not None:
                nvec = np.concatenate((np.zeros((len(n), 1)), n), axis=1)
                base = np.einsum("fq,fqi->fi", w * (-lw_), b) * K[:, None]
                coo.add_blocks(rows, 3 * el[:, None] + np.arange(3)[None, :], np.einsum("fi,fj->fij", base, nvec))
                blk = np.einsum("fq,fqi,fqj->fij", w * (-dlw_ * flux), b, b)
                coo.add_blocks(rows, ndof + 3 * el[:, None] + np.arange(3)[None, :], blk)

    def _bc_values(self, faces, attr, pts, t):
        """Boundary data at face quadrature points, grouped by tag."""
        out = np.zeros(pts.shape[:2])
        tags = self.mesh.face_tag[faces]
        for tag in np.unique(tags):
            bc = self.bcs.lookup(self.mesh.tag_names[tag])
            sel = tags == tag
            out[sel] = _eval_data(getattr(bc, attr), pts[sel], t)
        return out

    # -- wetting flux function (shared with the flux limiter) -------------
    def wetting_face_flux(self, state, upwind, t_new):
        """Signed wetting mass flux H per face, from the E+ / owner side.

        Outflux-signed on every face type so that, for the mean test function,
        the saturation residual telescopes to phi|E| dS/dt + sum_e H - wells.
        """
        model = self.model
        H = np.zeros(self.mesh.n_faces)

        if len(self.ifc):
            n, w = self.inrm, self.iw
            Sp = self._trace(state.S, self.ib_p, self.iep)
            Sm = self._trace(state.S, self.ib_m, self.iem)
            Scp, Scm = model.clamped(Sp), model.clamped(Sm)
            lwp, _ = model.mobilities(Scp)
            lwm, _ = model.mobilities(Scm)
            lam_up = np.where(upwind.sel_w, lwp, lwm)
            g_n = n @ self.g
            fw_p = (self.K_e[self.iep] * (np.einsum("fx,fx->f", state.P.coef[self.iep, 1:], n) - model.rho_w * g_n))
            fw_m = (self.K_e[self.iem] * (np.einsum("fx,fx->f", state.P.coef[self.iem, 1:], n) - model.rho_w * g_n))
            avg = 0.5 * (fw_p + fw_m)
            H[self.ifc] = np.einsum(
                "fq->f", w * (-lam_up * avg[:, None] + self.pen_int[:, None] * (Sp - Sm))
            )

        grp = self.bgroups["dirichlet_s"]
        if len(grp["faces"]):
            el, b = grp["owners"], grp["basis"]
            n, w = grp["normals"], grp["w"]
            Sq = self._trace(state.S, b, el)
            gs = self._bc_values(grp["faces"], "g_s", grp["pts"], t_new)
            lw_b, _ = model.mobilities(model.clamped(gs))
            gP_n = np.einsum("fx,fx->f", state.P.coef[el, 1:], n)
            g_n = n @ self.g
            flux = (self.K_e[el] * 1.0)[:, None] * (gP_n[:, None] - model.rho_w * g_n[:, None])
            H[grp["faces"]] = np.einsum("fq->f", w * (-lw_b * flux + self.pen_dirs[:, None] * (Sq - gs)))

        grp = self.bgroups["neumann_s"]
        if len(grp["faces"]):
            w = grp["w"]
            js = self._bc_values(grp["faces"], "j_s", grp["pts"], t_new)
            H[grp["faces"]] = -np.einsum("fq->f", w * js)

        grp = self.bgroups["outflow_s"]
        if len(grp["faces"]):
            el, b = grp["owners"], grp["basis"]
            n, w = grp["normals"], grp["w"]
            Sc = model.clamped(self._trace(state.S, b, el))
            lw_, _ = model.mobilities(Sc)
            gP_n = np.einsum("fx,fx->f", state.P.coef[el, 1:], n)
            g_n = n @ self.g
            flux = (self.K_e[el] * 1.0)[:, None] * (gP_n[:, None] - model.rho_w * g_n[:, None])
            H[grp["faces"]] = np.einsum("fq->f", w * (-lw_ * flux))

        return H

    # -- sparse matrix finalization ---------------------------------------
    def _to_csc(self, coo):
        rows = np.concatenate(coo.rows)
        cols = np.concatenate(coo.cols)
        vals = np.concatenate(coo.vals)
        n = 2 * self.ndof
        if self._csc_cache is None:
            if self.anchor_dof is not None:
                # every entry of the anchored row except the trailing identity
                mask = rows == self.anchor_dof
                mask[-1] = False
                self._anchor_mask = mask
            order = np.lexsort((rows, cols))
            rs, cs = rows[order], cols[order]
            newgrp = np.ones(len(rs), dtype=bool)
            newgrp[1:] = (rs[1:] != rs[:-1]) | (cs[1:] != cs[:-1])
            starts = np.where(newgrp)[0]
            indices = rs[starts]
            colcount = np.zeros(n + 1, dtype=np.int64)
            np.add.at(colcount, cs[starts] + 1, 1)
            indptr = np.cumsum(colcount)
            self._csc_cache = (order, starts, indices, indptr, len(rows))
        order, starts, indices, indptr, nnz = self._csc_cache
        if len(vals) != nnz:
            raise AssemblyError("jacobian sparsity pattern changed between assemblies")
        if self._anchor_mask is not None:
            vals[self._anchor_mask] = 0.0
        data = np.add.reduceat(vals[order], starts)
        return sp.csc_matrix((data, indices, indptr), shape=(n, n))

    # -- vector <-> state -------------------------------------------------
    def pack(self, state):
        return np.concatenate((state.P.coef.ravel(), state.S.coef.ravel()))

    def unpack(self, x, time=0.0):
        P = DGField(self.mesh, x[: self.ndof].reshape(self.ne, 3))
        S = DGField(self.mesh, x[self.ndof:].reshape(self.ne, 3))
        return SystemState(P, S, time)


class _CooCollector:
    def __init__(self):
        self.rows, self.cols, self.vals = [], [], []

    def add_blocks(self, rows, cols, blocks):
        """rows, cols: (N,3); blocks: (N,3,3) with [n,i,j] -> (rows[n,i], cols[n,j])."""
        nn = len(rows)
        r = np.broadcast_to(rows[:, :, None], (nn, 3, 3))
        c = np.broadcast_to(cols[:, None, :], (nn, 3, 3))
        self.rows.append(r.ravel())
        self.cols.append(c.ravel())
        self.vals.append(np.ascontiguousarray(blocks).ravel())

    def add_rows(self, rows, cols, blocks):
        """rows: (N,); cols: (N,3); blocks: (N,3)."""
        r = np.broadcast_to(rows[:, None], cols.shape)
        self.rows.append(r.ravel())
        self.cols.append(cols.ravel())
        self.vals.append(np.ascontiguousarray(blocks).ravel())

    def add_entries(self, rows, cols, vals):
        self.rows.append(np.asarray(rows).ravel())
        self.cols.append(np.asarray(cols).ravel())
        self.vals.append(np.asarray(vals, dtype=float).ravel())


# ----------------------------------------------------------------------
# scalar Buckley-Leverett mode

@dataclass
class BLFlux:
    """Convection flux (F(S), G(S)) and its derivative for the scalar mode."""

    F: Callable
    G: Callable
    dF: Callable
    dG: Callable

    def vec(self, S):
        return np.stack((np.broadcast_to(self.F(S), np.shape(S)), np.broadcast_to(self.G(S), np.shape(S))), axis=-1)

    def dvec(self, S):
        return np.stack((np.broadcast_to(self.dF(S), np.shape(S)), np.broadcast_to(self.dG(S), np.shape(S))), axis=-1)


def bl_flux_from_model(model, u_t, v_t=0.0):
    """f_BL = u_t * f_w(S) in x (and the gravity-modified flux in y when v_t != 0)."""
    def F(S):
        return u_t * model.f_w(S)

    def dF(S):
        lw, ll, dlw, dll = model.mobilities(np.asarray(S, dtype=float), derivatives=True)
        tot = lw + ll
        return u_t * (dlw * tot - lw * (dlw + dll)) / tot**2

    if v_t == 0.0:
        return BLFlux(F, lambda S: np.zeros_like(np.asarray(S, dtype=float)), dF,
                      lambda S: np.zeros_like(np.asarray(S, dtype=float)))

    def G(S):
        lw, ll = model.mobilities(np.asarray(S, dtype=float))
        return F(S) * (v_t / u_t) * (1.0 - 5.0 * ll)

    def dG(S):
        lw, ll, dlw, dll = model.mobilities(np.asarray(S, dtype=float), derivatives=True)
        return dF(S) * (v_t / u_t) * (1.0 - 5.0 * ll) + F(S) * (v_t / u_t) * (-5.0 * dll)

    return BLFlux(F, G, dF, dG)


class ScalarBLSystem:
    """Implicit DG assembler for d_t(phi S) + div f_BL(S) = 0."""

    def __init__(self, mesh, flux, bcs, porosity=1.0, quad=None, clamp=(0.0, 1.0)):
        self.mesh = mesh
        self.flux = flux
        self.bcs = bcs
        self.quad = quad or Quadrature(mesh)
        self.phi_e = np.broadcast_to(np.asarray(porosity, dtype=float), (mesh.n_elements,)).copy()
        self.clamp = clamp
        self.ne = mesh.n_elements
        self.ndof = 3 * self.ne
        self._csc_cache = None
        self._precompute()

    def _precompute(self):
        m, q = self.mesh, self.quad
        self.mass = np.einsum("eq,eqi,eqj->eij", q.elem_w, q.basis, q.basis)
        ifc = m.interior_faces
        self.ifc = ifc
        self.iep, self.iem = m.face_eplus[ifc], m.face_eminus[ifc]
        self.inrm = m.face_normals[ifc]
        self.iw = q.face_w[ifc]
        self.ib_p = self._face_basis(ifc, self.iep)
        self.ib_m = self._face_basis(ifc, self.iem)
        self.pen_int = self.bcs.sigma / m.face_lengths[ifc]

        groups = {"dirichlet": [], "outflow": [], "noflow": []}
        for f in m.boundary_faces:
            bc = self.bcs.lookup(m.face_tag_name(f))
            if bc.s_role == "dirichlet":
                groups["dirichlet"].append(f)
            elif bc.s_role == "outflow":
                groups["outflow"].append(f)
            else:
                groups["noflow"].append(f)
        self.bgroups = {}
        for name, faces in groups.items():
            faces = np.array(sorted(faces), dtype=np.int64)
            owners = m.face_eplus[faces]
            self.bgroups[name] = {
                "faces": faces,
                "owners": owners,
                "normals": m.face_normals[faces],
                "basis": self._face_basis(faces, owners),
                "w": q.face_w[faces],
                "pts": q.face_pts[faces],
            }
        self.pen_dir = self.bcs.dirichlet_factor * self.bcs.sigma / m.face_lengths[self.bgroups["dirichlet"]["faces"]]
        self.rows = np.arange(3)[None, :] + 3 * np.arange(self.ne)[:, None]

    def _face_basis(self, faces, elems):
        pts = self.quad.face_pts[faces]
        d = pts - self.mesh.centroids[elems][:, None, :]
        return np.concatenate((np.ones(d.shape[:2] + (1,)), d), axis=2)

    def _trace(self, field, basis, elems):
        return np.einsum("fqb,fb->fq", basis, field.coef[elems])

    def _clamped(self, S):
        return np.clip(S, self.clamp[0], self.clamp[1])

    def dissipation(self, state_n):
        """Frozen |f'(S_n).n| at interior-face quadrature points."""
        Sn_avg = 0.5 * (self._trace(state_n, self.ib_p, self.iep) + self._trace(state_n, self.ib_m, self.iem))
        dvec = self.flux.dvec(self._clamped(Sn_avg))
        return np.abs(np.einsum("fqx,fx->fq", dvec, self.inrm))

    def assemble(self, S_new, S_old, dt, diss=None, want_jac=True):
        if diss is None:
            diss = self.dissipation(S_old)
        q = self.quad
        R = np.zeros(self.ndof)
        coo = _CooCollector() if want_jac else None

        Sq = S_new.eval_at_quad(q)
        Sq_old = S_old.eval_at_quad(q)
        phi = self.phi_e
        dS = np.einsum("eq,eq,eqi->ei", q.elem_w, Sq - Sq_old, q.basis)
        np.add.at(R, self.rows, (phi / dt)[:, None] * dS)
        if want_jac:
            coo.add_blocks(self.rows, self.rows, self.mass * (phi / dt)[:, None, None])

        Sc = self._clamped(Sq)
        mask = (Sq == Sc).astype(float)
        fvec = self.flux.vec(Sc)
        dfvec = self.flux.dvec(Sc) * mask[..., None]
        for i in (1, 2):
            R[self.rows[:, i]] += -np.einsum("eq,eq->e", q.elem_w, fvec[..., i - 1])
            if want_jac:
                blk = np.einsum("eq,eqj->ej", -q.elem_w * dfvec[..., i - 1], q.basis)
                coo.add_rows(self.rows[:, i], self.rows, blk)

        # interior faces: centered flux + lagged |f'| jump dissipation + penalty
        if len(self.ifc):
            n, w = self.inrm, self.iw
            Sp = self._trace(S_new, self.ib_p, self.iep)
            Sm = self._trace(S_new, self.ib_m, self.iem)
            Scp, Scm = self._clamped(Sp), self._clamped(Sm)
            mp, mm = (Sp == Scp).astype(float), (Sm == Scm).astype(float)
            f_p = np.einsum("fqx,fx->fq", self.flux.vec(Scp), n)
            f_m = np.einsum("fqx,fx->fq", self.flux.vec(Scm), n)
            df_p = np.einsum("fqx,fx->fq", self.flux.dvec(Scp), n) * mp
            df_m = np.einsum("fqx,fx->fq", self.flux.dvec(Scm), n) * mm
            hhat = 0.5 * (f_p + f_m) + 0.5 * diss * (Sp - Sm)
            pen = self.pen_int[:, None] * (Sp - Sm)
            for sgn, elems, basis in ((1.0, self.iep, self.ib_p), (-1.0, self.iem, self.ib_m)):
                rows = 3 * elems[:, None] + np.arange(3)[None, :]
                np.add.at(R, rows, sgn * np.einsum("fq,fqi->fi", w * (hhat + pen), basis))
            if want_jac:
                for sgn_t, elems_t, basis_t in ((1.0, self.iep, self.ib_p), (-1.0, self.iem, self.ib_m)):
                    rows = 3 * elems_t[:, None] + np.arange(3)[None, :]
                    for sgn_c, elems_c, basis_c, dfc in (
                        (1.0, self.iep, self.ib_p, df_p),
                        (-1.0, self.iem, self.ib_m, df_m),
                    ):
                        cols = 3 * elems_c[:, None] + np.arange(3)[None, :]
                        dh = 0.5 * dfc + sgn_c * 0.5 * diss + sgn_c * self.pen_int[:, None]
                        blk = sgn_t * np.einsum("fq,fqi,fqj->fij", w * dh, basis_t, basis_c)
                        coo.add_blocks(rows, cols, blk)

        # Dirichlet inflow: prescribed flux + penalty toward the data
        grp = self.bgroups["dirichlet"]
        if len(grp["faces"]):
            el, b, n, w = grp["owners"], grp["basis"], grp["normals"], grp["w"]
            Sq_b = self._trace(S_new, b, el)
            gs = self._bc_values(grp["faces"], "g_s", grp["pts"])
            f_b = np.einsum("fqx,fx->fq", self.flux.vec(self._clamped(gs)), n)
            pen = self.pen_dir[:, None]
            rows = 3 * el[:, None] + np.arange(3)[None, :]
            np.add.at(R, rows, np.einsum("fq,fqi->fi", w * (f_b + pen * (Sq_b - gs)), b))
            if want_jac:
                blk = np.einsum("fq,fqi,fqj->fij", w * pen, b, b)
                coo.add_blocks(rows, 3 * el[:, None] + np.arange(3)[None, :], blk)

        # outflow: flux evaluated with the unknown
        grp = self.bgroups["outflow"]
        if len(grp["faces"]):
            el, b, n, w = grp["owners"], grp["basis"], grp["normals"], grp["w"]
            Sq_b = self._trace(S_new, b, el)
            Sc_b = self._clamped(Sq_b)
            mask_b = (Sq_b == Sc_b).astype(float)
            f_b = np.einsum("fqx,fx->fq", self.flux.vec(Sc_b), n)
            rows = 3 * el[:, None] + np.arange(3)[None, :]
            np.add.at(R, rows, np.einsum("fq,fqi->fi", w * f_b, b))
            if want_jac:
                df_b = np.einsum("fqx,fx->fq", self.flux.dvec(Sc_b), n) * mask_b
                blk = np.einsum("fq,fqi,fqj->fij", w * df_b, b, b)
                coo.add_blocks(rows, 3 * el[:, None] + np.arange(3)[None, :], blk)

        if not np.all(np.isfinite(R)):
            raise AssemblyError("non-finite residual entry in scalar assembly")
        if not want_jac:
            return R, None
        return R, self._to_csc(coo)

    def _bc_values(self, faces, attr, pts):
        out = np.zeros(pts.shape[:2])
        tags = self.mesh.face_tag[faces]
        for tag in np.unique(tags):
            bc = self.bcs.lookup(self.mesh.tag_names[tag])
            sel = tags == tag
            out[sel] = _eval_data(getattr(bc, attr), pts[sel], 0.0)
        return out

    def face_flux(self, S_new, S_old, diss=None):
        """Flux functional H per face: centered + dissipation on interior
        faces, prescribed flux on Dirichlet, f(S).n on outflow, 0 on no-flow."""
        if diss is None:
            diss = self.dissipation(S_old)
        H = np.zeros(self.mesh.n_faces)
        if len(self.ifc):
            n, w = self.inrm, self.iw
            Sp = self._trace(S_new, self.ib_p, self.iep)
            Sm = self._trace(S_new, self.ib_m, self.iem)
            f_p = np.einsum("fqx,fx->fq", self.flux.vec(self._clamped(Sp)), n)
            f_m = np.einsum("fqx,fx->fq", self.flux.vec(self._clamped(Sm)), n)
            H[self.ifc] = np.einsum("fq->f", w * (0.5 * (f_p + f_m) + 0.5 * diss * (Sp - Sm)))
        grp = self.bgroups["dirichlet"]
        if len(grp["faces"]):
            n, w = grp["normals"], grp["w"]
            gs = self._bc_values(grp["faces"], "g_s", grp["pts"])
            f_b = np.einsum("fqx,fx->fq", self.flux.vec(self._clamped(gs)), n)
            H[grp["faces"]] = np.einsum("fq->f", w * f_b)
        grp = self.bgroups["outflow"]
        if len(grp["faces"]):
            el, b, n, w = grp["owners"], grp["basis"], grp["normals"], grp["w"]
            Sc_b = self._clamped(self._trace(S_new, b, el))
            f_b = np.einsum("fqx,fx->fq", self.flux.vec(Sc_b), n)
            H[grp["faces"]] = np.einsum("fq->f", w * f_b)
        return H

    def _to_csc(self, coo):
        rows = np.concatenate(coo.rows)
        cols = np.concatenate(coo.cols)
        vals = np.concatenate(coo.vals)
        n = self.ndof
        if self._csc_cache is None:
            order = np.lexsort((rows, cols))
            rs, cs = rows[order], cols[order]
            newgrp = np.ones(len(rs), dtype=bool)
            newgrp[1:] = (rs[1:] != rs[:-1]) | (cs[1:] != cs[:-1])
            starts = np.where(newgrp)[0]
            indices = rs[starts]
            colcount = np.zeros(n + 1, dtype=np.int64)
            np.add.at(colcount, cs[starts] + 1, 1)
            indptr = np.cumsum(colcount)
            self._csc_cache = (order, starts, indices, indptr, len(rows))
        order, starts, indices, indptr, nnz = self._csc_cache
        if len(vals) != nnz:
            raise AssemblyError("jacobian sparsity pattern changed between assemblies")
        data = np.add.reduceat(vals[order], starts)
        return sp.csc_matrix((data, indices, indptr), shape=(n, n))

    def pack(self, field):
        return field.coef.ravel().copy()

    def unpack(self, x):
        return DGField(self.mesh, x.reshape(self.ne, 3))


# ----------------------------------------------------------------------
# spec-level convenience wrappers (tests use these; the time loop holds the
# system object directly)

def residual_two_phase(state_np1, state_n, dt, model, bcs, wells=None, body_sources=None):
    sys_ = TwoPhaseSystem(state_np1.mesh, model, bcs, wells, body_sources)
    R, _ = sys_.assemble(state_np1, state_n, dt, want_jac=False)
    return R


def jacobian_two_phase(state_np1, state_n, dt, model, bcs, wells=None, body_sources=None):
    sys_ = TwoPhaseSystem(state_np1.mesh, model, bcs, wells, body_sources)
    _, J = sys_.assemble(state_np1, state_n, dt, want_jac=True)
    return J
