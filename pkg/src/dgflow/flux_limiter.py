"""Iterative flux limiting of cell averages (flux-corrected transport style).

Given the per-face mass fluxes H of the freshly solved saturation, the
operator rebuilds the cell averages from the previous-step averages by
applying each face flux only up to the fraction that keeps every element
average inside [s_lower, s_upper]:

    Step 1  split -H into inflow/outflow parts P+/P- per element
    Step 2  admissible headroom Q+/Q- from the bounds (wells enter at k=1)
    Step 3  per-face limiting factors alpha as min-of-ratios
    Step 4  update averages, deflate H by (1 - alpha)
    Step 5  stop when max|H| < eps1 or stagnation max|dH| < eps2 (k >= 2)

Interior antisymmetry of H is preserved because both sides share one alpha,
which also makes the operator conservative: only boundary faces and the k=1
well term change the total mass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class FluxLimiterError(RuntimeError):
    pass


class BoundsPreconditionError(FluxLimiterError):
    """Input averages already violate the bounds."""


@dataclass(frozen=True)
class LimiterBounds:
    lower: float
    upper: float

    def __post_init__(self):
        if not (0.0 <= self.lower <= self.upper <= 1.0):
            raise ValueError(f"need 0 <= lower <= upper <= 1, got [{self.lower}, {self.upper}]")


@dataclass
class LimiterReport:
    iterations: int = 0
    max_h_history: list = field(default_factory=list)
    terminated_by: str = ""
    cumulative_alpha: np.ndarray = None  # per face: fraction of H(0) applied
    applied_flux: np.ndarray = None  # per face: sum_k alpha_k H^(k-1)
    faces_limited: int = 0  # faces with cumulative alpha < 1 at exit


class FluxFunction:
    """Per-(element, face) signed mass flux, stored once per face.

    `values[f]` is the flux seen from the plus (owner) side; the minus-side
    view is the negation, so interior antisymmetry holds structurally.
    """

    def __init__(self, mesh, values):
        values = np.asarray(values, dtype=float)
        if values.shape != (mesh.n_faces,):
            raise ValueError("one value per face required")
        if not np.all(np.isfinite(values)):
            raise FluxLimiterError("non-finite flux function entry")
        self.mesh = mesh
        self.values = values

    def per_element(self):
        """Signed fluxes per (element, local face slot), zero padded."""
        m = self.mesh
        safe = np.clip(m.elem_faces, 0, None)
        return self.values[safe] * m.elem_face_sign

    def element_sum(self):
        return self.per_element().sum(axis=1)

    def view(self, elem, face):
        sl = np.where(self.mesh.elem_faces[elem] == face)[0]
        if len(sl) == 0:
            raise ValueError(f"face {face} not on element {elem}")
        return self.values[face] * self.mesh.elem_face_sign[elem, sl[0]]


def limit_averages(avg_n, flux, dt, porosity, bounds, wells=None, model=None,
                   eps1=1e-6, eps2=1e-6, max_iters=None):
    """Run the average-limiting iteration; returns (limited averages, report).

    avg_n: cell averages at the previous time level (must satisfy bounds).
    flux: FluxFunction built from the current Newton solution.
    wells/model: optional; the well source enters the update at k = 1 only.
    """
    mesh = flux.mesh
    avg = np.asarray(avg_n, dtype=float).copy()
    if not np.all(np.isfinite(avg)):
        raise FluxLimiterError("non-finite input averages")
    tol = 1e-12
    viol = (avg < bounds.lower - tol) | (avg > bounds.upper + tol)
    if np.any(viol):
        bad = np.where(viol)[0][:8]
        raise BoundsPreconditionError(
            f"input averages outside [{bounds.lower}, {bounds.upper}] on elements {bad.tolist()}"
        )

    phi = np.broadcast_to(np.asarray(porosity, dtype=float), (mesh.n_elements,))
    area = mesh.areas
    H = flux.values.copy()
    sign = mesh.elem_face_sign
    safe_faces = np.clip(mesh.elem_faces, 0, None)
    face_valid = mesh.elem_faces >= 0

    well_term = np.zeros(mesh.n_elements)
    if wells is not None and wells.active:
        if model is None:
            raise ValueError("well limiting needs the fluid model for f_w")
        fw_in = float(model.f_w(wells.s_in))

    applied = np.zeros_like(H)
    history = []
    report = LimiterReport()
    if max_iters is None:
        max_iters = max(10 * mesh.n_faces, 100)

    k = 0
    H_prev = None
    while True:
        k += 1
        if k > max_iters:
            raise FluxLimiterError(
                f"no convergence in {max_iters} iterations (max|H| = {np.abs(H).max():.3e}); "
                "this signals a defect, the deflation is provably convergent"
            )

        He = H[safe_faces] * sign * face_valid  # (Ne, 4) signed per element
        P_plus = dt * np.maximum(0.0, -He).sum(axis=1)
        P_minus = dt * np.minimum(0.0, -He).sum(axis=1)

        if wells is not None and wells.active and k == 1:
            well_term = fw_in * wells.qbar - np.asarray(model.f_w(np.clip(avg, 0.0, 1.0))) * wells.qunder
        gamma_well = well_term if k == 1 else 0.0
        Q_plus = area * (phi * bounds.upper - phi * avg - dt * gamma_well)
        Q_minus = area * (phi * bounds.lower - phi * avg - dt * gamma_well)

        # min(1, Q/P) with the 0/0 convention -> 1; clamp keeps alpha in [0, 1]
        # even when a large well source makes Q negative (outside the lemma)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio_plus = np.where(P_plus > 0, np.clip(Q_plus / np.where(P_plus > 0, P_plus, 1.0), 0.0, 1.0), 1.0)
            ratio_minus = np.where(P_minus < 0, np.clip(Q_minus / np.where(P_minus < 0, P_minus, 1.0), 0.0, 1.0), 1.0)

        ep, em = mesh.face_eplus, mesh.face_eminus
        interior = em >= 0
        alpha = np.ones(mesh.n_faces)
        # H < 0: inflow to E+, outflow from E-
        neg = H < 0
        pos = H > 0
        a_int = np.where(
            neg,
            np.minimum(ratio_plus[ep], np.where(interior, ratio_minus[np.clip(em, 0, None)], 1.0)),
            np.where(
                pos,
                np.minimum(ratio_minus[ep], np.where(interior, ratio_plus[np.clip(em, 0, None)], 1.0)),
                1.0,
            ),
        )
        alpha = a_int

        He_lim = (alpha * H)[safe_faces] * sign * face_valid
        avg = avg - (dt / (phi * area)) * He_lim.sum(axis=1)
        if k == 1 and wells is not None and wells.active:
            avg = avg + (dt / phi) * well_term

        applied += alpha * H
        H = (1.0 - alpha) * H
        history.append(float(np.abs(H).max()) if len(H) else 0.0)

        if history[-1] < eps1:
            report.terminated_by = "flux-tolerance"
            break
        if k >= 2 and float(np.abs(H - H_prev).max()) < eps2:
            report.terminated_by = "stagnation-tolerance"
            break
        H_prev = H.copy()

    report.iterations = k
    report.max_h_history = history
    report.applied_flux = applied
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = flux.values
        cum = np.where(denom != 0.0, applied / np.where(denom != 0.0, denom, 1.0), 1.0)
    report.cumulative_alpha = np.clip(cum, 0.0, 1.0)
    report.faces_limited = int(np.sum(report.cumulative_alpha < 1.0 - 1e-12))
    return avg, report


def apply_flux_limit(field_s, avg_limited):
    """Shift the field to the limited cell averages; gradients unchanged."""
    out = field_s.copy()
    out.coef[:, 0] = avg_limited
    return out


def limiter_report_csv_row(step, report):
    return f"{step},{report.iterations},{report.max_h_history[-1]:.6e},{report.faces_limited}"
