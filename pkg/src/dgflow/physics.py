"""Constitutive closures for incompressible two-phase flow.

Relative permeability laws:
    quartic_bl        k_rw = S^4,      k_rl = (1-S)^2 (1-S^2)       (raw S)
    brooks_corey_2_2  k_rw = s_e^2,    k_rl = (1-s_e)^2             (effective)
    brooks_corey_5    k_rw = s_e^5,    k_rl = (1-s_e)^2 (1-s_e^5)   (effective)
    user              arbitrary mobility callables (raw S)

The quartic law acts on the raw saturation; the Brooks-Corey laws act on the
effective saturation s_e = (S - s_rw) / (1 - s_rw - s_rl), clamped to [0, 1].
Capillary pressure follows the Brooks-Corey power law with a linearized tail
below the threshold R (value and slope continuous at R by construction).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

_DOMAIN_TOL = 1e-9

RELPERM_LAWS = ("quartic_bl", "brooks_corey_2_2", "brooks_corey_5", "user")


class SaturationDomainError(ValueError):
    """Saturation outside [-tol, 1+tol]; the limited scheme should prevent it."""


class DegenerateStateError(ValueError):
    """Total mobility vanished."""


@dataclass(frozen=True)
class CapillaryModel:
    """Brooks-Corey capillary pressure with linearized tail below R."""

    p_d: float  # entry pressure, Pa
    theta: float  # inhomogeneity parameter
    R: float  # linearization threshold

    def __post_init__(self):
        if self.p_d < 0 or self.theta <= 0 or not (0 <= self.R < 1):
            raise ValueError("require p_d >= 0, theta > 0, R in [0, 1)")

    def value(self, S):
        S = np.asarray(S, dtype=float)
        if self.R == 0 and np.any(S <= 0):
            raise ValueError("capillary pressure singular at S <= 0 with R = 0")
        e = -1.0 / self.theta
        upper = self.p_d * np.maximum(S, self.R if self.R > 0 else np.finfo(float).tiny) ** e
        lower = self.p_d * self.R ** e - (self.p_d / self.theta) * self.R ** (e - 1.0) * (S - self.R)
        return np.where(S > self.R, upper, lower)

    def derivative(self, S):
        """dP_c/dS; at S = R exactly, the linear-branch slope is used."""
        S = np.asarray(S, dtype=float)
        e = -1.0 / self.theta
        slope_lin = -(self.p_d / self.theta) * self.R ** (e - 1.0) if self.R > 0 else np.nan
        Ssafe = np.maximum(S, np.finfo(float).tiny)
        slope_pow = -(self.p_d / self.theta) * Ssafe ** (e - 1.0)
        if self.R == 0:
            if np.any(S <= 0):
                raise ValueError("capillary derivative singular at S <= 0 with R = 0")
            return slope_pow
        return np.where(S > self.R, slope_pow, slope_lin)

    def second_derivative(self, S):
        S = np.asarray(S, dtype=float)
        e = -1.0 / self.theta
        Ssafe = np.maximum(S, np.finfo(float).tiny)
        curv = (self.p_d / self.theta) * (1.0 / self.theta + 1.0) * Ssafe ** (e - 2.0)
        if self.R == 0:
            return curv
        return np.where(S > self.R, curv, 0.0)


@dataclass(frozen=True)
class FluidModel:
    """Fluid/rock data shared by assembly, limiters and diagnostics."""

    mu_w: float = 1.0e-3  # Pa s
    mu_l: float = 1.0e-2
    rho_w: float = 1000.0  # kg/m^3
    rho_l: float = 850.0
    s_rw: float = 0.2
    s_rl: float = 0.15
    porosity: object = 0.2  # scalar or per-element array
    permeability: object = 1e-8  # m^2, scalar or per-element array
    gravity: tuple = (0.0, 0.0)  # m/s^2 vector
    relperm_law: str = "quartic_bl"
    capillary: Optional[CapillaryModel] = None
    # user law: mobilities and their derivatives as functions of raw S
    user_lambda_w: Optional[Callable] = None
    user_lambda_l: Optional[Callable] = None
    user_dlambda_w: Optional[Callable] = None
    user_dlambda_l: Optional[Callable] = None

    def __post_init__(self):
        if self.mu_w <= 0 or self.mu_l <= 0:
            raise ValueError("viscosities must be positive")
        if not (0 <= self.s_rw and 0 <= self.s_rl and self.s_rw + self.s_rl < 1):
            raise ValueError("require 0 <= s_rw, s_rl and s_rw + s_rl < 1")
        phi = np.asarray(self.porosity, dtype=float)
        if np.any(phi <= 0) or np.any(phi > 1):
            raise ValueError("porosity must lie in (0, 1]")
        if np.any(np.asarray(self.permeability, dtype=float) <= 0):
            raise ValueError("permeability must be positive")
        if self.relperm_law not in RELPERM_LAWS:
            raise ValueError(f"unknown relperm law {self.relperm_law!r}")
        if self.relperm_law == "user" and (self.user_lambda_w is None or self.user_lambda_l is None):
            raise ValueError("user law requires mobility callables")

    # -- bounds ---------------------------------------------------------
    @property
    def s_lower(self):
        return self.s_rw

    @property
    def s_upper(self):
        return 1.0 - self.s_rl

    def porosity_of(self, elems):
        phi = np.asarray(self.porosity, dtype=float)
        return phi if phi.ndim == 0 else phi[elems]

    def permeability_of(self, elems):
        K = np.asarray(self.permeability, dtype=float)
        return K if K.ndim == 0 else K[elems]

    # -- closures -------------------------------------------------------
    def mobilities(self, S, derivatives=False):
        """(lambda_w, lambda_l [, dlambda_w, dlambda_l]) at raw saturation S."""
        S = np.asarray(S, dtype=float)
        if self.relperm_law == "user":
            lw = np.asarray(self.user_lambda_w(S), dtype=float)
            ll = np.asarray(self.user_lambda_l(S), dtype=float)
            if not derivatives:
                return lw, ll
            if self.user_dlambda_w is None or self.user_dlambda_l is None:
                raise ValueError("user law lacks mobility derivatives")
            return lw, ll, np.asarray(self.user_dlambda_w(S), dtype=float), np.asarray(self.user_dlambda_l(S), dtype=float)

        krw, krl, dkrw, dkrl = _relperm_with_derivative(S, self.relperm_law, self.s_rw, self.s_rl)
        lw, ll = krw / self.mu_w, krl / self.mu_l
        if not derivatives:
            return lw, ll
        return lw, ll, dkrw / self.mu_w, dkrl / self.mu_l

    def clamped(self, S):
        """Saturation clipped so closures stay in their monotone range.

        Assembly evaluates closures on this value; the raw field (which the
        unlimited scheme may push outside the physical range) is untouched.
        """
        eps = 1e-12
        if self.relperm_law in ("brooks_corey_2_2", "brooks_corey_5"):
            width = 1.0 - self.s_rw - self.s_rl
            return np.clip(S, self.s_rw + eps * width, 1.0 - self.s_rl - eps * width)
        return np.clip(S, eps, 1.0 - eps)

    def fractional_flow(self, S):
        """(f_w, f_l) with f_w + f_l = 1 exactly."""
        lw, ll = self.mobilities(S)
        tot = lw + ll
        if np.any(tot == 0):
            raise DegenerateStateError("total mobility is zero")
        fw = lw / tot
        return fw, 1.0 - fw

    def f_w(self, S):
        return self.fractional_flow(S)[0]

    def pc(self, S):
        if self.capillary is None:
            return np.zeros_like(np.asarray(S, dtype=float))
        return self.capillary.value(S)

    def dpc(self, S):
        if self.capillary is None:
            return np.zeros_like(np.asarray(S, dtype=float))
        return self.capillary.derivative(S)

    def d2pc(self, S):
        if self.capillary is None:
            return np.zeros_like(np.asarray(S, dtype=float))
        return self.capillary.second_derivative(S)


# ----------------------------------------------------------------------
# free functions (the bare operations; assembly goes through FluidModel)

def effective_saturation(S, s_rw, s_rl):
    """Affine map to [0, 1] on [s_rw, 1 - s_rl]; no clamping here."""
    if s_rw + s_rl >= 1:
        raise ValueError("s_rw + s_rl must be < 1")
    return (np.asarray(S, dtype=float) - s_rw) / (1.0 - s_rw - s_rl)


def relperm(S, law, s_rw=0.0, s_rl=0.0):
    """(k_rw, k_rl) for a built-in law; raises outside [-1e-9, 1+1e-9]."""
    S = np.asarray(S, dtype=float)
    if np.any(S < -_DOMAIN_TOL) or np.any(S > 1.0 + _DOMAIN_TOL):
        bad = S[(S < -_DOMAIN_TOL) | (S > 1.0 + _DOMAIN_TOL)]
        raise SaturationDomainError(f"saturation outside [0, 1]: {np.ravel(bad)[:4]}")
    krw, krl, _, _ = _relperm_with_derivative(S, law, s_rw, s_rl)
    return krw, krl


def _relperm_with_derivative(S, law, s_rw, s_rl):
    S = np.asarray(S, dtype=float)
    if law == "quartic_bl":
        krw = S**4
        krl = (1.0 - S) ** 2 * (1.0 - S**2)
        dkrw = 4.0 * S**3
        dkrl = -2.0 * (1.0 - S) * (1.0 - S**2) - 2.0 * S * (1.0 - S) ** 2
        return krw, krl, dkrw, dkrl
    width = 1.0 - s_rw - s_rl
    se = np.clip((S - s_rw) / width, 0.0, 1.0)
    dse = np.where((S > s_rw) & (S < 1.0 - s_rl), 1.0 / width, 0.0)
    if law == "brooks_corey_2_2":
        krw = se**2
        krl = (1.0 - se) ** 2
        dkrw = 2.0 * se * dse
        dkrl = -2.0 * (1.0 - se) * dse
        return krw, krl, dkrw, dkrl
    if law == "brooks_corey_5":
        krw = se**5
        krl = (1.0 - se) ** 2 * (1.0 - se**5)
        dkrw = 5.0 * se**4 * dse
        dkrl = (-2.0 * (1.0 - se) * (1.0 - se**5) - 5.0 * se**4 * (1.0 - se) ** 2) * dse
        return krw, krl, dkrw, dkrl
    raise ValueError(f"unknown relperm law {law!r}")


def mobility(S, model):
    return model.mobilities(S)


def fractional_flow(S, model):
    return model.fractional_flow(S)


def capillary_pressure(S, cap):
    return cap.value(S)


def capillary_derivative(S, cap):
    return cap.derivative(S)


def gravity_number(K, delta_rho, g, mu_w, U):
    """Ratio of gravitational to viscous forces, K*drho*g / (mu_w*U)."""
    if U <= 0:
        raise ValueError("characteristic velocity U must be positive")
    return K * delta_rho * g / (mu_w * U)


def load_permeability(text, n_elements):
    """Per-element permeability from ASCII lines 'element_id K_value' (m^2)."""
    K = np.full(n_elements, np.nan)
    for lno, ln in enumerate(text.splitlines(), start=1):
        ln = ln.strip()
        if not ln or ln.startswith("#"):
            continue
        parts = ln.split()
        if len(parts) != 2:
            raise ValueError(f"line {lno}: expected 'element_id K_value', got {ln!r}")
        e, val = int(parts[0]), float(parts[1])
        if not 0 <= e < n_elements:
            raise ValueError(f"line {lno}: element id {e} out of range")
        if val <= 0:
            raise ValueError(f"line {lno}: permeability must be positive")
        K[e] = val
    if np.any(np.isnan(K)):
        missing = int(np.where(np.isnan(K))[0][0])
        raise ValueError(f"no permeability given for element {missing}")
    return K
