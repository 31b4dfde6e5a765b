"""Local sensitivity of the longitudinal estimates to non-ignorable dropout.

At the MAR solution the mass matrix has rank one, i.e. the interaction
contrasts ``lambda[g, l] = xi[g, l] - xi[g, K2] - xi[K1, l]`` of the cell
logits vanish.  The index of sensitivity to non-ignorability (ISNI) is the
derivative of the longitudinal estimates ``Phi = (beta, zeta1, sigma_y)``
with respect to ``lambda`` at ``lambda = 0``:

    ISNI = -(d2 l / dPhi dPhi')^{-1} d2 l / dPhi dlambda'

with the dropout parameters and marginal mass logits held at their MAR
values (or, with ``profile=True``, re-optimised to first order as well).

Two perturbation scenarios map random ``lambda`` through the linear
approximation ``Phi(lambda) ~ Phi(0) + ISNI lambda``: i.i.d. uniform
contrasts (scenario 1) and uniform rescalings of an MNAR estimate of
``lambda`` (scenario 2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import PanelDataset
from .derivatives import derivatives
from .em import FitResult
from .inference import CovarianceEstimate, sandwich_covariance
from .model import ParamLayout, Theta, masses_to_logits, mixing_moments

__all__ = [
    "IsniResult",
    "ScenarioResult",
    "isni_matrix",
    "isni_summaries",
    "cross_derivative_fd",
    "refit_longitudinal",
    "lambda_from_fit",
    "scenario1",
    "scenario2",
    "SingularHessianError",
]

Z95 = 1.959963984540054


class SingularHessianError(np.linalg.LinAlgError):
    """The longitudinal block of the Hessian is singular at the MAR fit."""


def _phi_names(dataset: PanelDataset, K1: int) -> list[str]:
    return list(dataset.x_names) + [f"zeta1[{g + 1}]" for g in range(K1)] + ["sigma_y"]


@dataclass
class IsniResult:
    """ISNI matrix and MAR standard errors for ``Phi``.

    Rows follow the free-vector order ``beta, zeta1, sigma_y``; the scale row
    is on the natural ``sigma_y`` scale (both the ISNI row and the SE are the
    log-scale values times ``sigma_y``, so their ratio is unchanged).
    Columns are the ``(K1-1)(K2-1)`` interaction contrasts in row-major
    ``(g, l)`` order.
    """

    isni: np.ndarray
    se_mar: np.ndarray
    phi_hat: np.ndarray
    names: list
    lambda_cells: list
    theta: Theta
    profiled: bool = False
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_lambda(self) -> int:
        return self.isni.shape[1]

    def summaries(self) -> pd.DataFrame:
        return isni_summaries(self)

    def to_dict(self) -> dict:
        return {
            "isni": self.isni.tolist(),
            "se_mar": self.se_mar.tolist(),
            "phi_hat": self.phi_hat.tolist(),
            "names": list(self.names),
            "lambda_cells": [list(c) for c in self.lambda_cells],
            "theta": self.theta.to_dict(),
            "profiled": self.profiled,
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IsniResult":
        m = len(d["lambda_cells"])
        isni = np.array(d["isni"], dtype=float).reshape(len(d["names"]), m)
        return cls(isni, np.array(d["se_mar"], dtype=float), np.array(d["phi_hat"], dtype=float),
                   list(d["names"]), [tuple(c) for c in d["lambda_cells"]],
                   Theta.from_dict(d["theta"]), d.get("profiled", False), d.get("diagnostics", {}))


def cross_derivative_fd(dataset: PanelDataset, theta: Theta, step: float = 1e-5) -> np.ndarray:
    """Central-difference ``d2 l / dPhi dlambda`` from the analytic Phi-score."""
    lay = ParamLayout.for_dataset(dataset, theta.K1, theta.K2, "isni")
    x0 = lay.pack(theta)
    ls = lay.lambda_slice
    out = np.zeros((lay.n_phi, ls.stop - ls.start))
    for k, j in enumerate(range(ls.start, ls.stop)):
        e = np.zeros(lay.size)
        e[j] = step
        sp = derivatives(dataset, lay.unpack(x0 + e), "isni", hessian=False).score[lay.phi]
        sm = derivatives(dataset, lay.unpack(x0 - e), "isni", hessian=False).score[lay.phi]
        out[:, k] = (sp - sm) / (2.0 * step)
    return out


def _isni_free(dataset: PanelDataset, theta: Theta, profile: bool):
    lay = ParamLayout.for_dataset(dataset, theta.K1, theta.K2, "isni")
    ls = lay.lambda_slice
    m = ls.stop - ls.start
    if m == 0:
        return np.zeros((lay.n_phi, 0)), lay, None
    H = derivatives(dataset, theta, "isni").hessian
    rest = np.r_[0:ls.start, ls.stop:lay.size] if profile else np.arange(lay.n_phi)
    A = H[np.ix_(rest, rest)]
    C = H[rest, ls]
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e13:
        raise SingularHessianError("Hessian block is singular at the MAR fit")
    sol = -np.linalg.solve(A, C)
    return sol[:lay.n_phi], lay, H


def isni_matrix(dataset: PanelDataset, mar_fit: FitResult, cov: CovarianceEstimate | None = None,
                profile: bool = False, check_fd: bool = True, fd_step: float = 1e-5) -> IsniResult:
    """ISNI of ``Phi`` with respect to the interaction contrasts at the MAR fit.

    Parameters
    ----------
    mar_fit
        A rank-one fit (``mode="MAR"``).  Its masses define the marginal
        logits that stay fixed.
    cov
        MAR covariance used for the standard errors; computed if omitted.
    profile
        If true, the dropout parameters and marginal logits respond to
        ``lambda`` as well (full-Hessian solve) instead of being frozen.
    check_fd
        Record the discrepancy between the analytic cross derivative and a
        central finite difference in ``diagnostics["fd_rel_error"]``.
    """
    if mar_fit.basis != "mar":
        raise ValueError("ISNI is evaluated at a MAR (rank-one) fit")
    theta = mar_fit.theta
    isni, lay, H = _isni_free(dataset, theta, profile)
    if cov is None:
        cov = mar_fit.covariance if mar_fit.covariance is not None else sandwich_covariance(dataset, mar_fit)
    se = cov.se[:lay.n_phi].copy()
    sig = theta.sigma_y
    isni = isni.copy()
    isni[lay.log_sigma] *= sig
    se[lay.log_sigma] *= sig
    phi_hat = np.concatenate([theta.beta, theta.zeta1, [sig]])
    diag = {"converged": bool(mar_fit.converged)}
    if check_fd and H is not None:
        fd = cross_derivative_fd(dataset, theta, fd_step)
        an = H[lay.phi, lay.lambda_slice]
        denom = max(np.max(np.abs(an)), 1e-300)
        diag["fd_rel_error"] = float(np.max(np.abs(fd - an)) / denom)
    return IsniResult(isni, se, phi_hat, _phi_names(dataset, theta.K1), lay.lambda_cells,
                      theta, profile, diag)


def isni_summaries(res: IsniResult) -> pd.DataFrame:
    """Per-parameter norm / min / max of ``|ISNI|`` and their ratios to the SE.

    Rows are ordered ``zeta1[1..K1]``, covariates, ``sigma_y``.  A zero or
    missing SE gives infinite ratios and ``se_flag=True``.
    """
    a = np.abs(res.isni)
    if res.n_lambda:
        norm, lo, hi = np.linalg.norm(a, axis=1), a.min(axis=1), a.max(axis=1)
    else:
        norm = lo = hi = np.zeros(a.shape[0])
    se = res.se_mar
    bad = ~(se > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        def ratio(v):
            return np.where(bad, np.where(v == 0, np.nan, np.inf), v / np.where(bad, 1.0, se))
        df = pd.DataFrame({
            "variable": res.names, "se": se,
            "isni_norm": norm, "norm_over_se": ratio(norm),
            "isni_min": lo, "min_over_se": ratio(lo),
            "isni_max": hi, "max_over_se": ratio(hi),
            "se_flag": bad,
        })
    p = len(res.names) - len(res.theta.zeta1) - 1
    order = list(range(p, len(res.names) - 1)) + list(range(p)) + [len(res.names) - 1]
    return df.iloc[order].reset_index(drop=True)


def refit_longitudinal(dataset: PanelDataset, mar_theta: Theta, lam, max_iter: int = 100,
                       tol: float = 1e-10) -> np.ndarray:
    """Maximise the MNAR likelihood over ``Phi`` at fixed ``lambda``.

    The dropout parameters and marginal logits stay at their MAR values and
    the cell logits are ``alpha_row + alpha_col + lambda``.  Newton-Raphson
    on ``Phi`` with step halving, started from the MAR estimate.  Returns
    ``Phi`` in the same scale as :class:`IsniResult` rows.
    """
    lay = ParamLayout.for_dataset(dataset, mar_theta.K1, mar_theta.K2, "isni")
    x = lay.pack(mar_theta)
    x[lay.lambda_slice] = np.asarray(lam, dtype=float).ravel()
    ph = lay.phi
    d = derivatives(dataset, lay.unpack(x), "isni")
    for _ in range(max_iter):
        g = d.score[ph]
        if np.max(np.abs(g)) < tol:
            break
        step = -np.linalg.solve(d.hessian[ph, ph], g)
        t = 1.0
        while True:
            xn = x.copy()
            xn[ph] += t * step
            dn = derivatives(dataset, lay.unpack(xn), "isni")
            if dn.loglik >= d.loglik or t < 1e-8:
                break
            t *= 0.5
        if dn.loglik < d.loglik:
            break
        x, d = xn, dn
    th = lay.unpack(x)
    return np.concatenate([th.beta, th.zeta1, [th.sigma_y]])


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


@dataclass
class ScenarioResult:
    scenario: int
    B: int
    lambda_draws: np.ndarray      # (B, m)
    phi_approx: np.ndarray        # (B, D)
    coverage: np.ndarray          # (D,)
    names: list
    lo: float
    hi: float
    seed: int
    c_draws: np.ndarray | None = None
    rho12: np.ndarray | None = None
    overflow: np.ndarray | None = None

    def draws_frame(self) -> pd.DataFrame:
        """One row per draw: index, scale or contrasts, ``Phi`` values, rho12."""
        df = pd.DataFrame({"draw": np.arange(1, self.B + 1)})
        if self.scenario == 2:
            df["c"] = self.c_draws
        for k in range(self.lambda_draws.shape[1]):
            df[f"lambda_{k + 1}"] = self.lambda_draws[:, k]
        for j, name in enumerate(self.names):
            df[name] = self.phi_approx[:, j]
        if self.scenario == 2:
            df["rho12"] = self.rho12
            df["overflow"] = self.overflow
        return df

    def coverage_dict(self) -> dict:
        out = {"scenario": self.scenario, "B": self.B, "range": [self.lo, self.hi],
               "seed": self.seed,
               "coverage": {n: float(c) for n, c in zip(self.names, self.coverage)}}
        if self.overflow is not None:
            out["overflow_draws"] = int(np.sum(self.overflow))
        return out


def _coverage(phi_approx, phi_hat, se):
    half = Z95 * se
    return np.mean(np.abs(phi_approx - phi_hat[None, :]) <= half[None, :], axis=0)


def _check_range(B, lo, hi):
    if B < 1:
        raise ValueError("B must be at least 1")
    if not lo < hi:
        raise ValueError("range must satisfy lo < hi")


def scenario1(isni_result: IsniResult, B: int = 1000, lo: float = -3.0, hi: float = 3.0,
              seed: int = 0) -> ScenarioResult:
    """Independent uniform contrasts ``lambda[g, l] ~ U(lo, hi)``.

    Coverage is the fraction of draws whose approximate estimate stays in
    the MAR 95% interval ``Phi(0) +/- 1.96 se``.
    """
    _check_range(B, lo, hi)
    r = isni_result
    rng = np.random.default_rng(seed)
    lam = rng.uniform(lo, hi, size=(B, r.n_lambda))
    phi = r.phi_hat[None, :] + lam @ r.isni.T
    return ScenarioResult(1, B, lam, phi, _coverage(phi, r.phi_hat, r.se_mar), list(r.names),
                          lo, hi, seed)


def lambda_from_fit(fit: FitResult | Theta) -> np.ndarray:
    """Interaction contrasts of a fitted mass matrix, row-major."""
    theta = fit.theta if isinstance(fit, FitResult) else fit
    return masses_to_logits(theta.Pi).lambda_.ravel()


def _softmax_flagged(xi_full: np.ndarray):
    m = xi_full.max()
    e = np.exp(xi_full - m)
    return e / e.sum(), bool(np.max(np.abs(xi_full)) > 700)


def scenario2(isni_result: IsniResult, lambda_hat, B: int = 1000, lo: float = -3.0,
              hi: float = 3.0, seed: int = 0) -> ScenarioResult:
    """Rescaled MNAR contrasts ``lambda(b) = c(b) lambda_hat`` with ``c ~ U(lo, hi)``.

    Also reports, per draw, the correlation of the mixing distribution implied
    by the cell logits ``xi(0) + c(b) lambda_hat`` (MAR locations, stable
    softmax; draws with ``|xi| > 700`` are flagged in ``overflow``).
    """
    _check_range(B, lo, hi)
    r = isni_result
    lam_hat = np.asarray(lambda_hat, dtype=float).ravel()
    if lam_hat.size != r.n_lambda:
        raise ValueError(f"lambda_hat has {lam_hat.size} entries, expected {r.n_lambda}")
    rng = np.random.default_rng(seed)
    c = rng.uniform(lo, hi, size=B)
    lam = c[:, None] * lam_hat[None, :]
    phi = r.phi_hat[None, :] + lam @ r.isni.T
    th = r.theta
    K1, K2 = th.K1, th.K2
    with np.errstate(divide="ignore"):
        logP = np.log(th.Pi)
    xi0 = logP - logP[-1, -1]
    L = np.zeros((K1, K2))
    if r.n_lambda:
        L[:K1 - 1, :K2 - 1] = lam_hat.reshape(K1 - 1, K2 - 1)
    rho = np.empty(B)
    over = np.zeros(B, dtype=bool)
    for b in range(B):
        P, over[b] = _softmax_flagged(xi0 + c[b] * L)
        rho[b] = mixing_moments(th.zeta1, th.zeta2, P).rho12
    return ScenarioResult(2, B, lam, phi, _coverage(phi, r.phi_hat, r.se_mar), list(r.names),
                          lo, hi, seed, c_draws=c, rho12=rho, overflow=over)
