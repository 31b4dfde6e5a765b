"""Observed information, sandwich covariance and coefficient tables.

Derivatives are taken in the free parameterisation (``log sigma_y`` and mass
logits).  The observed information uses Oakes' decomposition into the
complete-data information and the derivative of the posterior weights, both
available in closed form (see :mod:`bidimix.derivatives`).  Natural-scale
quantities (``sigma_y``, the masses and the moments of the mixing
distribution) get delta-method standard errors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .data import PanelDataset
from .derivatives import derivatives
from .em import FitResult
from .model import ParamLayout, Theta, mixing_moments, mixing_moments_jacobian

__all__ = [
    "CovarianceEstimate",
    "SingularInformationWarning",
    "subject_scores",
    "observed_information",
    "sandwich_covariance",
    "mass_jacobian_pi",
    "moments_with_se",
    "se_table",
    "mass_table",
]


class SingularInformationWarning(RuntimeWarning):
    """Observed information is singular; a pseudo-inverse was used."""


def subject_scores(dataset: PanelDataset, theta: Theta, basis: str = "mnar") -> np.ndarray:
    """Per-subject gradients of the observed log-likelihood, shape ``(n, D)``."""
    return derivatives(dataset, theta, basis, hessian=False).scores


def observed_information(dataset: PanelDataset, theta: Theta, basis: str = "mnar",
                         parts: bool = False):
    """Observed information ``-d2 l / d theta2`` via Oakes' identity.

    With ``parts=True`` returns ``(info, complete_info, weight_correction)``
    where ``info = complete_info - weight_correction``.
    """
    d = derivatives(dataset, theta, basis)
    info = -(d.complete_hessian + d.weight_term)
    info = 0.5 * (info + info.T)
    if parts:
        return info, -d.complete_hessian, d.weight_term
    return info


@dataclass
class CovarianceEstimate:
    info_observed: np.ndarray
    score_outer: np.ndarray
    sandwich: np.ndarray
    param_names: list
    basis: str
    singular: bool = False
    unreliable: np.ndarray | None = None
    score_sum: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def se(self) -> np.ndarray:
        d = np.diag(self.sandwich)
        return np.sqrt(np.where(d >= 0, d, np.nan))

    @property
    def model_based(self) -> np.ndarray:
        """Inverse observed information (no sandwich)."""
        return _inverse(self.info_observed)[0]

    def to_dict(self) -> dict:
        return {
            "basis": self.basis,
            "param_names": list(self.param_names),
            "info_observed": self.info_observed.tolist(),
            "score_outer": self.score_outer.tolist(),
            "sandwich": self.sandwich.tolist(),
            "se": [None if not np.isfinite(x) else float(x) for x in self.se],
            "singular": self.singular,
            "unreliable": [] if self.unreliable is None else
            [self.param_names[k] for k in np.flatnonzero(self.unreliable)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CovarianceEstimate":
        names = list(d["param_names"])
        unrel = np.array([n in set(d.get("unreliable", [])) for n in names])
        return cls(np.array(d["info_observed"]), np.array(d["score_outer"]),
                   np.array(d["sandwich"]), names, d["basis"], d.get("singular", False), unrel)


def _inverse(M: np.ndarray) -> tuple[np.ndarray, bool]:
    """Inverse of a symmetric matrix; pseudo-inverse when (numerically) singular."""
    scale = np.sqrt(np.abs(np.diag(M)))
    scale[scale == 0] = 1.0
    Ms = M / np.outer(scale, scale)
    if np.linalg.cond(Ms) < 1e12:
        return np.linalg.inv(Ms) / np.outer(scale, scale), False
    return np.linalg.pinv(Ms, rcond=1e-12, hermitian=True) / np.outer(scale, scale), True


def sandwich_covariance(dataset: PanelDataset, fit: FitResult | Theta,
                        basis: str | None = None) -> CovarianceEstimate:
    """Sandwich covariance ``I^-1 (sum_i S_i S_i') I^-1`` in the free basis.

    ``basis`` defaults to ``"mar"`` for rank-one fits and ``"mnar"``
    otherwise.  A singular information matrix is pseudo-inverted with a
    :class:`SingularInformationWarning`; coordinates with a negative sandwich
    variance, or lying in the null space, are flagged in ``unreliable``.
    """
    theta = fit.theta if isinstance(fit, FitResult) else fit
    if basis is None:
        basis = fit.basis if isinstance(fit, FitResult) else "mnar"
    d = derivatives(dataset, theta, basis)
    info = -(d.complete_hessian + d.weight_term)
    info = 0.5 * (info + info.T)
    B = d.scores.T @ d.scores
    Iinv, singular = _inverse(info)
    if singular:
        warnings.warn("observed information is singular; using a pseudo-inverse",
                      SingularInformationWarning, stacklevel=2)
    V = Iinv @ B @ Iinv
    V = 0.5 * (V + V.T)
    unreliable = np.diag(V) < 0
    if singular:
        w, U = np.linalg.eigh(info)
        null = U[:, np.abs(w) < 1e-10 * np.max(np.abs(w))]
        unreliable |= np.any(np.abs(null) > 1e-6, axis=1)
    cov = CovarianceEstimate(info, B, V, d.layout.names(), basis, singular, unreliable,
                             d.score)
    if isinstance(fit, FitResult):
        fit.covariance = cov
    return cov


# ---------------------------------------------------------------------------
# Delta method
# ---------------------------------------------------------------------------


def mass_jacobian_pi(theta: Theta, layout: ParamLayout) -> np.ndarray:
    """d vec(Pi) / d mass parameters of ``layout``, shape ``(K1*K2, n_mass)``."""
    pi = theta.Pi.ravel()
    C = pi.size
    dpi_dxi = (np.diag(pi) - np.outer(pi, pi))[:, :C - 1]
    return dpi_dxi @ layout.mass_jacobian()


def _moment_gradients(theta: Theta, layout: ParamLayout) -> np.ndarray:
    """d(moments)/d(free parameters), shape ``(6, D)``."""
    K1, K2 = theta.K1, theta.K2
    Jm = mixing_moments_jacobian(theta.zeta1, theta.zeta2, theta.Pi)
    G = np.zeros((6, layout.size))
    G[:, layout.zeta1] = Jm[:, :K1]
    G[:, layout.zeta2] = Jm[:, K1:K1 + K2]
    G[:, layout.mass] = Jm[:, K1 + K2:] @ mass_jacobian_pi(theta, layout)
    return G


def _delta_se(G: np.ndarray, V: np.ndarray) -> np.ndarray:
    v = np.einsum("kd,de,ke->k", G, V, G)
    return np.sqrt(np.where(v >= 0, v, np.nan))


def moments_with_se(theta: Theta, cov: CovarianceEstimate, layout: ParamLayout) -> pd.DataFrame:
    """Mixing-distribution moments with delta-method standard errors."""
    mm = mixing_moments(theta)
    se = _delta_se(_moment_gradients(theta, layout), cov.sandwich)
    return pd.DataFrame({"quantity": list(mm._fields), "estimate": list(mm), "std_err": se})


def se_table(dataset: PanelDataset, fit: FitResult, cov: CovarianceEstimate | None = None) -> pd.DataFrame:
    """Coefficient / standard-error table in the two-process layout.

    Rows per process: ``Intercept`` (the mean of the mixing distribution of
    that margin, reported without a standard error), one row per covariate,
    then the scale rows (``sigma_y`` and ``sigma_b1`` for Y, ``sigma_b2``
    for R, plus ``sigma_b1b2`` and ``rho_b1b2`` for full mass matrices),
    followed by ``logL`` and ``BIC``.  Covariate standard errors are sandwich
    SEs; scale rows use the delta method.
    """
    if cov is None:
        cov = fit.covariance if fit.covariance is not None else sandwich_covariance(dataset, fit)
    theta = fit.theta
    lay = ParamLayout.for_dataset(dataset, theta.K1, theta.K2, cov.basis)
    V = cov.sandwich
    se = cov.se
    mm = mixing_moments(theta)
    G = _moment_gradients(theta, lay)
    mse = _delta_se(G, V)
    g_sig = np.zeros(lay.size)
    g_sig[lay.log_sigma] = theta.sigma_y
    sig_se = float(_delta_se(g_sig[None], V)[0])

    rows = [("Y", "Intercept", mm.mean1, np.nan)]
    for j, name in enumerate(dataset.x_names):
        rows.append(("Y", name, theta.beta[j], se[lay.beta][j]))
    rows.append(("Y", "sigma_y", theta.sigma_y, sig_se))
    rows.append(("Y", "sigma_b1", mm.sd1, mse[1]))
    rows.append(("R", "Intercept", mm.mean2, np.nan))
    for j, name in enumerate(dataset.v_names):
        rows.append(("R", name, theta.gamma[j], se[lay.gamma][j]))
    rows.append(("R", "sigma_b2", mm.sd2, mse[3]))
    if fit.basis == "mnar":
        rows.append(("R", "sigma_b1b2", mm.cov12, mse[4]))
        rows.append(("R", "rho_b1b2", mm.rho12, mse[5]))
    rows.append(("", "logL", fit.loglik, np.nan))
    rows.append(("", "BIC", fit.bic, np.nan))
    return pd.DataFrame(rows, columns=["process", "variable", "coeff", "std_err"])


def mass_table(theta: Theta) -> pd.DataFrame:
    """Locations with the conditional distribution of ``zeta2`` given ``zeta1``.

    The first row (label ``zeta1_g``) lists the dropout locations.  Then one
    row per longitudinal location carrying ``Pr(zeta2[l] | zeta1[g])`` and a
    row total of one, and a ``Tot.`` row with the marginal dropout masses.
    """
    a = theta.row_masses
    with np.errstate(invalid="ignore", divide="ignore"):
        cond = np.where(a[:, None] > 0, theta.Pi / a[:, None], np.nan)
    cols = [f"zeta2[{l + 1}]" for l in range(theta.K2)]
    rows = [["zeta1_g", *theta.zeta2, np.nan]]
    for g in range(theta.K1):
        rows.append([f"{theta.zeta1[g]:.17g}", *cond[g], float(np.nansum(cond[g]))])
    rows.append(["Tot.", *theta.col_masses, 1.0])
    return pd.DataFrame(rows, columns=["zeta1", *cols, "total"])
