"""Parameter space and likelihood of the bi-dimensional finite mixture.

Each subject carries a pair of discrete random intercepts: a longitudinal
location ``zeta1[g]`` (``g < K1``) and a dropout location ``zeta2[l]``
(``l < K2``), drawn jointly with probability ``Pi[g, l]``.  Given the pair,
responses are Gaussian with mean ``zeta1[g] + x'beta`` and the dropout
indicators are Bernoulli with logit ``zeta2[l] + v'gamma``.

The free parameterisation used for optimisation and derivatives is::

    [beta (p), zeta1 (K1), log sigma_y, gamma (q), zeta2 (K2), masses...]

where the mass block depends on the basis (see :class:`ParamLayout`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .data import PanelDataset, SubjectRecord

__all__ = [
    "Theta",
    "MassLogits",
    "ParamLayout",
    "MixingMoments",
    "DunsonResult",
    "SCHEMA_VERSION",
    "loglik_longitudinal_component",
    "loglik_dropout_component",
    "component_logliks",
    "longitudinal_residual_sums",
    "joint_log_terms",
    "subject_logliks",
    "observed_loglik",
    "masses_to_logits",
    "logits_to_masses",
    "pi_to_xi",
    "xi_to_pi",
    "mixing_moments",
    "mixing_moments_jacobian",
    "dunson_decomposition_check",
]

SCHEMA_VERSION = 1
_LOG2PI = math.log(2.0 * math.pi)


def _vec(a) -> np.ndarray:
    out = np.array(a, dtype=float).reshape(-1)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Theta:
    """Full parameter vector on the natural scale."""

    beta: np.ndarray
    zeta1: np.ndarray
    sigma_y: float
    gamma: np.ndarray
    zeta2: np.ndarray
    Pi: np.ndarray

    def __post_init__(self):
        for name in ("beta", "zeta1", "gamma", "zeta2"):
            object.__setattr__(self, name, _vec(getattr(self, name)))
        Pi = np.array(self.Pi, dtype=float)
        if Pi.ndim != 2 or Pi.shape != (len(self.zeta1), len(self.zeta2)):
            raise ValueError(f"Pi must be K1 x K2 = {len(self.zeta1)} x {len(self.zeta2)}")
        Pi.setflags(write=False)
        object.__setattr__(self, "Pi", Pi)
        object.__setattr__(self, "sigma_y", float(self.sigma_y))
        if not self.sigma_y > 0:
            raise ValueError("sigma_y must be positive")
        if np.any(Pi < 0) or abs(Pi.sum() - 1.0) > 1e-12 * max(1, Pi.size):
            raise ValueError("Pi must be non-negative and sum to one")
        vals = np.concatenate([self.beta, self.zeta1, self.gamma, self.zeta2, Pi.ravel()])
        if not np.all(np.isfinite(vals)):
            raise ValueError("Theta contains non-finite values")

    @property
    def K1(self) -> int:
        return len(self.zeta1)

    @property
    def K2(self) -> int:
        return len(self.zeta2)

    @property
    def p(self) -> int:
        return len(self.beta)

    @property
    def q(self) -> int:
        return len(self.gamma)

    @property
    def row_masses(self) -> np.ndarray:
        return self.Pi.sum(axis=1)

    @property
    def col_masses(self) -> np.ndarray:
        return self.Pi.sum(axis=0)

    def replace(self, **changes) -> "Theta":
        kw = dict(beta=self.beta, zeta1=self.zeta1, sigma_y=self.sigma_y,
                  gamma=self.gamma, zeta2=self.zeta2, Pi=self.Pi)
        kw.update(changes)
        return Theta(**kw)

    def is_canonical(self) -> bool:
        return bool(np.all(np.diff(self.zeta1) > 0) and np.all(np.diff(self.zeta2) > 0))

    def canonical(self) -> tuple["Theta", np.ndarray, np.ndarray]:
        """Sort both sets of locations; returns the theta and the permutations."""
        o1 = np.argsort(self.zeta1, kind="stable")
        o2 = np.argsort(self.zeta2, kind="stable")
        th = self.replace(zeta1=self.zeta1[o1], zeta2=self.zeta2[o2], Pi=self.Pi[np.ix_(o1, o2)])
        return th, o1, o2

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "beta": self.beta.tolist(),
            "zeta1": self.zeta1.tolist(),
            "sigma_y": self.sigma_y,
            "gamma": self.gamma.tolist(),
            "zeta2": self.zeta2.tolist(),
            "Pi": self.Pi.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Theta":
        version = d.get("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported Theta schema version {version}")
        return cls(beta=d["beta"], zeta1=d["zeta1"], sigma_y=d["sigma_y"],
                   gamma=d["gamma"], zeta2=d["zeta2"], Pi=np.array(d["Pi"], dtype=float))


# ---------------------------------------------------------------------------
# Mass logits
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MassLogits:
    """Log-linear coordinates of a strictly positive mass matrix.

    ``xi[g, l] = alpha_row[g] + alpha_col[l] + lambda_[g, l]`` with the last
    row and column of ``lambda_`` (and the last entry of each alpha) fixed at
    zero, so the reference cell ``(K1, K2)`` has ``xi = 0``.
    """

    alpha_row: np.ndarray
    alpha_col: np.ndarray
    lambda_: np.ndarray

    @property
    def xi(self) -> np.ndarray:
        K1, K2 = len(self.alpha_row) + 1, len(self.alpha_col) + 1
        a = np.append(self.alpha_row, 0.0)
        c = np.append(self.alpha_col, 0.0)
        lam = np.zeros((K1, K2))
        lam[:-1, :-1] = self.lambda_
        return a[:, None] + c[None, :] + lam


def _softmax_matrix(xi: np.ndarray) -> np.ndarray:
    z = xi - xi.max()
    e = np.exp(z)
    return e / e.sum()


def masses_to_logits(Pi) -> MassLogits:
    """Reference-cell logits of ``Pi`` split into margins and interactions."""
    Pi = np.asarray(Pi, dtype=float)
    if np.any(Pi <= 0):
        if Pi[-1, -1] <= 0:
            raise ValueError("reference mass Pi[K1, K2] must be positive")
        raise ValueError("masses must be strictly positive")
    xi = np.log(Pi) - np.log(Pi[-1, -1])
    alpha_row = xi[:-1, -1].copy()
    alpha_col = xi[-1, :-1].copy()
    lam = xi[:-1, :-1] - xi[:-1, -1:] - xi[-1:, :-1]
    return MassLogits(alpha_row, alpha_col, lam)


def logits_to_masses(logits: MassLogits) -> np.ndarray:
    return _softmax_matrix(logits.xi)


def pi_to_xi(Pi) -> np.ndarray:
    """Free logit vector: row-major cells except the reference cell."""
    Pi = np.asarray(Pi, dtype=float)
    if Pi[-1, -1] <= 0:
        raise ValueError("reference mass Pi[K1, K2] must be positive")
    with np.errstate(divide="ignore"):
        xi = np.log(Pi) - np.log(Pi[-1, -1])
    return xi.ravel()[:-1]


def xi_to_pi(xi, K1: int, K2: int) -> np.ndarray:
    full = np.append(np.asarray(xi, dtype=float), 0.0).reshape(K1, K2)
    return _softmax_matrix(full)


# ---------------------------------------------------------------------------
# Free-parameter layout
# ---------------------------------------------------------------------------


class ParamLayout:
    """Index bookkeeping for the free parameter vector.

    ``basis`` selects the mass coordinates:

    * ``"mnar"``: the ``K1*K2 - 1`` cell logits ``xi``;
    * ``"mar"``: marginal logits ``alpha_row`` (K1-1), ``alpha_col`` (K2-1)
      of a rank-one mass matrix;
    * ``"isni"``: ``alpha_row``, ``alpha_col`` plus the ``(K1-1)(K2-1)``
      interaction contrasts ``lambda``.

    The likelihood depends on the masses only through ``xi``, which is linear
    in every basis: ``xi = mass_jacobian @ mass_params``.
    """

    def __init__(self, p: int, K1: int, q: int, K2: int, basis: str = "mnar",
                 x_names=None, v_names=None):
        if basis not in ("mnar", "mar", "isni"):
            raise ValueError(f"unknown basis {basis!r}")
        self.p, self.K1, self.q, self.K2, self.basis = p, K1, q, K2, basis
        self.x_names = list(x_names) if x_names is not None else [f"x{j + 1}" for j in range(p)]
        self.v_names = list(v_names) if v_names is not None else [f"v{j + 1}" for j in range(q)]
        o = 0
        self.beta = slice(o, o + p); o += p
        self.zeta1 = slice(o, o + K1); o += K1
        self.log_sigma = o; o += 1
        self.phi = slice(0, o)
        self.gamma = slice(o, o + q); o += q
        self.zeta2 = slice(o, o + K2); o += K2
        self.psi = slice(self.phi.stop, o)
        self.n_xi = K1 * K2 - 1
        if basis == "mnar":
            n_mass = self.n_xi
        elif basis == "mar":
            n_mass = (K1 - 1) + (K2 - 1)
        else:
            n_mass = (K1 - 1) + (K2 - 1) + (K1 - 1) * (K2 - 1)
        self.mass = slice(o, o + n_mass)
        self.size = o + n_mass

    @classmethod
    def for_dataset(cls, dataset: PanelDataset, K1: int, K2: int, basis: str = "mnar"):
        return cls(dataset.p, K1, dataset.q, K2, basis, dataset.x_names, dataset.v_names)

    @property
    def n_phi(self) -> int:
        return self.phi.stop

    @property
    def lambda_slice(self) -> slice:
        if self.basis != "isni":
            raise ValueError("lambda coordinates exist only in the 'isni' basis")
        start = self.mass.start + (self.K1 - 1) + (self.K2 - 1)
        return slice(start, self.mass.stop)

    @property
    def lambda_cells(self) -> list[tuple[int, int]]:
        return [(g, l) for g in range(self.K1 - 1) for l in range(self.K2 - 1)]

    def names(self) -> list[str]:
        out = [f"beta[{n}]" for n in self.x_names]
        out += [f"zeta1[{g + 1}]" for g in range(self.K1)]
        out.append("log_sigma_y")
        out += [f"gamma[{n}]" for n in self.v_names]
        out += [f"zeta2[{l + 1}]" for l in range(self.K2)]
        if self.basis == "mnar":
            out += [f"xi[{g + 1},{l + 1}]" for g in range(self.K1) for l in range(self.K2)][:-1]
        else:
            out += [f"alpha_row[{g + 1}]" for g in range(self.K1 - 1)]
            out += [f"alpha_col[{l + 1}]" for l in range(self.K2 - 1)]
            if self.basis == "isni":
                out += [f"lambda[{g + 1},{l + 1}]" for g, l in self.lambda_cells]
        return out

    def mass_jacobian(self) -> np.ndarray:
        """d xi / d mass_params, shape (K1*K2 - 1, n_mass)."""
        K1, K2 = self.K1, self.K2
        J = np.zeros((self.n_xi, self.mass.stop - self.mass.start))
        if self.basis == "mnar":
            return np.eye(self.n_xi)
        lam_cells = {c: k for k, c in enumerate(self.lambda_cells)}
        for g in range(K1):
            for l in range(K2):
                c = g * K2 + l
                if c == self.n_xi:
                    continue
                if g < K1 - 1:
                    J[c, g] = 1.0
                if l < K2 - 1:
                    J[c, (K1 - 1) + l] = 1.0
                if self.basis == "isni" and (g, l) in lam_cells:
                    J[c, (K1 - 1) + (K2 - 1) + lam_cells[(g, l)]] = 1.0
        return J

    def full_jacobian(self) -> np.ndarray:
        """d(mnar free vector) / d(this basis' free vector)."""
        base = self.mass.start
        J = np.zeros((base + self.n_xi, self.size))
        J[:base, :base] = np.eye(base)
        J[base:, base:] = self.mass_jacobian()
        return J

    def pack(self, theta: Theta) -> np.ndarray:
        out = np.empty(self.size)
        out[self.beta] = theta.beta
        out[self.zeta1] = theta.zeta1
        out[self.log_sigma] = math.log(theta.sigma_y)
        out[self.gamma] = theta.gamma
        out[self.zeta2] = theta.zeta2
        if self.basis == "mnar":
            out[self.mass] = pi_to_xi(theta.Pi)
        elif self.basis == "mar":
            a, c = theta.row_masses, theta.col_masses
            out[self.mass] = np.concatenate([np.log(a[:-1] / a[-1]), np.log(c[:-1] / c[-1])])
        else:
            ml = masses_to_logits(theta.Pi)
            out[self.mass] = np.concatenate([ml.alpha_row, ml.alpha_col, ml.lambda_.ravel()])
        return out

    def unpack(self, vec) -> Theta:
        vec = np.asarray(vec, dtype=float)
        xi = self.mass_jacobian() @ vec[self.mass]
        return Theta(beta=vec[self.beta], zeta1=vec[self.zeta1],
                     sigma_y=math.exp(vec[self.log_sigma]), gamma=vec[self.gamma],
                     zeta2=vec[self.zeta2], Pi=xi_to_pi(xi, self.K1, self.K2))


# ---------------------------------------------------------------------------
# Densities and likelihood
# ---------------------------------------------------------------------------


def loglik_longitudinal_component(subject: SubjectRecord, beta, zeta1_g: float, sigma_y: float) -> float:
    """Gaussian log-density of a subject's responses given location ``zeta1_g``."""
    beta = np.asarray(beta, dtype=float)
    if subject.X.shape[1] != len(beta):
        raise ValueError("beta length does not match the longitudinal design")
    if not sigma_y > 0:
        raise ValueError("sigma_y must be positive")
    e = subject.y - zeta1_g - subject.X @ beta
    return float(np.sum(-0.5 * _LOG2PI - math.log(sigma_y) - 0.5 * (e / sigma_y) ** 2))


def loglik_dropout_component(subject: SubjectRecord, gamma, zeta2_l: float) -> float:
    """Bernoulli-logit log-probability of a subject's dropout indicators."""
    gamma = np.asarray(gamma, dtype=float)
    if subject.V.shape[1] != len(gamma):
        raise ValueError("gamma length does not match the dropout design")
    eta = zeta2_l + subject.V @ gamma
    return float(np.sum(subject.r * eta - np.logaddexp(0.0, eta)))


def _check_dims(dataset: PanelDataset, theta: Theta):
    if theta.p != dataset.p or theta.q != dataset.q:
        raise ValueError(f"theta has p={theta.p}, q={theta.q}; dataset has p={dataset.p}, q={dataset.q}")


def longitudinal_residual_sums(dataset: PanelDataset, beta) -> tuple[np.ndarray, np.ndarray]:
    """Per-subject mean ``ebar`` and centred sum of squares ``SS`` of ``y - x'beta``.

    ``sum_t (y - zeta - x'beta)^2 = SS + T_i (ebar - zeta)^2`` for any ``zeta``.
    """
    A = dataset.arrays
    e = (A.Y - A.X @ beta) * A.obs
    ebar = e.sum(axis=1) / A.Ti
    d = (e - ebar[:, None]) * A.obs
    return ebar, np.einsum("it,it->i", d, d)


def longitudinal_logdens(Ti, ebar, ss, zeta1, sigma_y: float) -> np.ndarray:
    """``(n, K1)`` Gaussian log-densities from :func:`longitudinal_residual_sums`."""
    dev = ebar[:, None] - zeta1[None, :]
    rss = ss[:, None] + Ti[:, None] * dev * dev
    return -(0.5 * _LOG2PI + math.log(sigma_y)) * Ti[:, None] - 0.5 * rss / (sigma_y * sigma_y)


def dropout_logdens(dataset: PanelDataset, gamma, zeta2) -> np.ndarray:
    """``(n, K2)`` Bernoulli-logit log-probabilities of the dropout indicators."""
    rg = dataset.risk_groups
    eta = zeta2[None, :] + (rg.V @ gamma)[:, None]
    return np.asarray(rg.counts_T @ (rg.r[:, None] * eta - np.logaddexp(0.0, eta)))


def component_logliks(dataset: PanelDataset, theta: Theta) -> tuple[np.ndarray, np.ndarray]:
    """Per-subject component log-densities: ``(n, K1)`` and ``(n, K2)``."""
    _check_dims(dataset, theta)
    ebar, ss = longitudinal_residual_sums(dataset, theta.beta)
    logf1 = longitudinal_logdens(dataset.arrays.Ti, ebar, ss, theta.zeta1, theta.sigma_y)
    return logf1, dropout_logdens(dataset, theta.gamma, theta.zeta2)


def joint_log_terms(dataset: PanelDataset, theta: Theta) -> np.ndarray:
    """``log f1[i,g] + log f2[i,l] + log Pi[g,l]``, shape ``(n, K1, K2)``."""
    logf1, logf2 = component_logliks(dataset, theta)
    with np.errstate(divide="ignore"):
        logpi = np.log(theta.Pi)
    return logf1[:, :, None] + logf2[:, None, :] + logpi[None, :, :]


def subject_logliks(dataset: PanelDataset, theta: Theta) -> np.ndarray:
    a = joint_log_terms(dataset, theta)
    out = logsumexp(a.reshape(a.shape[0], -1), axis=1)
    if np.any(np.isnan(out)):
        raise FloatingPointError("NaN in observed log-likelihood")
    return out


def observed_loglik(dataset: PanelDataset, theta: Theta) -> float:
    """Observed-data log-likelihood, summed over subjects in dataset order."""
    return float(np.sum(subject_logliks(dataset, theta)))


# ---------------------------------------------------------------------------
# Mixing distribution summaries
# ---------------------------------------------------------------------------


class MixingMoments(NamedTuple):
    mean1: float
    sd1: float
    mean2: float
    sd2: float
    cov12: float
    rho12: float


def mixing_moments(theta_or_zeta1, zeta2=None, Pi=None) -> MixingMoments:
    """Moments of the discrete joint distribution of the two random intercepts.

    Accepts either a :class:`Theta` or ``(zeta1, zeta2, Pi)``.
    """
    if isinstance(theta_or_zeta1, Theta):
        z1, z2, P = theta_or_zeta1.zeta1, theta_or_zeta1.zeta2, theta_or_zeta1.Pi
    else:
        z1, z2, P = (np.asarray(theta_or_zeta1, float), np.asarray(zeta2, float),
                     np.asarray(Pi, float))
    a, b = P.sum(axis=1), P.sum(axis=0)
    m1, m2 = a @ z1, b @ z2
    v1 = max(a @ (z1 - m1) ** 2, 0.0)
    v2 = max(b @ (z2 - m2) ** 2, 0.0)
    c = float((z1 - m1) @ P @ (z2 - m2))
    sd1, sd2 = math.sqrt(v1), math.sqrt(v2)
    rho = c / (sd1 * sd2) if sd1 > 0 and sd2 > 0 else 0.0
    return MixingMoments(float(m1), sd1, float(m2), sd2, c, rho)


def mixing_moments_jacobian(zeta1, zeta2, Pi) -> np.ndarray:
    """Jacobian of :func:`mixing_moments` w.r.t. ``(zeta1, zeta2, vec(Pi))``.

    The mass columns are exact only for directions that keep ``sum(Pi) = 1``;
    compose them with the Jacobian of a mass parameterisation.  Returns a
    ``6 x (K1 + K2 + K1*K2)`` matrix ordered like :class:`MixingMoments`.
    """
    z1, z2, P = np.asarray(zeta1, float), np.asarray(zeta2, float), np.asarray(Pi, float)
    K1, K2 = P.shape
    mm = mixing_moments(z1, z2, P)
    a, b = P.sum(axis=1), P.sum(axis=0)
    m1, m2 = mm.mean1, mm.mean2
    n = K1 + K2 + K1 * K2
    dm1, dm2, dv1, dv2, dc = (np.zeros(n) for _ in range(5))
    s1, s2, sP = slice(0, K1), slice(K1, K1 + K2), slice(K1 + K2, n)
    dm1[s1] = a
    dm2[s2] = b
    dv1[s1] = 2.0 * a * (z1 - m1)
    dv2[s2] = 2.0 * b * (z2 - m2)
    dc[s1] = P @ z2 - a * m2
    dc[s2] = P.T @ z1 - b * m1
    G1 = np.repeat(z1, K2)
    G2 = np.tile(z2, K1)
    dm1[sP] = G1
    dm2[sP] = G2
    dv1[sP] = G1 ** 2 - 2.0 * m1 * G1
    dv2[sP] = G2 ** 2 - 2.0 * m2 * G2
    dc[sP] = G1 * G2 - G1 * m2 - m1 * G2
    dsd1 = dv1 / (2.0 * mm.sd1) if mm.sd1 > 0 else np.zeros(n)
    dsd2 = dv2 / (2.0 * mm.sd2) if mm.sd2 > 0 else np.zeros(n)
    if mm.sd1 > 0 and mm.sd2 > 0:
        drho = dc / (mm.sd1 * mm.sd2) - mm.rho12 * (dsd1 / mm.sd1 + dsd2 / mm.sd2)
    else:
        drho = np.zeros(n)
    return np.vstack([dm1, dsd1, dm2, dsd2, dc, drho])


# ---------------------------------------------------------------------------
# Latent-class decomposition of the mass matrix (diagnostic)
# ---------------------------------------------------------------------------


class DunsonResult(NamedTuple):
    feasible: bool
    residual: float
    kl: float
    tau: np.ndarray
    row_given_class: np.ndarray
    col_given_class: np.ndarray


def dunson_decomposition_check(Pi, M: int, n_restarts: int = 10, max_iter: int = 20000,
                               tol: float = 1e-8, seed: int = 0) -> DunsonResult:
    """Check whether ``Pi`` is a mixture of ``M`` independence tables.

    Fits ``Pi[g, l] ~ sum_h tau[h] A[g, h] B[l, h]`` by minimising
    ``KL(Pi || fit)`` with EM-type multiplicative updates from several random
    starts.  ``residual`` is the max absolute reconstruction error of the best
    start; the table is reported feasible when it is below ``tol``.
    """
    Pi = np.asarray(Pi, dtype=float)
    if M < 1:
        raise ValueError("M must be at least 1")
    K1, K2 = Pi.shape
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_restarts):
        tau = rng.dirichlet(np.ones(M))
        A = rng.dirichlet(np.ones(K1), size=M).T
        B = rng.dirichlet(np.ones(K2), size=M).T
        for _ in range(max_iter):
            fit = (A * tau) @ B.T
            if np.max(np.abs(fit - Pi)) < 1e-3 * tol:
                break
            ratio = np.divide(Pi, fit, out=np.zeros_like(Pi), where=fit > 0)
            RA = ratio @ B          # (K1, M)
            RB = ratio.T @ A        # (K2, M)
            A_new = A * RA
            B_new = B * RB
            n_h = tau * np.sum(A_new, axis=0)
            A = A_new / np.maximum(A_new.sum(axis=0), 1e-300)
            B = B_new / np.maximum(B_new.sum(axis=0), 1e-300)
            tau = n_h / n_h.sum()
        fit = (A * tau) @ B.T
        resid = float(np.max(np.abs(fit - Pi)))
        if best is None or resid < best[0]:
            best = (resid, tau.copy(), A.copy(), B.copy(), fit)
        if resid < 1e-3 * tol:
            break
    resid, tau, A, B, fit = best
    mask = Pi > 0
    kl = float(np.sum(Pi[mask] * (np.log(Pi[mask]) - np.log(np.maximum(fit[mask], 1e-300)))))
    return DunsonResult(resid < tol, resid, kl, tau, A, B)
