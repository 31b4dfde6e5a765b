"""Maximum-likelihood estimation by EM with multiple starts.

Two specifications are supported:

* ``MNAR``: a full K1 x K2 mass matrix, estimated jointly.
* ``MAR``: a rank-one mass matrix.  The likelihood then factorises into a
  longitudinal mixture and a dropout mixture, which are fitted by two
  independent EM runs and recombined.

``FitConfig(freeze_lambda=True)`` runs the joint MNAR algorithm with the
interaction logits held at zero, i.e. a rank-one mass update inside the joint
EM; it must agree with the factorised MAR fit.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, NamedTuple, Sequence

import numpy as np
from scipy.special import expit

from .data import PanelDataset
from .derivatives import derivatives
from .model import (Theta, component_logliks, dropout_logdens, longitudinal_logdens, observed_loglik,
                    longitudinal_residual_sums)

__all__ = [
    "PosteriorWeights",
    "FitConfig",
    "FitResult",
    "RankDeficientError",
    "DegenerateThetaError",
    "e_step",
    "m_step_pi",
    "m_step_longitudinal",
    "m_step_dropout",
    "starting_values",
    "run_em",
    "newton_polish",
    "push_unbounded_locations",
    "MarginFit",
    "margin_fit",
    "fit",
    "n_free_params",
]

logger = logging.getLogger(__name__)

LOCATION_BOUND = 30.0


class RankDeficientError(ValueError):
    """Longitudinal design is collinear with the component indicators."""


class DegenerateThetaError(FloatingPointError):
    """Every component has zero density for some subject."""


class PosteriorWeights:
    """Posterior cell-membership probabilities, shape ``(n, K1, K2)``."""

    def __init__(self, W):
        W = np.asarray(W, dtype=float)
        if W.ndim != 3:
            raise ValueError("weights must be an (n, K1, K2) array")
        self.W = W

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def row_marginal(self) -> np.ndarray:
        return self.W.sum(axis=2)

    @property
    def col_marginal(self) -> np.ndarray:
        return self.W.sum(axis=1)

    def permuted(self, o1, o2) -> "PosteriorWeights":
        return PosteriorWeights(self.W[:, o1][:, :, o2])


@dataclass(frozen=True)
class FitConfig:
    K1: int = 1
    K2: int = 1
    mode: str = "MNAR"
    n_starts: int = 50
    max_iter: int = 2000
    rel_tol: float = 1e-8
    seed: int = 0
    sigma_floor: float | None = None   # default 1e-6 * sd(y)
    mass_floor: float = 1e-10
    freeze_lambda: bool = False
    include_mar_start: bool = True
    polish: bool = True
    threads: int = 1

    def __post_init__(self):
        mode = self.mode.upper()
        if mode not in ("MAR", "MNAR"):
            raise ValueError(f"mode must be MAR or MNAR, got {self.mode!r}")
        object.__setattr__(self, "mode", mode)
        if self.K1 < 1 or self.K2 < 1:
            raise ValueError("K1 and K2 must be at least 1")
        if self.n_starts < 1 or self.max_iter < 1:
            raise ValueError("n_starts and max_iter must be positive")
        if not self.rel_tol > 0 or not self.mass_floor > 0:
            raise ValueError("tolerances must be positive")
        if self.mass_floor * self.K1 * self.K2 >= 1:
            raise ValueError("mass_floor too large for the grid")
        if self.sigma_floor is not None and not self.sigma_floor > 0:
            raise ValueError("sigma_floor must be positive")

    @property
    def rank_one(self) -> bool:
        return self.mode == "MAR" or self.freeze_lambda

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


SMALL_MASS = 1e-6


def n_free_params(p: int, K1: int, q: int, K2: int, rank_one: bool) -> int:
    masses = (K1 - 1) + (K2 - 1) if rank_one else K1 * K2 - 1
    return p + K1 + 1 + q + K2 + masses


@dataclass
class FitResult:
    theta: Theta
    loglik: float
    n_params: int
    aic: float
    bic: float
    converged: bool
    iterations: int
    start_index: Any
    weights: PosteriorWeights | None
    loglik_trace: np.ndarray
    mode: str = "MNAR"
    freeze_lambda: bool = False
    n: int = 0
    covariance: Any = None
    diagnostics: dict = field(default_factory=dict)
    start_logliks: list = field(default_factory=list)

    @property
    def K1(self) -> int:
        return self.theta.K1

    @property
    def K2(self) -> int:
        return self.theta.K2

    @property
    def basis(self) -> str:
        return "mar" if (self.mode == "MAR" or self.freeze_lambda) else "mnar"

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "freeze_lambda": self.freeze_lambda,
            "K1": self.K1,
            "K2": self.K2,
            "n": self.n,
            "theta": self.theta.to_dict(),
            "loglik": self.loglik,
            "n_params": self.n_params,
            "aic": self.aic,
            "bic": self.bic,
            "converged": self.converged,
            "iterations": self.iterations,
            "start_index": self.start_index,
            "start_logliks": list(self.start_logliks),
            "loglik_trace": np.asarray(self.loglik_trace).tolist(),
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        return cls(theta=Theta.from_dict(d["theta"]), loglik=d["loglik"], n_params=d["n_params"],
                   aic=d["aic"], bic=d["bic"], converged=d["converged"],
                   iterations=d["iterations"], start_index=d["start_index"], weights=None,
                   loglik_trace=np.asarray(d["loglik_trace"]), mode=d["mode"],
                   freeze_lambda=d.get("freeze_lambda", False), n=d.get("n", 0),
                   diagnostics=d.get("diagnostics", {}),
                   start_logliks=d.get("start_logliks", []))


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------


def _normalise(a: np.ndarray) -> tuple[np.ndarray, float]:
    n = a.shape[0]
    flat = a.reshape(n, -1)
    m = flat.max(axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        ll_i = np.log(np.exp(flat - m[:, None]).sum(axis=1)) + m
    if np.any(np.isnan(ll_i)):
        raise FloatingPointError("NaN in component log-densities")
    if np.any(~np.isfinite(ll_i)):
        bad = int(np.flatnonzero(~np.isfinite(ll_i))[0])
        raise DegenerateThetaError(f"all components underflow for subject index {bad}")
    W = np.exp(flat - ll_i[:, None]).reshape(a.shape)
    return W, float(ll_i.sum())


def e_step(dataset: PanelDataset, theta: Theta) -> PosteriorWeights:
    """Posterior cell probabilities, normalised per subject in log space."""
    logf1, logf2 = component_logliks(dataset, theta)
    with np.errstate(divide="ignore"):
        a = logf1[:, :, None] + logf2[:, None, :] + np.log(theta.Pi)[None]
    return PosteriorWeights(_normalise(a)[0])


# ---------------------------------------------------------------------------
# M-step pieces
# ---------------------------------------------------------------------------


class MassUpdate(NamedTuple):
    Pi: np.ndarray
    floored: np.ndarray   # boolean mask of cells held at the floor


def _floored_simplex(s: np.ndarray, floor: float) -> tuple[np.ndarray, np.ndarray]:
    """argmax sum s log pi over {pi >= floor, sum pi = 1} for s >= 0, sum s = 1."""
    s = np.asarray(s, dtype=float)
    fixed = np.zeros(s.shape, dtype=bool)
    while True:
        free_mass = 1.0 - floor * fixed.sum()
        kappa = s[~fixed].sum() / free_mass
        new = ~fixed & (s < floor * kappa)
        if not new.any():
            break
        fixed |= new
    pi = np.where(fixed, floor, s / kappa)
    return pi, fixed


def m_step_pi(weights: PosteriorWeights, mass_floor: float = 1e-10, rank_one: bool = False) -> MassUpdate:
    """Closed-form mass update: average posterior cell probabilities.

    Cells whose average falls below ``mass_floor`` are held at the floor and
    the remaining cells rescaled, which is the exact maximiser of the mass
    part of the Q-function over the floored simplex.  With ``rank_one`` the
    update is restricted to independence tables (product of the averaged
    margins).
    """
    n = weights.n
    if rank_one:
        a, fa = _floored_simplex(weights.row_marginal.sum(axis=0) / n, mass_floor)
        b, fb = _floored_simplex(weights.col_marginal.sum(axis=0) / n, mass_floor)
        return MassUpdate(np.outer(a, b), fa[:, None] | fb[None, :])
    s = weights.W.sum(axis=0) / n
    pi, fixed = _floored_simplex(s.ravel(), mass_floor)
    return MassUpdate(pi.reshape(s.shape), fixed.reshape(s.shape))


class LongitudinalUpdate(NamedTuple):
    beta: np.ndarray
    zeta1: np.ndarray
    sigma_y: float
    sigma_floored: bool
    residual_sums: tuple | None = None   # (ebar, ss) at the new beta


def m_step_longitudinal(dataset: PanelDataset, weights: PosteriorWeights,
                        sigma_floor: float = 0.0, zeta1_prev=None) -> LongitudinalUpdate:
    """Weighted least squares for ``(zeta1, beta)`` then the ML residual scale.

    Each observation is replicated once per longitudinal component with the
    subject's marginal posterior weight; the block normal equations of that
    stacked regression are solved exactly.  Components with no posterior
    weight keep ``zeta1_prev`` (the Q-function does not depend on them).
    """
    A = dataset.arrays
    w1 = weights.row_marginal
    K1 = w1.shape[1]
    p = dataset.p
    tot = w1.T @ A.Ti
    active = tot > 1e-250
    prev = np.zeros(K1) if zeta1_prev is None else np.asarray(zeta1_prev, dtype=float)
    ka = int(active.sum())
    wa = w1[:, active]
    M = np.zeros((ka + p, ka + p))
    rhs = np.zeros(ka + p)
    M[:ka, :ka] = np.diag(tot[active])
    M[:ka, ka:] = wa.T @ A.sx
    M[ka:, :ka] = M[:ka, ka:].T
    M[ka:, ka:] = A.sxx
    rhs[:ka] = wa.T @ A.sy
    rhs[ka:] = A.sxy
    if not active.all():
        wf = w1[:, ~active]
        rhs[ka:] -= A.sx.T @ (wf @ prev[~active])
    d = np.sqrt(np.diag(M))
    if np.any(d == 0):
        raise RankDeficientError("longitudinal design has an all-zero column")
    Ms = M / np.outer(d, d)
    ev = np.linalg.eigvalsh(Ms)
    if not ev[0] > 1e-12 * ev[-1]:
        raise RankDeficientError("longitudinal design is collinear with the component intercepts")
    sol = np.linalg.solve(Ms, rhs / d) / d
    zeta1 = prev.copy()
    zeta1[active] = sol[:ka]
    beta = sol[ka:]
    ebar, ss = longitudinal_residual_sums(dataset, beta)
    dev = ebar[:, None] - zeta1[None, :]
    rss = float(np.sum(w1 * (ss[:, None] + A.Ti[:, None] * dev * dev)))
    s2 = rss / A.Ti.sum()
    floored = s2 < sigma_floor ** 2
    sigma = sigma_floor if floored else math.sqrt(s2)
    return LongitudinalUpdate(beta, zeta1, float(sigma), bool(floored), (ebar, ss))


class DropoutUpdate(NamedTuple):
    gamma: np.ndarray
    zeta2: np.ndarray
    separated: np.ndarray   # boolean per component: location clamped at the bound
    newton_iterations: int
    converged: bool


def _dropout_q(rg, w, gamma, zeta2) -> float:
    eta = zeta2[None, :] + (rg.V @ gamma)[:, None]
    return float(np.sum(w * (rg.r[:, None] * eta - np.logaddexp(0.0, eta))))


def m_step_dropout(dataset: PanelDataset, weights: PosteriorWeights, start=None,
                   max_newton: int = 50, grad_tol: float = 1e-9,
                   bound: float = LOCATION_BOUND) -> DropoutUpdate:
    """Weighted logistic regression for ``(zeta2, gamma)`` by Newton-Raphson.

    The stacked system replicates each at-risk occasion once per dropout
    component with the subject's marginal posterior weight.  Steps are halved
    until the weighted Bernoulli Q-function does not decrease; locations are
    confined to ``[-bound, bound]`` and components that hit the bound (or
    carry no events / only events) are flagged as separated.
    """
    rv = dataset.risk_groups
    w = np.asarray(rv.counts @ weights.col_marginal)   # (G, K2) summed weights per distinct row
    K2 = w.shape[1]
    q = dataset.q
    if start is None:
        gamma, zeta2 = np.zeros(q), np.zeros(K2)
    else:
        gamma = np.array(start[0], dtype=float)
        zeta2 = np.clip(np.array(start[1], dtype=float), -bound, bound)

    at_risk = w.sum(axis=0)
    events = rv.r @ w
    free = at_risk > 1e-250
    no_ev = free & (events <= 1e-14 * at_risk)
    all_ev = free & (events >= (1.0 - 1e-14) * at_risk)
    zeta2[no_ev] = -bound
    zeta2[all_ev] = bound
    separated = no_ev | all_ev
    free &= ~separated

    q_old = _dropout_q(rv, w, gamma, zeta2)
    converged = False
    it = 0
    for it in range(1, max_newton + 1):
        eta = zeta2[None, :] + (rv.V @ gamma)[:, None]
        prob = expit(eta)
        res = w * (rv.r[:, None] - prob)
        hw = w * prob * (1.0 - prob)
        fz = np.flatnonzero(free)
        grad = np.concatenate([res.sum(axis=0)[fz], rv.V.T @ res.sum(axis=1)])
        if grad.size == 0 or np.max(np.abs(grad)) < grad_tol:
            converged = True
            break
        kf = len(fz)
        info = np.zeros((kf + q, kf + q))
        info[:kf, :kf] = np.diag(hw.sum(axis=0)[fz])
        ZG = (rv.V.T @ hw).T[fz]
        info[:kf, kf:] = ZG
        info[kf:, :kf] = ZG.T
        info[kf:, kf:] = (rv.V * hw.sum(axis=1)[:, None]).T @ rv.V
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        if grad @ step <= 1e-15 * max(1.0, abs(q_old)):
            # predicted gain is at rounding level: stationary for practical purposes
            converged = True
            break
        t = 1.0
        for _ in range(40):
            z_new = zeta2.copy()
            z_new[fz] = np.clip(zeta2[fz] + t * step[:kf], -bound, bound)
            g_new = gamma + t * step[kf:]
            q_new = _dropout_q(rv, w, g_new, z_new)
            if q_new >= q_old:
                break
            t *= 0.5
        if q_new < q_old:
            break
        hit = free & (np.abs(z_new) >= bound)
        zeta2, gamma, q_old = z_new, g_new, q_new
        if hit.any():
            separated |= hit
            free &= ~hit
    return DropoutUpdate(gamma, zeta2, separated, it, converged)


# ---------------------------------------------------------------------------
# Starting values
# ---------------------------------------------------------------------------


def _baseline(dataset: PanelDataset):
    """Single-component fits of both margins (least squares and logistic)."""
    n = dataset.n
    one = PosteriorWeights(np.ones((n, 1, 1)))
    lu = m_step_longitudinal(dataset, one)
    du = m_step_dropout(dataset, one)
    A = dataset.arrays
    resid_mean = (A.sy - A.sx @ lu.beta) / A.Ti
    return lu, du, resid_mean


def _weighted_quantiles(x, w, probs):
    o = np.argsort(x, kind="stable")
    xs, ws = x[o], w[o]
    cdf = (np.cumsum(ws) - 0.5 * ws) / ws.sum()
    return np.interp(probs, cdf, xs)


def starting_values(dataset: PanelDataset, K1: int, K2: int, n_starts: int, seed: int = 0) -> list[Theta]:
    """Deterministic list of ``n_starts`` initial parameter values.

    Start 0 places the longitudinal locations at equally spaced quantiles of
    the subject-mean residuals (weighted by the number of responses) and
    spreads the dropout locations around the pooled logistic intercept, with
    uniform masses.  Later starts jitter the locations with normal noise and
    draw the masses from a symmetric Dirichlet; start ``b`` uses its own
    generator seeded by ``(seed, b)``.
    """
    lu, du, resid_mean = _baseline(dataset)
    A = dataset.arrays
    probs = (np.arange(K1) + 0.5) / K1
    z1 = _weighted_quantiles(resid_mean, A.Ti.astype(float), probs)
    if K1 > 1 and np.ptp(z1) == 0:
        z1 = z1 + np.linspace(-0.5, 0.5, K1)
    z2 = du.zeta2[0] + (np.linspace(-2.0, 2.0, K2) if K2 > 1 else np.zeros(1))
    sd1 = math.sqrt(np.average((resid_mean - np.average(resid_mean, weights=A.Ti)) ** 2, weights=A.Ti))
    sd1 = sd1 if sd1 > 0 else lu.sigma_y
    sd2 = 2.0
    base = Theta(lu.beta, np.sort(z1), lu.sigma_y, du.gamma, np.sort(z2), np.full((K1, K2), 1.0 / (K1 * K2)))
    starts = [base]
    for b in range(1, n_starts):
        rng = np.random.default_rng([seed, b])
        j1 = base.zeta1 + rng.normal(0.0, sd1, K1) if K1 > 1 else base.zeta1
        j2 = base.zeta2 + rng.normal(0.0, sd2, K2) if K2 > 1 else base.zeta2
        Pi = rng.dirichlet(np.ones(K1 * K2)).reshape(K1, K2)
        Pi = np.maximum(Pi, 1e-6)
        Pi /= Pi.sum()
        th, _, _ = base.replace(zeta1=j1, zeta2=j2, Pi=Pi).canonical()
        starts.append(th)
    return starts


# ---------------------------------------------------------------------------
# EM iterations
# ---------------------------------------------------------------------------


class EMRun(NamedTuple):
    theta: Theta
    loglik: float
    trace: np.ndarray
    converged: bool
    iterations: int
    weights: np.ndarray
    flags: dict


def _sigma_floor(dataset: PanelDataset, cfg: FitConfig) -> float:
    if cfg.sigma_floor is not None:
        return cfg.sigma_floor
    A = dataset.arrays
    y = A.Y[A.obs > 0]
    sd = float(np.std(y))
    return 1e-6 * sd if sd > 0 else 1e-12


def run_em(dataset: PanelDataset, theta0: Theta, config: FitConfig, part: str = "joint") -> EMRun:
    """EM from a single starting point.

    ``part`` is ``"joint"`` (full or rank-one masses per ``config``),
    ``"longitudinal"`` or ``"dropout"`` (one margin of the factorised MAR
    likelihood; the returned theta then carries the other margin unchanged).
    """
    if part not in ("joint", "longitudinal", "dropout"):
        raise ValueError(f"unknown part {part!r}")
    use_long = part in ("joint", "longitudinal")
    use_drop = part in ("joint", "dropout")
    rank_one = part == "joint" and config.rank_one
    sfloor = _sigma_floor(dataset, config)
    beta, zeta1, sigma = theta0.beta, theta0.zeta1, theta0.sigma_y
    gamma, zeta2 = theta0.gamma, theta0.zeta2
    if part == "longitudinal":
        Pi = theta0.row_masses[:, None]
    elif part == "dropout":
        Pi = theta0.col_masses[None, :]
    elif rank_one:
        Pi = np.outer(theta0.row_masses, theta0.col_masses)
    else:
        Pi = theta0.Pi

    Ti = dataset.arrays.Ti
    zeros = np.zeros((dataset.n, 1))
    res = longitudinal_residual_sums(dataset, beta) if use_long else None

    def logterms():
        logf1 = longitudinal_logdens(Ti, res[0], res[1], zeta1, sigma) if use_long else zeros
        logf2 = dropout_logdens(dataset, gamma, zeta2) if use_drop else zeros
        with np.errstate(divide="ignore"):
            return logf1[:, :, None] + logf2[:, None, :] + np.log(Pi)[None]

    W, ll = _normalise(logterms())
    trace = [ll]
    flags = {"sigma_floored": False, "mass_floored": np.zeros(Pi.shape, dtype=bool),
             "separated": np.zeros(len(zeta2), dtype=bool)}
    converged = False
    it = 0
    for it in range(1, config.max_iter + 1):
        pw = PosteriorWeights(W)
        if use_long:
            lu = m_step_longitudinal(dataset, pw, sfloor, zeta1)
            beta, zeta1, sigma, res = lu.beta, lu.zeta1, lu.sigma_y, lu.residual_sums
            flags["sigma_floored"] = lu.sigma_floored
        if use_drop:
            du = m_step_dropout(dataset, pw, start=(gamma, zeta2))
            gamma, zeta2 = du.gamma, du.zeta2
            flags["separated"] = du.separated
        mu = m_step_pi(pw, config.mass_floor, rank_one=rank_one)
        Pi = mu.Pi
        flags["mass_floored"] = mu.floored
        W, ll_new = _normalise(logterms())
        trace.append(ll_new)
        if abs(ll_new - ll) <= config.rel_tol * abs(ll):
            converged = True
            ll = ll_new
            break
        ll = ll_new

    if part == "longitudinal":
        theta = theta0.replace(beta=beta, zeta1=zeta1, sigma_y=sigma,
                               Pi=np.outer(Pi[:, 0], theta0.col_masses))
    elif part == "dropout":
        theta = theta0.replace(gamma=gamma, zeta2=zeta2,
                               Pi=np.outer(theta0.row_masses, Pi[0, :]))
    else:
        theta = Theta(beta, zeta1, sigma, gamma, zeta2, Pi)
    return EMRun(theta, ll, np.asarray(trace), converged, it, W, flags)


def push_unbounded_locations(dataset: PanelDataset, theta: Theta,
                             trigger: float = 10.0) -> tuple[Theta, np.ndarray]:
    """Move dropout locations that drift to minus infinity onto the bound.

    A component whose hazard is effectively zero has no finite MLE for its
    location; EM and Newton creep towards it indefinitely.  Each location
    below ``-trigger`` is set to ``-LOCATION_BOUND`` when that does not lower
    the log-likelihood.  Returns the new theta and a mask of moved locations.
    """
    moved = np.zeros(theta.K2, dtype=bool)
    ll = observed_loglik(dataset, theta)
    for l in np.flatnonzero(theta.zeta2 < -trigger):
        z = theta.zeta2.copy()
        z[l] = -LOCATION_BOUND
        trial = theta.replace(zeta2=z)
        new = observed_loglik(dataset, trial)
        if new >= ll:
            theta, ll, moved[l] = trial, new, True
    return theta, moved


def newton_polish(dataset: PanelDataset, theta: Theta, basis: str, max_steps: int = 100,
                  grad_tol: float = 1e-8, mass_floor: float = 0.0) -> tuple[Theta, list[float], bool]:
    """Newton-Raphson on the observed log-likelihood from an EM solution.

    Uses the analytic Hessian; every accepted step increases the
    log-likelihood (step halving), so appending the values keeps the trace
    monotone.  Where the Hessian is not negative definite its spectrum is
    shifted (Levenberg style) so the step remains an ascent direction.
    Dropout locations on the bound are held fixed.  Steps that push a mass
    below ``mass_floor`` are rejected.
    Returns the polished theta, the accepted log-likelihoods and
    whether the score max-norm fell below ``grad_tol``.
    """
    from .model import ParamLayout

    lay = ParamLayout.for_dataset(dataset, theta.K1, theta.K2, basis)
    x = lay.pack(theta)
    d = derivatives(dataset, theta, basis)
    ll = d.loglik
    lls: list[float] = []
    # locations already on the bound stay there
    free = np.ones(x.size, dtype=bool)
    free[np.arange(x.size)[lay.zeta2][np.abs(x[lay.zeta2]) >= LOCATION_BOUND]] = False
    for _ in range(max_steps):
        g = d.score[free]
        if np.max(np.abs(g), initial=0.0) < grad_tol:
            return lay.unpack(x), lls, True
        A = -0.5 * (d.hessian + d.hessian.T)[np.ix_(free, free)]
        ev, U = np.linalg.eigh(A)
        if not np.all(np.isfinite(ev)):
            break
        # shift a non-concave Hessian so the step is still an ascent direction
        shift = 0.0 if ev.min() > 0 else 1e-8 * max(ev.max(), 1.0) - ev.min()
        step = np.zeros(x.size)
        step[free] = U @ ((U.T @ g) / (ev + shift))
        t = 1.0
        accepted = False
        for _ in range(30):
            xn = x + t * step
            if np.all(np.abs(xn[lay.zeta2]) <= LOCATION_BOUND):
                try:
                    thn = lay.unpack(xn)
                    if thn.Pi.min() < mass_floor:
                        raise ValueError("mass below floor")
                    dn = derivatives(dataset, thn, basis)
                except (ValueError, FloatingPointError):
                    dn = None
                if dn is not None and dn.loglik >= ll:
                    accepted = True
                    break
            t *= 0.5
        if not accepted:
            break
        x, d, ll = xn, dn, dn.loglik
        lls.append(ll)
    return lay.unpack(x), lls, bool(np.max(np.abs(d.score[free]), initial=0.0) < grad_tol)


def _polish_point(dataset, theta, basis, mass_floor):
    """Newton polish, then bound unbounded locations and polish again."""
    th, lls, _ = newton_polish(dataset, theta, basis, mass_floor=mass_floor)
    th, moved = push_unbounded_locations(dataset, th)
    if moved.any():
        lls.append(observed_loglik(dataset, th))
        th, more, _ = newton_polish(dataset, th, basis, mass_floor=mass_floor)
        lls += more
    return th, lls, moved


def _polish(dataset, cfg, theta, W, ll, trace, flags):
    """Apply :func:`newton_polish` to interior solutions only."""
    if (not cfg.polish or flags["sigma_floored"] or np.any(flags["mass_floored"])
            or np.any(flags["separated"])):
        return theta, W, ll, trace
    basis = "mar" if cfg.rank_one else "mnar"
    th, lls, moved = _polish_point(dataset, theta, basis, cfg.mass_floor)
    flags["separated"] = flags["separated"] | moved
    if not lls:
        return theta, W, ll, trace
    return th, e_step(dataset, th).W, lls[-1], np.concatenate([trace, lls])


def _map(fn, items, threads: int):
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def _best(runs: Sequence[EMRun]) -> int:
    lls = [r.loglik for r in runs]
    return int(np.argmax(lls))


def _finish(dataset, cfg, theta, W, ll, trace, converged, iterations, start_index,
            start_logliks, flags) -> FitResult:
    theta_c, o1, o2 = theta.canonical()
    W = W[:, o1][:, :, o2]
    rank_one = cfg.rank_one
    k = n_free_params(dataset.p, cfg.K1, dataset.q, cfg.K2, rank_one)
    n = dataset.n
    diag = {
        "sigma_floored": bool(flags["sigma_floored"]),
        "mass_floored_cells": [[int(g), int(l)] for g, l in
                               zip(*np.nonzero(flags["mass_floored"][np.ix_(o1, o2)]))],
        # includes locations that Newton drove onto the bound
        "separated_components": [int(l) for l in np.flatnonzero(
            flags["separated"][o2] | (theta_c.zeta2 < 1.0 - LOCATION_BOUND))],
        # cells drifting to zero mass: the MLE is on the boundary and SEs are unreliable
        "small_mass_cells": [[int(g), int(l)] for g, l in zip(*np.nonzero(theta_c.Pi < SMALL_MASS))],
    }
    try:
        d = derivatives(dataset, theta_c, "mar" if rank_one else "mnar", hessian=False)
        diag["score_max_norm"] = float(np.max(np.abs(d.score))) if d.score.size else 0.0
    except (ValueError, FloatingPointError):
        diag["score_max_norm"] = None
    return FitResult(theta=theta_c, loglik=float(ll), n_params=k, aic=-2.0 * ll + 2.0 * k,
                     bic=-2.0 * ll + k * math.log(n), converged=bool(converged),
                     iterations=int(iterations), start_index=start_index,
                     weights=PosteriorWeights(W), loglik_trace=np.asarray(trace),
                     mode=cfg.mode, freeze_lambda=cfg.freeze_lambda, n=n,
                     diagnostics=diag, start_logliks=[float(x) for x in start_logliks])


class MarginFit(NamedTuple):
    """Best EM solution of one margin of the factorised MAR likelihood."""

    part: str
    theta: Theta          # carries K2 = 1 (longitudinal) or K1 = 1 (dropout)
    loglik: float         # margin log-likelihood only
    trace: np.ndarray
    converged: bool
    iterations: int
    start_index: int
    start_logliks: list
    weights: np.ndarray   # (n, K) posterior of the margin's components
    flags: dict


def _margin_loglik(dataset: PanelDataset, theta: Theta, part: str) -> float:
    logf1, logf2 = component_logliks(dataset, theta)
    if part == "longitudinal":
        a = logf1 + np.log(theta.row_masses)[None]
    else:
        a = logf2 + np.log(theta.col_masses)[None]
    return _normalise(a[:, :, None])[1]


def margin_fit(dataset: PanelDataset, config: FitConfig, part: str,
               starts: Sequence[Theta] | None = None) -> MarginFit:
    """Best-of-starts EM for one margin (``"longitudinal"`` or ``"dropout"``).

    By default the starts are ``starting_values`` for ``(K1, 1)`` or
    ``(1, K2)``, so a margin fit depends only on its own component count and
    can be shared across a selection grid.
    """
    cfg = config
    if starts is None:
        K1, K2 = (cfg.K1, 1) if part == "longitudinal" else (1, cfg.K2)
        starts = starting_values(dataset, K1, K2, cfg.n_starts, cfg.seed)
    runs = _map(lambda th: run_em(dataset, th, cfg, part), list(starts), cfg.threads)
    b = _best(runs)
    r = runs[b]
    # the other margin is represented by its exact single-component fit, which
    # is stationary, so polishing the joint vector only moves this margin
    lu, du, _ = _baseline(dataset)
    if part == "longitudinal":
        theta = r.theta.replace(Pi=r.theta.row_masses[:, None], gamma=du.gamma, zeta2=du.zeta2)
        W = r.weights[:, :, 0]
        flags = {"sigma_floored": r.flags["sigma_floored"],
                 "mass_floored": r.flags["mass_floored"], "separated": np.zeros(1, dtype=bool)}
    else:
        theta = r.theta.replace(Pi=r.theta.col_masses[None, :], beta=lu.beta, zeta1=lu.zeta1,
                                sigma_y=lu.sigma_y)
        W = r.weights[:, 0, :]
        flags = {"sigma_floored": False, "mass_floored": r.flags["mass_floored"],
                 "separated": r.flags["separated"]}
    ll, trace = r.loglik, r.trace
    if (cfg.polish and not flags["sigma_floored"] and not np.any(flags["mass_floored"])
            and not np.any(flags["separated"])):
        th, lls, moved = _polish_point(dataset, theta, "mar", cfg.mass_floor)
        flags["separated"] = flags["separated"] | moved
        if lls:
            theta = th
            new = _margin_loglik(dataset, theta, part)
            if new >= ll:
                offset = lls[-1] - new
                trace = np.concatenate([trace, np.asarray(lls) - offset])
                trace[-1] = new
                ll = new
                Wf = e_step(dataset, theta).W
                W = Wf[:, :, 0] if part == "longitudinal" else Wf[:, 0, :]
    return MarginFit(part, theta, float(ll), np.asarray(trace), r.converged, r.iterations, b,
                     [x.loglik for x in runs], W, flags)


def _assemble_mar(dataset: PanelDataset, config: FitConfig, long: MarginFit,
                  drop: MarginFit) -> FitResult:
    """Combine two margin fits into the rank-one fit of the joint model."""
    a, c = long.theta, drop.theta
    theta = Theta(a.beta, a.zeta1, a.sigma_y, c.gamma, c.zeta2, np.outer(a.Pi[:, 0], c.Pi[0, :]))
    W = long.weights[:, :, None] * drop.weights[:, None, :]
    L = max(len(long.trace), len(drop.trace))
    t1 = np.concatenate([long.trace, np.full(L - len(long.trace), long.trace[-1])])
    t2 = np.concatenate([drop.trace, np.full(L - len(drop.trace), drop.trace[-1])])
    flags = {"sigma_floored": long.flags["sigma_floored"],
             "mass_floored": long.flags["mass_floored"][:, :1] | drop.flags["mass_floored"][:1, :],
             "separated": drop.flags["separated"]}
    start_lls = [x + y for x, y in zip(long.start_logliks, drop.start_logliks)]
    return _finish(dataset, config, theta, W, long.loglik + drop.loglik, t1 + t2,
                   long.converged and drop.converged, max(long.iterations, drop.iterations),
                   [long.start_index, drop.start_index], start_lls, flags)


def _paired_starts(dataset: PanelDataset, cfg: FitConfig) -> list[Theta]:
    """All pairings of the ``(K1, 1)`` and ``(1, K2)`` margin starts.

    With rank-one masses the joint EM separates into the two margin EMs, so
    these pairings span the same solutions as the margin fits of MAR mode.
    """
    long = starting_values(dataset, cfg.K1, 1, cfg.n_starts, cfg.seed)
    drop = starting_values(dataset, 1, cfg.K2, cfg.n_starts, cfg.seed)
    return [Theta(a.beta, a.zeta1, a.sigma_y, c.gamma, c.zeta2, np.outer(a.Pi[:, 0], c.Pi[0, :]))
            for a in long for c in drop]


def fit(dataset: PanelDataset, config: FitConfig, starts: Sequence[Theta] | None = None,
        mar_fit: FitResult | None = None, extra_starts: Sequence[Theta] | None = None) -> FitResult:
    """Best-of-``n_starts`` EM fit.

    MAR mode fits the two margins separately (see :func:`margin_fit`) and
    combines them.  In MNAR mode (unless ``include_mar_start`` is off) the
    MAR solution for the same ``(K1, K2)`` is used as one extra start, so
    the returned MNAR log-likelihood is never below the MAR one; ``mar_fit``
    may be supplied to avoid refitting it.  With ``freeze_lambda`` the
    default starts are the pairings of the margin starts.  ``starts``
    replaces the default start list; ``extra_starts`` are appended to it.
    """
    cfg = config
    if cfg.mode == "MAR":
        if extra_starts:
            starts = list(starts if starts is not None else
                          starting_values(dataset, cfg.K1, cfg.K2, cfg.n_starts, cfg.seed))
            starts += list(extra_starts)
        long = margin_fit(dataset, cfg, "longitudinal", starts)
        drop = margin_fit(dataset, cfg, "dropout", starts)
        return _assemble_mar(dataset, cfg, long, drop)

    if starts is None:
        starts = (_paired_starts(dataset, cfg) if cfg.freeze_lambda else
                  starting_values(dataset, cfg.K1, cfg.K2, cfg.n_starts, cfg.seed))
    starts = list(starts) + list(extra_starts or [])
    if not cfg.freeze_lambda and cfg.include_mar_start:
        if mar_fit is None:
            mar_fit = fit(dataset, replace(cfg, mode="MAR"))
        starts.append(mar_fit.theta)
    runs = _map(lambda th: run_em(dataset, th, cfg, "joint"), starts, cfg.threads)
    b = _best(runs)
    r = runs[b]
    theta, W, ll, trace = _polish(dataset, cfg, r.theta, r.weights, r.loglik, r.trace, r.flags)
    return _finish(dataset, cfg, theta, W, ll, trace, r.converged,
                   r.iterations, b, [x.loglik for x in runs], r.flags)
