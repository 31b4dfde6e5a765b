"""Analytic first and second derivatives of the observed log-likelihood.

Write ``a[i, c] = log f1[i, g] + log f2[i, l] + log Pi[c]`` for cell
``c = (g, l)`` and ``w[i, c]`` for the posterior cell probabilities.  Then

    d l_i / d theta      = sum_c w[i, c] G[i, c]
    d2 l / d theta2      = sum_i sum_c w[i, c] H[i, c]                 (complete-data part)
                         + sum_i [sum_c w[i, c] G G' - S_i S_i']       (weight-derivative part)

with ``G``/``H`` the gradient/Hessian of ``a[i, c]``.  The first term is the
Hessian of the EM Q-function in its first argument and the second is its
mixed derivative, so the negated sum is the observed information in Oakes'
form.  Everything is computed in the ``"mnar"`` (cell-logit) basis and mapped
linearly to the requested basis.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
from scipy.special import expit, logsumexp

from .data import PanelDataset
from .model import ParamLayout, Theta, joint_log_terms

__all__ = ["Derivatives", "derivatives"]


class Derivatives(NamedTuple):
    loglik: float
    subject_logliks: np.ndarray   # (n,)
    scores: np.ndarray            # (n, D)
    complete_hessian: np.ndarray | None   # (D, D)
    weight_term: np.ndarray | None        # (D, D)
    weights: np.ndarray           # (n, K1, K2)
    layout: ParamLayout

    @property
    def score(self) -> np.ndarray:
        return self.scores.sum(axis=0)

    @property
    def hessian(self) -> np.ndarray:
        return self.complete_hessian + self.weight_term


def derivatives(dataset: PanelDataset, theta: Theta, basis: str = "mnar",
                hessian: bool = True) -> Derivatives:
    """Per-subject scores and (optionally) the observed-data Hessian."""
    A = dataset.arrays
    K1, K2 = theta.K1, theta.K2
    lay_x = ParamLayout.for_dataset(dataset, K1, K2, "mnar")
    lay = lay_x if basis == "mnar" else ParamLayout.for_dataset(dataset, K1, K2, basis)
    n, p, q = dataset.n, dataset.p, dataset.q
    s2 = theta.sigma_y ** 2

    a = joint_log_terms(dataset, theta)
    flat = a.reshape(n, -1)
    ll_i = logsumexp(flat, axis=1)
    W = np.exp(flat - ll_i[:, None]).reshape(n, K1, K2)
    w1 = W.sum(axis=2)
    w2 = W.sum(axis=1)

    # component gradients, longitudinal block: (n, K1, p + K1 + 1)
    D1 = p + K1 + 1
    E = A.Y[:, None, :] - theta.zeta1[None, :, None] - (A.X @ theta.beta)[:, None, :]
    Eo = E * A.obs[:, None, :]
    sumE = Eo.sum(axis=2)
    G1 = np.zeros((n, K1, D1))
    G1[:, :, :p] = np.einsum("igt,itp->igp", Eo, A.X) / s2
    G1[:, np.arange(K1), p + np.arange(K1)] = sumE / s2
    G1[:, :, -1] = -A.Ti[:, None] + (Eo * E).sum(axis=2) / s2

    # dropout block: (n, K2, q + K2)
    D2 = q + K2
    eta = theta.zeta2[None, :, None] + (A.V @ theta.gamma)[:, None, :]
    prob = expit(eta)
    res = A.risk[:, None, :] * (A.R[:, None, :] - prob)
    G2 = np.zeros((n, K2, D2))
    G2[:, :, :q] = np.einsum("ilt,itq->ilq", res, A.V)
    G2[:, np.arange(K2), q + np.arange(K2)] = res.sum(axis=2)

    # mass block: d log Pi[c] / d xi_k = 1{c == k} - Pi[k]
    C = K1 * K2
    nx = C - 1
    pi_flat = theta.Pi.ravel()
    Gm = np.eye(C)[:, :nx] - pi_flat[None, :nx]

    S1 = np.einsum("ig,igd->id", w1, G1)
    S2 = np.einsum("il,ild->id", w2, G2)
    Sm = W.reshape(n, C)[:, :nx] - pi_flat[None, :nx]
    S = np.concatenate([S1, S2, Sm], axis=1)

    Dx = lay_x.size
    Hc = Wt = None
    if hessian:
        Hc = np.zeros((Dx, Dx))
        # longitudinal complete-data block
        b, z, ls = slice(0, p), slice(p, p + K1), p + K1
        H1 = np.zeros((D1, D1))
        H1[b, b] = -A.sxx / s2
        H1[b, z] = -(A.sx.T @ w1) / s2
        H1[z, b] = H1[b, z].T
        H1[b, ls] = -2.0 * np.einsum("ig,igp->p", w1, G1[:, :, :p])
        H1[ls, b] = H1[b, ls]
        H1[z, z] = np.diag(-(w1.T @ A.Ti) / s2)
        H1[z, ls] = -2.0 * np.einsum("ig,ig->g", w1, sumE) / s2
        H1[ls, z] = H1[z, ls]
        H1[ls, ls] = -2.0 * np.sum(w1 * (G1[:, :, -1] + A.Ti[:, None]))
        Hc[:D1, :D1] = H1
        # dropout complete-data block
        hw = A.risk[:, None, :] * prob * (1.0 - prob) * w2[:, :, None]
        H2 = np.zeros((D2, D2))
        H2[:q, :q] = -np.einsum("it,itq,itk->qk", hw.sum(axis=1), A.V, A.V)
        H2[:q, q:] = -np.einsum("ilt,itq->ql", hw, A.V)
        H2[q:, :q] = H2[:q, q:].T
        H2[q:, q:] = np.diag(-hw.sum(axis=(0, 2)))
        Hc[D1:D1 + D2, D1:D1 + D2] = H2
        # masses
        pm = pi_flat[:nx]
        Hc[D1 + D2:, D1 + D2:] = -n * (np.diag(pm) - np.outer(pm, pm))

        # weight-derivative term
        Wt = np.zeros((Dx, Dx))
        s1, s2_, sm = slice(0, D1), slice(D1, D1 + D2), slice(D1 + D2, Dx)
        Wt[s1, s1] = np.einsum("ig,igd,ige->de", w1, G1, G1)
        Wt[s2_, s2_] = np.einsum("il,ild,ile->de", w2, G2, G2)
        Wt[s1, s2_] = np.einsum("igl,igd,ile->de", W, G1, G2)
        Gm3 = Gm.reshape(K1, K2, nx)
        Wt[s1, sm] = np.einsum("igl,igd,gle->de", W, G1, Gm3)
        Wt[s2_, sm] = np.einsum("igl,ild,gle->de", W, G2, Gm3)
        Wt[sm, sm] = np.einsum("c,cd,ce->de", W.reshape(n, C).sum(axis=0), Gm, Gm)
        Wt[s2_, s1] = Wt[s1, s2_].T
        Wt[sm, s1] = Wt[s1, sm].T
        Wt[sm, s2_] = Wt[s2_, sm].T
        Wt -= S.T @ S

    if basis != "mnar":
        J = lay.full_jacobian()
        S = S @ J
        if hessian:
            Hc = J.T @ Hc @ J
            Wt = J.T @ Wt @ J
    return Derivatives(float(ll_i.sum()), ll_i, S, Hc, Wt, W, lay)
