"""Independent reference computations used across the tests."""

import mpmath as mp
import numpy as np

mp.mp.dps = 40


def brute_loglik(dataset, theta) -> float:
    """Observed log-likelihood by explicit enumeration of cells in mpmath."""
    total = mp.mpf(0)
    for s in dataset.subjects:
        acc = mp.mpf(0)
        for g in range(theta.K1):
            f1 = mp.mpf(1)
            for t in range(s.T_i):
                mu = mp.mpf(theta.zeta1[g]) + mp.fsum(mp.mpf(a) * mp.mpf(b) for a, b in zip(s.X[t], theta.beta))
                z = (mp.mpf(s.y[t]) - mu) / mp.mpf(theta.sigma_y)
                f1 *= mp.exp(-z * z / 2) / (mp.sqrt(2 * mp.pi) * mp.mpf(theta.sigma_y))
            for l in range(theta.K2):
                f2 = mp.mpf(1)
                for t in range(len(s.r)):
                    eta = mp.mpf(theta.zeta2[l]) + mp.fsum(mp.mpf(a) * mp.mpf(b) for a, b in zip(s.V[t], theta.gamma))
                    pr = 1 / (1 + mp.exp(-eta))
                    f2 *= pr if s.r[t] == 1 else 1 - pr
                acc += mp.mpf(theta.Pi[g, l]) * f1 * f2
        total += mp.log(acc)
    return float(total)


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient (or Jacobian for vector f)."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def stacked_regression(dataset, weights):
    """Long-format design of the longitudinal M-step: one copy per component."""
    K1 = weights.shape[1]
    rows, ys, ws = [], [], []
    for i, s in enumerate(dataset.subjects):
        for g in range(K1):
            D = np.zeros((s.T_i, K1))
            D[:, g] = 1.0
            rows.append(np.hstack([D, s.X]))
            ys.append(s.y)
            ws.append(np.full(s.T_i, weights[i, g]))
    return np.vstack(rows), np.concatenate(ys), np.concatenate(ws)


def stacked_logistic(dataset, weights):
    """Long-format design of the dropout M-step: one copy per component."""
    K2 = weights.shape[1]
    rows, ys, ws = [], [], []
    for i, s in enumerate(dataset.subjects):
        for l in range(K2):
            D = np.zeros((len(s.r), K2))
            D[:, l] = 1.0
            rows.append(np.hstack([D, s.V]))
            ys.append(s.r)
            ws.append(np.full(len(s.r), weights[i, l]))
    return np.vstack(rows), np.concatenate(ys).astype(float), np.concatenate(ws)
