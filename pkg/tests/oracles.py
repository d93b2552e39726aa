"""Independent reference computations used only by the tests."""
from __future__ import annotations

import itertools
import math

import numpy as np
import scipy.linalg


def null_space_qp(P, c, A, b):
    """argmin z'Pz + c'z s.t. Az = b via a null-space basis of A."""
    P, c, A, b = (np.asarray(v, dtype=float) for v in (P, c, A, b))
    z_p, *_ = np.linalg.lstsq(A, b, rcond=None)
    Z = scipy.linalg.null_space(A)
    if Z.shape[1] == 0:
        return z_p
    reduced = 2.0 * Z.T @ P @ Z
    grad = 2.0 * Z.T @ P @ z_p + Z.T @ c
    y = np.linalg.solve(reduced, -grad)
    return z_p + Z @ y


def planning_qp(weights, A_seq, B_seq, x0):
    """Dense (P, c, A, b) for the horizon problem, variables [X_0..X_{T-1}, U_0..U_{T-1}].

    Built step by step from the cost and dynamics definitions; does not share
    code with the package's KKT assembly.
    """
    T = len(weights)
    n = 6 * T
    P = np.zeros((n, n))
    c = np.zeros(n)
    for k, w in enumerate(weights):
        xs = slice(4 * k, 4 * k + 4)
        us = slice(4 * T + 2 * k, 4 * T + 2 * k + 2)
        P[xs, xs] += w.Q
        P[us, us] += 0.5 * (w.R + w.R.T)
        c[xs] += w.G
        c[us] += w.H
    rows, rhs = [], []
    for i in range(4):
        r = np.zeros(n)
        r[i] = 1.0
        rows.append(r)
        rhs.append(x0[i])
    for k in range(T - 1):
        for i in range(4):
            r = np.zeros(n)
            r[4 * (k + 1) + i] = 1.0
            r[4 * k:4 * k + 4] -= A_seq[k][i]
            r[4 * T + 2 * k:4 * T + 2 * k + 2] -= B_seq[k][i]
            rows.append(r)
            rhs.append(0.0)
    return P, c, np.array(rows), np.array(rhs)


def bounded_speed_qp(P, c, A, b, T, v_max):
    """Brute-force |v_k| <= v_max for k >= 1 by enumerating every active set."""
    best, best_z = math.inf, None
    for pattern in itertools.product((0, 1, -1), repeat=T - 1):
        rows, rhs = [A], [b]
        for k, s in enumerate(pattern, start=1):
            if s:
                r = np.zeros(A.shape[1])
                r[4 * k + 1] = 1.0
                rows.append(r[None])
                rhs.append([s * v_max])
        z = null_space_qp(P, c, np.vstack(rows), np.concatenate([np.ravel(x) for x in rhs]))
        v = z[1:4 * T:4]
        if np.all(np.abs(v) <= v_max + 1e-9) and np.allclose(np.vstack(rows) @ z,
                                                              np.concatenate([np.ravel(x) for x in rhs])):
            obj = z @ P @ z + c @ z
            if obj < best:
                best, best_z = obj, z
    return best_z, best


def softmax_rows(logits):
    out = []
    for row in np.atleast_2d(logits):
        m = max(row)
        e = [math.exp(x - m) for x in row]
        s = sum(e)
        out.append([x / s for x in e])
    return np.array(out)


def central_difference(f, theta, step=1e-5):
    theta = np.asarray(theta, dtype=float)
    g = np.zeros_like(theta)
    for i in range(theta.size):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += step
        tm[i] -= step
        g[i] = (f(tp) - f(tm)) / (2 * step)
    return g


def epa_enumeration(min_fdes, n_fp, n_gt, tau=2.0, alpha=0.5):
    hits = 0
    for d in min_fdes:
        if d < tau:
            hits += 1
    return (hits - alpha * n_fp) / n_gt
