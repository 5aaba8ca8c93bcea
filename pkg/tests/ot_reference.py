"""Independent optimal-transport references shared by the test suites.

Both solvers here avoid the library's log-domain machinery on purpose: the
fixed-point scaler runs in 60-digit arithmetic, and the LP optimum enumerates
basic feasible solutions directly.
"""

import itertools
import math

import mpmath as mp
import numpy as np
import torch


def reference_plan(cost, mu, nu, eps, max_iters=200000):
    """Plain fixed-point Sinkhorn scaling at 60 decimal digits."""
    mp.mp.dps = 60
    tol = mp.mpf("1e-14")
    m, n = len(cost), len(cost[0])
    K = [[mp.e ** (-mp.mpf(cost[i][j]) / mp.mpf(eps)) for j in range(n)] for i in range(m)]
    u = [mp.mpf(1)] * m
    v = [mp.mpf(1)] * n
    for it in range(max_iters):
        u = [mp.mpf(mu[i]) / mp.fsum(K[i][j] * v[j] for j in range(n)) for i in range(m)]
        v = [mp.mpf(nu[j]) / mp.fsum(K[i][j] * u[i] for i in range(m)) for j in range(n)]
        if it % 50 == 49:
            T = [[u[i] * K[i][j] * v[j] for j in range(n)] for i in range(m)]
            row_err = max(abs(mp.fsum(T[i]) - mp.mpf(mu[i])) for i in range(m))
            col_err = max(
                abs(mp.fsum(T[i][j] for i in range(m)) - mp.mpf(nu[j])) for j in range(n)
            )
            if max(row_err, col_err) < tol:
                break
    return [[float(u[i] * K[i][j] * v[j]) for j in range(n)] for i in range(m)]


def lp_transport_optimum(cost, mu, nu):
    """Exact unregularized optimum by enumerating basic feasible solutions."""
    m, n = cost.shape
    nv = m * n
    A = np.zeros((m + n, nv))
    for i in range(m):
        A[i, i * n : (i + 1) * n] = 1.0
    for j in range(n):
        A[m + j, j::n] = 1.0
    b = np.concatenate([mu, nu])
    best = math.inf
    for basis in itertools.combinations(range(nv), m + n - 1):
        Ab = A[:, basis]
        sol, residual, rank, _ = np.linalg.lstsq(Ab, b, rcond=None)
        if rank < m + n - 1:
            continue
        if np.linalg.norm(Ab @ sol - b) > 1e-9:
            continue
        if (sol < -1e-12).any():
            continue
        x = np.zeros(nv)
        x[list(basis)] = sol
        best = min(best, float(cost.reshape(-1) @ x))
    return best


def entropic_cost(plan: torch.Tensor, cost: torch.Tensor) -> float:
    return float((plan * cost).sum().item())
