"""Independent reference solvers used to cross-check the production code.

These deliberately share no code path with dicsim: the QP oracle enumerates
active sets by brute force, and the projection oracle runs plain projected
gradient descent.  Both are slow and only suitable for small instances.
"""

import itertools

import numpy as np


def brute_force_qp(Q, q, A=None, b=None, C=None, u=None, tol=1e-8):
    """Globally solve min 0.5 x'Qx + q'x s.t. Ax = b, Cx <= u by active-set
    enumeration.  Inequalities must be single-sided (upper bounds).  Returns
    (x, objective) of the best KKT-valid candidate.
    """
    Q = np.asarray(Q, dtype=float)
    q = np.asarray(q, dtype=float).ravel()
    n = q.size
    A = np.zeros((0, n)) if A is None else np.atleast_2d(np.asarray(A, dtype=float))
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float).ravel()
    C = np.zeros((0, n)) if C is None else np.atleast_2d(np.asarray(C, dtype=float))
    u = np.zeros(0) if u is None else np.asarray(u, dtype=float).ravel()
    m = C.shape[0]

    best_x, best_obj = None, np.inf
    scale = max(1.0, np.abs(q).max() if n else 1.0, np.abs(Q).max() if n else 1.0)
    for active in itertools.chain.from_iterable(
        itertools.combinations(range(m), k) for k in range(m + 1)
    ):
        Ca = C[list(active)]
        ua = u[list(active)]
        na = len(active)
        me = A.shape[0]
        kkt = np.zeros((n + me + na, n + me + na))
        kkt[:n, :n] = Q
        kkt[:n, n : n + me] = A.T
        kkt[:n, n + me :] = Ca.T
        kkt[n : n + me, :n] = A
        kkt[n + me :, :n] = Ca
        rhs = np.concatenate([-q, b, ua])
        sol, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
        for _ in range(3):  # refinement: active-set KKTs can be ill-conditioned
            corr, *_ = np.linalg.lstsq(kkt, rhs - kkt @ sol, rcond=None)
            sol = sol + corr
        if np.abs(kkt @ sol - rhs).max() > tol * scale:
            continue  # singular active set
        x = sol[:n]
        y_in = sol[n + me :]
        if na and np.any(y_in < -tol * scale):
            continue
        if m and np.any(C @ x - u > tol * scale):
            continue
        if me and np.abs(A @ x - b).max() > tol * scale:
            continue
        obj = 0.5 * x @ Q @ x + q @ x
        if obj < best_obj - 1e-12:
            best_x, best_obj = x, obj
    return best_x, best_obj


def project_sum_box(v, total, lb, ub, tol=1e-12):
    """Euclidean projection of v onto {x : sum(x) = total, lb <= x <= ub}
    by bisection on the shift multiplier."""
    v = np.asarray(v, dtype=float)
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    lo = (total - v.sum()) / v.size - (ub - lb).max() - 1.0
    hi = (total - v.sum()) / v.size + (ub - lb).max() + 1.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        s = np.clip(v + mid, lb, ub).sum()
        if s < total:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return np.clip(v + 0.5 * (lo + hi), lb, ub)


def projected_gradient_qp(Q, q, total, lb, ub, steps=20000):
    """min 0.5 x'Qx + q'x over {sum(x) = total, lb <= x <= ub} by projected
    gradient with a fixed 1/L step."""
    Q = np.asarray(Q, dtype=float)
    q = np.asarray(q, dtype=float).ravel()
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    x = project_sum_box(np.zeros_like(q), total, lb, ub)
    lip = max(np.linalg.eigvalsh(Q).max(), 1e-9)
    step = 1.0 / lip
    for _ in range(steps):
        g = Q @ x + q
        x_new = project_sum_box(x - step * g, total, lb, ub)
        if np.abs(x_new - x).max() < 1e-13:
            x = x_new
            break
        x = x_new
    return x
