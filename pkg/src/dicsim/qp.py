"""Self-contained convex QP solver.

Problems have the form

    minimize    0.5 x'Q x + q'x
    subject to  A x = b,  l <= C x <= u

with Q positive semidefinite.  The engine is a Mehrotra predictor-corrector
interior-point method on the slack form Cx = s, l <= s <= u: a regularized
quasi-definite KKT system is factorized sparsely each iteration and solved
with iterative refinement, inequality rows with empty interior (l == u) are
reclassified as equalities, and a final active-set polish refines converged
iterates to near machine precision.  Primal infeasibility is certified from
diverging duals (Farkas direction).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

OPTIMAL = "optimal"
MAX_ITER = "max_iter"
INFEASIBLE = "infeasible"

_REG = 1e-9  # KKT regularization; refinement removes its bias
_FRACTION_TO_BOUNDARY = 0.99
_DIVERGENCE = 1e13


def _as_csc(mat, shape):
    if mat is None:
        return sp.csc_matrix(shape)
    if sp.issparse(mat):
        out = mat.tocsc().astype(float)
    else:
        out = sp.csc_matrix(np.atleast_2d(np.asarray(mat, dtype=float)))
    if out.shape != shape:
        raise ValueError(f"matrix shape {out.shape} != expected {shape}")
    return out


def _as_vec(vec, n, default=None):
    if vec is None:
        if default is None:
            return np.zeros(n)
        return np.full(n, default, dtype=float)
    out = np.asarray(vec, dtype=float).ravel()
    if out.size != n:
        raise ValueError(f"vector length {out.size} != expected {n}")
    return out


@dataclass
class QpProblem:
    """Convex QP instance: equalities A x = b, box inequalities l <= C x <= u."""

    Q: sp.csc_matrix
    q: np.ndarray
    A: sp.csc_matrix | None = None
    b: np.ndarray | None = None
    C: sp.csc_matrix | None = None
    l: np.ndarray | None = None
    u: np.ndarray | None = None
    names: Sequence[str] | None = None

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        if sp.issparse(self.Q):
            self.Q = self.Q.tocsc().astype(float)
        else:
            self.Q = sp.csc_matrix(np.asarray(self.Q, dtype=float))
        if self.Q.shape != (n, n):
            raise ValueError(f"Q shape {self.Q.shape} inconsistent with q ({n})")
        asym = abs(self.Q - self.Q.T).max() if self.Q.nnz else 0.0
        scale = max(abs(self.Q).max() if self.Q.nnz else 0.0, 1.0)
        if asym > 1e-10 * scale:
            raise ValueError("Q must be symmetric")
        self.Q = ((self.Q + self.Q.T) * 0.5).tocsc()

        m_eq = 0 if self.A is None else sp.csc_matrix(self.A).shape[0]
        self.A = _as_csc(self.A, (m_eq, n))
        self.b = _as_vec(self.b, m_eq)
        m_in = 0 if self.C is None else sp.csc_matrix(self.C).shape[0]
        self.C = _as_csc(self.C, (m_in, n))
        self.l = _as_vec(self.l, m_in, default=-np.inf)
        self.u = _as_vec(self.u, m_in, default=np.inf)
        if np.any(self.l > self.u):
            raise ValueError("inequality bounds require l <= u elementwise")

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m_eq(self) -> int:
        return self.A.shape[0]

    @property
    def m_in(self) -> int:
        return self.C.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return 0.5 * float(x @ (self.Q @ x)) + float(self.q @ x)

    def save(self, path) -> None:
        """Write the problem in the plain-text triplet format (see load)."""
        with open(path, "w") as fh:
            fh.write("# qp-text v1\n")
            fh.write(f"dims {self.n} {self.m_eq} {self.m_in}\n")
            for tag, mat in (("Q", self.Q), ("A", self.A), ("C", self.C)):
                coo = mat.tocoo()
                for i, j, v in zip(coo.row, coo.col, coo.data):
                    fh.write(f"{tag} {i} {j} {float(v)!r}\n")
            for tag, vec in (("q", self.q), ("b", self.b), ("l", self.l), ("u", self.u)):
                for i, v in enumerate(vec):
                    fh.write(f"{tag} {i} {float(v)!r}\n")
            if self.names is not None:
                for i, name in enumerate(self.names):
                    fh.write(f"name {i} {name}\n")
            fh.write("end\n")

    @classmethod
    def load(cls, path) -> "QpProblem":
        """Read a problem written by save().

        Format: one header line `dims n m_eq m_in`, then one entry per line
        (`Q i j v`, `A i j v`, `C i j v` triplets; `q i v`, `b i v`, `l i v`,
        `u i v` vector entries; optional `name i text`), closed by `end`.
        """
        dims = None
        trip = {"Q": [], "A": [], "C": []}
        vecs = {}
        names = {}
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if parts[0] == "dims":
                    dims = tuple(int(p) for p in parts[1:4])
                elif parts[0] in trip:
                    trip[parts[0]].append((int(parts[1]), int(parts[2]), float(parts[3])))
                elif parts[0] in ("q", "b", "l", "u"):
                    vecs.setdefault(parts[0], []).append((int(parts[1]), float(parts[2])))
                elif parts[0] == "name":
                    names[int(parts[1])] = parts[2]
                elif parts[0] == "end":
                    break
                else:
                    raise ValueError(f"{path}:{lineno}: unknown record {parts[0]!r}")
        if dims is None:
            raise ValueError(f"{path}: missing dims header")
        n, m_eq, m_in = dims

        def build(tag, shape):
            entries = trip[tag]
            if not entries:
                return sp.csc_matrix(shape)
            i, j, v = zip(*entries)
            return sp.csc_matrix(sp.coo_matrix((v, (i, j)), shape=shape))

        def vec(tag, size, default=0.0):
            out = np.full(size, default, dtype=float)
            for i, v in vecs.get(tag, []):
                out[i] = v
            return out

        name_list = None
        if names:
            name_list = [names.get(i, f"x{i}") for i in range(n)]
        return cls(
            Q=build("Q", (n, n)),
            q=vec("q", n),
            A=build("A", (m_eq, n)),
            b=vec("b", m_eq),
            C=build("C", (m_in, n)),
            l=vec("l", m_in, default=-np.inf),
            u=vec("u", m_in, default=np.inf),
            names=name_list,
        )


@dataclass
class QpSolution:
    """Primal/dual result. `y` stacks equality duals first, then inequality duals."""

    x: np.ndarray
    y: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    iterations: int
    objective: float
    polished: bool = False
    m_eq: int = 0

    @property
    def y_eq(self) -> np.ndarray:
        return self.y[: self.m_eq]

    @property
    def y_in(self) -> np.ndarray:
        return self.y[self.m_eq :]


def kkt_residuals(problem: QpProblem, x: np.ndarray, y: np.ndarray):
    """Return (primal, dual, complementarity) infinity-norm residuals at (x, y)."""
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    me, mi = problem.m_eq, problem.m_in
    if y.size != me + mi:
        raise ValueError("dual vector length mismatch")
    y_eq, y_in = y[:me], y[me:]

    primal = 0.0
    if me:
        primal = float(np.abs(problem.A @ x - problem.b).max())
    if mi:
        cx = problem.C @ x
        viol = np.maximum(problem.l - cx, 0.0) + np.maximum(cx - problem.u, 0.0)
        primal = max(primal, float(viol.max()))

    grad = problem.Q @ x + problem.q
    if me:
        grad = grad + problem.A.T @ y_eq
    if mi:
        grad = grad + problem.C.T @ y_in
    dual = float(np.abs(grad).max()) if grad.size else 0.0

    comp = 0.0
    if mi:
        cx = problem.C @ x
        up = np.maximum(y_in, 0.0)
        lo = np.maximum(-y_in, 0.0)
        slack_u = np.where(np.isfinite(problem.u), problem.u - cx, np.inf)
        slack_l = np.where(np.isfinite(problem.l), cx - problem.l, np.inf)
        # a dual pushing against an infinite bound is itself a defect
        with np.errstate(invalid="ignore"):
            comp_u = np.where(up > 0, up * slack_u, 0.0)
            comp_l = np.where(lo > 0, lo * slack_l, 0.0)
        comp = float(max(np.abs(comp_u).max(), np.abs(comp_l).max()))
    return primal, dual, comp


def _polish(problem: QpProblem, x, y, res_now, prox_scale):
    """Active-set refinement of a converged iterate.

    Solves the KKT equality system on the rows the duals mark active, with
    tiny regularization plus refinement; accepted only if the result is a
    valid KKT point at least as good as the input."""
    me, mi = problem.m_eq, problem.m_in
    m = me + mi
    if m == 0:
        return None
    G = sp.vstack([problem.A, problem.C], format="csc")
    lb = np.concatenate([problem.b, problem.l])
    ub = np.concatenate([problem.b, problem.u])
    eq_mask = np.zeros(m, dtype=bool)
    eq_mask[:me] = True

    act_tol = 1e-7 * (1.0 + float(np.abs(y).max()) if m else 1.0)
    # mark rows active by dual sign or by slack proximity: interior-point
    # iterates leave weakly-active duals tiny, so duals alone miss rows
    gx = G @ x
    prox = np.maximum(1e-8, prox_scale) * (
        1.0 + np.abs(np.where(np.isfinite(ub), ub, 0.0))
        + np.abs(np.where(np.isfinite(lb), lb, 0.0))
    )
    near_lo = np.isfinite(lb) & (gx - lb <= prox)
    near_up = np.isfinite(ub) & (ub - gx <= prox)
    low = ((y < -act_tol) | near_lo) & ~eq_mask
    upp = ((y > act_tol) | near_up) & ~eq_mask & ~low
    act = eq_mask | low | upp
    n_act = int(act.sum())
    G_act = G[act]
    rhs_act = np.where(eq_mask[act] | upp[act], ub[act], lb[act])
    if not np.all(np.isfinite(rhs_act)):
        return None
    n = problem.n
    delta = 1e-9
    blocks = [[problem.Q + delta * sp.eye(n), G_act.T]]
    if n_act:
        blocks.append([G_act, -delta * sp.eye(n_act)])
    else:
        blocks = [[problem.Q + delta * sp.eye(n)]]
    try:
        lu = spla.splu(sp.bmat(blocks, format="csc") if n_act else blocks[0][0].tocsc())
    except RuntimeError:
        return None
    rhs = np.concatenate([-problem.q, rhs_act])
    sol = lu.solve(rhs)
    for _ in range(3):
        x_p, y_p = sol[:n], sol[n:]
        r1 = problem.Q @ x_p + problem.q + (G_act.T @ y_p if n_act else 0.0)
        r2 = (G_act @ x_p - rhs_act) if n_act else np.zeros(0)
        sol = sol - lu.solve(np.concatenate([r1, r2]))
    x_p, y_act = sol[:n], sol[n:]
    if n_act:
        sign_tol = 1e-8 * (1.0 + float(np.abs(y_act).max()))
        free_mask = ~eq_mask[act]
        y_chk = y_act[free_mask]
        low_chk = low[act][free_mask]
        if np.any(y_chk[low_chk] > sign_tol) or np.any(y_chk[~low_chk] < -sign_tol):
            return None
    y_full = np.zeros_like(y)
    y_full[act] = y_act
    prim, dual, _ = kkt_residuals(problem, x_p, y_full)
    if max(prim, dual) <= max(res_now, 1e-10):
        return x_p, y_full, prim, dual
    return None


def _residual_scales(problem, x, s, lam, y):
    cx = problem.C @ x if problem.m_in else np.zeros(0)
    sp_ = 1.0 + max(
        float(np.abs(cx).max()) if cx.size else 0.0,
        float(np.abs(s).max()) if s.size else 0.0,
        float(np.abs(problem.b).max()) if problem.m_eq else 0.0,
    )
    sd_ = 1.0 + max(
        float(np.abs(problem.Q @ x).max()) if problem.n else 0.0,
        float(np.abs(problem.q).max()) if problem.n else 0.0,
    )
    return sp_, sd_


def solve(
    problem: QpProblem,
    tol: float = 1e-5,
    max_iter: int = 200,
    warm_start: tuple[np.ndarray, np.ndarray] | QpSolution | None = None,
    polish: bool = True,
) -> QpSolution:
    """Solve the QP to tolerance `tol` on primal and dual residuals.

    Convergence uses the absolute-plus-relative criterion r <= tol * (1 +
    scale) with scale from the iterate norms.  Deterministic: identical
    inputs (including warm start) give identical output.  Warm starting
    seeds the primal iterate and typically shaves iterations; the solution
    itself is unaffected beyond tolerance."""
    n = problem.n
    me_orig, mi_orig = problem.m_eq, problem.m_in
    if n == 0:
        return QpSolution(np.zeros(0), np.zeros(me_orig + mi_orig), OPTIMAL,
                          0.0, 0.0, 0, 0.0, m_eq=me_orig)

    # reclassify inequality rows with empty interior as equalities
    span = problem.u - problem.l
    with np.errstate(invalid="ignore"):
        is_eq_row = np.isfinite(span) & (
            span <= 1e-12 * np.maximum(1.0, np.abs(problem.u))
        )
    idx_eq = np.where(is_eq_row)[0]
    idx_in = np.where(~is_eq_row)[0]
    A = sp.vstack([problem.A, problem.C[idx_eq]], format="csc") if len(idx_eq) else problem.A
    b = np.concatenate([problem.b, 0.5 * (problem.l[idx_eq] + problem.u[idx_eq])])
    C = problem.C[idx_in]
    l = problem.l[idx_in]
    u = problem.u[idx_in]
    Q, q = problem.Q, problem.q
    me, mi = A.shape[0], C.shape[0]

    fl = np.isfinite(l)
    fu = np.isfinite(u)
    npairs = int(fl.sum() + fu.sum())
    reg = _REG

    # initial point: equality-respecting ridge solve, or the warm primal
    if isinstance(warm_start, QpSolution):
        warm_start = (warm_start.x, warm_start.y)
    if warm_start is not None:
        x = np.asarray(warm_start[0], dtype=float).ravel().copy()
        if x.size != n:
            raise ValueError("warm start dimensions do not match problem")
        y = np.zeros(me)
    else:
        H0 = (Q + C.T @ C + sp.eye(n)).tocsc() if mi else (Q + sp.eye(n)).tocsc()
        mid = np.where(fl & fu, 0.5 * (l + u),
                       np.where(fl, l + 1.0, np.where(fu, u - 1.0, 0.0)))
        rhs0 = -q + (C.T @ mid if mi else 0.0)
        if me:
            K0 = sp.bmat([[H0, A.T], [A, -reg * sp.eye(me)]], format="csc")
            try:
                sol0 = spla.splu(K0).solve(np.concatenate([rhs0, b]))
                x, y = sol0[:n], sol0[n:]
            except RuntimeError:
                x, y = np.zeros(n), np.zeros(me)
        else:
            x = spla.splu(H0).solve(rhs0)
            y = np.zeros(0)

    cx = C @ x if mi else np.zeros(0)
    if warm_start is not None:
        # near-optimal primal: keep slacks where they are (tiny interior
        # margin) and start far down the central path
        mu0 = 1e-3
        gap = np.where(fl & fu, np.minimum(1e-6 * (1.0 + np.abs(u - l)),
                                           0.25 * (u - l)), 1e-6)
    else:
        mu0 = 1.0
        gap = np.where(fl & fu, 0.05 * (u - l), 0.5)
    s = np.clip(cx, np.where(fl, l + gap, -np.inf), np.where(fu, u - gap, np.inf))
    p = np.where(fl, s - l, 1.0)
    w = np.where(fu, u - s, 1.0)
    zl = np.where(fl, np.minimum(mu0 / np.maximum(p, 1e-10), 1e8), 0.0)
    zu = np.where(fu, np.minimum(mu0 / np.maximum(w, 1e-10), 1e8), 0.0)

    best = None
    status = MAX_ITER
    iters_done = max_iter
    mu = 1.0
    sharpen_left = None  # extra centrality steps after residual convergence

    for it in range(1, max_iter + 1):
        lam = zu - zl
        p = np.where(fl, s - l, 1.0)
        w = np.where(fu, u - s, 1.0)
        rd = Q @ x + q + (A.T @ y if me else 0.0) + (C.T @ lam if mi else 0.0)
        rb = (A @ x - b) if me else np.zeros(0)
        rc = (C @ x - s) if mi else np.zeros(0)
        mu_prev = mu
        mu = ((np.where(fl, p * zl, 0.0).sum()
               + np.where(fu, w * zu, 0.0).sum()) / npairs) if npairs else 0.0
        rp = max(float(np.abs(rb).max()) if me else 0.0,
                 float(np.abs(rc).max()) if mi else 0.0)
        rdm = float(np.abs(rd).max()) if n else 0.0
        if not (np.isfinite(rp) and np.isfinite(rdm) and np.isfinite(mu)):
            break
        sp_, sd_ = _residual_scales(problem, x, s, lam, y)
        score = max(rp / (tol * sp_), rdm / (tol * sd_),
                    (mu / (tol * max(sp_, sd_))) if npairs else 0.0)
        if best is None or score < best[0]:
            best = (score, x.copy(), y.copy(), lam.copy(), mu)
        if score <= 1.0:
            if status != OPTIMAL:
                status = OPTIMAL
                iters_done = it
                # keep sharpening the active set: flat objective directions
                # are resolved only to duality-gap precision
                sharpen_left = 12
            if npairs == 0 or mu <= 1e-13 * max(sp_, sd_):
                break
            if sharpen_left is not None:
                sharpen_left -= 1
                if sharpen_left <= 0 or mu > 0.5 * mu_prev:
                    break
        elif status == OPTIMAL:
            break

        # Farkas-style primal infeasibility certificate from diverging duals
        dual_norm = max(float(np.abs(y).max()) if me else 0.0,
                        float(np.abs(lam).max()) if mi else 0.0)
        if dual_norm > 1e6 * (1.0 + float(np.abs(q).max())):
            ybar = y / dual_norm
            lbar = lam / dual_norm
            cert = float(np.abs((A.T @ ybar if me else 0.0)
                                + (C.T @ lbar if mi else 0.0)).max())
            support = float((b @ ybar if me else 0.0)
                            + np.where(np.isfinite(u), u, 0.0) @ np.maximum(lbar, 0.0)
                            + np.where(np.isfinite(l), l, 0.0) @ np.minimum(lbar, 0.0))
            open_up = bool(np.any(~np.isfinite(u) & (lbar > 1e-9)))
            open_lo = bool(np.any(~np.isfinite(l) & (lbar < -1e-9)))
            if cert <= 1e-9 and support < -1e-9 and not (open_up or open_lo):
                y_out = np.zeros(me_orig + mi_orig)
                y_out[:me_orig] = ybar[:me_orig]
                y_out[me_orig + idx_in] = lbar
                if len(idx_eq):
                    y_out[me_orig + idx_eq] = ybar[me_orig:]
                return QpSolution(x, y_out, INFEASIBLE, cert, rdm, it,
                                  float("nan"), m_eq=me_orig)
        if dual_norm > _DIVERGENCE:
            break

        pg = np.maximum(p, 1e-14)
        wg = np.maximum(w, 1e-14)
        sig_w = np.where(fl, zl / pg, 0.0) + np.where(fu, zu / wg, 0.0)
        H = (Q + C.T @ sp.diags(sig_w) @ C).tocsc() if mi else Q.tocsc()
        lu = None
        for _ in range(6):
            try:
                if me:
                    K = sp.bmat([[H + reg * sp.eye(n), A.T],
                                 [A, -reg * sp.eye(me)]], format="csc")
                else:
                    K = (H + reg * sp.eye(n)).tocsc()
                lu = spla.splu(K)
                break
            except RuntimeError:
                reg *= 100.0
        if lu is None:
            break

        def kkt_solve(r1, r2):
            # refinement removes the regularization bias
            sol = lu.solve(np.concatenate([r1, r2]) if me else r1)
            for _ in range(2):
                if me:
                    dx, dy = sol[:n], sol[n:]
                    res = np.concatenate([r1 - (H @ dx + A.T @ dy), r2 - A @ dx])
                else:
                    res = r1 - H @ sol
                sol = sol + lu.solve(res)
            return (sol[:n], sol[n:]) if me else (sol, np.zeros(0))

        def newton(sig_mu, dsa=None, dzla=None, dzua=None):
            comp_l = sig_mu - p * zl - ((dsa * dzla) if dsa is not None else 0.0)
            comp_u = sig_mu - w * zu - ((-dsa * dzua) if dsa is not None else 0.0)
            g_l = np.where(fl, comp_l / pg, 0.0)
            g_u = np.where(fu, comp_u / wg, 0.0)
            rhs_x = -rd - (C.T @ (sig_w * rc + (g_u - g_l)) if mi else 0.0)
            dx, dy = kkt_solve(rhs_x, -rb if me else None)
            ds = (C @ dx + rc) if mi else np.zeros(0)
            dzl = np.where(fl, (comp_l - zl * ds) / pg, 0.0)
            dzu = np.where(fu, (comp_u + zu * ds) / wg, 0.0)
            return dx, dy, ds, dzl, dzu

        def step_max(v, dv, mask):
            neg = mask & (dv < 0)
            if not neg.any():
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        dxa, dya, dsa, dzla, dzua = newton(0.0)
        a_aff = min(step_max(p, dsa, fl), step_max(w, -dsa, fu),
                    step_max(zl, dzla, fl), step_max(zu, dzua, fu))
        if npairs:
            mu_aff = (np.where(fl, (p + a_aff * dsa) * (zl + a_aff * dzla), 0.0).sum()
                      + np.where(fu, (w - a_aff * dsa) * (zu + a_aff * dzua), 0.0).sum()
                      ) / npairs
            sigma = min(1.0, max(0.0, mu_aff / max(mu, 1e-300))) ** 3
        else:
            sigma = 0.0
        dx, dy, ds, dzl, dzu = newton(sigma * mu, dsa, dzla, dzua)
        a = min(step_max(p, ds, fl), step_max(w, -ds, fu),
                step_max(zl, dzl, fl), step_max(zu, dzu, fu))
        a = min(1.0, _FRACTION_TO_BOUNDARY * a)
        x = x + a * dx
        y = y + a * dy
        if mi:
            s = s + a * ds
            zl = np.maximum(zl + a * dzl, 0.0)
            zu = np.maximum(zu + a * dzu, 0.0)
        cx = C @ x if mi else np.zeros(0)

    mu_final = mu
    if best is not None:
        _, x, y, lam, mu_final = best
    else:
        lam = zu - zl if mi else np.zeros(0)

    # map duals back to the original row order
    y_out = np.zeros(me_orig + mi_orig)
    y_out[:me_orig] = y[:me_orig] if me else np.zeros(me_orig)
    if mi:
        y_out[me_orig + idx_in] = lam
    if len(idx_eq):
        y_out[me_orig + idx_eq] = y[me_orig:]

    rp_un, rd_un, _ = kkt_residuals(problem, x, y_out)

    polished = False
    if polish and (me_orig + mi_orig):
        prox_scale = max(rp_un, rd_un, np.sqrt(max(mu_final, 0.0)))
        ref = _polish(problem, x, y_out, max(rp_un, rd_un), prox_scale)
        if ref is not None:
            x, y_out, rp_un, rd_un = ref
            polished = True
            # a polished point can certify optimality even off a max_iter exit
            if status != OPTIMAL:
                s_chk = problem.C @ x if problem.m_in else np.zeros(0)
                sp_, sd_ = _residual_scales(problem, x, s_chk, y_out[me_orig:],
                                            y_out[:me_orig])
                _, _, comp = kkt_residuals(problem, x, y_out)
                if (rp_un <= tol * sp_ and rd_un <= tol * sd_
                        and comp <= tol * max(sp_, sd_)):
                    status = OPTIMAL
                    iters_done = max_iter

    return QpSolution(
        x=x,
        y=y_out,
        status=status,
        primal_residual=rp_un,
        dual_residual=rd_un,
        iterations=iters_done if status == OPTIMAL else max_iter,
        objective=problem.objective(x),
        polished=polished,
        m_eq=me_orig,
    )
