"""Discrete optimal transport: log-domain Sinkhorn and an exact LP solver."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

EXACT_SUPPORT_CAP = 64


class OTError(RuntimeError):
    pass


def _check(a, b, C):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if C.shape != (a.size, b.size):
        raise OTError(f"cost shape {C.shape} does not match marginals ({a.size}, {b.size})")
    if (a < 0).any() or (b < 0).any() or not np.isclose(a.sum(), b.sum(), rtol=1e-9, atol=1e-12):
        raise OTError("marginals must be nonnegative with equal mass")
    return a, b, C


def _semi_dual(f, a, b, lb, C, eps):
    # column potentials solved in closed form, so column marginals are exact
    g = eps * lb - eps * logsumexp((f[:, None] - C) / eps, axis=0)
    return f @ a + g @ b, np.exp((f[:, None] + g[None, :] - C) / eps)


def round_to_marginals(P, a, b) -> np.ndarray:
    """Project a near-feasible plan onto the transport polytope of (a, b)."""
    r = P.sum(1)
    P = P * np.minimum(np.divide(a, r, out=np.ones_like(a), where=r > 0), 1.0)[:, None]
    c = P.sum(0)
    P = P * np.minimum(np.divide(b, c, out=np.ones_like(b), where=c > 0), 1.0)[None, :]
    # both scalings only shrink mass, so residuals are nonnegative up to rounding
    er = np.maximum(a - P.sum(1), 0.0)
    ec = np.maximum(b - P.sum(0), 0.0)
    s = er.sum()
    if s > 0:
        P = P + np.outer(er, ec) / s
    return P


def sinkhorn(a, b, C, eps: float, tol: float = 1e-9, max_iter: int = 1000, scaling: float = 0.5) -> np.ndarray:
    """Entropic OT plan for cost ``C`` with regularisation ``eps``.

    Maximises the entropic semi-dual over the row potentials: the column
    potentials are eliminated in closed form, and each iteration is a Newton
    step with a backtracking search that accepts either sufficient ascent of
    the semi-dual objective or a smaller row marginal residual, falling back to
    a plain alternating scaling update if the search stalls.
    Potentials are warm started on a geometric ladder of regularisations from
    ``max(C)`` down to ``eps``.  ``max_iter`` bounds the total iteration count
    across the ladder.  Stops once the L1 marginal violation is below ``tol``;
    the returned plan is then rounded onto the exact marginals.
    """
    a, b, C = _check(a, b, C)
    if eps <= 0:
        raise OTError("eps must be > 0")
    keep_a, keep_b = a > 0, b > 0
    if not (keep_a.all() and keep_b.all()):
        # zero-mass support points carry no plan entries
        P = np.zeros(C.shape)
        P[np.ix_(keep_a, keep_b)] = sinkhorn(a[keep_a], b[keep_b], C[np.ix_(keep_a, keep_b)], eps, tol, max_iter, scaling)
        return P
    la, lb = np.log(a), np.log(b)
    n = a.size
    f = np.zeros(n)
    ladder = [eps]
    if scaling:
        e = max(float(C.max()), eps)
        while e > eps:
            ladder.insert(-1, e)
            e *= scaling
    it = 0
    for stage, e in enumerate(ladder):
        stage_tol = tol if stage == len(ladder) - 1 else max(tol, 1e-6)
        obj, P = _semi_dual(f, a, b, lb, C, e)
        r = P.sum(1)
        viol = np.abs(r - a).sum()
        while viol >= stage_tol:
            if it >= max_iter:
                raise OTError(
                    f"Sinkhorn did not converge in {max_iter} iterations "
                    f"(eps={eps:.3g}, marginal violation {viol:.3g})"
                )
            it += 1
            step = np.zeros(n)
            if n > 1:
                # Hessian of the semi-dual, gauge fixed by pinning the last potential
                H = (np.diag(r) - (P / b[None, :]) @ P.T)[:-1, :-1]
                H += 1e-13 * max(np.trace(H), 1e-300) * np.eye(n - 1)
                step[:-1] = e * np.linalg.solve(H, (a - r)[:-1])
            slope = float((a - r) @ step)
            accepted = False
            if np.isfinite(step).all() and slope > 0:
                t = 1.0
                while t >= 1e-10:
                    with np.errstate(over="ignore", invalid="ignore"):
                        obj_new, P_new = _semi_dual(f + t * step, a, b, lb, C, e)
                    if not np.isfinite(obj_new) or not np.isfinite(P_new).all():
                        t *= 0.5
                        continue
                    if obj_new >= obj + 1e-4 * t * slope:
                        f = f + t * step
                        accepted = True
                        break
                    # near the optimum the objective gain falls below float resolution,
                    # so a shrinking residual at an unchanged objective also counts
                    flat = obj_new >= obj - 1e-12 * max(1.0, abs(obj))
                    if flat and np.abs(P_new.sum(1) - a).sum() < viol:
                        f = f + t * step
                        accepted = True
                        break
                    t *= 0.5
            if not accepted:
                g = e * lb - e * logsumexp((f[:, None] - C) / e, axis=0)
                f = e * la - e * logsumexp((g[None, :] - C) / e, axis=1)
                obj_new, P_new = _semi_dual(f, a, b, lb, C, e)
            obj, P = obj_new, P_new
            r = P.sum(1)
            viol = np.abs(r - a).sum()
    return round_to_marginals(P, a, b)


def exact_ot(a, b, C) -> tuple[float, np.ndarray]:
    """Optimal transport cost and plan via the HiGHS linear-programming solver."""
    a, b, C = _check(a, b, C)
    n, m = C.shape
    if max(n, m) > EXACT_SUPPORT_CAP:
        raise OTError(f"exact solver support cap: {max(n, m)} > {EXACT_SUPPORT_CAP} support points")
    A_eq = np.zeros((n + m, n * m))
    for i in range(n):
        A_eq[i, i * m : (i + 1) * m] = 1.0
    for j in range(m):
        A_eq[n + j, j::m] = 1.0
    res = linprog(C.ravel(), A_eq=A_eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    if res.status != 0:
        raise OTError(f"LP solver failed: {res.message}")
    P = res.x.reshape(n, m)
    return float((C * P).sum()), P


def transport_cost(a, b, C, solver: str = "sinkhorn", eps: float | None = None, **kw) -> float:
    """``<C, P>`` for the chosen solver; ``eps`` defaults to 0.05 x mean cost."""
    a, b, C = _check(a, b, C)
    if solver == "exact":
        return exact_ot(a, b, C)[0]
    if solver != "sinkhorn":
        raise OTError(f"unknown solver {solver!r}")
    scale = C.mean()
    if scale == 0:
        return 0.0
    if eps is None:
        eps = 0.05 * scale
    P = sinkhorn(a, b, C, eps, **kw)
    return float((C * P).sum())
