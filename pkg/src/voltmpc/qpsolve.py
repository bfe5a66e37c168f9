"""Small dense convex QP solver: box bounds plus affine equalities.

    minimize    0.5 y'Hy + f'y
    subject to  Aeq y = beq,   lo <= y <= hi

The engine is an operator-splitting iteration on the stacked constraint
C y in [l, u] with C = [Aeq; I], using one LU factorization of the fixed
KKT matrix per problem. A polishing step solves the equality-constrained
QP on the detected active set and is accepted only if the full KKT
conditions verify at the requested tolerance, so returned "optimal"
solutions are exact to that tolerance regardless of the path taken.

Repeated solves of the same problem with a new linear term (the consensus
inner loop does thousands of these) reuse the cached factorizations and the
last active set, which usually turns a solve into a single back-substitution
plus a verification pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import VoltmpcError


class UnboundedProblemError(VoltmpcError):
    """Dual infeasibility certificate found: objective unbounded below."""


@dataclass(eq=False)
class QpProblem:
    h: np.ndarray
    f: np.ndarray
    a_eq: np.ndarray
    b_eq: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        self.h = np.asarray(self.h, dtype=float)
        self.f = np.asarray(self.f, dtype=float)
        n = self.f.shape[0]
        if self.h.shape != (n, n):
            raise ValueError(f"H must be {n}x{n}")
        self.a_eq = np.asarray(self.a_eq, dtype=float).reshape(-1, n)
        self.b_eq = np.asarray(self.b_eq, dtype=float).reshape(-1)
        if self.a_eq.shape[0] != self.b_eq.shape[0]:
            raise ValueError("Aeq and beq row counts differ")
        self.lo = np.asarray(self.lo, dtype=float).reshape(-1)
        self.hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if self.lo.shape[0] != n or self.hi.shape[0] != n:
            raise ValueError("bound vectors must match the variable count")
        if np.any(self.lo > self.hi):
            raise ValueError("lo > hi for some component")
        scale = max(1.0, float(np.abs(self.h).max(initial=0.0)))
        if np.abs(self.h - self.h.T).max(initial=0.0) > 1e-9 * scale:
            raise ValueError("H must be symmetric")
        if n and np.linalg.eigvalsh(self.h).min() < -1e-8 * scale:
            raise ValueError("H must be positive semidefinite")

    @property
    def n(self) -> int:
        return self.f.shape[0]

    @property
    def m_eq(self) -> int:
        return self.b_eq.shape[0]

    def objective(self, y: np.ndarray) -> float:
        return float(0.5 * y @ self.h @ y + self.f @ y)


@dataclass(frozen=True)
class KktResiduals:
    stationarity: float
    primal_eq: float
    bound_violation: float
    complementarity: float

    def worst(self) -> float:
        return max(
            self.stationarity,
            self.primal_eq,
            self.bound_violation,
            self.complementarity,
        )


@dataclass(eq=False)
class QpSolution:
    y: np.ndarray
    objective: float
    status: str  # optimal | infeasible | max_iter
    iterations: int
    residuals: KktResiduals
    dual_eq: np.ndarray
    dual_bounds: np.ndarray
    detail: str = ""


def _residuals_from(
    p: QpProblem,
    f: np.ndarray,
    b_eq: np.ndarray,
    y: np.ndarray,
    nu: np.ndarray,
    w_box: np.ndarray,
) -> KktResiduals:
    grad = p.h @ y + f + w_box
    if p.m_eq:
        grad = grad + p.a_eq.T @ nu
    stationarity = float(np.abs(grad).max(initial=0.0))
    primal_eq = (
        float(np.abs(p.a_eq @ y - b_eq).max(initial=0.0)) if p.m_eq else 0.0
    )
    bound_violation = float(
        max(
            np.maximum(p.lo - y, 0.0).max(initial=0.0),
            np.maximum(y - p.hi, 0.0).max(initial=0.0),
        )
    )
    pos = np.maximum(w_box, 0.0)
    neg = np.maximum(-w_box, 0.0)
    hi_gap = p.hi - y
    lo_gap = y - p.lo
    hi_inf = np.isinf(hi_gap)
    lo_inf = np.isinf(lo_gap)
    comp_hi = np.where(hi_inf, pos, np.abs(pos * np.where(hi_inf, 1.0, hi_gap)))
    comp_lo = np.where(lo_inf, neg, np.abs(neg * np.where(lo_inf, 1.0, lo_gap)))
    comp = max(comp_hi.max(initial=0.0), comp_lo.max(initial=0.0))
    return KktResiduals(stationarity, primal_eq, bound_violation, float(comp))


class QpSolver:
    """Reusable solver bound to one problem structure.

    ``update_linear`` swaps f and/or beq without re-factorizing anything;
    the active-set and KKT factor caches then make warm re-solves cheap.
    """

    def __init__(
        self,
        problem: QpProblem,
        *,
        sigma: float = 1e-6,
        alpha: float = 1.6,
        rho_box: float | None = None,
        rho_eq: float | None = None,
    ):
        self.problem = problem
        self.sigma = sigma
        self.alpha = alpha
        n, m = problem.n, problem.m_eq
        self._f = problem.f.copy()
        self._b_eq = problem.b_eq.copy()
        # penalties follow the cost curvature so the splitting contraction
        # rate does not collapse on strongly convex problems
        scale = max(1.0, float(np.abs(np.diag(problem.h)).mean()) if n else 1.0)
        if rho_box is None:
            rho_box = 0.1 * scale
        if rho_eq is None:
            rho_eq = 1e3 * scale
        self._rho = np.concatenate([np.full(m, rho_eq), np.full(n, rho_box)])
        self._lu = None  # splitting KKT factorization, built on demand
        self._x = np.zeros(n)
        self._z = np.clip(np.concatenate([self._b_eq, np.zeros(n)]),
                          self._stack_lo(), self._stack_hi())
        self._w = np.zeros(m + n)
        self._last_active: tuple[tuple[int, ...], tuple[int, ...]] | None = None
        self._polish_cache: dict = {}

    # -- constraint stacking helpers -------------------------------------
    def _stack_lo(self) -> np.ndarray:
        return np.concatenate([self._b_eq, self.problem.lo])

    def _stack_hi(self) -> np.ndarray:
        return np.concatenate([self._b_eq, self.problem.hi])

    def _c_mat(self) -> np.ndarray:
        return np.vstack([self.problem.a_eq, np.eye(self.problem.n)])

    def update_linear(
        self, f: np.ndarray | None = None, b_eq: np.ndarray | None = None
    ) -> None:
        if f is not None:
            self._f = np.asarray(f, dtype=float).copy()
        if b_eq is not None:
            self._b_eq = np.asarray(b_eq, dtype=float).reshape(-1).copy()
            if self._b_eq.shape[0] != self.problem.m_eq:
                raise ValueError("beq length changed")

    # -- polishing ---------------------------------------------------------
    def _polish_factor(self, low: tuple[int, ...], up: tuple[int, ...]):
        key = (low, up)
        fac = self._polish_cache.get(key)
        if fac is None:
            p = self.problem
            n, m = p.n, p.m_eq
            act = list(low) + list(up)
            na = len(act)
            sel = np.zeros((na, n))
            for r, j in enumerate(act):
                sel[r, j] = 1.0
            size = n + m + na
            kkt = np.zeros((size, size))
            kkt[:n, :n] = p.h
            kkt[:n, n : n + m] = p.a_eq.T
            kkt[n : n + m, :n] = p.a_eq
            kkt[:n, n + m :] = sel.T
            kkt[n + m :, :n] = sel
            delta = 1e-8
            reg = np.concatenate([np.full(n, delta), np.full(m + na, -delta)])
            try:
                fac = (scipy.linalg.lu_factor(kkt + np.diag(reg)), kkt, act)
            except (scipy.linalg.LinAlgError, ValueError):
                fac = (None, kkt, act)
            if len(self._polish_cache) > 64:
                self._polish_cache.clear()
            self._polish_cache[key] = fac
        return fac

    def _try_polish(
        self, low: tuple[int, ...], up: tuple[int, ...], tol: float
    ) -> QpSolution | None:
        p = self.problem
        n, m = p.n, p.m_eq
        fac, kkt, act = self._polish_factor(low, up)
        if fac is None:
            return None
        bounds = np.concatenate(
            [p.lo[list(low)] if low else np.empty(0), p.hi[list(up)] if up else np.empty(0)]
        )
        rhs = np.concatenate([-self._f, self._b_eq, bounds])
        sol = np.zeros_like(rhs)
        for _ in range(3):  # iterative refinement against the unregularized KKT
            resid = rhs - kkt @ sol
            sol = sol + scipy.linalg.lu_solve(fac, resid)
        y = sol[:n]
        nu = sol[n : n + m]
        mu = sol[n + m :]
        if not np.all(np.isfinite(sol)):
            return None
        w_box = np.zeros(n)
        for r, j in enumerate(act):
            w_box[j] += mu[r]
        # multiplier signs: lower-active push down (w <= 0), upper-active up
        n_low = len(low)
        if np.any(mu[:n_low] > tol) or np.any(mu[n_low:] < -tol):
            return None
        res = _residuals_from(p, self._f, self._b_eq, y, nu, w_box)
        if res.worst() > tol:
            return None
        self._last_active = (low, up)
        return QpSolution(
            y=y,
            objective=float(0.5 * y @ p.h @ y + self._f @ y),
            status="optimal",
            iterations=0,
            residuals=res,
            dual_eq=nu,
            dual_bounds=w_box,
        )

    def _active_from_iterate(self, tol_act: float = 1e-7) -> tuple[tuple[int, ...], tuple[int, ...]]:
        p = self.problem
        m = p.m_eq
        zb = self._z[m:]
        wb = self._w[m:]
        low, up = [], []
        for j in range(p.n):
            if p.lo[j] == p.hi[j]:
                low.append(j)  # pinned variable: single equality suffices
            elif wb[j] < -tol_act or zb[j] - p.lo[j] < tol_act:
                low.append(j)
            elif wb[j] > tol_act or p.hi[j] - zb[j] < tol_act:
                up.append(j)
        return tuple(low), tuple(up)

    # -- main solve ---------------------------------------------------------
    def solve(self, tol: float = 1e-9, max_iter: int = 20000) -> QpSolution:
        p = self.problem
        n, m = p.n, p.m_eq

        # fast path: re-verify the last active set, then the interior guess
        tried = set()
        candidates = []
        if self._last_active is not None:
            candidates.append(self._last_active)
        pinned = tuple(j for j in range(n) if p.lo[j] == p.hi[j])
        candidates.append((pinned, ()))
        for cand in candidates:
            if cand in tried:
                continue
            tried.add(cand)
            sol = self._try_polish(cand[0], cand[1], tol)
            if sol is not None:
                self._x = sol.y.copy()
                self._z = np.concatenate([self._b_eq, sol.y])
                self._w = np.concatenate([sol.dual_eq, sol.dual_bounds])
                return sol

        # operator-splitting loop
        if self._lu is None:
            c = self._c_mat()
            kkt = np.block(
                [
                    [p.h + self.sigma * np.eye(n), c.T],
                    [c, -np.diag(1.0 / self._rho)],
                ]
            )
            self._lu = (scipy.linalg.lu_factor(kkt), c)
        lu, c = self._lu
        lo_s, hi_s = self._stack_lo(), self._stack_hi()

        x, z, w = self._x.copy(), self._z.copy(), self._w.copy()
        z = np.clip(z, lo_s, hi_s)
        rho, alpha = self._rho, self.alpha
        f, b_eq = self._f, self._b_eq

        check_every = 25
        x_prev, w_prev = x.copy(), w.copy()
        best: tuple[float, np.ndarray, np.ndarray, np.ndarray] | None = None
        iteration = 0
        while iteration < max_iter:
            for _ in range(check_every):
                rhs = np.concatenate([self.sigma * x - f, z - w / rho])
                sol = scipy.linalg.lu_solve(lu, rhs)
                xt = sol[:n]
                zt = z + (sol[n:] - w) / rho
                x = alpha * xt + (1.0 - alpha) * x
                z_tmp = alpha * zt + (1.0 - alpha) * z + w / rho
                z = np.clip(z_tmp, lo_s, hi_s)
                w = rho * (z_tmp - z)
                iteration += 1

            cx = c @ x
            prim = float(np.abs(cx - z).max(initial=0.0))
            dual = float(np.abs(p.h @ x + f + c.T @ w).max(initial=0.0))
            score = max(prim, dual)
            if best is None or score < best[0]:
                best = (score, x.copy(), z.copy(), w.copy())

            if score <= max(tol, 1e-6):
                self._x, self._z, self._w = x, z, w
                low, up = self._active_from_iterate()
                if (low, up) not in tried:
                    tried.add((low, up))
                    sol_pol = self._try_polish(low, up, tol)
                    if sol_pol is not None:
                        self._x = sol_pol.y.copy()
                        self._z = np.concatenate([self._b_eq, sol_pol.y])
                        self._w = np.concatenate(
                            [sol_pol.dual_eq, sol_pol.dual_bounds]
                        )
                        sol_pol.iterations = iteration
                        return sol_pol
                if score <= tol:
                    # raw iterate already meets the tolerance
                    res = _residuals_from(p, f, b_eq, x, w[:m], w[m:])
                    if res.worst() <= tol:
                        return QpSolution(
                            y=x.copy(),
                            objective=float(0.5 * x @ p.h @ x + f @ x),
                            status="optimal",
                            iterations=iteration,
                            residuals=res,
                            dual_eq=w[:m].copy(),
                            dual_bounds=w[m:].copy(),
                        )

            status = self._certificates(x - x_prev, w - w_prev, c, lo_s, hi_s)
            if status is not None:
                self._x, self._z, self._w = x, z, w
                res = _residuals_from(p, f, b_eq, x, w[:m], w[m:])
                if status == "unbounded":
                    raise UnboundedProblemError(
                        "dual infeasibility certificate: objective unbounded below"
                    )
                return QpSolution(
                    y=x.copy(),
                    objective=float(0.5 * x @ p.h @ x + f @ x),
                    status="infeasible",
                    iterations=iteration,
                    residuals=res,
                    dual_eq=w[:m].copy(),
                    dual_bounds=w[m:].copy(),
                    detail="primal infeasibility certificate from splitting iterates",
                )
            x_prev, w_prev = x.copy(), w.copy()

        _, xb, zb, wb = best if best is not None else (0.0, x, z, w)
        self._x, self._z, self._w = xb, zb, wb
        res = _residuals_from(p, f, b_eq, xb, wb[:m], wb[m:])
        return QpSolution(
            y=xb.copy(),
            objective=float(0.5 * xb @ p.h @ xb + f @ xb),
            status="max_iter",
            iterations=max_iter,
            residuals=res,
            dual_eq=wb[:m].copy(),
            dual_bounds=wb[m:].copy(),
            detail="iteration limit reached; best iterate returned",
        )

    def _certificates(
        self,
        dx: np.ndarray,
        dw: np.ndarray,
        c: np.ndarray,
        lo_s: np.ndarray,
        hi_s: np.ndarray,
    ) -> str | None:
        eps = 1e-6
        # primal infeasibility: a separating dual direction stopped improving
        norm_dw = float(np.abs(dw).max(initial=0.0))
        if norm_dw > 1e-12:
            if float(np.abs(c.T @ dw).max(initial=0.0)) <= eps * norm_dw:
                pos, neg = np.maximum(dw, 0.0), np.minimum(dw, 0.0)
                support = 0.0
                ok = True
                for j in range(dw.shape[0]):
                    if pos[j] > 0:
                        if np.isinf(hi_s[j]):
                            if pos[j] > eps * norm_dw:
                                ok = False
                                break
                        else:
                            support += hi_s[j] * pos[j]
                    if neg[j] < 0:
                        if np.isinf(lo_s[j]):
                            if -neg[j] > eps * norm_dw:
                                ok = False
                                break
                        else:
                            support += lo_s[j] * neg[j]
                if ok and support <= -eps * norm_dw:
                    return "infeasible"
        # dual infeasibility: an unbounded descent ray
        norm_dx = float(np.abs(dx).max(initial=0.0))
        if norm_dx > 1e-12:
            if (
                float(np.abs(self.problem.h @ dx).max(initial=0.0)) <= eps * norm_dx
                and float(self._f @ dx) <= -eps * norm_dx
            ):
                cdx = c @ dx
                ok = True
                for j in range(cdx.shape[0]):
                    if np.isfinite(hi_s[j]) and cdx[j] > eps * norm_dx:
                        ok = False
                        break
                    if np.isfinite(lo_s[j]) and cdx[j] < -eps * norm_dx:
                        ok = False
                        break
                if ok:
                    return "unbounded"
        return None


def solve_qp(
    problem: QpProblem, tol: float = 1e-9, max_iter: int = 20000
) -> QpSolution:
    """One-shot solve; see QpSolver for the reusable interface."""
    return QpSolver(problem).solve(tol=tol, max_iter=max_iter)
