"""Batched Frisch-Newton interior point for penalized panel quantile regression.

The penalized problem

    min  sum_k w_k rho_tau(y_k - x_k'b - a_{i(k)}) + sum_i v_i lam |a_i|

is the unpenalized weighted-check-loss fit of the augmented design
``[X D; 0 lam*I]`` with responses ``(y, 0)``; the data rows carry the
asymmetric weights (tau w, (1 - tau) w) and the penalty rows symmetric
weights (v, v).  We solve the bounded dual LP

    min  c'd   s.t.  W'd = W'l,  0 <= d <= u,     c = -(y, 0)

with Mehrotra's predictor-corrector.  The normal matrix ``W'QW`` has a
diagonal unit block, which is eliminated so each Newton step costs one p x p
solve per problem.  Every array carries a leading batch axis so many
problems sharing (X, unit layout) are solved at once; replicates never
interact, so a problem's iterates do not depend on its batch mates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

STEP_FRACTION = 0.99995


@dataclass
class BatchSolution:
    beta: np.ndarray  # (R, p)
    alpha: np.ndarray  # (R, N)
    converged: np.ndarray  # (R,) bool
    iterations: np.ndarray  # (R,) int
    gap: np.ndarray  # (R,) final relative duality gap


def _segsum(v, starts):
    # contiguous unit blocks, every block nonempty
    return np.add.reduceat(v, starts[:-1], axis=1)


def _step(v, dv):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        r = np.where(dv < 0, -v / dv, np.inf)
    return np.minimum(1.0, r.min(axis=1))


class _Layout:
    """Structured products with the augmented design for one batch."""

    def __init__(self, X, starts, lam, free):
        self.X = X
        self.shared = X.ndim == 2
        self.X3 = X[None] if self.shared else X  # (1 or R, n, p)
        self.starts = starts
        self.unit = np.repeat(np.arange(len(starts) - 1), np.diff(starts))
        self.free = free.astype(np.float64)  # (R, N)
        self.L = lam[:, None] * self.free  # penalty row entries (R, N)
        self.p = X.shape[-1]

    def At(self, yb, ya):
        """Augmented design times coefficients: data rows, penalty rows."""
        ya = ya * self.free
        rd = ya[:, self.unit]
        if self.p:
            rd = rd + (yb @ self.X.T if self.shared else np.einsum("rnp,rp->rn", self.X, yb))
        return rd, self.L * ya

    def A(self, xd, xp):
        """Augmented design transpose times row vector."""
        if not self.p:
            gb = np.zeros((xd.shape[0], 0))
        else:
            gb = xd @ self.X if self.shared else np.einsum("rn,rnp->rp", xd, self.X)
        ga = (_segsum(xd, self.starts) + self.L * xp) * self.free
        return gb, ga

    def solve(self, qd, qp, rb, ra):
        """Solve (W'QW) [db; da] = [rb; ra] by eliminating the unit block."""
        X, st, fr = self.X3, self.starts, self.free
        Qs = _segsum(qd, st)
        pen = self.L**2 * qp
        d = np.where(fr > 0, Qs + pen, 1.0)
        ra = ra * fr
        if self.p == 0:
            return np.zeros((qd.shape[0], 0)), ra / d
        m = np.add.reduceat(qd[:, :, None] * X, st[:-1], axis=1)  # (R, N, p)
        xbar = m / Qs[:, :, None]
        xc = X - xbar[:, self.unit, :]
        # centred within-unit scatter avoids cancellation when one row dominates q
        S = np.matmul(np.swapaxes(xc, 1, 2), qd[:, :, None] * xc)
        kappa = np.where(fr > 0, Qs * pen / d, Qs)
        S += np.matmul(np.swapaxes(xbar, 1, 2), kappa[:, :, None] * xbar)
        rhs = rb - np.einsum("rip,ri->rp", m, fr * ra / d)
        db = np.linalg.solve(S, rhs[:, :, None])[:, :, 0]
        da = fr * (ra - np.einsum("rip,rp->ri", m, db)) / d
        return db, da


def solve_batch(X, starts, Y, lam, tau, *, row_weight=None, free=None, tol=1e-8, max_iter=200):
    """Fit R penalized problems that share the design ``X`` and unit layout.

    Parameters
    ----------
    X : (n, p) covariates shared by all problems, or (R, n, p) per problem; unit-major.
    starts : (N + 1,) block offsets.
    Y : (R, n) responses, one row per problem.
    lam : scalar or (R,) penalty levels.
    row_weight : (n,) positive loss multiplicities, constant within a unit.
    free : (R, N) bool; units with ``free=False`` have their intercept held at 0.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    R, n = Y.shape
    N = len(starts) - 1
    X = np.asarray(X, dtype=np.float64)
    X = X.reshape(R, n, -1) if X.ndim == 3 else X.reshape(n, -1)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (R,)).copy()
    wt = np.ones(n) if row_weight is None else np.asarray(row_weight, dtype=np.float64)
    vw = wt[starts[:-1]]
    free = np.ones((R, N), dtype=bool) if free is None else np.broadcast_to(free, (R, N))
    has_pen = bool(np.any(lam > 0))
    if not has_pen:
        lam[:] = 0.0
    lay = _Layout(X, starts, lam, free)

    # box bounds and the feasible starting point d = lower loss weight
    lo_d = np.broadcast_to((1.0 - tau) * wt, (R, n))
    hi_d = np.broadcast_to(tau * wt, (R, n))
    if has_pen:
        lo_p = np.broadcast_to(vw, (R, N))
        hi_p = lo_p
    else:
        lo_p = hi_p = np.zeros((R, 0))
    u = np.concatenate([lo_d + hi_d, lo_p + hi_p], axis=1)
    c = np.concatenate([-Y, np.zeros((R, lo_p.shape[1]))], axis=1)
    x = np.concatenate([lo_d, lo_p], axis=1).copy()
    s = u - x

    def split(v):
        return v[:, :n], (v[:, n:] if has_pen else np.zeros((R, N)))

    def A(v):
        return lay.A(*split(v))

    def At(yb, ya):
        rd, rp = lay.At(yb, ya)
        return np.concatenate([rd, rp], axis=1) if has_pen else rd

    def normal_solve(q, rb, ra):
        qd, qp = split(q)
        return lay.solve(qd, qp, rb, ra)

    bb, ba = A(x)  # right-hand side W'l
    # least-squares start for the equality multipliers
    ones = np.ones_like(x)
    yb, ya = normal_solve(ones, *A(c))
    r = c - At(yb, ya)
    shift = np.maximum(np.abs(r).mean(axis=1, keepdims=True), 1e-12) * 0.1
    zl = np.maximum(r, 0.0) + shift
    zu = np.maximum(-r, 0.0) + shift

    yscale = np.abs(Y).sum(axis=1)
    active = np.ones(R, dtype=bool)
    iters = np.zeros(R, dtype=np.int64)
    relgap = np.full(R, np.inf)
    m2 = 2.0 * x.shape[1]

    for _ in range(max_iter):
        # convergence check on the current iterate
        res_d, res_p = lay.At(-yb, -ya)
        res_d = Y - res_d
        res_p = -res_p
        f = (np.where(res_d > 0, res_d * hi_d, -res_d * lo_d)).sum(axis=1)
        if has_pen:
            f += (np.abs(res_p) * lo_p).sum(axis=1)
        gap = (x * zl).sum(axis=1) + (s * zu).sum(axis=1)
        pb, pa = A(x)
        pinf = np.abs(pb - bb).sum(axis=1) + np.abs(pa - ba).sum(axis=1)
        rd = c - At(yb, ya) - zl + zu
        dinf = np.abs(rd).sum(axis=1)
        denom = np.maximum(f, 1e-6 * yscale) + 1e-300
        relgap = np.where(active, gap / denom, relgap)
        feas = (pinf <= 1e-7 * (1.0 + np.abs(bb).sum(axis=1) + np.abs(ba).sum(axis=1))) & (
            dinf <= 1e-7 * (1.0 + yscale)
        )
        done = active & (relgap < tol) & feas
        active &= ~done
        if not active.any():
            break
        iters += active

        rpb, rpa = bb - pb, ba - pa
        q = 1.0 / (zl / x + zu / s)

        def direction(rxz, rsw):
            g = rxz / x - rsw / s - rd
            gb, ga = A(q * g)
            dyb, dya = normal_solve(q, rpb - gb, rpa - ga)
            dx = q * (At(dyb, dya) + g)
            ds = -dx
            dzl = (rxz - zl * dx) / x
            dzu = (rsw - zu * ds) / s
            return dx, ds, dyb, dya, dzl, dzu

        dx, ds, _, _, dzl, dzu = direction(-x * zl, -s * zu)
        ap = np.minimum(_step(x, dx), _step(s, ds))
        ad = np.minimum(_step(zl, dzl), _step(zu, dzu))
        mu = gap / m2
        mu_aff = (
            ((x + ap[:, None] * dx) * (zl + ad[:, None] * dzl)).sum(axis=1)
            + ((s + ap[:, None] * ds) * (zu + ad[:, None] * dzu)).sum(axis=1)
        ) / m2
        sigma = np.clip(mu_aff / mu, 0.0, 1.0) ** 3
        sm = (sigma * mu)[:, None]
        dx2, ds2, dyb, dya, dzl2, dzu2 = direction(sm - x * zl - dx * dzl, sm - s * zu - ds * dzu)

        ap = STEP_FRACTION * np.minimum(_step(x, dx2), _step(s, ds2))
        ad = STEP_FRACTION * np.minimum(_step(zl, dzl2), _step(zu, dzu2))
        ap = np.where(active, ap, 0.0)[:, None]
        ad = np.where(active, ad, 0.0)[:, None]
        bad = ~np.isfinite(ap[:, 0] + ad[:, 0])
        if bad.any():
            active &= ~bad
            ap[bad] = 0.0
            ad[bad] = 0.0
        x = x + ap * np.nan_to_num(dx2)
        s = s + ap * np.nan_to_num(ds2)
        yb = yb + ad * np.nan_to_num(dyb)
        ya = ya + ad * np.nan_to_num(dya)
        zl = zl + ad * np.nan_to_num(dzl2)
        zu = zu + ad * np.nan_to_num(dzu2)
        # keep iterates strictly interior despite rounding
        x = np.maximum(x, 1e-300)
        s = np.maximum(s, 1e-300)
        zl = np.maximum(zl, 1e-300)
        zu = np.maximum(zu, 1e-300)

    converged = np.isfinite(relgap) & (relgap < tol) & ~active
    return BatchSolution(
        beta=-yb,
        alpha=-(ya * lay.free),
        converged=converged,
        iterations=iters,
        gap=relgap,
    )
