"""Reference primal-dual interior-point method for :class:`ConeProgram`.

Homogeneous self-dual embedding with Nesterov-Todd scaling and Mehrotra
predictor-corrector steps. The KKT system is regularized, factorized with a sparse LU
and refined against the unregularized matrix.

Cone arithmetic runs on all second-order blocks at once: block heads are gathered by
index and block sums are segment reductions over the stacked tail entries.
"""
import logging
from typing import Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as sparse_linalg

from .cones import (
    INACCURATE,
    INFEASIBLE,
    MAX_ITER,
    NUMERIC_FAILURE,
    OPTIMAL,
    UNBOUNDED,
    ConeProgram,
    ConeSolution,
    SolverSettings,
)

logger = logging.getLogger(__name__)

STEP_FRACTION = 0.99
REGULARIZATION = 1e-9
REFINEMENT_STEPS = 3
MIN_STEP = 1e-10
# A stalled run within this factor of every tolerance is reported as inaccurate.
STALL_FACTOR = 1e3


class _ConeLayout(object):
    """Index arrays of the cone ``R_+^l x Q^{q_1} x ... x Q^{q_r}``."""

    def __init__(self, prog):  # type: (ConeProgram) -> None
        self.l = prog.l
        self.size = prog.G.shape[0]
        sizes = np.asarray(prog.q, dtype=int)
        self.count = sizes.shape[0]
        self.offsets = (np.cumsum(sizes) - sizes).astype(int)
        self.heads = self.l + self.offsets
        self.block = np.repeat(np.arange(self.count), sizes)
        self.tail = np.ones(self.size - self.l, dtype=bool)
        self.tail[self.offsets] = False
        rows, cols, diag = [], [], []
        for q in np.unique(sizes):
            starts = self.offsets[sizes == q]
            local = np.arange(q)
            r = np.broadcast_to(starts[:, None, None] + local[None, :, None], (starts.size, q, q))
            c = np.broadcast_to(starts[:, None, None] + local[None, None, :], (starts.size, q, q))
            j = -np.eye(q)
            j[0, 0] = 1.0
            rows.append(r.ravel())
            cols.append(c.ravel())
            diag.append(np.broadcast_to(j, (starts.size, q, q)).ravel())
        self.pair_rows = np.concatenate(rows) if rows else np.zeros(0, dtype=int)
        self.pair_cols = np.concatenate(cols) if cols else np.zeros(0, dtype=int)
        self.pair_j = np.concatenate(diag) if diag else np.zeros(0)

    def segment_sum(self, values):  # type: (np.ndarray) -> np.ndarray
        if not self.count:
            return np.zeros(0)
        return np.add.reduceat(values, self.offsets)

    def dot(self, u, v):  # type: (np.ndarray, np.ndarray) -> np.ndarray
        """Per-block inner products."""
        return self.segment_sum(u[self.l :] * v[self.l :])

    def tail_dot(self, u, v):  # type: (np.ndarray, np.ndarray) -> np.ndarray
        return self.dot(u, v) - u[self.heads] * v[self.heads]

    def spread(self, per_block):  # type: (np.ndarray) -> np.ndarray
        return per_block[self.block]


class _Scaling(object):
    """Nesterov-Todd scaling ``W`` with ``W z = W^{-1} s = lam``."""

    def __init__(self, cones, s, z):  # type: (_ConeLayout, np.ndarray, np.ndarray) -> None
        self.cones = cones
        l = cones.l
        self.d = np.sqrt(s[:l] / z[:l])
        s_det = s[cones.heads] ** 2 - cones.tail_dot(s, s)
        z_det = z[cones.heads] ** 2 - cones.tail_dot(z, z)
        if np.any(s_det <= 0) or np.any(z_det <= 0):
            raise FloatingPointError("iterate left the cone interior")
        s_bar = s[l:] / cones.spread(np.sqrt(s_det))
        z_bar = z[l:] / cones.spread(np.sqrt(z_det))
        gamma = np.sqrt((1.0 + cones.segment_sum(s_bar * z_bar)) / 2.0)
        w = s_bar - z_bar
        w[cones.offsets] = s_bar[cones.offsets] + z_bar[cones.offsets]
        w /= cones.spread(2.0 * gamma)
        self.w = w
        self.w0 = w[cones.offsets]
        self.w_tail = np.where(cones.tail, w, 0.0)
        self.beta = (s_det / z_det) ** 0.25
        self.lam = self.apply(z)

    def apply(self, v, inverse=False):  # type: (np.ndarray, bool) -> np.ndarray
        cones = self.cones
        l = cones.l
        out = np.empty_like(v)
        out[:l] = v[:l] / self.d if inverse else v[:l] * self.d
        if not cones.count:
            return out
        sign = -1.0 if inverse else 1.0
        vs = v[l:]
        v0 = vs[cones.offsets]
        w1v1 = sign * cones.segment_sum(self.w_tail * vs)
        head = self.w0 * v0 + w1v1
        tail = vs + cones.spread(v0 + w1v1 / (1.0 + self.w0)) * (sign * self.w_tail)
        tail[cones.offsets] = head
        factor = 1.0 / self.beta if inverse else self.beta
        out[l:] = cones.spread(factor) * tail
        return out

    def squared(self):  # type: () -> sparse.spmatrix
        cones = self.cones
        l = cones.l
        beta2 = cones.spread(self.beta ** 2)[cones.pair_rows]
        values = beta2 * (2.0 * self.w[cones.pair_rows] * self.w[cones.pair_cols] - cones.pair_j)
        rows = np.concatenate([np.arange(l), l + cones.pair_rows])
        cols = np.concatenate([np.arange(l), l + cones.pair_cols])
        data = np.concatenate([self.d ** 2, values])
        return sparse.csc_matrix((data, (rows, cols)), shape=(cones.size, cones.size))


def _identity(cones):  # type: (_ConeLayout) -> np.ndarray
    e = np.zeros(cones.size)
    e[: cones.l] = 1.0
    e[cones.heads] = 1.0
    return e


def _jordan(cones, u, v):  # type: (_ConeLayout, np.ndarray, np.ndarray) -> np.ndarray
    l = cones.l
    out = np.empty_like(u)
    out[:l] = u[:l] * v[:l]
    us, vs = u[l:], v[l:]
    out[l:] = cones.spread(us[cones.offsets]) * vs + cones.spread(vs[cones.offsets]) * us
    out[cones.heads] = cones.dot(u, v)
    return out


def _jordan_div(cones, lam, r):  # type: (_ConeLayout, np.ndarray, np.ndarray) -> np.ndarray
    """Solve ``lam o u = r`` for ``u``."""
    l = cones.l
    out = np.empty_like(r)
    out[:l] = r[:l] / lam[:l]
    lam0 = lam[cones.heads]
    det = lam0 ** 2 - cones.tail_dot(lam, lam)
    u0 = (lam0 * r[cones.heads] - cones.tail_dot(lam, r)) / det
    out[l:] = (r[l:] - cones.spread(u0) * lam[l:]) / cones.spread(lam0)
    out[cones.heads] = u0
    return out


def _min_eig(cones, u):  # type: (_ConeLayout, np.ndarray) -> float
    values = []
    if cones.l:
        values.append(float(np.min(u[: cones.l])))
    if cones.count:
        tail = np.sqrt(np.maximum(cones.tail_dot(u, u), 0.0))
        values.append(float(np.min(u[cones.heads] - tail)))
    return min(values) if values else 1.0


def _max_step(cones, u, du):  # type: (_ConeLayout, np.ndarray, np.ndarray) -> float
    """Largest ``alpha`` keeping ``u + alpha du`` in the cone (``inf`` if unbounded)."""
    alpha = np.inf
    l = cones.l
    neg = du[:l] < 0
    if np.any(neg):
        alpha = float(np.min(-u[:l][neg] / du[:l][neg]))
    if not cones.count:
        return alpha
    u0, d0 = u[cones.heads], du[cones.heads]
    a = d0 ** 2 - cones.tail_dot(du, du)
    b = u0 * d0 - cones.tail_dot(u, du)
    c = u0 ** 2 - cones.tail_dot(u, u)
    disc = b * b - a * c
    real = disc >= 0
    denom = -b + np.sqrt(np.where(real, disc, 0.0))
    hit = real & (denom > 0)
    if np.any(hit):
        alpha = min(alpha, float(np.min(np.maximum(c[hit], 0.0) / denom[hit])))
    back = d0 < 0
    if np.any(back):
        alpha = min(alpha, float(np.min(-u0[back] / d0[back])))
    return alpha


class _KktSolver(object):
    """Factorization of ``[[0, A', G'], [A, 0, 0], [G, 0, -W^2]]``."""

    def __init__(self, prog, W2):  # type: (ConeProgram, sparse.spmatrix) -> None
        n, p, m = prog.size, prog.A.shape[0], prog.G.shape[0]
        self.sizes = (n, p, m)
        G = prog.G.tocsc()
        if p:
            A = prog.A.tocsc()
            exact = sparse.bmat([[None, A.T, G.T], [A, None, None], [G, None, -W2]])
        else:
            exact = sparse.bmat([[None, G.T], [G, -W2]])
        reg = np.concatenate(
            [REGULARIZATION * np.ones(n), -REGULARIZATION * np.ones(p + m)]
        )
        self.exact = sparse.csc_matrix(exact, shape=(n + p + m, n + p + m))
        self.lu = sparse_linalg.splu(
            (self.exact + sparse.diags(reg)).tocsc(), permc_spec="COLAMD"
        )

    def solve(self, rx, ry, rz):
        # type: (np.ndarray, np.ndarray, np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]
        rhs = np.concatenate([rx, ry, rz])
        sol = self.lu.solve(rhs)
        for _ in range(REFINEMENT_STEPS):
            sol = sol + self.lu.solve(rhs - self.exact @ sol)
        if not np.all(np.isfinite(sol)):
            raise np.linalg.LinAlgError("non-finite KKT solution")
        n, p, _ = self.sizes
        return sol[:n], sol[n : n + p], sol[n + p :]


def _initial_point(prog, cones):
    # type: (ConeProgram, _ConeLayout) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]
    m = prog.G.shape[0]
    kkt = _KktSolver(prog, sparse.identity(m, format="csc"))
    x, _, s = kkt.solve(np.zeros(prog.size), prog.b, prog.h)
    s = -s
    _, y, z = kkt.solve(-prog.c, np.zeros(prog.A.shape[0]), np.zeros(m))
    e = _identity(cones)
    for v in (s, z):
        shift = -_min_eig(cones, v)
        if shift >= -1e-8 * max(np.linalg.norm(v), 1.0):
            v += (1.0 + shift) * e
    return x, y, z, s


def solve(prog, settings=None):  # type: (ConeProgram, Optional[SolverSettings]) -> ConeSolution
    """Solve ``prog``.

    Stops once the scaled residuals are below ``tol_feas`` and the duality gap ``s'z``
    is below ``tol_gap`` times ``1 + |c'x + c0|``. The objective offset ``c0`` counts
    toward the scale, so a large constant hidden in ``c'x`` cannot loosen the gap test.
    """
    settings = settings or SolverSettings()
    c, b, h, A, G = prog.c, prog.b, prog.h, prog.A, prog.G
    cones = _ConeLayout(prog)
    degree = prog.l + len(prog.q)
    e = _identity(cones)
    c_scale = max(1.0, np.linalg.norm(c))
    b_scale = max(1.0, np.linalg.norm(b))
    h_scale = max(1.0, np.linalg.norm(h))

    def result(status, iterations, x, y, z, s, tau, info):
        scale = tau if tau > 0 else 1.0
        if status in (INFEASIBLE, UNBOUNDED):
            scale = 1.0
        xs, ys, zs, ss = x / scale, y / scale, z / scale, s / scale
        return ConeSolution(
            status=status,
            x=xs,
            y=ys,
            z=zs,
            s=ss,
            primal_objective=float(np.dot(c, xs)) + prog.c0,
            dual_objective=float(-np.dot(b, ys) - np.dot(h, zs)) + prog.c0,
            iterations=iterations,
            solver="reference",
            info=info,
        )

    try:
        x, y, z, s = _initial_point(prog, cones)
    except (RuntimeError, np.linalg.LinAlgError) as err:
        logger.warning("Initial factorization failed: %s", err)
        n0 = np.zeros(prog.size)
        return result(
            NUMERIC_FAILURE, 0, n0, np.zeros(A.shape[0]), e.copy(), e.copy(), 1.0, {}
        )
    tau, kappa = 1.0, 1.0
    info = {}  # type: dict

    for iteration in range(int(settings.max_iter) + 1):
        rx = A.T @ y + G.T @ z + c * tau
        ry = -(A @ x) + b * tau
        rz = -(G @ x) + h * tau - s
        rt = -np.dot(c, x) - np.dot(b, y) - np.dot(h, z) - kappa

        pcost = np.dot(c, x) / tau + prog.c0
        dcost = (-np.dot(b, y) - np.dot(h, z)) / tau + prog.c0
        pres = max(
            np.linalg.norm(A @ x - b * tau) / b_scale,
            np.linalg.norm(G @ x + s - h * tau) / h_scale,
        ) / tau
        dres = np.linalg.norm(A.T @ y + G.T @ z + c * tau) / c_scale / tau
        gap = np.dot(s, z) / tau ** 2
        relgap = abs(gap) / (1.0 + abs(pcost))
        info = {
            "pres": float(pres),
            "dres": float(dres),
            "gap": float(gap),
            "relgap": float(relgap),
        }
        logger.debug(
            "ipm %3d pcost %+.8e dcost %+.8e pres %.1e dres %.1e gap %.1e tau %.1e kappa %.1e",
            iteration, pcost, dcost, pres, dres, gap, tau, kappa,
        )
        if pres <= settings.tol_feas and dres <= settings.tol_feas and relgap <= settings.tol_gap:
            return result(OPTIMAL, iteration, x, y, z, s, tau, info)

        hz_by = np.dot(h, z) + np.dot(b, y)
        if hz_by < 0:
            dual_ray = np.linalg.norm(A.T @ y + G.T @ z) / c_scale
            if dual_ray <= settings.tol_feas * -hz_by:
                return result(INFEASIBLE, iteration, x, y, z, s, tau, info)
        cx = np.dot(c, x)
        if cx < 0:
            primal_ray = max(
                np.linalg.norm(A @ x) / b_scale, np.linalg.norm(G @ x + s) / h_scale
            )
            if primal_ray <= settings.tol_feas * -cx:
                return result(UNBOUNDED, iteration, x, y, z, s, tau, info)
        if iteration == int(settings.max_iter):
            break

        try:
            W = _Scaling(cones, s, z)
            kkt = _KktSolver(prog, W.squared())
        except (RuntimeError, ValueError, FloatingPointError, np.linalg.LinAlgError) as err:
            logger.debug("factorization failed at iteration %d: %s", iteration, err)
            return _stalled(result, iteration, x, y, z, s, tau, info, settings)
        lam = W.lam
        mu = (np.dot(s, z) + tau * kappa) / (degree + 1)

        def newton(sigma, r_s, r_kappa, u2):
            bx = -(1.0 - sigma) * rx
            by = -(1.0 - sigma) * ry
            bz = -(1.0 - sigma) * rz + W.apply(_jordan_div(cones, lam, r_s))
            bt = -(1.0 - sigma) * rt + r_kappa / tau
            u1 = kkt.solve(bx, -by, -bz)
            num = bt + np.dot(c, u1[0]) + np.dot(b, u1[1]) + np.dot(h, u1[2])
            den = kappa / tau + np.dot(c, u2[0]) + np.dot(b, u2[1]) + np.dot(h, u2[2])
            dtau = num / den
            dx, dy, dz = (u - dtau * v for u, v in zip(u1, u2))
            ds = W.apply(_jordan_div(cones, lam, r_s) - W.apply(dz))
            dkappa = (r_kappa - kappa * dtau) / tau
            return dx, dy, dz, ds, dtau, dkappa

        def step_length(dz, ds, dtau, dkappa):
            alpha = min(_max_step(cones, s, ds), _max_step(cones, z, dz))
            if dtau < 0:
                alpha = min(alpha, -tau / dtau)
            if dkappa < 0:
                alpha = min(alpha, -kappa / dkappa)
            return alpha

        try:
            u2 = kkt.solve(c, -b, -h)
            aff = newton(0.0, -_jordan(cones, lam, lam), -tau * kappa, u2)
            alpha_aff = min(1.0, step_length(aff[2], aff[3], aff[4], aff[5]))
            sigma = (1.0 - alpha_aff) ** 3
            correction = _jordan(cones, W.apply(aff[3], inverse=True), W.apply(aff[2]))
            r_s = -_jordan(cones, lam, lam) + sigma * mu * e - correction
            r_kappa = -tau * kappa + sigma * mu - aff[4] * aff[5]
            dx, dy, dz, ds, dtau, dkappa = newton(sigma, r_s, r_kappa, u2)
        except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as err:
            logger.debug("KKT solve failed at iteration %d: %s", iteration, err)
            return _stalled(result, iteration, x, y, z, s, tau, info, settings)
        alpha = min(1.0, STEP_FRACTION * step_length(dz, ds, dtau, dkappa))
        if not np.isfinite(alpha) or alpha < MIN_STEP:
            return _stalled(result, iteration, x, y, z, s, tau, info, settings)
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkappa

    return _stalled(result, int(settings.max_iter), x, y, z, s, tau, info, settings, MAX_ITER)


def _stalled(result, iteration, x, y, z, s, tau, info, settings, status=NUMERIC_FAILURE):
    """Result of a run that stopped short of the tolerances.

    Iterates within ``STALL_FACTOR`` of every tolerance come back as ``INACCURATE``;
    callers decide whether such a point is good enough. Anything further out keeps
    ``status``.
    """
    tol_feas = STALL_FACTOR * settings.tol_feas
    if (
        info.get("pres", np.inf) <= tol_feas
        and info.get("dres", np.inf) <= tol_feas
        and info.get("relgap", np.inf) <= STALL_FACTOR * settings.tol_gap
    ):
        logger.warning(
            "Interior point stalled at iteration %d with reduced accuracy "
            "(pres %.1e, dres %.1e, relgap %.1e)",
            iteration, info["pres"], info["dres"], info["relgap"],
        )
        return result(INACCURATE, iteration, x, y, z, s, tau, info)
    return result(status, iteration, x, y, z, s, tau, info)
