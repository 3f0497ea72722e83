"""Dense second-order cone programs and a primal-dual interior-point solver.

A problem is

    minimize    c @ y
    subject to  F_k @ y + g_k  in  SOC(rows_k),   k = 1..K

where the *last* coordinate of each cone is the scalar bound:
``u in SOC(n)`` iff ``u[-1] >= ||u[:-1]||``.  A one-row cone is a plain
inequality ``u >= 0``.

The solver works on the homogeneous self-dual embedding with
Nesterov-Todd scaling and a Mehrotra predictor-corrector; it returns dual
certificates when the problem is infeasible or unbounded.  Internally each
cone is stored head-first (scalar bound in position 0).
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import UsageError

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"

DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 200


@dataclass(frozen=True)
class ConeConstraint:
    """``matrix @ y + offset`` lies in the second-order cone."""

    matrix: np.ndarray
    offset: np.ndarray

    @property
    def rows(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class SocpProblem:
    n_vars: int
    objective: np.ndarray
    cones: tuple[ConeConstraint, ...]
    # y[j] >= bound for each (j, bound); stored as extra one-row cones
    lower_bounds: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        c = np.asarray(self.objective, dtype=float).reshape(-1)
        if c.size != self.n_vars:
            raise UsageError(f"objective has {c.size} entries, n_vars={self.n_vars}")
        cones = []
        for i, cone in enumerate(self.cones):
            mat = np.atleast_2d(np.asarray(cone.matrix, dtype=float))
            off = np.asarray(cone.offset, dtype=float).reshape(-1)
            if mat.shape[0] < 1:
                raise UsageError(f"cone {i} has no rows")
            if mat.shape[1] != self.n_vars:
                raise UsageError(
                    f"cone {i} matrix has {mat.shape[1]} columns, n_vars={self.n_vars}"
                )
            if off.size != mat.shape[0]:
                raise UsageError(f"cone {i} offset has {off.size} rows, matrix has {mat.shape[0]}")
            if not (np.all(np.isfinite(mat)) and np.all(np.isfinite(off))):
                raise UsageError(f"cone {i} has non-finite data")
            cones.append(ConeConstraint(mat, off))
        for j, _ in self.lower_bounds:
            if not 0 <= j < self.n_vars:
                raise UsageError(f"lower bound index {j} out of range")
        object.__setattr__(self, "objective", c)
        object.__setattr__(self, "cones", tuple(cones))

    def all_cones(self) -> list[ConeConstraint]:
        extra = []
        for j, bound in self.lower_bounds:
            row = np.zeros((1, self.n_vars))
            row[0, j] = 1.0
            extra.append(ConeConstraint(row, np.array([-float(bound)])))
        return list(self.cones) + extra

    @property
    def n_cones(self) -> int:
        return len(self.cones) + len(self.lower_bounds)


@dataclass(frozen=True)
class Residuals:
    primal_res: float
    dual_res: float
    gap: float


@dataclass(frozen=True)
class SocpSolution:
    status: str
    primal: np.ndarray | None
    duals: list[np.ndarray] | None
    objective_value: float
    residuals: Residuals
    iterations: int
    dual_objective: float = float("nan")
    slacks: list[np.ndarray] | None = field(default=None, repr=False)


@dataclass(frozen=True)
class KKTResiduals:
    stationarity: float
    complementarity: float
    primal_cone: float
    dual_cone: float

    @property
    def max(self) -> float:
        return max(self.stationarity, self.complementarity, self.primal_cone, self.dual_cone)


class _Cones:
    """Index bookkeeping for a stacked, head-first vector of cones."""

    def __init__(self, dims):
        self.dims = list(dims)
        self.m = int(sum(self.dims))
        starts = np.concatenate([[0], np.cumsum(self.dims)[:-1]]).astype(int)
        self.starts = starts
        self.groups = []  # (dim, cone indices, row index array of shape (k, dim))
        for dim in sorted(set(self.dims)):
            ks = np.array([k for k, d in enumerate(self.dims) if d == dim])
            idx = starts[ks][:, None] + np.arange(dim)[None, :]
            self.groups.append((dim, ks, idx))
        self.e = np.zeros(self.m)
        self.e[starts] = 1.0
        self.degree = len(self.dims)

    def split(self, u):
        return [u[s:s + d] for s, d in zip(self.starts, self.dims)]

    def min_eig(self, u) -> float:
        out = np.inf
        for _, _, idx in self.groups:
            blk = u[idx]
            out = min(out, float(np.min(blk[:, 0] - np.linalg.norm(blk[:, 1:], axis=1))))
        return out

    def jnorm(self, blk):
        return np.sqrt(np.maximum(blk[:, 0] ** 2 - np.sum(blk[:, 1:] ** 2, axis=1), 0.0))

    def jprod(self, u, v):
        out = np.empty(self.m)
        for _, _, idx in self.groups:
            a, b = u[idx], v[idx]
            out[idx[:, 0]] = np.sum(a * b, axis=1)
            out[idx[:, 1:]] = a[:, :1] * b[:, 1:] + b[:, :1] * a[:, 1:]
        return out

    def jdiv(self, lam, d):
        """Solve ``lam o x = d`` for ``x``."""
        out = np.empty(self.m)
        for _, _, idx in self.groups:
            l, r = lam[idx], d[idx]
            det = l[:, 0] ** 2 - np.sum(l[:, 1:] ** 2, axis=1)
            x0 = (l[:, 0] * r[:, 0] - np.sum(l[:, 1:] * r[:, 1:], axis=1)) / det
            out[idx[:, 0]] = x0
            out[idx[:, 1:]] = (r[:, 1:] - x0[:, None] * l[:, 1:]) / l[:, :1]
        return out

    def max_step(self, lam, delta) -> float:
        """Largest ``alpha`` with ``lam + alpha * delta`` in the cone."""
        alpha = np.inf
        for dim, _, idx in self.groups:
            l, dl = lam[idx], delta[idx]
            if dim == 1:
                neg = dl[:, 0] < 0
                if np.any(neg):
                    alpha = min(alpha, float(np.min(-l[neg, 0] / dl[neg, 0])))
                continue
            nrm = self.jnorm(l)
            u, d = l / nrm[:, None], dl / nrm[:, None]
            # u0^2 - |u1|^2 = 1, so the boundary is a*alpha^2 + 2*b*alpha + 1 = 0
            a = d[:, 0] ** 2 - np.sum(d[:, 1:] ** 2, axis=1)
            b = u[:, 0] * d[:, 0] - np.sum(u[:, 1:] * d[:, 1:], axis=1)
            disc = b * b - a
            real = disc >= 0
            q = -(b + np.copysign(np.sqrt(np.where(real, disc, 0.0)), b))
            with np.errstate(divide="ignore", invalid="ignore"):
                r1 = np.where(real & (q != 0), 1.0 / q, np.inf)
                r2 = np.where(real & (a != 0), q / a, np.inf)
            roots = np.concatenate([r1, r2])
            roots = roots[roots > 0]
            if roots.size:
                alpha = min(alpha, float(np.min(roots)))
        return alpha


class _Scaling:
    """Nesterov-Todd scaling ``W`` with ``W z = W^{-1} s = lam``.

    ``W`` is block diagonal; the blocks are assembled into dense matrices
    since the problems handled here are small.
    """

    def __init__(self, cones: _Cones, s, z):
        m = cones.m
        self.mat = np.zeros((m, m))
        self.inv = np.zeros((m, m))
        for dim, _, idx in cones.groups:
            sb, zb = s[idx], z[idx]
            sn, zn = cones.jnorm(sb), cones.jnorm(zb)
            if not (np.all(sn > 0) and np.all(zn > 0)):
                raise FloatingPointError("iterate left the interior of the cone")
            sbar, zbar = sb / sn[:, None], zb / zn[:, None]
            gamma = np.sqrt(np.maximum((1.0 + np.sum(sbar * zbar, axis=1)) / 2.0, 0.0))
            w = sbar.copy()
            w[:, 1:] -= zbar[:, 1:]
            w[:, 0] += zbar[:, 0]
            w /= (2.0 * gamma)[:, None]
            eta = np.sqrt(sn / zn)
            # eta * [[w0, w1^T], [w1, I + w1 w1^T / (1 + w0)]] and its inverse
            w0, w1 = w[:, 0], w[:, 1:]
            blk = np.zeros((len(w0), dim, dim))
            blk[:, 1:, 1:] = np.eye(dim - 1) + w1[:, :, None] * w1[:, None, :] / (1.0 + w0)[:, None, None]
            blk_inv = blk.copy()
            blk[:, 0, 0] = blk_inv[:, 0, 0] = w0
            blk[:, 0, 1:] = blk[:, 1:, 0] = w1
            blk_inv[:, 0, 1:] = blk_inv[:, 1:, 0] = -w1
            rows, cols = idx[:, :, None], idx[:, None, :]
            self.mat[rows, cols] = eta[:, None, None] * blk
            self.inv[rows, cols] = blk_inv / eta[:, None, None]
        self.lam = self.mat @ z

    def apply(self, v):
        return self.mat @ v

    def apply_inv(self, v):
        return self.inv @ v


def _stack(problem: SocpProblem):
    """Head-first ``G, h`` with ``G y + s = h`` for ``s = F y + g``."""
    cones = problem.all_cones()
    dims = [cone.rows for cone in cones]
    rows_g, rows_h = [], []
    for cone in cones:
        order = np.r_[cone.rows - 1, 0:cone.rows - 1]
        rows_g.append(-cone.matrix[order])
        rows_h.append(cone.offset[order])
    return _Cones(dims), np.vstack(rows_g), np.concatenate(rows_h)


def _to_user(block):
    """Head-first block back to the scalar-last convention."""
    return np.r_[block[1:], block[:1]]


class _KKT:
    """Solver for ``[[0, G^T], [G, -W^2]] [dx; dz] = [r1; r2]``.

    With ``Gs = W^{-1} G = Q1 R`` and ``u = W dz`` the system becomes
    ``Gs^T u = r1`` and ``Gs dx - u = W^{-1} r2``, solved through the QR
    factors so the conditioning is that of ``Gs`` rather than its square.
    Rank-deficient ``G`` falls back to regularized normal equations.
    """

    def __init__(self, g_mat, scaling: _Scaling, refine: int = 2):
        self.g = g_mat
        self.w = scaling
        self.refine = refine
        gs = scaling.apply_inv(g_mat)
        n = gs.shape[1]
        self.gs = gs
        q, r = linalg.qr(gs, mode="full", check_finite=False)
        diag = np.abs(np.diag(r))
        self.use_qr = (
            0 < n <= gs.shape[0] and float(np.min(diag)) > 1e-13 * float(np.max(diag))
        )
        if self.use_qr:
            self.q1, self.q2, self.r = q[:, :n], q[:, n:], r[:n]
        else:
            normal = gs.T @ gs
            reg = 1e-12 * max(1.0, float(np.max(np.diag(normal)))) if n else 0.0
            self.factor = linalg.cho_factor(normal + reg * np.eye(n), lower=True)

    def _raw(self, r1, r2):
        b = self.w.apply_inv(r2)
        if self.use_qr:
            a = linalg.solve_triangular(self.r, r1, trans="T", check_finite=False)
            dx = linalg.solve_triangular(self.r, a + self.q1.T @ b, check_finite=False)
            u = self.q1 @ a - self.q2 @ (self.q2.T @ b)
        else:
            dx = linalg.cho_solve(self.factor, r1 + self.gs.T @ b)
            u = self.gs @ dx - b
        return dx, self.w.apply_inv(u)

    def solve(self, r1, r2):
        dx, dz = self._raw(r1, r2)
        for _ in range(self.refine):
            e1 = r1 - self.g.T @ dz
            e2 = r2 - (self.g @ dx - self.w.apply(self.w.apply(dz)))
            cx, cz = self._raw(e1, e2)
            dx, dz = dx + cx, dz + cz
        return dx, dz


def solve(problem: SocpProblem, tol: float = DEFAULT_TOL,
          max_iter: int = DEFAULT_MAX_ITER) -> SocpSolution:
    """Solve ``problem`` with a homogeneous self-dual interior-point method.

    ``status == "optimal"`` guarantees relative primal and dual residuals
    and a relative duality gap ``s.z / (1 + |c.y|)`` all at most ``tol``.
    """
    if not tol > 0:
        raise UsageError(f"tol must be > 0, got {tol}")
    if max_iter < 1:
        raise UsageError(f"max_iter must be >= 1, got {max_iter}")
    if problem.n_cones == 0:
        raise UsageError("problem has no cone constraints")

    cones, g_mat, h = _stack(problem)
    c = problem.objective
    n, m = problem.n_vars, cones.m
    norm_c = 1.0 + float(np.linalg.norm(c))
    norm_h = 1.0 + float(np.linalg.norm(h))

    # initial point from the least-squares problems with identity scaling
    x = np.linalg.lstsq(g_mat, h, rcond=None)[0] if n else np.zeros(0)
    s = h - g_mat @ x
    z = np.linalg.lstsq(g_mat.T, -c, rcond=None)[0] if n else np.zeros(m)
    for v in (s, z):
        shift = -cones.min_eig(v)
        if shift >= -1e-8 * max(1.0, float(np.linalg.norm(v))):
            v += (1.0 + shift) * cones.e
    tau, kappa = 1.0, 1.0

    status = MAX_ITER
    it = 0
    res = Residuals(np.inf, np.inf, np.inf)
    while True:
        rx = g_mat.T @ z + c * tau
        rz = g_mat @ x + s - h * tau
        cx, hz = float(c @ x), float(h @ z)
        rt = kappa + cx + hz
        sz = float(s @ z)
        mu = (sz + tau * kappa) / (cones.degree + 1)
        pcost = cx / tau
        res = Residuals(
            float(np.linalg.norm(rz)) / tau / norm_h,
            float(np.linalg.norm(rx)) / tau / norm_c,
            sz / tau**2 / (1.0 + abs(pcost)),
        )
        if max(res.primal_res, res.dual_res, res.gap) <= tol:
            status = OPTIMAL
            break
        if hz < 0 and float(np.linalg.norm(g_mat.T @ z)) / max(1.0, norm_c - 1.0) / -hz <= tol:
            status = INFEASIBLE
            break
        if cx < 0 and float(np.linalg.norm(g_mat @ x + s)) / max(1.0, norm_h - 1.0) / -cx <= tol:
            status = UNBOUNDED
            break
        if it >= max_iter:
            break
        it += 1

        try:
            scaling = _Scaling(cones, s, z)
            kkt = _KKT(g_mat, scaling)
        except (FloatingPointError, ValueError, linalg.LinAlgError):
            break
        lam = scaling.lam
        x1, z1 = kkt.solve(-c, h)
        denom_base = -kappa / tau + float(c @ x1) + float(h @ z1)

        def direction(eta_r, d_s, d_k):
            x2, z2 = kkt.solve(-eta_r * rx, -eta_r * rz - scaling.apply(cones.jdiv(lam, d_s)))
            dtau = (-eta_r * rt - d_k / tau - float(c @ x2) - float(h @ z2)) / denom_base
            dx = x2 + dtau * x1
            dz = z2 + dtau * z1
            # ds from the linearized primal equation keeps the primal
            # residual exact even when W^2 amplifies errors in dz
            ds = -eta_r * rz - g_mat @ dx + h * dtau
            wids = scaling.apply_inv(ds)
            wdz = scaling.apply(dz)
            dkappa = (d_k - kappa * dtau) / tau
            return dx, dz, dtau, dkappa, wids, wdz, ds

        def step_length(wids, wdz, dtau, dkappa):
            alpha = min(cones.max_step(lam, wids), cones.max_step(lam, wdz))
            if dtau < 0:
                alpha = min(alpha, -tau / dtau)
            if dkappa < 0:
                alpha = min(alpha, -kappa / dkappa)
            return alpha

        lam_sq = cones.jprod(lam, lam)
        aff = direction(1.0, -lam_sq, -tau * kappa)
        alpha_aff = min(1.0, step_length(aff[4], aff[5], aff[2], aff[3]))
        sigma = min(1.0, max(0.0, (1.0 - alpha_aff) ** 3))
        d_s = -lam_sq - cones.jprod(aff[4], aff[5]) + sigma * mu * cones.e
        d_k = -tau * kappa - aff[2] * aff[3] + sigma * mu
        dx, dz, dtau, dkappa, wids, wdz, ds = direction(1.0 - sigma, d_s, d_k)
        alpha = min(1.0, 0.99 * step_length(wids, wdz, dtau, dkappa))
        if not np.isfinite(alpha) or alpha < 1e-12:
            break
        x = x + alpha * dx
        s = s + alpha * ds
        z = z + alpha * dz
        tau += alpha * dtau
        kappa += alpha * dkappa
        if not (np.all(np.isfinite(x)) and np.isfinite(tau)):
            break

    if status == INFEASIBLE:
        hz = float(h @ z)
        cert = z / -hz
        return SocpSolution(status, None, [_to_user(b) for b in cones.split(cert)],
                            np.inf, res, it, dual_objective=np.inf)
    if status == UNBOUNDED:
        cx = float(c @ x)
        ray = x / -cx
        return SocpSolution(status, ray, None, -np.inf, res, it, dual_objective=-np.inf)
    y = x / tau
    zz = z / tau
    ss = s / tau
    return SocpSolution(
        status,
        y,
        [_to_user(b) for b in cones.split(zz)],
        float(c @ y),
        res,
        it,
        dual_objective=float(-h @ zz),
        slacks=[_to_user(b) for b in cones.split(ss)],
    )


def _soc_violation(u) -> float:
    if u.size == 1:
        return max(0.0, -float(u[0]))
    return max(0.0, float(np.linalg.norm(u[:-1]) - u[-1]))


def kkt_residuals(problem: SocpProblem, solution: SocpSolution) -> KKTResiduals:
    """Infinity-norm KKT residuals of a primal/dual pair.

    With ``L(y, z) = c @ y - sum_k z_k @ (F_k y + g_k)`` these are the
    stationarity ``c - sum_k F_k^T z_k``, the complementary slackness
    ``z_k @ (F_k y + g_k)`` per cone and cone-membership violations of both.
    """
    if solution.primal is None or solution.duals is None:
        raise UsageError("solution lacks a primal point or dual vectors")
    cones = problem.all_cones()
    if len(solution.duals) != len(cones):
        raise UsageError(f"{len(solution.duals)} dual vectors for {len(cones)} cones")
    y = np.asarray(solution.primal, dtype=float)
    grad = problem.objective.astype(float).copy()
    comp = pcone = dcone = 0.0
    for cone, zk in zip(cones, solution.duals):
        zk = np.asarray(zk, dtype=float)
        if zk.size != cone.rows:
            raise UsageError("dual vector size does not match its cone")
        sk = cone.matrix @ y + cone.offset
        grad -= cone.matrix.T @ zk
        comp = max(comp, abs(float(sk @ zk)))
        pcone = max(pcone, _soc_violation(sk))
        dcone = max(dcone, _soc_violation(zk))
    return KKTResiduals(float(np.max(np.abs(grad))) if grad.size else 0.0, comp, pcone, dcone)


def dump_problem(problem: SocpProblem, fh=None) -> str:
    """Plain-text matrix dump: ``n_vars n_cones`` header, the objective, then
    for every cone its row count followed by row-major ``[matrix | offset]``."""
    out = io.StringIO()
    cones = problem.all_cones()
    out.write(f"{problem.n_vars} {len(cones)}\n")
    out.write(" ".join(repr(float(v)) for v in problem.objective) + "\n")
    for cone in cones:
        out.write(f"{cone.rows}\n")
        for row, off in zip(cone.matrix, cone.offset):
            out.write(" ".join(repr(float(v)) for v in row) + f" {float(off)!r}\n")
    text = out.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def load_problem(text: str) -> SocpProblem:
    lines = iter(text.strip().splitlines())
    n_vars, n_cones = (int(t) for t in next(lines).split())
    objective = np.array([float(t) for t in next(lines).split()]) if n_vars else np.zeros(0)
    cones = []
    for _ in range(n_cones):
        rows = int(next(lines))
        data = np.array([[float(t) for t in next(lines).split()] for _ in range(rows)])
        cones.append(ConeConstraint(data[:, :-1], data[:, -1]))
    return SocpProblem(n_vars, objective, tuple(cones))
