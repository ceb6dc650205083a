"""Per-voxel least-squares estimation of (t1, pd, b) from a weighted series.

Classical baseline: a coarse grid over (t1, b) with the closed-form linear
optimum for pd initialises a damped Gauss-Newton (Levenberg-Marquardt style)
refinement of all three parameters against the smoothed magnitude model
``pd * sqrt(inner^2 + eps^2)``.  The damping schedule only ever accepts steps
that decrease the objective, so the objective is non-increasing across
accepted iterations.

The magnitude objective has shallow valleys where t1 and b trade off and,
when an inversion time falls near the signal null, spurious local minima
whose basins are narrower than any reasonable (t1, b) grid.  Recovery is
made global in three stages:

1. multi-start: damped GN from the best ``n_starts`` grid candidates with
   distinct t1 indices, keeping the lowest final objective;
2. sign-pattern scan: the magnitude data equal ``s_n * signal`` for one of
   N+1 single-flip sign patterns (signs change once, at the null).  For a
   fixed pattern the signed model ``pd * s_n * (1 - b * exp(-TI_n/t1))`` is
   linear in (pd, pd*b) given t1, so those are profiled out in closed form
   over a dense log-spaced t1 grid -- a kink-free global search.  Each
   pattern's grid winner is sharpened by golden-section search on the
   profiled objective (whose noiseless minimum for the correct pattern is
   exactly the truth) and then seeds one more GN refinement;
3. exact polish: the winner is re-refined with eps = 0, since the smoothed
   optimum is displaced from the true least-squares optimum by O(eps) in
   signal space, which can be 1e-3 in parameter space along a flat valley.

Stages 2-3 are skipped for voxels that already sit at the exact-fit floor.

The voxel loop is the hot path; it runs as a numba kernel by default with a
vectorised numpy fallback (see :mod:`qmap.backend`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backend
from .phantom import QuantMap, WeightedSeries
from .signal import Protocol, TissueParams, jacobian_series

DEFAULT_T1_GRID = tuple(np.geomspace(0.05, 5.0, 40))
DEFAULT_B_GRID = (1.6, 1.7, 1.8, 1.9, 2.0)
DEFAULT_BOUNDS = ((0.01, 10.0), (0.0, 10.0), (0.0, 2.0))

_OBJ_FLOOR = 1e-22  # absolute objective below which a fit counts as exact
_GRAD_FLOOR = 1e-13  # absolute stationarity threshold on max|J^T r|
_GTOL = 1e-7  # scaled first-order test: |g_k| <= gtol * ||J_k|| * ||r||
_STEP_FLOOR = 1e-10  # accepted-step size (relative) below which the fit stops
_LAM_STALL = 1e10
_PROFILE_POINTS = 192  # t1 resolution of the sign-pattern scan (~3.7% steps)
_GOLDEN = 0.6180339887498949
_GOLDEN_ITERS = 48  # bracket shrinks by 0.618^48 ~ 1e-10


@dataclass(frozen=True)
class FitOptions:
    """Grids, stopping rule and box bounds for the per-voxel fit."""

    t1_grid: tuple[float, ...] = DEFAULT_T1_GRID
    b_grid: tuple[float, ...] = DEFAULT_B_GRID
    max_iters: int = 60
    tol: float = 1e-12
    bounds: tuple = DEFAULT_BOUNDS
    smooth_eps: float = 1e-6
    n_starts: int = 3

    def __post_init__(self):
        if len(self.t1_grid) == 0 or len(self.b_grid) == 0:
            raise ValueError("grids must be non-empty")
        if any(t <= 0 for t in self.t1_grid):
            raise ValueError("t1 grid values must be > 0")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.n_starts < 1:
            raise ValueError("n_starts must be >= 1")
        (t1b, pdb, bb) = self.bounds
        if t1b[0] <= 0 or pdb[0] < 0 or bb[0] < 0 or bb[1] > 2:
            raise ValueError(f"bounds inconsistent with valid tissue parameters: {self.bounds}")

    def lower(self) -> np.ndarray:
        return np.array([self.bounds[0][0], self.bounds[1][0], self.bounds[2][0]])

    def upper(self) -> np.ndarray:
        return np.array([self.bounds[0][1], self.bounds[1][1], self.bounds[2][1]])


@dataclass
class FitResult:
    params: TissueParams
    residual_norm: float
    iterations: int
    converged: bool
    degenerate: bool = False


@dataclass
class FitMapResult:
    """Per-voxel diagnostics from :func:`fit_map`."""

    residual_norm: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    degenerate: np.ndarray
    raw_params: np.ndarray = field(repr=False, default=None)


def _grid_tables(protocol: Protocol, opts: FitOptions):
    """Candidate parameters (t1-major, then b) and their unsigned model rows."""
    tis = protocol.tis_array
    t1g = np.asarray(opts.t1_grid)
    bg = np.asarray(opts.b_grid)
    t1c = np.repeat(t1g, bg.size)
    bc = np.tile(bg, t1g.size)
    u = np.abs(1.0 - bc[:, None] * np.exp(-tis[None, :] / t1c[:, None]))
    return t1c, bc, u


# ---------------------------------------------------------------------------
# numpy backend


def _model_np(theta, tis, eps):
    t1 = theta[:, 0:1]
    pd = theta[:, 1:2]
    b = theta[:, 2:3]
    decay = np.exp(-tis[None, :] / t1)
    inner = 1.0 - b * decay
    root = np.sqrt(inner**2 + eps**2)
    return decay, inner, root, pd * root


def _objective_np(theta, tis, y, eps):
    _, _, _, s = _model_np(theta, tis, eps)
    return ((s - y) ** 2).sum(axis=1)


def _profile_eval_np(t1v, z, tis, sy2):
    """Profiled signed-model objective at one t1 per row of ``z``.

    Profiles out (alpha, gamma) = (pd, pd*b) by linear least squares; rows
    where the 2x2 system is near-singular or alpha <= 0 get F = inf.
    """
    nti = tis.size
    d = np.exp(-tis[None, :] / t1v[:, None])
    sd = d.sum(axis=1)
    sdd = (d * d).sum(axis=1)
    det = nti * sdd - sd * sd
    valid = det > 1e-12 * nti * sdd
    detsafe = np.where(valid, det, 1.0)
    tsum = z.sum(axis=1)
    u = (z * d).sum(axis=1)
    alpha = (tsum * sdd - u * sd) / detsafe
    gamma = (tsum * sd - u * nti) / detsafe
    f = np.where(valid & (alpha > 0.0), sy2 - (alpha * tsum - gamma * u), np.inf)
    return f, alpha, gamma


def _golden_np(lo, hi, z, tis, sy2):
    """Golden-section minimum of the profiled objective in log-t1, per row."""
    a = np.log(lo)
    b = np.log(hi)
    x1 = b - _GOLDEN * (b - a)
    x2 = a + _GOLDEN * (b - a)
    f1 = _profile_eval_np(np.exp(x1), z, tis, sy2)[0]
    f2 = _profile_eval_np(np.exp(x2), z, tis, sy2)[0]
    for _ in range(_GOLDEN_ITERS):
        left = f1 < f2
        a = np.where(left, a, x1)
        b = np.where(left, x2, b)
        x1n = np.where(left, b - _GOLDEN * (b - a), x2)
        x2n = np.where(left, x1, a + _GOLDEN * (b - a))
        xq = np.where(left, x1n, x2n)
        fq = _profile_eval_np(np.exp(xq), z, tis, sy2)[0]
        f1, f2 = np.where(left, fq, f2), np.where(left, f1, fq)
        x1, x2 = x1n, x2n
    return np.exp(np.where(f1 < f2, x1, x2))


def _refine_np(th0, ys, tis, lb, ub, max_iters, tol, eps):
    """Damped Gauss-Newton on every row of ``ys`` from ``th0``.

    Returns the final iterate, objective, iteration count and convergence
    flag per row.  A row stops when the relative objective decrease falls
    below ``tol``, the objective hits the exact-fit floor, the gradient is
    stationary, or the damping stalls (non-converged).
    """
    nv = ys.shape[0]
    th = th0.copy()
    obj = _objective_np(th, tis, ys, eps)
    lam = np.full(nv, 1e-3)
    active = np.ones(nv, dtype=bool)
    conv = np.zeros(nv, dtype=bool)
    its = np.zeros(nv, dtype=np.int32)
    eye = np.eye(3)
    for _ in range(max_iters):
        if not active.any():
            break
        a = np.flatnonzero(active)
        its[a] += 1
        ya = ys[a]
        ta = th[a]
        decay, inner, root, s = _model_np(ta, tis, eps)
        r = s - ya
        # eps=0 turns this into the exact magnitude model; the kink at
        # inner=0 gets a zero (sub)gradient.
        scale = np.divide(inner, root, out=np.zeros_like(inner), where=root > 0.0)
        j_t1 = ta[:, 1:2] * scale * (-ta[:, 2:3] * decay * tis[None, :] / ta[:, 0:1] ** 2)
        j_pd = root
        j_b = ta[:, 1:2] * scale * (-decay)
        jac = np.stack([j_t1, j_pd, j_b], axis=2)
        hess = np.einsum("vni,vnj->vij", jac, jac)
        grad = np.einsum("vni,vn->vi", jac, r)
        # Projected gradient: components pushing outward at an active bound
        # are feasible-stationary (KKT) and do not block convergence.
        gproj = np.where(((ta <= lb + 1e-12) & (grad > 0))
                         | ((ta >= ub - 1e-12) & (grad < 0)), 0.0, grad)
        jscale = np.sqrt(np.einsum("vii->vi", hess))
        gthr = _GTOL * jscale * np.sqrt(obj[a])[:, None] + 1e-16
        stationary = ((np.abs(gproj) <= gthr).all(axis=1)
                      | (np.abs(gproj).max(axis=1) <= _GRAD_FLOOR * np.maximum(obj[a], 1.0)))
        if stationary.any():
            conv[a[stationary]] = True
            active[a[stationary]] = False
            keep = ~stationary
            if not keep.any():
                continue
            a = a[keep]
            ya, ta = ya[keep], ta[keep]
            hess, grad = hess[keep], grad[keep]
        diag = np.einsum("vii->vi", hess)
        amat = hess + (lam[a, None] * diag + 1e-12)[:, :, None] * eye
        delta = np.linalg.solve(amat, -grad[:, :, None])[:, :, 0]
        cand = np.clip(ta + delta, lb, ub)
        obj_new = _objective_np(cand, tis, ya, eps)
        accept = obj_new < obj[a]
        rel = (obj[a] - obj_new) / np.maximum(obj[a], 1e-300)
        step_small = (np.abs(cand - ta).max(axis=1)
                      <= _STEP_FLOOR * (1.0 + np.abs(cand).max(axis=1)))
        done = accept & ((rel < tol) | (obj_new < _OBJ_FLOOR) | step_small)
        th[a[accept]] = cand[accept]
        obj[a[accept]] = obj_new[accept]
        lam[a[accept]] = np.maximum(lam[a[accept]] / 3.0, 1e-12)
        lam[a[~accept]] *= 10.0
        conv[a[done]] = True
        active[a[done]] = False
        active[a] &= lam[a] < _LAM_STALL
    return th, obj, its, conv


def _fit_batch_np(y, tis, t1c, bc, u, lb, ub, max_iters, tol, eps, n_b, n_starts,
                  t1_prof, dprof, sd, sdd, det):
    nvox = y.shape[0]
    theta = np.zeros((nvox, 3))
    resid = np.zeros(nvox)
    iters = np.zeros(nvox, dtype=np.int32)
    converged = np.zeros(nvox, dtype=bool)
    degenerate = y.max(axis=1) <= 0.0
    theta[degenerate] = (lb[0], 0.0, 0.0)

    idx = np.flatnonzero(~degenerate)
    if idx.size:
        yl = y[idx]
        nl = idx.size
        sum_u2 = (u**2).sum(axis=1)
        syu = yl @ u.T
        pd_opt = np.maximum(syu, 0.0) / sum_u2
        obj_grid = (yl**2).sum(axis=1)[:, None] - 2.0 * pd_opt * syu + pd_opt**2 * sum_u2
        # Rank grid candidates per t1 index (best b for each t1), ties toward
        # smaller b then smaller t1, matching the t1-major candidate order.
        n_t1 = t1c.size // n_b
        og = obj_grid.reshape(nl, n_t1, n_b)
        b_best = np.argmin(og, axis=2)
        t1_obj = np.take_along_axis(og, b_best[:, :, None], axis=2)[:, :, 0]
        order = np.argsort(t1_obj, axis=1, kind="stable")
        rows = np.arange(nl)

        best_th = best_obj = best_its = best_conv = None
        for s in range(min(n_starts, n_t1)):
            if s == 0:
                run = rows
            else:
                run = np.flatnonzero(best_obj >= _OBJ_FLOOR)
                if run.size == 0:
                    break
            t1_idx = order[run, s]
            flat = t1_idx * n_b + b_best[run, t1_idx]
            init = np.stack([t1c[flat], pd_opt[run, flat], bc[flat]], axis=1)
            th_s, obj_s, its_s, conv_s = _refine_np(
                np.clip(init, lb, ub), yl[run], tis, lb, ub, max_iters, tol, eps)
            if s == 0:
                best_th, best_obj, best_its, best_conv = th_s, obj_s, its_s, conv_s
            else:
                sel = obj_s < best_obj[run]
                upd = run[sel]
                best_th[upd] = th_s[sel]
                best_obj[upd] = obj_s[sel]
                best_its[upd] = its_s[sel]
                best_conv[upd] = conv_s[sel]

        # Sign-pattern scan (stage 2 of the module docstring): profile the
        # signed linear parameters over t1_prof for every single-flip sign
        # pattern and refine from each pattern's best candidate.
        nti = tis.size
        sy2 = (yl**2).sum(axis=1)
        valid_j = det > 1e-12 * nti * sdd
        detsafe = np.where(valid_j, det, 1.0)
        for k in range(nti + 1):
            run = np.flatnonzero(best_obj >= _OBJ_FLOOR)
            if run.size == 0:
                break
            z = yl[run].copy()
            z[:, :k] *= -1.0
            tsum = z.sum(axis=1)
            uprof = z @ dprof.T
            alpha = (tsum[:, None] * sdd[None, :] - uprof * sd[None, :]) / detsafe
            gamma = (tsum[:, None] * sd[None, :] - uprof * nti) / detsafe
            fprof = np.where(valid_j[None, :] & (alpha > 0.0),
                             sy2[run, None] - (alpha * tsum[:, None] - gamma * uprof),
                             np.inf)
            jb = np.argmin(fprof, axis=1)
            rr = np.arange(run.size)
            ok = np.isfinite(fprof[rr, jb])
            if not ok.any():
                continue
            run, jb, rr = run[ok], jb[ok], rr[ok]
            # Sharpen the grid winner: golden-section on the smooth profiled
            # objective between its grid neighbours.
            zk = z[rr]
            t1_g = _golden_np(t1_prof[np.maximum(jb - 1, 0)],
                              t1_prof[np.minimum(jb + 1, t1_prof.size - 1)],
                              zk, tis, sy2[run])
            f_g, a_g, g_g = _profile_eval_np(t1_g, zk, tis, sy2[run])
            use_g = np.isfinite(f_g)
            t1_s = np.where(use_g, t1_g, t1_prof[jb])
            a_s = np.where(use_g, a_g, alpha[rr, jb])
            g_s = np.where(use_g, g_g, gamma[rr, jb])
            init = np.stack([np.clip(t1_s, lb[0], ub[0]),
                             np.clip(a_s, lb[1], ub[1]),
                             np.clip(g_s / a_s, lb[2], ub[2])], axis=1)
            th_s, obj_s, its_s, conv_s = _refine_np(
                init, yl[run], tis, lb, ub, max_iters, tol, eps)
            sel = obj_s < best_obj[run]
            upd = run[sel]
            best_th[upd] = th_s[sel]
            best_obj[upd] = obj_s[sel]
            best_its[upd] = its_s[sel]
            best_conv[upd] = conv_s[sel]

        # Polish on the exact (unsmoothed) model: the smoothed optimum is
        # biased by ~eps where a TI lands near the signal null, which is an
        # error of eps/sensitivity in the flat (t1, b) valley directions.
        th_p, obj_p, its_p, conv_p = _refine_np(
            best_th, yl, tis, lb, ub, max_iters, tol, 0.0)
        theta[idx] = th_p
        resid[idx] = np.sqrt(obj_p)
        iters[idx] = best_its + its_p
        converged[idx] = conv_p
    return theta, resid, iters, converged, degenerate


# ---------------------------------------------------------------------------
# numba backend

if backend.HAS_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _solve3(a, rhs, out):
        # Gaussian elimination with partial pivoting on a 3x3 copy.
        m = np.empty((3, 4))
        for i in range(3):
            for j in range(3):
                m[i, j] = a[i, j]
            m[i, 3] = rhs[i]
        for col in range(3):
            piv = col
            best = abs(m[col, col])
            for row in range(col + 1, 3):
                if abs(m[row, col]) > best:
                    best = abs(m[row, col])
                    piv = row
            if best == 0.0:
                return False
            if piv != col:
                for j in range(4):
                    tmp = m[col, j]
                    m[col, j] = m[piv, j]
                    m[piv, j] = tmp
            inv = 1.0 / m[col, col]
            for row in range(col + 1, 3):
                f = m[row, col] * inv
                for j in range(col, 4):
                    m[row, j] -= f * m[col, j]
        for i in range(2, -1, -1):
            s = m[i, 3]
            for j in range(i + 1, 3):
                s -= m[i, j] * out[j]
            out[i] = s / m[i, i]
        return True

    @njit(cache=True)
    def _objective_nb(t1, pd, b, tis, y, eps):
        obj = 0.0
        for n in range(tis.size):
            inner = 1.0 - b * np.exp(-tis[n] / t1)
            s = pd * np.sqrt(inner * inner + eps * eps)
            d = s - y[n]
            obj += d * d
        return obj

    @njit(cache=True)
    def _profile_eval_nb(t1, yv, k, tis, sy2):
        # Scalar twin of _profile_eval_np for sign pattern k.
        nti = tis.size
        sd = 0.0
        sdd = 0.0
        u = 0.0
        tsum = 0.0
        for n in range(nti):
            d = np.exp(-tis[n] / t1)
            sd += d
            sdd += d * d
            zn = -yv[n] if n < k else yv[n]
            u += zn * d
            tsum += zn
        det = nti * sdd - sd * sd
        if det <= 1e-12 * nti * sdd:
            return np.inf, 0.0, 0.0
        alpha = (tsum * sdd - u * sd) / det
        if alpha <= 0.0:
            return np.inf, 0.0, 0.0
        gamma = (tsum * sd - u * nti) / det
        return sy2 - (alpha * tsum - gamma * u), alpha, gamma

    @njit(cache=True)
    def _refine_nb(t1, pd, b, tis, yv, lb, ub, max_iters, tol, eps,
                   jac, r, hess, grad, amat, delta):
        nti = tis.size
        obj = _objective_nb(t1, pd, b, tis, yv, eps)
        lam = 1e-3
        conv = False
        it = 0
        while it < max_iters:
            it += 1
            for n in range(nti):
                decay = np.exp(-tis[n] / t1)
                inner = 1.0 - b * decay
                root = np.sqrt(inner * inner + eps * eps)
                scale = inner / root if root > 0.0 else 0.0
                r[n] = pd * root - yv[n]
                jac[n, 0] = pd * scale * (-b * decay * tis[n] / (t1 * t1))
                jac[n, 1] = root
                jac[n, 2] = pd * scale * (-decay)
            for i in range(3):
                grad[i] = 0.0
                for j in range(3):
                    hess[i, j] = 0.0
            for n in range(nti):
                for i in range(3):
                    grad[i] += jac[n, i] * r[n]
                    for j in range(3):
                        hess[i, j] += jac[n, i] * jac[n, j]
            # Projected gradient (KKT at active bounds), then the scaled and
            # absolute stationarity tests.
            g0 = grad[0]
            g1 = grad[1]
            g2 = grad[2]
            if (t1 <= lb[0] + 1e-12 and g0 > 0.0) or (t1 >= ub[0] - 1e-12 and g0 < 0.0):
                g0 = 0.0
            if (pd <= lb[1] + 1e-12 and g1 > 0.0) or (pd >= ub[1] - 1e-12 and g1 < 0.0):
                g1 = 0.0
            if (b <= lb[2] + 1e-12 and g2 > 0.0) or (b >= ub[2] - 1e-12 and g2 < 0.0):
                g2 = 0.0
            gmax = max(abs(g0), abs(g1), abs(g2))
            rnorm = np.sqrt(obj)
            if ((abs(g0) <= _GTOL * np.sqrt(hess[0, 0]) * rnorm + 1e-16
                 and abs(g1) <= _GTOL * np.sqrt(hess[1, 1]) * rnorm + 1e-16
                 and abs(g2) <= _GTOL * np.sqrt(hess[2, 2]) * rnorm + 1e-16)
                    or gmax <= _GRAD_FLOOR * max(obj, 1.0)):
                conv = True
                break
            for i in range(3):
                for j in range(3):
                    amat[i, j] = hess[i, j]
                amat[i, i] += lam * hess[i, i] + 1e-12
                grad[i] = -grad[i]
            if not _solve3(amat, grad, delta):
                break
            t1n = min(max(t1 + delta[0], lb[0]), ub[0])
            pdn = min(max(pd + delta[1], lb[1]), ub[1])
            bn = min(max(b + delta[2], lb[2]), ub[2])
            obj_new = _objective_nb(t1n, pdn, bn, tis, yv, eps)
            if obj_new < obj:
                rel = (obj - obj_new) / max(obj, 1e-300)
                step = max(abs(t1n - t1), abs(pdn - pd), abs(bn - b))
                scale = 1.0 + max(abs(t1n), abs(pdn), abs(bn))
                t1, pd, b = t1n, pdn, bn
                obj = obj_new
                lam = max(lam / 3.0, 1e-12)
                if rel < tol or obj_new < _OBJ_FLOOR or step <= _STEP_FLOOR * scale:
                    conv = True
                    break
            else:
                lam *= 10.0
                if lam >= _LAM_STALL:
                    break
        return t1, pd, b, obj, it, conv

    @njit(cache=True)
    def _fit_batch_nb(y, tis, t1c, bc, u, lb, ub, max_iters, tol, eps, n_b, n_starts,
                      t1_prof, dprof, sd, sdd, det):
        nvox = y.shape[0]
        nti = tis.size
        ncand = t1c.size
        n_t1 = ncand // n_b
        theta = np.zeros((nvox, 3))
        resid = np.zeros(nvox)
        iters = np.zeros(nvox, dtype=np.int32)
        converged = np.zeros(nvox, dtype=np.bool_)
        degenerate = np.zeros(nvox, dtype=np.bool_)

        sum_u2 = np.empty(ncand)
        for g in range(ncand):
            s = 0.0
            for n in range(nti):
                s += u[g, n] * u[g, n]
            sum_u2[g] = s

        jac = np.empty((nti, 3))
        r = np.empty(nti)
        hess = np.empty((3, 3))
        grad = np.empty(3)
        amat = np.empty((3, 3))
        delta = np.empty(3)
        per_obj = np.empty(n_t1)
        per_pd = np.empty(n_t1)
        per_g = np.empty(n_t1, dtype=np.int64)
        used = np.empty(n_t1, dtype=np.bool_)

        m = min(n_starts, n_t1)
        for v in range(nvox):
            ymax = 0.0
            sum_y2 = 0.0
            for n in range(nti):
                if y[v, n] > ymax:
                    ymax = y[v, n]
                sum_y2 += y[v, n] * y[v, n]
            if ymax <= 0.0:
                degenerate[v] = True
                theta[v, 0] = lb[0]
                continue

            # Best candidate (over b) for every t1 grid index.
            g = 0
            for i in range(n_t1):
                per_obj[i] = np.inf
                used[i] = False
                for _ in range(n_b):
                    syu = 0.0
                    for n in range(nti):
                        syu += y[v, n] * u[g, n]
                    pd_opt = syu / sum_u2[g]
                    if pd_opt < 0.0:
                        pd_opt = 0.0
                    obj_g = sum_y2 - 2.0 * pd_opt * syu + pd_opt * pd_opt * sum_u2[g]
                    if obj_g < per_obj[i]:
                        per_obj[i] = obj_g
                        per_pd[i] = pd_opt
                        per_g[i] = g
                    g += 1

            best_obj = np.inf
            bt1 = lb[0]
            bpd = 0.0
            bb = 0.0
            bit = 0
            bconv = False
            for _ in range(m):
                sel = -1
                sobj = np.inf
                for i in range(n_t1):
                    if not used[i] and per_obj[i] < sobj:
                        sobj = per_obj[i]
                        sel = i
                if sel < 0:
                    break
                used[sel] = True
                gg = per_g[sel]
                t1 = min(max(t1c[gg], lb[0]), ub[0])
                pd = min(max(per_pd[sel], lb[1]), ub[1])
                b = min(max(bc[gg], lb[2]), ub[2])
                t1, pd, b, obj, it, conv = _refine_nb(
                    t1, pd, b, tis, y[v], lb, ub, max_iters, tol, eps,
                    jac, r, hess, grad, amat, delta)
                if obj < best_obj:
                    best_obj = obj
                    bt1 = t1
                    bpd = pd
                    bb = b
                    bit = it
                    bconv = conv
                if best_obj < _OBJ_FLOOR:
                    break
            # Sign-pattern scan (see the numpy twin for the rationale).
            nprof = t1_prof.size
            for k in range(nti + 1):
                if best_obj < _OBJ_FLOOR:
                    break
                tsum = 0.0
                for n in range(nti):
                    tsum += -y[v, n] if n < k else y[v, n]
                f_best = np.inf
                j_best = -1
                a_best = 0.0
                g_best = 0.0
                for j in range(nprof):
                    if det[j] <= 1e-12 * nti * sdd[j]:
                        continue
                    uj = 0.0
                    for n in range(nti):
                        zn = -y[v, n] if n < k else y[v, n]
                        uj += zn * dprof[j, n]
                    alpha = (tsum * sdd[j] - uj * sd[j]) / det[j]
                    if alpha <= 0.0:
                        continue
                    gamma = (tsum * sd[j] - uj * nti) / det[j]
                    f = sum_y2 - (alpha * tsum - gamma * uj)
                    if f < f_best:
                        f_best = f
                        j_best = j
                        a_best = alpha
                        g_best = gamma
                if j_best < 0:
                    continue
                # Golden-section sharpening between the grid neighbours.
                jlo = j_best - 1 if j_best > 0 else j_best
                jhi = j_best + 1 if j_best < nprof - 1 else j_best
                a_log = np.log(t1_prof[jlo])
                b_log = np.log(t1_prof[jhi])
                x1 = b_log - _GOLDEN * (b_log - a_log)
                x2 = a_log + _GOLDEN * (b_log - a_log)
                f1 = _profile_eval_nb(np.exp(x1), y[v], k, tis, sum_y2)[0]
                f2 = _profile_eval_nb(np.exp(x2), y[v], k, tis, sum_y2)[0]
                for _ in range(_GOLDEN_ITERS):
                    if f1 < f2:
                        b_log = x2
                        x2 = x1
                        f2 = f1
                        x1 = b_log - _GOLDEN * (b_log - a_log)
                        f1 = _profile_eval_nb(np.exp(x1), y[v], k, tis, sum_y2)[0]
                    else:
                        a_log = x1
                        x1 = x2
                        f1 = f2
                        x2 = a_log + _GOLDEN * (b_log - a_log)
                        f2 = _profile_eval_nb(np.exp(x2), y[v], k, tis, sum_y2)[0]
                xm = x1 if f1 < f2 else x2
                fg, ag, gg = _profile_eval_nb(np.exp(xm), y[v], k, tis, sum_y2)
                if np.isfinite(fg):
                    t1_s = min(max(np.exp(xm), lb[0]), ub[0])
                    pd_s = min(max(ag, lb[1]), ub[1])
                    b_s = min(max(gg / ag, lb[2]), ub[2])
                else:
                    t1_s = min(max(t1_prof[j_best], lb[0]), ub[0])
                    pd_s = min(max(a_best, lb[1]), ub[1])
                    b_s = min(max(g_best / a_best, lb[2]), ub[2])
                t1, pd, b, obj, it, conv = _refine_nb(
                    t1_s, pd_s, b_s, tis, y[v], lb, ub, max_iters, tol, eps,
                    jac, r, hess, grad, amat, delta)
                if obj < best_obj:
                    best_obj = obj
                    bt1 = t1
                    bpd = pd
                    bb = b
                    bit = it
                    bconv = conv
            # Exact-model polish (see the numpy twin for the rationale).
            bt1, bpd, bb, best_obj, it2, bconv = _refine_nb(
                bt1, bpd, bb, tis, y[v], lb, ub, max_iters, tol, 0.0,
                jac, r, hess, grad, amat, delta)
            theta[v, 0] = bt1
            theta[v, 1] = bpd
            theta[v, 2] = bb
            resid[v] = np.sqrt(best_obj)
            iters[v] = bit + it2
            converged[v] = bconv
        return theta, resid, iters, converged, degenerate


def _fit_batch(y: np.ndarray, protocol: Protocol, opts: FitOptions):
    """Fit every row of ``y`` (shape V x N); dispatches on the active backend."""
    y = np.ascontiguousarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[1] != len(protocol):
        raise ValueError(f"series batch must be (V, {len(protocol)}), got {y.shape}")
    if (y < 0).any():
        raise ValueError("series values must be >= 0")
    t1c, bc, u = _grid_tables(protocol, opts)
    tis = protocol.tis_array
    t1_prof = np.geomspace(opts.bounds[0][0], opts.bounds[0][1], _PROFILE_POINTS)
    dprof = np.exp(-tis[None, :] / t1_prof[:, None])
    sd = dprof.sum(axis=1)
    sdd = (dprof * dprof).sum(axis=1)
    det = len(protocol) * sdd - sd * sd
    args = (y, tis, t1c, bc, u, opts.lower(), opts.upper(),
            opts.max_iters, opts.tol, opts.smooth_eps,
            len(opts.b_grid), opts.n_starts,
            t1_prof, dprof, sd, sdd, det)
    if backend.use_numba():
        return _fit_batch_nb(*args)
    return _fit_batch_np(*args)


def fit_voxel(series, protocol: Protocol, opts: FitOptions = FitOptions()) -> FitResult:
    """Fit one voxel's series; see module docstring for the algorithm."""
    y = np.atleast_2d(np.asarray(series, dtype=np.float64))
    theta, resid, iters, converged, degenerate = _fit_batch(y, protocol, opts)
    t1, pd, b = theta[0]
    return FitResult(
        params=TissueParams(t1=float(t1), pd=float(pd), b=float(b)),
        residual_norm=float(resid[0]),
        iterations=int(iters[0]),
        converged=bool(converged[0]),
        degenerate=bool(degenerate[0]),
    )


def fit_map(series: WeightedSeries, opts: FitOptions = FitOptions()) -> tuple[QuantMap, FitMapResult]:
    """Fit every voxel of a weighted series.

    The returned map's mask is False where the fit was degenerate (all-zero
    series) or found no signal (pd = 0); those voxels are zeroed per the
    background convention.  Raw per-voxel parameters are kept in the result
    metadata.
    """
    n, h, w = series.images.shape
    y = series.images.reshape(n, h * w).T
    theta, resid, iters, converged, degenerate = _fit_batch(y, series.protocol, opts)
    mask = (~degenerate) & (theta[:, 1] > 0)
    t1 = np.where(mask, theta[:, 0], 0.0).reshape(h, w)
    pd = np.where(mask, theta[:, 1], 0.0).reshape(h, w)
    b = np.where(mask, theta[:, 2], 0.0).reshape(h, w)
    qmap = QuantMap(t1, pd, b, mask.reshape(h, w))
    meta = FitMapResult(
        residual_norm=resid.reshape(h, w),
        iterations=iters.reshape(h, w),
        converged=converged.reshape(h, w),
        degenerate=degenerate.reshape(h, w),
        raw_params=theta.reshape(h, w, 3),
    )
    return qmap, meta


def crlb_t1(params: TissueParams, protocol: Protocol, sigma: float) -> float:
    """Cramer-Rao lower bound on the t1 estimator standard deviation [s].

    Gaussian-noise Fisher information ``J^T J / sigma^2`` from the exact
    signal Jacobian over the protocol.  Returns ``inf`` when the information
    matrix is singular (unidentifiable configuration).
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    jac = jacobian_series(params, protocol, mode="exact")
    info = jac.T @ jac / sigma**2
    if np.linalg.cond(info) > 1e12:
        return float("inf")
    return float(np.sqrt(np.linalg.inv(info)[0, 0]))
