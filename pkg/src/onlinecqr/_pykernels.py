"""Pure numpy kernels; the reference the compiled ``_ckernels`` must match.

Both modules expose the same functions with the same in/out conventions:

``solve_l1(zu, yu, u, d, basis, beta, beta0, max_iter) -> (status, iters)``
    Minimise ``sum_i u_i |yu_i - zu_i . b| + d . b`` by walking the vertices
    of the piecewise-linear objective. ``basis`` (length p, indices into the
    rows of ``zu``) is the warm start and is overwritten with the optimal
    basis; ``beta`` receives the minimiser. A negative ``basis[0]`` requests
    a cold start near ``beta0`` (or the least-squares fit when ``beta0`` has
    NaNs).

``fit_path(y, delta, z, w, hdiff, start, cw, basis, coefs, beta0, max_iter)``
    Sequential grid fit from level ``start``. ``cw`` holds the cumulative
    at-risk weights for level ``start`` and is advanced in place. Returns
    ``(status, level, iters)``; on a non-OK status ``level`` is the failing
    level, ``cw`` is still current for it and, for ``DEGENERATE``,
    ``coefs[level]`` holds the edge-optimal vertex.

``loss_score(y, delta, z, w, cw, beta, score) -> loss``
    Weighted grid-level loss, with the score written into ``score``.
"""

import numpy as np

OK = 0
UNBOUNDED = 1
RANK_DEFICIENT = 2
ITER_CAP = 3
DEGENERATE = 4

_ZERO_RTOL = 1e-10
_OPT_RTOL = 1e-12
_INDEP_RTOL = 1e-9
#: records within this relative distance of the fitted value count as at risk
AT_RISK_RTOL = 1e-10


def at_risk_slack(y):
    return AT_RISK_RTOL * (1.0 + float(np.max(np.abs(y)))) if y.size else 0.0


def _cold_basis(zu, yu, beta0):
    m, p = zu.shape
    if np.any(np.isnan(beta0)):
        gram = zu.T @ zu
        try:
            beta0 = np.linalg.solve(gram, zu.T @ yu)
        except np.linalg.LinAlgError:
            return None
    resid = np.abs(yu - zu @ beta0)
    order = np.lexsort((np.arange(m), resid))
    q = np.zeros((p, p))
    chosen = []
    for i in order:
        row = zu[i]
        nrm = np.sqrt(row @ row)
        if nrm == 0.0:
            continue
        v = row.copy()
        for l in range(len(chosen)):
            v -= (q[l] @ v) * q[l]
        vn = np.sqrt(v @ v)
        if vn > _INDEP_RTOL * nrm:
            q[len(chosen)] = v / vn
            chosen.append(i)
            if len(chosen) == p:
                return np.array(chosen, dtype=np.intp)
    return None


def solve_l1(zu, yu, u, d, basis, beta, beta0, max_iter):
    m, p = zu.shape
    if m < p:
        return RANK_DEFICIENT, 0
    if basis[0] < 0:
        cold = _cold_basis(zu, yu, beta0)
        if cold is None:
            return RANK_DEFICIENT, 0
        basis[:] = cold
    ztol = _ZERO_RTOL * (1.0 + np.max(np.abs(yu)))
    scale = np.sum(u * np.max(np.abs(zu), axis=1)) + np.max(np.abs(d)) + 1.0
    recovered = False
    iters = 0
    nonbasic = np.ones(m, dtype=bool)
    while True:
        h = basis.astype(np.intp)
        try:
            binv = np.linalg.inv(zu[h])
        except np.linalg.LinAlgError:
            binv = None
        if binv is None or not np.all(np.isfinite(binv)):
            if recovered:
                return RANK_DEFICIENT, iters
            cold = _cold_basis(zu, yu, np.full(p, np.nan))
            if cold is None:
                return RANK_DEFICIENT, iters
            basis[:] = cold
            recovered = True
            continue
        b = binv @ yu[h]
        r = yu - zu @ b
        nonbasic[:] = True
        nonbasic[h] = False
        r[h] = 0.0
        zero = nonbasic & (np.abs(r) <= ztol)
        s = np.sign(r)
        s[zero] = 0.0
        q = d - (u * s) @ zu
        g = q @ binv
        if np.any(zero):
            extra = u[zero] @ np.abs(zu[zero] @ binv)
        else:
            extra = np.zeros(p)
        uh = u[h]
        slopes = np.column_stack((uh + g + extra, uh - g + extra)).ravel()
        norms = np.repeat(np.sqrt(np.sum(binv * binv, axis=0)), 2)
        steep = slopes / norms
        c = int(np.argmin(steep))
        if not steep[c] < -_OPT_RTOL * scale:
            beta[:] = b
            return (DEGENERATE if np.any(zero) else OK), iters
        j, sigma = c // 2, (1.0 if c % 2 == 0 else -1.0)
        v = sigma * binv[:, j]
        a = zu @ v
        cand = nonbasic & ~zero & (a != 0.0) & (r * a > 0.0)
        idx = np.flatnonzero(cand)
        if idx.size == 0:
            beta[:] = b
            return UNBOUNDED, iters
        t = r[idx] / a[idx]
        order = np.lexsort((idx, t))
        running = slopes[c] + np.cumsum(2.0 * u[idx[order]] * np.abs(a[idx[order]]))
        hit = np.flatnonzero(running >= 0.0)
        if hit.size == 0:
            beta[:] = b
            return UNBOUNDED, iters
        basis[j] = idx[order[hit[0]]]
        iters += 1
        if iters >= max_iter:
            beta[:] = b
            return ITER_CAP, iters


def _level_linear_term(y, delta, z, w, cw):
    return ((w * (delta - 2.0 * cw)) @ z)


def fit_path(y, delta, z, w, hdiff, start, cw, basis, coefs, beta0, max_iter):
    keep = np.flatnonzero((delta == 1.0) & (w > 0.0))
    zu = np.ascontiguousarray(z[keep])
    yu = y[keep]
    u = w[keep]
    K = hdiff.shape[0]
    total = 0
    beta = np.empty(z.shape[1])
    slack = at_risk_slack(y)
    for k in range(start, K):
        d = _level_linear_term(y, delta, z, w, cw)
        status, iters = solve_l1(zu, yu, u, d, basis, beta, beta0, max_iter)
        total += iters
        if status != OK:
            if status == DEGENERATE:
                coefs[k] = beta
            return status, k, total
        coefs[k] = beta
        beta0 = beta
        if k + 1 < K:
            cw += (y >= z @ beta - slack) * hdiff[k + 1]
    return OK, K, total


def loss_score(y, delta, z, w, cw, beta, score):
    n = y.shape[0]
    fit = z @ beta
    loss = np.sum(w * (delta * np.abs(y - fit) + (delta - 2.0 * cw) * fit)) / n
    counted = (delta == 1.0) & (y <= fit)
    score[:] = ((w * (counted - cw)) @ z) / n
    return float(loss)
