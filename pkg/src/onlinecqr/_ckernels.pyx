# cython: language_level=3
"""Compiled kernels mirroring ``_pykernels`` (see that module for contracts)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt, isnan, isfinite, NAN
from libc.stdlib cimport malloc, free, qsort

cnp.import_array()

cdef enum:
    OK = 0
    UNBOUNDED = 1
    RANK_DEFICIENT = 2
    ITER_CAP = 3
    DEGENERATE = 4

cdef double ZERO_RTOL = 1e-10
cdef double OPT_RTOL = 1e-12
cdef double INDEP_RTOL = 1e-9
cdef double AT_RISK_RTOL = 1e-10


cdef struct Kink:
    double t
    double w
    Py_ssize_t idx


cdef int _cmp_kink(const void* pa, const void* pb) noexcept nogil:
    cdef const Kink* a = <const Kink*> pa
    cdef const Kink* b = <const Kink*> pb
    if a.t < b.t:
        return -1
    if a.t > b.t:
        return 1
    if a.idx < b.idx:
        return -1
    if a.idx > b.idx:
        return 1
    return 0


cdef int _invert(double* a, double* out, Py_ssize_t p) noexcept nogil:
    """Gauss-Jordan with partial pivoting; ``a`` is destroyed."""
    cdef Py_ssize_t i, j, c, piv
    cdef double best, tmp, f
    for i in range(p):
        for j in range(p):
            out[i * p + j] = 1.0 if i == j else 0.0
    for c in range(p):
        piv = c
        best = fabs(a[c * p + c])
        for i in range(c + 1, p):
            if fabs(a[i * p + c]) > best:
                best = fabs(a[i * p + c])
                piv = i
        if best == 0.0 or not isfinite(best):
            return 1
        if piv != c:
            for j in range(p):
                tmp = a[c * p + j]; a[c * p + j] = a[piv * p + j]; a[piv * p + j] = tmp
                tmp = out[c * p + j]; out[c * p + j] = out[piv * p + j]; out[piv * p + j] = tmp
        f = 1.0 / a[c * p + c]
        for j in range(p):
            a[c * p + j] *= f
            out[c * p + j] *= f
        for i in range(p):
            if i != c:
                f = a[i * p + c]
                if f != 0.0:
                    for j in range(p):
                        a[i * p + j] -= f * a[c * p + j]
                        out[i * p + j] -= f * out[c * p + j]
    for i in range(p * p):
        if not isfinite(out[i]):
            return 1
    return 0


cdef int _least_squares_start(const double* zu, const double* yu, Py_ssize_t m,
                              Py_ssize_t p, double* start) noexcept nogil:
    cdef Py_ssize_t i, j, l
    cdef double acc
    cdef int status = 0
    cdef double* gram = <double*> malloc(p * p * sizeof(double))
    cdef double* ginv = <double*> malloc(p * p * sizeof(double))
    cdef double* rhs = <double*> malloc(p * sizeof(double))
    for j in range(p):
        rhs[j] = 0.0
        for l in range(p):
            gram[j * p + l] = 0.0
    for i in range(m):
        for j in range(p):
            rhs[j] += zu[i * p + j] * yu[i]
            for l in range(p):
                gram[j * p + l] += zu[i * p + j] * zu[i * p + l]
    if _invert(gram, ginv, p) != 0:
        status = 1
    else:
        for j in range(p):
            acc = 0.0
            for l in range(p):
                acc += ginv[j * p + l] * rhs[l]
            start[j] = acc
    free(gram); free(ginv); free(rhs)
    return status


cdef int _cold_basis(const double* zu, const double* yu, Py_ssize_t m, Py_ssize_t p,
                     const double* beta0, Py_ssize_t* basis) noexcept nogil:
    cdef Py_ssize_t i, j, l, count
    cdef double acc, nrm, vn, dot
    cdef int have_start = 1
    cdef int status = 1
    cdef double* start = <double*> malloc(p * sizeof(double))
    for j in range(p):
        if isnan(beta0[j]):
            have_start = 0
    if have_start:
        for j in range(p):
            start[j] = beta0[j]
    elif _least_squares_start(zu, yu, m, p, start) != 0:
        free(start)
        return 1
    cdef double* q = <double*> malloc(p * p * sizeof(double))
    cdef double* v = <double*> malloc(p * sizeof(double))
    cdef Kink* order = <Kink*> malloc(m * sizeof(Kink))
    for i in range(m):
        acc = yu[i]
        for j in range(p):
            acc -= zu[i * p + j] * start[j]
        order[i].t = fabs(acc)
        order[i].w = 0.0
        order[i].idx = i
    qsort(order, m, sizeof(Kink), _cmp_kink)
    count = 0
    for i in range(m):
        nrm = 0.0
        for j in range(p):
            v[j] = zu[order[i].idx * p + j]
            nrm += v[j] * v[j]
        nrm = sqrt(nrm)
        if nrm == 0.0:
            continue
        for l in range(count):
            dot = 0.0
            for j in range(p):
                dot += q[l * p + j] * v[j]
            for j in range(p):
                v[j] -= dot * q[l * p + j]
        vn = 0.0
        for j in range(p):
            vn += v[j] * v[j]
        vn = sqrt(vn)
        if vn > INDEP_RTOL * nrm:
            for j in range(p):
                q[count * p + j] = v[j] / vn
            basis[count] = order[i].idx
            count += 1
            if count == p:
                status = 0
                break
    free(start); free(q); free(v); free(order)
    return status


cdef int _solve(const double* zu, const double* yu, const double* u, const double* d,
                Py_ssize_t m, Py_ssize_t p, Py_ssize_t* basis, double* beta,
                const double* beta0, Py_ssize_t max_iter, Py_ssize_t* iters_out) noexcept nogil:
    cdef Py_ssize_t i, j, l, c, best_c, nk, hit
    cdef double ztol, scale, rowmax, dmax, acc, sigma, slope, best, val, nrm
    cdef int status = OK
    cdef int recovered = 0
    cdef int any_zero
    cdef Py_ssize_t iters = 0
    cdef double* zh = <double*> malloc(p * p * sizeof(double))
    cdef double* binv = <double*> malloc(p * p * sizeof(double))
    cdef double* b = <double*> malloc(p * sizeof(double))
    cdef double* q = <double*> malloc(p * sizeof(double))
    cdef double* extra = <double*> malloc(p * sizeof(double))
    cdef double* slopes = <double*> malloc(2 * p * sizeof(double))
    cdef double* v = <double*> malloc(p * sizeof(double))
    cdef double* r = <double*> malloc(m * sizeof(double))
    cdef double* a = <double*> malloc(m * sizeof(double))
    cdef char* state = <char*> malloc(m * sizeof(char))  # 0 nonbasic, 1 basic, 2 zero nonbasic
    cdef Kink* kinks = <Kink*> malloc(m * sizeof(Kink))
    cdef double nan_start[64]

    if m < p or (basis[0] < 0 and _cold_basis(zu, yu, m, p, beta0, basis) != 0):
        iters_out[0] = 0
        free(zh); free(binv); free(b); free(q); free(extra); free(slopes); free(v)
        free(r); free(a); free(state); free(kinks)
        return RANK_DEFICIENT

    dmax = 0.0
    for i in range(m):
        if fabs(yu[i]) > dmax:
            dmax = fabs(yu[i])
    ztol = ZERO_RTOL * (1.0 + dmax)
    scale = 1.0
    for i in range(m):
        rowmax = 0.0
        for j in range(p):
            if fabs(zu[i * p + j]) > rowmax:
                rowmax = fabs(zu[i * p + j])
        scale += u[i] * rowmax
    dmax = 0.0
    for j in range(p):
        if fabs(d[j]) > dmax:
            dmax = fabs(d[j])
    scale += dmax

    while True:
        for l in range(p):
            for j in range(p):
                zh[l * p + j] = zu[basis[l] * p + j]
        if _invert(zh, binv, p) != 0:
            if recovered or p > 64:
                status = RANK_DEFICIENT
                break
            for j in range(p):
                nan_start[j] = NAN
            if _cold_basis(zu, yu, m, p, nan_start, basis) != 0:
                status = RANK_DEFICIENT
                break
            recovered = 1
            continue
        for j in range(p):
            acc = 0.0
            for l in range(p):
                acc += binv[j * p + l] * yu[basis[l]]
            b[j] = acc
        for i in range(m):
            state[i] = 0
        for l in range(p):
            state[basis[l]] = 1
        any_zero = 0
        for j in range(p):
            q[j] = d[j]
            extra[j] = 0.0
        for i in range(m):
            if state[i] == 1:
                r[i] = 0.0
                continue
            acc = yu[i]
            for j in range(p):
                acc -= zu[i * p + j] * b[j]
            r[i] = acc
            if fabs(acc) <= ztol:
                state[i] = 2
                any_zero = 1
            elif acc > 0.0:
                for j in range(p):
                    q[j] -= u[i] * zu[i * p + j]
            else:
                for j in range(p):
                    q[j] += u[i] * zu[i * p + j]
        if any_zero:
            for i in range(m):
                if state[i] == 2:
                    for c in range(p):
                        acc = 0.0
                        for j in range(p):
                            acc += zu[i * p + j] * binv[j * p + c]
                        extra[c] += u[i] * fabs(acc)
        best = 0.0
        best_c = -1
        for c in range(p):
            acc = 0.0
            nrm = 0.0
            for j in range(p):
                acc += q[j] * binv[j * p + c]
                nrm += binv[j * p + c] * binv[j * p + c]
            nrm = sqrt(nrm)
            val = u[basis[c]] + acc + extra[c]
            slopes[2 * c] = val
            if best_c < 0 or val / nrm < best:
                best = val / nrm
                best_c = 2 * c
            val = u[basis[c]] - acc + extra[c]
            slopes[2 * c + 1] = val
            if val / nrm < best:
                best = val / nrm
                best_c = 2 * c + 1
        if not (best < -OPT_RTOL * scale):
            for j in range(p):
                beta[j] = b[j]
            status = DEGENERATE if any_zero else OK
            break
        c = best_c // 2
        sigma = 1.0 if best_c % 2 == 0 else -1.0
        for j in range(p):
            v[j] = sigma * binv[j * p + c]
        nk = 0
        for i in range(m):
            if state[i] != 0:
                continue
            acc = 0.0
            for j in range(p):
                acc += zu[i * p + j] * v[j]
            if acc != 0.0 and r[i] * acc > 0.0:
                kinks[nk].t = r[i] / acc
                kinks[nk].w = 2.0 * u[i] * fabs(acc)
                kinks[nk].idx = i
                nk += 1
        qsort(kinks, nk, sizeof(Kink), _cmp_kink)
        slope = slopes[best_c]
        hit = -1
        for l in range(nk):
            slope += kinks[l].w
            if slope >= 0.0:
                hit = l
                break
        if hit < 0:
            for j in range(p):
                beta[j] = b[j]
            status = UNBOUNDED
            break
        basis[c] = kinks[hit].idx
        iters += 1
        if iters >= max_iter:
            for j in range(p):
                beta[j] = b[j]
            status = ITER_CAP
            break

    iters_out[0] = iters
    free(zh); free(binv); free(b); free(q); free(extra); free(slopes); free(v)
    free(r); free(a); free(state); free(kinks)
    return status


def solve_l1(const double[:, ::1] zu, const double[::1] yu, const double[::1] u,
             const double[::1] d,
             Py_ssize_t[::1] basis, double[::1] beta, const double[::1] beta0,
             Py_ssize_t max_iter):
    cdef Py_ssize_t m = zu.shape[0]
    cdef Py_ssize_t p = zu.shape[1]
    cdef Py_ssize_t iters = 0
    cdef int status
    cdef double dummy = 0.0
    cdef const double* zptr = &zu[0, 0] if m > 0 else &dummy
    cdef const double* yptr = &yu[0] if m > 0 else &dummy
    cdef const double* uptr = &u[0] if m > 0 else &dummy
    with nogil:
        status = _solve(zptr, yptr, uptr, &d[0], m, p, &basis[0], &beta[0], &beta0[0],
                        max_iter, &iters)
    return status, iters


def fit_path(const double[::1] y, const double[::1] delta, const double[:, ::1] z,
             const double[::1] w, const double[::1] hdiff, Py_ssize_t start,
             double[::1] cw, Py_ssize_t[::1] basis, double[:, ::1] coefs,
             const double[::1] beta0, Py_ssize_t max_iter):
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t p = z.shape[1]
    cdef Py_ssize_t K = hdiff.shape[0]
    cdef Py_ssize_t i, j, k, m = 0, iters = 0, total = 0
    cdef int status = OK
    cdef double acc, wi
    cdef double dummy = 0.0
    cdef double slack = 0.0
    for i in range(n):
        if fabs(y[i]) > slack:
            slack = fabs(y[i])
    slack = AT_RISK_RTOL * (1.0 + slack) if n > 0 else 0.0
    for i in range(n):
        if delta[i] == 1.0 and w[i] > 0.0:
            m += 1
    zu_arr = np.empty((m, p))
    yu_arr = np.empty(m)
    u_arr = np.empty(m)
    cdef double[:, ::1] zu = zu_arr
    cdef double[::1] yu = yu_arr
    cdef double[::1] u = u_arr
    cdef double[::1] d = np.empty(p)
    cdef double[::1] beta = np.empty(p)
    cdef double[::1] start_beta = np.array(beta0, dtype=float)
    m = 0
    for i in range(n):
        if delta[i] == 1.0 and w[i] > 0.0:
            for j in range(p):
                zu[m, j] = z[i, j]
            yu[m] = y[i]
            u[m] = w[i]
            m += 1
    cdef const double* zptr = &zu[0, 0] if m > 0 else &dummy
    cdef const double* yptr = &yu[0] if m > 0 else &dummy
    cdef const double* uptr = &u[0] if m > 0 else &dummy
    with nogil:
        k = start
        while k < K:
            for j in range(p):
                d[j] = 0.0
            for i in range(n):
                wi = w[i] * (delta[i] - 2.0 * cw[i])
                for j in range(p):
                    d[j] += wi * z[i, j]
            status = _solve(zptr, yptr, uptr, &d[0], m, p, &basis[0], &beta[0],
                            &start_beta[0], max_iter, &iters)
            total += iters
            if status != OK:
                if status == DEGENERATE:
                    for j in range(p):
                        coefs[k, j] = beta[j]
                break
            for j in range(p):
                coefs[k, j] = beta[j]
                start_beta[j] = beta[j]
            if k + 1 < K:
                for i in range(n):
                    acc = 0.0
                    for j in range(p):
                        acc += z[i, j] * beta[j]
                    if y[i] >= acc - slack:
                        cw[i] += hdiff[k + 1]
            k += 1
    return status, k, total


def loss_score(const double[::1] y, const double[::1] delta, const double[:, ::1] z,
               const double[::1] w, const double[::1] cw, const double[::1] beta,
               double[::1] score):
    cdef Py_ssize_t n = z.shape[0]
    cdef Py_ssize_t p = z.shape[1]
    cdef Py_ssize_t i, j
    cdef double fit, loss = 0.0, ind, coef
    with nogil:
        for j in range(p):
            score[j] = 0.0
        for i in range(n):
            fit = 0.0
            for j in range(p):
                fit += z[i, j] * beta[j]
            loss += w[i] * (delta[i] * fabs(y[i] - fit) + (delta[i] - 2.0 * cw[i]) * fit)
            ind = 1.0 if (delta[i] == 1.0 and y[i] <= fit) else 0.0
            coef = w[i] * (ind - cw[i])
            for j in range(p):
                score[j] += coef * z[i, j]
        for j in range(p):
            score[j] /= n
    return loss / n
