"""Compiled extended Kalman filter kernels for the assessment model.

State layout: x = (log n_0, ..., log n_{A-1}, log f). Observations are
processed one scalar at a time, all linearised at the predicted mean, which
is algebraically the batch EKF update for a diagonal observation covariance.
"""

import math

import numpy as np
from numba import njit

LOG_2PI = math.log(2.0 * math.pi)
REC_BEVERTON_HOLT = 0
REC_RANDOM_WALK = 1
KIND_CATCH = 0
KIND_SURVEY = 1
# no 'nnan'/'ninf': the kernels test for NaN (missing cells) and inf (breakdown)
FASTMATH = {"nsz", "arcp", "contract", "afn", "reassoc"}


@njit(cache=True)
def process_mean(x, t_prev, plus, rec_model, log_alpha, beta, sel, weight, maturity, mort, g, jac):
    """Fill ``g`` with the process mean from state ``x`` in year index ``t_prev``."""
    A = sel.shape[0]
    m = A + 1
    for i in range(m):
        for j in range(m):
            jac[i, j] = 0.0
    f = math.exp(x[A])
    for i in range(1, A):
        src = i - 1
        g[i] = x[src] - sel[src] * f - mort[t_prev, src]
        jac[i, src] = 1.0
        jac[i, A] = -sel[src] * f
    if plus:
        a1 = x[A - 2] - sel[A - 2] * f - mort[t_prev, A - 2]
        a2 = x[A - 1] - sel[A - 1] * f - mort[t_prev, A - 1]
        top = max(a1, a2)
        lse = top + math.log(math.exp(a1 - top) + math.exp(a2 - top))
        w1 = math.exp(a1 - lse)
        w2 = math.exp(a2 - lse)
        g[A - 1] = lse
        jac[A - 1, A - 2] = w1
        jac[A - 1, A - 1] = w2
        jac[A - 1, A] = -(w1 * sel[A - 2] + w2 * sel[A - 1]) * f
    if rec_model == REC_BEVERTON_HOLT:
        ssb = 0.0
        for a in range(A):
            ssb += weight[t_prev, a] * maturity[t_prev, a] * math.exp(x[a])
        ssb = max(ssb, 1e-300)
        g[0] = log_alpha + math.log(ssb) - math.log1p(beta * ssb)
        scale = 1.0 / (ssb * (1.0 + beta * ssb))
        for a in range(A):
            jac[0, a] = weight[t_prev, a] * maturity[t_prev, a] * math.exp(x[a]) * scale
    else:
        g[0] = x[0]
        jac[0, 0] = 1.0
    g[A] = x[A]
    jac[A, A] = 1.0


@njit(cache=True)
def _obs_point(x, t, a, kind, tau, logq, sel, mort):
    """Predicted log observation and its derivative w.r.t. log f."""
    A = sel.shape[0]
    f = math.exp(x[A])
    F = sel[a] * f
    Z = F + mort[t, a]
    if kind == KIND_CATCH:
        if F <= 0.0 or Z <= 0.0:
            return -np.inf, 0.0
        em = -math.expm1(-Z)
        h = x[a] + math.log(F / Z) + math.log(em)
        dh = 1.0 - F / Z + F * math.exp(-Z) / em
        return h, dh
    return logq + x[a] - tau * Z, -tau * F


@njit(cache=True)
def nnz_cols(jac, cols, ncols):
    m = jac.shape[0]
    for i in range(m):
        c = 0
        for k in range(m):
            if jac[i, k] != 0.0:
                cols[i, c] = k
                c += 1
        ncols[i] = c


@njit(cache=True, fastmath=FASTMATH)
def run_filter(plus, rec_model, log_alpha, beta, sel, var_proc, var_rec, var_f,
               obs_log, kind, tau, logq, var_obs, weight, maturity, mort, x0, p0, n_iter,
               xf, pf, xp, pp, jacs):
    """Forward EKF pass. Returns the prediction-error negative log-likelihood.

    Fills filtered (xf, pf) and predicted (xp, pp) moments plus the process
    Jacobians used to reach each year. Returns +inf on covariance collapse.
    """
    T = obs_log.shape[1]
    A = sel.shape[0]
    m = A + 1
    nfleet = obs_log.shape[0]
    g = np.empty(m)
    jac = np.zeros((m, m))
    mu = np.empty(m)
    P = np.empty((m, m))
    PH = np.empty(m)
    tmp = np.empty((m, m))
    cols = np.empty((m, m), dtype=np.int64)
    ncols = np.empty(m, dtype=np.int64)
    lin = np.empty(m)
    nll = 0.0
    for t in range(T):
        if t == 0:
            for i in range(m):
                mu[i] = x0[i]
                for j in range(m):
                    P[i, j] = p0[i, j]
                    jacs[0, i, j] = 1.0 if i == j else 0.0
        else:
            process_mean(xf[t - 1], t - 1, plus, rec_model, log_alpha, beta, sel,
                         weight, maturity, mort, g, jac)
            for i in range(m):
                mu[i] = g[i]
            # P = J Pf J' + Q using the sparsity of J: survivor rows touch
            # (a-1, f), the plus group (A-2, A-1, f), recruitment up to all ages
            nnz_cols(jac, cols, ncols)
            for i in range(m):
                for j in range(m):
                    acc = 0.0
                    for c in range(ncols[i]):
                        k = cols[i, c]
                        acc += jac[i, k] * pf[t - 1, k, j]
                    tmp[i, j] = acc
            for i in range(m):
                for j in range(i + 1):
                    acc = 0.0
                    for c in range(ncols[j]):
                        k = cols[j, c]
                        acc += tmp[i, k] * jac[j, k]
                    P[i, j] = acc
                    P[j, i] = acc
            P[0, 0] += var_rec
            for i in range(1, A):
                P[i, i] += var_proc
            P[A, A] += var_f
            for i in range(m):
                for j in range(m):
                    jacs[t, i, j] = jac[i, j]
        for i in range(m):
            xp[t, i] = mu[i]
            for j in range(m):
                pp[t, i, j] = P[i, j]

        # iterated update: each pass relinearises at the previous posterior mean
        for i in range(m):
            lin[i] = xp[t, i]
        for it in range(n_iter):
            if it > 0:
                for i in range(m):
                    lin[i] = mu[i]
                    mu[i] = xp[t, i]
                    for j in range(m):
                        P[i, j] = pp[t, i, j]
            nll_t = 0.0
            for k in range(nfleet):
                for a in range(A):
                    y = obs_log[k, t, a]
                    if math.isnan(y):
                        continue
                    h, dh = _obs_point(lin, t, a, kind[k], tau[k], logq[k, a], sel, mort)
                    if not math.isfinite(h):
                        return np.inf
                    # innovation of the linearised measurement at the current mean
                    v = y - h - (mu[a] - lin[a]) - dh * (mu[A] - lin[A])
                    S = var_obs[k]
                    for i in range(m):
                        PH[i] = P[i, a] + P[i, A] * dh
                    S += PH[a] + PH[A] * dh
                    if not (S > 0.0) or not math.isfinite(S):
                        return np.inf
                    for i in range(m):
                        mu[i] += PH[i] * v / S
                    for i in range(m):
                        ci = PH[i] / S
                        for j in range(i + 1):
                            P[i, j] -= ci * PH[j]
                            P[j, i] = P[i, j]
                    nll_t += 0.5 * (LOG_2PI + math.log(S) + v * v / S)
        nll += nll_t
        for i in range(m):
            if not math.isfinite(mu[i]) or not P[i, i] > 0.0:
                return np.inf
            xf[t, i] = mu[i]
            for j in range(m):
                pf[t, i, j] = 0.5 * (P[i, j] + P[j, i])
    return nll


@njit(cache=True)
def initial_prior(sel, f0, mort_row, plus, catch_total, catch_mask, x0):
    """Per-recruit numbers at constant f0 scaled so predicted catch matches ``catch_total``."""
    A = sel.shape[0]
    pr = np.empty(A)
    pr[0] = 1.0
    for a in range(1, A):
        pr[a] = pr[a - 1] * math.exp(-(sel[a - 1] * f0 + mort_row[a - 1]))
    if plus:
        zl = sel[A - 1] * f0 + mort_row[A - 1]
        if zl > 0.0:
            pr[A - 1] /= -math.expm1(-zl)
    denom = 0.0
    for a in range(A):
        if catch_mask[a]:
            F = sel[a] * f0
            Z = F + mort_row[a]
            if Z > 0.0:
                denom += F / Z * (-math.expm1(-Z)) * pr[a]
    scale = 1.0
    if denom > 0.0 and catch_total > 0.0:
        scale = catch_total / denom
    for a in range(A):
        x0[a] = math.log(pr[a] * scale)
    x0[A] = math.log(f0)


@njit(cache=True)
def objective(theta, ages, plus, rec_model, i_proc, i_rec, i_f, i_a50, i_slope, i_alpha, i_beta,
              q_slot, sigma_slot, var_floor, obs_log, kind, tau, weight, maturity, mort,
              f0, catch_year, catch_total, catch_mask, n_iter, xf, pf, xp, pp, jacs):
    """Unpack transformed parameters, build the prior and run the filter."""
    A = ages.shape[0]
    K = obs_log.shape[0]
    slope = math.exp(theta[i_slope])
    a50 = theta[i_a50]
    sel = np.empty(A)
    for a in range(A):
        sel[a] = 1.0 / (1.0 + math.exp(-slope * (ages[a] - a50)))
    logq = np.zeros((K, A))
    for k in range(K):
        for a in range(A):
            if q_slot[k, a] >= 0:
                logq[k, a] = theta[q_slot[k, a]]
    var_obs = np.empty(K)
    for k in range(K):
        var_obs[k] = max(math.exp(2.0 * theta[sigma_slot[k]]), var_floor)
    var_proc = max(math.exp(2.0 * theta[i_proc]), var_floor)
    var_rec = max(math.exp(2.0 * theta[i_rec]), var_floor)
    var_f = max(math.exp(2.0 * theta[i_f]), var_floor)
    log_alpha = 0.0
    beta = 0.0
    if rec_model == REC_BEVERTON_HOLT:
        log_alpha = theta[i_alpha]
        beta = math.exp(theta[i_beta])
    m = A + 1
    x0 = np.empty(m)
    initial_prior(sel, f0, mort[catch_year], plus, catch_total, catch_mask, x0)
    for i in range(m):
        if not math.isfinite(x0[i]):
            return np.inf
    p0 = np.eye(m)
    return run_filter(plus, rec_model, log_alpha, beta, sel, var_proc, var_rec, var_f,
                      obs_log, kind, tau, logq, var_obs, weight, maturity, mort, x0, p0, n_iter,
                      xf, pf, xp, pp, jacs)
