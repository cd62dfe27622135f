"""Hot numeric kernels of the block-wise estimator.

Everything here sticks to the numpy subset numba compiles in nopython mode, so
the same source serves as the compiled path and the pure-numpy fallback (see
``_accel``). Inputs must be C-contiguous, writeable float64 arrays; the public
wrappers in ``estimator`` and ``complexity`` take care of that.
"""

import numpy as np

from ._accel import jit

EPS_DEN = 1e-12
EPS_REL = 1e-12
EIG_RTOL = 1e-14
LAM_LO = 1e-12
LAM_HI = 1e12
COLSUM_FLOOR = 1e-300

STATUS_OK = 0
STATUS_DEGENERATE = 1

SAFEGUARD_NONE = 0
SAFEGUARD_DAMPED = 1
SAFEGUARD_ROLLBACK = 2


@jit
def objective(Y, A, X, Theta, U, lam):
    R = Y - X @ (Theta @ A + U)
    return np.sum(R * R) + lam * np.sum(U * U)


@jit
def ridge_operator(X, lam):
    """(X'X + lam I)^-1 X', shared by every unit."""
    Q = X.shape[1]
    G = X.T @ X + lam * np.eye(Q)
    return np.linalg.solve(G, np.ascontiguousarray(X.T))


@jit
def u_solve(Y, A, X, Theta, lam):
    M = ridge_operator(X, lam)
    return M @ (Y - X @ (Theta @ A))


@jit
def center_rows(U):
    Q, N = U.shape
    m = U.sum(axis=1) / N
    return U - m.reshape((Q, 1))


@jit
def x_update(Y, A, X, Theta, U):
    """Unnormalized multiplicative X update with B_U clipped at zero."""
    B = np.maximum(Theta @ A + U, 0.0)
    # numerator clipped so that negative observations cannot flip signs
    num = np.maximum(Y @ np.ascontiguousarray(B.T), 0.0)
    den = X @ (B @ np.ascontiguousarray(B.T)) + EPS_DEN
    return X * num / den


@jit
def theta_update(Y, A, X, Theta, U):
    YU = np.maximum(Y - X @ U, 0.0)
    Xt = np.ascontiguousarray(X.T)
    num = (Xt @ YU) @ np.ascontiguousarray(A.T)
    den = (Xt @ X @ Theta) @ (A @ np.ascontiguousarray(A.T)) + EPS_DEN
    return Theta * num / den


@jit
def gram_eigvals(X):
    """Eigenvalues of X'X with numerical-noise values set to exactly 0."""
    d = np.linalg.eigvalsh(X.T @ X)
    dmax = d.max()
    out = np.empty_like(d)
    for i in range(d.shape[0]):
        out[i] = 0.0 if (dmax <= 0.0 or d[i] < EIG_RTOL * dmax) else d[i]
    return out


@jit
def df_from_eigs(d, lam, N):
    s = 0.0
    for i in range(d.shape[0]):
        if d[i] > 0.0:
            s += d[i] / (d[i] + lam)
    return N * s


@jit
def lambda_cap_from_eigs(d, df_max, N):
    """Smallest lam with df <= df_max by bisection on log(lam).

    Returns 0.0 when the cap is vacuous (df_max >= N*Q) and the upper
    bracket end otherwise, so df(result) <= df_max holds on exit.
    """
    NQ = N * d.shape[0]
    if df_max >= NQ:
        return 0.0
    if df_from_eigs(d, LAM_LO, N) <= df_max:
        return LAM_LO
    lo = np.log(LAM_LO)
    hi = np.log(LAM_HI)
    for _ in range(200):
        if hi - lo <= 1e-12:
            break
        mid = 0.5 * (lo + hi)
        if df_from_eigs(d, np.exp(mid), N) <= df_max:
            hi = mid
        else:
            lo = mid
    return np.exp(hi)


@jit
def normalize_columns(X, Theta, U):
    """Scale X to unit column sums and push the scale into (Theta, U)."""
    Q = X.shape[1]
    s = X.sum(axis=0)
    ok = True
    for q in range(Q):
        if not s[q] >= COLSUM_FLOOR:
            ok = False
    if not ok:
        return X, Theta, U, s, False
    D = s.reshape((Q, 1))
    return X / s, Theta * D, U * D, s, True


@jit
def run_blocks(Y, A, X, Theta, U, lam, df_max, tol, maxit, eta, update_u,
               freeze_iters, ema_rate, tau2):
    """Iterate cap / U / X / Theta blocks with the descent safeguard.

    ``df_max <= 0`` disables the cap, ``ema_rate <= 0`` disables the warm-start
    variance schedule, ``update_u=False`` freezes U (covariate-only NMF).
    """
    P, N = Y.shape
    obj_tr = np.full(maxit, np.nan)
    lam_tr = np.full(maxit, np.nan)
    dfu_tr = np.full(maxit, np.nan)
    cap_tr = np.zeros(maxit, dtype=np.int64)
    safe_tr = np.zeros(maxit, dtype=np.int64)
    sigma2_work = lam * tau2
    status = STATUS_OK
    converged = False
    cap_any = False
    n_done = 0

    for t in range(maxit):
        # (i) working scale, then cap floor at the current X
        cap_flag = 0
        if update_u:
            if ema_rate > 0.0 and t >= freeze_iters:
                R = Y - X @ (Theta @ A + U)
                sigma2_work = (1.0 - ema_rate) * sigma2_work + ema_rate * np.sum(R * R) / (P * N)
                lam = sigma2_work / tau2
            if df_max > 0.0:
                lc = lambda_cap_from_eigs(gram_eigvals(X), df_max, N)
                if lc > lam:
                    lam = lc
                    cap_flag = 1
                    cap_any = True

        L_old = objective(Y, A, X, Theta, U, lam)

        # (ii) ridge U-step, row-centred
        if update_u:
            U_c = center_rows(u_solve(Y, A, X, Theta, lam))
        else:
            U_c = U.copy()

        # (iii) X-step and renormalization
        X_c, Th_c, U_c, s, ok = normalize_columns(x_update(Y, A, X, Theta, U_c), Theta, U_c)
        if not ok:
            status = STATUS_DEGENERATE
            break

        # (iv) Theta-step
        Th_c = theta_update(Y, A, X_c, Th_c, U_c)

        # (v) safeguard on the true objective
        L_new = objective(Y, A, X_c, Th_c, U_c, lam)
        flag = SAFEGUARD_NONE
        if L_new > L_old:
            X_d, Th_d, U_d, s, ok = normalize_columns(
                (1.0 - eta) * X + eta * X_c,
                (1.0 - eta) * Theta + eta * Th_c,
                (1.0 - eta) * U + eta * U_c)
            L_d = objective(Y, A, X_d, Th_d, U_d, lam) if ok else np.inf
            if L_d <= L_old:
                X, Theta, U = X_d, Th_d, U_d
                L_new = L_d
                flag = SAFEGUARD_DAMPED
            else:
                L_new = L_old
                flag = SAFEGUARD_ROLLBACK
        else:
            X, Theta, U = X_c, Th_c, U_c

        obj_tr[t] = L_new
        lam_tr[t] = lam
        dfu_tr[t] = df_from_eigs(gram_eigvals(X), lam, N)
        cap_tr[t] = cap_flag
        safe_tr[t] = flag
        n_done = t + 1

        # (vi) relative change
        if abs(L_old - L_new) / (L_old + EPS_REL) < tol:
            converged = True
            break

    # the last X-step may have moved df_U above the cap: re-enforce at the final X
    if update_u and df_max > 0.0 and status == STATUS_OK:
        lc = lambda_cap_from_eigs(gram_eigvals(X), df_max, N)
        if lc > lam:
            lam = lc
            cap_any = True
            U = center_rows(u_solve(Y, A, X, Theta, lam))

    return (X, Theta, U, lam, n_done, converged, status, cap_any, sigma2_work,
            obj_tr, lam_tr, dfu_tr, cap_tr, safe_tr)
