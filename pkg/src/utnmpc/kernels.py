"""Hot loops: horizon rollout of the prediction model with its adjoint, and the
exact projection onto per-junction green-time simplices.

Both are written as explicit loops over flat arrays so numba can compile them;
see :mod:`utnmpc._accel` for the pure-Python fallback switch.

Rollout array conventions (``nL`` links, ``nS`` streams, ``nE`` external
downstream links, ``kp`` prediction steps, ``H`` history rows):

* stream kind 0 discharges to the network exit, kind 1 into a modelled link
  (``s_to`` is a link index), kind 2 into an external link (``s_to`` indexes
  ``ext_x``/``lam``/``dhat``).
* ``hist[H, nL]`` is the past entering flow, oldest row first.
* ``u[Kc, nG]`` green times; step ``p`` uses row ``min(p, Kc - 1)``.
* ``cyc[nL]`` is the integration step of each link and ``gcyc[nL]`` the
  signal cycle its greens refer to (equal unless the model is coarsened).
* ``temp[nL] > 0`` replaces the three-way min by a softmin of that
  temperature; ``0`` keeps the exact min (ties resolve to the first term).
"""

import math

import numpy as np

from ._accel import jit


@jit
def rollout(order, cap, tau_coef, sat, cyc, gcyc, temp,
            out_ptr, out_idx, in_ptr, in_idx,
            s_from, s_kind, s_to, s_ctrl, s_back, beta, share, scap,
            qw, rw, pen,
            x0, q0, hist, fout0, ext_in, dist, ext_x, xd, u,
            lam, dhat, rho,
            cost_scale, seed_fout, seed_x, want_grad):
    nL = cap.shape[0]
    nS = beta.shape[0]
    nE = ext_x.shape[1]
    kp = ext_in.shape[0]
    kc = u.shape[0]
    nG = u.shape[1]
    H = hist.shape[0]

    X = np.zeros((kp + 1, nL))
    Qs = np.zeros((kp + 1, nS))
    Fin = np.zeros((H + kp, nL))
    Fout = np.zeros((kp, nS))
    X[0, :] = x0
    Qs[0, :] = q0
    Fin[:H, :] = hist

    DL = np.zeros((kp, nL), dtype=np.int64)
    GM = np.zeros((kp, nL))
    TCLIP = np.zeros((kp, nL), dtype=np.bool_)
    W = np.zeros((kp, nS, 3))
    ACT = np.zeros((kp, nS), dtype=np.bool_)

    for p in range(kp):
        pc = p if p < kc else kc - 1
        t = H + p
        for oi in range(nL):
            z = order[oi]
            c = cyc[z]
            fin = ext_in[p, z]
            for j in range(in_ptr[z], in_ptr[z + 1]):
                s = in_idx[j]
                if s_back[s]:
                    if p > 0:
                        fin += Fout[p - 1, s]
                    else:
                        fin += fout0[s]
                else:
                    fin += Fout[p, s]
            Fin[t, z] = fin

            qz = 0.0
            for j in range(out_ptr[z], out_ptr[z + 1]):
                qz += Qs[p, out_idx[j]]
            tau = (cap[z] - qz) * tau_coef[z]
            if tau < 0.0:
                tau = 0.0
                TCLIP[p, z] = True
            dl = int(math.floor(tau / c))
            g = tau - dl * c
            DL[p, z] = dl
            GM[p, z] = g
            i0 = t - dl
            i1 = t - dl - 1
            if i0 < 0:
                i0 = 0
            if i1 < 0:
                i1 = 0
            fa = (1.0 - g / c) * Fin[i0, z] + (g / c) * Fin[i1, z]

            out_sum = 0.0
            for j in range(out_ptr[z], out_ptr[z + 1]):
                s = out_idx[j]
                fas = beta[s] * fa
                t1 = Qs[p, s] / c + fas
                gi = s_ctrl[s]
                green = u[pc, gi] if gi >= 0 else gcyc[z]
                t2 = beta[s] * sat[z] * green / gcyc[z]
                kind = s_kind[s]
                has3 = kind != 0
                t3 = 0.0
                if kind == 1:
                    t3 = share[s] * (scap[s] - share[s] * X[p, s_to[s]]) / c
                elif kind == 2:
                    t3 = share[s] * (scap[s] - share[s] * ext_x[p, s_to[s]]) / c
                T = temp[z]
                if T > 0.0:
                    m = t1 if t1 < t2 else t2
                    if has3 and t3 < m:
                        m = t3
                    e1 = math.exp(-(t1 - m) / T)
                    e2 = math.exp(-(t2 - m) / T)
                    e3 = math.exp(-(t3 - m) / T) if has3 else 0.0
                    tot = e1 + e2 + e3
                    val = m - T * math.log(tot)
                    W[p, s, 0] = e1 / tot
                    W[p, s, 1] = e2 / tot
                    W[p, s, 2] = e3 / tot
                else:
                    if t1 <= t2 and (not has3 or t1 <= t3):
                        val = t1
                        W[p, s, 0] = 1.0
                    elif not has3 or t2 <= t3:
                        val = t2
                        W[p, s, 1] = 1.0
                    else:
                        val = t3
                        W[p, s, 2] = 1.0
                if val > 0.0:
                    ACT[p, s] = True
                else:
                    val = 0.0
                Fout[p, s] = val
                Qs[p + 1, s] = Qs[p, s] + (fas - val) * c
                out_sum += val
            X[p + 1, z] = X[p, z] + (fin - out_sum + dist[p, z]) * c

    # cost
    cost = 0.0
    for p in range(1, kp + 1):
        for z in range(nL):
            dx = X[p, z] - xd[p - 1, z]
            cost += qw[z] * dx * dx
            if X[p, z] > cap[z]:
                cost += pen * (X[p, z] - cap[z])
            elif X[p, z] < 0.0:
                cost -= pen * X[p, z]
    for p in range(kc):
        for gi in range(nG):
            cost += rw[gi] * u[p, gi] * u[p, gi]
    D = np.zeros((kp, nE))
    for p in range(kp):
        for s in range(nS):
            if s_kind[s] == 2:
                D[p, s_to[s]] += Fout[p, s]
    for p in range(kp):
        for e in range(nE):
            r = D[p, e] - dhat[p, e]
            cost += lam[p, e] * r + 0.5 * rho * r * r

    gu = np.zeros((kc, nG))
    g_in = np.zeros((kp, nL))
    g_ext = np.zeros((kp, nE))
    if not want_grad:
        return cost, X, Qs, Fout, D, gu, g_in, g_ext

    bX = np.zeros((kp + 1, nL))
    bQ = np.zeros((kp + 1, nS))
    bFin = np.zeros((H + kp, nL))
    bFout = np.zeros((kp, nS))
    for p in range(kp + 1):
        for z in range(nL):
            bX[p, z] = seed_x[p, z]
    for p in range(1, kp + 1):
        for z in range(nL):
            dx = X[p, z] - xd[p - 1, z]
            gx = 2.0 * qw[z] * dx
            if X[p, z] > cap[z]:
                gx += pen
            elif X[p, z] < 0.0:
                gx -= pen
            bX[p, z] += cost_scale * gx
    for p in range(kc):
        for gi in range(nG):
            gu[p, gi] = cost_scale * 2.0 * rw[gi] * u[p, gi]
    for p in range(kp):
        for s in range(nS):
            bFout[p, s] = seed_fout[p, s]
            if s_kind[s] == 2:
                e = s_to[s]
                bFout[p, s] += cost_scale * (lam[p, e] + rho * (D[p, e] - dhat[p, e]))

    for p in range(kp - 1, -1, -1):
        pc = p if p < kc else kc - 1
        t = H + p
        for oi in range(nL - 1, -1, -1):
            z = order[oi]
            c = cyc[z]
            gx = bX[p + 1, z]
            bX[p, z] += gx
            bFin[t, z] += gx * c
            bfa = 0.0
            for j in range(out_ptr[z], out_ptr[z + 1]):
                s = out_idx[j]
                bFout[p, s] -= gx * c
                h = bQ[p + 1, s]
                bQ[p, s] += h
                bfa += h * beta[s] * c
                bFout[p, s] -= h * c
                gf = bFout[p, s]
                if ACT[p, s] and gf != 0.0:
                    w1 = W[p, s, 0]
                    w2 = W[p, s, 1]
                    w3 = W[p, s, 2]
                    bQ[p, s] += gf * w1 / c
                    bfa += gf * w1 * beta[s]
                    gi = s_ctrl[s]
                    if gi >= 0:
                        gu[pc, gi] += gf * w2 * beta[s] * sat[z] / gcyc[z]
                    kind = s_kind[s]
                    if kind == 1:
                        bX[p, s_to[s]] -= gf * w3 * share[s] * share[s] / c
                    elif kind == 2:
                        g_ext[p, s_to[s]] -= gf * w3 * share[s] * share[s] / c
            dl = DL[p, z]
            g = GM[p, z]
            i0 = t - dl
            i1 = t - dl - 1
            if i0 < 0:
                i0 = 0
            if i1 < 0:
                i1 = 0
            bFin[i0, z] += bfa * (1.0 - g / c)
            bFin[i1, z] += bfa * (g / c)
            if not TCLIP[p, z]:
                bg = bfa * (Fin[i1, z] - Fin[i0, z]) / c
                dq = -bg * tau_coef[z]
                for j in range(out_ptr[z], out_ptr[z + 1]):
                    bQ[p, out_idx[j]] += dq
            bf = bFin[t, z]
            g_in[p, z] = bf
            for j in range(in_ptr[z], in_ptr[z + 1]):
                s = in_idx[j]
                if s_back[s]:
                    if p > 0:
                        bFout[p - 1, s] += bf
                else:
                    bFout[p, s] += bf
    return cost, X, Qs, Fout, D, gu, g_in, g_ext


@jit
def project_blocks(y, lo, hi, blk_ptr, blk_idx, rhs, free_idx):
    """Euclidean projection onto ``{sum_{i in block} v_i = rhs, lo <= v <= hi}``.

    Blocks are disjoint.  Each block is solved exactly: the projection is
    ``clip(y - nu, lo, hi)`` with ``nu`` located between the sorted breakpoints
    of the piecewise-linear sum.  Variables in no block are only clipped.
    Returns ``(v, ok)``; ``ok`` is False when some block is infeasible.
    """
    v = np.empty_like(y)
    ok = True
    for j in range(free_idx.shape[0]):
        i = free_idx[j]
        v[i] = min(max(y[i], lo[i]), hi[i])
    nb = rhs.shape[0]
    for b in range(nb):
        a0 = blk_ptr[b]
        a1 = blk_ptr[b + 1]
        n = a1 - a0
        bp = np.empty(2 * n)
        slo = 0.0
        shi = 0.0
        for k in range(n):
            i = blk_idx[a0 + k]
            bp[2 * k] = y[i] - hi[i]
            bp[2 * k + 1] = y[i] - lo[i]
            slo += lo[i]
            shi += hi[i]
        target = rhs[b]
        tol = 1e-12 * max(1.0, abs(target))
        if target < slo - tol or target > shi + tol:
            ok = False
        bp.sort()
        # sum(clip(y - nu)) is non-increasing in nu
        nu = bp[0]
        prev_nu = bp[0]
        prev_s = shi
        found = False
        for k in range(2 * n):
            cur_nu = bp[k]
            s = 0.0
            for kk in range(n):
                i = blk_idx[a0 + kk]
                s += min(max(y[i] - cur_nu, lo[i]), hi[i])
            if s <= target:
                if prev_s == s or k == 0:
                    nu = cur_nu
                else:
                    nu = prev_nu + (prev_s - target) * (cur_nu - prev_nu) / (prev_s - s)
                found = True
                break
            prev_nu = cur_nu
            prev_s = s
        if not found:
            nu = bp[2 * n - 1]
        for k in range(n):
            i = blk_idx[a0 + k]
            v[i] = min(max(y[i] - nu, lo[i]), hi[i])
    return v, ok
