"""Compiled inner loops for the general projection."""
import numpy as np
from numba import njit


@njit(cache=True)
def _argsort_desc(keys, n, order):
    """Indices of ``keys[:n]`` in descending order into ``order[:n]``."""
    if n > 24:
        o = np.argsort(-keys[:n])
        for r in range(n):
            order[r] = o[r]
        return
    for r in range(n):
        order[r] = r
    for r in range(1, n):
        k = order[r]
        v = keys[k]
        s = r - 1
        while s >= 0 and keys[order[s]] < v:
            order[s + 1] = order[s]
            s -= 1
        order[s + 1] = k


@njit(cache=True)
def capped_simplex_1d(v, n, cap, out, ev, dl, order):
    """Exact projection of ``v[:n]`` onto ``{x in [0,1]^n, sum x <= cap}``.

    ``ev``, ``dl`` and ``order`` are scratch buffers of length ``>= 2n``.
    """
    s = 0.0
    for i in range(n):
        s += min(max(v[i], 0.0), 1.0)
    if s <= cap:
        for i in range(n):
            out[i] = min(max(v[i], 0.0), 1.0)
        return
    if cap <= 0.0:
        for i in range(n):
            out[i] = 0.0
        return
    # breakpoints of lam -> sum clip(v - lam, 0, 1): a coordinate enters at v, saturates at v - 1
    for i in range(n):
        ev[i] = v[i]
        dl[i] = 1.0
        ev[n + i] = v[i] - 1.0
        dl[n + i] = -1.0
    _argsort_desc(ev, 2 * n, order)
    active = 0.0
    acc = 0.0
    prev = ev[order[0]]
    lam = prev
    for r in range(2 * n):
        e = ev[order[r]]
        nxt = acc + active * (prev - e)
        if nxt >= cap:
            lam = prev - (cap - acc) / active if active > 0.0 else prev
            break
        acc = nxt
        active += dl[order[r]]
        prev = e
    for i in range(n):
        out[i] = min(max(v[i] - lam, 0.0), 1.0)


@njit(cache=True)
def dykstra(Py, Pz, reach, caps, u2y, u2z, tol, max_iters):
    """Dykstra's scheme on (box + sum constraints) and (coupling constraints).

    ``u2y``/``u2z`` hold the coupling increment and are updated in place
    (warm start).  Returns ``(y, z, iterations, gap)`` where ``(y, z)`` is the
    last iterate of the first block.
    """
    N, I, J = Pz.shape
    L = max(N, J, I) + 1
    y1 = np.empty((N, J))
    z1 = np.zeros((N, I, J))
    u1y = np.empty((N, J))
    u1z = np.zeros((N, I, J))
    vin = np.empty(L)
    vout = np.empty(L)
    ev = np.empty(2 * L)
    dl = np.empty(2 * L)
    order = np.empty(2 * L, dtype=np.int64)
    bvals = np.empty(L)
    bidx = np.empty(L, dtype=np.int64)
    border = np.empty(L, dtype=np.int64)
    it = 0
    gap = np.inf
    while it < max_iters:
        it += 1
        # block 1: per-cache capped simplex on y, per-request capped simplex on z
        for j in range(J):
            for n in range(N):
                vin[n] = Py[n, j] - u2y[n, j]
            capped_simplex_1d(vin, N, caps[j], vout, ev, dl, order)
            for n in range(N):
                y1[n, j] = vout[n]
                u1y[n, j] = vin[n] - vout[n]
        for n in range(N):
            for i in range(I):
                k = 0
                for j in range(J):
                    if reach[i, j]:
                        vin[k] = Pz[n, i, j] - u2z[n, i, j]
                        k += 1
                if k == 0:
                    continue
                capped_simplex_1d(vin, k, 1.0, vout, ev, dl, order)
                k = 0
                for j in range(J):
                    if reach[i, j]:
                        z1[n, i, j] = vout[k]
                        u1z[n, i, j] = vin[k] - vout[k]
                        k += 1
        # block 2: coupling z[n,i,j] <= y[n,j], one small pooling problem per (n, j)
        g2 = 0.0
        for n in range(N):
            for j in range(J):
                a = Py[n, j] - u1y[n, j]
                K = 0
                for i in range(I):
                    if reach[i, j]:
                        bvals[K] = Pz[n, i, j] - u1z[n, i, j]
                        bidx[K] = i
                        K += 1
                yv = a
                if K > 0:
                    _argsort_desc(bvals, K, border)
                    if a < bvals[border[0]]:
                        cs = 0.0
                        for k in range(K):
                            cs += bvals[border[k]]
                            cand = (a + cs) / (k + 2.0)
                            if bvals[border[k]] >= cand and (k == K - 1 or cand >= bvals[border[k + 1]]):
                                yv = cand
                                break
                nu = a - yv
                d = nu - u2y[n, j]
                g2 += d * d
                u2y[n, j] = nu
                for k in range(K):
                    i = bidx[k]
                    bv = bvals[k]
                    zv = bv if bv < yv else yv
                    nu = bv - zv
                    d = nu - u2z[n, i, j]
                    g2 += d * d
                    u2z[n, i, j] = nu
        gap = np.sqrt(g2)
        if gap <= tol:
            break
    return y1, z1, it, gap
