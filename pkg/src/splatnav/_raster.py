"""Numba kernels for exact per-ray Gaussian compositing and its adjoint.

Every Gaussian is evaluated at the peak of its density along each pixel ray:
with ``m_k = r_k . mu`` and ``p_k = r_k . d`` in the Gaussian's local axes,
``t* = sum(w m p) / sum(w p^2)`` and ``q = sum w (m - t* p)^2`` where
``w = 1 / s^2``. ``alpha = opacity * exp(-q / 2)``.

Composited channels per Gaussian: colour (3), ray-plane depth times its
validity mask (1), the mask itself (1), and the camera-facing plane normal
(3). The backward kernel replays the forward pass per pixel, then walks the
contributor list back to front with a running "behind" accumulator, which
avoids dividing by ``1 - alpha``.
"""

import math

import numpy as np
from numba import njit

TILE = 8
PARALLEL_EPS = 1e-8
NORMAL_EPS = 1e-10


@njit(cache=True)
def _axis_range(a, z, rho, f, c, n):
    L = math.sqrt(a * a + z * z)
    lo = 0
    hi = n - 1
    if L <= rho:
        return lo, hi
    tc = math.atan2(a, z)
    dl = math.asin(rho / L)
    t1 = tc - dl
    t2 = tc + dl
    if t1 > -0.5 * math.pi:
        v = f * math.tan(t1) + c
        lo = max(lo, int(math.ceil(v))) if v > -1e9 else lo
    if t2 < 0.5 * math.pi:
        v = f * math.tan(t2) + c
        hi = min(hi, int(math.floor(v))) if v < 1e9 else hi
    return lo, hi


@njit(cache=True)
def prepare(means, rots, scales, opac, Rwc, twc, fx, fy, cx, cy, W, H, alpha_floor, scale_floor):
    n = means.shape[0]
    Rc = np.empty((n, 3, 3))
    muc = np.empty((n, 3))
    w = np.empty((n, 3))
    kmin = np.empty(n, np.int64)
    sigma = np.empty(n)
    valid = np.zeros(n, np.bool_)
    bbox = np.zeros((n, 4), np.int64)
    depth = np.empty(n)
    for i in range(n):
        for r in range(3):
            muc[i, r] = Rwc[r, 0] * means[i, 0] + Rwc[r, 1] * means[i, 1] + Rwc[r, 2] * means[i, 2] + twc[r]
            for c in range(3):
                Rc[i, r, c] = Rwc[r, 0] * rots[i, 0, c] + Rwc[r, 1] * rots[i, 1, c] + Rwc[r, 2] * rots[i, 2, c]
        smax = 0.0
        km = 0
        for k in range(3):
            s = max(scales[i, k], scale_floor)
            w[i, k] = 1.0 / (s * s)
            smax = max(smax, s)
            if scales[i, k] < scales[i, km]:
                km = k
        kmin[i] = km
        nd = Rc[i, 0, km] * muc[i, 0] + Rc[i, 1, km] * muc[i, 1] + Rc[i, 2, km] * muc[i, 2]
        sigma[i] = -1.0 if nd > 0 else 1.0
        depth[i] = muc[i, 2]
        if muc[i, 2] <= 0.0 or opac[i] < alpha_floor:
            continue
        rho = math.sqrt(2.0 * math.log(opac[i] / alpha_floor)) * smax
        u0, u1 = _axis_range(muc[i, 0], muc[i, 2], rho, fx, cx, W)
        v0, v1 = _axis_range(muc[i, 1], muc[i, 2], rho, fy, cy, H)
        if u0 > u1 or v0 > v1:
            continue
        valid[i] = True
        bbox[i, 0] = u0
        bbox[i, 1] = u1
        bbox[i, 2] = v0
        bbox[i, 3] = v1
    return Rc, muc, w, kmin, sigma, valid, bbox, depth


@njit(cache=True)
def bin_tiles(order, valid, bbox, W, H):
    tw = (W + TILE - 1) // TILE
    th = (H + TILE - 1) // TILE
    counts = np.zeros(tw * th + 1, np.int64)
    for j in range(order.shape[0]):
        i = order[j]
        if not valid[i]:
            continue
        for ty in range(bbox[i, 2] // TILE, bbox[i, 3] // TILE + 1):
            for tx in range(bbox[i, 0] // TILE, bbox[i, 1] // TILE + 1):
                counts[ty * tw + tx + 1] += 1
    offsets = np.cumsum(counts)
    items = np.empty(offsets[-1], np.int64)
    fill = offsets[:-1].copy()
    for j in range(order.shape[0]):
        i = order[j]
        if not valid[i]:
            continue
        for ty in range(bbox[i, 2] // TILE, bbox[i, 3] // TILE + 1):
            for tx in range(bbox[i, 0] // TILE, bbox[i, 1] // TILE + 1):
                t = ty * tw + tx
                items[fill[t]] = i
                fill[t] += 1
    return offsets, items


@njit(cache=True, inline="always")
def _pick(k, a0, a1, a2):
    if k == 0:
        return a0
    if k == 1:
        return a1
    return a2


@njit(cache=True, inline="always")
def _ray_eval(Rc, muc, w, i, d0, d1, d2):
    m0 = Rc[i, 0, 0] * muc[i, 0] + Rc[i, 1, 0] * muc[i, 1] + Rc[i, 2, 0] * muc[i, 2]
    m1 = Rc[i, 0, 1] * muc[i, 0] + Rc[i, 1, 1] * muc[i, 1] + Rc[i, 2, 1] * muc[i, 2]
    m2 = Rc[i, 0, 2] * muc[i, 0] + Rc[i, 1, 2] * muc[i, 1] + Rc[i, 2, 2] * muc[i, 2]
    p0 = Rc[i, 0, 0] * d0 + Rc[i, 1, 0] * d1 + Rc[i, 2, 0] * d2
    p1 = Rc[i, 0, 1] * d0 + Rc[i, 1, 1] * d1 + Rc[i, 2, 1] * d2
    p2 = Rc[i, 0, 2] * d0 + Rc[i, 1, 2] * d1 + Rc[i, 2, 2] * d2
    a = w[i, 0] * p0 * p0 + w[i, 1] * p1 * p1 + w[i, 2] * p2 * p2
    b = w[i, 0] * m0 * p0 + w[i, 1] * m1 * p1 + w[i, 2] * m2 * p2
    ts = b / a
    e0 = m0 - ts * p0
    e1 = m1 - ts * p1
    e2 = m2 - ts * p2
    q = w[i, 0] * e0 * e0 + w[i, 1] * e1 * e1 + w[i, 2] * e2 * e2
    return q, ts, m0, m1, m2, p0, p1, p2


@njit(cache=True)
def forward(Rc, muc, w, kmin, sigma, opac, colors, bbox, offsets, items, dirs, bg,
            cutoff, alpha_floor, alpha_max, max_per_ray, first_surface):
    H = dirs.shape[0]
    W = dirs.shape[1]
    tw = (W + TILE - 1) // TILE
    color = np.empty((H, W, 3))
    depth = np.zeros((H, W))
    normal = np.zeros((H, W, 3))
    trans = np.ones((H, W))
    acc = np.zeros((H, W))
    count = np.zeros((H, W), np.int64)
    for v in range(H):
        for u in range(W):
            t_idx = (v // TILE) * tw + (u // TILE)
            d0 = dirs[v, u, 0]
            d1 = dirs[v, u, 1]
            d2 = dirs[v, u, 2]
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            num = 0.0
            den = 0.0
            n0 = 0.0
            n1 = 0.0
            n2 = 0.0
            asum = 0.0
            fs_depth = 0.0
            fs_done = False
            cnt = 0
            for j in range(offsets[t_idx], offsets[t_idx + 1]):
                i = items[j]
                if u < bbox[i, 0] or u > bbox[i, 1] or v < bbox[i, 2] or v > bbox[i, 3]:
                    continue
                q, ts, m0, m1, m2, p0, p1, p2 = _ray_eval(Rc, muc, w, i, d0, d1, d2)
                if q < 0.0:
                    q = 0.0
                alpha = opac[i] * math.exp(-0.5 * q)
                if alpha < alpha_floor:
                    continue
                if alpha > alpha_max:
                    alpha = alpha_max
                wt = alpha * T
                c0 += wt * colors[i, 0]
                c1 += wt * colors[i, 1]
                c2 += wt * colors[i, 2]
                km = kmin[i]
                nd = _pick(km, p0, p1, p2)
                if abs(nd) >= PARALLEL_EPS:
                    tp = _pick(km, m0, m1, m2) / nd
                    if tp > 0.0:
                        num += wt * tp
                        den += wt
                        if not fs_done and asum + wt >= 0.5:
                            fs_depth = tp
                            fs_done = True
                n0 += wt * sigma[i] * Rc[i, 0, km]
                n1 += wt * sigma[i] * Rc[i, 1, km]
                n2 += wt * sigma[i] * Rc[i, 2, km]
                asum += wt
                T *= 1.0 - alpha
                cnt += 1
                if T < cutoff or cnt >= max_per_ray:
                    break
            color[v, u, 0] = c0 + T * bg[0]
            color[v, u, 1] = c1 + T * bg[1]
            color[v, u, 2] = c2 + T * bg[2]
            trans[v, u] = T
            acc[v, u] = asum
            count[v, u] = cnt
            if den > 0.0:
                if first_surface:
                    depth[v, u] = fs_depth if fs_done else num / den
                else:
                    depth[v, u] = num / den
            nn = math.sqrt(n0 * n0 + n1 * n1 + n2 * n2)
            if nn > NORMAL_EPS:
                normal[v, u, 0] = n0 / nn
                normal[v, u, 1] = n1 / nn
                normal[v, u, 2] = n2 / nn
    return color, depth, normal, trans, acc, count


@njit(cache=True)
def backward(Rc, muc, w, kmin, sigma, opac, colors, bbox, offsets, items, dirs, bg,
             cutoff, alpha_floor, alpha_max, max_per_ray, g_color, g_depth, g_normal):
    n = muc.shape[0]
    H = dirs.shape[0]
    W = dirs.shape[1]
    tw = (W + TILE - 1) // TILE
    g_muc = np.zeros((n, 3))
    g_Rc = np.zeros((n, 3, 3))
    g_w = np.zeros((n, 3))
    g_op = np.zeros(n)
    g_col = np.zeros((n, 3))
    K = max_per_ray
    idx = np.empty(K, np.int64)
    al = np.empty(K)
    Tb = np.empty(K)
    tt = np.empty(K)
    mm = np.empty(K)
    clamped = np.empty(K, np.bool_)
    for v in range(H):
        for u in range(W):
            t_idx = (v // TILE) * tw + (u // TILE)
            d0 = dirs[v, u, 0]
            d1 = dirs[v, u, 1]
            d2 = dirs[v, u, 2]
            T = 1.0
            cnt = 0
            num = 0.0
            den = 0.0
            n0 = 0.0
            n1 = 0.0
            n2 = 0.0
            for j in range(offsets[t_idx], offsets[t_idx + 1]):
                i = items[j]
                if u < bbox[i, 0] or u > bbox[i, 1] or v < bbox[i, 2] or v > bbox[i, 3]:
                    continue
                q, ts, m0, m1, m2, p0, p1, p2 = _ray_eval(Rc, muc, w, i, d0, d1, d2)
                if q < 0.0:
                    q = 0.0
                alpha = opac[i] * math.exp(-0.5 * q)
                if alpha < alpha_floor:
                    continue
                cl = False
                if alpha > alpha_max:
                    alpha = alpha_max
                    cl = True
                wt = alpha * T
                km = kmin[i]
                nd = _pick(km, p0, p1, p2)
                tp = 0.0
                msk = 0.0
                if abs(nd) >= PARALLEL_EPS:
                    tp = _pick(km, m0, m1, m2) / nd
                    if tp > 0.0:
                        msk = 1.0
                    else:
                        tp = 0.0
                num += wt * tp * msk
                den += wt * msk
                n0 += wt * sigma[i] * Rc[i, 0, km]
                n1 += wt * sigma[i] * Rc[i, 1, km]
                n2 += wt * sigma[i] * Rc[i, 2, km]
                idx[cnt] = i
                al[cnt] = alpha
                Tb[cnt] = T
                tt[cnt] = tp
                mm[cnt] = msk
                clamped[cnt] = cl
                T *= 1.0 - alpha
                cnt += 1
                if T < cutoff or cnt >= K:
                    break
            if cnt == 0:
                continue
            # output-space gradients to composited-channel gradients
            gN = 0.0
            gD = 0.0
            if den > 0.0:
                D = num / den
                gN = g_depth[v, u] / den
                gD = -g_depth[v, u] * D / den
            gv0 = 0.0
            gv1 = 0.0
            gv2 = 0.0
            nn = math.sqrt(n0 * n0 + n1 * n1 + n2 * n2)
            if nn > NORMAL_EPS:
                u0 = n0 / nn
                u1 = n1 / nn
                u2 = n2 / nn
                gn0 = g_normal[v, u, 0]
                gn1 = g_normal[v, u, 1]
                gn2 = g_normal[v, u, 2]
                dp = u0 * gn0 + u1 * gn1 + u2 * gn2
                gv0 = (gn0 - u0 * dp) / nn
                gv1 = (gn1 - u1 * dp) / nn
                gv2 = (gn2 - u2 * dp) / nn
            gc0 = g_color[v, u, 0]
            gc1 = g_color[v, u, 1]
            gc2 = g_color[v, u, 2]
            B0 = bg[0]
            B1 = bg[1]
            B2 = bg[2]
            BN = 0.0
            BD = 0.0
            BV0 = 0.0
            BV1 = 0.0
            BV2 = 0.0
            for c in range(cnt - 1, -1, -1):
                i = idx[c]
                a = al[c]
                Ti = Tb[c]
                km = kmin[i]
                sg = sigma[i]
                f0 = colors[i, 0]
                f1 = colors[i, 1]
                f2 = colors[i, 2]
                fN = tt[c] * mm[c]
                fD = mm[c]
                fv0 = sg * Rc[i, 0, km]
                fv1 = sg * Rc[i, 1, km]
                fv2 = sg * Rc[i, 2, km]
                dLda = Ti * (gc0 * (f0 - B0) + gc1 * (f1 - B1) + gc2 * (f2 - B2)
                             + gN * (fN - BN) + gD * (fD - BD)
                             + gv0 * (fv0 - BV0) + gv1 * (fv1 - BV1) + gv2 * (fv2 - BV2))
                wt = a * Ti
                g_col[i, 0] += wt * gc0
                g_col[i, 1] += wt * gc1
                g_col[i, 2] += wt * gc2
                # plane normal channel
                g_Rc[i, 0, km] += sg * wt * gv0
                g_Rc[i, 1, km] += sg * wt * gv1
                g_Rc[i, 2, km] += sg * wt * gv2
                q, ts, m0, m1, m2, p0, p1, p2 = _ray_eval(Rc, muc, w, i, d0, d1, d2)
                if mm[c] > 0.0:
                    dLdt = wt * gN
                    nd = _pick(km, p0, p1, p2)
                    tp = tt[c]
                    g_muc[i, 0] += dLdt * Rc[i, 0, km] / nd
                    g_muc[i, 1] += dLdt * Rc[i, 1, km] / nd
                    g_muc[i, 2] += dLdt * Rc[i, 2, km] / nd
                    g_Rc[i, 0, km] += dLdt * (muc[i, 0] - tp * d0) / nd
                    g_Rc[i, 1, km] += dLdt * (muc[i, 1] - tp * d1) / nd
                    g_Rc[i, 2, km] += dLdt * (muc[i, 2] - tp * d2) / nd
                if not clamped[c]:
                    G = a / opac[i]
                    g_op[i] += dLda * G
                    dLdq = -0.5 * a * dLda
                    for k in range(3):
                        e = _pick(k, m0, m1, m2) - ts * _pick(k, p0, p1, p2)
                        coef = dLdq * 2.0 * w[i, k] * e
                        g_w[i, k] += dLdq * e * e
                        g_muc[i, 0] += coef * Rc[i, 0, k]
                        g_muc[i, 1] += coef * Rc[i, 1, k]
                        g_muc[i, 2] += coef * Rc[i, 2, k]
                        g_Rc[i, 0, k] += coef * (muc[i, 0] - ts * d0)
                        g_Rc[i, 1, k] += coef * (muc[i, 1] - ts * d1)
                        g_Rc[i, 2, k] += coef * (muc[i, 2] - ts * d2)
                B0 = f0 * a + (1.0 - a) * B0
                B1 = f1 * a + (1.0 - a) * B1
                B2 = f2 * a + (1.0 - a) * B2
                BN = fN * a + (1.0 - a) * BN
                BD = fD * a + (1.0 - a) * BD
                BV0 = fv0 * a + (1.0 - a) * BV0
                BV1 = fv1 * a + (1.0 - a) * BV1
                BV2 = fv2 * a + (1.0 - a) * BV2
    return g_muc, g_Rc, g_w, g_op, g_col
