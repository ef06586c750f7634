"""Compiled inner loops for convolution and trilinear warping.

Every kernel writes each output element from exactly one worker and reduces
over a fixed serial index order, so results are bit-identical regardless of
thread count. fastmath stays off to keep IEEE evaluation order.
"""

import warnings

import numpy as np

with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    from numba import njit, prange


@njit(parallel=True, fastmath=False, cache=True)
def conv3d_fwd(xp, w, b, out):
    # xp: padded input (C, Dp, Hp, Wp); w: (OC, C, K, K, K); out: (OC, D, H, W)
    OC, C, K = w.shape[0], w.shape[1], w.shape[2]
    D, H, W = out.shape[1], out.shape[2], out.shape[3]
    for idx in prange(OC * D):
        oc = idx // D
        z = idx % D
        for y in range(H):
            row = out[oc, z, y]
            for x in range(W):
                row[x] = b[oc]
            for c in range(C):
                for kd in range(K):
                    for kh in range(K):
                        src = xp[c, z + kd, y + kh]
                        for kw in range(K):
                            wv = w[oc, c, kd, kh, kw]
                            for x in range(W):
                                row[x] += wv * src[x + kw]


@njit(parallel=True, fastmath=False, cache=True)
def conv3d_fwd_strided(xp, w, b, stride, out):
    # Generic stride; scalar accumulation per output voxel.
    OC, C, K = w.shape[0], w.shape[1], w.shape[2]
    D, H, W = out.shape[1], out.shape[2], out.shape[3]
    for idx in prange(OC * D):
        oc = idx // D
        z = idx % D
        for y in range(H):
            for x in range(W):
                acc = b[oc]
                for c in range(C):
                    for kd in range(K):
                        for kh in range(K):
                            for kw in range(K):
                                acc += (
                                    xp[c, z * stride + kd, y * stride + kh, x * stride + kw]
                                    * w[oc, c, kd, kh, kw]
                                )
                out[oc, z, y, x] = acc


@njit(parallel=True, fastmath=False, cache=True)
def conv3d_grad_w(xp, g, gw):
    # gw[oc, c, kd, kh, kw] = sum over output voxels of xp_shifted * g
    OC, C, K = gw.shape[0], gw.shape[1], gw.shape[2]
    D, H, W = g.shape[1], g.shape[2], g.shape[3]
    for idx in prange(OC * C):
        oc = idx // C
        c = idx % C
        accrow = np.zeros(W)
        for kd in range(K):
            for kh in range(K):
                for kw in range(K):
                    for x in range(W):
                        accrow[x] = 0.0
                    for z in range(D):
                        for y in range(H):
                            grow = g[oc, z, y]
                            srow = xp[c, z + kd, y + kh]
                            for x in range(W):
                                accrow[x] += srow[x + kw] * grow[x]
                    acc = 0.0
                    for x in range(W):
                        acc += accrow[x]
                    gw[oc, c, kd, kh, kw] = acc


@njit(fastmath=False, cache=True)
def conv3d_grad_x_strided(w, g, stride, gxp):
    # Scatter into the padded-input gradient; serial (test-scale strides only).
    OC, C, K = w.shape[0], w.shape[1], w.shape[2]
    D, H, W = g.shape[1], g.shape[2], g.shape[3]
    for oc in range(OC):
        for z in range(D):
            for y in range(H):
                for x in range(W):
                    gv = g[oc, z, y, x]
                    for c in range(C):
                        for kd in range(K):
                            for kh in range(K):
                                for kw in range(K):
                                    gxp[c, z * stride + kd, y * stride + kh, x * stride + kw] += (
                                        gv * w[oc, c, kd, kh, kw]
                                    )


@njit(parallel=True, fastmath=False, cache=True)
def warp_fwd(img, u, out):
    # out[c, p] = trilinear sample of img[c] at p + u(p); border-clamped.
    # u channels are (x, y, z) displacements mapping to array axes (W, H, D).
    C, D, H, W = img.shape[0], img.shape[1], img.shape[2], img.shape[3]
    for z in prange(D):
        for y in range(H):
            for x in range(W):
                px = x + u[0, z, y, x]
                py = y + u[1, z, y, x]
                pz = z + u[2, z, y, x]
                if px < 0.0:
                    px = 0.0
                elif px > W - 1.0:
                    px = W - 1.0
                if py < 0.0:
                    py = 0.0
                elif py > H - 1.0:
                    py = H - 1.0
                if pz < 0.0:
                    pz = 0.0
                elif pz > D - 1.0:
                    pz = D - 1.0
                x0 = int(px)
                y0 = int(py)
                z0 = int(pz)
                if x0 > W - 2:
                    x0 = W - 2
                if y0 > H - 2:
                    y0 = H - 2
                if z0 > D - 2:
                    z0 = D - 2
                fx = px - x0
                fy = py - y0
                fz = pz - z0
                for c in range(C):
                    c00 = img[c, z0, y0, x0] * (1.0 - fx) + img[c, z0, y0, x0 + 1] * fx
                    c01 = img[c, z0, y0 + 1, x0] * (1.0 - fx) + img[c, z0, y0 + 1, x0 + 1] * fx
                    c10 = img[c, z0 + 1, y0, x0] * (1.0 - fx) + img[c, z0 + 1, y0, x0 + 1] * fx
                    c11 = img[c, z0 + 1, y0 + 1, x0] * (1.0 - fx) + img[c, z0 + 1, y0 + 1, x0 + 1] * fx
                    c0 = c00 * (1.0 - fy) + c01 * fy
                    c1 = c10 * (1.0 - fy) + c11 * fy
                    out[c, z, y, x] = c0 * (1.0 - fz) + c1 * fz


@njit(parallel=True, fastmath=False, cache=True)
def warp_grad_img(u, g, gimg):
    # Scatter-add of the interpolation weights; one worker per channel so
    # racing writes cannot occur.
    C, D, H, W = gimg.shape[0], gimg.shape[1], gimg.shape[2], gimg.shape[3]
    for c in prange(C):
        for z in range(D):
            for y in range(H):
                for x in range(W):
                    px = x + u[0, z, y, x]
                    py = y + u[1, z, y, x]
                    pz = z + u[2, z, y, x]
                    if px < 0.0:
                        px = 0.0
                    elif px > W - 1.0:
                        px = W - 1.0
                    if py < 0.0:
                        py = 0.0
                    elif py > H - 1.0:
                        py = H - 1.0
                    if pz < 0.0:
                        pz = 0.0
                    elif pz > D - 1.0:
                        pz = D - 1.0
                    x0 = int(px)
                    y0 = int(py)
                    z0 = int(pz)
                    if x0 > W - 2:
                        x0 = W - 2
                    if y0 > H - 2:
                        y0 = H - 2
                    if z0 > D - 2:
                        z0 = D - 2
                    fx = px - x0
                    fy = py - y0
                    fz = pz - z0
                    gv = g[c, z, y, x]
                    gimg[c, z0, y0, x0] += gv * (1 - fx) * (1 - fy) * (1 - fz)
                    gimg[c, z0, y0, x0 + 1] += gv * fx * (1 - fy) * (1 - fz)
                    gimg[c, z0, y0 + 1, x0] += gv * (1 - fx) * fy * (1 - fz)
                    gimg[c, z0, y0 + 1, x0 + 1] += gv * fx * fy * (1 - fz)
                    gimg[c, z0 + 1, y0, x0] += gv * (1 - fx) * (1 - fy) * fz
                    gimg[c, z0 + 1, y0, x0 + 1] += gv * fx * (1 - fy) * fz
                    gimg[c, z0 + 1, y0 + 1, x0] += gv * (1 - fx) * fy * fz
                    gimg[c, z0 + 1, y0 + 1, x0 + 1] += gv * fx * fy * fz


@njit(parallel=True, fastmath=False, cache=True)
def warp_grad_u(img, u, g, gu):
    # Derivative w.r.t. the displacement; zero where the sample position was
    # clamped to the border (the clamp is flat there).
    C, D, H, W = img.shape[0], img.shape[1], img.shape[2], img.shape[3]
    for z in prange(D):
        for y in range(H):
            for x in range(W):
                px = x + u[0, z, y, x]
                py = y + u[1, z, y, x]
                pz = z + u[2, z, y, x]
                mx = 1.0
                my = 1.0
                mz = 1.0
                if px < 0.0:
                    px = 0.0
                    mx = 0.0
                elif px > W - 1.0:
                    px = W - 1.0
                    mx = 0.0
                if py < 0.0:
                    py = 0.0
                    my = 0.0
                elif py > H - 1.0:
                    py = H - 1.0
                    my = 0.0
                if pz < 0.0:
                    pz = 0.0
                    mz = 0.0
                elif pz > D - 1.0:
                    pz = D - 1.0
                    mz = 0.0
                x0 = int(px)
                y0 = int(py)
                z0 = int(pz)
                if x0 > W - 2:
                    x0 = W - 2
                if y0 > H - 2:
                    y0 = H - 2
                if z0 > D - 2:
                    z0 = D - 2
                fx = px - x0
                fy = py - y0
                fz = pz - z0
                ax = 0.0
                ay = 0.0
                az = 0.0
                for c in range(C):
                    c000 = img[c, z0, y0, x0]
                    c001 = img[c, z0, y0, x0 + 1]
                    c010 = img[c, z0, y0 + 1, x0]
                    c011 = img[c, z0, y0 + 1, x0 + 1]
                    c100 = img[c, z0 + 1, y0, x0]
                    c101 = img[c, z0 + 1, y0, x0 + 1]
                    c110 = img[c, z0 + 1, y0 + 1, x0]
                    c111 = img[c, z0 + 1, y0 + 1, x0 + 1]
                    gv = g[c, z, y, x]
                    dx = (
                        (c001 - c000) * (1 - fy) * (1 - fz)
                        + (c011 - c010) * fy * (1 - fz)
                        + (c101 - c100) * (1 - fy) * fz
                        + (c111 - c110) * fy * fz
                    )
                    dy = (
                        (c010 - c000) * (1 - fx) * (1 - fz)
                        + (c011 - c001) * fx * (1 - fz)
                        + (c110 - c100) * (1 - fx) * fz
                        + (c111 - c101) * fx * fz
                    )
                    dz = (
                        (c100 - c000) * (1 - fx) * (1 - fy)
                        + (c101 - c001) * fx * (1 - fy)
                        + (c110 - c010) * (1 - fx) * fy
                        + (c111 - c011) * fx * fy
                    )
                    ax += gv * dx
                    ay += gv * dy
                    az += gv * dz
                gu[0, z, y, x] = ax * mx
                gu[1, z, y, x] = ay * my
                gu[2, z, y, x] = az * mz
