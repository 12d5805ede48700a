"""Numba-compiled inner loops for the convolution, batchnorm, relu, and
pooling hot paths.

All kernels are single-threaded (nogil) and deterministic: a fixed build and
fixed inputs always produce bit-identical outputs. Statistics accumulate in
float64 regardless of the array dtype.

Layout is NCHW with W contiguous; the kernels vectorize along W and keep
several independent FMA chains in flight by unrolling small blocks of output
(or input) channels.
"""

import numpy as np
from numba import njit


@njit(fastmath=True, cache=True, nogil=True)
def conv2d_forward(xp, w, bias, out, stride):
    """out[n,o,i,j] = bias[o] + sum_{c,u,v} xp[n,c,i*s+u,j*s+v] * w[o,c,u,v]

    xp is the already zero-padded input (N, C, Hp, Wp); out is (N, O, H, W).
    """
    N, O, H, W = out.shape
    C = xp.shape[1]
    K = w.shape[2]
    O4 = (O // 4) * 4
    acc = np.empty((O, W), dtype=out.dtype)
    for n in range(N):
        for i in range(H):
            for o in range(O):
                bo = bias[o]
                for j in range(W):
                    acc[o, j] = bo
            i0 = i * stride
            for c in range(C):
                for u in range(K):
                    xrow = xp[n, c, i0 + u]
                    for o in range(0, O4, 4):
                        a0, a1, a2, a3 = acc[o], acc[o + 1], acc[o + 2], acc[o + 3]
                        for v in range(K):
                            w0 = w[o, c, u, v]
                            w1 = w[o + 1, c, u, v]
                            w2 = w[o + 2, c, u, v]
                            w3 = w[o + 3, c, u, v]
                            for j in range(W):
                                xv = xrow[j * stride + v]
                                a0[j] += w0 * xv
                                a1[j] += w1 * xv
                                a2[j] += w2 * xv
                                a3[j] += w3 * xv
                    for o in range(O4, O):
                        a = acc[o]
                        for v in range(K):
                            wv = w[o, c, u, v]
                            for j in range(W):
                                a[j] += wv * xrow[j * stride + v]
            out[n, :, i, :] = acc


@njit(fastmath=True, cache=True, nogil=True)
def conv2d_grad_input(g, w, dxp, stride):
    """dxp[n,c,i*s+u,j*s+v] += g[n,o,i,j] * w[o,c,u,v] (padded-input grad)."""
    N, O, H, W = g.shape
    C = dxp.shape[1]
    K = w.shape[2]
    C4 = (C // 4) * 4
    tile_w = (W - 1) * stride + K
    tile = np.empty((C, K, tile_w), dtype=dxp.dtype)
    for n in range(N):
        for i in range(H):
            tile[:, :, :] = 0
            i0 = i * stride
            for o in range(O):
                grow = g[n, o, i]
                for u in range(K):
                    for c in range(0, C4, 4):
                        t0, t1 = tile[c, u], tile[c + 1, u]
                        t2, t3 = tile[c + 2, u], tile[c + 3, u]
                        for v in range(K):
                            w0 = w[o, c, u, v]
                            w1 = w[o, c + 1, u, v]
                            w2 = w[o, c + 2, u, v]
                            w3 = w[o, c + 3, u, v]
                            for j in range(W):
                                gj = grow[j]
                                t0[j * stride + v] += w0 * gj
                                t1[j * stride + v] += w1 * gj
                                t2[j * stride + v] += w2 * gj
                                t3[j * stride + v] += w3 * gj
                    for c in range(C4, C):
                        t = tile[c, u]
                        for v in range(K):
                            wv = w[o, c, u, v]
                            for j in range(W):
                                t[j * stride + v] += wv * grow[j]
            for c in range(C):
                for u in range(K):
                    drow = dxp[n, c, i0 + u]
                    trow = tile[c, u]
                    for j in range(tile_w):
                        drow[j] += trow[j]


@njit(fastmath=True, cache=True, nogil=True)
def _conv2d_grad_weight_3x3(xp, g, dw):
    """Stride-1 3x3 fast path: three tap-reductions share each row pass."""
    N, O, H, W = g.shape
    C = xp.shape[1]
    for n in range(N):
        for i in range(H):
            for o in range(O):
                grow = g[n, o, i]
                zero = grow[0] * 0
                for c in range(C):
                    for u in range(3):
                        xrow = xp[n, c, i + u]
                        s0 = zero
                        s1 = zero
                        s2 = zero
                        for j in range(W):
                            gj = grow[j]
                            s0 += xrow[j] * gj
                            s1 += xrow[j + 1] * gj
                            s2 += xrow[j + 2] * gj
                        dw[o, c, u, 0] += s0
                        dw[o, c, u, 1] += s1
                        dw[o, c, u, 2] += s2


@njit(fastmath=True, cache=True, nogil=True)
def _conv2d_grad_weight_generic(xp, g, dw, stride):
    N, O, H, W = g.shape
    C = xp.shape[1]
    K = dw.shape[2]
    for n in range(N):
        for i in range(H):
            i0 = i * stride
            for o in range(O):
                grow = g[n, o, i]
                zero = grow[0] * 0
                for c in range(C):
                    for u in range(K):
                        xrow = xp[n, c, i0 + u]
                        for v in range(K):
                            s = zero
                            for j in range(W):
                                s += xrow[j * stride + v] * grow[j]
                            dw[o, c, u, v] += s


def conv2d_grad_weight(xp, g, dw, stride):
    """dw[o,c,u,v] += sum_{n,i,j} xp[n,c,i*s+u,j*s+v] * g[n,o,i,j]."""
    if stride == 1 and dw.shape[2] == 3 and dw.shape[3] == 3:
        _conv2d_grad_weight_3x3(xp, g, dw)
    else:
        _conv2d_grad_weight_generic(xp, g, dw, stride)


@njit(fastmath=True, cache=True, nogil=True)
def im2col_t(xp, col_t, h_out, w_out, k, stride):
    """Gather conv windows, transposed layout for contiguous streaming:
    col_t[(c*K+u)*K+v, (n*H+i)*W+j] = xp[n, c, i*s+u, j*s+v]."""
    N, C = xp.shape[0], xp.shape[1]
    for n in range(N):
        for i in range(h_out):
            i0 = i * stride
            base_col = (n * h_out + i) * w_out
            for c in range(C):
                for u in range(k):
                    xrow = xp[n, c, i0 + u]
                    for v in range(k):
                        crow = col_t[(c * k + u) * k + v]
                        if stride == 1:
                            for j in range(w_out):
                                crow[base_col + j] = xrow[j + v]
                        else:
                            for j in range(w_out):
                                crow[base_col + j] = xrow[j * stride + v]


@njit(fastmath=True, cache=True, nogil=True)
def col2im_t_add(dcol_t, dxp, h_out, w_out, k, stride):
    """Scatter-add the inverse of im2col_t into the padded input gradient."""
    N, C = dxp.shape[0], dxp.shape[1]
    for n in range(N):
        for i in range(h_out):
            i0 = i * stride
            base_col = (n * h_out + i) * w_out
            for c in range(C):
                for u in range(k):
                    drow = dxp[n, c, i0 + u]
                    for v in range(k):
                        crow = dcol_t[(c * k + u) * k + v]
                        if stride == 1:
                            for j in range(w_out):
                                drow[j + v] += crow[base_col + j]
                        else:
                            for j in range(w_out):
                                drow[j * stride + v] += crow[base_col + j]


@njit(fastmath=True, cache=True, nogil=True)
def relu_forward(x, out):
    flat_x = x.reshape(-1)
    flat_out = out.reshape(-1)
    zero = flat_x[0] * 0
    for idx in range(flat_x.shape[0]):
        v = flat_x[idx]
        flat_out[idx] = v if v > zero else zero


@njit(fastmath=True, cache=True, nogil=True)
def relu_backward(g, out, dx):
    flat_g = g.reshape(-1)
    flat_out = out.reshape(-1)
    flat_dx = dx.reshape(-1)
    zero = flat_g[0] * 0
    for idx in range(flat_g.shape[0]):
        flat_dx[idx] = flat_g[idx] if flat_out[idx] > zero else zero


@njit(fastmath=True, cache=True, nogil=True)
def avgpool2d_forward(x, out):
    """Non-overlapping 2x2 means into out (N, C, H//2, W//2)."""
    N, C, H2, W2 = out.shape
    for n in range(N):
        for c in range(C):
            for i in range(H2):
                r0 = x[n, c, 2 * i]
                r1 = x[n, c, 2 * i + 1]
                orow = out[n, c, i]
                for j in range(W2):
                    orow[j] = 0.25 * (r0[2 * j] + r0[2 * j + 1] + r1[2 * j] + r1[2 * j + 1])


@njit(fastmath=True, cache=True, nogil=True)
def avgpool2d_backward(g, dx):
    """Spread each output grad over its 2x2 block; odd tails get zero.

    dx may be uninitialized; every entry is written.
    """
    N, C, H, W = dx.shape
    H2, W2 = g.shape[2], g.shape[3]
    zero = g[0, 0, 0, 0] * 0
    for n in range(N):
        for c in range(C):
            for i in range(H2):
                grow = g[n, c, i]
                d0 = dx[n, c, 2 * i]
                d1 = dx[n, c, 2 * i + 1]
                for j in range(W2):
                    v = 0.25 * grow[j]
                    d0[2 * j] = v
                    d0[2 * j + 1] = v
                    d1[2 * j] = v
                    d1[2 * j + 1] = v
                if W > 2 * W2:
                    for j in range(2 * W2, W):
                        d0[j] = zero
                        d1[j] = zero
            for i in range(2 * H2, H):
                drow = dx[n, c, i]
                for j in range(W):
                    drow[j] = zero


@njit(fastmath=True, cache=True, nogil=True)
def channel_sums(x, sums, sumsq):
    """Per-channel sum and sum of squares over (N, H, W), float64 accumulators."""
    N, C, H, W = x.shape
    for c in range(C):
        s = 0.0
        sq = 0.0
        for n in range(N):
            for i in range(H):
                row = x[n, c, i]
                for j in range(W):
                    v = np.float64(row[j])
                    s += v
                    sq += v * v
        sums[c] = s
        sumsq[c] = sq


@njit(fastmath=True, cache=True, nogil=True)
def bn_normalize(x, mean, inv_std, gamma, beta, out):
    """out = gamma * (x - mean) * inv_std + beta, per channel."""
    N, C, H, W = x.shape
    for n in range(N):
        for c in range(C):
            scale = gamma[c] * inv_std[c]
            shift = beta[c] - mean[c] * scale
            for i in range(H):
                row = x[n, c, i]
                orow = out[n, c, i]
                for j in range(W):
                    orow[j] = scale * row[j] + shift


@njit(fastmath=True, cache=True, nogil=True)
def bn_normalize_relu(x, mean, inv_std, gamma, beta, out):
    """out = max(gamma * (x - mean) * inv_std + beta, 0), per channel."""
    N, C, H, W = x.shape
    zero = x[0, 0, 0, 0] * 0
    for n in range(N):
        for c in range(C):
            scale = gamma[c] * inv_std[c]
            shift = beta[c] - mean[c] * scale
            for i in range(H):
                row = x[n, c, i]
                orow = out[n, c, i]
                for j in range(W):
                    v = scale * row[j] + shift
                    orow[j] = v if v > zero else zero


@njit(fastmath=True, cache=True, nogil=True)
def bnrelu_backward_reduce(g, out, x, mean, inv_std, sum_g, sum_g_xhat):
    """bn_backward_reduce with the relu mask (out > 0) applied to g."""
    N, C, H, W = x.shape
    zero = out[0, 0, 0, 0] * 0
    for c in range(C):
        mc = np.float64(mean[c])
        ic = np.float64(inv_std[c])
        sg = 0.0
        sgx = 0.0
        for n in range(N):
            for i in range(H):
                grow = g[n, c, i]
                orow = out[n, c, i]
                xrow = x[n, c, i]
                for j in range(W):
                    if orow[j] > zero:
                        gv = np.float64(grow[j])
                        sg += gv
                        sgx += gv * (np.float64(xrow[j]) - mc) * ic
        sum_g[c] = sg
        sum_g_xhat[c] = sgx


@njit(fastmath=True, cache=True, nogil=True)
def bnrelu_backward_input(g, out, x, mean, inv_std, gamma, mean_g, mean_g_xhat, dx):
    """bn_backward_input with the relu mask (out > 0) applied to g."""
    N, C, H, W = x.shape
    zero = out[0, 0, 0, 0] * 0
    for n in range(N):
        for c in range(C):
            scale = gamma[c] * inv_std[c]
            mg = mean_g[c]
            mgx = mean_g_xhat[c]
            mc = mean[c]
            ic = inv_std[c]
            for i in range(H):
                grow = g[n, c, i]
                orow = out[n, c, i]
                xrow = x[n, c, i]
                drow = dx[n, c, i]
                for j in range(W):
                    gv = grow[j] if orow[j] > zero else zero
                    xhat = (xrow[j] - mc) * ic
                    drow[j] = scale * (gv - mg - xhat * mgx)


@njit(fastmath=True, cache=True, nogil=True)
def bn_backward_reduce(g, x, mean, inv_std, sum_g, sum_g_xhat):
    """Per-channel sum of g and of g * xhat, float64 accumulators."""
    N, C, H, W = x.shape
    for c in range(C):
        mc = np.float64(mean[c])
        ic = np.float64(inv_std[c])
        sg = 0.0
        sgx = 0.0
        for n in range(N):
            for i in range(H):
                grow = g[n, c, i]
                xrow = x[n, c, i]
                for j in range(W):
                    gv = np.float64(grow[j])
                    sg += gv
                    sgx += gv * (np.float64(xrow[j]) - mc) * ic
        sum_g[c] = sg
        sum_g_xhat[c] = sgx


@njit(fastmath=True, cache=True, nogil=True)
def bn_backward_input(g, x, mean, inv_std, gamma, mean_g, mean_g_xhat, dx):
    """dx = gamma * inv_std * (g - mean_g - xhat * mean_g_xhat), per channel."""
    N, C, H, W = x.shape
    for n in range(N):
        for c in range(C):
            scale = gamma[c] * inv_std[c]
            mg = mean_g[c]
            mgx = mean_g_xhat[c]
            mc = mean[c]
            ic = inv_std[c]
            for i in range(H):
                grow = g[n, c, i]
                xrow = x[n, c, i]
                drow = dx[n, c, i]
                for j in range(W):
                    xhat = (xrow[j] - mc) * ic
                    drow[j] = scale * (grow[j] - mg - xhat * mgx)
