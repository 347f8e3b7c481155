"""Slow, loop-based reference implementations used as test oracles.

None of these share code with the package: plain Python loops and math only.
"""
import math

import numpy as np


def conv_loop(x, w, b, padding="same"):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = (kh // 2, kw // 2) if padding == "same" else (0, 0)
    oh, ow = h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    out = np.zeros((n, cout, oh, ow))
    for s in range(n):
        for o in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = float(b[o])
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                y, z = i + u - ph, j + v - pw
                                if 0 <= y < h and 0 <= z < wd:
                                    acc += float(x[s, c, y, z]) * float(w[o, c, u, v])
                    out[s, o, i, j] = acc
    return out


def maxpool_loop(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for s in range(n):
        for k in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[s, k, i, j] = max(x[s, k, 2 * i + a, 2 * j + b] for a in (0, 1) for b in (0, 1))
    return out


def dense_loop(x, w, b):
    n, din = x.shape
    dout = w.shape[0]
    out = np.zeros((n, dout))
    for r in range(n):
        for o in range(dout):
            out[r, o] = b[o] + sum(float(x[r, i]) * float(w[o, i]) for i in range(din))
    return out


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def convlstm_loop(e_out, d_in, p):
    """Two steps (d_in then e_out) of the gate equations, element by element.

    ``p`` maps ``wx_i`` ... ``b_g`` to float64 arrays.
    """
    shape = e_out.shape
    h = np.zeros(shape)
    c = np.zeros(shape)
    for x in (d_in, e_out):
        pre = {g: conv_loop(x, p[f"wx_{g}"], p[f"b_{g}"]) + conv_loop(h, p[f"wh_{g}"], np.zeros(shape[1]))
               for g in "ifog"}
        h_new = np.zeros(shape)
        c_new = np.zeros(shape)
        for idx in np.ndindex(*shape):
            i = _sig(pre["i"][idx])
            f = _sig(pre["f"][idx])
            o = _sig(pre["o"][idx])
            g = math.tanh(pre["g"][idx])
            c_new[idx] = f * c[idx] + i * g
            h_new[idx] = o * math.tanh(c_new[idx])
        h, c = h_new, c_new
    return h


def se_loop(x, w1, b1, w2, b2):
    n, ch, hh, ww = x.shape
    out = np.zeros(x.shape)
    for s in range(n):
        sq = [sum(float(x[s, k, i, j]) for i in range(hh) for j in range(ww)) / (hh * ww) for k in range(ch)]
        hidden = [max(0.0, b1[r] + sum(w1[r, k] * sq[k] for k in range(ch))) for r in range(w1.shape[0])]
        z = [_sig(b2[k] + sum(w2[k, r] * hidden[r] for r in range(len(hidden)))) for k in range(ch)]
        for k in range(ch):
            out[s, k] = z[k] * x[s, k]
    return out


def psnr_loop(a, b):
    total = 0.0
    count = 0
    for u, v in zip(np.ravel(a), np.ravel(b)):
        d = float(u) * 255.0 - float(v) * 255.0
        total += d * d
        count += 1
    mse = total / count
    return math.inf if mse == 0 else 10.0 * math.log10(255.0 ** 2 / mse)


def ssim_constant(v1, v2):
    """SSIM of two constant images with gray levels v1, v2 in [0, 255]."""
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    return (2 * v1 * v2 + c1) * c2 / ((v1 * v1 + v2 * v2 + c1) * c2)


def adam_scalar(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
    return theta


def central_difference(f, x, h=1e-3):
    """Numeric gradient of scalar ``f`` at float64 array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = f(x)
        x[idx] = old - h
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g
