"""Independent float64 reference implementations and finite-difference tools.

Everything here is deliberately written from the defining formulas (nested
loops for the convolutions, direct expressions elsewhere) and runs in double
precision, so it never shares a code path with the float32 engine it checks.
"""

import numpy as np


# --- nested-loop convolution oracles (forward equality checks) -------------


def conv_pointwise_loops(x, w, b):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    y = np.zeros((n, cout, h, wd))
    for ni in range(n):
        for co in range(cout):
            for hi in range(h):
                for wi in range(wd):
                    acc = 0.0 if b is None else float(b[0, co, 0, 0])
                    for ci in range(cin):
                        acc += float(x[ni, ci, hi, wi]) * float(w[co, ci, 0, 0])
                    y[ni, co, hi, wi] = acc
    return y


def conv_depthwise_loops(x, w, b, padding="zero"):
    n, c, h, wd = x.shape
    y = np.zeros((n, c, h, wd))
    for ni in range(n):
        for ci in range(c):
            for hi in range(h):
                for wi in range(wd):
                    acc = 0.0 if b is None else float(b[0, ci, 0, 0])
                    for dy in range(3):
                        for dx in range(3):
                            sy, sx = hi + dy - 1, wi + dx - 1
                            if padding == "reflect":
                                sy = -sy if sy < 0 else (2 * h - 2 - sy if sy >= h else sy)
                                sx = -sx if sx < 0 else (2 * wd - 2 - sx if sx >= wd else sx)
                                v = float(x[ni, ci, sy, sx])
                            else:
                                v = float(x[ni, ci, sy, sx]) if 0 <= sy < h and 0 <= sx < wd else 0.0
                            acc += v * float(w[ci, 0, dy, dx])
                    y[ni, ci, hi, wi] = acc
    return y


def conv_down_loops(x, w, b):
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    y = np.zeros((n, cout, h // 2, wd // 2))
    for ni in range(n):
        for co in range(cout):
            for hi in range(h // 2):
                for wi in range(wd // 2):
                    acc = 0.0 if b is None else float(b[0, co, 0, 0])
                    for ci in range(cin):
                        for dy in range(2):
                            for dx in range(2):
                                acc += float(x[ni, ci, 2 * hi + dy, 2 * wi + dx]) * float(
                                    w[co, ci, dy, dx]
                                )
                    y[ni, co, hi, wi] = acc
    return y


# --- direct float64 references (used as finite-difference forwards) --------


def ref_conv_pointwise(x, w, b):
    y = np.einsum("nihw,oi->nohw", x, w[:, :, 0, 0])
    return y if b is None else y + b


def ref_conv_depthwise(x, w, b, padding="zero"):
    n, c, h, wd = x.shape
    mode = "constant" if padding == "zero" else "reflect"
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode=mode)
    y = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            y = y + w[:, 0, dy, dx][None, :, None, None] * xp[:, :, dy : dy + h, dx : dx + wd]
    return y if b is None else y + b


def ref_conv_down(x, w, b):
    n, cin, h, wd = x.shape
    xr = x.reshape(n, cin, h // 2, 2, wd // 2, 2)
    y = np.einsum("nihawb,oiab->nohw", xr, w)
    return y if b is None else y + b


def ref_layer_norm(x, gamma, beta, eps=1e-6):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def ref_simple_gate(x):
    half = x.shape[1] // 2
    return x[:, :half] * x[:, half:]


def ref_global_avg_pool(x):
    return x.mean(axis=(2, 3), keepdims=True)


def ref_sca(x, w, b):
    att = ref_conv_pointwise(ref_global_avg_pool(x), w, b)
    return x * att


def ref_pixel_shuffle_up(x, r=2):
    n, c, h, wd = x.shape
    y = np.zeros((n, c // (r * r), h * r, wd * r), dtype=x.dtype)
    for ci in range(c // (r * r)):
        for dy in range(r):
            for dx in range(r):
                y[:, ci, dy::r, dx::r] = x[:, ci * r * r + dy * r + dx]
    return y


def ref_pixel_shuffle_down(x, r=2):
    n, c, h, wd = x.shape
    y = np.zeros((n, c * r * r, h // r, wd // r), dtype=x.dtype)
    for ci in range(c):
        for dy in range(r):
            for dx in range(r):
                y[:, ci * r * r + dy * r + dx] = x[:, ci, dy::r, dx::r]
    return y


def ref_softmax_channels(x):
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def ref_mean_abs(a, b):
    return np.mean(np.abs(a - b))


def ref_nll(probs, labels, floor=1e-12):
    rows = np.arange(probs.shape[0])
    picked = np.maximum(probs[rows, labels, 0, 0], floor)
    return np.mean(-np.log(picked))


# --- finite differences -----------------------------------------------------


def fd_gradients(f, arrays, step=1e-3):
    """Central finite differences of scalar ``f(arrays)`` wrt each array.

    Arrays must be float64; they are perturbed in place and restored.
    """
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gf = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = f()
            flat[i] = orig - step
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * step)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.max(np.abs(numeric)), 1e-8)
    return np.max(np.abs(analytic - numeric)) / scale
