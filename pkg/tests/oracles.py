"""Brute-force reference implementations used as independent test oracles.

Nothing here calls the code path it is used to check.
"""

import math

import numpy as np

from salcal.nn import forward


def _reflect(i, n):
    while i < 0 or i >= n:
        i = -i - 1 if i < 0 else 2 * n - i - 1
    return i


def dense_conv2d_reflect(m, kernel):
    """Direct 2-D correlation with half-sample symmetric borders, by loops."""
    m = np.asarray(m, dtype=np.float64)
    kh, kw = kernel.shape
    rh, rw = kh // 2, kw // 2
    H, W = m.shape
    reflect = _reflect

    out = np.zeros_like(m)
    for y in range(H):
        for x in range(W):
            acc = 0.0
            for dy in range(-rh, rh + 1):
                yy = reflect(y + dy, H)
                for dx in range(-rw, rw + 1):
                    acc += kernel[dy + rh, dx + rw] * m[yy, reflect(x + dx, W)]
            out[y, x] = acc
    return out


def dense_conv2d_reflect_shifts(m, kernel):
    """Same correlation as :func:`dense_conv2d_reflect`, one full 2-D tap at a time.

    Reflected coordinates come from the scalar ``_reflect`` rule; the kernel
    is never factored, so this stays independent of a separable blur.
    """
    m = np.asarray(m, dtype=np.float64)
    kh, kw = kernel.shape
    rh, rw = kh // 2, kw // 2
    H, W = m.shape
    rows = {dy: np.array([_reflect(y + dy, H) for y in range(H)]) for dy in range(-rh, rh + 1)}
    cols = {dx: np.array([_reflect(x + dx, W) for x in range(W)]) for dx in range(-rw, rw + 1)}
    out = np.zeros_like(m)
    for dy in range(-rh, rh + 1):
        shifted_rows = m[rows[dy]]
        for dx in range(-rw, rw + 1):
            out += kernel[dy + rh, dx + rw] * shifted_rows[:, cols[dx]]
    return out


def box_mask_loops(dims, boxes):
    H, W = dims
    m = np.zeros((H, W))
    for y in range(H):
        for x in range(W):
            for b in boxes:
                if b.x <= x < b.x + b.w and b.y <= y < b.y + b.h:
                    m[y, x] = 1.0
    return m


def gaussian_kernel_direct(size, sigma):
    r = size // 2
    k = np.array([[math.exp(-((i - r) ** 2 + (j - r) ** 2) / (2 * sigma * sigma)) for j in range(size)]
                  for i in range(size)])
    return k / k.sum()


def area_downsample_loops(m, target):
    """Integrate the piecewise-constant map over each output cell."""
    H, W = m.shape
    th, tw = target
    sy, sx = H / th, W / tw
    out = np.zeros(target)
    for oy in range(th):
        y0, y1 = oy * sy, (oy + 1) * sy
        for ox in range(tw):
            x0, x1 = ox * sx, (ox + 1) * sx
            acc = 0.0
            for y in range(math.floor(y0), min(math.ceil(y1), H)):
                fy = min(y + 1, y1) - max(y, y0)
                for x in range(math.floor(x0), min(math.ceil(x1), W)):
                    fx = min(x + 1, x1) - max(x, x0)
                    acc += fy * fx * m[y, x]
            out[oy, ox] = acc / (sy * sx)
    return out


def minmax_loops(m):
    lo = min(v for v in np.ravel(m))
    hi = max(v for v in np.ravel(m))
    if hi == lo:
        return np.zeros_like(m, dtype=np.float64)
    return (np.asarray(m, dtype=np.float64) - lo) / (hi - lo)


def conv3x3_loops(x, w, b):
    """Zero-padded 3x3 convolution (correlation) for one NHWC sample."""
    H, W, C = x.shape
    out = np.zeros((H, W, w.shape[3]))
    for y in range(H):
        for xx in range(W):
            for co in range(w.shape[3]):
                acc = float(b[co])
                for dy in range(3):
                    for dx in range(3):
                        yy, xs = y + dy - 1, xx + dx - 1
                        if 0 <= yy < H and 0 <= xs < W:
                            for ci in range(C):
                                acc += w[dy, dx, ci, co] * x[yy, xs, ci]
                out[y, xx, co] = acc
    return out


def weighted_sum_loops(a, w):
    H, W, K = a.shape
    return np.array([[sum(w[k] * a[i, j, k] for k in range(K)) for j in range(W)] for i in range(H)])


def loss_components(model, x, y, hsms):
    """(L_m, L_c) from forward outputs with loop-free but backward-free maths."""
    fr = forward(model, x)
    pred = fr.prediction[:, 0]
    l_c = float(np.mean((pred - y) ** 2))
    w = model.head.weights[:, 0]
    errs = []
    for a, h in zip(fr.feature_maps, hsms):
        s = minmax_loops(np.tensordot(a, w, axes=([2], [0])))
        errs.append(np.mean((s - h) ** 2))
    return float(np.mean(errs)), l_c


def _signature(model, x):
    fr = forward(model, x, keep_cache=True)
    raw = (fr.feature_maps @ model.head.weights[:, 0]).reshape(len(x), -1)
    return [c[2] > 0 for c in fr.cache] + [raw.argmin(axis=1), raw.argmax(axis=1)]


def _same(a, b):
    return all(np.array_equal(u, v) for u, v in zip(a, b))


def finite_difference_components(model, x, y, hsms, eps=1e-3):
    """Five-point central differences of (L_m, L_c) w.r.t. every parameter.

    Returns ``({name: dL_m}, {name: dL_c}, {name: valid_mask})``. An entry is
    invalid when the stencil ``theta +- 2 eps`` crosses a ReLU kink or moves
    the argmin/argmax of a saliency map, where no finite difference is exact.
    """
    base = _signature(model, x)
    d_m, d_c, valid = {}, {}, {}
    for name, arr in model.parameters().items():
        gm = np.zeros(arr.shape)
        gc = np.zeros(arr.shape)
        ok = np.ones(arr.shape, dtype=bool)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            vals = []
            for step in (2, 1, -1, -2):
                arr[idx] = old + step * eps
                if not _same(_signature(model, x), base):
                    ok[idx] = False
                vals.append(loss_components(model, x, y, hsms))
            arr[idx] = old
            (m2, c2), (m1, c1), (mm1, cm1), (mm2, cm2) = vals
            gm[idx] = (-m2 + 8 * m1 - 8 * mm1 + mm2) / (12 * eps)
            gc[idx] = (-c2 + 8 * c1 - 8 * cm1 + cm2) / (12 * eps)
        d_m[name], d_c[name], valid[name] = gm, gc, ok
    return d_m, d_c, valid


def relative_error(a, n, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def naive_mse(p, t):
    s = 0.0
    for a, b in zip(p, t):
        s += (a - b) ** 2
    return s / len(p)


def naive_mae(p, t):
    s = 0.0
    for a, b in zip(p, t):
        s += abs(a - b)
    return s / len(p)


def dense_layer_loops(x, w, b):
    return np.array([sum(x[i] * w[i, j] for i in range(len(x))) + b[j] for j in range(w.shape[1])])
