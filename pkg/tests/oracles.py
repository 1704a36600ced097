"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (loops, 64-bit arithmetic) and shares
no code with the library paths it checks.
"""

import numpy as np


def naive_conv2d(x, w, b, stride, pad):
    """Quadruple-loop direct cross-correlation in float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    bn, c, h, wd = x.shape
    oc, ic, kh, kw = w.shape
    assert c == ic
    xp = np.zeros((bn, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((bn, oc, oh, ow))
    for n in range(bn):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for cc in range(c):
                        for ki in range(kh):
                            for kj in range(kw):
                                acc += xp[n, cc, i * stride + ki, j * stride + kj] * w[o, cc, ki, kj]
                    out[n, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def softmax64(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy64(z, labels):
    q = softmax64(z)
    return float(np.mean([-np.log(q[i, y]) for i, y in enumerate(labels)]))


def batch_mean_var64(x):
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=(0, 2, 3)), x.var(axis=(0, 2, 3))


def bilinear64(img, out_h, out_w):
    """Direct per-output-pixel half-pixel-center bilinear interpolation."""
    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    out = np.zeros((c, out_h, out_w))
    for oy in range(out_h):
        for ox in range(out_w):
            sy = min(max((oy + 0.5) * h / out_h - 0.5, 0.0), h - 1.0)
            sx = min(max((ox + 0.5) * w / out_w - 0.5, 0.0), w - 1.0)
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
            fy, fx = sy - y0, sx - x0
            for cc in range(c):
                top = img[cc, y0, x0] * (1 - fx) + img[cc, y0, x1] * fx
                bot = img[cc, y1, x0] * (1 - fx) + img[cc, y1, x1] * fx
                out[cc, oy, ox] = top * (1 - fy) + bot * fy
    return out


def numeric_grad(f, x, h=1e-3):
    """Plain central differences of a scalar function of a float64 array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f(x)
        x[idx] = orig - h
        fm = f(x)
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def nearest_centroid_accuracy(train, test):
    """Raw-pixel nearest-centroid classifier; the learnability oracle."""
    cents = {}
    for im in train:
        cents.setdefault(im.class_id, []).append(im.pixels.astype(np.float64).ravel())
    cents = {c: np.mean(v, axis=0) for c, v in cents.items()}
    ok = 0
    for im in test:
        flat = im.pixels.astype(np.float64).ravel()
        dists = {c: np.linalg.norm(flat - m) for c, m in cents.items()}
        ok += min(dists, key=dists.get) == im.class_id
    return ok / len(test)
