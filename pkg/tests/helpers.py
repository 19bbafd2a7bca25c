"""Shared test oracles: central finite differences and brute-force references."""

from __future__ import annotations

import itertools

import numpy as np

from vineseg.tensor import Tensor, no_grad

FD_STEP = 1e-3
KINK_MARGIN = 1e-2


def numeric_grad(f, arrays, index, h=FD_STEP):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]`` (float64)."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(*arrays)
        x[i] = old - h
        fm = f(*arrays)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(analytic, numeric):
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def check_gradients(fn, arrays, rng, wrt=None, h=FD_STEP):
    """Max relative error between tape and finite-difference gradients.

    ``fn`` maps float64 tensors to a tensor; the scalar probed is
    ``sum(fn(...) * R)`` with a fixed random ``R`` so every output entry
    contributes with a distinct weight.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    with no_grad():
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
    R = rng.uniform(-1.0, 1.0, size=out_shape)

    tensors = [Tensor(a, requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    (out * Tensor(R)).sum().backward()

    def scalar(*arrs):
        with no_grad():
            return float(np.sum(fn(*[Tensor(a) for a in arrs]).data * R))

    worst = 0.0
    for i in wrt:
        num = numeric_grad(scalar, arrays, i, h)
        worst = max(worst, rel_error(tensors[i].grad, num))
    return worst


def far_from_zero(z, margin=KINK_MARGIN):
    return bool(np.all(np.abs(z) > margin))


def pool_gaps_ok(x, margin=KINK_MARGIN):
    """Every 2×2 window has a unique max separated by more than ``margin``."""
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    s = np.sort(win, axis=-1)
    return bool(np.all(s[..., -1] - s[..., -2] > margin))


# ---------------------------------------------------------------------------
# brute-force references


def conv2d_loops(x, w, b=None, stride=1, padding="same"):
    """Direct nested-loop cross-correlation with TF-style same padding."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    if padding == "same":
        oh, ow = -(-h // stride), -(-wd // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - wd, 0)
        top, left = ph // 2, pw // 2
    else:
        oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
        top = left = 0
    out = np.zeros((n, o, oh, ow))
    for bi in range(n):
        for oc in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ic in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                r, s = i * stride + di - top, j * stride + dj - left
                                if 0 <= r < h and 0 <= s < wd:
                                    acc += x[bi, ic, r, s] * w[oc, ic, di, dj]
                    out[bi, oc, i, j] = acc + (b[oc] if b is not None else 0.0)
    return out


def fcm_double_loop(u, y, q):
    """J = Σ_images Σ_j Σ_k u_jk^q ||y_j - v_k||² with per-image closed-form centroids."""
    n, C, h, w = u.shape
    total = 0.0
    for b in range(n):
        pix = [(r, s) for r in range(h) for s in range(w)]
        cents = []
        for k in range(C):
            num = np.zeros(y.shape[1])
            den = 0.0
            for r, s in pix:
                wgt = u[b, k, r, s] ** q
                num += wgt * y[b, :, r, s]
                den += wgt
            cents.append(num / den)
        for r, s in pix:
            for k in range(C):
                d = y[b, :, r, s] - cents[k]
                total += u[b, k, r, s] ** q * float(d @ d)
    return total


def kmeans_wcss(points, labels):
    """Within-cluster sum of squares, accumulated point by point."""
    total = 0.0
    for k in sorted(set(labels.tolist())):
        members = points[labels == k]
        centre = members.sum(axis=0) / len(members)
        for p in members:
            total += float(((p - centre) ** 2).sum())
    return total


def brute_confusion(pred, gt, k):
    cm = [[0] * k for _ in range(k)]
    for p, g in zip(pred.reshape(-1).tolist(), gt.reshape(-1).tolist()):
        cm[g][p] += 1
    return cm


def brute_match(overlap):
    """Best total over every cluster→class map that covers all classes."""
    C, K = overlap.shape
    best = -1
    for lut in itertools.product(range(K), repeat=C):
        if set(lut) != set(range(K)):
            continue
        best = max(best, sum(overlap[c, lut[c]] for c in range(C)))
    return best
