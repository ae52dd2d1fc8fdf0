"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is chosen once at import from ``MSME_BACKEND`` (``numba`` or
``numpy``); numba is used when importable unless the variable says otherwise.
``set_backend`` switches at runtime, which the tests use to compare paths.

All kernels take and return plain ndarrays and never mutate their inputs.
Reductions run in a fixed order so results are bitwise reproducible for a
given backend.
"""
import os

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

CACHE_NUMBA = os.environ.get("MSME_NUMBA_CACHE", "1") != "0"


def _default_backend():
    requested = os.environ.get("MSME_BACKEND", "").strip().lower()
    if requested in ("", "auto"):
        return "numba" if HAS_NUMBA else "numpy"
    if requested not in ("numba", "numpy"):
        raise ValueError(f"MSME_BACKEND must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numba" and not HAS_NUMBA:
        raise ImportError("MSME_BACKEND=numba but numba is not installed")
    return requested


_BACKEND = _default_backend()


def get_backend():
    return _BACKEND


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"`` kernels; returns the previous backend."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise ImportError("numba is not installed")
    previous, _BACKEND = _BACKEND, name
    return previous


def jit_decorator(func):
    if HAS_NUMBA:
        return numba.njit(cache=CACHE_NUMBA)(func)
    return func


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@jit_decorator
def _im2col_nb(x, kh, kw):
    C, H, W = x.shape
    Ho = H - kh + 1
    Wo = W - kw + 1
    cols = np.empty((C * kh * kw, Ho * Wo), dtype=x.dtype)
    r = 0
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                p = 0
                for y in range(Ho):
                    for xx in range(Wo):
                        cols[r, p] = x[c, y + i, xx + j]
                        p += 1
                r += 1
    return cols


@jit_decorator
def _col2im_nb(dcols, C, H, W, kh, kw):
    Ho = H - kh + 1
    Wo = W - kw + 1
    gx = np.zeros((C, H, W), dtype=dcols.dtype)
    r = 0
    for c in range(C):
        for i in range(kh):
            for j in range(kw):
                p = 0
                for y in range(Ho):
                    for xx in range(Wo):
                        gx[c, y + i, xx + j] += dcols[r, p]
                        p += 1
                r += 1
    return gx


@jit_decorator
def _conv2d_forward_nb(x, w, b):
    O, C, kh, kw = w.shape
    Ho = x.shape[1] - kh + 1
    Wo = x.shape[2] - kw + 1
    cols = _im2col_nb(x, kh, kw)
    out = np.dot(np.ascontiguousarray(w.reshape(O, C * kh * kw)), cols)
    for o in range(O):
        for p in range(Ho * Wo):
            out[o, p] += b[o]
    return out.reshape(O, Ho, Wo)


@jit_decorator
def _conv2d_backward_nb(x, w, gout):
    O, C, kh, kw = w.shape
    _, H, W = x.shape
    Ho = H - kh + 1
    Wo = W - kw + 1
    g2 = np.ascontiguousarray(gout.reshape(O, Ho * Wo))
    cols = _im2col_nb(x, kh, kw)
    gw = np.dot(g2, cols.T.copy()).reshape(O, C, kh, kw)
    gb = np.zeros(O, dtype=gout.dtype)
    for o in range(O):
        s = 0.0
        for p in range(Ho * Wo):
            s += g2[o, p]
        gb[o] = s
    wmat = np.ascontiguousarray(w.reshape(O, C * kh * kw)).T.copy()
    dcols = np.dot(wmat, g2)
    gx = _col2im_nb(dcols, C, H, W, kh, kw)
    return gx, gw, gb


@jit_decorator
def _maxpool2_forward_nb(x):
    C, H, W = x.shape
    Ho = H // 2
    Wo = W // 2
    out = np.empty((C, Ho, Wo), dtype=x.dtype)
    idx = np.empty((C, Ho, Wo), dtype=np.int8)
    for c in range(C):
        for y in range(Ho):
            for xx in range(Wo):
                best = x[c, 2 * y, 2 * xx]
                k = 0
                for q in range(1, 4):
                    v = x[c, 2 * y + q // 2, 2 * xx + q % 2]
                    if v > best:
                        best = v
                        k = q
                out[c, y, xx] = best
                idx[c, y, xx] = k
    return out, idx


@jit_decorator
def _maxpool2_backward_nb(gout, idx):
    C, Ho, Wo = gout.shape
    gx = np.zeros((C, 2 * Ho, 2 * Wo), dtype=gout.dtype)
    for c in range(C):
        for y in range(Ho):
            for xx in range(Wo):
                k = idx[c, y, xx]
                gx[c, 2 * y + k // 2, 2 * xx + k % 2] = gout[c, y, xx]
    return gx


@jit_decorator
def _upconv2_forward_nb(x, w, b):
    C, H, W = x.shape
    O = w.shape[1]
    out = np.empty((O, 2 * H, 2 * W), dtype=x.dtype)
    for o in range(O):
        for y in range(2 * H):
            for xx in range(2 * W):
                out[o, y, xx] = b[o]
    for c in range(C):
        for o in range(O):
            for i in range(2):
                for j in range(2):
                    wv = w[c, o, i, j]
                    for y in range(H):
                        for xx in range(W):
                            out[o, 2 * y + i, 2 * xx + j] += wv * x[c, y, xx]
    return out


@jit_decorator
def _upconv2_backward_nb(x, w, gout):
    C, H, W = x.shape
    O = w.shape[1]
    gx = np.zeros((C, H, W), dtype=gout.dtype)
    gw = np.zeros((C, O, 2, 2), dtype=gout.dtype)
    gb = np.zeros(O, dtype=gout.dtype)
    for o in range(O):
        s = 0.0
        for y in range(2 * H):
            for xx in range(2 * W):
                s += gout[o, y, xx]
        gb[o] = s
    for c in range(C):
        for o in range(O):
            for i in range(2):
                for j in range(2):
                    wv = w[c, o, i, j]
                    acc = 0.0
                    for y in range(H):
                        for xx in range(W):
                            g = gout[o, 2 * y + i, 2 * xx + j]
                            gx[c, y, xx] += wv * g
                            acc += x[c, y, xx] * g
                    gw[c, o, i, j] = acc
    return gx, gw, gb


@jit_decorator
def _weighted_ce_nb(logits, labels, weights):
    C, H, W = logits.shape
    grad = np.empty_like(logits)
    total = 0.0
    for y in range(H):
        for xx in range(W):
            m = logits[0, y, xx]
            for c in range(1, C):
                if logits[c, y, xx] > m:
                    m = logits[c, y, xx]
            s = 0.0
            for c in range(C):
                s += np.exp(logits[c, y, xx] - m)
            lse = m + np.log(s)
            wy = 0.0
            for c in range(C):
                wy += weights[c] * labels[c, y, xx]
            for c in range(C):
                wc = weights[c] * labels[c, y, xx]
                total += wc * (lse - logits[c, y, xx])
                grad[c, y, xx] = wy * np.exp(logits[c, y, xx] - lse) - wc
    return total, grad


# ---------------------------------------------------------------------------
# numpy kernels
# ---------------------------------------------------------------------------


def _im2col_np(x, kh, kw):
    C, H, W = x.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    cols = np.empty((C, kh, kw, Ho, Wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = x[:, i:i + Ho, j:j + Wo]
    return cols.reshape(C * kh * kw, Ho * Wo)


def _conv2d_forward_np(x, w, b):
    O, C, kh, kw = w.shape
    Ho, Wo = x.shape[1] - kh + 1, x.shape[2] - kw + 1
    out = w.reshape(O, -1) @ _im2col_np(x, kh, kw)
    out += b[:, None]
    return out.reshape(O, Ho, Wo)


def _conv2d_backward_np(x, w, gout):
    O, C, kh, kw = w.shape
    _, H, W = x.shape
    Ho, Wo = H - kh + 1, W - kw + 1
    g2 = gout.reshape(O, Ho * Wo)
    gw = (g2 @ _im2col_np(x, kh, kw).T).reshape(O, C, kh, kw)
    gb = g2.sum(axis=1)
    dcols = (w.reshape(O, -1).T @ g2).reshape(C, kh, kw, Ho, Wo)
    gx = np.zeros((C, H, W), dtype=gout.dtype)
    for i in range(kh):
        for j in range(kw):
            gx[:, i:i + Ho, j:j + Wo] += dcols[:, i, j]
    return gx, gw, gb


def _maxpool2_forward_np(x):
    C, H, W = x.shape
    blocks = x.reshape(C, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H // 2, W // 2, 4)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx.astype(np.int8)


def _maxpool2_backward_np(gout, idx):
    C, Ho, Wo = gout.shape
    blocks = np.zeros((C, Ho, Wo, 4), dtype=gout.dtype)
    np.put_along_axis(blocks, idx.astype(np.intp)[..., None], gout[..., None], axis=-1)
    return blocks.reshape(C, Ho, Wo, 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, 2 * Ho, 2 * Wo)


def _upconv2_forward_np(x, w, b):
    C, H, W = x.shape
    O = w.shape[1]
    out = np.tensordot(w, x, axes=([0], [0]))  # [O, 2, 2, H, W]
    out = out.transpose(0, 3, 1, 4, 2).reshape(O, 2 * H, 2 * W)
    out += b[:, None, None]
    return out


def _upconv2_backward_np(x, w, gout):
    C, H, W = x.shape
    O = w.shape[1]
    g5 = gout.reshape(O, H, 2, W, 2)
    gx = np.tensordot(w, g5, axes=([1, 2, 3], [0, 2, 4]))
    gw = np.tensordot(x, g5, axes=([1, 2], [1, 3]))
    gb = gout.sum(axis=(1, 2))
    return gx, gw, gb


def _weighted_ce_np(logits, labels, weights):
    m = logits.max(axis=0)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=0))
    logp = shifted - lse
    wy_c = weights[:, None, None] * labels
    total = float(-(wy_c * logp).sum(dtype=np.float64))
    grad = wy_c.sum(axis=0) * np.exp(logp) - wy_c
    return total, grad.astype(logits.dtype, copy=False)


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _c(a):
    return np.ascontiguousarray(a)


def conv2d_forward(x, w, b):
    if _BACKEND == "numba":
        return _conv2d_forward_nb(_c(x), _c(w), _c(b))
    return _conv2d_forward_np(x, w, b)


def conv2d_backward(x, w, gout):
    if _BACKEND == "numba":
        return _conv2d_backward_nb(_c(x), _c(w), _c(gout))
    return _conv2d_backward_np(x, w, gout)


def maxpool2_forward(x):
    if _BACKEND == "numba":
        return _maxpool2_forward_nb(_c(x))
    return _maxpool2_forward_np(x)


def maxpool2_backward(gout, idx):
    if _BACKEND == "numba":
        return _maxpool2_backward_nb(_c(gout), _c(idx))
    return _maxpool2_backward_np(gout, idx)


def upconv2_forward(x, w, b):
    if _BACKEND == "numba":
        return _upconv2_forward_nb(_c(x), _c(w), _c(b))
    return _upconv2_forward_np(x, w, b)


def upconv2_backward(x, w, gout):
    if _BACKEND == "numba":
        return _upconv2_backward_nb(_c(x), _c(w), _c(gout))
    return _upconv2_backward_np(x, w, gout)


def weighted_ce(logits, labels, weights):
    """Return ``(loss, dloss/dlogits)`` for per-pixel weighted softmax cross-entropy."""
    weights = np.asarray(weights, dtype=logits.dtype)
    labels = np.asarray(labels, dtype=logits.dtype)
    if _BACKEND == "numba":
        total, grad = _weighted_ce_nb(_c(logits), _c(labels), _c(weights))
        return float(total), grad
    return _weighted_ce_np(logits, labels, weights)
