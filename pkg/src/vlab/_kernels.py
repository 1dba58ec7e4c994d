"""Row-wise numeric kernels used by the autograd ops.

Every kernel exists twice: a numba ``@njit`` version and a plain numpy
version.  The numba path is used when numba imports and ``VLAB_NUMBA`` is not
set to ``0``.  Both paths take 2-D C-contiguous arrays whose last axis is the
reduction axis, and return freshly allocated outputs.

Call sites must go through the module attribute (``_kernels.softmax_fwd``) so
that :func:`use_backend` can swap implementations at runtime.
"""
import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

GELU_C = math.sqrt(2.0 / math.pi)
NEG_INF = -1e30


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------

def _causal_bias(n_rows, n_cols, tq, dtype):
    # row r is query index r % tq; the last query lines up with the last key
    i = (np.arange(n_rows) % tq)[:, None] + (n_cols - tq)
    j = np.arange(n_cols)[None, :]
    return np.where(j > i, NEG_INF, 0.0).astype(dtype)


def np_softmax_fwd(x, causal_tq=0):
    if causal_tq:
        x = x + _causal_bias(x.shape[0], x.shape[1], causal_tq, x.dtype)
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def np_softmax_bwd(y, dy):
    return y * (dy - (dy * y).sum(axis=1, keepdims=True))


def np_layernorm_fwd(x, gain, bias, eps):
    mean = x.mean(axis=1)
    xc = x - mean[:, None]
    var = (xc * xc).mean(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd[:, None]
    return xhat * gain + bias, mean.astype(x.dtype), rstd.astype(x.dtype)


def np_layernorm_bwd(dy, x, mean, rstd, gain):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    g = dy * gain
    d = x.shape[1]
    dx = (g - g.mean(axis=1, keepdims=True)
          - xhat * (g * xhat).sum(axis=1, keepdims=True) / d) * rstd[:, None]
    return dx, dgain, dbias


def np_gelu_fwd(x):
    # tanh approximation, computed in place in the input dtype
    c = x.dtype.type(GELU_C)
    a = x.dtype.type(0.044715)
    u = x * x
    u *= a
    u += 1
    u *= x
    u *= c
    out = np.tanh(u)
    out += 1
    out *= x
    out *= 0.5
    return out


def np_gelu_bwd(x, dy):
    c = x.dtype.type(GELU_C)
    a = x.dtype.type(0.044715)
    x2 = x * x
    u = a * x2
    u += 1
    u *= x
    u *= c
    t = np.tanh(u)
    du = x2
    du *= 3 * a
    du += 1
    du *= c
    out = t * t
    np.subtract(1, out, out=out)
    out *= du
    out *= x
    out += 1
    out += t
    out *= 0.5
    out *= dy
    return out


def np_xent_fwd(logits, targets, mask):
    """Masked mean NLL. Returns (loss, logsumexp per row)."""
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    picked = logits[np.arange(logits.shape[0]), targets]
    nll = (lse - picked) * mask
    return float(nll.sum() / mask.sum()), lse


def np_xent_bwd(logits, targets, mask, lse, scale):
    p = np.exp(logits - lse[:, None])
    p[np.arange(logits.shape[0]), targets] -= 1.0
    return p * (mask * scale)[:, None]


def np_render_disc(img, cy, cx, radius, r, g, b):
    h, w = img.shape[:2]
    yy = np.arange(h)[:, None] + 0.5
    xx = np.arange(w)[None, :] + 0.5
    inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius
    img[inside] = (r, g, b)


def np_render_box(img, cy, cx, half, r, g, b):
    h, w = img.shape[:2]
    yy = np.arange(h)[:, None] + 0.5
    xx = np.arange(w)[None, :] + 0.5
    inside = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    img[inside] = (r, g, b)


def np_render_tri(img, cy, cx, half, r, g, b):
    # apex up; width grows linearly from apex to base
    h, w = img.shape[:2]
    yy = np.arange(h)[:, None] + 0.5
    xx = np.arange(w)[None, :] + 0.5
    frac = (yy - (cy - half)) / (2 * half)
    inside = (frac >= 0) & (frac <= 1) & (np.abs(xx - cx) <= frac * half)
    img[inside] = (r, g, b)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True, fastmath=True)
    def nb_softmax_fwd(x, causal_tq=0):
        n, d = x.shape
        out = np.empty_like(x)
        for r in range(n):
            limit = d
            if causal_tq:
                limit = (r % causal_tq) + (d - causal_tq) + 1
            m = x[r, 0]
            for j in range(1, limit):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(limit):
                e = math.exp(x[r, j] - m)
                out[r, j] = e
                s += e
            inv = 1.0 / s
            for j in range(limit):
                out[r, j] *= inv
            for j in range(limit, d):
                out[r, j] = 0.0
        return out

    @njit(cache=True, fastmath=True)
    def nb_softmax_bwd(y, dy):
        n, d = y.shape
        out = np.empty_like(y)
        for r in range(n):
            s = 0.0
            for j in range(d):
                s += dy[r, j] * y[r, j]
            for j in range(d):
                out[r, j] = y[r, j] * (dy[r, j] - s)
        return out

    @njit(cache=True, fastmath=True)
    def nb_layernorm_fwd(x, gain, bias, eps):
        n, d = x.shape
        out = np.empty_like(x)
        mean = np.empty(n, dtype=x.dtype)
        rstd = np.empty(n, dtype=x.dtype)
        for r in range(n):
            s = 0.0
            for j in range(d):
                s += x[r, j]
            mu = s / d
            v = 0.0
            for j in range(d):
                c = x[r, j] - mu
                v += c * c
            rs = 1.0 / math.sqrt(v / d + eps)
            mean[r] = mu
            rstd[r] = rs
            for j in range(d):
                out[r, j] = (x[r, j] - mu) * rs * gain[j] + bias[j]
        return out, mean, rstd

    @njit(cache=True, fastmath=True)
    def nb_layernorm_bwd(dy, x, mean, rstd, gain):
        n, d = x.shape
        dx = np.empty_like(x)
        dgain = np.zeros(d, dtype=x.dtype)
        dbias = np.zeros(d, dtype=x.dtype)
        for r in range(n):
            mu = mean[r]
            rs = rstd[r]
            sg = 0.0
            sgx = 0.0
            for j in range(d):
                xh = (x[r, j] - mu) * rs
                g = dy[r, j] * gain[j]
                sg += g
                sgx += g * xh
                dgain[j] += dy[r, j] * xh
                dbias[j] += dy[r, j]
            sg /= d
            sgx /= d
            for j in range(d):
                xh = (x[r, j] - mu) * rs
                dx[r, j] = (dy[r, j] * gain[j] - sg - xh * sgx) * rs
        return dx, dgain, dbias

    # numpy's SIMD float32 tanh is an order of magnitude faster than a jitted
    # loop over libm tanh, so both backends share the vectorised GELU
    nb_gelu_fwd = np_gelu_fwd
    nb_gelu_bwd = np_gelu_bwd

    @njit(cache=True, fastmath=True)
    def _nb_xent_rows(logits, targets, mask):
        n, v = logits.shape
        lse = np.empty(n, dtype=logits.dtype)
        total = 0.0
        for r in range(n):
            m = logits[r, 0]
            for j in range(1, v):
                if logits[r, j] > m:
                    m = logits[r, j]
            s = 0.0
            for j in range(v):
                s += math.exp(logits[r, j] - m)
            lse[r] = m + math.log(s)
            total += (lse[r] - logits[r, targets[r]]) * mask[r]
        return total, lse

    def nb_xent_fwd(logits, targets, mask):
        total, lse = _nb_xent_rows(logits, targets, mask)
        return float(total / mask.sum()), lse

    @njit(cache=True, fastmath=True)
    def nb_xent_bwd(logits, targets, mask, lse, scale):
        n, v = logits.shape
        out = np.empty_like(logits)
        for r in range(n):
            w = mask[r] * scale
            for j in range(v):
                out[r, j] = math.exp(logits[r, j] - lse[r]) * w
            out[r, targets[r]] -= w
        return out

    @njit(cache=True)
    def nb_render_disc(img, cy, cx, radius, r, g, b):
        h, w = img.shape[0], img.shape[1]
        for y in range(h):
            for x in range(w):
                dy = y + 0.5 - cy
                dx = x + 0.5 - cx
                if dy * dy + dx * dx <= radius * radius:
                    img[y, x, 0] = r
                    img[y, x, 1] = g
                    img[y, x, 2] = b

    @njit(cache=True)
    def nb_render_box(img, cy, cx, half, r, g, b):
        h, w = img.shape[0], img.shape[1]
        for y in range(h):
            for x in range(w):
                if abs(y + 0.5 - cy) <= half and abs(x + 0.5 - cx) <= half:
                    img[y, x, 0] = r
                    img[y, x, 1] = g
                    img[y, x, 2] = b

    @njit(cache=True)
    def nb_render_tri(img, cy, cx, half, r, g, b):
        h, w = img.shape[0], img.shape[1]
        for y in range(h):
            frac = (y + 0.5 - (cy - half)) / (2 * half)
            if frac < 0 or frac > 1:
                continue
            for x in range(w):
                if abs(x + 0.5 - cx) <= frac * half:
                    img[y, x, 0] = r
                    img[y, x, 1] = g
                    img[y, x, 2] = b


_NAMES = (
    "softmax_fwd", "softmax_bwd", "layernorm_fwd", "layernorm_bwd",
    "gelu_fwd", "gelu_bwd", "xent_fwd", "xent_bwd",
    "render_disc", "render_box", "render_tri",
)

backend = None


def use_backend(name):
    """Rebind every kernel to the ``"numba"`` or ``"numpy"`` implementation."""
    global backend
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    prefix = "nb_" if name == "numba" else "np_"
    g = globals()
    for n in _NAMES:
        g[n] = g[prefix + n]
    backend = name


def _default_backend():
    flag = os.environ.get("VLAB_NUMBA", "1").strip().lower()
    if flag in ("0", "false", "no", "off") or not HAS_NUMBA:
        return "numpy"
    return "numba"


use_backend(_default_backend())
