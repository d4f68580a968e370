"""Hot inner loops of the tensor engine.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy
version.  The numba path is used when numba imports and the environment
variable ``SGCN_NUMBA`` is not set to ``0``/``false``/``off``.  Both paths
produce identical results up to floating point summation order; the
dispatch functions at the bottom of this module are what the rest of the
package calls.

``set_backend`` switches at runtime (used by tests and the benchmark).
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]
        return lambda f: f


def _env_wants_numba():
    flag = os.environ.get("SGCN_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


_USE_NUMBA = HAVE_NUMBA and _env_wants_numba()


def backend():
    """Name of the active kernel backend, ``"numba"`` or ``"numpy"``."""
    return "numba" if _USE_NUMBA else "numpy"


def set_backend(name):
    """Select the kernel backend; returns the previous one."""
    global _USE_NUMBA
    previous = backend()
    if name == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba is not installed")
        _USE_NUMBA = True
    elif name == "numpy":
        _USE_NUMBA = False
    else:
        raise ValueError(f"unknown backend {name!r}")
    return previous


# ---------------------------------------------------------------------------
# Temporal convolution: kernel (O, C, K) sliding along T of a zero-padded
# (B, C, Tp, V) input with stride along T only.  Both backends lower it to
# im2col plus BLAS matrix products; only the gather (im2col) and its
# adjoint scatter (col2im) differ.  Column layout:
#   cols[b, c * K + i, t * V + v] = xp[b, c, t * stride + i, v]
# ---------------------------------------------------------------------------


@njit(cache=True)
def _im2col_nb(xp, K, stride, t_out):
    B, C, Tp, V = xp.shape
    n = t_out * V
    xf = xp.reshape(B, C, Tp * V)
    cols = np.empty((B, C * K, n))
    for b in range(B):
        for c in range(C):
            src = xf[b, c]
            for i in range(K):
                dst = cols[b, c * K + i]
                for t in range(t_out):
                    s0 = (t * stride + i) * V
                    d0 = t * V
                    for v in range(V):
                        dst[d0 + v] = src[s0 + v]
    return cols


@njit(cache=True)
def _col2im_nb(gcols, C, K, stride, t_out, t_padded, V):
    B = gcols.shape[0]
    gx = np.zeros((B, C, t_padded * V))
    for b in range(B):
        for c in range(C):
            dst = gx[b, c]
            for i in range(K):
                src = gcols[b, c * K + i]
                for t in range(t_out):
                    d0 = (t * stride + i) * V
                    s0 = t * V
                    for v in range(V):
                        dst[d0 + v] += src[s0 + v]
    return gx.reshape(B, C, t_padded, V)


def _tap(xp, i, stride, t_out):
    return xp[:, :, i : i + (t_out - 1) * stride + 1 : stride, :]


def _im2col_np(xp, K, stride, t_out):
    B, C, _, V = xp.shape
    cols = np.empty((B, C, K, t_out, V))
    for i in range(K):
        cols[:, :, i] = _tap(xp, i, stride, t_out)
    return cols.reshape(B, C * K, t_out * V)


def _col2im_np(gcols, C, K, stride, t_out, t_padded, V):
    B = gcols.shape[0]
    gc = gcols.reshape(B, C, K, t_out, V)
    gx = np.zeros((B, C, t_padded, V))
    for i in range(K):
        _tap(gx, i, stride, t_out)[...] += gc[:, :, i]
    return gx


def im2col(xp, K, stride, t_out):
    if _USE_NUMBA:
        return _im2col_nb(_c(xp), K, stride, t_out)
    return _im2col_np(xp, K, stride, t_out)


def col2im(gcols, C, K, stride, t_out, t_padded, V):
    if _USE_NUMBA:
        return _col2im_nb(_c(gcols), C, K, stride, t_out, t_padded, V)
    return _col2im_np(gcols, C, K, stride, t_out, t_padded, V)


def tconv_forward_cols(cols, w, t_out, V):
    O, C, K = w.shape
    return np.matmul(w.reshape(O, C * K), cols).reshape(cols.shape[0], O, t_out, V)


def tconv_backward_weight_cols(g, cols, K):
    B, O, t_out, V = g.shape
    gw = np.matmul(g.reshape(B, O, t_out * V), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(O, -1, K)


def tconv_forward(xp, w, stride, t_out):
    return tconv_forward_cols(im2col(xp, w.shape[2], stride, t_out), w, t_out, xp.shape[3])


def tconv_backward_input(g, w, stride, t_padded):
    B, O, t_out, V = g.shape
    _, C, K = w.shape
    gcols = np.matmul(w.reshape(O, C * K).T, g.reshape(B, O, t_out * V))
    return col2im(gcols, C, K, stride, t_out, t_padded, V)


def tconv_backward_weight(g, xp, stride, K):
    return tconv_backward_weight_cols(g, im2col(xp, K, stride, g.shape[2]), K)


# ---------------------------------------------------------------------------
# Batch normalisation over axes (0, 2, 3) of a (B, C, T, V) array.
# ---------------------------------------------------------------------------


@njit(cache=True)
def _channel_moments_nb(x):
    B, C, T, V = x.shape
    n = B * T * V
    mean = np.zeros(C)
    var = np.zeros(C)
    for c in range(C):
        s = 0.0
        for b in range(B):
            for t in range(T):
                for v in range(V):
                    s += x[b, c, t, v]
        m = s / n
        q = 0.0
        for b in range(B):
            for t in range(T):
                for v in range(V):
                    d = x[b, c, t, v] - m
                    q += d * d
        mean[c] = m
        var[c] = q / n
    return mean, var


def _channel_moments_np(x):
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


@njit(cache=True)
def _bn_backward_nb(g, xhat, inv_std):
    # dL/dx for y = xhat (pre-affine), batch statistics.
    B, C, T, V = g.shape
    n = B * T * V
    dx = np.empty_like(g)
    for c in range(C):
        sg = 0.0
        sgx = 0.0
        for b in range(B):
            for t in range(T):
                for v in range(V):
                    sg += g[b, c, t, v]
                    sgx += g[b, c, t, v] * xhat[b, c, t, v]
        mg = sg / n
        mgx = sgx / n
        for b in range(B):
            for t in range(T):
                for v in range(V):
                    dx[b, c, t, v] = inv_std[c] * (g[b, c, t, v] - mg - xhat[b, c, t, v] * mgx)
    return dx


def _bn_backward_np(g, xhat, inv_std):
    mg = g.mean(axis=(0, 2, 3), keepdims=True)
    mgx = (g * xhat).mean(axis=(0, 2, 3), keepdims=True)
    return inv_std[None, :, None, None] * (g - mg - xhat * mgx)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def channel_moments(x):
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _USE_NUMBA:
        return _channel_moments_nb(x)
    return _channel_moments_np(x)


def bn_backward(g, xhat, inv_std):
    if _USE_NUMBA:
        return _bn_backward_nb(
            np.ascontiguousarray(g), np.ascontiguousarray(xhat), np.ascontiguousarray(inv_std)
        )
    return _bn_backward_np(g, xhat, inv_std)
