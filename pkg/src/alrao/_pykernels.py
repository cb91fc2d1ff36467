"""Pure-numpy versions of the hot kernels (reference and fallback)."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw):
    """(N, C, H, W) -> (N*OH*OW, C*kh*kw), valid windows, stride 1."""
    n, c, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N, C, OH, OW, kh, kw
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)


def col2im(cols, shape, kh, kw):
    n, c, h, w = shape
    oh, ow = h - kh + 1, w - kw + 1
    d = cols.reshape(n, oh, ow, c, kh, kw)
    dx = np.zeros((n, c, h, w))
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + oh, j:j + ow] += d[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return dx


def switch_step(log_wa, log_wb, log_lik, t, theta):
    sigma = 1.0 / (t + 1.0)
    log_pi = -np.log(len(log_wa))
    a = log_wa + log_lik
    b = log_wb + log_lik
    log_pool = np.log(sigma) + _lse(a)
    a = np.logaddexp(a + np.log1p(-sigma), log_pool + np.log(theta) + log_pi)
    b = np.logaddexp(b, log_pool + np.log1p(-theta) + log_pi)
    z = _lse(np.concatenate([a, b]))
    return a - z, b - z


def _lse(v):
    mx = np.max(v)
    if mx == -np.inf:
        return mx
    return mx + np.log(np.sum(np.exp(v - mx)))
