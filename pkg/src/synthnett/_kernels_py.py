"""Pure numpy versions of the im2col / col2im kernels.

Used whenever the compiled extension is unavailable, or when
``SYNTHNETT_PURE_PYTHON=1`` is set.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(xp, k, stride):
    """Unfold a padded (B, C, Hp, Wp) array into (B*Ho*Wo, C*k*k) patch rows."""
    B, C, Hp, Wp = xp.shape
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : stride * Ho : stride, : stride * Wo : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * k * k)


def col2im(cols, B, C, Hp, Wp, k, stride):
    """Scatter-add patch rows back into a zero-initialised (B, C, Hp, Wp) array."""
    Ho = (Hp - k) // stride + 1
    Wo = (Wp - k) // stride + 1
    if cols.shape != (B * Ho * Wo, C * k * k):
        raise ValueError("cols shape does not match the requested geometry")
    patches = cols.reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((B, C, Hp, Wp), dtype=np.float64)
    for u in range(k):
        for v in range(k):
            out[:, :, u : u + stride * Ho : stride, v : v + stride * Wo : stride] += patches[:, :, u, v]
    return out
