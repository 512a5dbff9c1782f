"""Pure-numpy convolution kernel, used when the compiled extension is unavailable."""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_nchw(x, w, sh, sw, groups):
    """Grouped cross-correlation of an already padded float64 input.

    ``x`` is N x C x Hp x Wp, ``w`` is D x (C/groups) x Kh x Kw.  Returns a
    fresh C-contiguous N x D x Ho x Wo array with no bias applied.
    """
    n, c, _, _ = x.shape
    d, cg, kh, kw = w.shape
    # (N, C, Ho, Wo, Kh, Kw) view; strided so no copy until the contraction
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    ho, wo = win.shape[2], win.shape[3]
    dg = d // groups
    out = np.empty((n, d, ho, wo))
    for g in range(groups):
        wg = w[g * dg:(g + 1) * dg]
        xg = win[:, g * cg:(g + 1) * cg]
        # -> (N, Ho, Wo, Dg)
        r = np.tensordot(xg, wg, axes=([1, 4, 5], [1, 2, 3]))
        out[:, g * dg:(g + 1) * dg] = r.transpose(0, 3, 1, 2)
    return out
