"""Pure-numpy implementations of the hot kernels.

These are the reference versions. The compiled ``_ckernels`` extension
exposes the same functions with the same signatures; :mod:`gatnerf.kernels`
picks one at import time.

All functions work on contiguous float32 or float64 arrays and return new
arrays of the same dtype.
"""

import numpy as np

PDF_PADDING = 1e-5


def layernorm_forward(x, gain, bias, eps):
    """Row-wise standardization of a 2-D array followed by an affine map.

    Returns ``(out, xhat, rstd)``; ``xhat`` and ``rstd`` are kept for the
    backward pass.
    """
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain + bias
    return out, xhat, rstd


def layernorm_backward(grad, xhat, rstd, gain):
    dbias = grad.sum(axis=0)
    dgain = np.sum(grad * xhat, axis=0)
    dxhat = grad * gain
    d = xhat.shape[1]
    m1 = dxhat.sum(axis=1, keepdims=True) / d
    m2 = np.sum(dxhat * xhat, axis=1, keepdims=True) / d
    dx = (dxhat - m1 - xhat * m2) * rstd
    return dx, dgain, dbias


def _deltas(t, last_delta):
    deltas = np.empty_like(t)
    deltas[:, :-1] = t[:, 1:] - t[:, :-1]
    deltas[:, -1] = last_delta
    return deltas


def composite_forward(sigma, rgb, t, background, last_delta):
    """Alpha-composite ``R`` rays of ``N`` samples each.

    ``last_delta`` is an array of shape (R,) holding the length of the final
    interval of every ray.  Returns ``(color, weights, trans)`` where
    ``trans[:, i]`` is the transmittance in front of sample ``i``.
    """
    deltas = _deltas(t, last_delta)
    keep = np.exp(-sigma * deltas)
    alpha = 1.0 - keep
    trans = np.empty_like(sigma)
    trans[:, 0] = 1.0
    if sigma.shape[1] > 1:
        trans[:, 1:] = np.cumprod(keep[:, :-1], axis=1)
    weights = trans * alpha
    acc = weights.sum(axis=1)
    color = np.einsum("rn,rnc->rc", weights, rgb) + (1.0 - acc)[:, None] * background
    return color, weights, trans


def composite_backward(grad_color, sigma, rgb, t, background, weights, trans, last_delta):
    """Adjoint of :func:`composite_forward` w.r.t. ``sigma`` and ``rgb``."""
    deltas = _deltas(t, last_delta)
    s = np.einsum("rc,rnc->rn", grad_color, rgb) - (grad_color @ background)[:, None]
    ws = weights * s
    # sum over samples strictly behind k
    behind = np.cumsum(ws[:, ::-1], axis=1)[:, ::-1] - ws
    trans_after = trans - weights
    dsigma = deltas * (trans_after * s - behind)
    drgb = weights[:, :, None] * grad_color[:, None, :]
    return dsigma, drgb


def sample_pdf(edges, weights, u):
    """Inverse-CDF sampling of a piecewise-constant density per row.

    ``edges`` is (R, M+1), ``weights`` is (R, M) and non-negative, ``u`` is
    (R, S) in [0, 1).  Every weight is padded by ``PDF_PADDING`` before
    normalization, so all-zero rows degrade to uniform sampling.
    """
    rows, m = weights.shape
    pdf = weights + PDF_PADDING
    pdf = pdf / pdf.sum(axis=1, keepdims=True)
    cdf = np.zeros((rows, m + 1), dtype=weights.dtype)
    np.cumsum(pdf, axis=1, out=cdf[:, 1:])
    cdf[:, -1] = 1.0
    # row offsets turn the per-row search into one flat searchsorted call
    offsets = 2.0 * np.arange(rows, dtype=np.float64)[:, None]
    flat = (cdf + offsets).ravel()
    pos = np.searchsorted(flat, (u + offsets).ravel(), side="right").reshape(u.shape)
    idx = pos - 1 - (m + 1) * np.arange(rows)[:, None]
    idx = np.clip(idx, 0, m - 1)
    lo = np.take_along_axis(cdf, idx, axis=1)
    hi = np.take_along_axis(cdf, idx + 1, axis=1)
    span = hi - lo
    span = np.where(span > 0, span, 1.0)
    frac = np.clip((u - lo) / span, 0.0, 1.0)
    e0 = np.take_along_axis(edges, idx, axis=1)
    e1 = np.take_along_axis(edges, idx + 1, axis=1)
    return (e0 + frac * (e1 - e0)).astype(weights.dtype, copy=False)

