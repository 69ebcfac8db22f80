"""Sinusoidal positional encoding of 3-vectors."""

import numpy as np


def encoded_width(bands, include_input=True):
    return (3 if include_input else 0) + 6 * bands


def positional_encode(x, bands, include_input=True):
    """Lift points ``x`` (..., 3) to ``[x, sin(2^k pi x), cos(2^k pi x)]``.

    The layout per frequency ``k = 0 .. bands-1`` is ``sin`` of all three
    components followed by ``cos`` of all three, after the raw input.  A
    single point encodes component ``j`` at offsets ``j``, ``3 + 6k + j`` and
    ``6 + 6k + j``.
    """
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    if x.shape[-1] != 3:
        raise ValueError(f"positional_encode expects (..., 3) input, got {x.shape}")
    if bands < 0:
        raise ValueError("bands must be >= 0")
    if not np.all(np.isfinite(x)):
        raise ValueError("positional_encode: input contains non-finite values")
    lead = x.shape[:-1]
    start = 3 if include_input else 0
    out = np.empty(lead + (start + 6 * bands,), dtype=x.dtype)
    if include_input:
        out[..., :3] = x
    if bands:
        # (..., band, sin|cos, component) is the flat layout above
        arg = x[..., None, :] * (np.pi * 2.0 ** np.arange(bands, dtype=x.dtype))[:, None]
        view = out[..., start:].reshape(lead + (bands, 2, 3))
        np.sin(arg, out=view[..., 0, :])
        np.cos(arg, out=view[..., 1, :])
    return out
