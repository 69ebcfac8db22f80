"""The conditional radiance field: GAT block, skip backbone and output heads.

Pipeline per point::

    x = [PE(p) || delta || gamma]                      (d_in)
    h = gat_forward(x)                                 (d_model)
    h = relu(L2(relu(L1(h))))                          (width)
    h = relu(L5(relu(L4(relu(L3([h || x]))))))         (width)
    feat = feat_proj(h)
    sigma = relu(density_head(feat))
    rgb = sigmoid(color_mlp([feat || PE(v)]))
"""

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import FieldConfig, GatConfig, PEConfig
from .encoding import encoded_width, positional_encode
from .gat import GatParams, fuse_parts, gat_forward, init_gat, project
from .params import Linear, init_linear

UNIT_TOL = 1e-6
# the density head starts at a constant positive density: a negative raw output
# at init leaves relu(density) with no gradient, ever
DENSITY_BIAS_INIT = 0.1


@dataclass
class FieldSpec:
    """Static shape information carried alongside the weights."""

    pe: PEConfig
    field: FieldConfig

    @property
    def pe_width(self):
        return encoded_width(self.pe.bands_position, self.pe.include_input)

    @property
    def dir_width(self):
        return encoded_width(self.pe.bands_direction, self.pe.include_input)

    @property
    def d_in(self):
        return self.pe_width + self.field.delta_dim + self.field.latent_dim


@dataclass
class FieldParams:
    gat: GatParams
    backbone: list  # five Linear layers; index 2 takes the skip input
    feat_proj: Linear
    density: Linear
    color: list  # four Linear layers
    spec: FieldSpec = None


@dataclass
class LatentTable:
    codes: dc.Tensor  # (frames, latent_dim)

    def __len__(self):
        return self.codes.shape[0]

    def row(self, i):
        return dc.getitem(self.codes, slice(i, i + 1))


def init_field(pe_cfg, gat_cfg, field_cfg, rng, dtype=np.float32):
    spec = FieldSpec(pe_cfg, field_cfg)
    w, cw, d_in = field_cfg.width, field_cfg.color_width, spec.d_in
    gat = init_gat(gat_cfg, d_in, rng, dtype=dtype)
    if not field_cfg.use_gat:
        # "w/o GAT": only the input projection survives
        gat.layers = []
    backbone = [
        init_linear(rng, gat_cfg.d_model, w, dtype=dtype),
        init_linear(rng, w, w, dtype=dtype),
        init_linear(rng, w + d_in, w, dtype=dtype),
        init_linear(rng, w, w, dtype=dtype),
        init_linear(rng, w, w, dtype=dtype),
    ]
    feat_proj = init_linear(rng, w, w, dtype=dtype)
    density = init_linear(rng, w, 1, dtype=dtype)
    density.weight.data[...] = 0
    density.bias.data[...] = DENSITY_BIAS_INIT
    color_in = w + (spec.dir_width if field_cfg.view_dependent else 0)
    color = [
        init_linear(rng, color_in, cw, dtype=dtype),
        init_linear(rng, cw, cw, dtype=dtype),
        init_linear(rng, cw, cw, dtype=dtype),
        init_linear(rng, cw, 3, dtype=dtype),
    ]
    return FieldParams(gat, backbone, feat_proj, density, color, spec)


def init_latents(frames, dim, rng, std=0.01, dtype=np.float32, trainable=True):
    codes = rng.normal(0.0, std, size=(frames, dim)) if std > 0 else np.zeros((frames, dim))
    return LatentTable(dc.Tensor(codes, requires_grad=trainable, dtype=dtype))


def skip_parts(h2, x, d_in):
    """Blocks of ``[h2 || x]``; ``x`` is the raw fused input, whole or as ``fuse_parts``."""
    x = list(x) if isinstance(x, (list, tuple)) else [x]
    width = sum(p.shape[-1] for p in x)
    if width != d_in:
        raise dc.DimensionError(f"skip_concat: expected the raw {d_in}-wide fused input, got width {width}")
    return [h2, *x]


def skip_concat(h2, x_concat, d_in):
    """``[h2 || x_concat]`` where ``x_concat`` is the raw fused input."""
    return dc.concat(skip_parts(h2, x_concat, d_in), axis=-1)


def _dense(x, layer, act=True):
    if isinstance(x, list):
        return dc.linear_cat(x, layer.weight, layer.bias, relu=act)
    return dc.linear(x, layer.weight, layer.bias, relu=act)


def check_directions(dirs):
    norms = np.linalg.norm(np.asarray(dirs, dtype=np.float64), axis=-1)
    if np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise ValueError(f"directions must be unit length (max deviation {np.max(np.abs(norms - 1.0)):.2e})")


def fused_parts(params, points, delta, gamma):
    """``[PE(p), delta, gamma]`` blocks; the shared rows are not tiled over the batch."""
    spec = params.spec
    dtype = params.feat_proj.weight.dtype
    pe_p = dc.Tensor(positional_encode(points, spec.pe.bands_position, spec.pe.include_input), dtype=dtype)
    # plain arrays follow the weights' precision; tensors (latent rows) keep their graph
    delta, gamma = (v if isinstance(v, dc.Tensor) else np.asarray(v, dtype=dtype) for v in (delta, gamma))
    return fuse_parts(pe_p, delta, gamma, dims=(spec.pe_width, spec.field.delta_dim, spec.field.latent_dim))


def query(params, points, dirs, delta, gamma, view_dependent=None, return_raw=False):
    """Evaluate colour (batch, 3) and density (batch, 1) at ``points``.

    ``delta`` and ``gamma`` are single rows shared by the whole batch (or
    already batch-shaped).  ``gamma`` may be a tensor row of the latent table
    so gradients reach it.
    """
    spec = params.spec
    if view_dependent is None:
        view_dependent = spec.field.view_dependent
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != 3:
        raise dc.DimensionError(f"points must be (batch, 3), got {points.shape}")
    if view_dependent:
        dirs = np.asarray(dirs)
        if dirs.shape != points.shape:
            raise dc.DimensionError(f"directions {dirs.shape} do not match points {points.shape}")
        check_directions(dirs)
    dtype = params.feat_proj.weight.dtype

    x = fused_parts(params, points, delta, gamma)
    h = gat_forward(x, params.gat) if params.gat.layers else project(x, params.gat)
    bb = params.backbone
    h = _dense(h, bb[0])
    h = _dense(h, bb[1])
    h = _dense(skip_parts(h, x, spec.d_in), bb[2])
    h = _dense(h, bb[3])
    h = _dense(h, bb[4])
    feat = _dense(h, params.feat_proj, act=False)
    raw_sigma = _dense(feat, params.density, act=False)
    sigma = dc.relu(raw_sigma)

    if view_dependent:
        pe_v = dc.Tensor(positional_encode(dirs, spec.pe.bands_direction, spec.pe.include_input), dtype=dtype)
        c = [feat, pe_v]
    else:
        c = feat
    c = _dense(c, params.color[0])
    c = _dense(c, params.color[1])
    c = _dense(c, params.color[2])
    rgb = dc.sigmoid(_dense(c, params.color[3], act=False))
    if return_raw:
        return rgb, sigma, raw_sigma
    return rgb, sigma
