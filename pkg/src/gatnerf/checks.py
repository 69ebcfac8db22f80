"""Finite-difference gradient suite over every differentiable op and the full network.

Each check builds a scalar from one op (a fixed random projection of its
output) and compares the tape gradient with central differences in float64.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import resolve
from .field import init_field, init_latents, query
from .params import parameters
from .renderer import _eval_field, composite, importance_sample, stratified_sample
from .trainer import loss as total_loss

TOLERANCE = 1e-4
STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_error: float
    coords: int
    seconds: float

    @property
    def passed(self):
        return self.max_error < TOLERANCE


def _leaf(rng, shape, away_from_zero=False):
    x = rng.normal(size=shape)
    if away_from_zero:
        # keep relu/abs kinks farther than the FD step
        x = np.where(np.abs(x) < 0.05, np.sign(x) * 0.05 + x, x)
    return dc.Tensor(x, requires_grad=True, dtype=np.float64)


def _projected(out, rng):
    proj = rng.normal(size=out.shape)
    return lambda o: dc.sum(dc.mul(o, proj))


def _op_cases(rng):
    """``name -> (fn producing an output tensor, leaves)``."""
    a, b = _leaf(rng, (4, 5)), _leaf(rng, (4, 5))
    row = _leaf(rng, (5,))
    m1, m2 = _leaf(rng, (3, 4)), _leaf(rng, (4, 6))
    b1, b2 = _leaf(rng, (2, 3, 2, 4)), _leaf(rng, (2, 3, 4, 2))
    x, w, bias = _leaf(rng, (6, 4)), _leaf(rng, (4, 3)), _leaf(rng, (3,))
    c1, c2 = _leaf(rng, (3, 2)), _leaf(rng, (3, 4))
    pos = _leaf(rng, (5, 4), away_from_zero=True)
    w2 = _leaf(rng, (4, 3))
    cat_rows, cat_w = _leaf(rng, (1, 2)), _leaf(rng, (6, 3))
    sm = _leaf(rng, (3, 5))
    ln_x = _leaf(rng, (6, 8))
    ln_g, ln_b = _leaf(rng, (8,)), _leaf(rng, (8,))
    e = _leaf(rng, (1, 4))
    sig = dc.Tensor(rng.uniform(0.2, 3.0, size=(3, 7)), requires_grad=True, dtype=np.float64)
    col = dc.Tensor(rng.uniform(0.1, 0.9, size=(3, 7, 3)), requires_grad=True, dtype=np.float64)
    t = np.sort(rng.uniform(0.0, 1.0, size=(3, 7)), axis=1)
    return {
        "add": (lambda: dc.add(a, row), [a, row]),
        "sub": (lambda: dc.sub(a, b), [a, b]),
        "mul": (lambda: dc.mul(a, row), [a, row]),
        "matmul": (lambda: dc.matmul(m1, m2), [m1, m2]),
        "bmm": (lambda: dc.bmm(b1, b2), [b1, b2]),
        "transpose": (lambda: dc.transpose(b1, (0, 2, 1, 3)), [b1]),
        "linear": (lambda: dc.linear(x, w, bias), [x, w, bias]),
        "linear_relu": (lambda: dc.linear(pos, w2, bias, relu=True), [pos, w2, bias]),
        "linear_cat": (lambda: dc.linear_cat([pos[:, :2], cat_rows, x[:5, :2]], cat_w, bias, relu=True),
                       [pos, cat_rows, x, cat_w, bias]),
        "concat": (lambda: dc.concat([c1, c2], axis=-1), [c1, c2]),
        "slice": (lambda: dc.getitem(a, (slice(1, 3), [0, 2, 2])), [a]),
        "reshape": (lambda: dc.reshape(a, (2, 10)), [a]),
        "expand": (lambda: dc.expand(e, (3, 4)), [e]),
        "sum": (lambda: dc.sum(a, axis=0), [a]),
        "mean": (lambda: dc.mean(a, axis=1), [a]),
        "exp": (lambda: dc.exp(a), [a]),
        "relu": (lambda: dc.relu(pos), [pos]),
        "sigmoid": (lambda: dc.sigmoid(a), [a]),
        "softmax": (lambda: dc.softmax(sm, axis=-1), [sm]),
        "square_norm": (lambda: dc.square_norm(a), [a]),
        "layernorm": (lambda: dc.layernorm(ln_x, ln_g, ln_b), [ln_x, ln_g, ln_b]),
        "composite": (lambda: composite(sig, col, t, (0.2, 0.5, 0.9), t_far=1.2)[0], [sig, col]),
    }


def check_op(name, fn, leaves, rng):
    with dc.no_grad():
        proj = _projected(fn(), rng)
    t0 = time.perf_counter()
    err = dc.gradient_check(lambda: proj(fn()), leaves, step=STEP)
    coords = int(sum(p.data.size for p in leaves))
    return CheckResult(name, err, coords, time.perf_counter() - t0)


def network_case(preset="desk", rays=4, seed=0):
    """Scalar training loss of a tiny ray batch through coarse and fine fields.

    Fine depths are computed once and then frozen: importance sampling is
    not differentiated through, so finite differences must not move them.
    """
    cfg = resolve(preset)
    rng = np.random.default_rng(seed)
    coarse = init_field(cfg.pe, cfg.gat, cfg.field, rng, dtype=np.float64)
    fine = init_field(cfg.pe, cfg.gat, cfg.field, rng, dtype=np.float64)
    for params in (coarse, fine):
        # the density head starts at zero weights; randomize it so the check covers that path
        w = params.density.weight.data
        w[...] = rng.uniform(-1, 1, size=w.shape) / np.sqrt(w.shape[0])
    latents = init_latents(3, cfg.field.latent_dim, rng, std=0.1, dtype=np.float64)
    delta = rng.normal(size=cfg.field.delta_dim)
    origins = np.tile([0.0, 0.0, 2.6], (rays, 1)) + rng.normal(scale=0.05, size=(rays, 3))
    dirs = np.column_stack([rng.normal(scale=0.1, size=(rays, 2)), -np.ones(rays)])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    target = rng.uniform(size=(rays, 3))
    near, far = np.full(rays, 1.4), np.full(rays, 3.8)
    t_c = stratified_sample(near, far, cfg.render.n_coarse, rays=rays)
    bg = cfg.render.background
    lam = cfg.train.lambda_gamma
    state = {}

    def field(params, gamma):
        return lambda p, d: query(params, p, d, delta, gamma)

    def f():
        gamma = latents.row(1)
        rgb_c, sig_c = _eval_field(field(coarse, gamma), t_c, origins, dirs, np.float64)
        col_c, w_c, _ = composite(sig_c, rgb_c, t_c, bg)
        if "t_fine" not in state:
            state["t_fine"] = importance_sample(w_c, t_c, cfg.render.n_fine)
        rgb_f, sig_f = _eval_field(field(fine, gamma), state["t_fine"], origins, dirs, np.float64)
        col_f, _, _ = composite(sig_f, rgb_f, state["t_fine"], bg)
        return total_loss(col_c, col_f, target, gamma, lam)

    leaves = parameters(coarse) + parameters(fine) + [latents.codes]
    return f, leaves


def check_network(n_coords=100, preset="desk", seed=0):
    f, leaves = network_case(preset, seed=seed)
    t0 = time.perf_counter()
    err = dc.gradient_check(f, leaves, step=STEP, n_coords=n_coords, rng=np.random.default_rng(seed + 1))
    return CheckResult("network", err, n_coords, time.perf_counter() - t0)


def run_suite(n_coords=100, preset="desk", seed=0, ops=None):
    """All op checks followed by the full-network check, as CheckResults."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, leaves) in _op_cases(rng).items():
        if ops is None or name in ops:
            results.append(check_op(name, fn, leaves, rng))
    if ops is None or "network" in ops:
        results.append(check_network(n_coords, preset, seed))
    return results


def format_report(results):
    lines = [f"{'check':<12} {'coords':>7} {'max rel err':>12} {'time':>7}  status"]
    for r in results:
        status = "ok" if r.passed else "FAIL"
        lines.append(f"{r.name:<12} {r.coords:>7} {r.max_error:>12.3e} {r.seconds:>6.2f}s  {status}")
    return "\n".join(lines)
