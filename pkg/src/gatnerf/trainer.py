"""Joint optimization of the coarse/fine fields and per-frame latent codes."""

import csv
import logging
import math
import os
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from . import diffcore as dc
from .allocator import tune_for_reuse
from .config import Config
from .field import init_field, init_latents
from .metrics import psnr, ssim, l1
from .params import named_tensors
from .renderer import generate_rays, network_field, render_image, render_rays

log = logging.getLogger(__name__)

LOG_HEADER = ("iter", "loss", "psnr", "ssim", "l1")
LOG_WINDOW = 100
INIT_NOTE = ("uniform(+-sqrt(1/fan_in)); density head weight 0 bias 0.1; layernorm gain 1 bias 0; "
             "latent normal(0, std)")


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss or gradient."""

    def __init__(self, iteration, checkpoint_path=None):
        msg = f"non-finite loss or gradient at iteration {iteration}"
        if checkpoint_path:
            msg += f"; last checkpoint kept at {checkpoint_path}"
        super().__init__(msg)
        self.iteration = iteration
        self.checkpoint_path = checkpoint_path


class Adam:
    """Bias-corrected Adam over a fixed, ordered list of named tensors."""

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.names = [n for n, _ in named_params]
        self.params = [p for _, p in named_params]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        missing = [n for n, p in zip(self.names, self.params) if p.grad is None]
        if missing:
            raise RuntimeError(f"adam_step: no gradient for {', '.join(missing[:5])}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Functional form on plain arrays; ``state`` is ``{"m", "v", "t"}``."""
    if any(g is None for g in grads):
        raise RuntimeError("adam_step: missing gradient")
    if not state:
        state.update(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], t=0)
    state["t"] += 1
    t = state["t"]
    out = []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        out.append(p - lr * (m / (1.0 - beta1**t)) / (np.sqrt(v / (1.0 - beta2**t)) + eps))
    return out


@dataclass
class TrainState:
    config: Config
    coarse: object
    fine: object
    latents: object
    frame_ids: list  # dataset frame index for each latent row
    optimizer: Adam
    rng: np.random.Generator
    iteration: int = 0

    def latent_for(self, frame_index):
        """Latent code array for a frame; unseen frames get the mean code."""
        codes = self.latents.codes.data
        if frame_index in self.frame_ids:
            return codes[self.frame_ids.index(frame_index)]
        return codes.mean(axis=0)


def _field_tensors(params, prefix):
    return list(named_tensors(params, prefix))


def model_tensors(state):
    """Ordered (name, tensor) pairs of every learnable weight."""
    named = _field_tensors(state.coarse, "coarse") + _field_tensors(state.fine, "fine")
    named.append(("latent.codes", state.latents.codes))
    return named


def build_state(cfg, frame_ids, dtype=np.float32):
    """Fresh parameters, latent table, optimizer and RNG for ``cfg``."""
    init_rng = np.random.default_rng([cfg.train.seed, 0])
    coarse = init_field(cfg.pe, cfg.gat, cfg.field, init_rng, dtype=dtype)
    fine = init_field(cfg.pe, cfg.gat, cfg.field, init_rng, dtype=dtype)
    std = cfg.train.latent_init_std if cfg.field.use_latent else 0.0
    latents = init_latents(len(frame_ids), cfg.field.latent_dim, init_rng, std=std, dtype=dtype,
                           trainable=cfg.field.use_latent)
    state = TrainState(cfg, coarse, fine, latents, list(frame_ids), None,
                       np.random.default_rng([cfg.train.seed, 1]))
    trainable = [(n, t) for n, t in model_tensors(state) if t.requires_grad]
    state.optimizer = Adam(trainable, cfg.train.beta1, cfg.train.beta2, cfg.train.adam_eps)
    return state


# ---------------------------------------------------------------------------
# batches and loss


def sample_ray_batch(frame, batch, fraction, rng):
    """Pick ``batch`` pixels: ``ceil(fraction * batch)`` inside the frame's box.

    Returns ``(pixels (B, 2) float centres, targets (B, 3))``.
    """
    cam = frame.camera
    x0, y0, x1, y1 = frame.box
    n_box = math.ceil(fraction * batch)
    if n_box and (x1 <= x0 or y1 <= y0):
        warnings.warn(f"frame {frame.index}: empty foreground box; sampling the whole image")
        n_box = 0
    n_all = batch - n_box
    cols = np.concatenate([rng.integers(x0, x1, n_box) if n_box else np.empty(0, int),
                           rng.integers(0, cam.width, n_all)])
    rows = np.concatenate([rng.integers(y0, y1, n_box) if n_box else np.empty(0, int),
                           rng.integers(0, cam.height, n_all)])
    pixels = np.stack([cols + 0.5, rows + 0.5], axis=1)
    targets = frame.image[rows, cols]
    return pixels, targets


def photometric_loss(rendered, target):
    """Sum over rays of squared colour error."""
    return dc.square_norm(dc.sub(rendered, target))


def loss(coarse, fine, target, gamma=None, lambda_gamma=0.05):
    """Photometric terms of both passes plus ``lambda_gamma * ||gamma||^2``."""
    target = dc.as_tensor(target, like=coarse)
    total = dc.add(photometric_loss(coarse, target), photometric_loss(fine, target))
    if gamma is not None and lambda_gamma > 0:
        total = dc.add(total, dc.mul(dc.square_norm(gamma), lambda_gamma))
    return total


# ---------------------------------------------------------------------------
# rendering helpers


def frame_gamma(state, frame_index, gamma=None):
    if gamma is not None:
        return np.asarray(gamma, dtype=state.latents.codes.dtype)
    if not state.config.field.use_latent:
        return np.zeros(state.config.field.latent_dim, dtype=state.latents.codes.dtype)
    return state.latent_for(frame_index)


def render_view(state, camera, delta, gamma, near, far, threads=None, pass_name="fine"):
    """Deterministic (jitter-free) render with frozen weights."""
    dtype = state.coarse.feat_proj.weight.dtype
    fc = network_field(state.coarse, np.asarray(delta, dtype=dtype), gamma)
    ff = network_field(state.fine, np.asarray(delta, dtype=dtype), gamma)
    return render_image(camera, fc, ff, state.config.render, near, far, threads=threads,
                        dtype=dtype, pass_name=pass_name)


def render_frame(state, frame, manifest, gamma=None, delta=None, camera=None, threads=None):
    g = frame_gamma(state, frame.index, gamma)
    d = frame.delta if delta is None else delta
    cam = frame.camera if camera is None else camera
    return render_view(state, cam, d, g, manifest.t_near, manifest.t_far, threads=threads)


def evaluate(state, dataset, frames, threads=None):
    from .dataio import quantize

    scores = []
    for f in frames:
        pred = quantize(render_frame(state, f, dataset.manifest, threads=threads)) / 255.0
        scores.append((psnr(pred, f.image), ssim(pred, f.image), l1(pred, f.image)))
    return tuple(float(np.mean(col)) for col in zip(*scores))


# ---------------------------------------------------------------------------
# training


def train_step(state, frames, manifest):
    """One optimization step on a random training frame; returns the loss."""
    cfg = state.config
    rng = state.rng
    k = int(rng.integers(len(frames)))
    frame = frames[k]
    row = state.frame_ids.index(frame.index)
    pixels, targets = sample_ray_batch(frame, cfg.train.ray_batch, cfg.train.foreground_fraction, rng)
    origins, dirs = generate_rays(frame.camera, pixels)
    b = origins.shape[0]
    jitter = cfg.render.stratified
    u_c = rng.random((b, cfg.render.n_coarse)) if jitter else None
    u_f = rng.random((b, cfg.render.n_fine)) if jitter else None

    dtype = state.coarse.feat_proj.weight.dtype
    delta = np.asarray(frame.delta, dtype=dtype)
    gamma = state.latents.row(row)
    try:
        out = render_rays(origins, dirs, manifest.t_near, manifest.t_far,
                          network_field(state.coarse, delta, gamma), network_field(state.fine, delta, gamma),
                          cfg.render, u_c, u_f, dtype=dtype)
    except FloatingPointError:
        # non-finite coarse weights cannot be importance-sampled
        dc.clear_graph()
        raise NumericAbort(state.iteration) from None
    lam = cfg.train.lambda_gamma if cfg.field.use_latent else 0.0
    total = loss(out["coarse"], out["fine"], targets.astype(dtype), gamma if cfg.field.use_latent else None, lam)
    value = float(total.data)
    if not math.isfinite(value):
        dc.clear_graph()
        raise NumericAbort(state.iteration)
    state.optimizer.zero_grad()
    dc.backward(total)
    for p in state.optimizer.params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericAbort(state.iteration)
    state.optimizer.step(cfg.train.lr)
    state.iteration += 1
    return value


def _append_log(path, rows, fresh):
    mode = "w" if fresh else "a"
    with open(path, mode, newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(LOG_HEADER)
        for r in rows:
            writer.writerow(r)


def train(dataset, cfg=None, out_dir=None, state=None, callbacks=(), iterations=None,
          eval_frames=None, threads=None):
    """Run (or resume) training; returns ``(state, log_rows)``.

    Each log row is ``(iter, mean window loss, psnr, ssim, l1)`` with the
    metric columns filled on evaluation iterations only.
    """
    frames = dataset.train
    if not frames:
        raise ValueError("dataset has no training frames")
    tune_for_reuse()
    if state is None:
        state = build_state(cfg, [f.index for f in frames])
    cfg = state.config
    total_iters = cfg.train.iterations if iterations is None else iterations
    if eval_frames is None:
        held = dataset.test or frames
        eval_frames = held[: max(1, cfg.train.eval_frames)]

    log_path = ckpt_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "metrics.csv")
        ckpt_path = os.path.join(out_dir, "checkpoint.gatn")
        _append_log(log_path, [], fresh=state.iteration == 0 or not os.path.exists(log_path))

    rows, window = [], []
    saved = None
    t0 = time.perf_counter()
    while state.iteration < total_iters:
        try:
            value = train_step(state, frames, dataset.manifest)
        except NumericAbort as exc:
            raise NumericAbort(exc.iteration, saved) from None
        window.append(value)
        it = state.iteration
        for cb in callbacks:
            cb(state, value)
        at_eval = cfg.train.eval_every and it % cfg.train.eval_every == 0
        if it % LOG_WINDOW == 0 or at_eval or it == total_iters:
            row = [it, float(np.mean(window)) if window else float("nan"), "", "", ""]
            window = []
            if at_eval:
                p, s, e = evaluate(state, dataset, eval_frames, threads=threads)
                row[2:] = [p, s, e]
                log.info("iter %d loss %.5f psnr %.2f ssim %.4f (%.1fs)", it, row[1], p, s, time.perf_counter() - t0)
            rows.append(tuple(row))
            if log_path:
                _append_log(log_path, [row], fresh=False)
        if ckpt_path and (it % cfg.train.checkpoint_every == 0 or it == total_iters):
            save_checkpoint(state, ckpt_path)
            saved = ckpt_path
    return state, rows


# ---------------------------------------------------------------------------
# checkpoints


def _header(state):
    cfg = state.config
    return {
        "config": cfg.to_dict(),
        "iteration": state.iteration,
        "adam_step": state.optimizer.t,
        "ablation": cfg.field.ablation,
        "frame_ids": state.frame_ids,
        "precision": str(state.latents.codes.dtype),
        "init": INIT_NOTE,
    }


def save_checkpoint(state, path):
    tensors = [(n, t.data) for n, t in model_tensors(state)]
    opt = state.optimizer
    tensors += [(f"adam.m.{n}", m) for n, m in zip(opt.names, opt.m)]
    tensors += [(f"adam.v.{n}", v) for n, v in zip(opt.names, opt.v)]
    ckpt.write(path, _header(state), tensors, state.rng.bit_generator.state)


def load_checkpoint(path):
    """Rebuild a :class:`TrainState` from ``path``."""
    header, tensors, rng_state = ckpt.read(path)
    try:
        cfg = Config.from_dict(header["config"]).validate()
        frame_ids = [int(i) for i in header["frame_ids"]]
        iteration = int(header["iteration"])
        adam_t = int(header["adam_step"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ckpt.CheckpointError(f"checkpoint header incomplete ({exc})") from None
    state = build_state(cfg, frame_ids)
    stored = dict(tensors)
    if len(stored) != len(tensors):
        raise ckpt.CheckpointError("duplicate tensor names")
    expected = {n: t for n, t in model_tensors(state)}
    opt = state.optimizer
    for i, n in enumerate(opt.names):
        expected[f"adam.m.{n}"] = opt.m[i]
        expected[f"adam.v.{n}"] = opt.v[i]
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))[:3]
        extra = sorted(set(stored) - set(expected))[:3]
        raise ckpt.CheckpointError(f"tensor set mismatch (missing {missing}, unexpected {extra})")
    for name, target in expected.items():
        arr = stored[name]
        data = target.data if isinstance(target, dc.Tensor) else target
        if arr.shape != data.shape:
            raise ckpt.CheckpointError(f"{name}: shape {arr.shape} does not match config {data.shape}")
        data[...] = arr
    opt.t = adam_t
    state.iteration = iteration
    try:
        state.rng.bit_generator.state = rng_state
    except (TypeError, ValueError, KeyError) as exc:
        raise ckpt.CheckpointError(f"bad RNG state ({exc})") from None
    return state
