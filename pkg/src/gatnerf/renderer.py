"""Pinhole rays, stratified/importance sampling and differentiable compositing."""

import concurrent.futures
import os
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from . import kernels
from .field import query

FAR_SENTINEL = 1e10


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    c2w: np.ndarray  # (4, 4) camera-to-world, camera looks down -z with y up
    width: int
    height: int

    def __post_init__(self):
        self.c2w = np.asarray(self.c2w, dtype=np.float64).reshape(4, 4)
        self.validate()

    def validate(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"degenerate intrinsics fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        r = self.c2w[:3, :3]
        if np.linalg.norm(r.T @ r - np.eye(3)) >= 1e-6:
            raise ValueError("camera rotation is not orthonormal")

    @classmethod
    def look_at(cls, eye, target, up, fov_deg, width, height):
        """Camera at ``eye`` looking at ``target`` with horizontal FOV ``fov_deg``."""
        eye = np.asarray(eye, dtype=np.float64)
        back = eye - np.asarray(target, dtype=np.float64)
        back /= np.linalg.norm(back)
        right = np.cross(up, back)
        right /= np.linalg.norm(right)
        true_up = np.cross(back, right)
        c2w = np.eye(4)
        c2w[:3, 0], c2w[:3, 1], c2w[:3, 2], c2w[:3, 3] = right, true_up, back, eye
        f = 0.5 * width / np.tan(0.5 * np.radians(fov_deg))
        return cls(f, f, width / 2.0, height / 2.0, c2w, width, height)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        if not self.t_near < self.t_far:
            raise ValueError("ray needs t_near < t_far")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")


def pixel_grid(camera):
    """Pixel-centre coordinates (H*W, 2) in row-major order."""
    j, i = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
    return np.stack([i.ravel() + 0.5, j.ravel() + 0.5], axis=1)


def generate_rays(camera, pixels):
    """World-space origins and unit directions for pixel coordinates (N, 2).

    Coordinates are continuous: the centre of pixel column ``i`` is ``i+0.5``.
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    u, v = pixels[:, 0], pixels[:, 1]
    if np.any(u < 0) or np.any(u > camera.width) or np.any(v < 0) or np.any(v > camera.height):
        raise ValueError("pixel coordinates outside the image")
    d_cam = np.stack([(u - camera.cx) / camera.fx, -(v - camera.cy) / camera.fy, -np.ones_like(u)], axis=1)
    dirs = d_cam @ camera.c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.c2w[:3, 3], dirs.shape).copy()
    return origins, dirs


# ---------------------------------------------------------------------------
# per-ray random streams


def _splitmix64(x):
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def ray_uniforms(seed, frame, pixel_ids, count, stream=0):
    """Uniform [0, 1) draws (R, count) keyed by (seed, frame, pixel, stream).

    Every ray owns an independent counter-based stream, so results do not
    depend on batching or on the order in which rays are processed.
    """
    with np.errstate(over="ignore"):
        key = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
        key = _splitmix64(key ^ np.uint64(frame & 0xFFFFFFFF))
        key = _splitmix64(key ^ np.uint64(stream & 0xFFFFFFFF))
        ids = np.asarray(pixel_ids, dtype=np.uint64).reshape(-1, 1)
        base = _splitmix64(key ^ ids)
        ctr = base + np.arange(count, dtype=np.uint64)[None, :] * np.uint64(0xD1B54A32D192ED03)
        bits = _splitmix64(ctr) >> np.uint64(11)
    return bits.astype(np.float64) * (1.0 / 9007199254740992.0)


# ---------------------------------------------------------------------------
# sampling


def stratified_sample(near, far, n, rays=None, jitter=False, u=None, rng=None):
    """``n`` ascending depths per ray, one per equal-width bin of [near, far].

    Without jitter the bin midpoints are returned; with jitter each bin gets
    one uniform draw taken from ``u`` (rays, n) or from ``rng``.
    """
    near = np.asarray(near, dtype=np.float64).reshape(-1, 1)
    far = np.asarray(far, dtype=np.float64).reshape(-1, 1)
    if rays is None:
        rays = max(near.shape[0], far.shape[0])
    if np.any(far <= near):
        raise ValueError("stratified_sample needs near < far")
    width = (far - near) / n
    lower = near + width * np.arange(n)[None, :]
    if not jitter:
        return np.broadcast_to(lower + 0.5 * width, (rays, n)).copy()
    if u is None:
        rng = rng if rng is not None else np.random.default_rng()
        u = rng.random((rays, n))
    return lower + width * np.asarray(u).reshape(rays, n)


def sample_pdf(edges, weights, u):
    """Inverse-CDF draws from piecewise-constant per-row densities.

    ``edges`` (R, M+1), ``weights`` (R, M), ``u`` (R, S).  Weights are padded
    by 1e-5 before normalization; they are read as plain arrays, so no
    gradient can flow through them.
    """
    weights = np.asarray(weights.data if isinstance(weights, dc.Tensor) else weights)
    if not np.all(np.isfinite(weights)):
        raise FloatingPointError("sample_pdf: non-finite weights")
    if np.any(weights < 0):
        raise ValueError("sample_pdf: negative weights")
    dtype = np.float64
    return kernels.sample_pdf(
        np.ascontiguousarray(edges, dtype=dtype),
        np.ascontiguousarray(weights, dtype=dtype),
        np.ascontiguousarray(u, dtype=dtype),
    )


def importance_sample(coarse_weights, coarse_t, n_fine, u=None, rng=None, merge=True):
    """Draw ``n_fine`` depths per ray from the coarse weight distribution.

    Bins run between consecutive midpoints of the coarse depths and carry
    the weights of the interior coarse samples.  Without ``u``/``rng`` the
    draws are the deterministic quantiles ``(j + 0.5) / n_fine``.  With
    ``merge`` the result is the sorted union with ``coarse_t``.
    """
    if isinstance(coarse_weights, dc.Tensor):
        raise TypeError("importance_sample takes detached weights (numpy arrays)")
    w = np.asarray(coarse_weights, dtype=np.float64)
    t = np.asarray(coarse_t, dtype=np.float64)
    rays, nc = t.shape
    if nc >= 3:
        edges = 0.5 * (t[:, 1:] + t[:, :-1])
        w = w[:, 1:-1]
    else:
        mids = 0.5 * (t[:, 1:] + t[:, :-1])
        edges = np.concatenate([t[:, :1], mids, t[:, -1:]], axis=1)
    if u is None:
        if rng is not None:
            u = rng.random((rays, n_fine))
        else:
            u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (rays, n_fine))
    fine = sample_pdf(edges, w, u)
    if not merge:
        return fine
    return np.sort(np.concatenate([t, fine], axis=1), axis=1)


# ---------------------------------------------------------------------------
# compositing


def _last_delta(t, t_far):
    if t_far is None:
        return np.full(t.shape[0], FAR_SENTINEL, dtype=t.dtype)
    far = np.broadcast_to(np.asarray(t_far, dtype=t.dtype), (t.shape[0],))
    return np.maximum(far - t[:, -1], 0.0)


def composite(sigma, rgb, t, background, t_far=None):
    """Alpha-composite samples along rays.

    ``sigma`` (R, N) and ``rgb`` (R, N, 3) are tensors (or arrays); ``t``
    (R, N) ascending depths.  The final interval runs to ``t_far`` when given
    and is otherwise a 1e10 sentinel that lets the last sample absorb the
    remaining transmittance.  Returns ``(color, weights, trans)``: ``color``
    is a differentiable (R, 3) tensor, ``weights`` and ``trans`` are detached
    arrays.
    """
    sigma = dc.as_tensor(sigma)
    rgb = dc.as_tensor(rgb, like=sigma)
    dtype = sigma.dtype
    t = np.ascontiguousarray(t, dtype=dtype)
    if sigma.ndim == 1:
        color, w, tr = composite(sigma.reshape(1, -1), rgb.reshape(1, -1, 3), t.reshape(1, -1), background, t_far)
        return color.reshape(3), w[0], tr[0]
    if t.shape != sigma.shape or rgb.shape != sigma.shape + (3,):
        raise dc.DimensionError(f"composite: sigma {sigma.shape}, rgb {rgb.shape}, t {t.shape} disagree")
    if t.shape[1] > 1 and np.any(np.diff(t, axis=1) < 0):
        raise ValueError("composite: depths must be ascending")
    if np.any(sigma.data < 0):
        raise ValueError("composite: negative density")
    bg = np.asarray(background, dtype=dtype).reshape(3)
    last = _last_delta(t, t_far)
    sd = np.ascontiguousarray(sigma.data)
    cd = np.ascontiguousarray(rgb.data)
    color, weights, trans = kernels.composite_forward(sd, cd, t, bg, last)

    def backward(g):
        dsigma, drgb = kernels.composite_backward(
            np.ascontiguousarray(g, dtype=dtype), sd, cd, t, bg, weights, trans, last
        )
        return dsigma, drgb

    return dc.record("composite", color, (sigma, rgb), backward), weights, trans


# ---------------------------------------------------------------------------
# full ray rendering


def network_field(params, delta, gamma):
    """Adapter turning field weights + frame context into ``fn(points, dirs)``."""

    def fn(points, dirs):
        return query(params, points, dirs, delta, gamma)

    return fn


def _eval_field(fn, t, origins, dirs, dtype):
    rays, n = t.shape
    pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    d = np.broadcast_to(dirs[:, None, :], pts.shape)
    rgb, sigma = fn(pts.reshape(-1, 3).astype(dtype), d.reshape(-1, 3).astype(dtype))
    # plain-array fields (analytic scenes) are coerced to the render precision
    rgb = (rgb if isinstance(rgb, dc.Tensor) else dc.Tensor(rgb, dtype=dtype)).reshape(rays, n, 3)
    sigma = (sigma if isinstance(sigma, dc.Tensor) else dc.Tensor(sigma, dtype=dtype)).reshape(rays, n)
    return rgb, sigma


def render_rays(origins, dirs, near, far, field_coarse, field_fine, cfg, u_coarse=None, u_fine=None, dtype=np.float32):
    """Hierarchical render of a ray batch.

    The coarse field sees ``n_coarse`` stratified depths.  When
    ``field_fine`` is given it re-evaluates the sorted union of the coarse
    depths and ``n_fine`` importance samples.  Sampling is deterministic
    (midpoints, fixed quantiles) unless ``u_coarse``/``u_fine`` uniforms are
    supplied.  Returns a dict with tensors ``coarse`` and ``fine`` (R, 3).
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    rays = origins.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (rays,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (rays,))
    bg = cfg.background

    t_c = stratified_sample(near, far, cfg.n_coarse, rays=rays, jitter=u_coarse is not None, u=u_coarse)
    rgb_c, sigma_c = _eval_field(field_coarse, t_c, origins, dirs, dtype)
    color_c, w_c, _ = composite(sigma_c, rgb_c, t_c, bg)
    out = {"coarse": color_c, "weights_coarse": w_c, "t_coarse": t_c}
    if field_fine is None:
        out["fine"] = color_c
        return out
    t_all = importance_sample(w_c, t_c, cfg.n_fine, u=u_fine)
    rgb_f, sigma_f = _eval_field(field_fine, t_all, origins, dirs, dtype)
    color_f, w_f, _ = composite(sigma_f, rgb_f, t_all, bg)
    out.update(fine=color_f, weights_fine=w_f, t_fine=t_all)
    return out


def render_ray(ray, field_coarse, field_fine, cfg, u_coarse=None, u_fine=None, dtype=np.float32):
    """Single-ray convenience wrapper returning (C_coarse, C_fine) arrays."""
    out = render_rays(
        ray.origin[None], ray.direction[None], ray.t_near, ray.t_far,
        field_coarse, field_fine, cfg,
        None if u_coarse is None else np.asarray(u_coarse).reshape(1, -1),
        None if u_fine is None else np.asarray(u_fine).reshape(1, -1),
        dtype=dtype,
    )
    return out["coarse"].data[0], out["fine"].data[0]


def default_threads():
    env = os.environ.get("GATNERF_THREADS")
    return max(1, int(env)) if env else 1


def render_image(camera, field_coarse, field_fine, cfg, near, far, jitter=False, seed=0, frame=0,
                 threads=None, dtype=np.float32, pass_name="fine"):
    """Render an (H, W, 3) image; chunks of ``cfg.chunk`` rays may run in threads.

    Chunk boundaries do not depend on ``threads``, so parallel and serial
    renders are bit-identical.  With ``jitter`` every pixel draws from its
    own stream keyed by (seed, frame, pixel).
    """
    threads = threads or default_threads()
    origins, dirs = generate_rays(camera, pixel_grid(camera))
    n = origins.shape[0]
    pixel_ids = np.arange(n)
    chunks = [slice(s, min(s + cfg.chunk, n)) for s in range(0, n, cfg.chunk)]

    def work(sl):
        uc = uf = None
        if jitter:
            uc = ray_uniforms(seed, frame, pixel_ids[sl], cfg.n_coarse, stream=0)
            uf = ray_uniforms(seed, frame, pixel_ids[sl], cfg.n_fine, stream=1)
        out = render_rays(origins[sl], dirs[sl], near, far, field_coarse, field_fine, cfg, uc, uf, dtype=dtype)
        return out[pass_name].data

    with dc.no_grad():
        if threads > 1 and len(chunks) > 1:
            with concurrent.futures.ThreadPoolExecutor(threads) as pool:
                parts = list(pool.map(work, chunks))
        else:
            parts = [work(sl) for sl in chunks]
    return np.concatenate(parts, axis=0).reshape(camera.height, camera.width, 3)
