"""Dataset layout, validation and the procedural dynamic scene.

On disk a dataset is::

    manifest.json
    frames/00000.png ...

The synthetic scene is a soft ellipsoid whose radii follow the first three
expression components and whose colour bands shift with the fourth; the
remaining components are inert.  Images are rendered from the closed-form
field with the same compositing used for training.
"""

import dataclasses
import json
import math
import os
import warnings
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .config import RenderConfig, SceneSpec
from .renderer import Camera, generate_rays, render_image

SCHEMA_VERSION = 1
TRAIN_FRACTION = 0.9


class DatasetError(ValueError):
    """Malformed or inconsistent dataset on disk."""


@dataclass
class FrameRecord:
    index: int
    file: str
    camera: Camera
    delta: np.ndarray
    box: tuple  # (x0, y0, x1, y1) pixel rectangle, end-exclusive
    split: str
    image: np.ndarray = None  # (H, W, 3) float32 in [0, 1]


@dataclass
class Manifest:
    schema_version: int
    bounds: list
    t_near: float
    t_far: float
    background: list
    delta_dim: int
    frames: list
    scene: dict = None


@dataclass
class Dataset:
    root: str
    manifest: Manifest
    frames: list

    @property
    def train(self):
        return [f for f in self.frames if f.split == "train"]

    @property
    def test(self):
        return [f for f in self.frames if f.split == "test"]

    def frame(self, index):
        for f in self.frames:
            if f.index == index:
                return f
        raise KeyError(index)


# ---------------------------------------------------------------------------
# analytic scene


def _smoothstep(a, b, x):
    s = np.clip((x - a) / (b - a), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def scene_radii(delta, spec):
    delta = np.asarray(delta, dtype=np.float64)
    return np.asarray(spec.radii) + np.asarray(spec.coupling) * delta[:3]


def analytic_query(points, delta, spec):
    """Closed-form ``(sigma, rgb)`` of the synthetic scene at ``points`` (N, 3).

    Density is ``s`` inside the ellipsoid core and falls smoothly (C1) to zero
    across the outer ``falloff`` fraction of the ellipsoidal radius.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    delta = np.asarray(delta, dtype=np.float64)
    q = np.linalg.norm(p / scene_radii(delta, spec), axis=1)
    sigma = spec.density_scale * (1.0 - _smoothstep(1.0 - spec.falloff, 1.0, q))
    phase = 2.0 * np.pi * spec.band_frequency * p[:, 1:2] + delta[3] + 2.0 * np.pi * np.arange(3) / 3.0
    rgb = 0.5 + 0.4 * np.sin(phase)
    return sigma, rgb


def analytic_field(delta, spec):
    """Adapter with the renderer's field signature ``fn(points, dirs)``."""

    def fn(points, dirs):
        sigma, rgb = analytic_query(points, delta, spec)
        return rgb, sigma[:, None]

    return fn


def orbit_camera(spec, pose_index, azimuth_deg=None):
    if azimuth_deg is None:
        if spec.orbit_count == 1:
            azimuth_deg = 0.0
        else:
            azimuth_deg = -0.5 * spec.orbit_arc + spec.orbit_arc * pose_index / (spec.orbit_count - 1)
    az, el = math.radians(azimuth_deg), math.radians(spec.elevation)
    eye = spec.orbit_radius * np.array([math.sin(az) * math.cos(el), math.sin(el), math.cos(az) * math.cos(el)])
    return Camera.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), spec.fov, spec.size, spec.size)


def delta_trajectory(spec):
    """Smooth seeded expression sequence (frames, delta_dim) within [-1, 1]."""
    rng = np.random.default_rng(spec.seed)
    t = np.arange(spec.frames) / max(spec.frames, 1)
    freq = rng.uniform(0.7, 1.3, size=spec.delta_dim)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=spec.delta_dim)
    amp = np.where(np.arange(spec.delta_dim) < 4, 1.0, 0.5)
    return amp * np.sin(2.0 * np.pi * freq * t[:, None] + phase)


def projected_box(camera, delta, spec, pad=1):
    """Pixel bounding box of the (delta-dependent) ellipsoid's projection."""
    r = scene_radii(delta, spec)
    th = np.linspace(0.0, np.pi, 48)
    ph = np.linspace(0.0, 2.0 * np.pi, 96)
    th, ph = np.meshgrid(th, ph)
    pts = np.stack([np.sin(th) * np.cos(ph), np.cos(th), np.sin(th) * np.sin(ph)], -1).reshape(-1, 3) * r
    w2c = np.linalg.inv(camera.c2w)
    cam = pts @ w2c[:3, :3].T + w2c[:3, 3]
    z = -cam[:, 2]
    u = camera.fx * cam[:, 0] / z + camera.cx
    v = -camera.fy * cam[:, 1] / z + camera.cy
    x0 = int(np.clip(np.floor(u.min()) - pad, 0, camera.width))
    x1 = int(np.clip(np.ceil(u.max()) + pad, 0, camera.width))
    y0 = int(np.clip(np.floor(v.min()) - pad, 0, camera.height))
    y1 = int(np.clip(np.ceil(v.max()) + pad, 0, camera.height))
    return (x0, y0, x1, y1)


def render_ground_truth(camera, delta, spec, threads=None):
    """Float image of the analytic scene at ``spec.samples`` midpoint depths."""
    cfg = RenderConfig(n_coarse=spec.samples, n_fine=1, stratified=False,
                       background=tuple(spec.background), chunk=4096)
    return render_image(camera, analytic_field(delta, spec), None, cfg, spec.t_near, spec.t_far,
                        threads=threads, dtype=np.float64)


def quantize(img):
    """Round to the nearest 8-bit level; returns uint8."""
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def default_splits(n):
    n_train = max(1, int(math.floor(TRAIN_FRACTION * n + 1e-9)))
    return ["train" if i < n_train else "test" for i in range(n)]


def _frame_entry(index, camera, delta, box, split):
    return {
        "index": index,
        "file": f"frames/{index:05d}.png",
        "c2w": [float(x) for x in camera.c2w.reshape(-1)],
        "fx": float(camera.fx),
        "fy": float(camera.fy),
        "cx": float(camera.cx),
        "cy": float(camera.cy),
        "width": int(camera.width),
        "height": int(camera.height),
        "delta": [float(x) for x in delta],
        "box": [int(b) for b in box],
        "split": split,
    }


def write_manifest(path, manifest):
    doc = {
        "schema_version": manifest.schema_version,
        "bounds": manifest.bounds,
        "t_near": manifest.t_near,
        "t_far": manifest.t_far,
        "background": manifest.background,
        "delta_dim": manifest.delta_dim,
        "scene": manifest.scene,
        "frames": manifest.frames,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def save_png(path, img):
    Image.fromarray(quantize(img) if img.dtype != np.uint8 else img, mode="RGB").save(path, format="PNG")


def generate_synthetic(spec, out_dir, threads=None):
    """Render the procedural scene to ``out_dir``; returns the manifest."""
    spec.validate()
    try:
        os.makedirs(os.path.join(out_dir, "frames"), exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out_dir}: {exc}") from exc
    deltas = delta_trajectory(spec)
    splits = default_splits(spec.frames)
    entries = []
    for i in range(spec.frames):
        cam = orbit_camera(spec, i % spec.orbit_count)
        img = render_ground_truth(cam, deltas[i], spec, threads=threads)
        save_png(os.path.join(out_dir, "frames", f"{i:05d}.png"), img)
        entries.append(_frame_entry(i, cam, deltas[i], projected_box(cam, deltas[i], spec), splits[i]))
    manifest = Manifest(
        schema_version=SCHEMA_VERSION,
        bounds=[[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]],
        t_near=float(spec.t_near),
        t_far=float(spec.t_far),
        background=[float(b) for b in spec.background],
        delta_dim=spec.delta_dim,
        frames=entries,
        scene=_scene_dict(spec),
    )
    write_manifest(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def _scene_dict(spec):
    d = dataclasses.asdict(spec)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def scene_spec_from_manifest(manifest):
    if not manifest.scene:
        return None
    spec = SceneSpec()
    for k, v in manifest.scene.items():
        if hasattr(spec, k):
            setattr(spec, k, tuple(v) if isinstance(v, list) else v)
    return spec


# ---------------------------------------------------------------------------
# loading


def load_image(path):
    with Image.open(path) as im:
        im.load()
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def load_dataset(root, load_images=True):
    """Read and validate a dataset directory."""
    path = os.path.join(root, "manifest.json")
    if not os.path.exists(path):
        raise DatasetError(f"{root}: manifest.json not found")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: {exc}") from None
    try:
        manifest = Manifest(
            schema_version=int(doc["schema_version"]),
            bounds=doc["bounds"],
            t_near=float(doc["t_near"]),
            t_far=float(doc["t_far"]),
            background=[float(b) for b in doc["background"]],
            delta_dim=int(doc["delta_dim"]),
            frames=doc["frames"],
            scene=doc.get("scene"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: missing or invalid field ({exc})") from None
    if manifest.schema_version != SCHEMA_VERSION:
        raise DatasetError(f"unsupported manifest schema {manifest.schema_version}")
    lo, hi = np.asarray(manifest.bounds, dtype=np.float64)
    if lo.shape != (3,) or np.any(hi <= lo):
        raise DatasetError("scene bounds are degenerate")
    if not manifest.t_near < manifest.t_far:
        raise DatasetError("t_near must be < t_far")
    if not manifest.frames:
        raise DatasetError("dataset has no frames")

    tagged = all(f.get("split") in ("train", "test") for f in manifest.frames)
    if not tagged:
        if any("split" in f and f["split"] is not None for f in manifest.frames):
            warnings.warn("some frames lack split tags; using chronological 90/10 split for all")
        order = sorted(range(len(manifest.frames)), key=lambda k: manifest.frames[k].get("index", k))
        splits = dict(zip(order, default_splits(len(order))))

    frames = []
    for k, entry in enumerate(manifest.frames):
        index = int(entry.get("index", k))
        name = entry.get("file", f"frames/{index:05d}.png")
        image = None
        if load_images:
            img_path = os.path.join(root, name)
            if not os.path.exists(img_path):
                raise DatasetError(f"frame {index}: image {name} is missing")
            try:
                image = load_image(img_path)
            except Exception as exc:  # PIL raises several types for corrupt data
                raise DatasetError(f"frame {index}: cannot decode {name} ({exc})") from None
        width, height = entry.get("width"), entry.get("height")
        if (width is None or height is None) and image is not None:
            height, width = image.shape[:2]
        try:
            cam = Camera(float(entry["fx"]), float(entry["fy"]), float(entry["cx"]), float(entry["cy"]),
                         np.asarray(entry["c2w"], dtype=np.float64).reshape(4, 4),
                         int(width), int(height))
        except (KeyError, ValueError, TypeError) as exc:
            raise DatasetError(f"frame {index}: invalid camera ({exc})") from None
        if image is not None and image.shape[:2] != (cam.height, cam.width):
            raise DatasetError(
                f"frame {index}: image is {image.shape[1]}x{image.shape[0]}, "
                f"camera expects {cam.width}x{cam.height}"
            )
        delta = np.asarray(entry.get("delta", []), dtype=np.float64)
        if delta.shape != (manifest.delta_dim,):
            raise DatasetError(f"frame {index}: delta has {delta.size} entries, manifest declares {manifest.delta_dim}")
        box = tuple(int(b) for b in entry.get("box", (0, 0, cam.width, cam.height)))
        split = entry["split"] if tagged else splits[k]
        rec = FrameRecord(index, name, cam, delta, box, split, image)
        frames.append(rec)
    return Dataset(root, manifest, frames)


def frame_rays(frame):
    """All pixel rays of a frame in row-major order."""
    from .renderer import pixel_grid

    return generate_rays(frame.camera, pixel_grid(frame.camera))
