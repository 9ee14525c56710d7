"""Synthetic multi-view scene generation, degradation, rays, and dataset I/O.

Images are (H, W, 3) float arrays with nominal range [0, 1]. Poses use a
world-to-camera rotation, right-handed axes, camera looking down -z, and
pixel centers at half-integer coordinates.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import cv2
import numpy as np

from .errors import ConfigurationError, DataIOError, ShapeError


@dataclass(frozen=True)
class CameraPose:
    position: np.ndarray          # (3,)
    orientation: np.ndarray       # (3, 3) world-to-camera
    focal: float                  # pixels
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        R = np.asarray(self.orientation, dtype=np.float64)
        if R.shape != (3, 3) or np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise ConfigurationError("orientation must be a 3x3 orthonormal matrix")
        if not (0 < self.near < self.far):
            raise ConfigurationError(f"require 0 < near < far, got {self.near}, {self.far}")
        if self.width < 8 or self.height < 8:
            raise ConfigurationError("width and height must be >= 8")
        if self.focal <= 0:
            raise ConfigurationError("focal must be positive")

    def scaled(self, target_h: int, target_w: int) -> "CameraPose":
        """Same camera re-expressed at another pixel resolution."""
        return CameraPose(
            position=self.position,
            orientation=self.orientation,
            focal=self.focal * target_w / self.width,
            width=target_w,
            height=target_h,
            near=self.near,
            far=self.far,
        )


@dataclass
class RayBatch:
    origins: np.ndarray       # (N, 3)
    directions: np.ndarray    # (N, 3) unit norm
    pixel_coords: np.ndarray  # (N, 2) sub-pixel (u, v)
    view_index: int
    near: float
    far: float


@dataclass
class View:
    pose: CameraPose
    image: np.ndarray  # (H, W, 3)
    tag: str           # "LR" | "HR"


@dataclass
class MultiViewDataset:
    views: list[View]
    scale_factor: int

    def __post_init__(self):
        if len(self.views) < 2:
            raise ConfigurationError("a dataset needs at least 2 views")
        for tag in ("LR", "HR"):
            shapes = {v.image.shape[:2] for v in self.views if v.tag == tag}
            if len(shapes) > 1:
                raise ConfigurationError(f"all {tag} views must share one resolution, got {shapes}")

    @property
    def n_views(self) -> int:
        return len(self.views)

    def lr_shape(self) -> tuple[int, int]:
        """(H, W) of the LR level, derived from either tag."""
        for v in self.views:
            if v.tag == "LR":
                return v.image.shape[:2]
        h, w = self.views[0].image.shape[:2]
        s = self.scale_factor
        return h // s, w // s


# ---------------------------------------------------------------------------
# degradation operator


def box_downsample(img: np.ndarray, s: int) -> np.ndarray:
    """Average s x s blocks; inverse direction of ``replicate_upsample``."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    if h % s or w % s:
        raise ShapeError(f"image {h}x{w} not divisible by scale {s}")
    return img.reshape(h // s, s, w // s, s, -1).mean(axis=(1, 3)).reshape(h // s, w // s, *img.shape[2:])


def replicate_upsample(img: np.ndarray, s: int) -> np.ndarray:
    """Repeat each pixel s x s; exact right-inverse of ``box_downsample``."""
    return np.repeat(np.repeat(np.asarray(img), s, axis=0), s, axis=1)


# ---------------------------------------------------------------------------
# rays


def generate_rays(pose: CameraPose, target_h: int, target_w: int, view_index: int = -1) -> RayBatch:
    """One ray per pixel center at an arbitrary target resolution.

    The focal length is rescaled by target_w / pose.width so every
    resolution observes the same field of view.
    """
    if target_h < 1 or target_w < 1:
        raise ConfigurationError("target resolution must be >= 1")
    f = pose.focal * target_w / pose.width
    v, u = np.meshgrid(np.arange(target_h) + 0.5, np.arange(target_w) + 0.5, indexing="ij")
    dirs_cam = np.stack(
        [(u - target_w / 2) / f, (target_h / 2 - v) / f, -np.ones_like(u)], axis=-1
    ).reshape(-1, 3)
    dirs_world = dirs_cam @ np.asarray(pose.orientation, dtype=np.float64)
    dirs_world /= np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(np.asarray(pose.position, dtype=np.float64), dirs_world.shape).copy()
    pix = np.stack([u, v], axis=-1).reshape(-1, 2)
    return RayBatch(origins, dirs_world, pix, view_index, pose.near, pose.far)


def look_at_pose(position, target, focal, width, height, near, far, up=(0.0, 1.0, 0.0)) -> CameraPose:
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    R = np.stack([right, true_up, -forward], axis=0)  # world-to-camera rows
    return CameraPose(position, R, focal, width, height, near, far)


# ---------------------------------------------------------------------------
# analytic scene


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    albedo: tuple[float, float, float]
    texture_freq: float = 0.0      # latitude-band modulation, 0 = flat
    texture_amp: float = 0.2


@dataclass(frozen=True)
class GroundPlane:
    height: float
    albedo: tuple[float, float, float]
    texture_period: float = 1.0
    texture_amp: float = 0.25
    extent: float = 3.0


@dataclass(frozen=True)
class SceneSpec:
    spheres: tuple[Sphere, ...]
    plane: GroundPlane | None = None
    light_dir: tuple[float, float, float] = (0.4, 1.0, 0.3)
    ambient: float = 0.35
    ring_radius: float = 3.0
    ring_height: float = 1.2
    focal_ratio: float = 1.2       # focal = focal_ratio * width
    near: float = 1.0
    far: float = 6.0


def default_scene_spec() -> SceneSpec:
    """Reference toy scene: two mildly textured spheres over a soft-checker floor."""
    return SceneSpec(
        spheres=(
            Sphere((-0.45, 0.05, 0.0), 0.55, (0.85, 0.35, 0.30), texture_freq=3.0),
            Sphere((0.55, -0.15, 0.35), 0.40, (0.30, 0.50, 0.85), texture_freq=4.0),
        ),
        plane=GroundPlane(-0.55, (0.55, 0.55, 0.45), texture_period=1.4, extent=2.6),
    )


def _shade(normals: np.ndarray, albedo: np.ndarray, spec: SceneSpec) -> np.ndarray:
    light = np.asarray(spec.light_dir, dtype=np.float64)
    light = light / np.linalg.norm(light)
    lam = np.clip(normals @ light, 0.0, None)
    return albedo * (spec.ambient + (1.0 - spec.ambient) * lam)[..., None]


def trace_rays(spec: SceneSpec, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Closed-form ray trace of the analytic scene; black background."""
    n = origins.shape[0]
    best_t = np.full(n, np.inf)
    color = np.zeros((n, 3))
    for sph in spec.spheres:
        c = np.asarray(sph.center, dtype=np.float64)
        oc = origins - c
        b = np.sum(oc * dirs, axis=-1)
        disc = b * b - (np.sum(oc * oc, axis=-1) - sph.radius**2)
        hit = disc > 0
        t = -b - np.sqrt(np.where(hit, disc, 0.0))
        hit &= (t > 1e-6) & (t < best_t)
        if not hit.any():
            continue
        p = origins[hit] + t[hit, None] * dirs[hit]
        normal = (p - c) / sph.radius
        alb = np.asarray(sph.albedo, dtype=np.float64)[None, :].repeat(hit.sum(), axis=0)
        if sph.texture_freq > 0:
            lat = np.arcsin(np.clip(normal[:, 1], -1, 1))
            alb = alb * (1.0 - sph.texture_amp + sph.texture_amp * np.sin(sph.texture_freq * lat))[:, None]
        color[hit] = _shade(normal, alb, spec)
        best_t[hit] = t[hit]
    if spec.plane is not None:
        pl = spec.plane
        dy = dirs[:, 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (pl.height - origins[:, 1]) / dy
        p = origins + t[:, None] * dirs
        hit = (np.abs(dy) > 1e-9) & (t > 1e-6) & (t < best_t)
        hit &= (np.abs(p[:, 0]) <= pl.extent) & (np.abs(p[:, 2]) <= pl.extent)
        if hit.any():
            ph = p[hit]
            mod = 1.0 - pl.texture_amp + pl.texture_amp * np.sin(
                2 * np.pi * ph[:, 0] / pl.texture_period
            ) * np.sin(2 * np.pi * ph[:, 2] / pl.texture_period)
            alb = np.asarray(pl.albedo, dtype=np.float64)[None, :] * mod[:, None]
            normal = np.broadcast_to(np.array([0.0, 1.0, 0.0]), ph.shape)
            color[hit] = _shade(normal, alb, spec)
            best_t[hit] = t[hit]
    return np.clip(color, 0.0, 1.0)


def generate_synthetic_scene(
    spec: SceneSpec,
    n_views: int,
    seed: int,
    hr_height: int = 128,
    hr_width: int = 128,
    scale_factor: int = 4,
    phase_offset: float = 0.0,
) -> MultiViewDataset:
    """Posed HR ground-truth renders on a camera ring around the origin.

    Deterministic for a fixed (spec, n_views, seed). ``phase_offset`` rotates
    the whole ring, used to carve out held-out test viewpoints.
    """
    if n_views < 2:
        raise ConfigurationError("need at least 2 views")
    if not spec.spheres and spec.plane is None:
        raise ConfigurationError("scene spec is empty")
    if spec.ring_radius <= 0:
        raise ConfigurationError("ring radius must be positive")
    rng = np.random.default_rng(seed)
    jitter = rng.uniform(-0.03, 0.03, size=n_views)
    views = []
    for i in range(n_views):
        ang = 2 * np.pi * i / n_views + phase_offset + jitter[i]
        pos = np.array([
            spec.ring_radius * np.cos(ang),
            spec.ring_height,
            spec.ring_radius * np.sin(ang),
        ])
        pose = look_at_pose(pos, (0.0, 0.0, 0.0), spec.focal_ratio * hr_width,
                            hr_width, hr_height, spec.near, spec.far)
        rays = generate_rays(pose, hr_height, hr_width, view_index=i)
        img = trace_rays(spec, rays.origins, rays.directions).reshape(hr_height, hr_width, 3)
        views.append(View(pose, img, "HR"))
    return MultiViewDataset(views, scale_factor)


# ---------------------------------------------------------------------------
# persistence


def save_dataset(dataset: MultiViewDataset, path: str, bit_depth: int = 8) -> None:
    if bit_depth not in (8, 16):
        raise ConfigurationError("bit_depth must be 8 or 16")
    os.makedirs(path, exist_ok=True)
    lines = [f"scale_factor {dataset.scale_factor} bit_depth {bit_depth}"]
    for i, v in enumerate(dataset.views):
        R, p = v.pose.orientation, v.pose.position
        t = -R @ p  # world-to-camera translation
        mat = np.concatenate([R, t[:, None]], axis=1).ravel()
        nums = " ".join(f"{x:.9g}" for x in mat)
        lines.append(
            f"{i} {v.tag} {nums} {v.pose.focal:.9g} {v.pose.near:.9g} {v.pose.far:.9g}"
        )
        peak = 255 if bit_depth == 8 else 65535
        dtype = np.uint8 if bit_depth == 8 else np.uint16
        quant = np.round(np.clip(v.image, 0, 1) * peak).astype(dtype)
        ok = cv2.imwrite(os.path.join(path, f"view_{i}.png"), quant[:, :, ::-1])
        if not ok:
            raise DataIOError(f"failed to write view_{i}.png under {path}")
    with open(os.path.join(path, "poses.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path: str) -> MultiViewDataset:
    poses_path = os.path.join(path, "poses.txt")
    if not os.path.exists(poses_path):
        raise DataIOError(f"missing poses.txt under {path}")
    with open(poses_path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("scale_factor"):
        raise DataIOError("poses.txt: corrupt header (expected 'scale_factor ...')")
    head = lines[0].split()
    try:
        scale = int(head[1])
        peak = 255 if int(head[3]) == 8 else 65535
    except (IndexError, ValueError) as exc:
        raise DataIOError(f"poses.txt: bad header fields: {exc}") from exc
    views = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 17:
            raise DataIOError(f"poses.txt: malformed view line (17 fields expected): {ln[:60]}")
        idx, tag = int(parts[0]), parts[1]
        if tag not in ("LR", "HR"):
            raise DataIOError(f"poses.txt: view {idx}: unknown resolution tag {tag!r}")
        mat = np.array([float(x) for x in parts[2:14]]).reshape(3, 4)
        focal, near, far = (float(x) for x in parts[14:17])
        img_path = os.path.join(path, f"view_{idx}.png")
        raw = cv2.imread(img_path, cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise DataIOError(f"missing or unreadable image view_{idx}.png")
        img = raw[:, :, ::-1].astype(np.float64) / peak
        R, t = mat[:, :3], mat[:, 3]
        pose = CameraPose(-R.T @ t, R, focal, img.shape[1], img.shape[0], near, far)
        views.append(View(pose, img, tag))
    return MultiViewDataset(views, scale)
