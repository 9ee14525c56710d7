"""Radiance fields: positional encoding, MLP, differentiable volume rendering.

Two instances are used downstream: a small field fit to the low-resolution
views (frozen after pretraining) and a larger one trained jointly with the
super-resolution latents.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, DataIOError, NumericalStateError
from .scene import CameraPose, RayBatch, generate_rays

CHECKPOINT_VERSION = 1
_DIR_FREQS = 4  # directional encoding octaves, shared by both field roles


@dataclass(frozen=True)
class FieldConfig:
    n_frequencies: int          # positional-encoding octaves for xyz
    hidden_width: int
    n_layers: int
    n_samples_per_ray: int
    role_tag: str               # "LR" | "HR"

    def __post_init__(self):
        if self.n_frequencies < 0 or self.n_layers < 1 or self.hidden_width < 1:
            raise ConfigurationError("invalid field config")
        if self.role_tag not in ("LR", "HR"):
            raise ConfigurationError(f"role_tag must be LR or HR, got {self.role_tag!r}")


def lr_field_config() -> FieldConfig:
    return FieldConfig(n_frequencies=6, hidden_width=144, n_layers=4,
                       n_samples_per_ray=64, role_tag="LR")


def hr_field_config() -> FieldConfig:
    return FieldConfig(n_frequencies=10, hidden_width=256, n_layers=6,
                       n_samples_per_ray=96, role_tag="HR")


def positional_encode(x: torch.Tensor, L: int) -> torch.Tensor:
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]."""
    parts = [x]
    for k in range(L):
        arg = (2.0**k) * torch.pi * x
        parts.append(torch.sin(arg))
        parts.append(torch.cos(arg))
    return torch.cat(parts, dim=-1)


class RadianceField(nn.Module):
    """Density + direction-conditioned color MLP over encoded positions."""

    def __init__(self, config: FieldConfig, seed: int = 0):
        super().__init__()
        self.config = config
        in_dim = 3 + 6 * config.n_frequencies
        dir_dim = 3 + 6 * _DIR_FREQS
        layers = [nn.Linear(in_dim, config.hidden_width), nn.ReLU()]
        for _ in range(config.n_layers - 1):
            layers += [nn.Linear(config.hidden_width, config.hidden_width), nn.ReLU()]
        self.trunk = nn.Sequential(*layers)
        self.density_head = nn.Linear(config.hidden_width, 1)
        self.color_hidden = nn.Linear(config.hidden_width + dir_dim, config.hidden_width // 2)
        self.color_out = nn.Linear(config.hidden_width // 2, 3)
        self._seeded_init(seed)

    def _seeded_init(self, seed: int):
        g = torch.Generator().manual_seed(seed)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                bound = 1.0 / (mod.in_features ** 0.5)
                with torch.no_grad():
                    mod.weight.uniform_(-bound, bound, generator=g)
                    mod.bias.uniform_(-bound, bound, generator=g)

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def flat_parameters(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()]).numpy()

    def load_flat_parameters(self, flat: np.ndarray):
        flat = torch.as_tensor(flat, dtype=torch.float32)
        if flat.numel() != self.parameter_count:
            raise DataIOError(
                f"parameter vector length {flat.numel()} != model size {self.parameter_count}")
        offset = 0
        with torch.no_grad():
            for p in self.parameters():
                n = p.numel()
                p.copy_(flat[offset:offset + n].view_as(p))
                offset += n

    def forward(self, points: torch.Tensor, view_dirs: torch.Tensor):
        """(N,3),(N,3) -> densities (N,), raw colors (N,3) in [0,1]."""
        h = self.trunk(positional_encode(points, self.config.n_frequencies))
        density = torch.nn.functional.softplus(self.density_head(h).squeeze(-1))
        d = self.color_hidden(torch.cat([h, positional_encode(view_dirs, _DIR_FREQS)], dim=-1))
        color = torch.sigmoid(self.color_out(torch.relu(d)))
        return density, color


def query_field(field: RadianceField, points: torch.Tensor, view_dirs: torch.Tensor):
    density, color = field(points, view_dirs)
    if not torch.isfinite(density).all() or not torch.isfinite(color).all():
        raise NumericalStateError("field produced non-finite outputs")
    return density, color


def sample_depths(n_rays: int, n_samples: int, near: float, far: float,
                  generator: torch.Generator | None = None) -> torch.Tensor:
    """Stratified depths per ray; bin midpoints when no generator is given."""
    if near >= far:
        raise ConfigurationError(f"require near < far, got {near} >= {far}")
    edges = torch.linspace(near, far, n_samples + 1, dtype=torch.float32)
    lower, width = edges[:-1], (far - near) / n_samples
    if generator is None:
        u = torch.full((n_rays, n_samples), 0.5)
    else:
        u = torch.rand((n_rays, n_samples), generator=generator)
    return lower[None, :] + u * width


def composite(densities: torch.Tensor, colors: torch.Tensor, depths: torch.Tensor):
    """Quadrature along rays.

    densities, depths: (R, K); colors: (R, K, 3). The last interval gets the
    mean bin width, so a fully transparent field composites to black.
    Returns (color (R,3), weights (R,K), depth_expectation (R,), acc (R,)).
    """
    deltas = torch.diff(depths, dim=-1)
    last_width = float(deltas.mean()) if deltas.numel() else 1.0
    deltas = torch.cat([deltas, torch.full_like(depths[:, :1], last_width)], dim=-1)
    tau = densities * deltas
    alpha = 1.0 - torch.exp(-tau)
    trans = torch.exp(-torch.cumsum(torch.cat([torch.zeros_like(tau[:, :1]), tau[:, :-1]], dim=-1), dim=-1))
    weights = trans * alpha
    color = (weights[..., None] * colors).sum(dim=-2)
    acc = weights.sum(dim=-1)
    depth = (weights * depths).sum(dim=-1) / torch.clamp(acc, min=1e-8)
    return color, weights, depth, acc


def render_rays(field: RadianceField, rays: RayBatch,
                generator: torch.Generator | None = None):
    """Render a ray batch; returns (color, weights, depth_expectation, acc) tensors."""
    dtype = next(field.parameters()).dtype
    origins = torch.as_tensor(rays.origins, dtype=dtype)
    dirs = torch.as_tensor(rays.directions, dtype=dtype)
    n_rays = origins.shape[0]
    k = field.config.n_samples_per_ray
    depths = sample_depths(n_rays, k, rays.near, rays.far, generator).to(dtype)
    points = origins[:, None, :] + depths[..., None] * dirs[:, None, :]
    flat_dirs = dirs[:, None, :].expand(-1, k, -1).reshape(-1, 3)
    density, color = query_field(field, points.reshape(-1, 3), flat_dirs)
    return composite(density.reshape(n_rays, k), color.reshape(n_rays, k, 3), depths)


def render_image(field: RadianceField, pose: CameraPose, target_h: int, target_w: int,
                 generator: torch.Generator | None = None, chunk: int = 4096,
                 with_aux: bool = False):
    """Full-image render as a (H, W, 3) numpy array; optionally depth/acc maps."""
    rays = generate_rays(pose, target_h, target_w)
    colors, depths, accs = [], [], []
    with torch.no_grad():
        for lo in range(0, rays.origins.shape[0], chunk):
            sub = RayBatch(rays.origins[lo:lo + chunk], rays.directions[lo:lo + chunk],
                           rays.pixel_coords[lo:lo + chunk], rays.view_index, rays.near, rays.far)
            c, _, d, a = render_rays(field, sub, generator)
            colors.append(c)
            depths.append(d)
            accs.append(a)
    img = torch.cat(colors).reshape(target_h, target_w, 3).numpy().astype(np.float64)
    if not with_aux:
        return img
    depth = torch.cat(depths).reshape(target_h, target_w).numpy().astype(np.float64)
    acc = torch.cat(accs).reshape(target_h, target_w).numpy().astype(np.float64)
    return img, depth, acc


# ---------------------------------------------------------------------------
# checkpoints


def save_field(field: RadianceField, path: str) -> None:
    np.savez(path, version=CHECKPOINT_VERSION,
             config=json.dumps(asdict(field.config)),
             parameters=field.flat_parameters())


def load_field(path: str) -> RadianceField:
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataIOError(f"unreadable field checkpoint {path}: {exc}") from exc
    if "version" not in data:
        raise DataIOError(f"field checkpoint {path} lacks a version field")
    if int(data["version"]) != CHECKPOINT_VERSION:
        raise DataIOError(f"unsupported checkpoint version {int(data['version'])}")
    config = FieldConfig(**json.loads(str(data["config"])))
    field = RadianceField(config)
    field.load_flat_parameters(data["parameters"])
    return field
