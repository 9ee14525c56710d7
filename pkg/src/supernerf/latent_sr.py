"""Latent-controlled super-resolution with an exact LR-consistency projection.

A compact residual conv generator maps (replicate-upsampled LR image,
per-view dense latent code) to an HR candidate; an affine projection then
forces the candidate to box-downsample exactly to the LR input, so the
latent only steers the detail component the LR image does not determine.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, DataIOError, ShapeError

BACKBONE_VERSION = 1


# ---------------------------------------------------------------------------
# degradation operator (torch, differentiable)


def box_downsample_t(img: torch.Tensor, s: int) -> torch.Tensor:
    """(H, W, 3) -> (H/s, W/s, 3) block mean."""
    h, w, c = img.shape
    if h % s or w % s:
        raise ShapeError(f"image {h}x{w} not divisible by scale {s}")
    return img.reshape(h // s, s, w // s, s, c).mean(dim=(1, 3))


def replicate_upsample_t(img: torch.Tensor, s: int) -> torch.Tensor:
    return img.repeat_interleave(s, dim=0).repeat_interleave(s, dim=1)


@dataclass(frozen=True)
class BlurKernel:
    scale: int
    kind: str = "box"

    def __post_init__(self):
        if self.kind != "box":
            raise ConfigurationError(f"unsupported blur kernel kind {self.kind!r}")
        if self.scale < 1:
            raise ConfigurationError("scale must be >= 1")

    def apply(self, hr: torch.Tensor) -> torch.Tensor:
        return box_downsample_t(hr, self.scale)

    def pseudo_inverse(self, lr: torch.Tensor) -> torch.Tensor:
        # for s x s box averaging, H+ = s^2 H^T, i.e. plain replication
        return replicate_upsample_t(lr, self.scale)


def consistency_project(hr_candidate: torch.Tensor, lr: torch.Tensor, kernel: BlurKernel) -> torch.Tensor:
    """Closest image to the candidate that downsamples exactly to ``lr``.

    Affine projection: candidate minus its own block means plus the
    replicated LR image. Differentiable with respect to the candidate.
    """
    s = kernel.scale
    if hr_candidate.shape[0] != lr.shape[0] * s or hr_candidate.shape[1] != lr.shape[1] * s:
        raise ShapeError(
            f"candidate {tuple(hr_candidate.shape)} is not {s}x the LR image {tuple(lr.shape)}")
    return hr_candidate - kernel.pseudo_inverse(kernel.apply(hr_candidate)) + kernel.pseudo_inverse(lr)


# ---------------------------------------------------------------------------
# latent codes


@dataclass
class LatentCode:
    values: torch.Tensor  # (3, code_h, code_w), typically (3, s*H, s*W)
    view_index: int
    learnable: bool = True


class LatentCodeStore:
    """One optimizable code per LR training view."""

    def __init__(self):
        self.codes: dict[int, LatentCode] = {}

    def add(self, code: LatentCode):
        self.codes[code.view_index] = code

    def __len__(self):
        return len(self.codes)

    def __contains__(self, view_index: int):
        return view_index in self.codes

    def __getitem__(self, view_index: int) -> LatentCode:
        return self.codes[view_index]

    def tensors(self) -> list[torch.Tensor]:
        return [c.values for c in self.codes.values()]

    def state(self) -> dict:
        return {i: c.values.detach().clone() for i, c in self.codes.items()}


def init_latent(view_index: int, h: int, w: int, s: int, seed: int,
                downsample: int = 1) -> LatentCode:
    """Gaussian(0, 0.1^2) code of shape (3, s*h/downsample, s*w/downsample).

    Deterministic per (view_index, seed). ``downsample`` > 1 stores a coarser
    code that is nearest-neighbor upsampled before injection (detail-granularity
    ablation).
    """
    ch, cw = (s * h) // downsample, (s * w) // downsample
    if ch < 1 or cw < 1:
        raise ConfigurationError(f"latent downsample {downsample} leaves no spatial extent")
    g = torch.Generator().manual_seed(hash((view_index, seed)) % (2**63))
    values = 0.1 * torch.randn((3, ch, cw), generator=g)
    values.requires_grad_(True)
    return LatentCode(values, view_index)


def inject_shape_code(code: LatentCode, sh: int, sw: int) -> torch.Tensor:
    """Code at full HR resolution (nearest-neighbor upsampling when stored coarse)."""
    v = code.values
    if v.shape[1] == sh and v.shape[2] == sw:
        return v
    return nn.functional.interpolate(v[None], size=(sh, sw), mode="nearest")[0]


# ---------------------------------------------------------------------------
# generator backbone


@dataclass(frozen=True)
class BackboneConfig:
    scale: int = 4
    channels: int = 24
    n_blocks: int = 6


class _ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(torch.relu(self.conv1(x)))


class SRBackbone(nn.Module):
    """Residual conv generator: 6 input channels (upsampled LR + latent) -> 3."""

    def __init__(self, config: BackboneConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.head = nn.Conv2d(6, config.channels, 3, padding=1)
        self.blocks = nn.Sequential(*[_ResBlock(config.channels) for _ in range(config.n_blocks)])
        self.tail = nn.Conv2d(config.channels, 3, 3, padding=1)
        self._seeded_init(seed)

    def _seeded_init(self, seed: int):
        g = torch.Generator().manual_seed(seed)
        for mod in self.modules():
            if isinstance(mod, nn.Conv2d):
                fan_in = mod.in_channels * mod.kernel_size[0] * mod.kernel_size[1]
                bound = 1.0 / (fan_in ** 0.5)
                with torch.no_grad():
                    mod.weight.uniform_(-bound, bound, generator=g)
                    mod.bias.uniform_(-bound, bound, generator=g)

    @property
    def scale(self) -> int:
        return self.config.scale

    def flat_parameters(self) -> np.ndarray:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()]).numpy()


def sr_generate(backbone: SRBackbone, lr: torch.Tensor, code: LatentCode) -> torch.Tensor:
    """Pre-projection HR candidate, (s*H, s*W, 3); differentiable in code and weights."""
    s = backbone.scale
    h, w, _ = lr.shape
    up = replicate_upsample_t(lr, s)                        # (sH, sW, 3)
    z = inject_shape_code(code, s * h, s * w)               # (3, sH, sW)
    x = torch.cat([up.permute(2, 0, 1), z], dim=0)[None]    # (1, 6, sH, sW)
    residual = backbone.tail(backbone.blocks(backbone.head(x)))[0]
    return up + residual.permute(1, 2, 0)


def super_resolve_consistent(backbone: SRBackbone, lr: torch.Tensor, code: LatentCode,
                 kernel: BlurKernel) -> torch.Tensor:
    """Generator output projected onto exact LR consistency."""
    return consistency_project(sr_generate(backbone, lr, code), lr, kernel)


# ---------------------------------------------------------------------------
# backbone pretraining


def make_texture_corpus(n: int, h: int, w: int, seed: int) -> list[np.ndarray]:
    """Procedural HR texture images: smooth gradients + sinusoids + soft disks."""
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    corpus = []
    for _ in range(n):
        img = np.zeros((h, w, 3))
        base = rng.uniform(0.2, 0.8, size=3)
        grad = rng.uniform(-0.3, 0.3, size=(3, 2))
        for c in range(3):
            img[:, :, c] = base[c] + grad[c, 0] * xx + grad[c, 1] * yy
        for _ in range(rng.integers(1, 4)):
            fx, fy = rng.uniform(2, 9, size=2)
            ph = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.05, 0.2)
            img += amp * np.sin(2 * np.pi * (fx * xx + fy * yy) + ph)[..., None] * rng.uniform(0.3, 1.0, size=3)
        for _ in range(rng.integers(1, 4)):
            cx, cy, r = rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9), rng.uniform(0.05, 0.25)
            mask = 1.0 / (1.0 + np.exp((np.hypot(xx - cx, yy - cy) - r) * 40))
            img = img * (1 - mask[..., None]) + mask[..., None] * rng.uniform(0, 1, size=3)
        corpus.append(np.clip(img, 0, 1))
    return corpus


def loss_range_t(x: torch.Tensor) -> torch.Tensor:
    """Mean absolute excursion outside [0, 1]."""
    return (x - x.clamp(0.0, 1.0)).abs().mean()


def pretrain_sr_backbone(corpus: list[np.ndarray], config: BackboneConfig, seed: int,
                         steps: int = 400, lr_rate: float = 1e-3,
                         diversity_margin: float = 0.02) -> SRBackbone:
    """Train the generator on (downsampled texture, random code) -> texture pairs.

    Loss: L1 after projection + range penalty on the raw output + a hinge that
    keeps output sensitivity to the code from collapsing. Returns the frozen
    backbone.
    """
    if not corpus:
        raise ConfigurationError("empty pretraining corpus")
    s = config.scale
    for img in corpus:
        if img.shape[0] % s or img.shape[1] % s:
            raise ConfigurationError(f"corpus image {img.shape} not divisible by scale {s}")
    backbone = SRBackbone(config, seed=seed)
    if steps > 0:
        kernel = BlurKernel(s)
        g = torch.Generator().manual_seed(seed + 1)
        opt = torch.optim.Adam(backbone.parameters(), lr=lr_rate)
        hrs = [torch.as_tensor(img, dtype=torch.float32) for img in corpus]
        lrs = [box_downsample_t(hr, s) for hr in hrs]
        for _ in range(steps):
            idx = int(torch.randint(len(hrs), (1,), generator=g))
            hr, lo = hrs[idx], lrs[idx]
            sh, sw = hr.shape[0], hr.shape[1]
            codes = 0.1 * torch.randn((2, 3, sh, sw), generator=g)
            outs = [sr_generate(backbone, lo, LatentCode(codes[k], -1)) for k in range(2)]
            recon = sum((consistency_project(o, lo, kernel) - hr).abs().mean() for o in outs) / 2
            rng_pen = sum(loss_range_t(o) for o in outs) / 2
            diversity = torch.relu(diversity_margin - (outs[0] - outs[1]).abs().mean())
            loss = recon + rng_pen + diversity
            opt.zero_grad()
            loss.backward()
            opt.step()
    for p in backbone.parameters():
        p.requires_grad_(False)
    backbone.eval()
    return backbone


# ---------------------------------------------------------------------------
# persistence


def save_backbone(backbone: SRBackbone, path: str) -> None:
    arrays = {f"param_{i}": p.detach().numpy() for i, p in enumerate(backbone.parameters())}
    np.savez(path, version=BACKBONE_VERSION,
             config=json.dumps(asdict(backbone.config)), **arrays)


def load_backbone(path: str) -> SRBackbone:
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataIOError(f"unreadable backbone checkpoint {path}: {exc}") from exc
    if "version" not in data or int(data["version"]) != BACKBONE_VERSION:
        raise DataIOError(f"bad or missing version in backbone checkpoint {path}")
    backbone = SRBackbone(BackboneConfig(**json.loads(str(data["config"]))))
    with torch.no_grad():
        for i, p in enumerate(backbone.parameters()):
            p.copy_(torch.as_tensor(data[f"param_{i}"]))
        for p in backbone.parameters():
            p.requires_grad_(False)
    backbone.eval()
    return backbone
