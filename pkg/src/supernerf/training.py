"""Optimization stages: LR-field pretraining and the mutual-learning loop.

The mutual loop jointly optimizes the HR field and the per-view latent
codes: the frozen LR field supervises early (weight alpha(t)), the maturing
HR field takes over as alpha decays, and the latent-controlled SR output is
the shared target that couples the two.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch

from .errors import ConfigurationError, NumericalStateError
from .fields import FieldConfig, RadianceField, generate_rays, render_image, render_rays
from .latent_sr import (BlurKernel, LatentCode, LatentCodeStore, SRBackbone,
                        super_resolve_consistent, init_latent, loss_range_t, sr_generate, consistency_project)
from .scene import MultiViewDataset, RayBatch, View, box_downsample

BUNDLE_VERSION = 1


# ---------------------------------------------------------------------------
# schedule and losses


@dataclass(frozen=True)
class AlphaSchedule:
    kind: str = "exponential"
    tau: float = 1000.0
    floor: float = 0.0

    def __post_init__(self):
        if self.kind != "exponential":
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.tau <= 0 or self.floor < 0:
            raise ConfigurationError("require tau > 0 and floor >= 0")


def alpha(schedule: AlphaSchedule, t: int) -> float:
    return max(schedule.floor, math.exp(-t / schedule.tau))


def loss_sr(c_ln: torch.Tensor, c_hn: torch.Tensor, c_hr: torch.Tensor, a: float) -> torch.Tensor:
    """Alpha-blended mean absolute error against the SR output."""
    if c_ln.shape != c_hr.shape or c_hn.shape != c_hr.shape:
        raise ConfigurationError(
            f"shape mismatch: {tuple(c_ln.shape)} / {tuple(c_hn.shape)} / {tuple(c_hr.shape)}")
    return a * (c_ln - c_hr).abs().mean() + (1.0 - a) * (c_hn - c_hr).abs().mean()


def loss_range(x: torch.Tensor) -> torch.Tensor:
    return loss_range_t(x)


@dataclass
class LossReport:
    t: int
    view_index: int
    alpha_t: float
    loss_sr: float
    loss_range: float
    loss_total: float
    wall_ms: float = 0.0

    def log_line(self) -> str:
        return (f"{self.t} {self.view_index} {self.alpha_t:.8g} "
                f"{self.loss_sr:.17g} {self.loss_range:.17g} {self.loss_total:.17g} "
                f"{self.wall_ms:.1f}")


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    rays_per_step: int = 1024
    field_lr: float = 5e-4
    latent_lr: float = 1e-2
    seed: int = 0
    checkpoint_every: int = 500
    alpha_schedule: AlphaSchedule | None = None   # default: tau = iterations / 5
    use_lr_guidance: bool = True                  # False = the no-LR-field ablation
    hybrid_hr_fraction: float = 0.0
    latent_downsample: int = 1                    # {1, 4, 16}: coarser stored codes
    range_penalty_pre_projection: bool = True

    def __post_init__(self):
        if self.iterations <= 0 or self.rays_per_step <= 0:
            raise ConfigurationError("iterations and rays_per_step must be positive")
        if self.field_lr <= 0 or self.latent_lr <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not 0.0 <= self.hybrid_hr_fraction <= 1.0:
            raise ConfigurationError("hybrid_hr_fraction must lie in [0, 1]")
        if self.latent_downsample not in (1, 4, 16):
            raise ConfigurationError("latent_downsample must be one of {1, 4, 16}")

    def schedule(self) -> AlphaSchedule:
        return self.alpha_schedule or AlphaSchedule(tau=self.iterations / 5)

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def resume_hash(self) -> str:
        # iteration count may legitimately grow when extending a run
        fields = asdict(self)
        fields.pop("iterations")
        blob = json.dumps(fields, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class PretrainConfig:
    iterations: int = 800
    rays_per_step: int = 1024
    learning_rate: float = 1e-3
    seed: int = 0


# ---------------------------------------------------------------------------
# dataset tag handling


def to_lr_view(view: View, s: int) -> View:
    img = box_downsample(view.image, s)
    pose = view.pose.scaled(view.pose.height // s, view.pose.width // s)
    return View(pose, img, "LR")


def apply_hybrid_fraction(dataset: MultiViewDataset, fraction: float) -> MultiViewDataset:
    """Keep an evenly spaced ``fraction`` of views at HR ground truth, degrade the rest.

    Requires all views of the source dataset to carry HR images.
    """
    if any(v.tag != "HR" for v in dataset.views):
        raise ConfigurationError("hybrid splitting needs an all-HR source dataset")
    n = dataset.n_views
    n_hr = int(round(fraction * n))
    keep = set(np.round(np.linspace(0, n - 1, n_hr)).astype(int)) if n_hr else set()
    views = [v if i in keep else to_lr_view(v, dataset.scale_factor)
             for i, v in enumerate(dataset.views)]
    return MultiViewDataset(views, dataset.scale_factor)


def _lr_views(dataset: MultiViewDataset) -> list[View]:
    """All views expressed at LR (degrading HR-tagged ones)."""
    return [v if v.tag == "LR" else to_lr_view(v, dataset.scale_factor)
            for v in dataset.views]


# ---------------------------------------------------------------------------
# LR field pretraining


def pretrain_lr_nerf(dataset: MultiViewDataset, field_config: FieldConfig,
                     config: PretrainConfig) -> RadianceField:
    """Fit the small field to the LR views with photometric MSE; freeze it."""
    views = _lr_views(dataset)
    if len(views) < 2:
        raise ConfigurationError("need at least 2 LR views")
    lr_field = RadianceField(field_config, seed=config.seed)
    if config.iterations == 0:
        return _freeze(lr_field)
    origins, dirs, colors = [], [], []
    near, far = views[0].pose.near, views[0].pose.far
    for v in views:
        rays = generate_rays(v.pose, v.pose.height, v.pose.width)
        origins.append(rays.origins)
        dirs.append(rays.directions)
        colors.append(v.image.reshape(-1, 3))
    pool_o = np.concatenate(origins)
    pool_d = np.concatenate(dirs)
    pool_c = torch.as_tensor(np.concatenate(colors), dtype=torch.float32)
    g = torch.Generator().manual_seed(config.seed)
    opt = torch.optim.Adam(lr_field.parameters(), lr=config.learning_rate)
    for step in range(config.iterations):
        idx = torch.randint(pool_o.shape[0], (config.rays_per_step,), generator=g).numpy()
        batch = RayBatch(pool_o[idx], pool_d[idx], None, -1, near, far)
        color, _, _, _ = render_rays(lr_field, batch, generator=g)
        loss = ((color - pool_c[idx]) ** 2).mean()
        if not torch.isfinite(loss):
            raise NumericalStateError(f"LR pretraining diverged at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return _freeze(lr_field)


def _freeze(f: torch.nn.Module):
    for p in f.parameters():
        p.requires_grad_(False)
    f.eval()
    return f


# ---------------------------------------------------------------------------
# mutual learning


class TrainState:
    """Everything the mutual-learning loop mutates, plus its frozen context."""

    def __init__(self, dataset: MultiViewDataset, lr_field: RadianceField | None,
                 backbone: SRBackbone, hr_field_config: FieldConfig, config: TrainConfig):
        if config.use_lr_guidance and lr_field is None:
            raise ConfigurationError("LR guidance enabled but no LR field given")
        self.dataset = dataset
        self.config = config
        self.lr_field = lr_field
        self.backbone = backbone
        self.kernel = BlurKernel(dataset.scale_factor)
        self.schedule = config.schedule()
        self.hr_field = RadianceField(hr_field_config, seed=config.seed)
        lr_h, lr_w = dataset.lr_shape()
        s = dataset.scale_factor
        self.hr_h, self.hr_w = lr_h * s, lr_w * s

        self.store = LatentCodeStore()
        for i, v in enumerate(dataset.views):
            if v.tag == "LR":
                if v.image.shape[:2] != (lr_h, lr_w):
                    raise ConfigurationError(f"view {i}: LR image shape mismatch")
                self.store.add(init_latent(i, lr_h, lr_w, s, config.seed,
                                           downsample=config.latent_downsample))

        self.field_opt = torch.optim.Adam(self.hr_field.parameters(), lr=config.field_lr)
        self.latent_opt = (torch.optim.Adam(self.store.tensors(), lr=config.latent_lr)
                           if len(self.store) else None)
        self.g_view = torch.Generator().manual_seed(config.seed + 101)
        self.g_sample = torch.Generator().manual_seed(config.seed + 202)
        self.t = 0

        # per-view constants: HR-resolution rays, targets
        self._rays = []
        self._lr_images = []
        self._hr_truth = []
        for i, v in enumerate(dataset.views):
            hr_pose = v.pose.scaled(self.hr_h, self.hr_w)
            self._rays.append(generate_rays(hr_pose, self.hr_h, self.hr_w, view_index=i))
            if v.tag == "LR":
                self._lr_images.append(torch.as_tensor(v.image, dtype=torch.float32))
                self._hr_truth.append(None)
            else:
                self._lr_images.append(None)
                self._hr_truth.append(torch.as_tensor(v.image, dtype=torch.float32))
        # frozen LR-field renders, the constant early-supervision targets
        self._c_ln = None
        if config.use_lr_guidance:
            self._c_ln = [
                torch.as_tensor(
                    render_image(self.lr_field, v.pose.scaled(self.hr_h, self.hr_w),
                                 self.hr_h, self.hr_w),
                    dtype=torch.float32)
                for v in dataset.views
            ]


def mutual_learning_step(state: TrainState, view_index: int, t: int) -> LossReport:
    """One joint update of the HR field and (for LR views) the view's latent code."""
    started = time.perf_counter()
    cfg = state.config
    a = alpha(state.schedule, t) if cfg.use_lr_guidance else 0.0
    rays = state._rays[view_index]
    n_pix = rays.origins.shape[0]
    idx_t = torch.randint(n_pix, (min(cfg.rays_per_step, n_pix),), generator=state.g_sample)
    idx = idx_t.numpy()

    range_val = torch.zeros(())
    if state._hr_truth[view_index] is not None:
        c_hr_full = state._hr_truth[view_index]
        c_hr_sel = c_hr_full.reshape(-1, 3)[idx_t]
    else:
        lr_img = state._lr_images[view_index]
        code = state.store[view_index]
        candidate = sr_generate(state.backbone, lr_img, code)
        projected = consistency_project(candidate, lr_img, state.kernel)
        range_val = loss_range_t(candidate if cfg.range_penalty_pre_projection else projected)
        c_hr_sel = projected.reshape(-1, 3)[idx_t]

    sub = RayBatch(rays.origins[idx], rays.directions[idx], None, view_index,
                   rays.near, rays.far)
    c_hn, _, _, _ = render_rays(state.hr_field, sub, generator=state.g_sample)
    if state._c_ln is not None:
        c_ln = state._c_ln[view_index].reshape(-1, 3)[idx_t]
    else:
        c_ln = torch.zeros_like(c_hn)
    sr_val = loss_sr(c_ln, c_hn, c_hr_sel, a)
    total = sr_val + range_val
    if not torch.isfinite(total):
        raise NumericalStateError(f"non-finite loss at step {t}")

    state.field_opt.zero_grad(set_to_none=True)
    if state.latent_opt is not None:
        state.latent_opt.zero_grad(set_to_none=True)
    total.backward()
    state.field_opt.step()
    if state.latent_opt is not None:
        state.latent_opt.step()

    sr_f, range_f = float(sr_val.detach()), float(range_val.detach())
    return LossReport(t=t, view_index=view_index, alpha_t=a, loss_sr=sr_f,
                      loss_range=range_f, loss_total=sr_f + range_f,
                      wall_ms=(time.perf_counter() - started) * 1e3)


# ---------------------------------------------------------------------------
# checkpoint bundles


@dataclass
class CheckpointBundle:
    hr_field: RadianceField
    latent_store: LatentCodeStore
    t: int
    config_hash: str


def save_bundle(state: TrainState, path: str) -> None:
    payload = {
        "version": BUNDLE_VERSION,
        "t": state.t,
        "config_hash": state.config.hash(),
        "resume_hash": state.config.resume_hash(),
        "hr_field_config": asdict(state.hr_field.config),
        "hr_field_state": state.hr_field.state_dict(),
        "field_opt_state": state.field_opt.state_dict(),
        "latent_values": state.store.state(),
        "latent_opt_state": state.latent_opt.state_dict() if state.latent_opt else None,
        "g_view": state.g_view.get_state(),
        "g_sample": state.g_sample.get_state(),
    }
    torch.save(payload, path)


def load_bundle_into(state: TrainState, path: str) -> None:
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != BUNDLE_VERSION:
        raise ConfigurationError(f"unsupported bundle version in {path}")
    if payload["resume_hash"] != state.config.resume_hash():
        raise ConfigurationError("checkpoint was produced under a different config")
    state.hr_field.load_state_dict(payload["hr_field_state"])
    state.field_opt.load_state_dict(payload["field_opt_state"])
    for i, values in payload["latent_values"].items():
        with torch.no_grad():
            state.store[i].values.copy_(values)
    if state.latent_opt is not None:
        state.latent_opt.load_state_dict(payload["latent_opt_state"])
    state.g_view.set_state(payload["g_view"])
    state.g_sample.set_state(payload["g_sample"])
    state.t = payload["t"]


def load_bundle(path: str) -> CheckpointBundle:
    """Load a training checkpoint for rendering / evaluation (no optimizer state)."""
    payload = torch.load(path, weights_only=False)
    if payload.get("version") != BUNDLE_VERSION:
        raise ConfigurationError(f"unsupported bundle version in {path}")
    hr_field = RadianceField(FieldConfig(**payload["hr_field_config"]))
    hr_field.load_state_dict(payload["hr_field_state"])
    _freeze(hr_field)
    store = LatentCodeStore()
    for i, values in payload["latent_values"].items():
        store.add(LatentCode(values, i, learnable=False))
    return CheckpointBundle(hr_field, store, payload["t"], payload["config_hash"])


def train_super_nerf(dataset: MultiViewDataset, lr_field: RadianceField | None,
                     backbone: SRBackbone, hr_field_config: FieldConfig,
                     config: TrainConfig, log_path: str | None = None,
                     checkpoint_dir: str | None = None,
                     resume_from: str | None = None,
                     reports_out: list[LossReport] | None = None) -> CheckpointBundle:
    """Run the mutual-learning loop; resumable and deterministic under the seed."""
    lr_snapshot = lr_field.flat_parameters().copy() if lr_field is not None else None
    bb_snapshot = backbone.flat_parameters().copy()
    state = TrainState(dataset, lr_field, backbone, hr_field_config, config)
    if resume_from is not None:
        load_bundle_into(state, resume_from)
    log_fh = open(log_path, "a") if log_path else None
    try:
        while state.t < config.iterations:
            t = state.t
            view = int(torch.randint(dataset.n_views, (1,), generator=state.g_view))
            report = mutual_learning_step(state, view, t)
            state.t = t + 1
            if reports_out is not None:
                reports_out.append(report)
            if log_fh:
                log_fh.write(report.log_line() + "\n")
            if checkpoint_dir and state.t % config.checkpoint_every == 0:
                save_bundle(state, os.path.join(checkpoint_dir, f"bundle_{state.t:06d}.pt"))
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_dir:
        save_bundle(state, os.path.join(checkpoint_dir, "bundle_final.pt"))
    if lr_snapshot is not None:
        assert np.array_equal(lr_field.flat_parameters(), lr_snapshot), "LR field drifted"
    assert np.array_equal(backbone.flat_parameters(), bb_snapshot), "backbone drifted"
    return CheckpointBundle(state.hr_field, state.store, state.t, config.hash())
