"""Quantitative evaluation: PSNR, LR-consistency residual, and cross-view
consistency via depth-based warping, plus report / plot emission."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataIOError, ShapeError
from .fields import RadianceField, render_image
from .scene import CameraPose, box_downsample

BUCKET_EDGES = (6.5, 12.5)
BUCKET_LABELS = ("3 pix", "10 pix", "15 pix")

MIN_ACC_WEIGHT = 0.1       # rays with less compositing weight are treated as empty
DEPTH_CHECK_REL_TOL = 0.05


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) at unit peak; +inf when the images coincide."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def format_psnr(value: float) -> str:
    return "identical" if math.isinf(value) else f"{value:.4f}"


def lr_consistency_residual(hr: np.ndarray, lr: np.ndarray, s: int) -> float:
    down = box_downsample(np.asarray(hr), s)
    if down.shape != np.asarray(lr).shape:
        raise ShapeError(f"downsampled {down.shape} vs LR {np.asarray(lr).shape}")
    return float(np.max(np.abs(down - lr)))


# ---------------------------------------------------------------------------
# warping


@dataclass
class WarpField:
    source_view: int
    target_view: int
    mapping: np.ndarray        # (H, W, 2) target (u, v) per source pixel
    validity_mask: np.ndarray  # (H, W) bool

    @property
    def mask_fraction(self) -> float:
        return float(self.validity_mask.mean())

    def mean_displacement(self) -> float:
        """Mean pixel displacement magnitude over valid pixels."""
        if not self.validity_mask.any():
            return math.nan
        h, w = self.validity_mask.shape
        v, u = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        disp = self.mapping - np.stack([u, v], axis=-1)
        return float(np.linalg.norm(disp[self.validity_mask], axis=-1).mean())


def bilinear_sample(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample (H, W, C) or (H, W) at sub-pixel (u, v) coords of shape (..., 2)."""
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    x = np.clip(coords[..., 0] - 0.5, 0, w - 1)
    y = np.clip(coords[..., 1] - 0.5, 0, h - 1)
    x0, y0 = np.floor(x).astype(int), np.floor(y).astype(int)
    x1, y1 = np.minimum(x0 + 1, w - 1), np.minimum(y0 + 1, h - 1)
    fx, fy = (x - x0)[..., None], (y - y0)[..., None]
    out = (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x1] * fx * (1 - fy)
           + img[y1, x0] * (1 - fx) * fy + img[y1, x1] * fx * fy)
    return out[..., 0] if squeeze else out


def _project(pose: CameraPose, points: np.ndarray):
    """World points -> (u, v) pixel coords, depth along ray, in-front flag."""
    cam = (points - pose.position) @ pose.orientation.T
    z = -cam[..., 2]
    in_front = z > 1e-9
    zs = np.where(in_front, z, 1.0)
    u = pose.width / 2 + pose.focal * cam[..., 0] / zs
    v = pose.height / 2 - pose.focal * cam[..., 1] / zs
    depth = np.linalg.norm(points - pose.position, axis=-1)
    return np.stack([u, v], axis=-1), depth, in_front


def warp_from_depth(pose_i: CameraPose, pose_j: CameraPose,
                    depth_i: np.ndarray, acc_i: np.ndarray,
                    depth_j: np.ndarray, acc_j: np.ndarray,
                    source_view: int = -1, target_view: int = -1) -> WarpField:
    """Warp computed from rendered depth-expectation and weight maps.

    Pixels are masked when the source ray carries too little weight, the
    reprojection falls outside the target view, the target ray is empty, or
    the symmetric depth check fails.
    """
    h, w = depth_i.shape
    same_pose = (np.array_equal(pose_i.position, pose_j.position)
                 and np.array_equal(pose_i.orientation, pose_j.orientation))
    v, u = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    if same_pose:
        return WarpField(source_view, target_view, np.stack([u, v], axis=-1),
                         np.ones((h, w), dtype=bool))
    f = pose_i.focal
    dirs_cam = np.stack([(u - pose_i.width / 2) / f, (pose_i.height / 2 - v) / f,
                         -np.ones_like(u)], axis=-1)
    dirs = dirs_cam @ pose_i.orientation
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    points = pose_i.position + depth_i[..., None] * dirs
    mapping, reproj_depth, in_front = _project(pose_j, points)
    inside = ((mapping[..., 0] >= 0) & (mapping[..., 0] <= pose_j.width)
              & (mapping[..., 1] >= 0) & (mapping[..., 1] <= pose_j.height))
    target_depth = bilinear_sample(depth_j, mapping)
    target_acc = bilinear_sample(acc_j, mapping)
    depth_ok = np.abs(reproj_depth - target_depth) / np.maximum(target_depth, 1e-9) \
        <= DEPTH_CHECK_REL_TOL
    valid = (in_front & inside & depth_ok
             & (acc_i >= MIN_ACC_WEIGHT) & (target_acc >= MIN_ACC_WEIGHT))
    return WarpField(source_view, target_view, mapping, valid)


def build_warp(field: RadianceField, pose_i: CameraPose, pose_j: CameraPose,
               target_h: int, target_w: int,
               source_view: int = -1, target_view: int = -1) -> WarpField:
    """Back-project view i through the field's depth expectation into view j."""
    _, depth_i, acc_i = render_image(field, pose_i.scaled(target_h, target_w),
                                     target_h, target_w, with_aux=True)
    _, depth_j, acc_j = render_image(field, pose_j.scaled(target_h, target_w),
                                     target_h, target_w, with_aux=True)
    return warp_from_depth(pose_i.scaled(target_h, target_w), pose_j.scaled(target_h, target_w),
                           depth_i, acc_i, depth_j, acc_j, source_view, target_view)


def masked_mae(img_i: np.ndarray, warped_j: np.ndarray, mask: np.ndarray) -> float:
    return float(np.abs(img_i - warped_j)[mask].mean())


def warped_consistency(img_i: np.ndarray, img_j: np.ndarray, warp: WarpField,
                       metric=masked_mae) -> float | None:
    """Distance between view i and view j resampled through the warp.

    Returns None (the no-overlap sentinel) when no pixel is valid.
    """
    if not warp.validity_mask.any():
        return None
    warped = bilinear_sample(np.asarray(img_j), warp.mapping)
    return metric(np.asarray(img_i), warped, warp.validity_mask)


def bucket_label(mean_displacement: float) -> str:
    if mean_displacement < BUCKET_EDGES[0]:
        return BUCKET_LABELS[0]
    if mean_displacement < BUCKET_EDGES[1]:
        return BUCKET_LABELS[1]
    return BUCKET_LABELS[2]


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    run_id: str
    config_hash: str
    psnr_db: float | None = None
    lr_residual: float | None = None
    pairs: list[dict] = field(default_factory=list)  # per view pair records
    extras: dict = field(default_factory=dict)

    def add_pair(self, i: int, j: int, value: float | None, mean_disp: float,
                 mask_fraction: float, label: str = "method"):
        self.pairs.append({
            "source": i, "target": j, "series": label,
            "value": value, "mean_displacement": mean_disp,
            "bucket": bucket_label(mean_disp) if not math.isnan(mean_disp) else "n/a",
            "mask_fraction": mask_fraction,
        })

    def aggregate(self, label: str = "method") -> float | None:
        vals = [p["value"] for p in self.pairs
                if p["series"] == label and p["value"] is not None]
        return float(np.mean(vals)) if vals else None

    def bucket_aggregates(self, label: str = "method") -> dict[str, float]:
        out = {}
        for bucket in BUCKET_LABELS:
            vals = [p["value"] for p in self.pairs
                    if p["series"] == label and p["bucket"] == bucket and p["value"] is not None]
            if vals:
                out[bucket] = float(np.mean(vals))
        return out

    def to_dict(self) -> dict:
        series = sorted({p["series"] for p in self.pairs})
        return {
            "run_id": self.run_id,
            "config_hash": self.config_hash,
            "psnr_db": None if self.psnr_db is None
            else ("identical" if math.isinf(self.psnr_db) else self.psnr_db),
            "lr_residual": self.lr_residual,
            "warped_consistency": {
                label: {"aggregate": self.aggregate(label),
                        "buckets": self.bucket_aggregates(label)}
                for label in series
            },
            "pairs": self.pairs,
            "extras": self.extras,
        }


def read_loss_log(path: str) -> np.ndarray:
    """Loss log as an (N, 7) array: t, view, alpha, sr, range, total, ms."""
    rows = []
    with open(path) as fh:
        for ln in fh:
            if ln.strip():
                rows.append([float(x) for x in ln.split()])
    return np.asarray(rows)


def emit_report(report: MetricReport, out_dir: str, loss_log: str | None = None) -> list[str]:
    """Write metrics.json, metrics.txt, and plots; returns the written paths."""
    try:
        os.makedirs(out_dir, exist_ok=True)
        plots_dir = os.path.join(out_dir, "plots")
        os.makedirs(plots_dir, exist_ok=True)
    except OSError as exc:
        raise DataIOError(f"cannot create report directory {out_dir}: {exc}") from exc
    written = []

    json_path = os.path.join(out_dir, "metrics.json")
    with open(json_path, "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    written.append(json_path)

    txt_path = os.path.join(out_dir, "metrics.txt")
    lines = [f"run {report.run_id}  config {report.config_hash}"]
    if report.psnr_db is not None:
        lines.append(f"psnr: {format_psnr(report.psnr_db)} dB")
    if report.lr_residual is not None:
        lines.append(f"lr residual (max abs): {report.lr_residual:.3e}")
    lines.append(f"{'src':>4} {'dst':>4} {'series':>12} {'value':>12} {'disp':>8} "
                 f"{'bucket':>8} {'mask':>6}")
    for p in report.pairs:
        val = "no-overlap" if p["value"] is None else f"{p['value']:.6f}"
        lines.append(f"{p['source']:>4} {p['target']:>4} {p['series']:>12} {val:>12} "
                     f"{p['mean_displacement']:>8.2f} {p['bucket']:>8} {p['mask_fraction']:>6.2f}")
    with open(txt_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    written.append(txt_path)

    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if loss_log is not None and os.path.exists(loss_log):
        data = read_loss_log(loss_log)
        if data.size:
            fig, ax = plt.subplots(figsize=(7, 4))
            ax.plot(data[:, 0], data[:, 5], lw=0.5, alpha=0.4, label="total")
            kernel = np.ones(51) / 51
            if data.shape[0] > 51:
                smooth = np.convolve(data[:, 5], kernel, mode="valid")
                ax.plot(data[25:25 + smooth.size, 0], smooth, lw=1.5, label="total (smoothed)")
            ax.set_xlabel("iteration")
            ax.set_ylabel("loss")
            ax.legend()
            path = os.path.join(plots_dir, "loss_curve.png")
            fig.savefig(path, dpi=110)
            plt.close(fig)
            written.append(path)

    series = sorted({p["series"] for p in report.pairs})
    if series:
        fig, ax = plt.subplots(figsize=(6, 4))
        width = 0.8 / len(series)
        xs = np.arange(len(BUCKET_LABELS))
        for k, label in enumerate(series):
            buckets = report.bucket_aggregates(label)
            vals = [buckets.get(b, 0.0) for b in BUCKET_LABELS]
            ax.bar(xs + k * width, vals, width, label=label)
        ax.set_xticks(xs + 0.4 - width / 2)
        ax.set_xticklabels(BUCKET_LABELS)
        ax.set_ylabel("warped consistency (lower = better)")
        ax.legend()
        path = os.path.join(plots_dir, "consistency_buckets.png")
        fig.savefig(path, dpi=110)
        plt.close(fig)
        written.append(path)
    return written
