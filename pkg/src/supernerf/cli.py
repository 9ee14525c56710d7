"""Command-line pipeline: gen-data, pretrain-lr, pretrain-sr, train, render,
eval, ablate-latent. Every command writes a run manifest into its output
directory; all randomness is governed by --seed.

Exit codes: 0 success, 2 usage / configuration error, 1 runtime failure.
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
import sys
import time

import click
import cv2
import numpy as np

from . import evaluation, fields, latent_sr, scene, training
from .errors import ConfigurationError, SuperNerfError


def _read_config_file(path: str) -> dict[str, str]:
    """Flat key-value text: one `key value` pair per line, '#' comments."""
    out = {}
    with open(path) as fh:
        for ln in fh:
            ln = ln.split("#", 1)[0].strip()
            if not ln:
                continue
            parts = ln.split(None, 1)
            if len(parts) != 2:
                raise click.UsageError(f"config line needs 'key value': {ln!r}")
            out[parts[0]] = parts[1].strip()
    return out


def _merge_config(ctx: click.Context, config_path: str | None, params: dict) -> dict:
    """Config-file values override defaults; explicit flags override both."""
    if not config_path:
        return params
    file_vals = _read_config_file(config_path)
    known = set(params)
    for key, raw in file_vals.items():
        if key not in known:
            raise click.UsageError(f"unknown config key {key!r}")
        src = ctx.get_parameter_source(key)
        if src is not None and src.name != "DEFAULT":
            continue  # explicit flag wins
        current = params[key]
        if isinstance(current, bool):
            params[key] = raw.lower() in ("1", "true", "yes")
        elif current is None:
            params[key] = raw
        else:
            params[key] = type(current)(raw)
    return params


def _source_revision() -> str:
    try:
        return subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True,
                              text=True, timeout=5,
                              cwd=os.path.dirname(__file__)).stdout.strip() or "unknown"
    except OSError:
        return "unknown"


def write_manifest(out_dir: str, command: str, params: dict, outputs: list[str]) -> str:
    os.makedirs(out_dir, exist_ok=True)
    blob = json.dumps(params, sort_keys=True, default=str).encode()
    manifest = {
        "command": command,
        "config_hash": hashlib.sha256(blob).hexdigest()[:16],
        "seed": params.get("seed"),
        "source_revision": _source_revision(),
        "started_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "parameters": params,
        "outputs": outputs,
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2, default=str)
        fh.write("\n")
    return path


def _run(fn):
    """Map package errors onto the exit-code contract."""
    try:
        fn()
    except ConfigurationError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(2)
    except SuperNerfError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(1)


@click.group()
def main():
    """Super-resolve a radiance field from low-resolution multi-view images."""


_common = [
    click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                 help="flat key-value config file; explicit flags override it"),
    click.option("--seed", type=int, default=0, show_default=True),
    click.option("--out", "out_dir", type=click.Path(), required=True),
]


def common_options(fn):
    for opt in reversed(_common):
        fn = opt(fn)
    return fn


# ---------------------------------------------------------------------------


@main.command("gen-data")
@common_options
@click.option("--views", type=int, default=8, show_default=True)
@click.option("--test-views", type=int, default=4, show_default=True)
@click.option("--lr-size", type=int, default=32, show_default=True,
              help="LR image side; HR side is scale * lr-size")
@click.option("--scale", type=int, default=4, show_default=True)
@click.option("--bit-depth", type=int, default=8, show_default=True)
@click.pass_context
def cmd_gen_data(ctx, config_path, seed, out_dir, views, test_views, lr_size, scale, bit_depth):
    """Generate the synthetic train/test datasets (HR ground truth + poses)."""
    params = _merge_config(ctx, config_path, dict(
        seed=seed, out_dir=out_dir, views=views, test_views=test_views,
        lr_size=lr_size, scale=scale, bit_depth=bit_depth))

    def body():
        spec = scene.default_scene_spec()
        hr = params["scale"] * params["lr_size"]
        train = scene.generate_synthetic_scene(spec, params["views"], params["seed"],
                                               hr, hr, params["scale"])
        test = scene.generate_synthetic_scene(spec, max(2, params["test_views"]),
                                              params["seed"] + 1, hr, hr, params["scale"],
                                              phase_offset=np.pi / params["views"])
        train_dir = os.path.join(params["out_dir"], "train")
        test_dir = os.path.join(params["out_dir"], "test")
        scene.save_dataset(train, train_dir, bit_depth=params["bit_depth"])
        scene.save_dataset(test, test_dir, bit_depth=params["bit_depth"])
        write_manifest(params["out_dir"], "gen-data", params, [train_dir, test_dir])
        click.echo(f"wrote {train.n_views} train / {test.n_views} test views under {params['out_dir']}")

    _run(body)


@main.command("pretrain-lr")
@common_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--iterations", type=int, default=800, show_default=True)
@click.option("--rays-per-step", type=int, default=1024, show_default=True)
@click.option("--learning-rate", type=float, default=1e-3, show_default=True)
@click.option("--field-freqs", type=int, default=6, show_default=True)
@click.option("--field-width", type=int, default=144, show_default=True)
@click.option("--field-layers", type=int, default=4, show_default=True)
@click.option("--field-samples", type=int, default=64, show_default=True)
@click.pass_context
def cmd_pretrain_lr(ctx, config_path, seed, out_dir, data_dir, iterations, rays_per_step,
                    learning_rate, field_freqs, field_width, field_layers, field_samples):
    """Pretrain the small field on the LR views; write its checkpoint."""
    params = _merge_config(ctx, config_path, dict(
        seed=seed, out_dir=out_dir, data_dir=data_dir, iterations=iterations,
        rays_per_step=rays_per_step, learning_rate=learning_rate, field_freqs=field_freqs,
        field_width=field_width, field_layers=field_layers, field_samples=field_samples))

    def body():
        dataset = scene.load_dataset(params["data_dir"])
        fc = fields.FieldConfig(params["field_freqs"], params["field_width"],
                                params["field_layers"], params["field_samples"], "LR")
        cfg = training.PretrainConfig(params["iterations"], params["rays_per_step"],
                                      params["learning_rate"], params["seed"])
        lr_field = training.pretrain_lr_nerf(dataset, fc, cfg)
        os.makedirs(params["out_dir"], exist_ok=True)
        ckpt = os.path.join(params["out_dir"], "lr_field.npz")
        fields.save_field(lr_field, ckpt)
        write_manifest(params["out_dir"], "pretrain-lr", params, [ckpt])
        click.echo(f"wrote {ckpt}")

    _run(body)


@main.command("pretrain-sr")
@common_options
@click.option("--scale", type=int, default=4, show_default=True)
@click.option("--steps", type=int, default=400, show_default=True)
@click.option("--corpus-size", type=int, default=40, show_default=True)
@click.option("--texture-size", type=int, default=64, show_default=True)
@click.option("--channels", type=int, default=24, show_default=True)
@click.option("--blocks", type=int, default=6, show_default=True)
@click.pass_context
def cmd_pretrain_sr(ctx, config_path, seed, out_dir, scale, steps, corpus_size,
                    texture_size, channels, blocks):
    """Pretrain the latent-conditioned SR generator on procedural textures."""
    params = _merge_config(ctx, config_path, dict(
        seed=seed, out_dir=out_dir, scale=scale, steps=steps, corpus_size=corpus_size,
        texture_size=texture_size, channels=channels, blocks=blocks))

    def body():
        corpus = latent_sr.make_texture_corpus(params["corpus_size"], params["texture_size"],
                                               params["texture_size"], params["seed"])
        cfg = latent_sr.BackboneConfig(params["scale"], params["channels"], params["blocks"])
        backbone = latent_sr.pretrain_sr_backbone(corpus, cfg, params["seed"],
                                                  steps=params["steps"])
        os.makedirs(params["out_dir"], exist_ok=True)
        ckpt = os.path.join(params["out_dir"], "sr_backbone.npz")
        latent_sr.save_backbone(backbone, ckpt)
        write_manifest(params["out_dir"], "pretrain-sr", params, [ckpt])
        click.echo(f"wrote {ckpt}")

    _run(body)


def _train_body(params):
    dataset = scene.load_dataset(params["data_dir"])
    dataset = training.apply_hybrid_fraction(dataset, params["hybrid_hr_fraction"])
    lr_field = None
    if not params["no_lr_nerf"]:
        lr_field = fields.load_field(params["lr_field"])
    backbone = latent_sr.load_backbone(params["backbone"])
    fc = fields.FieldConfig(params["field_freqs"], params["field_width"],
                            params["field_layers"], params["field_samples"], "HR")
    cfg = training.TrainConfig(
        iterations=params["iterations"], rays_per_step=params["rays_per_step"],
        field_lr=params["field_lr"], latent_lr=params["latent_lr"], seed=params["seed"],
        checkpoint_every=params["checkpoint_every"],
        use_lr_guidance=not params["no_lr_nerf"],
        hybrid_hr_fraction=params["hybrid_hr_fraction"],
        latent_downsample=params["latent_downsample"])
    ckpt_dir = os.path.join(params["out_dir"], "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    log_path = os.path.join(params["out_dir"], "loss_log.txt")
    bundle = training.train_super_nerf(
        dataset, lr_field, backbone, fc, cfg, log_path=log_path,
        checkpoint_dir=ckpt_dir, resume_from=params.get("resume") or None)
    outputs = [os.path.join(ckpt_dir, "bundle_final.pt"), log_path]
    manifest_params = dict(params)
    manifest_params["n_latent_codes"] = len(bundle.latent_store)
    write_manifest(params["out_dir"], params.get("_command", "train"),
                   manifest_params, outputs)
    return bundle


@main.command("train")
@common_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--lr-field", type=click.Path(), default=None,
              help="LR field checkpoint (required unless --no-lr-nerf)")
@click.option("--backbone", type=click.Path(exists=True), required=True)
@click.option("--iterations", type=int, default=2000, show_default=True)
@click.option("--rays-per-step", type=int, default=1024, show_default=True)
@click.option("--field-lr", type=float, default=5e-4, show_default=True)
@click.option("--latent-lr", type=float, default=1e-2, show_default=True)
@click.option("--checkpoint-every", type=int, default=500, show_default=True)
@click.option("--hybrid-hr-fraction", type=float, default=0.0, show_default=True)
@click.option("--no-lr-nerf", is_flag=True, help="ablation: drop the LR-field supervision")
@click.option("--latent-downsample", type=click.Choice(["1", "4", "16"]), default="1")
@click.option("--resume", type=click.Path(exists=True), default=None)
@click.option("--field-freqs", type=int, default=10, show_default=True)
@click.option("--field-width", type=int, default=256, show_default=True)
@click.option("--field-layers", type=int, default=6, show_default=True)
@click.option("--field-samples", type=int, default=96, show_default=True)
@click.pass_context
def cmd_train(ctx, config_path, seed, out_dir, data_dir, lr_field, backbone, iterations,
              rays_per_step, field_lr, latent_lr, checkpoint_every, hybrid_hr_fraction,
              no_lr_nerf, latent_downsample, resume, field_freqs, field_width,
              field_layers, field_samples):
    """Joint mutual-learning optimization of the HR field and the latent codes."""
    params = _merge_config(ctx, config_path, dict(
        seed=seed, out_dir=out_dir, data_dir=data_dir, lr_field=lr_field,
        backbone=backbone, iterations=iterations, rays_per_step=rays_per_step,
        field_lr=field_lr, latent_lr=latent_lr, checkpoint_every=checkpoint_every,
        hybrid_hr_fraction=hybrid_hr_fraction, no_lr_nerf=no_lr_nerf,
        latent_downsample=int(latent_downsample), resume=resume,
        field_freqs=field_freqs, field_width=field_width, field_layers=field_layers,
        field_samples=field_samples))
    if not params["no_lr_nerf"] and not params["lr_field"]:
        raise click.UsageError("--lr-field is required unless --no-lr-nerf is given")

    def body():
        bundle = _train_body(params)
        click.echo(f"trained to t={bundle.t}; {len(bundle.latent_store)} latent codes")

    _run(body)


@main.command("render")
@common_options
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True,
              help="dataset providing the poses to render")
@click.option("--views", "views_arg", type=str, default="all",
              help="comma-separated view indices or 'all'")
@click.pass_context
def cmd_render(ctx, config_path, seed, out_dir, checkpoint, data_dir, views_arg):
    """Render checkpoint views along the dataset's pose path."""
    params = _merge_config(ctx, config_path, dict(
        seed=seed, out_dir=out_dir, checkpoint=checkpoint, data_dir=data_dir,
        views_arg=views_arg))

    def body():
        dataset = scene.load_dataset(params["data_dir"])
        bundle = training.load_bundle(params["checkpoint"])
        lr_h, lr_w = dataset.lr_shape()
        s = dataset.scale_factor
        hr_h, hr_w = lr_h * s, lr_w * s
        if params["views_arg"] == "all":
            indices = range(dataset.n_views)
        else:
            indices = [int(x) for x in params["views_arg"].split(",")]
        os.makedirs(params["out_dir"], exist_ok=True)
        outputs = []
        for i in indices:
            pose = dataset.views[i].pose.scaled(hr_h, hr_w)
            img = fields.render_image(bundle.hr_field, pose, hr_h, hr_w)
            path = os.path.join(params["out_dir"], f"render_{i}.png")
            cv2.imwrite(path, np.round(np.clip(img, 0, 1) * 255)[:, :, ::-1].astype(np.uint8))
            outputs.append(path)
        write_manifest(params["out_dir"], "render", params, outputs)
        click.echo(f"rendered {len(outputs)} views to {params['out_dir']}")

    _run(body)


@main.command("eval")
@common_options
@click.option("--checkpoint", type=click.Path(exists=True), required=True)
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--backbone", type=click.Path(exists=True), default=None,
              help="needed for the LR residual and the independent-SR baseline")
@click.option("--loss-log", type=click.Path(), default=None)
@click.option("--max-pairs", type=int, default=12, show_default=True)
@click.pass_context
def cmd_eval(ctx, config_path, seed, out_dir, checkpoint, data_dir, backbone,
             loss_log, max_pairs):
    """Metric report for a checkpoint: PSNR, LR residual, warped consistency."""
    params = _merge_config(ctx, config_path, dict(
        seed=seed, out_dir=out_dir, checkpoint=checkpoint, data_dir=data_dir,
        backbone=backbone, loss_log=loss_log, max_pairs=max_pairs))

    def body():
        dataset = scene.load_dataset(params["data_dir"])
        bundle = training.load_bundle(params["checkpoint"])
        bb = latent_sr.load_backbone(params["backbone"]) if params["backbone"] else None
        report = evaluate_bundle(dataset, bundle, bb, seed=params["seed"],
                                 max_pairs=params["max_pairs"])
        written = evaluation.emit_report(report, params["out_dir"],
                                         loss_log=params["loss_log"])
        write_manifest(params["out_dir"], "eval", params, written)
        agg = report.aggregate("super_nerf")
        click.echo(f"aggregate warped consistency: "
                   f"{'n/a' if agg is None else f'{agg:.5f}'}")

    _run(body)


@main.command("ablate-latent")
@common_options
@click.option("--data", "data_dir", type=click.Path(exists=True), required=True)
@click.option("--lr-field", type=click.Path(exists=True), required=True)
@click.option("--backbone", type=click.Path(exists=True), required=True)
@click.option("--iterations", type=int, default=2000, show_default=True)
@click.option("--rays-per-step", type=int, default=1024, show_default=True)
@click.option("--field-freqs", type=int, default=10, show_default=True)
@click.option("--field-width", type=int, default=256, show_default=True)
@click.option("--field-layers", type=int, default=6, show_default=True)
@click.option("--field-samples", type=int, default=96, show_default=True)
@click.pass_context
def cmd_ablate_latent(ctx, config_path, seed, out_dir, data_dir, lr_field, backbone,
                      iterations, rays_per_step, field_freqs, field_width,
                      field_layers, field_samples):
    """Rerun training with the latent code stored 4x and 16x coarser per axis."""
    params = _merge_config(ctx, config_path, dict(
        seed=seed, out_dir=out_dir, data_dir=data_dir, lr_field=lr_field,
        backbone=backbone, iterations=iterations, rays_per_step=rays_per_step,
        field_freqs=field_freqs, field_width=field_width, field_layers=field_layers,
        field_samples=field_samples))

    def body():
        for factor in (4, 16):
            sub = dict(params)
            sub.update(out_dir=os.path.join(params["out_dir"], f"down{factor}"),
                       latent_downsample=factor, hybrid_hr_fraction=0.0,
                       no_lr_nerf=False, field_lr=5e-4, latent_lr=1e-2,
                       checkpoint_every=max(1, params["iterations"]),
                       resume=None, _command="ablate-latent")
            os.makedirs(sub["out_dir"], exist_ok=True)
            _train_body(sub)
            click.echo(f"finished latent-downsample {factor} run")
        write_manifest(params["out_dir"], "ablate-latent", params,
                       [os.path.join(params["out_dir"], d) for d in ("down4", "down16")])

    _run(body)


# ---------------------------------------------------------------------------
# shared evaluation driver (also used by the acceptance suite)


def evaluate_bundle(dataset, bundle, backbone, seed: int = 0, max_pairs: int = 12,
                    baseline: bool = True) -> evaluation.MetricReport:
    """Metric report for a trained bundle against a dataset.

    Warps are built from the trained HR field's depth; the independent-SR
    baseline re-super-resolves each view with a fresh random code and no
    joint training, measured under the same warps.
    """
    lr_h, lr_w = dataset.lr_shape()
    s = dataset.scale_factor
    hr_h, hr_w = lr_h * s, lr_w * s
    kernel = latent_sr.BlurKernel(s)
    report = evaluation.MetricReport(run_id=f"eval-seed{seed}", config_hash=bundle.config_hash)

    renders, psnrs = [], []
    for v in dataset.views:
        img = fields.render_image(bundle.hr_field, v.pose.scaled(hr_h, hr_w), hr_h, hr_w)
        renders.append(img)
        if v.tag == "HR":
            psnrs.append(evaluation.psnr(img, v.image))
    if psnrs:
        report.psnr_db = float(np.mean(psnrs))

    baseline_imgs = None
    if backbone is not None:
        import torch
        residuals = []
        baseline_imgs = []
        for i, v in enumerate(dataset.views):
            lr_img = v.image if v.tag == "LR" else scene.box_downsample(v.image, s)
            lr_t = torch.as_tensor(lr_img, dtype=torch.float32)
            if i in bundle.latent_store:
                code = bundle.latent_store[i]
                with torch.no_grad():
                    out = latent_sr.super_resolve_consistent(backbone, lr_t, code, kernel).numpy()
                residuals.append(evaluation.lr_consistency_residual(out, lr_img, s))
            rand_code = latent_sr.init_latent(i, lr_h, lr_w, s, seed + 7000 + i)
            with torch.no_grad():
                base = latent_sr.super_resolve_consistent(backbone, lr_t, rand_code, kernel).numpy()
            baseline_imgs.append(base)
        if residuals:
            report.lr_residual = float(np.max(residuals))

    pairs = [(i, (i + 1) % dataset.n_views) for i in range(dataset.n_views)]
    pairs += [(i, (i + 2) % dataset.n_views) for i in range(dataset.n_views)]
    seen = set()
    for i, j in pairs:
        if i == j or (i, j) in seen or len(seen) >= max_pairs:
            continue
        seen.add((i, j))
        warp = evaluation.build_warp(bundle.hr_field, dataset.views[i].pose,
                                     dataset.views[j].pose, hr_h, hr_w, i, j)
        disp = warp.mean_displacement()
        val = evaluation.warped_consistency(renders[i], renders[j], warp)
        report.add_pair(i, j, val, disp, warp.mask_fraction, "super_nerf")
        if baseline and baseline_imgs is not None:
            bval = evaluation.warped_consistency(baseline_imgs[i], baseline_imgs[j], warp)
            report.add_pair(i, j, bval, disp, warp.mask_fraction, "independent_sr")
    return report


if __name__ == "__main__":
    main()
