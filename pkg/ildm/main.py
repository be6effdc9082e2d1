#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Command-line entry point.

Every command resolves its configuration (built-in defaults, then the parameters file, then flags), prints a
summary, runs and writes its outputs together with ``resolved_config.yml``. Failures are reported as one line,
``error category=<config|io|contract|numeric> key=<key or path> message="..."``, with a non-zero exit status.
"""
import functools
import os
import sys

import click  # command-line interface
import pandas as pd
import torch

pd.set_option('display.expand_frame_repr', False)  # Don't wrap lines when displaying DataFrames

from ildm import run_config
from ildm.codec import VaeConfig, load_vae, mmd_report, save_vae, train_vae
from ildm.denoiser import DenoiserConfig, load_denoiser
from ildm.errors import IldmError, ContainerIOError, VerificationError
from ildm.sample import SamplerConfig, sample_grid
from ildm.scenegen import SceneDataset, Vocabulary, generate_dataset
from ildm.train import TrainConfig, pretrain_base, train_joint
from ildm.verify import (EstimatorConfig, evaluate_consistency, load_estimator, save_estimator, sweep, sweep_passed,
                         train_estimator)
from ildm.xattn import bench_attention, build_schedule

EXIT_ILDM_ERROR = 2
EXIT_IO_ERROR = 1


def reports_errors(f):
    """Turn package errors into the one-line error envelope and a non-zero exit status."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except IldmError as e:
            click.echo(e.envelope(), err=True)
            sys.exit(EXIT_ILDM_ERROR)
        except OSError as e:
            click.echo(ContainerIOError(e.strerror or str(e), key=e.filename).envelope(), err=True)
            sys.exit(EXIT_IO_ERROR)

    return wrapper


def _resolve(ctx, command, **overrides):
    config = run_config.resolve(command, ctx.obj["parameters_file"], overrides)
    print(f"Running '{command}' with the following parameters:\n" +
          "".join(f"\t{key}: {value}\n" for key, value in sorted(config.items())))
    return config


def _out_dir(path):
    """Directory that holds a file output."""
    return os.path.dirname(os.path.abspath(path)) or "."


def _parse_layers(layers):
    if layers is None or isinstance(layers, (list, tuple)):
        return layers
    return [int(l) for l in str(layers).split(",") if l.strip()]


def _captions(prompt):
    vocabulary = Vocabulary()
    return [vocabulary.encode(p.strip()) for p in str(prompt).split(";") if p.strip()]


# ********
# PROGRAM ENTRY POINT
# Uses 'click' library so that it can be run from the command line
# ********
@click.group()
@click.option('-p', '--parameters-file', default=None, type=click.Path(exists=True),
              help="Parameters file (YAML, one section per command). Flags override the file's values.")
@click.option('--threads', default=1, help="Torch threads. The default of 1 makes every output reproducible "
                                           "byte for byte.")
@click.pass_context
def cli(ctx, parameters_file, threads):
    """Joint image and intrinsic latent diffusion."""
    ctx.ensure_object(dict)
    ctx.obj["parameters_file"] = parameters_file
    torch.set_num_threads(threads)


@cli.command("scene-gen")
@click.option('--n', type=int, default=None, help="Number of scenes (default 512)")
@click.option('--seed', type=int, default=None, help="Generation seed (default 0)")
@click.option('--res', type=int, default=None, help="Resolution in pixels (default 64)")
@click.option('--out', default=None, help="Shard prefix; writes <out>.images.ildm and <out>.intrinsics.ildm")
@click.option('--workers', type=int, default=None, help="Rendering processes (default 1)")
@click.pass_context
@reports_errors
def scene_gen(ctx, **flags):
    """Render a synthetic dataset shard with exact intrinsics."""
    config = _resolve(ctx, "scene-gen", **flags)
    generate_dataset(config["n"], config["seed"], config["res"], out=config["out"], workers=config["workers"],
                     quiet=False)
    run_config.write_resolved(config, _out_dir(config["out"]), "scene-gen")
    print(f"Wrote {config['n']} scenes to {config['out']}.*.ildm")


@cli.command("train-vae")
@click.option('--data', default=None, help="Dataset shard prefix")
@click.option('--kind', type=click.Choice(VaeConfig.KINDS), default=None, help="Which autoencoder to train")
@click.option('--out', default=None, help="Checkpoint path")
@click.option('--steps', type=int, default=None)
@click.option('--lr', type=float, default=None)
@click.option('--batch-size', type=int, default=None)
@click.option('--zero-mask-prob', type=float, default=None, help="Per-intrinsic zero-mask probability (0.1)")
@click.option('--kl-weight', type=float, default=None)
@click.option('--val-fraction', type=float, default=None, help="Held-out share of the shard (0.1)")
@click.option('--latent-channels', type=int, default=None)
@click.option('--downsample', type=int, default=None)
@click.option('--width', type=int, default=None)
@click.option('--seed', type=int, default=None)
@click.pass_context
@reports_errors
def train_vae_command(ctx, **flags):
    """Train the image or the intrinsic autoencoder."""
    config = _resolve(ctx, "train-vae", **flags)
    image_only = config["kind"] == "image"
    dataset = SceneDataset.load(config["data"], with_intrinsics=not image_only)
    data = dataset.images if image_only else dataset.intrinsics
    vae_config = VaeConfig(**{k: v for k, v in config.items() if k not in ("data", "out")})
    vae, history = train_vae(data, vae_config, quiet=False)
    save_vae(config["out"], vae)
    history.to_csv(os.path.splitext(config["out"])[0] + "_loss.csv", index=False)
    run_config.write_resolved(config, _out_dir(config["out"]), "train-vae")


@cli.command("train-base")
@click.option('--data', default=None)
@click.option('--image-vae', default=None, help="Image VAE checkpoint")
@click.option('--out', default=None, help="Base checkpoint path")
@click.option('--steps', type=int, default=None)
@click.option('--lr', type=float, default=None)
@click.option('--batch-size', type=int, default=None)
@click.option('--cond-drop-prob', type=float, default=None)
@click.option('--seed', type=int, default=None)
@click.option('--parameterization', type=click.Choice(["epsilon", "v"]), default=None)
@click.pass_context
@reports_errors
def train_base(ctx, **flags):
    """Pretrain the image-only base denoiser (reads only the image half of the shard)."""
    config = _resolve(ctx, "train-base", **flags)
    dataset = SceneDataset.load(config["data"], with_intrinsics=False)
    image_vae = load_vae(config["image_vae"], kind="image")
    latent_shape = image_vae.latent_shape(dataset.resolution)
    denoiser_config = DenoiserConfig(latent_channels=latent_shape[0], latent_size=latent_shape[1],
                                     channels=config["channels"], num_heads=config["num_heads"],
                                     vocab_size=len(Vocabulary()), caption_len=dataset.captions.shape[1],
                                     parameterization=config["parameterization"],
                                     num_timesteps=config["num_timesteps"])
    train_config = TrainConfig(**{k: config[k] for k in ("steps", "lr", "batch_size", "cond_drop_prob", "seed",
                                                         "weight_decay", "parameterization", "num_timesteps",
                                                         "beta_start", "beta_end", "checkpoint_every")})
    pretrain_base(dataset, image_vae, train_config, denoiser_config, out=config["out"], quiet=False)
    run_config.write_resolved(config, _out_dir(config["out"]), "train-base")


@cli.command("train-ildm")
@click.option('--data', default=None)
@click.option('--base', default=None, help="Base checkpoint (required)")
@click.option('--image-vae', default=None)
@click.option('--intrinsic-vae', default=None)
@click.option('--out', default=None)
@click.option('--steps', type=int, default=None)
@click.option('--lam', type=float, default=None, help="Weight of the intrinsic loss (4)")
@click.option('--lr', type=float, default=None)
@click.option('--batch-size', type=int, default=None)
@click.option('--seed', type=int, default=None)
@click.option('--lora-rank', type=int, default=None)
@click.option('--lora-alpha', type=float, default=None)
@click.option('--lora-cross-attention/--no-lora-cross-attention', default=None)
@click.option('--adapt-embeddings/--no-adapt-embeddings', default=None)
@click.option('--train-schedule', type=click.Choice(["full", "drop", "gauss", "off"]), default=None)
@click.option('--filter-flat-normals/--no-filter-flat-normals', default=None)
@click.pass_context
@reports_errors
def train_ildm(ctx, **flags):
    """Train the intrinsic adapters jointly on top of a frozen base checkpoint."""
    config = _resolve(ctx, "train-ildm", **flags)
    run_config.require(config, "base")
    dataset = SceneDataset.load(config["data"], with_intrinsics=True)
    image_vae = load_vae(config["image_vae"], kind="image")
    intrinsic_vae = load_vae(config["intrinsic_vae"], kind="intrinsic")
    base, _, _ = load_denoiser(config["base"], kind="base")
    train_config = TrainConfig(
        train_schedule=build_schedule(config["train_schedule"], base.config.num_levels),
        parameterization=base.config.parameterization,
        **{k: config[k] for k in ("steps", "lam", "lr", "batch_size", "cond_drop_prob", "seed", "weight_decay",
                                  "lora_rank", "lora_alpha", "lora_cross_attention", "adapt_embeddings",
                                  "filter_flat_normals", "checkpoint_every")})
    _, _, log = train_joint(dataset, config["base"], image_vae, intrinsic_vae, train_config, out=config["out"],
                            quiet=False)
    run_config.write_resolved(config, _out_dir(config["out"]), "train-ildm")
    print(f"Joint loss: {log['total'].iloc[0]:.4f} at step 0, {log['total'].iloc[-1]:.4f} at the end")


def _sampler_config(config, num_levels):
    schedule = build_schedule(config["schedule"], num_levels, tau=config.get("tau"), sigma=config.get("sigma"),
                              alpha=config.get("alpha"), layers=_parse_layers(config.get("layers")))
    early_stop = config.get("intrinsic_early_stop")
    return SamplerConfig(steps=config["steps"], cfg_scale=config["cfg"], schedule=schedule, seed=config["seed"],
                         intrinsic_early_stop="auto" if early_stop is None else early_stop,
                         cfg_intrinsic=config.get("cfg_intrinsic", True),
                         attn_path=config.get("attn_path", "fused"))


@cli.command("sample")
@click.option('--checkpoint', default=None, help="Joint (or base) checkpoint")
@click.option('--image-vae', default=None)
@click.option('--intrinsic-vae', default=None)
@click.option('--prompt', default=None, help="Caption(s), separated by ';'")
@click.option('--seed', type=int, default=None)
@click.option('--steps', type=int, default=None)
@click.option('--cfg', type=float, default=None, help="Guidance scale (7.5)")
@click.option('--schedule', type=click.Choice(["drop", "gauss", "off", "full"]), default=None)
@click.option('--tau', type=float, default=None)
@click.option('--sigma', type=float, default=None)
@click.option('--alpha', type=float, default=None)
@click.option('--layers', default=None, help="Comma-separated block indices for the drop schedule")
@click.option('--intrinsic-early-stop', type=float, default=None,
              help="Stop denoising intrinsics at this [0, 1000] timestep (default 500 for gauss, else none)")
@click.option('--cfg-intrinsic/--no-cfg-intrinsic', default=None)
@click.option('--attn-path', type=click.Choice(["fused", "explicit"]), default=None)
@click.option('--out', default=None, help="Output directory")
@click.pass_context
@reports_errors
def sample(ctx, **flags):
    """Sample images together with their intrinsics and write contact sheets."""
    config = _resolve(ctx, "sample", **flags)
    model, noise_schedule, _ = load_denoiser(config["checkpoint"])
    image_vae = load_vae(config["image_vae"], kind="image")
    intrinsic_vae = load_vae(config["intrinsic_vae"], kind="intrinsic")
    sampler = _sampler_config(config, model.config.num_levels)
    paths = sample_grid(model, noise_schedule, image_vae, intrinsic_vae, sampler, _captions(config["prompt"]),
                        config["out"], quiet=False)
    run_config.write_resolved(config, config["out"], "sample")
    print("Wrote " + ", ".join(paths))


@cli.command("train-estimator")
@click.option('--data', default=None)
@click.option('--out', default=None)
@click.option('--steps', type=int, default=None)
@click.option('--lr', type=float, default=None)
@click.option('--batch-size', type=int, default=None)
@click.option('--val-fraction', type=float, default=None)
@click.option('--seed', type=int, default=None)
@click.pass_context
@reports_errors
def train_estimator_command(ctx, **flags):
    """Train the depth and normal estimator used by eval-consistency."""
    config = _resolve(ctx, "train-estimator", **flags)
    dataset = SceneDataset.load(config["data"], with_intrinsics=True)
    estimator = train_estimator(dataset, EstimatorConfig(**{k: v for k, v in config.items()
                                                            if k not in ("data", "out")}), quiet=False)
    save_estimator(config["out"], estimator)
    run_config.write_resolved(config, _out_dir(config["out"]), "train-estimator")


@cli.command("eval-consistency")
@click.option('--checkpoint', default=None)
@click.option('--image-vae', default=None)
@click.option('--intrinsic-vae', default=None)
@click.option('--estimator', default=None, help="Estimator checkpoint from train-estimator")
@click.option('--data', default=None, help="Shard whose captions are used as prompts")
@click.option('--n', type=int, default=None, help="Number of samples per seed (64)")
@click.option('--num-seeds', type=int, default=None)
@click.option('--seed', type=int, default=None)
@click.option('--steps', type=int, default=None)
@click.option('--cfg', type=float, default=None)
@click.option('--schedule', type=click.Choice(["drop", "gauss", "off", "full"]), default=None)
@click.option('--out', default=None, help="Output directory")
@click.pass_context
@reports_errors
def eval_consistency(ctx, **flags):
    """Score co-generated depth and normals against an estimator applied to the generated images."""
    config = _resolve(ctx, "eval-consistency", **flags)
    run_config.require(config, "estimator")
    if not os.path.exists(config["estimator"]):
        raise ContainerIOError("No estimator checkpoint; run `train-estimator` first", key=config["estimator"])
    estimator = load_estimator(config["estimator"])
    model, noise_schedule, _ = load_denoiser(config["checkpoint"])
    image_vae = load_vae(config["image_vae"], kind="image")
    intrinsic_vae = load_vae(config["intrinsic_vae"], kind="intrinsic")
    captions = SceneDataset.load(config["data"], with_intrinsics=False).captions[:config["n"]]
    sampler = _sampler_config(config, model.config.num_levels)
    seeds = [config["seed"] + k for k in range(config["num_seeds"])]
    results = evaluate_consistency(model, noise_schedule, image_vae, intrinsic_vae, estimator, captions, sampler,
                                   seeds, quiet=False)
    os.makedirs(config["out"], exist_ok=True)
    results.to_csv(os.path.join(config["out"], "consistency.csv"), index=False)
    summary = results.groupby("seed")[["depth_rmse", "angular_error_deg"]].mean()
    summary.loc["mean"] = summary.mean()
    summary.loc["std"] = summary.iloc[:-1].std(ddof=0)
    summary["estimator_val_depth_rmse"] = estimator.val_depth_rmse
    summary["estimator_val_angular_error"] = estimator.val_angular_error
    summary.to_csv(os.path.join(config["out"], "consistency_summary.csv"))
    run_config.write_resolved(config, config["out"], "eval-consistency")
    print(summary)


@cli.command("verify-pgm")
@click.option('--instances', type=int, default=None, help="Number of random models (1000)")
@click.option('--max-card', type=int, default=None, help="Largest cardinality of any variable (4)")
@click.option('--seed', type=int, default=None)
@click.option('--out', default=None, help="Output directory")
@click.pass_context
@reports_errors
def verify_pgm(ctx, **flags):
    """Exact enumeration checks of the equivalence, the inequality and the monotone chain."""
    config = _resolve(ctx, "verify-pgm", **flags)
    results = sweep(config["instances"], config["max_card"], config["seed"], quiet=False)
    passed = sweep_passed(results)
    os.makedirs(config["out"], exist_ok=True)
    results.to_csv(os.path.join(config["out"], "verify_pgm.csv"), index=False)
    run_config.write_resolved(config, config["out"], "verify-pgm")
    print(f"{'PASS' if passed else 'FAIL'}: {len(results)} instances\n"
          f"\tmax equivalence discrepancy: {results['equivalence_discrepancy'].max():.3e}\n"
          f"\tworst inequality slack: {results['inequality_slack'].min():.3e}\n"
          f"\tworst averaged inequality slack: {results['inequality_averaged_slack'].min():.3e}\n"
          f"\tworst chain slack: {results['chain_min_slack'].min():.3e}")
    if not passed:
        raise VerificationError(f"Exact enumeration checks failed on the sweep of {len(results)} instances",
                                key="verify-pgm")


@cli.command("bench-attn")
@click.option('--n', type=int, default=None, help="Tokens per domain")
@click.option('--d', type=int, default=None, help="Model width")
@click.option('--w', type=float, default=None, help="Cross-domain weight")
@click.option('--reps', type=int, default=None)
@click.option('--num-heads', type=int, default=None)
@click.option('--seed', type=int, default=None)
@click.option('--out', default=None, help="Output directory")
@click.pass_context
@reports_errors
def bench_attn(ctx, **flags):
    """Time the fused and the explicit-bias attention paths."""
    config = _resolve(ctx, "bench-attn", **flags)
    reports = bench_attention(config["n"], config["d"], config["w"], config["reps"], num_heads=config["num_heads"],
                              seed=config["seed"])
    table = pd.DataFrame([r._asdict() for r in reports])
    os.makedirs(config["out"], exist_ok=True)
    table.to_csv(os.path.join(config["out"], "bench_attn.csv"), index=False)
    run_config.write_resolved(config, config["out"], "bench-attn")
    print(table)


@cli.command("mmd-report")
@click.option('--data', default=None)
@click.option('--image-vae', default=None)
@click.option('--intrinsic-vae', default=None)
@click.option('--n', type=int, default=None, help="Number of samples to encode (256)")
@click.option('--bandwidth', type=float, default=None, help="Kernel width (default: median pairwise distance)")
@click.option('--out', default=None, help="CSV path")
@click.pass_context
@reports_errors
def mmd_report_command(ctx, **flags):
    """MMD between image latents and the latents of each intrinsic."""
    config = _resolve(ctx, "mmd-report", **flags)
    dataset = SceneDataset.load(config["data"], with_intrinsics=True)
    n = min(config["n"], len(dataset))
    report = mmd_report(dataset.images[:n], dataset.intrinsics[:n], load_vae(config["image_vae"], kind="image"),
                        load_vae(config["intrinsic_vae"], kind="intrinsic"), bandwidth=config["bandwidth"])
    os.makedirs(_out_dir(config["out"]), exist_ok=True)
    report.to_csv(config["out"], index=False)
    run_config.write_resolved(config, _out_dir(config["out"]), "mmd-report")
    print(report)


if __name__ == "__main__":
    cli()
    print("End of program")
