"""Experiment harness: dataset synthesis, pretraining, distillation, probing,
evaluation, verification and plotting as subcommands over one shared config.

Exit codes: 0 ok, 1 validation failure (bad config/arguments or a failed
verification), 2 runtime error (missing upstream artifact, divergence).
"""

from __future__ import annotations

import argparse
import copy
import csv
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import analytic_lab, viz
from .conditioning import build_condition
from .config import (
    RunConfig,
    apply_overrides,
    config_to_dict,
    load_config,
    save_config,
)
from .data import DatasetSplit, load_png, load_split, read_manifest, save_png, write_split
from .degrade import DegradationConfig, replay
from .distill import (
    LossLog,
    ModelBundle,
    PretrainConfig,
    RandomFeatureProxy,
    StepInputs,
    cosine_lr,
    denoising_mse,
    pretrain_adapter,
    pretrain_teacher,
    to_chw,
    train_step,
)
from .errors import ParameterError, ShapeError, TrainingError
from .evalkit import denoise_probe, psnr, ssim
from .models import (
    Adapter,
    Denoiser,
    DenoiserConfig,
    Generator,
    apply_lora,
    freeze,
    load_checkpoint,
    lora_parameters,
    save_checkpoint,
)
from .schedule import make_linear_schedule, schedule_from_dict

OUT_ENV_VAR = "STRUCTSR_OUT"

# Stable per-command stream tags hung off the master seed.
_STREAM = {"data": 100, "pretrain": 200, "adapter": 300, "distill": 400,
           "probe": 500, "eval": 600, "lemma": 700}


class MissingArtifactError(FileNotFoundError):
    pass


def stream_rng(seed: int, tag: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, _STREAM[tag]])))


def _require(path: Path, produced_by: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(
            f"missing {path}; run the `{produced_by}` command first"
        )
    return path


def build_schedule(cfg: RunConfig):
    return make_linear_schedule(
        num_steps=cfg.schedule.num_steps,
        beta_start=cfg.schedule.beta_start,
        beta_end=cfg.schedule.beta_end,
        weight_mode=cfg.schedule.weight_mode,
    )


def denoiser_config(cfg: RunConfig) -> DenoiserConfig:
    return DenoiserConfig(
        base_width=cfg.model.base_width,
        width_mults=tuple(cfg.model.width_mults),
        emb_dim=cfg.model.emb_dim,
        num_classes=len(cfg.data.families),
        groups=cfg.model.groups,
    )


def condition_planes(cfg: RunConfig, split: DatasetSplit) -> np.ndarray:
    """Stacked (N, 4, H, W) condition planes for a split, float32."""
    cc = cfg.conditioning
    planes = [
        build_condition(
            img, grid=cc.grid, sigma=cc.canny_sigma, low=cc.canny_low, high=cc.canny_high
        ).as_planes()
        for img in split.hq
    ]
    return np.stack(planes).astype(np.float32)


# --------------------------------------------------------------------------
# Subcommands.


def cmd_gen_data(cfg: RunConfig, out: Path) -> int:
    dcfg = DegradationConfig(
        scale=cfg.degradation.scale,
        blur_sigma=tuple(cfg.degradation.blur_sigma),
        filters=tuple(cfg.degradation.filters),
        noise_std=tuple(cfg.degradation.noise_std),
        jpeg_quality=tuple(cfg.degradation.jpeg_quality),
        second_pass=cfg.degradation.second_pass,
    )
    for name, count, tag in (("train", cfg.data.num_train, 1), ("val", cfg.data.num_val, 2)):
        records = write_split(
            out / "data" / name,
            num_images=count,
            size=cfg.data.image_size,
            scale=cfg.degradation.scale,
            config=dcfg,
            families=tuple(cfg.data.families),
            master_seed=[cfg.seed, _STREAM["data"], tag],
        )
        print(f"wrote {len(records)} pairs to {out / 'data' / name}")
    return 0


def cmd_pretrain(cfg: RunConfig, out: Path) -> int:
    _require(out / "data" / "train" / "manifest.jsonl", "gen-data")
    train = load_split(out / "data" / "train", tuple(cfg.data.families))
    val = load_split(out / "data" / "val", tuple(cfg.data.families))
    schedule = build_schedule(cfg)
    torch.manual_seed(cfg.seed)
    teacher = Denoiser(denoiser_config(cfg))
    rng = stream_rng(cfg.seed, "pretrain")
    initial = denoising_mse(teacher, val.hq, val.labels, schedule,
                            np.random.Generator(np.random.PCG64(cfg.seed + 12345)))
    pcfg = PretrainConfig(
        iterations=cfg.train.teacher_iterations,
        batch_size=cfg.train.teacher_batch_size,
        lr=cfg.train.teacher_lr,
        weight_decay=cfg.train.weight_decay,
        p_uncond=cfg.train.p_uncond,
        high_t_fraction=cfg.train.high_t_fraction,
        high_t_band=cfg.train.high_t_band,
    )
    pretrain_teacher(teacher, train.hq, train.labels, schedule, pcfg, rng)
    final = denoising_mse(teacher, val.hq, val.labels, schedule,
                          np.random.Generator(np.random.PCG64(cfg.seed + 12345)))
    print(f"held-out denoising MSE: initial {initial:.4f} -> final {final:.4f}")
    freeze(teacher)
    save_checkpoint(
        out / "teacher.pt", "teacher", teacher, schedule.to_dict(),
        config_to_dict(cfg), cfg.train.teacher_iterations,
        extra={"label_names": list(cfg.data.families),
               "initial_mse": initial, "final_mse": final},
    )
    print(f"saved {out / 'teacher.pt'}")
    return 0


def load_teacher(out: Path, cfg: RunConfig) -> tuple[Denoiser, dict]:
    payload = load_checkpoint(_require(out / "teacher.pt", "pretrain"), "teacher")
    teacher = Denoiser(denoiser_config(cfg))
    teacher.load_state_dict(payload["state"])
    teacher.eval()
    freeze(teacher)
    return teacher, payload


def load_adapter(out: Path, cfg: RunConfig, teacher: Denoiser) -> Adapter:
    payload = load_checkpoint(_require(out / "adapter.pt", "train-adapter"), "adapter")
    adapter = Adapter(teacher.feature_channels(), width=cfg.model.adapter_width,
                      groups=cfg.model.groups)
    adapter.load_state_dict(payload["state"])
    adapter.eval()
    freeze(adapter)
    return adapter


def cmd_train_adapter(cfg: RunConfig, out: Path) -> int:
    teacher, payload = load_teacher(out, cfg)
    train = load_split(out / "data" / "train", tuple(cfg.data.families))
    val = load_split(out / "data" / "val", tuple(cfg.data.families))
    schedule = schedule_from_dict(payload["schedule"])
    torch.manual_seed(cfg.seed + 1)
    adapter = Adapter(teacher.feature_channels(), width=cfg.model.adapter_width,
                      groups=cfg.model.groups)
    rng = stream_rng(cfg.seed, "adapter")
    planes = condition_planes(cfg, train)
    val_planes = condition_planes(cfg, val)
    pcfg = PretrainConfig(
        iterations=cfg.train.adapter_iterations,
        batch_size=cfg.train.adapter_batch_size,
        lr=cfg.train.adapter_lr,
        weight_decay=cfg.train.weight_decay,
        high_t_fraction=cfg.train.high_t_fraction,
        high_t_band=cfg.train.high_t_band,
    )
    pretrain_adapter(teacher, adapter, train.hq, train.labels, planes, schedule,
                     pcfg, rng, scale=cfg.conditioning.adapter_scale)
    # Paired comparison: both passes replay the same (batch, t, eps) draws.
    uncond = denoising_mse(teacher, val.hq, val.labels, schedule,
                           np.random.Generator(np.random.PCG64(cfg.seed + 54321)))
    cond = denoising_mse(teacher, val.hq, val.labels, schedule,
                         np.random.Generator(np.random.PCG64(cfg.seed + 54321)),
                         adapter=adapter, planes=val_planes,
                         scale=cfg.conditioning.adapter_scale)
    print(f"held-out denoising MSE: token-only {uncond:.4f}, with features {cond:.4f}")
    freeze(adapter)
    save_checkpoint(
        out / "adapter.pt", "adapter", adapter, schedule.to_dict(),
        config_to_dict(cfg), cfg.train.adapter_iterations,
        extra={"uncond_mse": uncond, "cond_mse": cond},
    )
    print(f"saved {out / 'adapter.pt'}")
    return 0


def build_generator(cfg: RunConfig, teacher: Denoiser, schedule) -> Generator:
    a_fix, b_fix = schedule.coeffs(cfg.model.t_fix)
    return Generator(
        backbone=teacher,
        scale=cfg.degradation.scale,
        t_fix=cfg.model.t_fix,
        a_fix=a_fix,
        b_fix=b_fix,
        lora_rank=cfg.model.lora_rank,
        lora_multiplier=cfg.model.lora_multiplier,
        input_width=cfg.model.input_adapter_width,
    )


def build_bundle(cfg: RunConfig, out: Path) -> tuple[ModelBundle, object]:
    """Assemble all four networks for distillation; parameter init is seeded."""
    teacher, payload = load_teacher(out, cfg)
    adapter = load_adapter(out, cfg, teacher)
    schedule = schedule_from_dict(payload["schedule"])
    torch.manual_seed(cfg.seed + 2)
    generator = build_generator(cfg, teacher, schedule)
    aux = apply_lora(freeze(copy.deepcopy(teacher)), rank=cfg.model.lora_rank,
                     multiplier=cfg.model.lora_multiplier)
    proxy = RandomFeatureProxy(cfg.train.proxy_seed)
    bundle = ModelBundle(
        teacher=teacher,
        adapter=adapter,
        generator=generator,
        aux=aux,
        proxy=proxy,
        guidance=cfg.train.guidance,
        adapter_scale=cfg.conditioning.adapter_scale,
        regularizer=cfg.train.regularizer,
        aux_uses_adapter=cfg.train.aux_uses_adapter,
    )
    return bundle, schedule


def distill_dir(cfg: RunConfig, out: Path) -> Path:
    return out / f"distill_{cfg.train.regularizer}"


def cmd_distill(cfg: RunConfig, out: Path) -> int:
    train = load_split(out / "data" / "train", tuple(cfg.data.families))
    bundle, schedule = build_bundle(cfg, out)
    planes_np = condition_planes(cfg, train)
    imgs = to_chw(train.hq)
    lqs = to_chw(train.lq)
    planes = torch.from_numpy(planes_np)
    labels = torch.from_numpy(train.labels).to(torch.long)
    rng = stream_rng(cfg.seed, "distill")
    gen_params = [p for p in bundle.generator.parameters() if p.requires_grad]
    opt_gen = torch.optim.AdamW(gen_params, lr=cfg.train.lr_gen,
                                weight_decay=cfg.train.weight_decay)
    opt_aux = torch.optim.AdamW(list(lora_parameters(bundle.aux)), lr=cfg.train.lr_aux,
                                weight_decay=cfg.train.weight_decay)
    ddir = distill_dir(cfg, out)
    ddir.mkdir(parents=True, exist_ok=True)
    (ddir / "grids").mkdir(exist_ok=True)
    log = LossLog(ddir / "loss_log.csv")
    n = imgs.shape[0]
    try:
        for it in range(1, cfg.train.iterations + 1):
            for opt, base in ((opt_gen, cfg.train.lr_gen), (opt_aux, cfg.train.lr_aux)):
                lr = cosine_lr(base, it - 1, cfg.train.iterations)
                for group in opt.param_groups:
                    group["lr"] = lr
            idx = rng.integers(0, n, size=cfg.train.batch_size)
            tidx = torch.from_numpy(idx)
            batch = StepInputs(
                lq=lqs[tidx], hq=imgs[tidx], tokens=labels[tidx], planes=planes[tidx]
            )
            report = train_step(
                bundle, batch, schedule, rng, opt_gen, opt_aux, it,
                lambda_rec=cfg.train.lambda_rec,
                lambda_perc=cfg.train.lambda_perc,
                lambda_reg=cfg.train.lambda_reg,
            )
            log.append(report)
            if it % cfg.train.log_every == 0 or it == 1:
                print(
                    f"iter {it}: l2 {report.rec_l2:.4f} perc {report.rec_perceptual:.4f} "
                    f"reg|g| {report.reg_grad_norm:.4f} aux {report.aux_loss:.4f}"
                )
            if it % cfg.train.grid_every == 0 or it == cfg.train.iterations:
                _write_train_grid(bundle, cfg, train, planes_np, ddir / "grids" / f"iter_{it:06d}.png")
            if it % cfg.train.ckpt_every == 0 or it == cfg.train.iterations:
                _save_distill_ckpts(cfg, out, bundle, schedule, it)
    finally:
        log.close()
    print(f"distillation artifacts in {ddir}")
    return 0


def _write_train_grid(bundle, cfg, split, planes_np, path):
    k = min(4, split.hq.shape[0])
    with torch.no_grad():
        preds = bundle.generator(
            to_chw(split.lq[:k]),
            torch.from_numpy(split.labels[:k]).to(torch.long),
        )
    rows = []
    for i in range(k):
        lq_big = viz.upscale_nearest(split.lq[i], cfg.degradation.scale)
        gen = np.moveaxis(preds[i].numpy(), 0, -1)
        cm = np.moveaxis(planes_np[i][:3], 0, -1)
        ed = planes_np[i][3]
        rows.append([lq_big, gen, split.hq[i], cm, ed])
    viz.save_grid(path, rows)


def _save_distill_ckpts(cfg, out, bundle, schedule, iteration):
    ddir = distill_dir(cfg, out)
    save_checkpoint(
        ddir / "generator.pt", "generator", bundle.generator, schedule.to_dict(),
        config_to_dict(cfg), iteration,
        extra={"t_fix": bundle.generator.t_fix, "scale": bundle.generator.scale},
    )
    save_checkpoint(
        ddir / "aux.pt", "aux", bundle.aux, schedule.to_dict(),
        config_to_dict(cfg), iteration,
    )


def load_generator(cfg: RunConfig, out: Path) -> tuple[Generator, object]:
    teacher, payload = load_teacher(out, cfg)
    schedule = schedule_from_dict(payload["schedule"])
    gpath = _require(distill_dir(cfg, out) / "generator.pt", "distill")
    gpayload = load_checkpoint(gpath, "generator")
    generator = build_generator(cfg, teacher, schedule)
    generator.load_state_dict(gpayload["state"])
    generator.eval()
    return generator, schedule


def cmd_probe(cfg: RunConfig, out: Path) -> int:
    teacher, payload = load_teacher(out, cfg)
    adapter = load_adapter(out, cfg, teacher)
    schedule = schedule_from_dict(payload["schedule"])
    val = load_split(out / "data" / "val", tuple(cfg.data.families))
    planes = condition_planes(cfg, val)
    rng = stream_rng(cfg.seed, "probe")
    result, samples = denoise_probe(
        teacher, adapter, val.hq, val.labels, planes, schedule, rng,
        timesteps=tuple(cfg.eval.probe_timesteps),
        adapter_scale=cfg.conditioning.adapter_scale,
        batch_size=cfg.eval.probe_batch,
    )
    rows = list(result.rows())
    with open(out / "probe.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    grid_rows = [
        [samples["gt"], np.moveaxis(planes[0][:3], 0, -1), planes[0][3]],
        [samples["gt"]] + samples["uncond"],
        [samples["gt"]] + samples["cond"],
    ]
    viz.save_grid(out / "probe_grid.png", grid_rows)
    viz.plot_probe(rows, out / "probe_plot.png")
    for row in rows:
        print(
            f"t={row['t']}: features {row['mse_conditional']:.5f} "
            f"token-only {row['mse_unconditional']:.5f}"
        )
    return 0


def cmd_eval(cfg: RunConfig, out: Path) -> int:
    generator, schedule = load_generator(cfg, out)
    val = load_split(out / "data" / "val", tuple(cfg.data.families))
    proxy = RandomFeatureProxy(cfg.train.proxy_seed)
    lqs = to_chw(val.lq)
    labels = torch.from_numpy(val.labels).to(torch.long)
    hqs = to_chw(val.hq)
    with torch.no_grad():
        preds = generator(lqs, labels)
        bicubic = torch.nn.functional.interpolate(
            lqs, scale_factor=cfg.degradation.scale, mode="bicubic", align_corners=False
        ).clamp(0.0, 1.0)
        proxy_gen = proxy.distance(preds, hqs).numpy()
        proxy_bic = proxy.distance(bicubic, hqs).numpy()
    path = out / f"metrics_{cfg.train.regularizer}.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["index", "label", "psnr_gen", "psnr_bicubic", "ssim_gen",
             "ssim_bicubic", "proxy_gen", "proxy_bicubic"]
        )
        wins = 0
        for i in range(val.hq.shape[0]):
            gen_img = np.moveaxis(preds[i].numpy(), 0, -1)
            bic_img = np.moveaxis(bicubic[i].numpy(), 0, -1)
            p_gen = psnr(gen_img, val.hq[i])
            p_bic = psnr(bic_img, val.hq[i])
            wins += int(p_gen > p_bic)
            writer.writerow(
                [
                    i,
                    val.records[i].label,
                    f"{p_gen:.6f}",
                    f"{p_bic:.6f}",
                    f"{ssim(gen_img, val.hq[i]):.6f}",
                    f"{ssim(bic_img, val.hq[i]):.6f}",
                    f"{proxy_gen[i]:.8f}",
                    f"{proxy_bic[i]:.8f}",
                ]
            )
    frac = wins / val.hq.shape[0]
    print(f"generator beats bicubic PSNR on {wins}/{val.hq.shape[0]} pairs ({frac:.0%})")
    print(f"wrote {path}")
    return 0


def cmd_verify_lemma1(cfg: RunConfig, out: Path) -> int:
    schedule = build_schedule(cfg)
    rng = stream_rng(cfg.seed, "lemma")
    mu = rng.standard_normal(cfg.eval.lemma_dim)
    spec = analytic_lab.GaussianSpec(mean=mu, variance=0.0)
    max_dev = analytic_lab.verify_lemma1(spec, cfg.eval.lemma_trials, schedule, rng)
    probe_ts = sorted({1, 20, 250, 500, 750, 980, schedule.num_steps})
    sweep = analytic_lab.lemma1_sweep(spec, 50, probe_ts, schedule, rng)
    with open(out / "lemma1.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "max_abs_deviation"])
        for t, dev in sweep:
            writer.writerow([t, f"{dev:.3e}"])
    print(f"max |eps* - eps| over {cfg.eval.lemma_trials} draws: {max_dev:.3e}")
    if max_dev <= 1e-9:
        print("deterministic-condition collapse verified")
        return 0
    print("verification FAILED: deviation above 1e-9")
    return 1


def cmd_dump_cond(cfg: RunConfig, out: Path, image: str) -> int:
    img = load_png(Path(image))
    cond = build_condition(
        img,
        grid=cfg.conditioning.grid,
        sigma=cfg.conditioning.canny_sigma,
        low=cfg.conditioning.canny_low,
        high=cfg.conditioning.canny_high,
    )
    stem = Path(image).stem
    save_png(out / f"{stem}_colormap.png", cond.colormap)
    save_png(out / f"{stem}_edges.png", np.repeat(cond.edges[..., None], 3, axis=-1))
    print(f"wrote {out / f'{stem}_colormap.png'} and {out / f'{stem}_edges.png'}")
    return 0


def cmd_plot(cfg: RunConfig, out: Path) -> int:
    made = 0
    loss_csv = distill_dir(cfg, out) / "loss_log.csv"
    if loss_csv.exists():
        viz.plot_loss_log(loss_csv, out / f"loss_{cfg.train.regularizer}.png")
        print(f"wrote {out / f'loss_{cfg.train.regularizer}.png'}")
        made += 1
    probe_csv = out / "probe.csv"
    if probe_csv.exists():
        with open(probe_csv) as fh:
            rows = [
                {
                    "t": int(r["t"]),
                    "mse_conditional": float(r["mse_conditional"]),
                    "mse_unconditional": float(r["mse_unconditional"]),
                }
                for r in csv.DictReader(fh)
            ]
        viz.plot_probe(rows, out / "probe_plot.png")
        print(f"wrote {out / 'probe_plot.png'}")
        made += 1
    if made == 0:
        raise MissingArtifactError(
            "nothing to plot; run the `distill` or `probe` command first"
        )
    return 0


# --------------------------------------------------------------------------
# Entry point.

COMMANDS = (
    "gen-data", "pretrain", "train-adapter", "distill",
    "probe", "eval", "verify-lemma1", "dump-cond", "plot",
)


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="structsr",
        description="Toy one-step super-resolution distillation with structural conditioning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="YAML config file")
        p.add_argument("--out", type=str, default=None,
                       help=f"output directory (default: ${OUT_ENV_VAR} or config out_dir)")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("overrides", nargs="*",
                       help="dotted config overrides, e.g. train.iterations=500")
        if name == "dump-cond":
            p.add_argument("--image", type=str, required=True, help="input PNG")
    return parser


def resolve_config(args) -> tuple[RunConfig, Path]:
    cfg = load_config(args.config)
    apply_overrides(cfg, list(args.overrides))
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    elif os.environ.get(OUT_ENV_VAR) and cfg.out_dir == RunConfig().out_dir:
        cfg.out_dir = os.environ[OUT_ENV_VAR]
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg, out = resolve_config(args)
        save_config(cfg, out / f"config_{args.command.replace('-', '_')}.yaml")
        if args.command == "gen-data":
            return cmd_gen_data(cfg, out)
        if args.command == "pretrain":
            return cmd_pretrain(cfg, out)
        if args.command == "train-adapter":
            return cmd_train_adapter(cfg, out)
        if args.command == "distill":
            return cmd_distill(cfg, out)
        if args.command == "probe":
            return cmd_probe(cfg, out)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        if args.command == "verify-lemma1":
            return cmd_verify_lemma1(cfg, out)
        if args.command == "dump-cond":
            return cmd_dump_cond(cfg, out, args.image)
        if args.command == "plot":
            return cmd_plot(cfg, out)
        raise ParameterError(f"unknown command {args.command!r}")
    except (ParameterError, ShapeError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 1
    except (MissingArtifactError, TrainingError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
