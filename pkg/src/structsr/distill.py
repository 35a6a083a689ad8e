"""Losses and the alternating distillation loop.

One training step runs: generator forward, reconstruction loss against the
ground truth, a score-difference regularization gradient injected through
the perturbed latent, a generator update, then an auxiliary-denoiser update
on the detached latent. The teacher and the condition adapter stay frozen
throughout.

Sign convention, documented once: the injected latent gradient is
w(t) * (eps_real - eps_fake), the descent gradient of the underlying KL
objective; the reversed difference is the negative gradient (what you would
add rather than subtract).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ParameterError, ShapeError, TrainingError
from .models import Adapter, Denoiser, Generator, cfg_combine
from .schedule import NoiseSchedule


# --------------------------------------------------------------------------
# Perceptual proxy: frozen random features with per-layer normalized L2.
# This plays the feature-space-distance role of a learned perceptual loss
# without any external weights; it is not a calibrated perceptual metric.


class RandomFeatureProxy(nn.Module):
    def __init__(self, seed: int = 7777, channels=(8, 16, 32, 32)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        cin = 3
        for i, cout in enumerate(channels):
            conv = nn.Conv2d(cin, cout, 3, stride=2 if i < 3 else 1, padding=1)
            with torch.no_grad():
                conv.weight.copy_(
                    torch.randn(conv.weight.shape, generator=gen)
                    / math.sqrt(cin * 9)
                )
                conv.bias.zero_()
            layers.append(conv)
            cin = cout
        self.convs = nn.ModuleList(layers)
        self.seed = seed
        for p in self.parameters():
            p.requires_grad_(False)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = x
        for conv in self.convs:
            h = F.silu(conv(h))
            feats.append(h)
        return feats

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Per-image distance, shape (B,)."""
        if a.shape != b.shape:
            raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
        total = torch.zeros(a.shape[0], dtype=a.dtype, device=a.device)
        for fa, fb in zip(self.features(a), self.features(b)):
            na = fa / (fa.square().sum(dim=1, keepdim=True).sqrt() + 1e-8)
            nb = fb / (fb.square().sum(dim=1, keepdim=True).sqrt() + 1e-8)
            total = total + (na - nb).square().mean(dim=(1, 2, 3))
        return total


def recon_loss(
    pred_hq: torch.Tensor,
    hq: torch.Tensor,
    proxy: RandomFeatureProxy,
    lambda_rec: float = 1.0,
    lambda_perc: float = 1.0,
):
    """Weighted sum of mean squared error and the perceptual proxy distance.

    Returns (loss, parts) where parts carries the unweighted terms.
    """
    if pred_hq.shape != hq.shape:
        raise ShapeError(
            f"pred shape {tuple(pred_hq.shape)} != target shape {tuple(hq.shape)}"
        )
    l2 = (pred_hq - hq).square().mean()
    perc = proxy.distance(pred_hq, hq).mean()
    loss = lambda_rec * l2 + lambda_perc * perc
    return loss, {"l2": l2, "perceptual": perc}


# --------------------------------------------------------------------------
# Regularization gradient.


@dataclass
class RegDraw:
    """The (t, eps) sample shared by the regularization and auxiliary steps."""

    t: np.ndarray            # (B,) integer timesteps
    eps: torch.Tensor        # (B, C, H, W)


def sample_reg_draw(
    schedule: NoiseSchedule, shape, rng: np.random.Generator, dtype, device
) -> RegDraw:
    """One regularization timestep per sample, plus the Gaussian noise."""
    b = shape[0]
    t = np.array([schedule.sample_reg_timestep(rng) for _ in range(b)])
    eps = torch.from_numpy(rng.standard_normal(tuple(shape))).to(dtype=dtype, device=device)
    return RegDraw(t=t, eps=eps)


@dataclass
class RegResult:
    proxy_loss: torch.Tensor
    grad_z: torch.Tensor     # detached dL/d z_t, shape (B, C, H, W)
    draw: RegDraw

    @property
    def grad_norm(self) -> float:
        return float(self.grad_z.norm())


def regularization_gradient(
    z0_hat: torch.Tensor,
    draw: RegDraw,
    eps_fake_fn,
    eps_real_fn,
    schedule: NoiseSchedule,
    lambda_reg: float = 1.0,
) -> RegResult:
    """Inject the score-difference gradient into z0_hat's backward pass.

    Forms z_t = a_t z0_hat + b_t eps per sample, evaluates both noise
    predictions without gradient tracking, and returns a proxy loss whose
    gradient with respect to z_t is w(t) * (eps_real - eps_fake); autograd
    carries it into the generator parameters via d z_t / d theta =
    a_t * d z0_hat / d theta. Nothing flows into the prediction networks.
    """
    b = z0_hat.shape[0]
    numel = int(np.prod(z0_hat.shape[1:]))
    a_t, b_t = schedule.coeffs(draw.t)
    a_col = torch.from_numpy(a_t).to(z0_hat.dtype).view(b, 1, 1, 1)
    b_col = torch.from_numpy(b_t).to(z0_hat.dtype).view(b, 1, 1, 1)
    z_t = a_col * z0_hat + b_col * draw.eps
    z_t_eval = z_t.detach()
    t_tensor = torch.from_numpy(draw.t).to(torch.long)
    with torch.no_grad():
        e_fake = eps_fake_fn(z_t_eval, t_tensor, draw)
        e_real = eps_real_fn(z_t_eval, t_tensor, draw)
    w = torch.tensor(
        [schedule.reg_weight(int(t), numel) for t in draw.t], dtype=z0_hat.dtype
    ).view(b, 1, 1, 1)
    grad_z = (lambda_reg * w * (e_real - e_fake)).detach()
    if not torch.isfinite(grad_z).all():
        raise TrainingError(f"non-finite regularization gradient at t = {draw.t}")
    proxy_loss = (grad_z * z_t).sum()
    return RegResult(proxy_loss=proxy_loss, grad_z=grad_z, draw=draw)


@dataclass
class ModelBundle:
    """The four networks of one distillation run plus shared knobs."""

    teacher: Denoiser
    adapter: Adapter
    generator: Generator
    aux: Denoiser
    proxy: RandomFeatureProxy
    guidance: float = 2.0
    adapter_scale: float = 1.0
    regularizer: str = "icm"
    aux_uses_adapter: bool = False

    def __post_init__(self):
        if self.regularizer not in ("icm", "vsd", "sds", "none"):
            raise ParameterError(f"unknown regularizer {self.regularizer!r}")

    @property
    def null_token(self) -> int:
        return self.teacher.cfg.null_token


def adapter_features(bundle: ModelBundle, planes: torch.Tensor, scale: float):
    """Scaled, detached adapter features for a batch of condition planes."""
    with torch.no_grad():
        feats = bundle.adapter(planes)
    return [scale * f for f in feats]


def make_eps_fns(bundle: ModelBundle, tokens: torch.Tensor, planes: torch.Tensor):
    """Build the (fake, real) prediction closures for the active regularizer.

    icm: both predictions see the scaled structural features.
    vsd: neither does (text-token conditioning only).
    sds: the fake prediction is hard-wired to the sampled noise.
    """
    mode = bundle.regularizer
    feats = None
    if mode in ("icm", "sds"):
        feats = adapter_features(bundle, planes, bundle.adapter_scale)
    null = torch.full_like(tokens, bundle.null_token)

    def eps_real(z_t, t, draw):
        cond = bundle.teacher(z_t, t, tokens, feats)
        uncond = bundle.teacher(z_t, t, null, None)
        return cfg_combine(cond, uncond, bundle.guidance)

    if mode == "sds":
        def eps_fake(z_t, t, draw):
            return draw.eps
    else:
        def eps_fake(z_t, t, draw):
            return bundle.aux(z_t, t, tokens, feats)

    return eps_fake, eps_real


# --------------------------------------------------------------------------
# Pretraining of the teacher and of the condition adapter.


@dataclass
class PretrainConfig:
    iterations: int = 1500
    batch_size: int = 8
    lr: float = 3e-4
    weight_decay: float = 0.01
    p_uncond: float = 0.1
    # Fraction of samples whose timestep is drawn from the top-noise band
    # instead of uniformly; the near-pure-noise regime is where precision is
    # needed most and uniform sampling starves it.
    high_t_fraction: float = 0.3
    high_t_band: float = 0.35
    log_every: int = 100


def cosine_lr(base_lr: float, step: int, total: int) -> float:
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / max(total, 1)))


def to_chw(images: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W, 3) float array in [0, 1] -> (N, 3, H, W) tensor."""
    return torch.from_numpy(np.moveaxis(images, -1, 1).copy()).to(dtype)


def _denoising_batch(
    images: torch.Tensor,
    labels: torch.Tensor,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    batch_size: int,
    high_t_fraction: float = 0.0,
    high_t_band: float = 0.35,
):
    idx = rng.integers(0, images.shape[0], size=batch_size)
    x0 = images[idx]
    tokens = labels[idx]
    t = rng.integers(1, schedule.num_steps + 1, size=batch_size)
    if high_t_fraction > 0.0:
        band_lo = int(schedule.num_steps * (1.0 - high_t_band)) + 1
        boost = rng.random(batch_size) < high_t_fraction
        t = np.where(
            boost, rng.integers(band_lo, schedule.num_steps + 1, size=batch_size), t
        )
    eps = torch.from_numpy(rng.standard_normal(tuple(x0.shape))).to(x0.dtype)
    a_t, b_t = schedule.coeffs(t)
    a_col = torch.from_numpy(a_t).to(x0.dtype).view(-1, 1, 1, 1)
    b_col = torch.from_numpy(b_t).to(x0.dtype).view(-1, 1, 1, 1)
    z_t = a_col * x0 + b_col * eps
    return idx, z_t, torch.from_numpy(t).to(torch.long), tokens, eps


def pretrain_teacher(
    model: Denoiser,
    images: np.ndarray,
    labels: np.ndarray,
    schedule: NoiseSchedule,
    cfg: PretrainConfig,
    rng: np.random.Generator,
    log=print,
) -> list[float]:
    """Standard denoising pretraining on clean HQ images.

    The class token is dropped to the null token with probability p_uncond
    so the classifier-free unconditional branch is meaningful later.
    """
    imgs = to_chw(images)
    labs = torch.from_numpy(labels).to(torch.long)
    # The preconditioning scalars must converge to schedule-determined values
    # (the passthrough to b_t); give them a faster, decay-free group so the
    # conv body does not end up carrying that role.
    scalar_params = list(model.gate.parameters()) + list(model.head_mod.parameters())
    scalar_ids = {id(p) for p in scalar_params}
    body_params = [p for p in model.parameters() if id(p) not in scalar_ids]
    opt = torch.optim.AdamW(
        [
            {"params": body_params, "lr": cfg.lr, "weight_decay": cfg.weight_decay},
            {"params": scalar_params, "lr": 8 * cfg.lr, "weight_decay": 0.0},
        ]
    )
    losses = []
    model.train()
    for step in range(cfg.iterations):
        decay = cosine_lr(1.0, step, cfg.iterations)
        opt.param_groups[0]["lr"] = cfg.lr * decay
        opt.param_groups[1]["lr"] = 8 * cfg.lr * decay
        _, z_t, t, tokens, eps = _denoising_batch(
            imgs, labs, schedule, rng, cfg.batch_size,
            high_t_fraction=cfg.high_t_fraction, high_t_band=cfg.high_t_band,
        )
        drop = rng.random(cfg.batch_size) < cfg.p_uncond
        tokens = tokens.clone()
        tokens[torch.from_numpy(drop)] = model.cfg.null_token
        pred = model(z_t, t, tokens)
        loss = (pred - eps).square().mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"teacher loss diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if log and (step % cfg.log_every == 0 or step == cfg.iterations - 1):
            log(f"teacher step {step}: loss {losses[-1]:.4f}")
    model.eval()
    return losses


def pretrain_adapter(
    teacher: Denoiser,
    adapter: Adapter,
    images: np.ndarray,
    labels: np.ndarray,
    planes: np.ndarray,
    schedule: NoiseSchedule,
    cfg: PretrainConfig,
    rng: np.random.Generator,
    scale: float = 1.0,
    log=print,
) -> list[float]:
    """Train the adapter to lower the frozen teacher's denoising error.

    The per-sample noise-prediction error is weighted by (b_t/a_t)^1.5,
    halfway between the flat noise-space loss (which starves the high-noise
    timesteps, precisely where structural conditioning carries its
    information) and the denoised-prediction loss (which starves the rest);
    this exponent balances the conditioning gain across timestep buckets.
    """
    imgs = to_chw(images)
    labs = torch.from_numpy(labels).to(torch.long)
    cond = torch.from_numpy(planes).to(imgs.dtype)
    for p in teacher.parameters():
        if p.requires_grad:
            raise ParameterError("teacher must be frozen before adapter training")
    opt = torch.optim.AdamW(
        adapter.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    losses = []
    adapter.train()
    for step in range(cfg.iterations):
        for group in opt.param_groups:
            group["lr"] = cosine_lr(cfg.lr, step, cfg.iterations)
        idx, z_t, t, tokens, eps = _denoising_batch(
            imgs, labs, schedule, rng, cfg.batch_size,
            high_t_fraction=cfg.high_t_fraction, high_t_band=cfg.high_t_band,
        )
        feats = [scale * f for f in adapter(cond[idx])]
        pred = teacher(z_t, t, tokens, feats)
        a_t, b_t = schedule.coeffs(t.numpy())
        w = np.minimum((b_t / a_t) ** 1.5, 3e3)
        w_col = torch.from_numpy(w).to(z_t.dtype).view(-1, 1, 1, 1)
        loss = (w_col * (pred - eps).square()).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"adapter loss diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
        if log and (step % cfg.log_every == 0 or step == cfg.iterations - 1):
            log(f"adapter step {step}: loss {losses[-1]:.4f}")
    adapter.eval()
    return losses


def denoising_mse(
    teacher: Denoiser,
    images: np.ndarray,
    labels: np.ndarray,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    adapter: Adapter | None = None,
    planes: np.ndarray | None = None,
    scale: float = 1.0,
    rounds: int = 4,
    batch_size: int = 32,
) -> float:
    """Mean epsilon-prediction error on held-out data, optionally conditioned."""
    imgs = to_chw(images)
    labs = torch.from_numpy(labels).to(torch.long)
    cond = None if planes is None else torch.from_numpy(planes).to(imgs.dtype)
    total, count = 0.0, 0
    with torch.no_grad():
        for _ in range(rounds):
            idx, z_t, t, tokens, eps = _denoising_batch(
                imgs, labs, schedule, rng, batch_size
            )
            feats = None
            if adapter is not None and cond is not None:
                feats = [scale * f for f in adapter(cond[idx])]
            pred = teacher(z_t, t, tokens, feats)
            total += float((pred - eps).square().mean()) * batch_size
            count += batch_size
    return total / count


# --------------------------------------------------------------------------
# The alternating update step.


@dataclass
class LossReport:
    iteration: int
    rec_l2: float
    rec_perceptual: float
    reg_grad_norm: float
    aux_loss: float
    wall_time: float

    FIELDS = ("iteration", "rec_l2", "rec_perceptual", "reg_grad_norm", "aux_loss", "wall_time")

    def row(self):
        return [
            self.iteration,
            f"{self.rec_l2:.8f}",
            f"{self.rec_perceptual:.8f}",
            f"{self.reg_grad_norm:.8f}",
            f"{self.aux_loss:.8f}",
            f"{self.wall_time:.4f}",
        ]

    def is_finite(self) -> bool:
        return all(
            math.isfinite(v)
            for v in (self.rec_l2, self.rec_perceptual, self.reg_grad_norm, self.aux_loss)
        )


@dataclass
class StepInputs:
    lq: torch.Tensor
    hq: torch.Tensor
    tokens: torch.Tensor
    planes: torch.Tensor


def aux_update(
    bundle: ModelBundle,
    z_t_detached: torch.Tensor,
    t: torch.Tensor,
    tokens: torch.Tensor,
    eps: torch.Tensor,
    opt_aux: torch.optim.Optimizer,
    planes: torch.Tensor | None = None,
) -> float:
    """One denoising step of the auxiliary model on the detached latent.

    Only the low-rank factors receive gradient; the features argument is
    used only when the auxiliary model is configured to see the adapter.
    """
    feats = None
    if bundle.aux_uses_adapter and planes is not None:
        feats = adapter_features(bundle, planes, bundle.adapter_scale)
    pred = bundle.aux(z_t_detached, t, tokens, feats)
    loss = (pred - eps).square().mean()
    if not torch.isfinite(loss):
        raise TrainingError("auxiliary loss diverged")
    opt_aux.zero_grad()
    loss.backward()
    opt_aux.step()
    return float(loss.detach())


def train_step(
    bundle: ModelBundle,
    batch: StepInputs,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    opt_gen: torch.optim.Optimizer,
    opt_aux: torch.optim.Optimizer | None,
    iteration: int,
    lambda_rec: float = 1.0,
    lambda_perc: float = 1.0,
    lambda_reg: float = 1.0,
) -> LossReport:
    """One full alternating update; the two optimizers never share a step."""
    t_start = time.perf_counter()
    z0_hat = bundle.generator.forward_latent(batch.lq, batch.tokens)
    pred_hq = z0_hat  # the decoder is the identity in pixel space
    rec, parts = recon_loss(
        pred_hq, batch.hq, bundle.proxy, lambda_rec=lambda_rec, lambda_perc=lambda_perc
    )
    total = rec
    reg_norm = 0.0
    reg = None
    if bundle.regularizer != "none":
        draw = sample_reg_draw(
            schedule, z0_hat.shape, rng, z0_hat.dtype, z0_hat.device
        )
        eps_fake_fn, eps_real_fn = make_eps_fns(bundle, batch.tokens, batch.planes)
        reg = regularization_gradient(
            z0_hat, draw, eps_fake_fn, eps_real_fn, schedule, lambda_reg=lambda_reg
        )
        total = total + reg.proxy_loss
        reg_norm = reg.grad_norm
    opt_gen.zero_grad()
    total.backward()
    for p in bundle.generator.parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise TrainingError(f"non-finite generator gradient at iteration {iteration}")
    opt_gen.step()

    aux_loss = float("nan")
    if bundle.regularizer in ("icm", "vsd") and opt_aux is not None:
        a_t, b_t = schedule.coeffs(reg.draw.t)
        a_col = torch.from_numpy(a_t).to(z0_hat.dtype).view(-1, 1, 1, 1)
        b_col = torch.from_numpy(b_t).to(z0_hat.dtype).view(-1, 1, 1, 1)
        z_t_det = a_col * z0_hat.detach() + b_col * reg.draw.eps
        t_tensor = torch.from_numpy(reg.draw.t).to(torch.long)
        aux_loss = aux_update(
            bundle, z_t_det, t_tensor, batch.tokens, reg.draw.eps, opt_aux, batch.planes
        )
    report = LossReport(
        iteration=iteration,
        rec_l2=float(parts["l2"].detach()),
        rec_perceptual=float(parts["perceptual"].detach()),
        reg_grad_norm=reg_norm,
        aux_loss=0.0 if math.isnan(aux_loss) else aux_loss,
        wall_time=time.perf_counter() - t_start,
    )
    if not report.is_finite():
        raise TrainingError(f"non-finite loss report at iteration {iteration}: {report}")
    return report


class LossLog:
    """CSV writer holding one LossReport per row."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._writer = csv.writer(self._fh)
        self._writer.writerow(LossReport.FIELDS)

    def append(self, report: LossReport):
        self._writer.writerow(report.row())

    def close(self):
        self._fh.close()
