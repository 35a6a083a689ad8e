"""Closed-form Gaussian environment for score-distillation sanity checks.

Everything here is network-free: optimal noise predictions are available in
closed form for Gaussian data, which lets us verify (a) that a deterministic
condition collapses the auxiliary prediction to the sampled noise exactly,
and (b) that the Monte-Carlo score-difference gradient agrees with the
closed-form KL gradient between unit-variance Gaussians.

Sign convention, documented once: the returned gradients are descent
gradients of the KL objective, i.e. proportional to (eps_real - eps_fake).
The reversed difference (eps_fake - eps_real) that training loops sometimes
quote is the negative gradient (the direction a descending optimizer moves).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalDomainError, ParameterError, ShapeError
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class GaussianSpec:
    """An isotropic Gaussian N(mean, variance * I) over the latent space.

    variance = 0 encodes the deterministic case z0 = mean.
    """

    mean: np.ndarray
    variance: float = 0.0
    condition_label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        if self.variance < 0:
            raise ParameterError(f"variance must be >= 0, got {self.variance}")


def analytic_eps(
    spec: GaussianSpec, zt: np.ndarray, t: int, schedule: NoiseSchedule
) -> np.ndarray:
    """Optimal noise prediction for data distributed as `spec`.

    The perturbed marginal is N(a_t * mean, (a_t^2 var + b_t^2) I), so the
    optimal prediction is b_t * (zt - a_t * mean) / (a_t^2 var + b_t^2).
    """
    zt = np.asarray(zt, dtype=np.float64)
    if zt.shape != spec.mean.shape:
        raise ShapeError(f"zt shape {zt.shape} != mean shape {spec.mean.shape}")
    a, b = schedule.coeffs(int(t))
    denom = a * a * spec.variance + b * b
    if denom < 1e-12:
        raise NumericalDomainError(f"vanishing denominator {denom} at t = {t}")
    return b * (zt - a * spec.mean) / denom


def verify_lemma1(
    spec: GaussianSpec,
    trials: int,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> float:
    """Max |eps* - eps| over random (t, eps) draws for a deterministic spec.

    For variance 0 the identity eps*(a_t mu + b_t eps) = eps is exact; the
    returned deviation should sit at float rounding (<= 1e-9 by contract).
    """
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    if spec.variance != 0.0:
        raise ParameterError("lemma verification requires variance = 0")
    worst = 0.0
    for _ in range(trials):
        t = int(rng.integers(1, schedule.num_steps + 1))
        eps = rng.standard_normal(spec.mean.shape)
        zt = schedule.perturb(spec.mean, t, eps)
        dev = float(np.max(np.abs(analytic_eps(spec, zt, t, schedule) - eps)))
        worst = max(worst, dev)
    return worst


def lemma1_sweep(
    spec: GaussianSpec,
    trials_per_t: int,
    timesteps,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> list[tuple[int, float]]:
    """Per-timestep max deviation table, for report/CSV output."""
    rows = []
    for t in timesteps:
        worst = 0.0
        for _ in range(trials_per_t):
            eps = rng.standard_normal(spec.mean.shape)
            zt = schedule.perturb(spec.mean, int(t), eps)
            dev = float(np.max(np.abs(analytic_eps(spec, zt, int(t), schedule) - eps)))
            worst = max(worst, dev)
        rows.append((int(t), worst))
    return rows


def closed_form_kl_grad(gen_mean: np.ndarray, target: GaussianSpec) -> np.ndarray:
    """Gradient of KL(N(theta, I) || N(mu, I)) with respect to theta: theta - mu."""
    gen_mean = np.asarray(gen_mean, dtype=np.float64)
    if target.variance != 1.0:
        raise ParameterError("closed-form KL gradient assumes unit target variance")
    if gen_mean.shape != target.mean.shape:
        raise ShapeError(
            f"gen_mean shape {gen_mean.shape} != target mean shape {target.mean.shape}"
        )
    return gen_mean - target.mean


@dataclass
class VsdEstimate:
    """Monte-Carlo gradient estimate plus per-sample bookkeeping."""

    grad: np.ndarray
    num_samples: int
    per_sample: np.ndarray = field(repr=False, default=None)


def mc_vsd_grad(
    gen_mean: np.ndarray,
    target: GaussianSpec,
    schedule: NoiseSchedule,
    num_samples: int,
    rng: np.random.Generator,
    gen_variance: float = 1.0,
    weight_mode: str = "constant",
    keep_samples: bool = False,
) -> VsdEstimate:
    """Monte-Carlo estimate of the score-difference gradient, both scores analytic.

    Per draw: z0 ~ N(theta, gen_variance I), eps ~ N(0, I), t from the
    regularization range; the sample contributes
    w(t) * (eps_real*(z_t) - eps_fake*(z_t)) * a_t, where the fake score is
    the analytic score of the generator Gaussian and the real score that of
    the target. With gen_variance = 0 the fake prediction equals the sampled
    eps term for term, so each sample is the plain w(t) * (eps_real* - eps) * a_t
    estimator.
    """
    if num_samples < 1:
        raise ParameterError(f"num_samples must be >= 1, got {num_samples}")
    theta = np.asarray(gen_mean, dtype=np.float64)
    if theta.shape != target.mean.shape:
        raise ShapeError("gen_mean and target mean shapes differ")
    gen_spec = GaussianSpec(mean=theta, variance=gen_variance)
    dim = theta.size
    acc = np.zeros_like(theta)
    samples = np.empty((num_samples,) + theta.shape) if keep_samples else None
    for i in range(num_samples):
        t = schedule.sample_reg_timestep(rng)
        a, _ = schedule.coeffs(t)
        z0 = theta
        if gen_variance > 0:
            z0 = theta + np.sqrt(gen_variance) * rng.standard_normal(theta.shape)
        eps = rng.standard_normal(theta.shape)
        zt = schedule.perturb(z0, t, eps)
        if gen_variance == 0.0:
            # Deterministic generator: the fake prediction collapses to the
            # sampled noise, so substitute it directly; the degeneration to
            # the SDS estimator is then exact tensor-for-tensor.
            e_fake = eps
        else:
            e_fake = analytic_eps(gen_spec, zt, t, schedule)
        e_real = analytic_eps(target, zt, t, schedule)
        if weight_mode == "constant":
            w = 1.0
        else:
            w = schedule.reg_weight(t, dim)
        g = w * (e_real - e_fake) * a
        acc += g
        if keep_samples:
            samples[i] = g
    return VsdEstimate(grad=acc / num_samples, num_samples=num_samples, per_sample=samples)
