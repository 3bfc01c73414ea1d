"""Latent motion diffusion: schedules, forward/reverse processes, training.

The forward process perturbs latent motion features with spatially
smoothed Gaussian noise,

    step:    z^(m) = sqrt(1 - beta_m) z^(m-1) + sqrt(beta_m) K(eps)
    closed:  z^(m) = sqrt(abar_m) z^(0) + sqrt(1 - abar_m) K(eps)

with abar_m the running product of alpha_m = 1 - beta_m and K the
separable Gaussian smoothing of the metric module.  The reverse process
subtracts the predicted smoothed noise and re-injects a smoothed draw,

    z^(m-1) = (z^(m) - (1 - alpha_m)/sqrt(1 - abar_m) * eps_hat) / sqrt(alpha_m)
              + sigma_m K(gamma),     sigma_m = sqrt(beta_m),

with no injection at the final step m = 1.  Inference starts the chain
from the noised encoder output, not from pure noise, so the refinement
stays anchored to the registration estimate.

Regularization of the network parameters (the lambda weights) is
realized as decoupled weight decay inside the optimizer; the loss
functions here return data terms only.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .grid import FieldSequence, VectorField
from .metric import SmoothingKernel, smooth_noise
from .nn.networks import (
    LatentFeatures,
    MotionDecoder,
    NoisePredictor,
    RegistrationNet,
    encoder_forward,
)
from .nn.params import ParameterStore, adam_step
from .nn.tensor import Tensor, add_n, constant, mul, no_grad, smul, sqrt, sub, sum_all
from .registration import pair_stack


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variances and their running products, 1-indexed by step."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def num_steps(self) -> int:
        return len(self.beta)

    def check_step(self, m: int) -> None:
        if not 1 <= m <= self.num_steps:
            raise ValueError(f"diffusion step {m} out of range 1..{self.num_steps}")


def make_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear variance schedule; num_steps = 0 yields the degenerate no-op chain."""
    if num_steps < 0:
        raise ValueError("num_steps must be >= 0")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    if num_steps >= 2 and beta_start == beta_end:
        raise ValueError("beta_start must be < beta_end for a strictly increasing schedule")
    beta = np.linspace(beta_start, beta_end, num_steps)
    alpha = 1.0 - beta
    return NoiseSchedule(
        beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha), sigma=np.sqrt(beta)
    )


@dataclass
class DiffusionConfig:
    schedule: NoiseSchedule
    kernel: SmoothingKernel
    loss_alpha: float = 1e-2
    lambda_eps: float = 1e-4
    lambda_m: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 2000
    squared_noise_loss: bool = True

    def __post_init__(self):
        if self.loss_alpha < 0:
            raise ValueError("loss_alpha must be nonnegative")
        if self.lambda_eps < 0 or self.lambda_m < 0:
            raise ValueError("weight decays must be nonnegative")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive integers")


def _like(z: LatentFeatures, values: np.ndarray) -> LatentFeatures:
    return LatentFeatures(values, z.height, z.width, z.factor)


def forward_step(schedule: NoiseSchedule, kernel: SmoothingKernel, z_prev: LatentFeatures,
                 m: int, eps: np.ndarray) -> LatentFeatures:
    """One forward noising step z^(m-1) -> z^(m)."""
    schedule.check_step(m)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z_prev.values.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latents {z_prev.values.shape}")
    b = schedule.beta[m - 1]
    return _like(z_prev, np.sqrt(1.0 - b) * z_prev.values + np.sqrt(b) * smooth_noise(kernel, eps))


def forward_sample(schedule: NoiseSchedule, kernel: SmoothingKernel, z0: LatentFeatures,
                   m: int, eps: np.ndarray) -> LatentFeatures:
    """Closed-form jump z^(0) -> z^(m) with a single smoothed draw."""
    schedule.check_step(m)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != z0.values.shape:
        raise ValueError(f"noise shape {eps.shape} does not match latents {z0.values.shape}")
    ab = schedule.alpha_bar[m - 1]
    return _like(z0, np.sqrt(ab) * z0.values + np.sqrt(1.0 - ab) * smooth_noise(kernel, eps))


def reverse_step(schedule: NoiseSchedule, kernel: SmoothingKernel, z_m: LatentFeatures,
                 m: int, model, gamma: np.ndarray) -> LatentFeatures:
    """One denoising step z^(m) -> z^(m-1); no noise injection at m = 1."""
    schedule.check_step(m)
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.shape != z_m.values.shape:
        raise ValueError(f"noise shape {gamma.shape} does not match latents {z_m.values.shape}")
    with no_grad():
        eps_hat = model.forward(z_m.values, m).values
    a = schedule.alpha[m - 1]
    ab = schedule.alpha_bar[m - 1]
    mean = (z_m.values - (1.0 - a) / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(a)
    if m > 1:
        mean = mean + schedule.sigma[m - 1] * smooth_noise(kernel, gamma)
    return _like(z_m, mean)


def diffusion_loss(latents_batch, model, schedule: NoiseSchedule, kernel: SmoothingKernel,
                   rng: np.random.Generator, squared: bool = True) -> Tensor:
    """Noise-matching data term, averaged over the batch; a scalar graph node.

    Per item: a uniform step m, one smoothed draw eps' = K(eps), the
    closed-form noisy latents at m, and the (squared by default) L2
    distance between eps' and the model's prediction.
    """
    if len(latents_batch) == 0:
        raise ValueError("diffusion_loss requires a nonempty batch")
    if schedule.num_steps < 1:
        raise ValueError("diffusion_loss requires a schedule with at least 1 step")
    terms = []
    for z0 in latents_batch:
        m = int(rng.integers(1, schedule.num_steps + 1))
        eps = rng.standard_normal(z0.values.shape)
        eps_prime = smooth_noise(kernel, eps)
        ab = schedule.alpha_bar[m - 1]
        z_m = np.sqrt(ab) * z0.values + np.sqrt(1.0 - ab) * eps_prime
        diff = sub(model.forward(z_m, m), constant(eps_prime))
        term = sum_all(mul(diff, diff))
        terms.append(term if squared else sqrt(term))
    return smul(add_n(terms), 1.0 / len(terms))


def motion_loss(latents_batch, truth_batch, model) -> Tensor:
    """Mean over sequences, sum over frames, of squared L2 displacement error."""
    if len(latents_batch) != len(truth_batch):
        raise ValueError(
            f"batch sizes differ: {len(latents_batch)} latents vs {len(truth_batch)} truths"
        )
    if len(latents_batch) == 0:
        raise ValueError("motion_loss requires a nonempty batch")
    terms = []
    for z, truth in zip(latents_batch, truth_batch):
        truth = np.asarray(truth, dtype=np.float64)
        pred = model.forward(z)
        if pred.values.shape != truth.shape:
            raise ValueError(
                f"decoded motion shape {pred.values.shape} does not match truth {truth.shape}"
            )
        diff = sub(pred, constant(truth))
        terms.append(sum_all(mul(diff, diff)))
    return smul(add_n(terms), 1.0 / len(terms))


@dataclass
class TrainResult:
    history: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    stopped_early: bool = False


def _encode_items(reg_net: RegistrationNet, items) -> list[LatentFeatures]:
    return [encoder_forward(reg_net, pairs) for pairs, _ in items]


def _loss_pair(cfg: DiffusionConfig, eps_net, mot_net, latents, truths, rng):
    l_diff = diffusion_loss(
        latents, eps_net, cfg.schedule, cfg.kernel, rng, squared=cfg.squared_noise_loss
    )
    l_mot = motion_loss(latents, truths, mot_net)
    return l_diff, l_mot


def train(reg_net: RegistrationNet, eps_net: NoisePredictor, mot_net: MotionDecoder,
          train_items, val_items, cfg: DiffusionConfig, *, learning_rate: float = 1e-4,
          patience: int = 50, seed: int = 0, log_path=None) -> TrainResult:
    """Joint training of the noise predictor and motion decoder.

    The registration encoder is frozen: latents are computed once up
    front.  Items are (pair_stack, motion_truth) array tuples.  The
    motion decoder consumes the clean encoder latents during training
    (the reverse chain runs only at inference).  Early stopping tracks
    validation l_total with fixed validation noise; the best parameters
    are restored before returning.
    """
    if eps_net.store is not mot_net.store:
        raise ValueError("noise predictor and motion decoder must share a parameter store")
    if not train_items:
        raise ValueError("no training items")
    store = eps_net.store
    train_z = _encode_items(reg_net, train_items)
    train_u = [truth for _, truth in train_items]
    val_z = _encode_items(reg_net, val_items)
    val_u = [truth for _, truth in val_items]

    def decay(name: str) -> float:
        return cfg.lambda_eps if name.startswith(eps_net.prefix) else cfg.lambda_m

    writer = None
    log_file = None
    if log_path is not None:
        new = not os.path.exists(log_path)
        log_file = open(log_path, "a", newline="")
        writer = csv.writer(log_file)
        if new:
            writer.writerow(
                ["epoch", "l_diffusion", "l_motion", "l_total", "val_diffusion",
                 "val_motion", "val_total"]
            )

    result = TrainResult()
    best_params = None
    since_best = 0
    try:
        for epoch in range(cfg.max_epochs):
            rng = np.random.default_rng([seed, epoch])
            order = rng.permutation(len(train_items))
            ep_diff = ep_mot = 0.0
            n_batches = 0
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start : start + cfg.batch_size]
                l_diff, l_mot = _loss_pair(
                    cfg, eps_net, mot_net,
                    [train_z[i] for i in batch], [train_u[i] for i in batch], rng,
                )
                total = add_n([l_diff, smul(l_mot, cfg.loss_alpha)])
                total.backward()
                adam_step(store, learning_rate, decay)
                ep_diff += l_diff.item()
                ep_mot += l_mot.item()
                n_batches += 1
            ep_diff /= n_batches
            ep_mot /= n_batches
            ep_total = ep_diff + cfg.loss_alpha * ep_mot

            # fixed validation noise: same seed each epoch, so early stopping
            # compares parameters rather than draws
            val_rng = np.random.default_rng([seed, 0x5EED])
            if val_z:
                with no_grad():
                    v_diff, v_mot = _loss_pair(cfg, eps_net, mot_net, val_z, val_u, val_rng)
                v_diff, v_mot = v_diff.item(), v_mot.item()
            else:
                v_diff, v_mot = ep_diff, ep_mot
            v_total = v_diff + cfg.loss_alpha * v_mot

            result.history.append((epoch, ep_diff, ep_mot, ep_total, v_diff, v_mot, v_total))
            if writer is not None:
                writer.writerow(
                    [epoch, f"{ep_diff:.10g}", f"{ep_mot:.10g}", f"{ep_total:.10g}",
                     f"{v_diff:.10g}", f"{v_mot:.10g}", f"{v_total:.10g}"]
                )
                log_file.flush()

            if v_total < result.best_val:
                result.best_val = v_total
                result.best_epoch = epoch
                best_params = {k: p.values.copy() for k, p in store.params.items()}
                since_best = 0
            else:
                since_best += 1
                if since_best > patience:
                    result.stopped_early = True
                    break
    finally:
        if log_file is not None:
            log_file.close()

    if best_params is not None:
        for k, p in store.params.items():
            p.values = best_params[k]
    return result


def infer(sequence: FieldSequence, reg_net: RegistrationNet, eps_net: NoisePredictor,
          mot_net: MotionDecoder, schedule: NoiseSchedule, kernel: SmoothingKernel,
          rng: np.random.Generator) -> FieldSequence:
    """Refined displacement sequence for one image sequence.

    Encodes the (frame 0, frame tau) pairs, noises the latents to step M
    in closed form, runs the full reverse chain, and decodes dense
    displacements.  With an empty schedule (M = 0) the decoder consumes
    the encoder latents unchanged.
    """
    pairs = pair_stack(sequence)
    z = encoder_forward(reg_net, pairs)
    if schedule.num_steps > 0:
        m_final = schedule.num_steps
        eps = rng.standard_normal(z.values.shape)
        z = forward_sample(schedule, kernel, z, m_final, eps)
        for m in range(m_final, 0, -1):
            gamma = rng.standard_normal(z.values.shape)
            z = reverse_step(schedule, kernel, z, m, eps_net, gamma)
    with no_grad():
        motions = mot_net.forward(z).values
    grid = sequence.frames[0].grid
    frames = [VectorField(grid, motions[t, 0], motions[t, 1]) for t in range(motions.shape[0])]
    return FieldSequence(frames)
