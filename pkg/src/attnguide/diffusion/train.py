"""Epsilon-prediction training with Adam."""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .. import autodiff as ad
from ..errors import NumericError
from .checkpoint import save_checkpoint
from .model import DenoiserModel
from .schedule import NoiseSchedule, forward_diffuse

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    steps: int = 12000
    batch: int = 64
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    warmup: int = 200
    cosine_decay: bool = True
    seed: int = 0
    target_loss: float = 0.05
    log_every: int = 500
    checkpoint_every: int = 0


class Adam:
    def __init__(self, params, lr=2e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= p.dtype.type(lr) * upd.astype(p.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def _lr_at(cfg: TrainConfig, step: int) -> float:
    lr = cfg.lr
    if cfg.warmup and step < cfg.warmup:
        lr *= (step + 1) / cfg.warmup
    if cfg.cosine_decay:
        lr *= 0.5 * (1.0 + math.cos(math.pi * step / max(1, cfg.steps)))
    return lr


def _clip(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= p.dtype.type(s)
    return total


def diffusion_loss(model: DenoiserModel, x0: np.ndarray, ids: np.ndarray, t: np.ndarray, eps: np.ndarray,
                   sched: NoiseSchedule) -> ad.Tensor:
    x_t = forward_diffuse(x0, t, eps, sched).astype(model.dtype)
    eps_hat, _ = model.forward(ad.Tensor(x_t), t, ids)
    diff = eps_hat - ad.Tensor(eps.astype(model.dtype))
    return ad.mean(diff * diff)


@dataclass
class TrainResult:
    model: DenoiserModel
    losses: np.ndarray
    seconds: float
    cpu_seconds: float = 0.0


def train(model: DenoiserModel, dataset, sched: NoiseSchedule, cfg: TrainConfig = TrainConfig(),
          out_dir=None, callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Minimize the eps-prediction MSE over uniformly sampled timesteps.

    ``dataset`` is an ``(images, token_ids)`` pair of arrays. A checkpoint is
    written to ``out_dir`` (if given) at the end and every ``checkpoint_every``
    steps.
    """
    images, ids = dataset
    images = np.asarray(images, dtype=model.dtype)
    ids = np.asarray(ids, dtype=np.int64)
    n = len(images)
    rng = np.random.default_rng(cfg.seed)
    model.requires_grad_(True)
    opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    losses = np.empty(cfg.steps, dtype=np.float64)
    start, cpu_start = time.time(), time.process_time()
    meta = {"config": asdict(cfg), "dataset_size": n}
    seeds = {"train": cfg.seed, "init": getattr(model, "seed", None)}

    for step in range(cfg.steps):
        idx = rng.integers(0, n, size=cfg.batch)
        t = rng.integers(0, sched.T_train, size=cfg.batch)
        eps = rng.standard_normal(size=(cfg.batch,) + images.shape[1:]).astype(model.dtype)
        loss = diffusion_loss(model, images[idx], ids[idx], t, eps, sched)
        value = loss.item()
        if not math.isfinite(value):
            recent = losses[max(0, step - 5):step].tolist()
            raise NumericError(f"training diverged at step {step}: loss={value}, previous losses {recent}")
        losses[step] = value
        opt.zero_grad()
        ad.backward(loss)
        _clip(opt.params, cfg.grad_clip)
        opt.step(_lr_at(cfg, step))
        if callback is not None:
            callback(step, value)
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            window = losses[step + 1 - cfg.log_every:step + 1]
            log.info("step %d  loss %.5f  (%.1fs)", step + 1, window.mean(), time.time() - start)
        if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out_dir, model, sched, meta | {"steps_done": step + 1},
                            seeds, losses[:step + 1])

    model.requires_grad_(False)
    # wall/cpu time stay out of the checkpoint so reruns are byte-identical
    seconds, cpu_seconds = time.time() - start, time.process_time() - cpu_start
    tail = losses[-min(len(losses), 500):]
    if cfg.steps and tail.mean() > cfg.target_loss:
        warnings.warn(f"final training loss {tail.mean():.4f} above target {cfg.target_loss}", RuntimeWarning)
    if out_dir is not None:
        save_checkpoint(out_dir, model, sched, meta | {"steps_done": cfg.steps}, seeds, losses)
    return TrainResult(model, losses, seconds, cpu_seconds)
