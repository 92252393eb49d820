"""Deterministic DDIM sampling with the attention-loss guidance hook."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from .diffusion.model import DenoiserModel, denoiser_forward
from .diffusion.schedule import NoiseSchedule, build_schedule
from .diffusion.vocab import PromptSpec
from .errors import AttnGuideError, NumericError
from .guidance import (
    GuidanceConfig, LayoutSpec, guidance_active, guided_forward, latent_update, refine_latent,
    smooth_map, trace_record,
)

N_STEPS = 50


def sampling_timesteps(n_steps: int = N_STEPS, T_train: int = 1000) -> np.ndarray:
    """Training timesteps visited by the sampler: 999, 979, ..., 19 for 50 of 1000."""
    stride = T_train // n_steps
    return T_train - 1 - stride * np.arange(n_steps)


def stream_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Independent per-sample stream derived from a master seed and sample index."""
    return np.random.SeedSequence([int(master_seed), int(index)])


def _stream_name(seed) -> str:
    if isinstance(seed, np.random.SeedSequence):
        return "seedseq:" + "/".join(str(e) for e in np.atleast_1d(seed.entropy))
    return f"seed:{seed}"


@dataclass
class SamplerState:
    z: np.ndarray
    step_index: int
    t: int
    rng_stream: str = ""
    trace: list = field(default_factory=list)
    done: bool = False


def ddim_update(z: np.ndarray, eps_hat: np.ndarray, ab_t: float, ab_prev: Optional[float],
                eta: float = 0.0, noise: Optional[np.ndarray] = None) -> tuple[np.ndarray, np.ndarray]:
    """One DDIM move; returns (next sample, x0 estimate). ``ab_prev=None`` means final step."""
    x0 = (z - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
    if ab_prev is None:
        return x0, x0
    sigma = 0.0
    if eta > 0:
        sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * math.sqrt(1.0 - ab_t / ab_prev)
    nxt = math.sqrt(ab_prev) * x0 + math.sqrt(max(0.0, 1.0 - ab_prev - sigma ** 2)) * eps_hat
    if sigma > 0:
        nxt = nxt + sigma * noise
    return nxt.astype(z.dtype, copy=False), x0


def ddim_step(state: SamplerState, eps_hat: np.ndarray, sched: NoiseSchedule, n_steps: int = N_STEPS,
              eta: float = 0.0, rng: Optional[np.random.Generator] = None) -> SamplerState:
    """Advance one sampling step. The last step returns x0 clamped to [-1, 1]."""
    eps_hat = np.asarray(eps_hat)
    if not np.all(np.isfinite(eps_hat)):
        raise NumericError(f"non-finite eps prediction at step {state.step_index} (t={state.t})")
    stride = sched.T_train // n_steps
    ab_t = float(sched.alpha_bar[state.t])
    final = state.step_index >= n_steps
    ab_prev = None if final else float(sched.alpha_bar[state.t - stride])
    noise = None
    if eta > 0 and not final:
        noise = rng.standard_normal(size=state.z.shape).astype(state.z.dtype)
    z, x0 = ddim_update(state.z, eps_hat, ab_t, ab_prev, eta, noise)
    if final:
        return replace(state, z=np.clip(x0, -1.0, 1.0).astype(state.z.dtype), done=True)
    return replace(state, z=z, step_index=state.step_index + 1, t=state.t - stride)


@dataclass
class SampleResult:
    image: np.ndarray
    maps: dict  # step index -> (tokens, 8, 8) attention grids of the denoising pass
    trace: list
    step_stats: list  # per step: in-box ratios / smoothed maxes from the denoising pass
    rng_state: dict
    states: Optional[list] = None


def _map_stats(probs: np.ndarray, prompt: PromptSpec, layout: Optional[LayoutSpec], gcfg: GuidanceConfig) -> dict:
    out = {}
    with ad.no_grad():
        grids = probs.T.reshape(probs.shape[1], 8, 8)
        out["smoothed_max"] = [float(smooth_map(ad.Tensor(grids[s]), gcfg.sigma, gcfg.kernel_size).data.max())
                               for s in prompt.subject_positions]
    if layout is not None and len(layout):
        ratios = []
        for (i, _), patches in zip(layout.entries, layout.patches()):
            col = probs[:, i].astype(np.float64)
            ratios.append(float(col[list(patches)].sum() / col.sum()))
        out["in_box_ratio"] = ratios
    return out


def sample(model: DenoiserModel, prompt: PromptSpec, layout: Optional[LayoutSpec] = None,
           gcfg: Optional[GuidanceConfig] = None, seed=0, *, sched: Optional[NoiseSchedule] = None,
           n_steps: Optional[int] = None, map_every: int = 5, eta: float = 0.0, keep_states: bool = False,
           init_state: Optional[SamplerState] = None, stats_cfg: Optional[GuidanceConfig] = None,
           stats_layout: Optional[LayoutSpec] = None) -> SampleResult:
    """Generate one image.

    ``gcfg=None`` is the unguided reference sampler. ``init_state`` resumes from
    a snapshot (its ``z`` is the sample entering that step); the random stream is
    then only used for ancestral noise. ``stats_layout`` (default: ``layout``)
    only feeds the per-step in-box ratios, never the guidance.
    """
    sched = sched or build_schedule()
    n_steps = n_steps or (gcfg.T if gcfg is not None else N_STEPS)
    stats_cfg = stats_cfg or gcfg or GuidanceConfig()
    if layout is not None:
        layout.check_prompt(prompt)
    stats_layout = stats_layout if stats_layout is not None else layout
    rng = np.random.default_rng(seed)
    ts = sampling_timesteps(n_steps, sched.T_train)
    if init_state is None:
        z0 = rng.standard_normal(size=(model.config.image_size, model.config.image_size, 3)).astype(model.dtype)
        state = SamplerState(z0, 1, int(ts[0]), _stream_name(seed))
    else:
        state = replace(init_state, z=np.array(init_state.z), trace=list(init_state.trace))

    maps_hist, stats, states = {}, [], []
    while not state.done:
        k, t = state.step_index, state.t
        if keep_states:
            states.append(replace(state, z=state.z.copy(), trace=list(state.trace)))
        try:
            z = state.z
            if gcfg is not None and guidance_active(k, gcfg):
                alpha_t = gcfg.alpha_t(sched.alpha_bar[t])
                report = None
                milestone = gcfg.milestone_at(k)
                if milestone is not None:
                    z, report = refine_latent(z, prompt, model, gcfg, milestone, t=t, alpha_t=alpha_t, layout=layout)
                zt, eps, maps, terms = guided_forward(z, t, prompt, model, layout, gcfg)
                z = latent_update(zt, terms.total, alpha_t).data
                state.trace.append(trace_record(k, t, alpha_t, terms, report))
                if gcfg.recompute_eps:
                    with ad.no_grad():
                        eps, maps = denoiser_forward(z, t, prompt, model)
            else:
                with ad.no_grad():
                    eps, maps = denoiser_forward(z, t, prompt, model)
            probs = maps.probs.data
            stats.append({"step": k, "t": t} | _map_stats(probs, prompt, stats_layout, stats_cfg))
            if (k - 1) % map_every == 0 or k == n_steps:
                maps_hist[k] = maps.numpy_grids()
            state = ddim_step(replace(state, z=z), eps.data, sched, n_steps, eta, rng)
        except AttnGuideError as exc:
            raise type(exc)(f"step {k} (t={t}): {exc}") from exc
    return SampleResult(state.z, maps_hist, state.trace, stats, rng.bit_generator.state,
                        states if keep_states else None)
