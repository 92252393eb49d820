"""Attention-loss guidance: losses on cross-attention maps, pushed back onto the sample.

Two losses read the averaged cross-attention map:

* semantic loss, ``max_s (1 - max(smooth(A_s)))`` over subject tokens s, which
  targets whichever subject is most neglected;
* layout energy, ``(1 - mass of A_i inside B / total mass of A_i)^2`` for each
  (token i, box B) pair.

Their weighted sum is differentiated with respect to the current sample and a
plain gradient step ``z - alpha_t * grad`` is taken. Model weights stay frozen.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion.model import GRID, N_PATCHES, AttentionMap, DenoiserModel, denoiser_forward
from .diffusion.vocab import PromptSpec
from .errors import ContractError, NumericError, ParameterError

DEFAULT_MILESTONES = ((1, 0.10), (10, 0.30), (20, 0.50))


@dataclass(frozen=True)
class GuidanceConfig:
    alpha0: float = 10.0
    T: int = 50
    T_end: int = 25
    sigma: float = 1.0
    kernel_size: int = 3
    lambda_sem: float = 1.0
    lambda_lay: float = 1.0
    milestones: tuple = DEFAULT_MILESTONES
    max_refine_iters: int = 20
    smooth_semantic: bool = True
    smooth_layout: bool = False
    # recompute eps at the updated sample before the denoising step
    recompute_eps: bool = True

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple((int(s), float(th)) for s, th in self.milestones))
        if self.alpha0 < 0:
            raise ParameterError(f"alpha0 must be >= 0, got {self.alpha0}")
        if not 1 <= self.T_end <= self.T:
            raise ParameterError(f"need 1 <= T_end <= T, got T_end={self.T_end}, T={self.T}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ParameterError(f"kernel_size must be odd, got {self.kernel_size}")
        if not self.sigma > 0:
            raise ParameterError(f"sigma must be > 0, got {self.sigma}")
        if self.max_refine_iters < 0:
            raise ParameterError("max_refine_iters must be >= 0")
        prev = 0.0
        for step, th in self.milestones:
            if not 0 < th < 1:
                raise ParameterError(f"refinement threshold {th} not in (0, 1)")
            if th < prev:
                raise ParameterError("refinement thresholds must be non-decreasing")
            if not 1 <= step <= self.T:
                raise ParameterError(f"milestone step {step} outside [1, {self.T}]")
            prev = th

    def alpha_t(self, alpha_bar_t: float) -> float:
        """Step size: alpha0 * sqrt(1 - alpha_bar_t)."""
        return self.alpha0 * math.sqrt(1.0 - float(alpha_bar_t))

    def milestone_at(self, step_index: int) -> Optional[tuple]:
        for m in self.milestones:
            if m[0] == step_index:
                return m
        return None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = [list(m) for m in self.milestones]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GuidanceConfig":
        d = dict(d)
        if "milestones" in d:
            d["milestones"] = tuple(tuple(m) for m in d["milestones"])
        return cls(**d)


# ---------------------------------------------------------------- layout boxes

def box_to_patches(box: Sequence[float]) -> tuple:
    """Patch indices (row-major on the 8x8 grid) whose centers fall inside the box.

    A center (x, y) is inside when x0 <= x < x1 and y0 <= y < y1. If no center
    qualifies, the single patch nearest the box center is used.
    """
    x0, y0, x1, y1 = (float(v) for v in box)
    centers = (np.arange(GRID) + 0.5) / GRID
    inside = [k * GRID + j for k in range(GRID) for j in range(GRID)
              if x0 <= centers[j] < x1 and y0 <= centers[k] < y1]
    if inside:
        return tuple(inside)
    bx, by = (x0 + x1) / 2, (y0 + y1) / 2
    d = [(centers[j] - bx) ** 2 + (centers[k] - by) ** 2 for k in range(GRID) for j in range(GRID)]
    return (int(np.argmin(d)),)


def _check_box(box) -> tuple:
    if len(box) != 4:
        raise ParameterError(f"box needs 4 coordinates, got {box}")
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
        raise ParameterError(f"box {box} must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1")
    return x0, y0, x1, y1


@dataclass(frozen=True)
class LayoutSpec:
    """(token position, normalized box) pairs; boxes are (x0, y0, x1, y1) with y pointing down."""

    entries: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((int(i), _check_box(b)) for i, b in self.entries))

    def __len__(self):
        return len(self.entries)

    def patches(self) -> list[tuple]:
        return [box_to_patches(b) for _, b in self.entries]

    def check_prompt(self, prompt: PromptSpec) -> None:
        for i, _ in self.entries:
            if i not in prompt.subject_positions:
                raise ParameterError(f"layout token {i} is not a subject position {prompt.subject_positions}")

    def to_dict(self) -> dict:
        return {"entries": [[i, list(b)] for i, b in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "LayoutSpec":
        return cls(tuple((e[0], tuple(e[1])) for e in d["entries"]))


# ---------------------------------------------------------------- losses

def gaussian_kernel(sigma: float, size: int) -> np.ndarray:
    if size % 2 == 0:
        raise ParameterError(f"kernel_size must be odd, got {size}")
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def smooth_map(grid: Tensor, sigma: float = 1.0, kernel_size: int = 3) -> Tensor:
    """Gaussian-filter an 8x8 attention grid with wrap padding (mass-preserving)."""
    if not np.all(np.isfinite(grid.data)) or np.any(grid.data < 0):
        raise ParameterError("attention grid must be finite and non-negative")
    return ad.conv2d_fixed(grid, gaussian_kernel(sigma, kernel_size))


def semantic_loss(maps: AttentionMap, subjects: Sequence[int], cfg: GuidanceConfig = GuidanceConfig()
                  ) -> tuple[Tensor, Tensor]:
    """Loss of the most neglected subject, plus the per-subject losses ``1 - max``."""
    subjects = list(subjects)
    if not subjects:
        raise ParameterError("semantic loss needs at least one subject position")
    per = []
    for s in subjects:
        g = maps.grid(s)
        if cfg.smooth_semantic:
            g = smooth_map(g, cfg.sigma, cfg.kernel_size)
        per.append(1.0 - ad.reduce_max(g))
    per = ad.stack(per)
    return ad.reduce_max(per), per


def layout_energy(maps: AttentionMap, spec: LayoutSpec, cfg: GuidanceConfig | None = None
                  ) -> tuple[Tensor, Tensor, Tensor]:
    """Mean box energy, plus per-entry energies and in-box mass ratios."""
    energies, ratios = [], []
    smooth = cfg is not None and cfg.smooth_layout
    for (i, _), patches in zip(spec.entries, spec.patches()):
        col = maps.column(i)
        if smooth:
            col = ad.reshape(smooth_map(ad.reshape(col, (GRID, GRID)), cfg.sigma, cfg.kernel_size), (N_PATCHES,))
        total = ad.sum(col)
        if not total.item() > 0:
            raise NumericError(f"token {i} has zero total attention mass (degenerate map)")
        inside = ad.sum(col[np.array(patches)])
        r = inside / total
        d = 1.0 - r
        energies.append(d * d)
        ratios.append(r)
    energies, ratios = ad.stack(energies), ad.stack(ratios)
    return ad.mean(energies), energies, ratios


@dataclass
class LossTerms:
    total: Tensor
    semantic: Optional[Tensor] = None
    per_subject: Optional[Tensor] = None
    layout: Optional[Tensor] = None
    per_entry: Optional[Tensor] = None
    ratios: Optional[Tensor] = None

    @property
    def smoothed_maxes(self) -> list[float]:
        return [] if self.per_subject is None else [1.0 - float(v) for v in self.per_subject.data]

    def summary(self) -> dict:
        def f(t):
            return None if t is None else float(t.item())

        def v(t):
            return None if t is None else [float(x) for x in t.data]

        return {"total": f(self.total), "semantic": f(self.semantic), "layout": f(self.layout),
                "per_subject": v(self.per_subject), "per_entry": v(self.per_entry)}


def compute_losses(maps: AttentionMap, subjects: Sequence[int], spec: Optional[LayoutSpec],
                   cfg: GuidanceConfig) -> LossTerms:
    """Weighted sum ``lambda_sem * semantic + lambda_lay * layout`` with the pieces kept for logging."""
    subjects = list(subjects or ())
    has_layout = spec is not None and len(spec) > 0
    if not subjects and not has_layout:
        raise ParameterError("guidance needs subject positions or a layout")
    terms = LossTerms(total=None)
    parts = []
    if subjects:
        terms.semantic, terms.per_subject = semantic_loss(maps, subjects, cfg)
        parts.append(ad.scale(terms.semantic, cfg.lambda_sem) if cfg.lambda_sem != 1.0 else terms.semantic)
    if has_layout:
        terms.layout, terms.per_entry, terms.ratios = layout_energy(maps, spec, cfg)
        parts.append(ad.scale(terms.layout, cfg.lambda_lay) if cfg.lambda_lay != 1.0 else terms.layout)
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    terms.total = total
    return terms


def total_loss(maps: AttentionMap, subjects: Sequence[int], spec: Optional[LayoutSpec],
               cfg: GuidanceConfig) -> Tensor:
    return compute_losses(maps, subjects, spec, cfg).total


# ---------------------------------------------------------------- update + schedule

def latent_update(z_t: Tensor, loss: Tensor, alpha_t: float) -> Tensor:
    """Return ``z_t - alpha_t * d loss / d z_t`` as a fresh leaf."""
    if not (isinstance(z_t, Tensor) and z_t.is_leaf and z_t.requires_grad):
        raise ContractError("z_t must be a gradient-requiring leaf tensor")
    z_t.grad = None
    ad.backward(loss)
    if z_t.grad is None:
        raise ContractError("loss is not connected to z_t; no gradient to apply")
    if alpha_t == 0:
        return Tensor(z_t.data.copy())
    step = z_t.dtype.type(alpha_t) * z_t.grad
    return Tensor(z_t.data - step)


def guidance_active(step_index: int, cfg: GuidanceConfig) -> bool:
    """Step 1 is the noisiest step (t = T); guidance runs for t = T down to T_end inclusive."""
    if not 1 <= step_index <= cfg.T:
        raise ParameterError(f"step index {step_index} outside [1, {cfg.T}]")
    return step_index <= cfg.T - cfg.T_end + 1


def guided_forward(z: np.ndarray, t: int, prompt: PromptSpec, model: DenoiserModel,
                   layout: Optional[LayoutSpec], cfg: GuidanceConfig):
    """Forward pass at a fresh gradient-requiring leaf; returns (leaf, eps_hat, maps, terms)."""
    zt = Tensor(np.array(z, dtype=model.dtype), requires_grad=True)
    eps, maps = denoiser_forward(zt, t, prompt, model)
    terms = compute_losses(maps, prompt.subject_positions, layout, cfg)
    return zt, eps, maps, terms


@dataclass
class RefineReport:
    step: int
    threshold: float
    iterations: int = 0
    met: bool = False
    # smoothed subject maxes before each update and after the last one
    history: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def refine_latent(z: np.ndarray, prompt: PromptSpec, model: DenoiserModel, cfg: GuidanceConfig,
                  milestone: tuple, *, t: int, alpha_t: float, layout: Optional[LayoutSpec] = None
                  ) -> tuple[np.ndarray, RefineReport]:
    """Repeat guidance updates until every subject's smoothed max reaches the milestone threshold.

    Stops after ``cfg.max_refine_iters`` updates at the latest; the report
    records whether the threshold was met.
    """
    step, threshold = milestone
    report = RefineReport(step=int(step), threshold=float(threshold))
    if cfg.max_refine_iters == 0:
        return z, report
    while True:
        zt, _, _, terms = guided_forward(z, t, prompt, model, layout, cfg)
        maxes = terms.smoothed_maxes
        report.history.append(maxes)
        if maxes and min(maxes) >= threshold:
            report.met = True
            break
        if report.iterations >= cfg.max_refine_iters:
            break
        z = latent_update(zt, terms.total, alpha_t).data
        report.iterations += 1
    return z, report


def trace_record(step: int, t: int, alpha_t: float, terms: LossTerms,
                 refinement: Optional[RefineReport] = None) -> dict:
    """One JSON-serializable trace line for a guidance application."""
    rec = {
        "step": int(step),
        "t": int(t),
        "alpha_t": float(alpha_t),
        "loss": terms.summary(),
        "smoothed_max": terms.smoothed_maxes,
        "in_box_ratio": None if terms.ratios is None else [float(r) for r in terms.ratios.data],
        "refinement": None if refinement is None else refinement.to_dict(),
    }
    return rec
