"""Tiny pixel-space transformer denoiser with text cross-attention.

Images are 32x32x3, cut into an 8x8 grid of 4x4 patches. Each block runs
self-attention over patches, cross-attention from patches to the 8 prompt
tokens, and a GELU MLP, all pre-norm with residuals. Every forward pass
returns the cross-attention probabilities so guidance can read them.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import NumericError, ParameterError
from .vocab import PROMPT_LEN, VOCAB_SIZE, PromptSpec

IMAGE_SIZE = 32
CHANNELS = 3
PATCH = 4
GRID = IMAGE_SIZE // PATCH
N_PATCHES = GRID * GRID


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = 4
    blocks: int = 2
    mlp_hidden: int = 128
    vocab_size: int = VOCAB_SIZE
    prompt_len: int = PROMPT_LEN
    image_size: int = IMAGE_SIZE
    patch: int = PATCH
    init_std: float = 0.02

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * CHANNELS


@dataclass
class AttentionMap:
    """Cross-attention averaged over blocks and heads: patches x token slots.

    ``probs`` is a (64, 8) tensor still attached to the tape of the forward
    pass that produced it.
    """

    probs: Tensor
    provenance: dict = field(default_factory=dict)

    @property
    def n_tokens(self) -> int:
        return self.probs.shape[-1]

    def column(self, token: int) -> Tensor:
        return self.probs[:, token]

    def grid(self, token: int) -> Tensor:
        return ad.reshape(self.column(token), (GRID, GRID))

    def numpy_grids(self) -> np.ndarray:
        """(tokens, 8, 8) array copy, detached."""
        return self.probs.data.T.reshape(self.n_tokens, GRID, GRID).copy()


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class DenoiserModel:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.seed = seed
        self.params: dict[str, Tensor] = {}
        self._init(np.random.default_rng(seed), np.dtype(dtype))

    # ------------------------------------------------------------ parameters

    def _init(self, rng, dtype):
        c = self.config
        std = c.init_std

        def normal(*shape, s=std):
            return rng.normal(0.0, s, size=shape)

        def add(name, arr):
            self.params[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True)

        add("tok_emb", normal(c.vocab_size, c.dim, s=1.0 / math.sqrt(c.dim)))
        add("tok_pos", normal(c.prompt_len, c.dim))
        add("patch_w", normal(c.patch_dim, c.dim, s=1.0 / math.sqrt(c.patch_dim)))
        add("patch_b", np.zeros(c.dim))
        add("patch_pos", normal(N_PATCHES, c.dim))
        add("time_w", normal(c.dim, c.dim, s=1.0 / math.sqrt(c.dim)))
        add("time_b", np.zeros(c.dim))
        add("ctx_ln.g", np.ones(c.dim))
        add("ctx_ln.b", np.zeros(c.dim))
        proj = 1.0 / math.sqrt(c.dim)
        for i in range(c.blocks):
            p = f"blocks.{i}."
            for ln in ("ln1", "ln2", "ln3"):
                add(p + ln + ".g", np.ones(c.dim))
                add(p + ln + ".b", np.zeros(c.dim))
            for att in ("self", "cross"):
                for w in ("wq", "wk", "wv", "wo"):
                    add(f"{p}{att}.{w}", normal(c.dim, c.dim, s=proj))
                add(f"{p}{att}.bo", np.zeros(c.dim))
            add(p + "mlp.w1", normal(c.dim, c.mlp_hidden, s=proj))
            add(p + "mlp.b1", np.zeros(c.mlp_hidden))
            add(p + "mlp.w2", normal(c.mlp_hidden, c.dim, s=1.0 / math.sqrt(c.mlp_hidden)))
            add(p + "mlp.b2", np.zeros(c.dim))
        add("out_ln.g", np.ones(c.dim))
        add("out_ln.b", np.zeros(c.dim))
        add("out_w", normal(c.dim, c.patch_dim))
        add("out_b", np.zeros(c.patch_dim))

    @property
    def dtype(self) -> np.dtype:
        return self.params["out_w"].dtype

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def requires_grad_(self, flag: bool) -> "DenoiserModel":
        for p in self.params.values():
            p.requires_grad = flag
            p.grad = None
        return self

    def astype(self, dtype) -> "DenoiserModel":
        """Copy with all weights cast to ``dtype``; gradients are dropped."""
        other = DenoiserModel.__new__(DenoiserModel)
        other.config = self.config
        other.seed = getattr(self, "seed", None)
        other.params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return other

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise ParameterError(f"state dict keys differ from architecture: {sorted(missing)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ParameterError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=v.dtype)

    def architecture_hash(self) -> str:
        desc = {"config": asdict(self.config), "params": {k: list(v.shape) for k, v in sorted(self.params.items())}}
        return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]

    # ------------------------------------------------------------ forward

    def _attention(self, x: Tensor, ctx: Tensor, prefix: str) -> tuple[Tensor, Tensor]:
        c = self.config
        P = self.params
        B, N, D = x.shape
        M = ctx.shape[1]
        H, dh = c.heads, c.head_dim

        def heads(t, n):
            t = ad.reshape(t, (B, n, H, dh))
            return ad.reshape(ad.transpose(t, (0, 2, 1, 3)), (B * H, n, dh))

        q = heads(ad.linear(x, P[prefix + "wq"]), N)
        k = heads(ad.linear(ctx, P[prefix + "wk"]), M)
        v = heads(ad.linear(ctx, P[prefix + "wv"]), M)
        probs = ad.softmax_rows(ad.matmul(q, ad.transpose(k)), temperature=math.sqrt(dh))
        out = ad.matmul(probs, v)
        out = ad.reshape(ad.transpose(ad.reshape(out, (B, H, N, dh)), (0, 2, 1, 3)), (B, N, D))
        return ad.linear(out, P[prefix + "wo"], P[prefix + "bo"]), ad.reshape(probs, (B, H, N, M))

    def forward(self, z: Tensor, t, token_ids) -> tuple[Tensor, Tensor]:
        """Batched forward.

        z: (B, 32, 32, 3); t: (B,) training timesteps; token_ids: (B, 8).
        Returns eps_hat (B, 32, 32, 3) and cross-attention averaged over
        blocks and heads, (B, 64, 8).
        """
        c = self.config
        P = self.params
        B = z.shape[0]
        g, p = GRID, c.patch
        token_ids = np.asarray(token_ids).reshape(B, c.prompt_len)

        x = ad.reshape(z, (B, g, p, g, p, CHANNELS))
        patches = ad.reshape(ad.transpose(x, (0, 1, 3, 2, 4, 5)), (B, N_PATCHES, c.patch_dim))
        x = ad.linear(patches, P["patch_w"], P["patch_b"])
        x = x + ad.expand(P["patch_pos"], 0, B)
        temb = Tensor(timestep_embedding(t, c.dim).astype(z.dtype))
        temb = ad.linear(temb, P["time_w"], P["time_b"])
        x = x + ad.expand(temb, 1, N_PATCHES)

        ctx = ad.embedding(P["tok_emb"], token_ids) + ad.expand(P["tok_pos"], 0, B)
        ctx = ad.layer_norm(ctx, P["ctx_ln.g"], P["ctx_ln.b"])

        cross_sum = None
        for i in range(c.blocks):
            pre = f"blocks.{i}."
            h = ad.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
            a, _ = self._attention(h, h, pre + "self.")
            x = x + a
            h = ad.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
            a, probs = self._attention(h, ctx, pre + "cross.")
            x = x + a
            head_sum = ad.sum(probs, axis=1)
            cross_sum = head_sum if cross_sum is None else cross_sum + head_sum
            h = ad.layer_norm(x, P[pre + "ln3.g"], P[pre + "ln3.b"])
            h = ad.gelu(ad.linear(h, P[pre + "mlp.w1"], P[pre + "mlp.b1"]))
            x = x + ad.linear(h, P[pre + "mlp.w2"], P[pre + "mlp.b2"])

        x = ad.layer_norm(x, P["out_ln.g"], P["out_ln.b"])
        x = ad.linear(x, P["out_w"], P["out_b"])
        x = ad.transpose(ad.reshape(x, (B, g, g, p, p, CHANNELS)), (0, 1, 3, 2, 4, 5))
        eps_hat = ad.reshape(x, (B, c.image_size, c.image_size, CHANNELS))
        maps = ad.scale(cross_sum, 1.0 / (c.blocks * c.heads))
        return eps_hat, maps

    __call__ = forward


def denoiser_forward(z_t, t: int, prompt: PromptSpec, model: DenoiserModel) -> tuple[Tensor, AttentionMap]:
    """Single-sample forward: eps prediction and the averaged cross-attention map.

    ``z_t`` is a (32, 32, 3) Tensor or array. Pass a gradient-requiring Tensor to
    differentiate functions of the map with respect to the sample.
    """
    if not isinstance(z_t, Tensor):
        z_t = Tensor(np.asarray(z_t, dtype=model.dtype))
    bad = np.flatnonzero(~np.isfinite(z_t.data))
    if bad.size:
        idx = np.unravel_index(bad[0], z_t.shape)
        raise NumericError(f"non-finite input at index {tuple(int(i) for i in idx)}")
    c = model.config
    eps, maps = model.forward(ad.reshape(z_t, (1, c.image_size, c.image_size, CHANNELS)),
                              np.array([t]), prompt.ids[None, :])
    eps = ad.reshape(eps, (c.image_size, c.image_size, CHANNELS))
    probs = ad.reshape(maps, (N_PATCHES, c.prompt_len))
    prov = {"blocks": list(range(c.blocks)), "heads": list(range(c.heads)), "reduction": "mean",
            "resolution": [GRID, GRID], "smoothed": False}
    return eps, AttentionMap(probs, prov)
