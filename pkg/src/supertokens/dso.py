"""Compression of ``c`` tokens into ``s`` SuperTokens by hard cross-attention.

SuperTokens are queries, tokens are keys/values. Every token is assigned to
its most similar SuperToken (a one-hot cross-attention map, CAM) and each
SuperToken becomes the mean of the value vectors routed to it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, init_linear, linear
from .rng import trunc_normal


class SuperTokenBank(Module):
    """Learnable SuperTokens ``S`` (s x d) and the DSO projections.

    ``out_proj`` adds the output projection of a standard cross-attention
    block after the grouped average; ``qkv_bias`` is an ablation switch.
    """

    def __init__(self, s: int, d: int, rng, qkv_bias: bool = False, out_proj: bool = True):
        super().__init__()
        if s < 1:
            raise ValueError("need at least one SuperToken")
        self.s, self.d = s, d
        self.params["S"] = Tensor(trunc_normal(rng, (s, d)), requires_grad=True)
        for name in ("q", "k", "v"):
            init_linear(self.params, name, d, d, rng, bias=qkv_bias)
        if out_proj:
            init_linear(self.params, "o", d, d, rng)

    @property
    def has_out_proj(self) -> bool:
        return "o.w" in self.params


def _one_hot(index: np.ndarray, s: int) -> np.ndarray:
    return (index[..., None] == np.arange(s)).astype(np.float64)


def similarity(tokens: Tensor, bank: SuperTokenBank) -> Tensor:
    """Scaled dot products ``q_i . k_j / sqrt(d)`` laid out as ``(..., c, s)``."""
    p = bank.params
    q = linear(p["S"], p["q.w"], p.get("q.b"))
    k = linear(tokens, p["k.w"], p.get("k.b"))
    return ad.matmul(k, ad.transpose(q)) * (1.0 / np.sqrt(bank.d))


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def cam_from_logits(logits: Tensor, mode: str = "eval", tau: float = 1.0,
                    rng: np.random.Generator | None = None, noise: float = 1.0,
                    assign: str = "argmax") -> Tensor:
    """Turn similarity logits into a cross-attention map.

    ``eval``: one-hot argmax (lowest index on ties), no gradient.
    ``train``: Gumbel-perturbed argmax forward, ``softmax(noisy / tau)``
    gradient backward (straight-through). ``noise`` scales the Gumbel draw;
    0 (or False) gives a deterministic straight-through argmax.
    ``assign="softmax"`` skips the hard assignment altogether (ablation).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    s = logits.shape[-1]
    if mode == "eval":
        if assign == "softmax":
            return ad.softmax(logits * (1.0 / tau), axis=-1)
        return Tensor(_one_hot(np.argmax(logits.data, axis=-1), s))
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    noisy = logits
    if noise:
        if rng is None:
            raise ValueError("train mode with noise needs an rng")
        noisy = logits + float(noise) * gumbel_noise(rng, logits.shape)
    soft = ad.softmax(noisy * (1.0 / tau), axis=-1)
    if assign == "softmax":
        return soft
    hard = _one_hot(np.argmax(noisy.data, axis=-1), s)
    return ad.straight_through(hard, soft)


def compute_cam(tokens: Tensor, bank: SuperTokenBank, mode: str = "eval", tau: float = 1.0,
                rng: np.random.Generator | None = None, noise: float = 1.0,
                assign: str = "argmax") -> tuple[Tensor, Tensor]:
    """Returns ``(cam, logits)``; both shaped ``(..., c, s)``."""
    logits = similarity(tokens, bank)
    return cam_from_logits(logits, mode, tau, rng, noise, assign), logits


def group_average(cam: Tensor, values: Tensor, count_flops: bool = True) -> Tensor:
    """Per-SuperToken mean of the rows routed to it: ``CAM^T V / max(count, 1)``.

    Empty groups produce a zero row.
    """
    cam, values = ad._as_tensor(cam), ad._as_tensor(values)
    counts = ad.clamp_min(ad.sum(cam, axis=-2, keepdims=True), 1.0)   # (..., 1, s)
    weights = ad.transpose(cam / counts)                                # (..., s, c)
    if count_flops:
        return ad.matmul(weights, values)
    with ad.uncounted():
        return ad.matmul(weights, values)


@dataclass
class DsoOutput:
    supertokens: Tensor   # (..., s, d) encoder-ready (content + positions)
    cam: Tensor           # (..., c, s)
    logits: Tensor


def dso_forward(tokens: Tensor, pos_embed: Tensor, bank: SuperTokenBank, mode: str = "eval",
                tau: float = 1.0, rng: np.random.Generator | None = None,
                noise: float = 1.0, assign: str = "argmax") -> DsoOutput:
    """Group content-only tokens into SuperTokens, then add the grouped positions."""
    if tokens.shape != pos_embed.shape:
        raise ad.ShapeError(f"tokens {tokens.shape} vs positions {pos_embed.shape}")
    p = bank.params
    cam, logits = compute_cam(tokens, bank, mode, tau, rng, noise, assign)
    values = linear(tokens, p["v.w"], p.get("v.b"))
    content = group_average(cam, values)
    if bank.has_out_proj:
        content = linear(content, p["o.w"], p["o.b"])
    # positions are merged with the same map; not part of the attention cost
    positions = group_average(cam, pos_embed, count_flops=False)
    return DsoOutput(content + positions, cam, logits)
