"""Pre-norm transformer encoder (no class token, no positional mixing)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, init_linear, linear
from .rng import stream, trunc_normal


@dataclass(frozen=True)
class EncoderConfig:
    L: int = 4
    d: int = 32
    nh: int = 4
    mlp_ratio: int = 4
    qkv_bias: bool = True
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.d % self.nh:
            raise ValueError(f"d={self.d} not divisible by nh={self.nh}")
        if self.L < 0:
            raise ValueError("L must be >= 0")

    @property
    def hd(self) -> int:
        return self.d // self.nh


class Encoder(Module):
    def __init__(self, config: EncoderConfig, seed: int = 0):
        super().__init__()
        self.config = config
        self.params = init_params(config, seed)

    def __call__(self, x: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
        return encode(x, self.params, self.config, key_mask)

    def truncated(self, L: int) -> "Encoder":
        """A copy keeping the first ``L`` blocks."""
        cfg = EncoderConfig(L, self.config.d, self.config.nh, self.config.mlp_ratio,
                            self.config.qkv_bias, self.config.ln_eps)
        out = Encoder.__new__(Encoder)
        Module.__init__(out)
        out.config = cfg
        out.params = {k: Tensor(v.data.copy(), v.requires_grad) for k, v in self.params.items()
                      if int(k.split(".")[1]) < L}
        return out


def init_params(config: EncoderConfig, seed: int) -> dict[str, Tensor]:
    """Truncated-normal init (std 0.02, +-2 std) with residual projections scaled by 1/sqrt(2L)."""
    rng = stream(seed, "init", 200)
    d, h = config.d, config.d * config.mlp_ratio
    params: dict[str, Tensor] = {}
    rescale = 1.0 / np.sqrt(2.0 * config.L) if config.L else 1.0
    for i in range(config.L):
        pre = f"blocks.{i}."
        for norm in ("norm1", "norm2"):
            params[pre + norm + ".w"] = Tensor(np.ones(d), requires_grad=True)
            params[pre + norm + ".b"] = Tensor(np.zeros(d), requires_grad=True)
        init_linear(params, pre + "qkv", d, 3 * d, rng, bias=config.qkv_bias)
        init_linear(params, pre + "proj", d, d, rng)
        init_linear(params, pre + "fc1", d, h, rng)
        init_linear(params, pre + "fc2", h, d, rng)
        for name in ("proj", "fc2"):
            params[pre + name + ".w"].data *= rescale
    return params


def attention(x: Tensor, p: dict, pre: str, config: EncoderConfig,
              key_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head self-attention on ``(..., n, d)``.

    ``key_mask`` (``(..., n)`` booleans, True = attend) hides padded keys.
    """
    *lead, n, d = x.shape
    nh, hd = config.nh, config.hd
    qkv = linear(x, p[pre + "qkv.w"], p.get(pre + "qkv.b"))
    qkv = ad.reshape(qkv, (*lead, n, 3, nh, hd))
    nl = len(lead)
    qkv = ad.transpose(qkv, (*range(nl), nl + 1, nl + 2, nl, nl + 3))  # (..., 3, nh, n, hd)
    q, k, v = qkv[(Ellipsis, 0, slice(None), slice(None), slice(None))], \
        qkv[(Ellipsis, 1, slice(None), slice(None), slice(None))], \
        qkv[(Ellipsis, 2, slice(None), slice(None), slice(None))]
    scores = ad.matmul(q, ad.transpose(k)) * (1.0 / np.sqrt(hd))
    if key_mask is not None:
        bias = np.where(np.asarray(key_mask)[..., None, None, :], 0.0, -1e30)
        scores = scores + bias
    attn = ad.softmax(scores, axis=-1)
    out = ad.matmul(attn, v)                                            # (..., nh, n, hd)
    out = ad.transpose(out, (*range(nl), nl + 1, nl, nl + 2))
    out = ad.reshape(out, (*lead, n, d))
    return linear(out, p[pre + "proj.w"], p[pre + "proj.b"])


def encode(x: Tensor, params: dict, config: EncoderConfig,
           key_mask: np.ndarray | None = None) -> Tensor:
    if x.shape[-1] != config.d:
        raise ad.ShapeError(f"encoder expects last dim {config.d}, got {x.shape[-1]}")
    for i in range(config.L):
        pre = f"blocks.{i}."
        h = ad.layer_norm(x, params[pre + "norm1.w"], params[pre + "norm1.b"], config.ln_eps)
        with ad.component("self_attention"):
            x = x + attention(h, params, pre, config, key_mask)
        h = ad.layer_norm(x, params[pre + "norm2.w"], params[pre + "norm2.b"], config.ln_eps)
        with ad.component("mlp"):
            h = ad.gelu(linear(h, params[pre + "fc1.w"], params[pre + "fc1.b"]))
            x = x + linear(h, params[pre + "fc2.w"], params[pre + "fc2.b"])
    return x
