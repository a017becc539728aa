"""Reconstruction of the ``c`` token positions from processed SuperTokens.

Each token looks up the SuperToken it was assigned to in the compression
step, adds its own initial embedding back and goes through an MLP::

    Y_hat = MLP(T + CAM @ S_out)
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, Module


class ContractError(ValueError):
    """An input violates an operation's documented precondition."""


class CauParams(Module):
    """Output MLP ``d -> ratio*d -> d``; ``identity=True`` drops it (test configs)."""

    def __init__(self, d: int, rng, ratio: int = 4, identity: bool = False,
                 out_norm: bool = False):
        super().__init__()
        self.d = d
        self.identity = identity
        self.mlp = None if identity else MLP(d, ratio * d, d, rng)
        if out_norm:
            self.params["norm.w"] = Tensor(np.ones(d), requires_grad=True)
            self.params["norm.b"] = Tensor(np.zeros(d), requires_grad=True)


def check_one_hot(cam: np.ndarray) -> None:
    cam = np.asarray(cam)
    if cam.size and (not np.all((cam == 0) | (cam == 1)) or not np.all(cam.sum(axis=-1) == 1)):
        raise ContractError("CAM rows must be one-hot")


def route(cam: Tensor, supertokens: Tensor, nh: int = 1) -> Tensor:
    """``CAM @ S`` computed head by head as hard attention.

    The map goes through the usual attention bookkeeping (temperature scale,
    row normalization, keep mask) before the product; for a one-hot map all
    three are exact identities, forward and backward.
    """
    *lead, c, s = cam.shape
    d = supertokens.shape[-1]
    if d % nh:
        raise ad.ShapeError(f"d={d} not divisible by nh={nh}")
    hd = d // nh
    nl = len(lead)
    heads = ad.reshape(cam, (*lead, 1, c, s))
    heads = ad.mul(heads, np.ones((nh, 1, 1)), count=True)                    # scale
    norm = ad.sum(ad.detach(heads), axis=-1, keepdims=True, count=True)
    heads = ad.div(heads, ad.clamp_min(norm, 1.0), count=True)               # normalize
    heads = ad.mul(heads, np.ones(heads.shape), count=True)                   # keep mask
    v = ad.reshape(supertokens, (*lead, s, nh, hd))
    v = ad.transpose(v, (*range(nl), nl + 1, nl, nl + 2))                     # (..., nh, s, hd)
    out = ad.matmul(heads, v)                                                 # (..., nh, c, hd)
    out = ad.transpose(out, (*range(nl), nl + 1, nl, nl + 2))
    return ad.reshape(out, (*lead, c, d))


def cau_forward(tokens: Tensor, cam: Tensor, supertokens_out: Tensor, params: CauParams,
                nh: int = 1, strict: bool = True) -> Tensor:
    """Reconstruct ``(..., c, d)`` from tokens, the CAM and encoded SuperTokens."""
    if strict:
        check_one_hot(cam.data)
    if tokens.shape[:-1] != cam.shape[:-1] or cam.shape[-1] != supertokens_out.shape[-2]:
        raise ad.ShapeError(f"inconsistent shapes: T{tokens.shape} CAM{cam.shape} "
                            f"S{supertokens_out.shape}")
    x = tokens + route(cam, supertokens_out, nh)
    if params.mlp is not None:
        x = params.mlp(x)
    if "norm.w" in params.params:
        x = ad.layer_norm(x, params.params["norm.w"], params.params["norm.b"])
    return x
