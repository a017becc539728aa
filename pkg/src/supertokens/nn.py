"""Parameter containers and a couple of layer helpers shared by the models."""
from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import trunc_normal


class Module:
    """A flat ``name -> Tensor`` parameter dict plus children."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}

    def children(self) -> dict[str, "Module"]:
        return {k: v for k, v in vars(self).items() if isinstance(v, Module)}

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self.params.items():
            yield prefix + name, p
        for cname, child in self.children().items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, v in state.items():
            if k in own:
                if own[k].shape != np.shape(v):
                    raise ad.ShapeError(f"{k}: expected {own[k].shape}, got {np.shape(v)}")
                own[k].data = np.array(v, dtype=np.float64)
            elif strict:
                raise KeyError(f"unexpected parameter {k}")

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = ad.matmul(x, w)
    return out if b is None else out + b


def init_linear(params: dict, name: str, n_in: int, n_out: int, rng, bias: bool = True,
                std: float = 0.02) -> None:
    params[f"{name}.w"] = Tensor(trunc_normal(rng, (n_in, n_out), std), requires_grad=True)
    if bias:
        params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True)


class MLP(Module):
    """``in -> hidden -> out`` with GELU in between.

    ``std=None`` draws each layer with std ``1/sqrt(fan_in)``.
    """

    def __init__(self, n_in: int, hidden: int, n_out: int, rng, std: float | None = 0.02):
        super().__init__()
        init_linear(self.params, "fc1", n_in, hidden, rng, std=std or n_in ** -0.5)
        init_linear(self.params, "fc2", hidden, n_out, rng, std=std or hidden ** -0.5)

    def __call__(self, x: Tensor) -> Tensor:
        p = self.params
        return linear(ad.gelu(linear(x, p["fc1.w"], p["fc1.b"])), p["fc2.w"], p["fc2.b"])
