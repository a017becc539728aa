"""Per-token fusion gate and the token-budget threshold selector."""
from __future__ import annotations

import io
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import Module, init_linear, linear


class BudgetWarning(UserWarning):
    """More tokens reach the encoder than the budget allows (ties at the threshold)."""


class GateParams(Module):
    """Two-layer MLP ``d -> hidden -> d`` whose channel mean is the fusion logit.

    Averaging the ``d`` outputs is a reparametrized ``hidden -> 1`` head; the
    wide second layer is what the published gate cost assumes.
    """

    def __init__(self, d: int, rng, hidden: int = 128):
        super().__init__()
        self.d, self.hidden = d, hidden
        init_linear(self.params, "fc1", d, hidden, rng)
        init_linear(self.params, "fc2", hidden, d, rng)


def gate_probs(tokens: Tensor, params: GateParams) -> Tensor:
    """Fusion probabilities ``(..., c, 1)``."""
    p = params.params
    h = ad.gelu(linear(tokens, p["fc1.w"], p["fc1.b"]))
    logit = ad.mean(linear(h, p["fc2.w"], p["fc2.b"]), axis=-1, keepdims=True)
    return ad.sigmoid(logit)


@dataclass
class GateDecision:
    probs: np.ndarray           # (c,)
    mask: np.ndarray            # (c,) True = fused into SuperTokens
    threshold_used: float
    selection: Tensor | None = None   # (c, 1); carries the straight-through gradient
    overshoot: int = 0

    @property
    def fused_indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)

    @property
    def kept_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.mask)

    def encoder_tokens(self, s: int) -> int:
        """Encoder sequence length; SuperTokens only exist when something is fused."""
        return int((~self.mask).sum()) + (s if self.mask.any() else 0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("index,pi,fused\n")
        for i, (pi, m) in enumerate(zip(self.probs, self.mask)):
            buf.write(f"{i},{float(pi)!r},{int(m)}\n")
        return buf.getvalue()


def decide(probs: Tensor, threshold: float, mode: str = "eval") -> GateDecision:
    """Fuse tokens with ``pi > threshold``.

    In ``train`` mode the selection is straight-through: hard forward, sigmoid
    gradient backward.
    """
    pi = probs.data.reshape(-1)
    hard = (probs.data > threshold).astype(np.float64)
    if mode == "train":
        selection = ad.straight_through(hard, probs)
    elif mode == "eval":
        selection = Tensor(hard)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return GateDecision(pi.copy(), hard.reshape(-1) > 0, float(threshold), selection)


def gate_forward(tokens: Tensor, params: GateParams, threshold: float,
                 mode: str = "eval") -> GateDecision:
    """Gate a single sample ``(c, d)``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    return decide(gate_probs(tokens, params), threshold, mode)


def gate_loss(probs: Tensor, lambda_gate: float) -> Tensor:
    """``-lambda * sum(pi)``, averaged over any leading batch axes."""
    if lambda_gate < 0:
        raise ValueError("lambda_gate must be nonnegative")
    total = ad.sum(probs, axis=(-2, -1)) if probs.ndim >= 2 else ad.sum(probs)
    return ad.mean(total) * (-float(lambda_gate))


def budget_threshold(pi: np.ndarray, token_budget: int, s: int) -> float:
    """Threshold so that ``kept + s <= token_budget`` when ``pi`` values are distinct.

    Mirrors the reference selector: the cut sits at the ``(need + 2)``-th
    largest probability and fusion uses a strict ``>``, so one token more than
    strictly necessary is fused.
    """
    if token_budget < s:
        raise ValueError(f"token budget {token_budget} is below the SuperToken count {s}")
    pi = np.asarray(pi, dtype=np.float64).reshape(-1)
    c = pi.size
    if c <= token_budget:
        return 1.0
    need = c - token_budget + s
    if need + 1 >= c:
        # fuse everything (the reference indexes past the end when need == c - 1)
        return -float(np.finfo(np.float64).eps)
    return float(np.sort(pi)[::-1][need + 1])


def budget_select(probs, token_budget: int, s: int) -> GateDecision:
    probs_t = probs if isinstance(probs, Tensor) else Tensor(np.asarray(probs).reshape(-1, 1))
    pi = probs_t.data.reshape(-1)
    thr = budget_threshold(pi, token_budget, s)
    decision = decide(probs_t, thr, "eval")
    decision.overshoot = max(0, decision.encoder_tokens(s) - token_budget)
    if decision.overshoot:
        warnings.warn(f"{decision.overshoot} token(s) over budget {token_budget} "
                      f"(ties at threshold {thr!r})", BudgetWarning, stacklevel=2)
    return decision
