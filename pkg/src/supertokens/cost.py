"""Closed-form FLOP counts and a measured counterpart.

Conventions: 2 FLOPs per multiply-accumulate; layer norms, softmax,
activations and residual adds are free. Symbols: ``S`` SuperTokens, ``N``
input tokens, ``D`` width, ``nh`` heads, ``d_gate`` gate hidden width,
``L`` encoder layers, ``R`` fused tokens and ``U = N - R`` kept tokens.
All functions return Python ints, so nothing overflows.
"""
from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import Encoder, EncoderConfig
from .gate import gate_probs
from .models import Student, StudentConfig
from .rng import stream


def _check(**values) -> None:
    for name, v in values.items():
        if int(v) != v or v < 0:
            raise ValueError(f"{name} must be a nonnegative integer, got {v}")


def mlp_flops(N: int, D: int) -> int:
    _check(N=N, D=D)
    return 16 * N * D * D


def sa_flops(N: int, D: int) -> int:
    _check(N=N, D=D)
    return 4 * N * N * D + 8 * N * D * D


def transformer_flops(L: int, N: int, D: int) -> int:
    _check(L=L, N=N, D=D)
    return 4 * L * N * D * (N + 6 * D)


def dso_flops(S: int, N: int, D: int) -> int:
    _check(S=S, N=N, D=D)
    return 4 * D * D * (S + N) + 4 * S * N * D


def cau_flops(S: int, N: int, D: int, nh: int) -> int:
    _check(S=S, N=N, D=D, nh=nh)
    return 2 * S * N * (2 * nh + D) + 16 * N * D * D


def gate_flops(N: int, D: int, d_gate: int) -> int:
    _check(N=N, D=D, d_gate=d_gate)
    return 4 * N * D * d_gate


def foundry_flops(S: int, N: int, D: int, nh: int, L: int) -> int:
    _check(S=S, N=N, D=D, nh=nh, L=L)
    return 4 * D * D * (S + 5 * N) + 2 * S * N * (3 * D + 2 * nh) + 4 * L * S * D * (S + 6 * D)


def foundry_gate_flops(S: int, N: int, D: int, nh: int, d_gate: int, L: int, R: int) -> int:
    _check(S=S, N=N, D=D, nh=nh, d_gate=d_gate, L=L, R=R)
    if R > N:
        raise ValueError(f"R={R} exceeds N={N}")
    U = N - R
    return (4 * D * D * (S + 5 * R) + 2 * S * R * (3 * D + 2 * nh) + 4 * N * D * d_gate
            + 4 * L * D * (S + U) * (S + U + 6 * D))


def fused_count(N: int, r: float) -> int:
    """``R = floor(r N)``."""
    if not 0.0 <= r <= 1.0:
        raise ValueError("r must lie in [0, 1]")
    return int(np.floor(r * N))


@dataclass(frozen=True)
class CostConfig:
    S: int = 4
    N: int = 16
    D: int = 32
    nh: int = 4
    d_gate: int = 128
    L: int = 2
    R: int | None = None

    def __post_init__(self):
        _check(S=self.S, N=self.N, D=self.D, nh=self.nh, d_gate=self.d_gate, L=self.L)
        if self.nh == 0 or self.D % self.nh:
            raise ValueError(f"nh={self.nh} must divide D={self.D}")
        if self.R is not None and not 0 <= self.R <= self.N:
            raise ValueError(f"R={self.R} outside [0, {self.N}]")

    @property
    def hd(self) -> int:
        return self.D // self.nh

    @property
    def fused(self) -> int:
        return self.N if self.R is None else self.R

    @property
    def U(self) -> int:
        return self.N - self.fused

    @classmethod
    def with_ratio(cls, r: float, **kw) -> "CostConfig":
        return cls(R=fused_count(kw.get("N", cls.N), r), **kw)


@dataclass(frozen=True)
class CostBreakdown:
    mlp: int = 0
    self_attention: int = 0
    transformer: int = 0
    dso: int = 0
    cau: int = 0
    gate: int = 0
    total: int = 0

    def as_dict(self) -> dict[str, int]:
        return asdict(self)


def breakdown(cfg: CostConfig, model: str = "foundry") -> CostBreakdown:
    """Closed-form component costs of ``model`` in {transformer, foundry, foundry_gate}.

    A gated model that fuses nothing forms no SuperTokens, so ``R = 0`` is
    costed with ``S = 0``.
    """
    if model == "transformer":
        n = cfg.N
        mlp, sa = cfg.L * mlp_flops(n, cfg.D), cfg.L * sa_flops(n, cfg.D)
        return CostBreakdown(mlp, sa, mlp + sa, total=mlp + sa)
    if model == "foundry":
        n, r, gate = cfg.S, cfg.N, 0
    elif model == "foundry_gate":
        r = cfg.fused
        n, gate = cfg.S + cfg.U, gate_flops(cfg.N, cfg.D, cfg.d_gate)
    else:
        raise ValueError(f"unknown model {model!r}")
    s = cfg.S
    if model == "foundry_gate" and r == 0:
        s = 0          # nothing fused: no SuperTokens are formed
        n = cfg.N
    mlp, sa = cfg.L * mlp_flops(n, cfg.D), cfg.L * sa_flops(n, cfg.D)
    dso, cau = dso_flops(s, r, cfg.D), cau_flops(s, r, cfg.D, cfg.nh)
    return CostBreakdown(mlp, sa, mlp + sa, dso, cau, gate, mlp + sa + dso + cau + gate)


def _breakdown_from(counter: ad.FlopCounter, counted_total: int | None = None) -> CostBreakdown:
    parts = {"mlp": counter.leaf("mlp"), "self_attention": counter.leaf("self_attention"),
             "transformer": counter.under("transformer"), "dso": counter.under("dso"),
             "cau": counter.under("cau"), "gate": counter.under("gate")}
    return CostBreakdown(**parts, total=counter.total if counted_total is None else counted_total)


def count_ops(cfg: CostConfig, model: str = "foundry", seed: int = 0) -> CostBreakdown:
    """Run a randomly initialized model of the given shape under the FLOP counter.

    ``model`` is one of transformer, foundry, foundry_gate, mlp or
    self_attention (the last two count a single layer). For foundry_gate the
    gate threshold is picked so that exactly ``R`` tokens are fused.
    """
    rng = stream(seed, "init", 900)
    x = Tensor(rng.normal(size=(1, cfg.N, cfg.D)))
    enc_cfg = EncoderConfig(L=cfg.L, d=cfg.D, nh=cfg.nh)
    counter = ad.FlopCounter()
    if model in ("mlp", "self_attention"):
        one = Encoder(EncoderConfig(L=1, d=cfg.D, nh=cfg.nh), seed)
        with counter, ad.component("transformer"):
            one(x)
        value = counter.leaf(model)
        return CostBreakdown(**{model: value, "total": value})
    if model == "transformer":
        with counter, ad.component("transformer"):
            Encoder(enc_cfg, seed)(x)
        return _breakdown_from(counter)
    if model not in ("foundry", "foundry_gate"):
        raise ValueError(f"unknown model {model!r}")
    if cfg.S < 1:
        raise ValueError("a Foundry student needs S >= 1")
    gated = model == "foundry_gate"
    student = Student(StudentConfig(s=cfg.S, L=cfg.L, gate=gated, gate_hidden=cfg.d_gate),
                      cfg.D, cfg.nh, seed, encoder=Encoder(enc_cfg, seed))
    pos = Tensor(rng.normal(size=x.shape))
    threshold = None
    if gated:
        probs = gate_probs(x[0], student.gate).data[:, 0]
        threshold = _threshold_for(probs, cfg.fused)
    with counter:
        student(x, pos, mode="eval", threshold=threshold)
    return _breakdown_from(counter)


def _threshold_for(probs: np.ndarray, R: int) -> float:
    """A threshold ``r`` with exactly ``R`` probabilities strictly above it."""
    desc = np.sort(probs)[::-1]
    if R == 0:
        return float(np.nextafter(desc[0], np.inf)) if desc[0] < 1 else 1.0
    if R == len(desc):
        return float(np.nextafter(desc[-1], -np.inf))
    if desc[R] == desc[R - 1]:
        raise ValueError("tied gate probabilities; cannot fuse exactly R tokens")
    return float((desc[R] + desc[R - 1]) / 2)


def sweep(values: dict[str, list[int]], base: CostConfig, model: str = "foundry"):
    """Cartesian sweep over config fields; yields ``(config, breakdown)``."""
    keys = list(values)
    for combo in itertools.product(*(values[k] for k in keys)):
        cfg = CostConfig(**{**asdict(base), **dict(zip(keys, combo))})
        yield cfg, breakdown(cfg, model)
