"""Teacher and compress-and-reconstruct student."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cau import CauParams, cau_forward
from .dso import SuperTokenBank, dso_forward
from .encoder import Encoder, EncoderConfig
from .gate import GateDecision, GateParams, budget_select, decide, gate_probs
from .nn import Module, init_linear, linear
from .rng import stream
from .tokenizer import TokenizedInput, TokenizerParams, tokenize


def pool_mean_max(x: Tensor) -> Tensor:
    """``(B, n, d) -> (B, 2d)``: token mean concatenated with token max."""
    return ad.concat([ad.mean(x, axis=-2), ad.amax(x, axis=-2)], axis=-1)


class Teacher(Module):
    """Tokenizer + encoder + linear head on pooled tokens."""

    def __init__(self, d: int = 32, L: int = 4, nh: int = 4, c: int = 16, k: int = 8,
                 num_classes: int = 5, seed: int = 0, token_norm: bool = True):
        super().__init__()
        self.c, self.k = c, k
        self.tokenizer = TokenizerParams(d, seed, norm=token_norm)
        self.encoder = Encoder(EncoderConfig(L=L, d=d, nh=nh), seed)
        init_linear(self.params, "head", 2 * d, num_classes, stream(seed, "init", 300))

    @property
    def d(self) -> int:
        return self.encoder.config.d

    def tokenize(self, points: np.ndarray) -> TokenizedInput:
        return tokenize(points, self.tokenizer, self.c, self.k)

    def features(self, tok: TokenizedInput) -> Tensor:
        return self.encoder(tok.tokens + tok.pos_embed)

    def logits(self, feats: Tensor) -> Tensor:
        return linear(pool_mean_max(feats), self.params["head.w"], self.params["head.b"])


@dataclass
class StudentConfig:
    s: int = 4
    L: int = 2
    tau: float = 1.0
    noise: float = 1.0
    gate: bool = False
    gate_hidden: int = 128
    threshold: float = 0.5
    cau_ratio: int = 4
    cau_out_norm: bool = False
    qkv_bias: bool = False
    out_proj: bool = True
    assign: str = "argmax"


@dataclass
class StudentOutput:
    recon: Tensor                        # (B, c, d)
    cam: list | Tensor                   # (B, c, s) or per-sample list when gated
    probs: Tensor | None = None          # (B, c, 1) gate probabilities
    decisions: list[GateDecision] = field(default_factory=list)

    @property
    def fused_ratio(self) -> float:
        if not self.decisions:
            return 1.0
        return float(np.mean([d.mask.mean() for d in self.decisions]))


class Student(Module):
    """SuperToken bank -> encoder -> upsampler, with an optional fusion gate.

    The encoder is copied from the first ``L`` blocks of ``encoder`` when given.
    """

    def __init__(self, config: StudentConfig, d: int, nh: int, seed: int = 0,
                 encoder: Encoder | None = None):
        super().__init__()
        self.config = config
        self.nh = nh
        rng = stream(seed, "init", 400)
        self.bank = SuperTokenBank(config.s, d, rng, config.qkv_bias, config.out_proj)
        if encoder is not None:
            self.encoder = encoder.truncated(config.L)
        else:
            self.encoder = Encoder(EncoderConfig(L=config.L, d=d, nh=nh), seed + 1)
        self.cau = CauParams(d, rng, ratio=config.cau_ratio, out_norm=config.cau_out_norm)
        self.gate = GateParams(d, rng, config.gate_hidden) if config.gate else None

    def __call__(self, tokens: Tensor, pos: Tensor, mode: str = "eval",
                 rng: np.random.Generator | None = None, threshold: float | None = None,
                 token_budget: int | None = None) -> StudentOutput:
        if self.gate is None:
            return self._forward_dense(tokens, pos, mode, rng)
        return self._forward_gated(tokens, pos, mode, rng, threshold, token_budget)

    def _forward_dense(self, tokens, pos, mode, rng) -> StudentOutput:
        cfg = self.config
        with ad.component("dso"):
            dso = dso_forward(tokens, pos, self.bank, mode, cfg.tau, rng, cfg.noise, cfg.assign)
        with ad.component("transformer"):
            out = self.encoder(dso.supertokens)
        with ad.component("cau"):
            recon = cau_forward(tokens, dso.cam, out, self.cau, self.nh,
                                strict=cfg.assign == "argmax")
        return StudentOutput(recon, dso.cam)

    def _forward_gated(self, tokens, pos, mode, rng, threshold, token_budget) -> StudentOutput:
        cfg = self.config
        r = cfg.threshold if threshold is None else threshold
        with ad.component("gate"):
            probs = gate_probs(tokens, self.gate)          # (B, c, 1)
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens, pos, probs = tokens[None], pos[None], probs[None]
        recon_rows, cams, decisions = [], [], []
        for b in range(tokens.shape[0]):
            pb = probs[b]
            if token_budget is not None:
                decision = budget_select(pb, token_budget, cfg.s)
                if mode == "train":
                    decision.selection = ad.straight_through(decision.selection.data, pb)
            else:
                decision = decide(pb, r, mode)
            decisions.append(decision)
            tb, posb, sel = tokens[b], pos[b], decision.selection
            # hard selection forward; the token values are unchanged by it
            tw = tb * sel + tb * (1.0 - sel)
            fused, kept = decision.fused_indices, decision.kept_indices
            if len(fused) == 0:
                # nothing to merge: no SuperTokens, plain encoder over all tokens
                with ad.component("transformer"):
                    recon_rows.append(self.encoder(tw + posb))
                cams.append(np.zeros((0, cfg.s)))
                continue
            with ad.component("dso"):
                dso = dso_forward(tw[fused], posb[fused], self.bank, mode, cfg.tau, rng,
                                  cfg.noise, cfg.assign)
            x = ad.concat([dso.supertokens, tw[kept] + posb[kept]], axis=0)
            with ad.component("transformer"):
                out = self.encoder(x)
            s = cfg.s
            with ad.component("cau"):
                fused_rec = cau_forward(tw[fused], dso.cam, out[:s], self.cau, self.nh,
                                        strict=cfg.assign == "argmax")
            order = np.concatenate([fused, kept])
            inverse = np.argsort(order)
            recon_rows.append(ad.concat([fused_rec, out[s:]], axis=0)[inverse])
            cams.append(dso.cam)
        recon = ad.concat([ad.reshape(r_, (1, *r_.shape)) for r_ in recon_rows], axis=0)
        if squeeze:
            recon, probs = recon[0], probs[0]
        return StudentOutput(recon, cams, probs, decisions)
