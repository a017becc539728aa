"""Gated student under a hard token budget.

The gate scores each token; the budget selector fuses the lowest-scoring ones
so that kept tokens plus SuperTokens fit the encoder budget.
"""
import warnings

import numpy as np

from supertokens import DistillConfig, distill, generate_dataset, train_teacher
from supertokens.gate import BudgetWarning

cfg = DistillConfig(n_train=128, n_holdout=32, teacher_epochs=6, epochs=6, warmup_epochs=1,
                    unfreeze_epoch=6, gate=True, lambda_gate=1e-10, seed=1)
train = generate_dataset(cfg.n_train, cfg.points, seed=cfg.seed)
test = generate_dataset(cfg.n_holdout, cfg.points, seed=cfg.seed + 1000)
teacher = train_teacher(train, cfg)
student = distill(teacher, train, None, cfg).student

tok = teacher.tokenize(test.points)
target = teacher.encoder(tok.tokens + tok.pos_embed).data
print(f"{'budget':>7}{'fused':>8}{'encoder':>9}{'mse':>10}")
for budget in (cfg.c, 14, 12, 10, 8, cfg.s):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", BudgetWarning)
        out = student(tok.tokens, tok.pos_embed, token_budget=budget)
    fused = np.mean([len(d.fused_indices) for d in out.decisions])
    enc = max(d.encoder_tokens(cfg.s) for d in out.decisions)
    mse = float(np.mean((out.recon.data - target) ** 2))
    print(f"{budget:>7}{fused:>8.1f}{enc:>9}{mse:>10.5f}")
