"""Fast self-checks behind ``supertokens verify``.

Each check returns ``(ok, detail)``; ``run_all`` collects them. The suite is
small enough to finish in a few seconds and needs no training.
"""
from __future__ import annotations

import io
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import cost
from . import io as fio
from .autodiff import Tensor
from .cau import CauParams, cau_forward
from .dso import SuperTokenBank, compute_cam, dso_forward, group_average
from .encoder import Encoder, EncoderConfig
from .gate import BudgetWarning, budget_select
from .optim import lr_schedule


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.detail} ({self.seconds:.2f}s)"


def check_cam(n: int = 200, seed: int = 0):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        c, s, d = rng.integers(1, 33), rng.integers(1, 9), rng.integers(1, 33)
        bank = SuperTokenBank(int(s), int(d), rng)
        tokens = Tensor(rng.normal(size=(c, d)))
        for mode in ("train", "eval"):
            cam, logits = compute_cam(tokens, bank, mode, rng=rng)
            if not (np.all((cam.data == 0) | (cam.data == 1)) and np.all(cam.data.sum(-1) == 1)):
                return False, f"non one-hot row (c={c}, s={s}, mode={mode})"
            if mode == "eval":
                expect = [min(j for j in range(s) if row[j] == row.max()) for row in logits.data]
                if not np.array_equal(cam.data.argmax(-1), expect):
                    return False, "eval assignment differs from argmax"
    return True, f"{n} instances one-hot, eval == argmax"


def check_group_average(n: int = 200, seed: int = 1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        c, s, d = rng.integers(1, 20), rng.integers(1, 6), rng.integers(1, 8)
        idx = rng.integers(0, s, size=c)
        cam = (idx[:, None] == np.arange(s)).astype(float)
        v = rng.normal(size=(c, d))
        got = group_average(Tensor(cam), Tensor(v)).data
        for j in range(s):
            ref = v[idx == j].mean(axis=0) if (idx == j).any() else np.zeros(d)
            worst = max(worst, float(np.abs(got[j] - ref).max()))
    return worst <= 1e-12, f"max deviation {worst:.1e}"


def check_gradients(seed: int = 2):
    rng = np.random.default_rng(seed)
    c, s, d = 6, 2, 8
    bank = SuperTokenBank(s, d, rng, out_proj=True)
    enc = Encoder(EncoderConfig(L=2, d=d, nh=2), seed)
    cau = CauParams(d, rng)
    tokens = Tensor(rng.normal(size=(c, d)), requires_grad=True)
    pos = Tensor(rng.normal(size=(c, d)))
    target = Tensor(rng.normal(size=(c, d)))

    def f(t):
        out = dso_forward(t, pos, bank, "eval", assign="softmax")
        return ad.smooth_l1(cau_forward(t, out.cam, enc(out.supertokens), cau, strict=False), target)

    report = ad.check_gradients(f, [tokens], tol=1e-4)
    return report.ok, f"max relative error {report.max_rel_error:.1e}"


def check_flops(n: int = 10, seed: int = 3):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        nh = int(rng.choice([1, 2, 4]))
        cfg = cost.CostConfig(S=int(rng.integers(1, 6)), N=int(rng.integers(1, 24)),
                              D=nh * int(rng.integers(2, 8)), nh=nh,
                              d_gate=int(rng.integers(1, 16)), L=int(rng.integers(0, 3)))
        cfg = cost.CostConfig(**{**cfg.__dict__, "R": int(rng.integers(1, cfg.N + 1))})
        for model in ("transformer", "foundry", "foundry_gate"):
            if cost.count_ops(cfg, model) != cost.breakdown(cfg, model):
                return False, f"{model} mismatch at {cfg}"
    return True, f"{n} configs x 3 models exact"


def check_budget(n: int = 1000, seed: int = 4):
    rng = np.random.default_rng(seed)
    with warnings.catch_warnings():
        warnings.simplefilter("error", BudgetWarning)
        for _ in range(n):
            c = int(rng.integers(1, 129))
            s = int(rng.integers(1, min(c, 32) + 1))
            B = int(rng.integers(s, c + 1))
            pi = rng.permutation(c) / c + rng.uniform(0, 1 / (2 * c))
            dec = budget_select(pi, B, s)
            if dec.encoder_tokens(s) > B:
                return False, f"encoder count {dec.encoder_tokens(s)} > B={B}"
    return True, f"{n} instances within budget"


def check_io(seed: int = 5):
    rng = np.random.default_rng(seed)
    arrays = [rng.normal(size=shape) for shape in [(), (3,), (2, 0), (2, 3, 4)]]
    buf = io.BytesIO()
    for a in arrays:
        fio.write_tensor(buf, a)
    buf.seek(0)
    back = []
    while (t := fio.read_tensor(buf)) is not None:
        back.append(t)
    ok = len(back) == len(arrays) and all(np.array_equal(a, b) and a.shape == b.shape
                                           for a, b in zip(arrays, back))
    return ok, f"{len(arrays)} tensors round-tripped"


def check_schedule():
    lrs = [lr_schedule(i, 100, 10, 1e-3) for i in range(100)]
    ok = lrs[0] == 1e-6 and abs(lrs[10] - 1e-3) < 1e-15 and abs(lrs[-1] - 1e-6) < 1e-15
    return ok, "warmup start, peak and final values"


CHECKS = {
    "cam_one_hot": check_cam,
    "group_average": check_group_average,
    "gradients": check_gradients,
    "flops": check_flops,
    "budget": check_budget,
    "tensor_io": check_io,
    "lr_schedule": check_schedule,
}


def run_all(names=None) -> list[CheckResult]:
    results = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        try:
            ok, detail = CHECKS[name]()
        except Exception as exc:   # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(CheckResult(name, bool(ok), detail, time.perf_counter() - t0))
    return results
