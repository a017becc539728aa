"""Acceptance gate: one PASS/FAIL line per criterion, at the agreed tolerances.

Run on its own with ``pytest tests/test_acceptance.py -s``; the lines are also
repeated in the terminal summary of any run that includes this module.
"""
import time
import warnings
from functools import cache

import numpy as np
import pytest

from supertokens import autodiff as ad
from supertokens import cost
from supertokens.autodiff import Tensor
from supertokens.baselines import KMeansStudent, distill_fps_student, train_specialist
from supertokens.cau import CauParams, cau_forward
from supertokens.cli import main
from supertokens.cost import CostConfig
from supertokens.data import generate_count_dataset, generate_dataset
from supertokens.distill import (DistillConfig, distill, fused_ratio, probe_accuracy,
                                 probe_finetune, train_teacher)
from supertokens.dso import SuperTokenBank, compute_cam, dso_forward, group_average
from supertokens.encoder import Encoder, EncoderConfig
from supertokens.gate import BudgetWarning, budget_select

REPORT: list[str] = []
SEEDS = (0, 1, 2)


def record(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  criterion {number:>2} {title}: {detail}"
    REPORT.append(line)
    print(line)


# ---------------------------------------------------------------- 1

def test_criterion_01_cam_validity():
    rng = np.random.default_rng(101)
    bad = 0
    t0 = time.perf_counter()
    for _ in range(1000):
        c, s, d = (int(v) for v in (rng.integers(1, 33), rng.integers(1, 9), rng.integers(1, 33)))
        bank = SuperTokenBank(s, d, rng)
        tokens = Tensor(rng.normal(size=(c, d)))
        for mode in ("train", "eval"):
            cam, logits = compute_cam(tokens, bank, mode, rng=rng)
            one_hot = np.all((cam.data == 0) | (cam.data == 1)) and np.all(cam.data.sum(1) == 1)
            if mode == "eval":
                oracle = [next(j for j in range(s) if row[j] == row.max()) for row in logits.data]
                one_hot = one_hot and list(cam.data.argmax(1)) == oracle
            bad += not one_hot
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 10
    record(1, "CAM one-hot and argmax oracle", ok, f"{bad} bad of 2000 maps, {elapsed:.2f}s")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_02_group_average():
    rng = np.random.default_rng(102)
    worst = 0.0
    empty_cases = 0
    for i in range(1000):
        c, s, d = (int(v) for v in (rng.integers(1, 33), rng.integers(1, 9), rng.integers(1, 33)))
        hi = s - 1 if (i % 2 and s > 1) else s        # every other instance leaves a group empty
        assign = rng.integers(0, hi, size=c)
        empty_cases += len(set(assign)) < s
        cam = (assign[:, None] == np.arange(s)).astype(float)
        v = rng.normal(size=(c, d))
        got = group_average(Tensor(cam), Tensor(v)).data
        for j in range(s):
            members = [v[k] for k in range(c) if assign[k] == j]
            ref = sum(members) / len(members) if members else np.zeros(d)
            worst = max(worst, float(np.abs(got[j] - ref).max()))
    ok = worst <= 1e-12 and empty_cases > 0
    record(2, "grouped average vs loop", ok, f"max dev {worst:.1e}, {empty_cases} with empty groups")
    assert ok


# ---------------------------------------------------------------- 3

def test_criterion_03_gradient_fidelity():
    t0 = time.perf_counter()
    errors = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        c, s, d = 6, 2, 8
        bank = SuperTokenBank(s, d, rng)
        enc = Encoder(EncoderConfig(L=2, d=d, nh=2), seed)
        cau = CauParams(d, rng)
        tokens = Tensor(rng.normal(size=(c, d)))
        pos = Tensor(rng.normal(size=(c, d)))
        target = Tensor(rng.normal(size=(c, d)))
        leaves = [tokens, bank.params["S"], bank.params["k.w"], bank.params["v.w"]]

        def f(*_):
            # straight-through nodes replaced by their soft surrogate
            out = dso_forward(tokens, pos, bank, "eval", assign="softmax")
            return ad.smooth_l1(cau_forward(tokens, out.cam, enc(out.supertokens), cau, nh=2,
                                            strict=False), target)

        errors.append(ad.check_gradients(f, leaves, tol=1e-4).max_rel_error)
    elapsed = time.perf_counter() - t0
    ok = max(errors) < 1e-4 and elapsed < 60
    record(3, "finite-difference gradients", ok,
           f"max rel err {max(errors):.1e} over 20 seeds, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 4

def _random_cost_config(rng) -> CostConfig:
    D = int(rng.integers(8, 513))
    nh = int(rng.choice([h for h in range(1, 17) if D % h == 0]))
    N = int(rng.integers(1, 129))
    return CostConfig(S=int(rng.integers(1, N + 1)), N=N, D=D, nh=nh,
                      d_gate=int(rng.integers(1, 257)), L=int(rng.integers(1, 17)),
                      R=int(rng.integers(0, N + 1)))


def test_criterion_04_flops():
    rng = np.random.default_rng(104)
    mismatches = []
    for i in range(50):
        cfg = _random_cost_config(rng)
        S, N, D, nh, g, L, R = cfg.S, cfg.N, cfg.D, cfg.nh, cfg.d_gate, cfg.L, cfg.R
        m = cost.count_ops(cfg, "mlp", i)
        a = cost.count_ops(cfg, "self_attention", i)
        t = cost.count_ops(cfg, "transformer", i)
        f = cost.count_ops(cfg, "foundry", i)
        fg = cost.count_ops(cfg, "foundry_gate", i)
        s_eff, n_eff = (S, R) if R else (0, 0)
        checks = {
            "mlp": m.mlp == cost.mlp_flops(N, D),
            "sa": a.self_attention == cost.sa_flops(N, D),
            "transformer": t.total == cost.transformer_flops(L, N, D),
            "dso": f.dso == cost.dso_flops(S, N, D) and fg.dso == cost.dso_flops(s_eff, n_eff, D),
            "cau": f.cau == cost.cau_flops(S, N, D, nh) and fg.cau == cost.cau_flops(s_eff, n_eff, D, nh),
            "gate": fg.gate == cost.gate_flops(N, D, g),
            "foundry": f.total == cost.foundry_flops(S, N, D, nh, L),
            "foundry_gate": fg.total == cost.foundry_gate_flops(s_eff, N, D, nh, g, L, R),
        }
        mismatches += [f"{k}@{cfg}" for k, v in checks.items() if not v]
    cheaper = 0
    violations = 0
    for _ in range(2000):
        N = int(rng.integers(4, 1025))
        S = int(rng.integers(1, N // 4 + 1))
        nh = int(rng.choice([1, 2, 3, 4, 6, 8]))
        D = nh * int(rng.integers(-(-8 // nh), 1025 // nh))
        L = int(rng.integers(2, 25))
        cheaper += 1
        violations += cost.foundry_flops(S, N, D, nh, L) >= cost.transformer_flops(L, N, D)
    worst_case = all(
        cost.foundry_gate_flops(0, N, D, 1, g, L, 0)
        == cost.transformer_flops(L, N, D) + cost.gate_flops(N, D, g)
        for N, D, g, L in rng.integers(1, 200, size=(200, 4)).tolist())
    ok = not mismatches and violations == 0 and worst_case
    record(4, "FLOPs exactness and orderings", ok,
           f"{len(mismatches)} mismatches on 50 configs x 8 forms; "
           f"{violations}/{cheaper} compression violations; R=0 worst case {'ok' if worst_case else 'broken'}")
    assert ok, mismatches[:5]


# ---------------------------------------------------------------- 5

def reference_threshold(pi, budget, s):
    """Literal transcription of the published selector for a single sample."""
    T = len(pi)
    if T <= budget:
        return 1.0
    sorted_vals = np.sort(pi)[::-1]
    num_to_select = T - budget + s
    if num_to_select == T:
        return -np.finfo(np.float64).eps
    return sorted_vals[num_to_select + 1]    # raises IndexError when num_to_select == T - 1


def test_criterion_05_budget_contract():
    rng = np.random.default_rng(105)
    over = branch_mismatch = 0
    branches = {"fits": 0, "fuse_all": 0, "generic": 0, "past_end": 0}
    with warnings.catch_warnings():
        warnings.simplefilter("error", BudgetWarning)
        for _ in range(10_000):
            c = int(rng.integers(1, 129))
            s = int(rng.integers(1, min(c, 32) + 1))
            B = int(rng.integers(s, c + 1))
            pi = (rng.permutation(c) + rng.uniform(0.1, 0.9)) / (c + 1)
            dec = budget_select(pi, B, s)
            over += dec.encoder_tokens(s) > B
            try:
                ref_thr = reference_threshold(pi, B, s)
            except IndexError:
                branches["past_end"] += 1
                branch_mismatch += not dec.mask.all()
                continue
            ref_mask = pi > ref_thr
            key = "fits" if c <= B else "fuse_all" if c - B + s == c else "generic"
            branches[key] += 1
            branch_mismatch += not np.array_equal(dec.mask, ref_mask)
    ok = over == 0 and branch_mismatch == 0 and all(branches[k] for k in ("fits", "fuse_all", "generic"))
    record(5, "token budget", ok,
           f"{over} over budget, {branch_mismatch} branch mismatches, branches {branches}")
    assert ok


# ---------------------------------------------------------------- shared training runs

@cache
def seed_run(seed: int) -> dict:
    """Teacher, distilled student and the comparison students for one seed."""
    cfg = DistillConfig(seed=seed)
    train = generate_dataset(cfg.n_train, cfg.points, seed)
    holdout = generate_dataset(cfg.n_holdout, cfg.points, seed, stream_name="holdout")
    t0 = time.perf_counter()
    teacher = train_teacher(train, cfg)
    result = distill(teacher, train, holdout, cfg)
    return {"cfg": cfg, "train": train, "holdout": holdout, "teacher": teacher,
            "result": result, "seconds": time.perf_counter() - t0}


def test_criterion_06_distillation_converges():
    ratios, times = [], []
    for seed in SEEDS:
        run = seed_run(seed)
        ratios.append(run["result"].final_holdout / run["result"].initial_holdout)
        times.append(run["seconds"])
    ok = all(r < 0.5 for r in ratios) and max(times) < 600
    record(6, "toy distillation", ok,
           "held-out loss ratios " + ", ".join(f"{r:.3f}" for r in ratios)
           + f"; slowest seed {max(times):.0f}s")
    assert ok


def test_criterion_07_grouping_strategy_order():
    acc = {"foundry": [], "fps": [], "kmeans": []}
    for seed in SEEDS:
        run = seed_run(seed)
        teacher, train, holdout, cfg = run["teacher"], run["train"], run["holdout"], run["cfg"]
        acc["foundry"].append(probe_finetune(teacher, run["result"].student, train, holdout))
        fps = distill_fps_student(teacher, train, cfg)
        acc["fps"].append(probe_accuracy(fps.features(train), train.labels,
                                         fps.features(holdout), holdout.labels))
        km = KMeansStudent(teacher, train, cfg.s, seed)
        acc["kmeans"].append(probe_accuracy(km.features(train), train.labels,
                                            km.features(holdout), holdout.labels))
    f, p, k = (float(np.mean(acc[n])) for n in ("foundry", "fps", "kmeans"))
    ok = f >= p >= k and f - k >= 0.05
    record(7, "Foundry >= FPS >= KMeans", ok, f"{f:.3f} / {p:.3f} / {k:.3f}")
    assert ok


def test_criterion_08_generalist_beats_specialist():
    gen, spec = [], []
    for seed in SEEDS:
        run = seed_run(seed)
        teacher, train, cfg = run["teacher"], run["train"], run["cfg"]
        count_train = generate_count_dataset(300, cfg.points, seed)
        count_test = generate_count_dataset(150, cfg.points, seed, stream_name="holdout")
        gen.append(probe_finetune(teacher, run["result"].student, count_train, count_test))
        specialist = train_specialist(teacher, train, cfg)
        spec.append(probe_accuracy(specialist.features(count_train), count_train.labels,
                                   specialist.features(count_test), count_test.labels))
    g, s = float(np.mean(gen)), float(np.mean(spec))
    ok = g > s
    record(8, "generalist vs specialist transfer", ok,
           f"count-task probe {g:.3f} vs {s:.3f} (per seed {np.round(gen, 3)} vs {np.round(spec, 3)})")
    assert ok


LAMBDAS = (0.0, 1e-12, 1e-10, 1e-8)


def test_criterion_09_gate_regularizer_direction():
    means = []
    for lam in LAMBDAS:
        ratios = []
        for seed in SEEDS:
            run = seed_run(seed)
            cfg = DistillConfig(seed=seed, gate=True, lambda_gate=lam, epochs=10, unfreeze_epoch=10)
            student = distill(run["teacher"], run["train"], None, cfg).student
            ratios.append(fused_ratio(run["teacher"], student, run["holdout"]))
        means.append(float(np.mean(ratios)))
    ok = all(a <= b for a, b in zip(means, means[1:]))
    record(9, "fused ratio vs gate weight", ok,
           ", ".join(f"{lam:g}: {m:.4f}" for lam, m in zip(LAMBDAS, means)))
    assert ok


# ---------------------------------------------------------------- 10

TINY = ("n_train = 30\nn_holdout = 15\npoints = 32\nc = 8\nk = 4\nd = 16\nnh = 2\n"
        "teacher_layers = 2\nteacher_epochs = 2\ns = 2\nstudent_layers = 1\nepochs = 2\n"
        "batch_size = 16\nwarmup_epochs = 1\nunfreeze_epoch = 1\ngate_hidden = 8\n")


def _identical(a, b) -> bool:
    names = sorted(p.name for p in a.iterdir())
    return names == sorted(p.name for p in b.iterdir()) and all(
        (a / n).read_bytes() == (b / n).read_bytes() for n in names)


def test_criterion_10_reproducible_from_manifest(tmp_path):
    cfg = tmp_path / "tiny.txt"
    cfg.write_text(TINY)
    runs = {
        "gen-data": ["gen-data", "--n", "20", "--points", "32"],
        "distill": ["distill", "--config", str(cfg), "--gate"],
        "baseline": ["baseline", "--config", str(cfg), "--kind", "fps"],
        "verify": ["verify", "--checks", "budget,tensor_io"],
    }
    results = {}
    for name, argv in runs.items():
        first, second = tmp_path / f"{name}-1", tmp_path / f"{name}-2"
        rc1 = main([*argv, "--out", str(first)])
        rc2 = main([argv[0], "--config", str(first / "manifest.txt"), "--out", str(second)])
        results[name] = rc1 == rc2 == 0 and _identical(first, second)
    teacher = tmp_path / "distill-1" / "teacher.ften"
    student = tmp_path / "distill-1" / "student.ften"
    for name in ("probe", "infer"):
        first, second = tmp_path / f"{name}-1", tmp_path / f"{name}-2"
        rc1 = main([name, "--teacher-ckpt", str(teacher), "--student-ckpt", str(student),
                    "--seed", "0", "--out", str(first)])
        rc2 = main([name, "--config", str(first / "manifest.txt"), "--out", str(second)])
        results[name] = rc1 == rc2 == 0 and _identical(first, second)
    c1, c2 = tmp_path / "cost1.csv", tmp_path / "cost2.csv"
    main(["cost", "--sweep", "s=1..16", "--out", str(c1)])
    main(["cost", "--config", str(c1) + ".manifest", "--out", str(c2)])
    results["cost"] = c1.read_bytes() == c2.read_bytes()
    ok = all(results.values())
    record(10, "CLI reruns from manifest", ok,
           ", ".join(f"{k} {'identical' if v else 'DIFFERS'}" for k, v in results.items()))
    assert ok
