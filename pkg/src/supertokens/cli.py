"""Command line entry point.

Every command resolves its settings as defaults < ``--config`` file < flags,
writes them to ``manifest.txt`` next to its outputs, and can be re-run from
that manifest with ``--config``. Exit codes: 0 ok, 1 usage, 2 IO, 3 numeric
or verification failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import cost
from . import io as fio
from .autodiff import NumericError, Tensor
from .baselines import (KMeansStudent, distill_fps_student, groupsize_inference,
                        random_sample_inference, train_specialist)
from .data import generate_count_dataset, generate_dataset, load_dataset, save_dataset
from .distill import (DistillConfig, distill, probe_accuracy, student_features,
                      teacher_features, train_teacher)
from .models import Student, StudentConfig, Teacher, pool_mean_max
from .verify import CHECKS, run_all

log = logging.getLogger("supertokens")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- settings

DISTILL_KEYS = {f.name: f.default for f in fields(DistillConfig)}

DEFAULTS = {
    "gen-data": {"seed": 0, "n": 512, "points": 64, "kind": "shapes", "split": "train",
                 "max_count": 3},
    "distill": {**DISTILL_KEYS, "train_data": None, "holdout_data": None, "teacher_ckpt": None},
    "probe": {"seed": 0, "teacher_ckpt": None, "student_ckpt": None, "train_data": None,
              "test_data": None, "n_train": 512, "n_holdout": 160, "points": 64,
              "threshold": None, "token_budget": None, "steps": 300},
    "infer": {"seed": 0, "teacher_ckpt": None, "student_ckpt": None, "data": None, "n": 16,
              "points": 64, "threshold": None, "token_budget": None},
    "baseline": {**DISTILL_KEYS, "kind": "kmeans", "teacher_ckpt": None, "train_data": None,
                 "test_data": None, "c_rs": 8, "c_new": 8, "steps": 300},
    "cost": {"model": "foundry", "component": "total", "sweep": None, "S": 4, "N": 16, "D": 32,
             "nh": 4, "d_gate": 128, "L": 2, "R": None},
    "verify": {"checks": None},
}

# flag -> settings key, per the documented interface
FLAG_KEYS = {"supertokens": "s"}


def resolve(command: str, args: argparse.Namespace) -> dict:
    values = dict(DEFAULTS[command])
    if args.config is not None:
        loaded = fio.read_config(args.config)
        loaded.pop("command", None)
        unknown = set(loaded) - set(values)
        if unknown:
            raise UsageError(f"unknown keys in {args.config}: {sorted(unknown)}")
        values.update(loaded)
    for name, v in vars(args).items():
        key = FLAG_KEYS.get(name, name)
        if v is not None and key in values:
            values[key] = v
    return values


def write_manifest(out: Path, command: str, values: dict) -> None:
    fio.write_config(out / "manifest.txt", {"command": command, **values})


def _out_dir(args) -> Path:
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _distill_config(values: dict) -> DistillConfig:
    return DistillConfig.from_dict({k: values[k] for k in DISTILL_KEYS})


# ---------------------------------------------------------------- checkpoints

def save_teacher(path: Path, teacher: Teacher) -> None:
    meta = {"kind": "teacher", "d": teacher.d, "L": teacher.encoder.config.L,
            "nh": teacher.encoder.config.nh, "c": teacher.c, "k": teacher.k,
            "num_classes": int(teacher.params["head.b"].shape[0]),
            "token_norm": "norm.w" in teacher.tokenizer.params}
    fio.save_checkpoint(path, teacher.state_dict(), meta)


def load_teacher(path) -> Teacher:
    state, meta = fio.load_checkpoint(path)
    if meta.get("kind") != "teacher":
        raise fio.FormatError(f"{path} is not a teacher checkpoint")
    teacher = Teacher(meta["d"], meta["L"], meta["nh"], meta["c"], meta["k"],
                      meta["num_classes"], token_norm=meta["token_norm"])
    teacher.load_state_dict(state)
    return teacher.requires_grad_(False)


def save_student(path: Path, student: Student, d: int) -> None:
    meta = {"kind": "student", "d": d, "nh": student.nh, "config": asdict(student.config)}
    fio.save_checkpoint(path, student.state_dict(), meta)


def load_student(path) -> Student:
    state, meta = fio.load_checkpoint(path)
    if meta.get("kind") != "student":
        raise fio.FormatError(f"{path} is not a student checkpoint")
    student = Student(StudentConfig(**meta["config"]), meta["d"], meta["nh"])
    student.load_state_dict(state)
    return student.requires_grad_(False)


def _datasets(values: dict, train_key: str = "train_data", test_key: str = "test_data"):
    seed = values["seed"]
    train = (load_dataset(values[train_key]) if values.get(train_key)
             else generate_dataset(values["n_train"], values["points"], seed))
    test = (load_dataset(values[test_key]) if values.get(test_key)
            else generate_dataset(values["n_holdout"], values["points"], seed, stream_name="holdout"))
    return train, test


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    v = resolve("gen-data", args)
    out = _out_dir(args)
    stream_name = {"train": "data", "holdout": "holdout"}.get(v["split"])
    if stream_name is None:
        raise UsageError("split must be train or holdout")
    if v["kind"] == "shapes":
        ds = generate_dataset(v["n"], v["points"], v["seed"], stream_name)
    elif v["kind"] == "count":
        ds = generate_count_dataset(v["n"], v["points"], v["seed"], v["max_count"], stream_name)
    else:
        raise UsageError("kind must be shapes or count")
    save_dataset(ds, out / "dataset.ften")
    write_manifest(out, "gen-data", v)
    print(f"wrote {len(ds)} clouds ({ds.num_classes} classes) to {out / 'dataset.ften'}")
    return EXIT_OK


def cmd_distill(args) -> int:
    v = resolve("distill", args)
    cfg = _distill_config(v)
    out = _out_dir(args)
    train = (load_dataset(v["train_data"]) if v["train_data"]
             else generate_dataset(cfg.n_train, cfg.points, cfg.seed))
    holdout = (load_dataset(v["holdout_data"]) if v["holdout_data"]
               else generate_dataset(cfg.n_holdout, cfg.points, cfg.seed, stream_name="holdout"))
    if v["teacher_ckpt"]:
        teacher = load_teacher(v["teacher_ckpt"])
    else:
        teacher = train_teacher(train, cfg)
        save_teacher(out / "teacher.ften", teacher)
    result = distill(teacher, train, holdout, cfg)
    cols = ["epoch", "loss", "gate_term", "mean_pi", "fused_ratio", "holdout_loss"]
    _write_csv(out / "history.csv", cols, ([row[c] for c in cols] for row in result.history))
    save_student(out / "student.ften", result.student, cfg.d)
    write_manifest(out, "distill", v)
    print(f"holdout loss {result.initial_holdout:.6g} -> {result.final_holdout:.6g}")
    return EXIT_OK


def _gated_features(teacher, student, ds, threshold, budget):
    feats = []
    for i in range(0, len(ds), 64):
        tok = teacher.tokenize(ds.points[i:i + 64])
        out = student(tok.tokens, tok.pos_embed, mode="eval", threshold=threshold,
                      token_budget=budget)
        feats.append(pool_mean_max(out.recon).data)
    return np.concatenate(feats)


def cmd_probe(args) -> int:
    v = resolve("probe", args)
    if not v["teacher_ckpt"]:
        raise UsageError("probe needs --teacher-ckpt")
    out = _out_dir(args)
    teacher = load_teacher(v["teacher_ckpt"])
    train, test = _datasets(v)
    if v["student_ckpt"]:
        student, name = load_student(v["student_ckpt"]), "student"
        if student.gate is not None:
            ftr = _gated_features(teacher, student, train, v["threshold"], v["token_budget"])
            fte = _gated_features(teacher, student, test, v["threshold"], v["token_budget"])
        else:
            ftr, fte = student_features(teacher, student, train), student_features(teacher, student, test)
    else:
        name = "teacher"
        ftr, fte = teacher_features(teacher, train), teacher_features(teacher, test)
    acc = probe_accuracy(ftr, train.labels, fte, test.labels, steps=v["steps"], seed=v["seed"])
    _write_csv(out / "probe.csv", ["model", "train_size", "test_size", "accuracy"],
               [[name, len(train), len(test), acc]])
    write_manifest(out, "probe", v)
    print(f"{name} probe accuracy {acc:.4f}")
    return EXIT_OK


def cmd_infer(args) -> int:
    v = resolve("infer", args)
    if not (v["teacher_ckpt"] and v["student_ckpt"]):
        raise UsageError("infer needs --teacher-ckpt and --student-ckpt")
    out = _out_dir(args)
    teacher, student = load_teacher(v["teacher_ckpt"]), load_student(v["student_ckpt"])
    ds = (load_dataset(v["data"]) if v["data"]
          else generate_dataset(v["n"], v["points"], v["seed"], stream_name="holdout"))
    tok = teacher.tokenize(ds.points)
    res = student(tok.tokens, tok.pos_embed, mode="eval", threshold=v["threshold"],
                  token_budget=v["token_budget"])
    target = teacher.encoder(tok.tokens + tok.pos_embed).data
    err = np.abs(res.recon.data - target).mean(axis=(1, 2))
    cams = res.cam if isinstance(res.cam, list) else list(res.cam.data)
    with open(out / "cams.ften", "wb") as fh:
        for cam in cams:
            fio.write_tensor(fh, cam.data if isinstance(cam, Tensor) else cam)
    s = student.config.s
    summary, decisions = [], []
    for i in range(len(ds)):
        if res.decisions:
            d = res.decisions[i]
            summary.append([i, int(d.mask.sum()), d.encoder_tokens(s), d.overshoot, err[i]])
            decisions.extend([i, j, pi, int(m)] for j, (pi, m) in enumerate(zip(d.probs, d.mask)))
        else:
            summary.append([i, tok.tokens.shape[1], s, 0, err[i]])
    _write_csv(out / "summary.csv", ["sample", "fused", "encoder_tokens", "overshoot",
                                     "mean_abs_error"], summary)
    if decisions:
        _write_csv(out / "decisions.csv", ["sample", "index", "pi", "fused"], decisions)
    write_manifest(out, "infer", v)
    print(f"{len(ds)} samples, mean abs error {err.mean():.6g}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    v = resolve("baseline", args)
    cfg = _distill_config(v)
    out = _out_dir(args)
    train, test = _datasets(v)
    teacher = load_teacher(v["teacher_ckpt"]) if v["teacher_ckpt"] else train_teacher(train, cfg)
    kind = v["kind"]
    if kind == "kmeans":
        model = KMeansStudent(teacher, train, cfg.s, cfg.seed)
        ftr, fte, tokens = model.features(train), model.features(test), cfg.s
        fio.save_checkpoint(out / "kmeans.ften", {"centroids": model.codebook.centroids},
                            {"kind": "kmeans", "iterations": model.codebook.iterations})
    elif kind == "fps":
        model = distill_fps_student(teacher, train, cfg)
        ftr, fte, tokens = model.features(train), model.features(test), cfg.s
        fio.save_checkpoint(out / "fps.ften", model.state_dict(), {"kind": "fps", "c2": cfg.s})
    elif kind == "specialist":
        model = train_specialist(teacher, train, cfg)
        ftr, fte, tokens = model.features(train), model.features(test), cfg.s
        fio.save_checkpoint(out / "specialist.ften", model.state_dict(), {"kind": "specialist"})
    elif kind in ("random", "groupsize"):
        tokens = v["c_rs"] if kind == "random" else v["c_new"]
        ftr, fte = (_reduced_features(teacher, ds, kind, tokens, cfg.seed) for ds in (train, test))
    else:
        raise UsageError(f"unknown baseline kind {kind!r}")
    acc = probe_accuracy(ftr, train.labels, fte, test.labels, steps=v["steps"], seed=cfg.seed)
    _write_csv(out / "baseline.csv", ["kind", "tokens", "accuracy"], [[kind, tokens, acc]])
    write_manifest(out, "baseline", v)
    print(f"{kind} probe accuracy {acc:.4f}")
    return EXIT_OK


def _reduced_features(teacher, ds, kind, tokens, seed):
    feats = []
    for i in range(0, len(ds), 64):
        pts = ds.points[i:i + 64]
        if kind == "random":
            tok = teacher.tokenize(pts)
            x, _ = random_sample_inference(tok.tokens + tok.pos_embed, tokens, seed)
        else:
            tok = groupsize_inference(pts, teacher.tokenizer, tokens)
            x = tok.tokens + tok.pos_embed
        feats.append(pool_mean_max(teacher.encoder(x)).data)
    return np.concatenate(feats)


SWEEP_ALIASES = {"s": "S", "n": "N", "d": "D", "l": "L", "r": "R"}


def parse_sweep(spec: str) -> dict[str, list[int]]:
    """``"S=1..16;N=16,32"`` -> ``{"S": [1..16], "N": [16, 32]}``; ``a..b:step`` allowed."""
    out = {}
    for part in filter(None, (p.strip() for p in str(spec).split(";"))):
        if "=" not in part:
            raise UsageError(f"bad sweep {part!r}; expected name=range")
        name, rng = (x.strip() for x in part.split("=", 1))
        name = SWEEP_ALIASES.get(name, name)
        if name not in {f.name for f in fields(cost.CostConfig)}:
            raise UsageError(f"cannot sweep {name!r}")
        try:
            if ".." in rng:
                lo, rest = rng.split("..", 1)
                hi, _, step = rest.partition(":")
                out[name] = list(range(int(lo), int(hi) + 1, int(step or 1)))
            else:
                out[name] = [int(x) for x in rng.split(",")]
        except ValueError:
            raise UsageError(f"bad range {rng!r}") from None
    return out


COST_COLUMNS = ["S", "N", "D", "nh", "hd", "d_gate", "L", "R", "model", "component", "flops"]


def cmd_cost(args) -> int:
    v = resolve("cost", args)
    if isinstance(v["sweep"], list):
        v["sweep"] = ";".join(v["sweep"])
    base = cost.CostConfig(**{k: v[k] for k in ("S", "N", "D", "nh", "d_gate", "L", "R")})
    grid = parse_sweep(v["sweep"]) if v["sweep"] else {}
    component = v["component"]
    parts = [f.name for f in fields(cost.CostBreakdown)]
    if component != "all" and component not in parts:
        raise UsageError(f"component must be one of {parts + ['all']}")
    rows = []
    for cfg, br in cost.sweep(grid, base, v["model"]):
        head = [cfg.S, cfg.N, cfg.D, cfg.nh, cfg.hd, cfg.d_gate, cfg.L, cfg.fused, v["model"]]
        for name in parts if component == "all" else [component]:
            rows.append(head + [name, getattr(br, name)])
    target = Path(args.out or "cost.csv")
    if target.suffix != ".csv":
        target.mkdir(parents=True, exist_ok=True)
        target = target / "cost.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    _write_csv(target, COST_COLUMNS, rows)
    fio.write_config(target.with_name(target.name + ".manifest"), {"command": "cost", **v})
    print(f"wrote {len(rows)} rows to {target}")
    return EXIT_OK


def cmd_verify(args) -> int:
    v = resolve("verify", args)
    names = v["checks"].split(",") if v["checks"] else None
    unknown = sorted(set(names or ()) - set(CHECKS))
    if unknown:
        raise UsageError(f"unknown check(s) {unknown}; choose from {sorted(CHECKS)}")
    results = run_all(names)
    for r in results:
        print(r.line())
    if args.out:
        out = _out_dir(args)
        _write_csv(out / "verify.csv", ["check", "ok", "detail"],
                   ([r.name, int(r.ok), r.detail] for r in results))
        write_manifest(out, "verify", v)
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value settings file (e.g. a previous manifest.txt)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def _distill_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--supertokens", type=int, help="number of SuperTokens s")
    p.add_argument("--lambda-gate", dest="lambda_gate", type=float)
    p.add_argument("--unfreeze-epoch", dest="unfreeze_epoch", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--gate", action="store_const", const=True)
    p.add_argument("--teacher-ckpt", dest="teacher_ckpt")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="supertokens", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--n", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--kind", choices=["shapes", "count"])
    p.add_argument("--split", choices=["train", "holdout"])
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("distill", help="train a teacher (unless given) and distill a student")
    _common(p)
    _distill_flags(p)
    p.add_argument("--train-data", dest="train_data")
    p.add_argument("--holdout-data", dest="holdout_data")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("probe", help="linear probe on frozen features")
    _common(p)
    p.add_argument("--teacher-ckpt", dest="teacher_ckpt")
    p.add_argument("--student-ckpt", dest="student_ckpt")
    p.add_argument("--train-data", dest="train_data")
    p.add_argument("--test-data", dest="test_data")
    p.add_argument("--threshold", type=float)
    p.add_argument("--token-budget", dest="token_budget", type=int)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("infer", help="gated inference; exports decisions and CAMs")
    _common(p)
    p.add_argument("--teacher-ckpt", dest="teacher_ckpt")
    p.add_argument("--student-ckpt", dest="student_ckpt")
    p.add_argument("--data")
    p.add_argument("--threshold", type=float)
    p.add_argument("--token-budget", dest="token_budget", type=int)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("baseline", help="comparison students and token-reduction baselines")
    _common(p)
    _distill_flags(p)
    p.add_argument("--kind", choices=["kmeans", "random", "groupsize", "fps", "specialist"])
    p.add_argument("--train-data", dest="train_data")
    p.add_argument("--test-data", dest="test_data")
    p.add_argument("--c-rs", dest="c_rs", type=int)
    p.add_argument("--c-new", dest="c_new", type=int)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("cost", help="closed-form FLOPs table")
    p.add_argument("--config")
    p.add_argument("--out", help="CSV file or directory (default cost.csv)")
    p.add_argument("--sweep", action="append", help="name=a..b[:step] or name=v1,v2 (repeatable)")
    p.add_argument("--model", choices=["transformer", "foundry", "foundry_gate"])
    p.add_argument("--component", help="breakdown field or 'all' (default total)")
    for name in ("S", "N", "D", "nh", "d_gate", "L", "R"):
        p.add_argument(f"--{name}", dest=name, type=int)
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("verify", help="run the built-in invariant checks")
    p.add_argument("--config")
    p.add_argument("--out")
    p.add_argument("--checks", help="comma-separated subset")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        if isinstance(exc, fio.FormatError):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
