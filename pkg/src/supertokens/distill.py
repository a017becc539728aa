"""Teacher pre-training, student distillation and frozen linear probing."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tape, Tensor
from .data import SyntheticDataset, augment
from .gate import gate_loss
from .models import Student, StudentConfig, Teacher, pool_mean_max
from .optim import AdamW, lr_schedule
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class DistillConfig:
    # data / tokenization
    n_train: int = 512
    n_holdout: int = 160
    points: int = 64
    c: int = 16
    k: int = 8
    d: int = 32
    nh: int = 4
    # teacher
    teacher_layers: int = 4
    teacher_epochs: int = 30
    teacher_lr: float = 3e-3
    # student
    s: int = 4
    student_layers: int = 2
    tau: float = 1.0
    gumbel_scale: float = 0.0
    beta: float = 1.0
    gate: bool = False
    lambda_gate: float = 1e-11
    threshold: float = 0.5
    gate_hidden: int = 128
    # optimization
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    start_lr: float = 1e-6
    final_lr: float = 1e-6
    warmup_epochs: int = 3
    weight_decay: float = 0.05
    unfreeze_epoch: int = 20
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.start_lr > self.lr:
            raise ValueError("start_lr must not exceed the peak lr")
        if self.unfreeze_epoch > self.epochs:
            raise ValueError("unfreeze_epoch must be <= epochs")

    @classmethod
    def from_dict(cls, values: dict) -> "DistillConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    def student_config(self) -> StudentConfig:
        return StudentConfig(s=self.s, L=self.student_layers, tau=self.tau,
                             noise=self.gumbel_scale, gate=self.gate,
                             gate_hidden=self.gate_hidden, threshold=self.threshold)


def _tokens(teacher: Teacher, points: np.ndarray):
    tok = teacher.tokenize(points)
    return tok.tokens, tok.pos_embed


def _batches_of(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, i + size)


def train_teacher(train: SyntheticDataset, config: DistillConfig) -> Teacher:
    """Supervised pre-training of the toy teacher on the shape labels; returns it frozen."""
    teacher = Teacher(config.d, config.teacher_layers, config.nh, config.c, config.k,
                      train.num_classes, config.seed)
    params = teacher.parameters()
    opt = AdamW(params, lr=config.teacher_lr, weight_decay=config.weight_decay)
    steps_per_epoch = -(-len(train) // config.batch_size)
    total = config.teacher_epochs * steps_per_epoch
    shuffle, aug = stream(config.seed, "teacher", 0), stream(config.seed, "teacher", 1)
    step = 0
    for epoch in range(config.teacher_epochs):
        for pts, labels in train.batches(config.batch_size, shuffle):
            if config.augment:
                pts = augment(pts, aug)
            opt.lr = lr_schedule(step, total, steps_per_epoch, config.teacher_lr,
                                 config.start_lr, config.final_lr)
            with Tape() as tape:
                tok = teacher.tokenize(pts)
                loss = cross_entropy(teacher.logits(teacher.features(tok)), labels)
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            step += 1
        log.debug("teacher epoch %d loss %.4f", epoch, loss.item())
    teacher.requires_grad_(False)
    return teacher


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = ad.log_softmax(logits, axis=-1)
    picked = logp[(np.arange(len(labels)), np.asarray(labels, dtype=np.int64))]
    return -ad.mean(picked)


def kl_divergence(teacher_logits: np.ndarray, student_logits: Tensor,
                  temperature: float = 1.0) -> Tensor:
    """Batch-mean ``KL(softmax(t / T) || softmax(s / T))``."""
    t = teacher_logits / temperature
    t = t - t.max(axis=-1, keepdims=True)
    log_pt = t - np.log(np.exp(t).sum(axis=-1, keepdims=True))
    log_ps = ad.log_softmax(student_logits * (1.0 / temperature), axis=-1)
    pt = np.exp(log_pt)
    return ad.mean(ad.sum((log_pt - log_ps) * pt, axis=-1))


def make_student(teacher: Teacher, config: DistillConfig) -> Student:
    return Student(config.student_config(), config.d, config.nh, config.seed, teacher.encoder)


@dataclass
class StepResult:
    loss: float
    recon: float
    gate_term: float = 0.0
    mean_pi: float = float("nan")
    fused_ratio: float = float("nan")


def distill_step(points: np.ndarray, teacher: Teacher, student: Student, optimizer: AdamW,
                 config: DistillConfig, rng: np.random.Generator) -> StepResult:
    """One optimizer step on the reconstruction (+ gate) objective."""
    tokens, pos = _tokens(teacher, points)
    target = teacher.encoder(tokens + pos).data
    with Tape() as tape:
        out = student(tokens, pos, mode="train", rng=rng)
        recon = ad.smooth_l1(out.recon, Tensor(target), config.beta)
        loss = recon
        gate_term = 0.0
        if out.probs is not None:
            g = gate_loss(out.probs, config.lambda_gate)
            gate_term = g.item()
            loss = recon + g
    if not np.isfinite(loss.item()):
        raise NumericError(f"non-finite distillation loss {loss.item()}")
    optimizer.zero_grad()
    tape.backward(loss)
    optimizer.step()
    res = StepResult(loss.item(), recon.item(), gate_term)
    if out.probs is not None:
        res.mean_pi = float(out.probs.data.mean())
        res.fused_ratio = out.fused_ratio
    return res


def reconstruction_loss(teacher: Teacher, student: Student, ds: SyntheticDataset,
                        beta: float = 1.0, batch_size: int = 64) -> float:
    """Eval-mode reconstruction loss averaged over ``ds`` (element-weighted)."""
    total, count = 0.0, 0
    for sl in _batches_of(len(ds), batch_size):
        tokens, pos = _tokens(teacher, ds.points[sl])
        target = teacher.encoder(tokens + pos)
        recon = student(tokens, pos, mode="eval").recon
        n = recon.size
        total += ad.smooth_l1(recon, target, beta).item() * n
        count += n
    return total / count


def fused_ratio(teacher: Teacher, student: Student, ds: SyntheticDataset,
                threshold: float | None = None, batch_size: int = 64) -> float:
    ratios = []
    for sl in _batches_of(len(ds), batch_size):
        tokens, pos = _tokens(teacher, ds.points[sl])
        out = student(tokens, pos, mode="eval", threshold=threshold)
        ratios.extend(d.mask.mean() for d in out.decisions)
    return float(np.mean(ratios))


@dataclass
class DistillResult:
    student: Student
    history: list[dict] = field(default_factory=list)

    @property
    def initial_holdout(self) -> float:
        return self.history[0]["holdout_loss"]

    @property
    def final_holdout(self) -> float:
        return self.history[-1]["holdout_loss"]


def distill(teacher: Teacher, train: SyntheticDataset, holdout: SyntheticDataset | None,
            config: DistillConfig, student: Student | None = None) -> DistillResult:
    """Run the full schedule. ``history[0]`` is the untrained (epoch 0) state."""
    student = make_student(teacher, config) if student is None else student
    teacher.requires_grad_(False)
    student.encoder.requires_grad_(config.unfreeze_epoch == 0)
    gate_ids = {id(p) for p in student.gate.parameters()} if student.gate is not None else set()
    opt = AdamW(student.parameters(), lr=config.lr, weight_decay=config.weight_decay,
                no_decay=gate_ids)
    steps_per_epoch = -(-len(train) // config.batch_size)
    total = config.epochs * steps_per_epoch
    warmup = config.warmup_epochs * steps_per_epoch
    shuffle, aug = stream(config.seed, "sampling"), stream(config.seed, "augment")
    gumbel = stream(config.seed, "gumbel")

    def row(epoch, steps):
        r = {"epoch": epoch}
        r["loss"] = float(np.mean([s.loss for s in steps])) if steps else float("nan")
        r["gate_term"] = float(np.mean([s.gate_term for s in steps])) if steps else 0.0
        r["mean_pi"] = float(np.mean([s.mean_pi for s in steps])) if steps else float("nan")
        r["fused_ratio"] = float(np.mean([s.fused_ratio for s in steps])) if steps else float("nan")
        if holdout is not None:
            r["holdout_loss"] = reconstruction_loss(teacher, student, holdout, config.beta)
        return r

    history = [row(0, [])]
    step = 0
    for epoch in range(1, config.epochs + 1):
        if epoch - 1 == config.unfreeze_epoch and config.unfreeze_epoch > 0:
            student.encoder.requires_grad_(True)
        results = []
        for pts, _ in train.batches(config.batch_size, shuffle):
            if config.augment:
                pts = augment(pts, aug)
            opt.lr = lr_schedule(step, total, warmup, config.lr, config.start_lr, config.final_lr)
            results.append(distill_step(pts, teacher, student, opt, config, gumbel))
            step += 1
        history.append(row(epoch, results))
        log.info("epoch %d loss %.5f", epoch, history[-1]["loss"])
    return DistillResult(student, history)


# ---------------------------------------------------------------- probing

def teacher_features(teacher: Teacher, ds: SyntheticDataset, batch_size: int = 64) -> np.ndarray:
    out = []
    for sl in _batches_of(len(ds), batch_size):
        tokens, pos = _tokens(teacher, ds.points[sl])
        out.append(pool_mean_max(teacher.encoder(tokens + pos)).data)
    return np.concatenate(out)


def student_features(teacher: Teacher, student: Student, ds: SyntheticDataset,
                     batch_size: int = 64) -> np.ndarray:
    out = []
    for sl in _batches_of(len(ds), batch_size):
        tokens, pos = _tokens(teacher, ds.points[sl])
        out.append(pool_mean_max(student(tokens, pos, mode="eval").recon).data)
    return np.concatenate(out)


@dataclass
class LinearProbe:
    w: np.ndarray
    b: np.ndarray
    mu: np.ndarray
    sd: np.ndarray

    def logits(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.mu) / self.sd) @ self.w + self.b

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(x), axis=1)

    def accuracy(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(self.predict(x) == np.asarray(y)))


def train_probe(x: np.ndarray, y: np.ndarray, num_classes: int | None = None,
                steps: int = 300, lr: float = 1e-2, weight_decay: float = 1e-4,
                seed: int = 0) -> LinearProbe:
    """Full-batch softmax regression on standardized features."""
    y = np.asarray(y, dtype=np.int64)
    num_classes = int(y.max()) + 1 if num_classes is None else num_classes
    if len(np.unique(y)) < 2:
        raise ValueError("probing needs at least two classes")
    mu, sd = x.mean(axis=0), x.std(axis=0) + 1e-8
    xs = Tensor((x - mu) / sd)
    rng = stream(seed, "probe")
    w = Tensor(rng.normal(0, 0.01, (x.shape[1], num_classes)), requires_grad=True)
    b = Tensor(np.zeros(num_classes), requires_grad=True)
    opt = AdamW([w, b], lr=lr, weight_decay=weight_decay, no_decay={id(b)})
    for _ in range(steps):
        with Tape() as tape:
            loss = cross_entropy(ad.matmul(xs, w) + b, y)
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
    return LinearProbe(w.data.copy(), b.data.copy(), mu, sd)


def probe_accuracy(train_x, train_y, test_x, test_y, steps: int = 300, seed: int = 0) -> float:
    num_classes = int(max(np.max(train_y), np.max(test_y))) + 1
    return train_probe(train_x, train_y, num_classes, steps=steps, seed=seed).accuracy(test_x, test_y)


def probe_finetune(teacher: Teacher, student: Student, train: SyntheticDataset,
                   test: SyntheticDataset, steps: int = 300, seed: int = 0) -> float:
    """Frozen student, mean+max pooled reconstructions, linear head; top-1 on ``test``."""
    return probe_accuracy(student_features(teacher, student, train), train.labels,
                          student_features(teacher, student, test), test.labels, steps, seed)
