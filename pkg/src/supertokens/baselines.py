"""Comparison students and inference-time token reduction schemes."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tape, Tensor
from .data import SyntheticDataset, augment
from .distill import DistillConfig, _batches_of, _tokens, kl_divergence, make_student
from .models import Teacher, pool_mean_max
from .nn import Module, init_linear, linear
from .optim import AdamW, lr_schedule
from .rng import stream
from .tokenizer import (TokenizedInput, embed_positions, embed_tokens, farthest_point_sample,
                        gather_groups, knn_group, normalize)


# ---------------------------------------------------------------- k-means

@dataclass
class KMeansCodebook:
    centroids: np.ndarray
    iterations: int = 0
    objective: list[float] = field(default_factory=list)

    def assign(self, x: np.ndarray) -> np.ndarray:
        return _nearest(np.asarray(x, dtype=np.float64), self.centroids)[0]


def _nearest(x: np.ndarray, centroids: np.ndarray):
    d2 = ((x[:, None, :] - centroids[None]) ** 2).sum(-1)
    idx = np.argmin(d2, axis=1)
    return idx, d2[np.arange(len(x)), idx]


def kmeans_fit(tokens: np.ndarray, s: int, max_iters: int = 100, seed: int = 0) -> KMeansCodebook:
    """Lloyd's algorithm from ``s`` distinct random tokens.

    Stops when assignments no longer change. An empty cluster takes over the
    point currently farthest from its centroid.
    """
    x = np.asarray(tokens, dtype=np.float64)
    n = len(x)
    if n < s:
        raise ValueError(f"cannot fit {s} centroids to {n} points")
    rng = stream(seed, "sampling", 10)
    centroids = x[rng.choice(n, size=s, replace=False)].copy()
    assign, dist = _nearest(x, centroids)
    objective = [float(dist.sum())]
    it = 0
    for it in range(1, max_iters + 1):
        for j in range(s):
            members = assign == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
            else:
                far = int(np.argmax(dist))
                centroids[j] = x[far]
                assign[far], dist[far] = j, 0.0
        new_assign, dist = _nearest(x, centroids)
        objective.append(float(dist.sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    return KMeansCodebook(centroids, it, objective)


class KMeansStudent:
    """Static prototypes encoded once by the frozen backbone; tokens look up theirs."""

    def __init__(self, teacher: Teacher, train: SyntheticDataset, s: int, seed: int = 0,
                 max_iters: int = 100):
        toks = [_tokens(teacher, train.points[sl])[0].data.reshape(-1, teacher.d)
                for sl in _batches_of(len(train), 64)]
        self.teacher = teacher
        self.codebook = kmeans_fit(np.concatenate(toks), s, max_iters, seed)
        self.encoded = teacher.encoder(Tensor(self.codebook.centroids[None])).data[0]

    def reconstruct(self, points: np.ndarray) -> np.ndarray:
        tokens = _tokens(self.teacher, points)[0].data
        idx = self.codebook.assign(tokens.reshape(-1, tokens.shape[-1]))
        return self.encoded[idx].reshape(tokens.shape)

    def features(self, ds: SyntheticDataset) -> np.ndarray:
        return np.concatenate([pool_mean_max(Tensor(self.reconstruct(ds.points[sl]))).data
                               for sl in _batches_of(len(ds), 64)])


# ---------------------------------------------------------------- inference-time reduction

def random_sample_inference(tokens, c_rs: int, seed: int = 0):
    """Keep ``c_rs`` of the ``c`` tokens, uniformly without replacement, order preserved.

    Returns ``(subset, indices)``; works on the second-to-last axis.
    """
    arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens)
    c = arr.shape[-2]
    if not 0 <= c_rs <= c:
        raise ValueError(f"c_rs={c_rs} outside [0, {c}]")
    idx = np.sort(stream(seed, "sampling", 20).choice(c, size=c_rs, replace=False))
    subset = tokens[..., idx, :] if isinstance(tokens, Tensor) else arr[..., idx, :]
    return subset, idx


def groupsize_for(p: int, c_new: int, clamp: bool = True) -> int:
    """Group size ``floor(2 p / c_new)``, clamped to ``p`` unless ``clamp=False``."""
    if c_new < 1:
        raise ValueError("c_new must be >= 1")
    k = (2 * p) // c_new
    if k > p:
        if not clamp:
            raise ValueError(f"derived group size {k} exceeds point count {p}")
        k = p
    return k


def groupsize_inference(points: np.ndarray, params, c_new: int, clamp: bool = True) -> TokenizedInput:
    """Re-tokenize with fewer, larger groups."""
    pts = normalize(points)
    if pts.ndim == 2:
        pts = pts[None]
    k = groupsize_for(pts.shape[1], c_new, clamp)
    center_idx = farthest_point_sample(pts, c_new)
    groups = knn_group(pts, center_idx, k)
    rel, centers = gather_groups(pts, center_idx, groups)
    return TokenizedInput(centers, center_idx, groups, embed_tokens(rel, params),
                          embed_positions(centers, params))


# ---------------------------------------------------------------- FPS student

def idw_weights(sparse_centers: np.ndarray, dense_centers: np.ndarray, neighbours: int = 3,
                eps: float = 1e-8) -> np.ndarray:
    """``(..., c, c2)`` interpolation weights from the 3 nearest sparse centers."""
    sc, dc = np.asarray(sparse_centers), np.asarray(dense_centers)
    d = np.linalg.norm(dc[..., :, None, :] - sc[..., None, :, :], axis=-1)   # (..., c, c2)
    m = min(neighbours, sc.shape[-2])
    nearest = np.argsort(d, axis=-1, kind="stable")[..., :m]
    w = 1.0 / (np.take_along_axis(d, nearest, axis=-1) + eps)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.zeros(d.shape)
    np.put_along_axis(out, nearest, w, axis=-1)
    return out


def fps_student_upsample(sparse_feats, sparse_centers, dense_centers) -> Tensor:
    """Inverse-distance interpolation of sparse token features onto dense centers."""
    return ad.matmul(Tensor(idw_weights(sparse_centers, dense_centers)), sparse_feats)


class FPSStudent(Module):
    """Encode only the first ``c2`` tokens of the FPS order, then interpolate back to ``c``.

    Farthest point sampling is greedy, so those ``c2`` centers are exactly what
    a ``c2``-center sampler would pick; the shared tokenizer stays frozen.
    """

    def __init__(self, teacher: Teacher, c2: int, L: int):
        super().__init__()
        if not 1 <= c2 <= teacher.c:
            raise ValueError(f"c2={c2} outside [1, {teacher.c}]")
        self.teacher_ref = [teacher]   # not a child: teacher params stay out of parameters()
        self.c2 = c2
        self.encoder = teacher.encoder.truncated(L)

    def __call__(self, points: np.ndarray) -> Tensor:
        tok = self.teacher_ref[0].tokenize(points)
        x = tok.tokens[:, : self.c2] + tok.pos_embed[:, : self.c2]
        return fps_student_upsample(self.encoder(x), tok.centers[:, : self.c2], tok.centers)

    def features(self, ds: SyntheticDataset) -> np.ndarray:
        return np.concatenate([pool_mean_max(self(ds.points[sl])).data
                               for sl in _batches_of(len(ds), 64)])


def distill_fps_student(teacher: Teacher, train: SyntheticDataset, config: DistillConfig,
                        c2: int | None = None) -> FPSStudent:
    """Same reconstruction objective and schedule as the SuperToken student."""
    student = FPSStudent(teacher, c2 or config.s, config.student_layers)
    student.encoder.requires_grad_(config.unfreeze_epoch == 0)
    opt = AdamW(student.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    _run_schedule(student, opt, train, config, lambda pts, rng: ad.smooth_l1(
        student(pts), Tensor(_teacher_target(teacher, pts)), config.beta))
    return student


def _teacher_target(teacher: Teacher, pts: np.ndarray) -> np.ndarray:
    tokens, pos = _tokens(teacher, pts)
    return teacher.encoder(tokens + pos).data


def _run_schedule(student, opt: AdamW, train: SyntheticDataset, config: DistillConfig,
                  loss_fn) -> None:
    steps_per_epoch = -(-len(train) // config.batch_size)
    total, warmup = config.epochs * steps_per_epoch, config.warmup_epochs * steps_per_epoch
    shuffle, aug = stream(config.seed, "sampling"), stream(config.seed, "augment")
    gumbel = stream(config.seed, "gumbel")
    step = 0
    for epoch in range(config.epochs):
        if epoch == config.unfreeze_epoch and epoch > 0:
            student.encoder.requires_grad_(True)
        for pts, _ in train.batches(config.batch_size, shuffle):
            if config.augment:
                pts = augment(pts, aug)
            opt.lr = lr_schedule(step, total, warmup, config.lr, config.start_lr, config.final_lr)
            with Tape() as tape:
                loss = loss_fn(pts, gumbel)
            if not np.isfinite(loss.item()):
                raise NumericError("non-finite loss")
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            step += 1


# ---------------------------------------------------------------- specialist KD

class SpecialistStudent(Module):
    """SuperToken student plus a linear head, trained only to match teacher class logits."""

    def __init__(self, teacher: Teacher, config: DistillConfig, num_classes: int):
        super().__init__()
        self.teacher_ref = [teacher]
        self.student = make_student(teacher, config)
        init_linear(self.params, "head", 2 * config.d, num_classes, stream(config.seed, "init", 500))

    def logits(self, points: np.ndarray, mode: str = "eval", rng=None) -> Tensor:
        tokens, pos = _tokens(self.teacher_ref[0], points)
        recon = self.student(tokens, pos, mode=mode, rng=rng).recon
        return linear(pool_mean_max(recon), self.params["head.w"], self.params["head.b"])

    def features(self, ds: SyntheticDataset) -> np.ndarray:
        teacher = self.teacher_ref[0]
        out = []
        for sl in _batches_of(len(ds), 64):
            tokens, pos = _tokens(teacher, ds.points[sl])
            out.append(pool_mean_max(self.student(tokens, pos).recon).data)
        return np.concatenate(out)


def train_specialist(teacher: Teacher, train: SyntheticDataset, config: DistillConfig,
                     temperature: float = 1.0) -> SpecialistStudent:
    """Softmax-KL mimicry of the teacher's class distribution; backbone frozen."""
    spec = SpecialistStudent(teacher, config, train.num_classes)
    spec.student.encoder.requires_grad_(False)
    opt = AdamW(spec.parameters(), lr=config.lr, weight_decay=config.weight_decay)

    def loss_fn(pts, rng):
        tokens, pos = _tokens(teacher, pts)
        target = teacher.logits(teacher.encoder(tokens + pos)).data
        return kl_divergence(target, spec.logits(pts, "train", rng), temperature)

    frozen = copy.copy(config)
    frozen.unfreeze_epoch = config.epochs
    _run_schedule(spec.student, opt, train, frozen, loss_fn)
    return spec
