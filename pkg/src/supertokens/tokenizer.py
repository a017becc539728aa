"""Point cloud -> (centers, groups, token embeddings, positional embeddings).

A reduced version of the usual FPS + kNN grouping front end: each group is
re-centered, passed through a shared point-wise MLP and max-pooled.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import MLP, Module
from .rng import stream


def normalize(points: np.ndarray) -> np.ndarray:
    """Center on the centroid and scale so the farthest point has norm 1.

    Works on ``(p, 3)`` or batched ``(B, p, 3)`` arrays.
    """
    pts = np.asarray(points, dtype=np.float64)
    centered = pts - pts.mean(axis=-2, keepdims=True)
    radius = np.linalg.norm(centered, axis=-1).max(axis=-1)
    radius = np.where(radius > 0, radius, 1.0)
    return centered / np.expand_dims(radius, (-1, -2))


def farthest_point_sample(points: np.ndarray, c: int) -> np.ndarray:
    """Greedy max-min selection of ``c`` indices, always starting at index 0.

    Ties go to the lowest index. Accepts ``(p, 3)`` or ``(B, p, 3)``.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 2
    if single:
        pts = pts[None]
    B, p, _ = pts.shape
    if c > p:
        raise ValueError(f"cannot sample {c} centers from {p} points")
    if c < 0:
        raise ValueError("c must be nonnegative")
    idx = np.zeros((B, c), dtype=np.int64)
    mind = np.full((B, p), np.inf)
    rows = np.arange(B)
    for i in range(1, c):
        last = pts[rows, idx[:, i - 1]]
        d = np.linalg.norm(pts - last[:, None, :], axis=-1)
        mind = np.minimum(mind, d)
        idx[:, i] = np.argmax(mind, axis=1)
    return idx[0] if single else idx


def knn_group(points: np.ndarray, centers: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest points to each center, nearest first.

    Ties break toward the lower point index, except that the center itself
    always wins among zero-distance duplicates so it is a member of its group.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 2
    if single:
        pts, centers = pts[None], np.asarray(centers)[None]
    B, p, _ = pts.shape
    if k > p:
        raise ValueError(f"group size {k} exceeds point count {p}")
    ctr = np.take_along_axis(pts, centers[..., None], axis=1)            # (B, c, 3)
    d = np.linalg.norm(ctr[:, :, None, :] - pts[:, None, :, :], axis=-1)  # (B, c, p)
    is_self = np.arange(p)[None, None, :] == centers[..., None]
    order = np.lexsort((np.broadcast_to(np.arange(p), d.shape), ~is_self, d), axis=-1)
    groups = order[..., :k]
    return groups[0] if single else groups


class TokenizerParams(Module):
    """Shared point MLP for token content and a center MLP for positions.

    Fan-in scaled init by default: coordinates are O(1) and a 0.02 std would
    leave the embeddings far below the encoder's layer-norm scale.
    """

    def __init__(self, d: int = 32, seed: int = 0, std: float | None = None, norm: bool = False):
        super().__init__()
        rng = stream(seed, "init", 100)
        self.d = d
        self.embed = MLP(3, d, d, rng, std=std)
        self.pos = MLP(3, d, d, rng, std=std)
        if norm:
            self.params["norm.w"] = Tensor(np.ones(d), requires_grad=True)
            self.params["norm.b"] = Tensor(np.zeros(d), requires_grad=True)


@dataclass
class TokenizedInput:
    centers: np.ndarray   # (B, c, 3)
    center_idx: np.ndarray  # (B, c)
    groups: np.ndarray    # (B, c, k)
    tokens: Tensor        # (B, c, d)
    pos_embed: Tensor     # (B, c, d)


def gather_groups(points: np.ndarray, center_idx: np.ndarray, groups: np.ndarray):
    """Relative coordinates ``(B, c, k, 3)`` and absolute centers ``(B, c, 3)``."""
    B = points.shape[0]
    rows = np.arange(B)[:, None, None]
    local = points[rows, groups]
    centers = np.take_along_axis(points, center_idx[..., None], axis=1)
    return local - centers[:, :, None, :], centers


def embed_tokens(relative: np.ndarray, params: TokenizerParams) -> Tensor:
    """Point MLP on center-relative coordinates, max-pooled over each group."""
    h = ad.amax(params.embed(Tensor(relative)), axis=-2)
    if "norm.w" in params.params:
        h = ad.layer_norm(h, params.params["norm.w"], params.params["norm.b"])
    return h


def embed_positions(centers: np.ndarray, params: TokenizerParams) -> Tensor:
    return params.pos(Tensor(centers))


def tokenize(points: np.ndarray, params: TokenizerParams, c: int, k: int) -> TokenizedInput:
    """Normalize, sample ``c`` centers, group ``k`` neighbours and embed."""
    pts = normalize(points)
    if pts.ndim == 2:
        pts = pts[None]
    center_idx = farthest_point_sample(pts, c)
    groups = knn_group(pts, center_idx, k)
    relative, centers = gather_groups(pts, center_idx, groups)
    return TokenizedInput(centers, center_idx, groups,
                          embed_tokens(relative, params), embed_positions(centers, params))
