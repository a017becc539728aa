"""Synthetic point-cloud datasets built from analytic surfaces."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import io as fio
from .rng import stream
from .tokenizer import normalize

CLASSES = ("sphere", "cube", "cylinder", "plane", "torus")
JITTER = 0.01


@dataclass
class SyntheticDataset:
    points: np.ndarray   # (n, p, 3)
    labels: np.ndarray   # (n,) int
    seed: int
    kind: str = "shapes"

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0

    def subset(self, idx) -> "SyntheticDataset":
        return SyntheticDataset(self.points[idx], self.labels[idx], self.seed, self.kind)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for i in range(0, len(order), batch_size):
            sel = order[i:i + batch_size]
            yield self.points[sel], self.labels[sel]


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _sphere(rng, p):
    v = rng.normal(size=(p, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * rng.uniform(0.9, 1.0)


def _cube(rng, p):
    half = rng.uniform(0.4, 0.6, size=3)
    face = rng.integers(0, 6, size=p)
    uv = rng.uniform(-1, 1, size=(p, 3))
    axis = face % 3
    uv[np.arange(p), axis] = np.where(face < 3, 1.0, -1.0)
    return uv * half


def _cylinder(rng, p):
    radius, height = rng.uniform(0.3, 0.5), rng.uniform(1.2, 2.0)
    theta = rng.uniform(0, 2 * np.pi, p)
    z = rng.uniform(-height / 2, height / 2, p)
    pts = np.stack([radius * np.cos(theta), radius * np.sin(theta), z], axis=1)
    cap = rng.uniform(size=p) < radius / (radius + height)
    rr = radius * np.sqrt(rng.uniform(size=p))
    pts[cap, 0] = rr[cap] * np.cos(theta[cap])
    pts[cap, 1] = rr[cap] * np.sin(theta[cap])
    pts[cap, 2] = np.where(rng.uniform(size=cap.sum()) < 0.5, -height / 2, height / 2)
    return pts


def _plane(rng, p):
    w, h = rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0)
    return np.stack([rng.uniform(-w, w, p), rng.uniform(-h, h, p), np.zeros(p)], axis=1)


def _torus(rng, p):
    big, small = rng.uniform(0.6, 0.8), rng.uniform(0.15, 0.3)
    u, v = rng.uniform(0, 2 * np.pi, p), rng.uniform(0, 2 * np.pi, p)
    return np.stack([(big + small * np.cos(v)) * np.cos(u),
                     (big + small * np.cos(v)) * np.sin(u),
                     small * np.sin(v)], axis=1)


SURFACES = {"sphere": _sphere, "cube": _cube, "cylinder": _cylinder,
            "plane": _plane, "torus": _torus}


def sample_shape(name: str, p: int, rng: np.random.Generator, rotate: bool = True) -> np.ndarray:
    """Raw surface samples of one shape (before jitter and normalization)."""
    pts = SURFACES[name](rng, p)
    return pts @ _random_rotation(rng).T if rotate else pts


def generate_dataset(n: int = 512, points_per_cloud: int = 64, seed: int = 0,
                     stream_name: str = "data") -> SyntheticDataset:
    """Shape-classification set, round-robin balanced (class counts differ by at most 1).

    Same seed, same bytes.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    rng = stream(seed, stream_name)
    labels = (np.arange(n) % len(CLASSES))[rng.permutation(n)]
    pts = np.empty((n, points_per_cloud, 3))
    for i, lab in enumerate(labels):
        raw = sample_shape(CLASSES[lab], points_per_cloud, rng)
        pts[i] = normalize(raw + rng.normal(0, JITTER, raw.shape))
    return SyntheticDataset(pts, labels, seed, "shapes")


def generate_count_dataset(n: int = 300, points_per_cloud: int = 64, seed: int = 0,
                           max_count: int = 3, stream_name: str = "data") -> SyntheticDataset:
    """Scenes with 1..max_count small random shapes; the label is ``count - 1``."""
    rng = stream(seed, stream_name, 1)
    labels = (np.arange(n) % max_count)[rng.permutation(n)]
    pts = np.empty((n, points_per_cloud, 3))
    for i, lab in enumerate(labels):
        count = lab + 1
        sizes = np.full(count, points_per_cloud // count)
        sizes[: points_per_cloud - sizes.sum()] += 1
        centers = _separated_centers(rng, count)
        parts = [sample_shape(CLASSES[rng.integers(len(CLASSES))], m, rng) * 0.3 + ctr
                 for m, ctr in zip(sizes, centers)]
        raw = np.concatenate(parts)
        pts[i] = normalize(raw + rng.normal(0, JITTER, raw.shape))
    return SyntheticDataset(pts, labels, seed, "count")


def _separated_centers(rng, count: int, min_dist: float = 0.9) -> np.ndarray:
    while True:
        ctr = rng.uniform(-1, 1, size=(count, 3))
        d = np.linalg.norm(ctr[:, None] - ctr[None], axis=-1) + np.eye(count) * 9
        if d.min() >= min_dist:
            return ctr


def augment(points: np.ndarray, rng: np.random.Generator,
            scale=(0.8, 1.2), rotate_y: bool = True) -> np.ndarray:
    """Anisotropic scaling and a random rotation about the y axis, per cloud."""
    pts = np.asarray(points, dtype=np.float64)
    B = pts.shape[0]
    out = pts * rng.uniform(scale[0], scale[1], size=(B, 1, 3))
    if rotate_y:
        a = rng.uniform(-np.pi, np.pi, size=B)
        c, s = np.cos(a), np.sin(a)
        rot = np.zeros((B, 3, 3))
        rot[:, 0, 0], rot[:, 0, 2], rot[:, 1, 1] = c, s, 1.0
        rot[:, 2, 0], rot[:, 2, 2] = -s, c
        out = out @ np.swapaxes(rot, 1, 2)
    return out


def save_dataset(ds: SyntheticDataset, path) -> None:
    """FTEN stream (one ``p x 3`` tensor per cloud, then the label vector) + manifest."""
    path = Path(path)
    with open(path, "wb") as fh:
        for cloud in ds.points:
            fio.write_tensor(fh, cloud)
        fio.write_tensor(fh, ds.labels.astype(np.float64))
    manifest = {"kind": ds.kind, "count": len(ds), "points_per_cloud": int(ds.points.shape[1]),
                "num_classes": ds.num_classes, "seed": ds.seed,
                "classes": list(CLASSES) if ds.kind == "shapes" else None}
    Path(str(path) + ".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(path) -> SyntheticDataset:
    path = Path(path)
    manifest = json.loads(Path(str(path) + ".json").read_text())
    arrays = list(fio.iter_tensors(path))
    if len(arrays) != manifest["count"] + 1:
        raise fio.FormatError(f"{path}: expected {manifest['count'] + 1} tensors, got {len(arrays)}")
    return SyntheticDataset(np.stack(arrays[:-1]), arrays[-1].astype(np.int64),
                            manifest["seed"], manifest["kind"])
