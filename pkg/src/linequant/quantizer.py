"""Discrete patch labels for pre-training: frozen features + K-Means codebook.

A frozen convolutional stem turns each text line into one feature vector per
8-pixel patch. A K-Means codebook fitted on those vectors assigns every patch
a cluster id, which pre-training then predicts for masked patches. The stem
is randomly initialized and frozen by default; alternatively its weights can
be pulled from the stem of a previously trained recognizer checkpoint.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from collections import Counter
from pathlib import Path

import numpy as np

from . import model as _model
from .dataset import LINE_HEIGHT, PATCH_STRIDE, LineSample, read_pgm
from .errors import (
    DataError,
    DimensionError,
    EmptySequenceError,
    FormatError,
    InsufficientDataError,
    VersionError,
)
from .model import EncoderConfig, ModelParams, StemConfig

CODEBOOK_MAGIC = b"LQKM"
CODEBOOK_VERSION = 1

DEFAULT_FX_CHANNELS = (16, 32, 32, 64)
DEFAULT_FX_DIM = 64
DEFAULT_FX_SEED = 7151


class FeatureExtractor:
    """Frozen conv stem; width W maps to floor(W/8) feature vectors."""

    def __init__(self, params: ModelParams, origin: str):
        self.params = params
        self.origin = origin
        for t in params.tensors.values():
            t.requires_grad = False
            t.data.flags.writeable = False

    @classmethod
    def random_init(cls, seed: int = DEFAULT_FX_SEED,
                    channels: tuple[int, ...] = DEFAULT_FX_CHANNELS,
                    out_dim: int = DEFAULT_FX_DIM) -> "FeatureExtractor":
        cfg = EncoderConfig(layers=0, heads=1, dim=out_dim,
                            stem=StemConfig(channels=tuple(channels)))
        spec = _model._stem_spec(cfg.stem, out_dim)
        tensors = _model._init_tensors(spec, np.random.default_rng([seed, 0]))
        params = ModelParams(tensors, encoder=cfg)
        return cls(params, origin=f"random:{seed}")

    @classmethod
    def from_checkpoint(cls, path) -> "FeatureExtractor":
        """Reuse the stem of a trained recognizer as the feature source."""
        source = _model.load_checkpoint(path)
        if source.encoder is None:
            raise DataError(f"{path}: checkpoint has no encoder/stem component")
        cfg = EncoderConfig(layers=0, heads=1, dim=source.encoder.dim,
                            stem=source.encoder.stem)
        tensors = {n: t for n, t in source.tensors.items() if n.startswith("stem.")}
        if not tensors:
            raise DataError(f"{path}: checkpoint contains no stem tensors")
        params = ModelParams(tensors, encoder=cfg)
        return cls(params, origin=f"checkpoint:{Path(path).name}")

    @property
    def dim(self) -> int:
        return self.params.encoder.dim

    def weights_hash(self) -> str:
        return self.params.state_hash()

    def extract(self, image: np.ndarray) -> np.ndarray:
        return extract_features(image, self)


def extract_features(image: np.ndarray, fx: FeatureExtractor) -> np.ndarray:
    """Feature sequence [floor(W/8) x d_f] for one height-48 line."""
    if image.ndim != 2:
        raise DimensionError(f"expected an H x W image, got shape {image.shape}")
    h, w = image.shape
    if h != LINE_HEIGHT:
        raise DimensionError(f"line height {h} != required {LINE_HEIGHT}")
    if w < PATCH_STRIDE:
        raise EmptySequenceError(f"width {w} yields no complete patch")
    states = _model.stem_forward(fx.params, image[None, None].astype(np.float32))
    return np.asarray(states.data[0], dtype=np.float32)


# ---------------------------------------------------------------------------
# K-Means


@dataclasses.dataclass
class Codebook:
    k: int
    centroids: np.ndarray  # k x d_f float32
    n_fit_vectors: int
    iterations: int
    final_inertia: float
    seed: int
    inertia_history: tuple[float, ...] = ()

    def save(self, path) -> None:
        centroids = np.ascontiguousarray(self.centroids, dtype="<f4")
        meta = json.dumps({
            "n_fit_vectors": self.n_fit_vectors,
            "iterations": self.iterations,
            "final_inertia": self.final_inertia,
            "seed": self.seed,
        }, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CODEBOOK_MAGIC)
            fh.write(struct.pack("<III", CODEBOOK_VERSION, self.k, centroids.shape[1]))
            fh.write(centroids.tobytes())
            fh.write(meta)

    @classmethod
    def load(cls, path) -> "Codebook":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CODEBOOK_MAGIC:
                raise FormatError(f"bad codebook magic {magic!r}")
            header = fh.read(12)
            if len(header) != 12:
                raise FormatError("truncated codebook header")
            version, k, dim = struct.unpack("<III", header)
            if version != CODEBOOK_VERSION:
                raise VersionError(f"unsupported codebook version {version}")
            raw = fh.read(4 * k * dim)
            if len(raw) != 4 * k * dim:
                raise FormatError(f"truncated codebook: expected {k}x{dim} centroids")
            centroids = np.frombuffer(raw, dtype="<f4").reshape(k, dim).copy()
            meta = json.loads(fh.read().decode("utf-8") or "{}")
        return cls(k=k, centroids=centroids,
                   n_fit_vectors=meta.get("n_fit_vectors", 0),
                   iterations=meta.get("iterations", 0),
                   final_inertia=meta.get("final_inertia", 0.0),
                   seed=meta.get("seed", 0))


def _squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        (x * x).sum(axis=1, keepdims=True)
        - 2.0 * x @ centroids.T
        + (centroids * centroids).sum(axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=x.dtype)
    first = int(rng.integers(0, n))
    centroids[0] = x[first]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            raise InsufficientDataError(
                f"only {j} distinct feature vectors available for k={k}"
            )
        probs = d2 / total
        idx = int(rng.choice(n, p=probs))
        centroids[j] = x[idx]
        d2 = np.minimum(d2, ((x - centroids[j]) ** 2).sum(axis=1))
    return centroids


def fit_kmeans(features: np.ndarray, k: int, max_iters: int = 50,
               tol: float = 1e-4, seed: int = 0) -> Codebook:
    """k-means++ init then Lloyd iterations with squared Euclidean distance.

    Stops when the relative inertia improvement drops below tol or after
    max_iters. An empty cluster is reseeded to the point farthest from its
    assigned centroid, which strictly lowers inertia.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise DimensionError(f"features must be N x d, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise DataError("features contain non-finite values")
    n = x.shape[0]
    if k < 1:
        raise InsufficientDataError("k must be >= 1")
    if n < k:
        raise InsufficientDataError(f"cannot fit k={k} clusters on {n} vectors")

    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, k, rng)
    history: list[float] = []

    for iteration in range(max_iters):
        d2 = _squared_distances(x, centroids)
        assign = d2.argmin(axis=1)
        point_d2 = d2[np.arange(n), assign]
        inertia = float(point_d2.sum())
        # converged: no (sufficient) improvement, so stop without recording;
        # this keeps the history monotone even when float noise at a fixed
        # point would otherwise show a last-ulp uptick
        if history and history[-1] - inertia < tol * max(history[0], 1.0):
            break
        history.append(inertia)

        counts = np.bincount(assign, minlength=k).astype(np.float64)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]

        empty = np.flatnonzero(~nonempty)
        if empty.size:
            order = np.argsort(point_d2)[::-1]  # farthest points first
            taken = 0
            for cluster in empty:
                # skip candidates that duplicate an existing centroid, else
                # two centroids could coincide on duplicate-heavy data
                while taken < n and (
                    point_d2[order[taken]] <= 0.0
                    or (centroids == x[order[taken]]).all(axis=1).any()
                ):
                    taken += 1
                if taken >= n:
                    raise InsufficientDataError(
                        f"not enough distinct vectors to keep {k} clusters apart"
                    )
                centroids[cluster] = x[order[taken]]
                taken += 1

    return Codebook(
        k=k,
        centroids=centroids.astype(np.float32),
        n_fit_vectors=n,
        iterations=len(history),
        final_inertia=history[-1],
        seed=seed,
        inertia_history=tuple(history),
    )


def assign_labels(features: np.ndarray, codebook: Codebook) -> np.ndarray:
    """Nearest-centroid labels; ties break toward the lowest centroid index."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != codebook.centroids.shape[1]:
        raise DimensionError(
            f"feature dim {x.shape} does not match codebook dim "
            f"{codebook.centroids.shape[1]}"
        )
    d2 = _squared_distances(x, codebook.centroids.astype(np.float64))
    return d2.argmin(axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# corpus labeling and the trigram report


def label_corpus(manifest_path, fx: FeatureExtractor, codebook: Codebook,
                 out_path) -> int:
    """Write one {"id", "labels"} JSON line per manifest record."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    count = 0
    with open(manifest_path, "r", encoding="utf-8") as mf, \
            open(out_path, "w", encoding="utf-8", newline="\n") as lf:
        for line in mf:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            image_path = base / rec["image"]
            if not image_path.exists():
                raise FileNotFoundError(
                    f"image for sample {rec['id']} not found: {image_path}"
                )
            labels = assign_labels(extract_features(read_pgm(image_path), fx), codebook)
            lf.write(json.dumps({"id": rec["id"], "labels": labels.tolist()}) + "\n")
            count += 1
    return count


def load_label_store(path) -> dict[str, list[int]]:
    store: dict[str, list[int]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            store[rec["id"]] = rec["labels"]
    return store


@dataclasses.dataclass
class TrigramGroup:
    trigram: tuple[int, int, int]
    count: int
    crops: list[tuple[str, int, np.ndarray]]  # (sample id, patch index, 48 x 24 crop)


def trigram_report(label_store: dict[str, list[int]], samples: list[LineSample],
                   top_n: int, crops_per_group: int = 8) -> list[TrigramGroup]:
    """Most frequent label triplets with example crops from distinct lines.

    Each crop spans the trigram's three consecutive patches (24 px). Lines
    shorter than three patches contribute nothing.
    """
    missing = [s.id for s in samples if s.id not in label_store]
    if missing:
        raise DataError(f"label store does not cover sample {missing[0]}")

    counts: Counter = Counter()
    for s in samples:
        labels = label_store[s.id]
        for i in range(len(labels) - 2):
            counts[tuple(labels[i:i + 3])] += 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max(top_n, 0)]

    groups = []
    for trigram, count in ranked:
        crops: list[tuple[str, int, np.ndarray]] = []
        for s in samples:
            if len(crops) >= crops_per_group:
                break
            labels = label_store[s.id]
            for i in range(len(labels) - 2):
                if tuple(labels[i:i + 3]) == trigram:
                    lo = i * PATCH_STRIDE
                    crops.append((s.id, i, s.image[:, lo:lo + 3 * PATCH_STRIDE].copy()))
                    break  # at most one crop per line keeps groups diverse
        groups.append(TrigramGroup(trigram, count, crops))
    return groups
