"""Feature-separability diagnostics on sampled pixel embeddings.

Measures how well embedding vectors cluster by rainfall class: cosine
cohesion and margin, leave-one-out 1-NN accuracy, scatter-ratio scores
(Fisher, Calinski-Harabasz), and a linear-SVM probe. Pixel pools are
rebalanced first by progressive per-class sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.metrics import f1_score as _sk_f1
from sklearn.svm import LinearSVC

from .errors import DataError, ValidationError

# Progressive sampling: per-class cap ~ sqrt(pool size), hard max 2000,
# so head classes are compressed much harder than tail classes.
PROGRESSIVE_HARD_CAP = 2000

# Linear probe hyperparameters (pinned; logged with every report).
SVM_C = 1.0
SVM_MAX_ITER = 5000


@dataclass(frozen=True)
class FeatureSample:
    """Pixel embeddings [N, d] with class labels [N]."""

    vectors: np.ndarray
    labels: np.ndarray
    source_layer: str = "unspecified"

    def __post_init__(self):
        v = np.asarray(self.vectors, dtype=np.float64)
        lab = np.asarray(self.labels)
        if v.ndim != 2 or lab.ndim != 1 or v.shape[0] != lab.shape[0]:
            raise ValidationError(
                f"expected vectors [N, d] with labels [N], got {v.shape} / {lab.shape}"
            )
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "labels", lab.astype(np.int64))

    @property
    def classes(self) -> np.ndarray:
        return np.unique(self.labels)


def progressive_caps(pool_sizes: dict[int, int]) -> dict[int, int]:
    """Default caps: min(hard cap, ceil(sqrt(pool)))."""
    return {
        k: min(PROGRESSIVE_HARD_CAP, math.ceil(math.sqrt(n)))
        for k, n in pool_sizes.items()
    }


def progressive_sample(
    features_by_class: dict[int, np.ndarray],
    caps: dict[int, int] | None = None,
    rng: np.random.Generator | None = None,
    source_layer: str = "unspecified",
) -> FeatureSample:
    """Draw min(cap_k, pool_k) vectors per class without replacement.

    Empty pools are dropped with a warning. With caps omitted, the
    sqrt-of-pool-size schedule rebalances head-heavy pixel pools.
    """
    import warnings

    rng = rng or np.random.default_rng()
    pools = {int(k): np.asarray(v, dtype=np.float64) for k, v in features_by_class.items()}
    caps = caps if caps is not None else progressive_caps({k: len(v) for k, v in pools.items()})
    vecs, labs = [], []
    for k in sorted(pools):
        pool = pools[k]
        if len(pool) == 0:
            warnings.warn(f"class {k} has an empty feature pool; dropped")
            continue
        take = min(int(caps.get(k, len(pool))), len(pool))
        idx = rng.choice(len(pool), size=take, replace=False)
        idx.sort()
        vecs.append(pool[idx])
        labs.append(np.full(take, k, dtype=np.int64))
    if not vecs:
        raise DataError("all feature pools were empty")
    return FeatureSample(
        vectors=np.concatenate(vecs), labels=np.concatenate(labs), source_layer=source_layer
    )


def _cosine_matrix(v: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(v, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = v / safe[:, None]
    unit[norms == 0] = 0.0  # zero-norm vectors get similarity 0 everywhere
    return unit @ unit.T


def intra_sim(fs: FeatureSample) -> float:
    """Mean over classes of the mean pairwise cosine within the class."""
    sims = _cosine_matrix(fs.vectors)
    per_class = []
    for k in fs.classes:
        idx = np.flatnonzero(fs.labels == k)
        if idx.size < 2:
            continue
        block = sims[np.ix_(idx, idx)]
        total = block.sum() - np.trace(block)  # exclude self-pairs
        per_class.append(total / (idx.size * (idx.size - 1)))
    if not per_class:
        raise ValidationError("intra_sim needs at least one class with >= 2 samples")
    return float(np.mean(per_class))


def inter_sim(fs: FeatureSample) -> float:
    """Mean over unordered class pairs of the mean cross-class cosine."""
    classes = fs.classes
    if classes.size < 2:
        raise ValidationError("inter_sim needs at least 2 classes")
    sims = _cosine_matrix(fs.vectors)
    per_pair = []
    for a in range(classes.size):
        for b in range(a + 1, classes.size):
            ia = np.flatnonzero(fs.labels == classes[a])
            ib = np.flatnonzero(fs.labels == classes[b])
            per_pair.append(sims[np.ix_(ia, ib)].mean())
    return float(np.mean(per_pair))


def sim_margin(fs: FeatureSample) -> float:
    """IntraSim minus InterSim; larger means better-separated classes."""
    return intra_sim(fs) - inter_sim(fs)


def knn_acc(fs: FeatureSample) -> float:
    """Leave-one-out 1-NN accuracy under cosine similarity.

    Ties go to the lower index. Every vector's nearest *other* vector
    votes with its label.
    """
    n = fs.vectors.shape[0]
    if n < 2:
        raise ValidationError("knn_acc needs at least 2 samples")
    sims = _cosine_matrix(fs.vectors)
    np.fill_diagonal(sims, -np.inf)
    nearest = sims.argmax(axis=1)  # argmax returns the first (lowest) index on ties
    return float(np.mean(fs.labels[nearest] == fs.labels))


def _scatter_traces(fs: FeatureSample) -> tuple[float, float, int]:
    """(tr between-class, tr within-class, num classes), size-weighted."""
    mu = fs.vectors.mean(axis=0)
    tr_b = 0.0
    tr_w = 0.0
    classes = fs.classes
    for k in classes:
        x = fs.vectors[fs.labels == k]
        mu_k = x.mean(axis=0)
        tr_b += x.shape[0] * float(((mu_k - mu) ** 2).sum())
        tr_w += float(((x - mu_k) ** 2).sum())
    return tr_b, tr_w, classes.size


def fisher_score(fs: FeatureSample) -> float | None:
    """tr(S_b) / tr(S_w); None when every point equals its class mean."""
    if fs.classes.size < 2:
        raise ValidationError("fisher_score needs at least 2 classes")
    tr_b, tr_w, _ = _scatter_traces(fs)
    if tr_w == 0.0:
        return None
    return tr_b / tr_w


def ch_index(fs: FeatureSample) -> float | None:
    """Calinski-Harabasz: [tr(B)/(c-1)] / [tr(W)/(N-c)]."""
    n = fs.vectors.shape[0]
    tr_b, tr_w, c = _scatter_traces(fs)
    if c < 2 or n <= c:
        raise ValidationError(f"ch_index needs >= 2 classes and N > c (N={n}, c={c})")
    if tr_w == 0.0:
        return None
    return (tr_b / (c - 1)) / (tr_w / (n - c))


def f1_svm(fs: FeatureSample, split_frac: float = 0.5, rng: np.random.Generator | None = None) -> float:
    """Macro-F1 of a linear max-margin probe on a seeded held-out split."""
    rng = rng or np.random.default_rng()
    n = fs.vectors.shape[0]
    perm = rng.permutation(n)
    n_train = int(round(split_frac * n))
    tr, te = perm[:n_train], perm[n_train:]
    if np.unique(fs.labels[tr]).size < 2 or np.unique(fs.labels[te]).size < 2:
        raise DataError("degenerate split: both parts need >= 2 classes")
    clf = LinearSVC(C=SVM_C, max_iter=SVM_MAX_ITER, random_state=0)
    clf.fit(fs.vectors[tr], fs.labels[tr])
    pred = clf.predict(fs.vectors[te])
    return float(_sk_f1(fs.labels[te], pred, average="macro"))


def heavy_only(fs: FeatureSample, heavy_classes=(4, 5)) -> FeatureSample:
    """Restrict to heavy-class samples (for the starred report columns)."""
    mask = np.isin(fs.labels, list(heavy_classes))
    return FeatureSample(
        vectors=fs.vectors[mask], labels=fs.labels[mask], source_layer=fs.source_layer
    )


def quality_report(
    fs: FeatureSample,
    split_frac: float = 0.5,
    rng: np.random.Generator | None = None,
    heavy_classes=(4, 5),
) -> dict:
    """All six metrics; starred entries are computed on heavy classes only."""
    rng = rng or np.random.default_rng()
    heavy = heavy_only(fs, heavy_classes)
    report = {
        "source_layer": fs.source_layer,
        "num_samples": int(fs.vectors.shape[0]),
        "svm": {"C": SVM_C, "max_iter": SVM_MAX_ITER, "split_frac": split_frac},
        "intra_sim": intra_sim(fs),
        "sim_margin": sim_margin(fs),
        "knn_acc": knn_acc(fs),
        "fisher": fisher_score(fs),
        "ch_heavy": ch_index(heavy) if heavy.classes.size >= 2 else None,
        "f1_svm_heavy": f1_svm(heavy, split_frac, rng) if heavy.classes.size >= 2 else None,
    }
    return report
