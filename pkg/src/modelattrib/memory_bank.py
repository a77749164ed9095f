"""Budgeted per-class store of encoder features with herding selection.

The bank keeps raw encoder features (not projected latents) because the
projection head drifts across tasks; replay re-encodes them through the
current head.  Selection is greedy herding on L2-normalized features, so
the stored order has the prefix property: the best B' exemplars of a class
are the first B' entries for every B' below the budget.
"""

from __future__ import annotations

import warnings

import numpy as np

__all__ = ["MemoryBank", "herding_select", "sample_mix_pairs"]


def herding_select(features: np.ndarray, budget: int) -> list[int]:
    """Greedy herding order over ``features``; returns min(budget, n) indices.

    Each step picks the candidate whose inclusion keeps the running mean of
    the selected set closest to the class mean of the L2-normalized
    features.  Ties break toward the lowest index.  Zero-norm rows cannot be
    normalized; they are skipped (with a warning) and appended last.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] == 0:
        raise ValueError("herding_select needs a nonempty (n, d) feature matrix")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    n = features.shape[0]
    norms = np.linalg.norm(features, axis=1)
    nonzero = norms > 0.0
    if not nonzero.all():
        warnings.warn(
            f"{int((~nonzero).sum())} zero-norm feature(s) excluded from herding normalization"
        )
    if not nonzero.any():
        return list(range(min(budget, n)))

    normed = np.zeros_like(features)
    normed[nonzero] = features[nonzero] / norms[nonzero, None]
    mu = normed[nonzero].mean(axis=0)

    limit = min(budget, n)
    chosen: list[int] = []
    blocked = ~nonzero
    running = np.zeros(features.shape[1])
    while len(chosen) < limit and not blocked.all():
        k = len(chosen)
        gap = mu[None, :] - (running[None, :] + normed) / (k + 1)
        dist = np.linalg.norm(gap, axis=1)
        dist[blocked] = np.inf
        pick = int(np.argmin(dist))
        chosen.append(pick)
        blocked[pick] = True
        running += normed[pick]
    for i in range(n):
        if len(chosen) >= limit:
            break
        if not nonzero[i] and i not in chosen:
            chosen.append(i)
    return chosen


def sample_mix_pairs(
    pool_classes: np.ndarray, n_pairs: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Uniform cross-class index pairs over a latent pool, with per-pair betas.

    Returns ``(idx_a, idx_b, betas)`` indexing into the pool; the caller mixes
    ``beta * pool[idx_a] + (1 - beta) * pool[idx_b]``.  With fewer than two
    distinct classes in the pool the result is empty and the mixing loss is
    skipped for the step.
    """
    pool_classes = np.asarray(pool_classes)
    n = pool_classes.shape[0]
    if n_pairs < 0:
        raise ValueError("n_pairs must be >= 0")
    if len(np.unique(pool_classes)) < 2 or n_pairs == 0:
        return (
            np.zeros(0, dtype=np.intp),
            np.zeros(0, dtype=np.intp),
            np.zeros(0, dtype=np.float64),
        )
    idx_a = np.empty(n_pairs, dtype=np.intp)
    idx_b = np.empty(n_pairs, dtype=np.intp)
    betas = np.empty(n_pairs, dtype=np.float64)
    for k in range(n_pairs):
        while True:
            i = int(rng.integers(n))
            j = int(rng.integers(n))
            if pool_classes[i] != pool_classes[j]:
                break
        idx_a[k] = i
        idx_b[k] = j
        betas[k] = rng.random()
    return idx_a, idx_b, betas


class MemoryBank:
    """Per-class exemplar store with a fixed budget and herding order."""

    def __init__(self, budget: int = 150, feature_dim: int | None = None):
        if budget < 1:
            raise ValueError("budget must be >= 1")
        self.budget = budget
        self.feature_dim = feature_dim
        self.entries: dict[int, np.ndarray] = {}

    @property
    def classes(self) -> list[int]:
        return sorted(self.entries.keys())

    def __len__(self) -> int:
        return sum(arr.shape[0] for arr in self.entries.values())

    def admit_class(self, class_id: int, features: np.ndarray) -> "MemoryBank":
        """Select and freeze up to ``budget`` exemplars for a new class."""
        if class_id in self.entries:
            raise RuntimeError(f"class {class_id} already admitted to the bank")
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 2:
            raise ValueError("features must be a (n, d) matrix")
        if self.feature_dim is None:
            self.feature_dim = features.shape[1]
        elif features.shape[1] != self.feature_dim:
            raise ValueError(
                f"feature dim {features.shape[1]} does not match bank dim {self.feature_dim}"
            )
        order = herding_select(features, self.budget)
        stored = features[order].copy()
        stored.setflags(write=False)  # replay must never mutate entries
        self.entries[class_id] = stored
        return self

    def sample_replay(
        self, batch_size: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """Class-balanced replay batch: round-robin over a shuffled class order,
        uniform within class."""
        if not self.entries:
            raise RuntimeError("cannot sample replay from an empty bank")
        if batch_size == 0:
            return np.zeros((0, self.feature_dim or 0), dtype=np.float32), np.zeros(
                0, dtype=np.intp
            )
        class_order = np.array(self.classes)
        rng.shuffle(class_order)
        feats = np.empty((batch_size, self.feature_dim), dtype=np.float32)
        labels = np.empty(batch_size, dtype=np.intp)
        for slot in range(batch_size):
            cid = int(class_order[slot % len(class_order)])
            pool = self.entries[cid]
            feats[slot] = pool[int(rng.integers(pool.shape[0]))]
            labels[slot] = cid
        return feats, labels

    def truncated(self, budget: int) -> "MemoryBank":
        """View of the bank at a smaller budget (herding prefix property)."""
        if budget > self.budget:
            raise ValueError("can only truncate to a smaller budget")
        out = MemoryBank(budget=budget, feature_dim=self.feature_dim)
        for cid, arr in self.entries.items():
            kept = arr[:budget].copy()
            kept.setflags(write=False)
            out.entries[cid] = kept
        return out

    def total_floats(self) -> int:
        return sum(arr.size for arr in self.entries.values())
