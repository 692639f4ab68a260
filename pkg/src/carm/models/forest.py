"""Window statistics features and a Gini random forest."""
from __future__ import annotations

import math

import numpy as np

from .config import FEATURE_NAMES

N_CLASSES = 3


def extract_features(windows, features=FEATURE_NAMES) -> np.ndarray:
    """Per-channel (mean, std, min, max, var) for ``(n, channels, samples)`` or a single
    ``(channels, samples)`` window. Std and var use the n-1 denominator."""
    x = np.asarray(windows, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    var = x.var(axis=2, ddof=1) if x.shape[2] > 1 else np.zeros(x.shape[:2])
    stats = {
        "mean": x.mean(axis=2), "std": np.sqrt(var), "min": x.min(axis=2),
        "max": x.max(axis=2), "var": var,
    }
    out = np.stack([stats[f] for f in features], axis=2).reshape(len(x), -1)
    return out[0] if single else out


def _gini_from_counts(counts):
    n = counts.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        p = counts / n[..., None]
    return 1.0 - np.nansum(p * p, axis=-1)


class DecisionTree:
    """Binary tree in flat arrays; ``feature == -1`` marks a leaf."""

    def __init__(self, feature, threshold, left, right, value, importance=None):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.value = np.asarray(value, dtype=np.float64).reshape(-1, N_CLASSES)
        self.importance = importance

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @classmethod
    def fit(cls, X, y, rng, max_depth=None, max_features="sqrt", min_samples_split=2):
        n, d = X.shape
        k = d if max_features is None else (
            max(1, int(math.ceil(math.sqrt(d)))) if max_features == "sqrt" else int(max_features))
        onehot = np.eye(N_CLASSES)[y]
        feature, threshold, left, right, value = [], [], [], [], []
        importance = np.zeros(d)

        def new_node(idx):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            counts = onehot[idx].sum(axis=0)
            value.append(counts / counts.sum())
            return len(feature) - 1

        root = new_node(np.arange(n))
        stack = [(root, np.arange(n), 0)]
        while stack:
            node, idx, depth = stack.pop()
            m = len(idx)
            counts = onehot[idx].sum(axis=0)
            if m < min_samples_split or (max_depth is not None and depth >= max_depth) \
                    or np.count_nonzero(counts) <= 1:
                continue
            feats = np.sort(rng.choice(d, size=k, replace=False)) if k < d else np.arange(d)
            xs = X[idx][:, feats]
            order = np.argsort(xs, axis=0, kind="stable")
            sx = np.take_along_axis(xs, order, axis=0)
            cum = np.cumsum(onehot[idx][order], axis=0)  # (m, k, C)
            left_c = cum[:-1]
            right_c = counts - left_c
            nl = np.arange(1, m)[:, None]
            score = (nl * _gini_from_counts(left_c) + (m - nl) * _gini_from_counts(right_c)) / m
            valid = sx[1:] > sx[:-1]
            score = np.where(valid, score, np.inf)
            best = score.min()
            # equal-impurity splits are common in small nodes; prefer the widest gap
            # between neighbouring values so the choice does not depend on column order
            gap = np.where(score == best, sx[1:] - sx[:-1], -np.inf)
            flat = int(np.argmax(gap))
            parent_gini = float(_gini_from_counts(counts))
            if not np.isfinite(best) or best >= parent_gini - 1e-12:
                continue
            pos, j = divmod(flat, len(feats))
            f = int(feats[j])
            thr = 0.5 * (sx[pos, j] + sx[pos + 1, j])
            if thr >= sx[pos + 1, j]:  # midpoint of adjacent floats rounds up
                thr = sx[pos, j]
            go_left = X[idx, f] <= thr
            importance[f] += m * parent_gini - m * best
            li, ri = idx[go_left], idx[~go_left]
            feature[node], threshold[node] = f, thr
            left[node] = new_node(li)
            right[node] = new_node(ri)
            stack.append((right[node], ri, depth + 1))
            stack.append((left[node], li, depth + 1))
        return cls(feature, threshold, left, right, value, importance)

    def apply(self, X) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        active = self.feature[node] >= 0
        while active.any():
            i = np.flatnonzero(active)
            nd = node[i]
            go_left = X[i, self.feature[nd]] <= self.threshold[nd]
            node[i] = np.where(go_left, self.left[nd], self.right[nd])
            active[i] = self.feature[node[i]] >= 0
        return node

    def predict_proba(self, X) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_json(self) -> dict:
        return {
            "feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
            "left": self.left.tolist(), "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_json(cls, d) -> DecisionTree:
        return cls(d["feature"], d["threshold"], d["left"], d["right"], d["value"])


class RandomForest:
    """Bootstrap-aggregated Gini trees; probabilities are tree-vote frequencies."""

    def __init__(self, trees, features=FEATURE_NAMES, n_channels=None):
        self.trees = list(trees)
        self.features = tuple(features)
        self.n_channels = n_channels

    @classmethod
    def fit(cls, X, y, n_trees=100, max_depth=None, seed=0, max_features="sqrt",
            features=FEATURE_NAMES, n_channels=None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        rng = np.random.default_rng(seed)
        trees = []
        for _ in range(n_trees):
            boot = rng.integers(0, len(X), len(X))
            trees.append(DecisionTree.fit(X[boot], y[boot], rng, max_depth, max_features))
        return cls(trees, features, n_channels)

    @property
    def n_nodes(self) -> int:
        return sum(t.n_nodes for t in self.trees)

    def vote_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        votes = np.zeros((len(X), N_CLASSES))
        rows = np.arange(len(X))
        for t in self.trees:
            votes[rows, t.predict_proba(X).argmax(axis=1)] += 1.0
        return votes / len(self.trees)

    def predict_proba(self, windows) -> np.ndarray:
        """Probabilities for raw ``(n, channels, samples)`` windows."""
        return self.vote_proba(extract_features(windows, self.features))

    def feature_importance(self) -> np.ndarray:
        imp = sum(t.importance for t in self.trees if t.importance is not None)
        total = np.sum(imp)
        return imp / total if total > 0 else imp

    def to_json(self) -> dict:
        return {"features": list(self.features), "n_channels": self.n_channels,
                "trees": [t.to_json() for t in self.trees]}

    @classmethod
    def from_json(cls, d) -> RandomForest:
        return cls([DecisionTree.from_json(t) for t in d["trees"]], d["features"],
                   d.get("n_channels"))
