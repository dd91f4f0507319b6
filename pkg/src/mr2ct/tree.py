"""Weighted, confidence-rated binary decision trees.

A tree routes a feature vector to a leaf whose confidence vector holds the
normalized class-weight proportions of the training rows that reached it.
Split search is exhaustive: at every node, every feature is scanned and the
candidate thresholds are the midpoints of consecutive distinct sorted values.
The split minimizing the weighted child impurity (1 - sum p^2) wins, with
ties broken to the lowest feature index, then the lowest threshold.

The split budget max_splits is global and spent best-first: the pending
split with the largest weighted impurity decrease is applied next, so a
small budget still buys the most useful structure.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DataError, ModelError

LEAF = -1


def gini(proportions: Sequence[float]) -> float:
    """Node impurity 1 - sum_t p_t^2 for class proportions p."""
    p = np.asarray(proportions, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("proportions must be non-negative")
    total = p.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"proportions must sum to 1 within 1e-9, got {total!r}")
    return float(1.0 - np.sum(p * p))


@dataclass(frozen=True)
class TreeConfig:
    max_splits: int = 400
    min_leaf: int = 5
    threshold_strategy: str = "exhaustive"  # or "quantile"
    quantile_bins: int = 256
    quantile_cutoff: int = 1 << 14

    def __post_init__(self):
        if self.max_splits < 1:
            raise ValueError("max_splits must be >= 1")
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.threshold_strategy not in ("exhaustive", "quantile"):
            raise ValueError(f"unknown threshold strategy {self.threshold_strategy!r}")
        if self.quantile_bins < 2:
            raise ValueError("quantile_bins must be >= 2")


@dataclass(frozen=True)
class DecisionTree:
    """Flat-array binary tree; node 0 is the root.

    feature[i] is the split feature of node i, or -1 for a leaf.  Routing
    goes left when x[feature] <= threshold.  confidence[i] holds the
    class-weight proportions of the training rows at node i (leaves carry
    the prediction; internal values are diagnostics).
    """

    feature: np.ndarray    # (nodes,) int32
    threshold: np.ndarray  # (nodes,) float64, nan at leaves
    left: np.ndarray       # (nodes,) int32
    right: np.ndarray      # (nodes,) int32
    confidence: np.ndarray # (nodes, n_labels) float64
    n_features: int
    n_labels: int

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def n_splits(self) -> int:
        return int(np.sum(self.feature >= 0))

    def leaf_ids(self) -> np.ndarray:
        return np.flatnonzero(self.feature == LEAF)

    def leaf_index(self, x: np.ndarray) -> np.ndarray:
        """Leaf node id for every row of x, shape (n,)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.n_features:
            raise ModelError(
                f"feature vector length {x.shape[1]} does not match tree ({self.n_features})"
            )
        node = np.zeros(x.shape[0], dtype=np.int64)
        while True:
            feat = self.feature[node]
            pending = np.flatnonzero(feat >= 0)
            if pending.size == 0:
                return node
            cur = node[pending]
            go_left = x[pending, feat[pending]] <= self.threshold[cur]
            node[pending] = np.where(go_left, self.left[cur], self.right[cur])

    def confidence_matrix(self, x: np.ndarray) -> np.ndarray:
        """(n, n_labels) leaf confidence vectors for the rows of x."""
        return self.confidence[self.leaf_index(x)]

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "n_labels": self.n_labels,
            "feature": self.feature.tolist(),
            "threshold": [None if np.isnan(t) else t for t in self.threshold.tolist()],
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "confidence": self.confidence.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        threshold = np.array(
            [np.nan if t is None else float(t) for t in d["threshold"]], dtype=np.float64
        )
        return cls(
            feature=np.asarray(d["feature"], dtype=np.int32),
            threshold=threshold,
            left=np.asarray(d["left"], dtype=np.int32),
            right=np.asarray(d["right"], dtype=np.int32),
            confidence=np.asarray(d["confidence"], dtype=np.float64),
            n_features=int(d["n_features"]),
            n_labels=int(d["n_labels"]),
        )


def tree_confidence(tree: DecisionTree, x: np.ndarray) -> np.ndarray:
    """Confidence vector over labels for a single feature vector."""
    return tree.confidence_matrix(np.atleast_2d(x))[0]


def _class_weight_matrix(labels: np.ndarray, weights: np.ndarray, n_labels: int) -> np.ndarray:
    cw = np.zeros((labels.shape[0], n_labels), dtype=np.float64)
    cw[np.arange(labels.shape[0]), labels] = weights
    return cw


def _node_confidence(class_weights: np.ndarray) -> np.ndarray:
    total = class_weights.sum()
    if total <= 0:
        return np.full(class_weights.shape, 1.0 / class_weights.shape[0])
    return class_weights / total


def _best_split(
    x: np.ndarray, cw: np.ndarray, config: TreeConfig
) -> tuple[float, int, float] | None:
    """Best (impurity decrease, feature, threshold) over all features, or None.

    The decrease is the unnormalized weighted form
    W*G(node) - W_L*G(L) - W_R*G(R), which equals
    sum_t cwL_t^2/W_L + sum_t cwR_t^2/W_R - sum_t cw_t^2/W.
    """
    m = x.shape[0]
    totals = cw.sum(axis=0)
    w_total = totals.sum()
    parent_term = float(np.sum(totals**2) / w_total)
    best: tuple[float, int, float] | None = None
    for f in range(x.shape[1]):
        col = x[:, f]
        order = np.argsort(col, kind="stable")
        xv = col[order]
        boundary = np.flatnonzero(xv[:-1] < xv[1:])
        if boundary.size == 0:
            continue
        if (
            config.threshold_strategy == "quantile"
            and boundary.size + 1 > config.quantile_cutoff
        ):
            qs = np.quantile(xv, np.linspace(0, 1, config.quantile_bins + 1)[1:-1])
            pos = np.searchsorted(xv, qs, side="right") - 1
            boundary = np.unique(pos[np.isin(pos, boundary)])
            if boundary.size == 0:
                continue
        counts_left = boundary + 1
        counts_right = m - counts_left
        valid = (counts_left >= config.min_leaf) & (counts_right >= config.min_leaf)
        if not valid.any():
            continue
        boundary = boundary[valid]
        cum = np.cumsum(cw[order], axis=0)
        cw_left = cum[boundary]
        cw_right = totals - cw_left
        w_left = cw_left.sum(axis=1)
        w_right = cw_right.sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            term = np.where(w_left > 0, np.sum(cw_left**2, axis=1) / w_left, 0.0)
            term += np.where(w_right > 0, np.sum(cw_right**2, axis=1) / w_right, 0.0)
        k = int(np.argmax(term))
        decrease = float(term[k]) - parent_term
        if decrease <= 1e-12 * w_total:
            continue  # no real impurity decrease at any admissible threshold
        lo, hi = xv[boundary[k]], xv[boundary[k] + 1]
        thr = 0.5 * (lo + hi)
        if not (lo < thr < hi):
            thr = float(lo)  # adjacent floats: keep the partition exact
        if best is None or decrease > best[0]:
            best = (decrease, f, float(thr))
    return best


def train_tree(
    x: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray | None = None,
    config: TreeConfig = TreeConfig(),
    seed: int = 0,
    n_labels: int | None = None,
) -> DecisionTree:
    """Grow a tree greedily under the global best-first split budget.

    Branch growth stops on purity, on min_leaf (children must keep at least
    min_leaf rows), or when the budget is exhausted.  ``seed`` is accepted
    for interface symmetry with the other trainers; the algorithm itself is
    deterministic.
    """
    del seed
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = x.shape[0]
    if n == 0:
        raise DataError("cannot train a tree on zero samples")
    if labels.shape[0] != n:
        raise DataError("labels length does not match sample count")
    if weights is None:
        weights = np.ones(n, dtype=np.float64)
    else:
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if weights.shape[0] != n or np.any(weights < 0):
            raise DataError("weights must be non-negative, one per sample")
    if weights.sum() <= 0:
        raise DataError("total sample weight must be positive")
    if n_labels is None:
        n_labels = int(labels.max()) + 1
    if labels.min() < 0 or labels.max() >= n_labels:
        raise DataError(f"labels must lie in [0, {n_labels})")

    cw_all = _class_weight_matrix(labels, weights, n_labels)

    feature: list[int] = []
    threshold: list[float] = []
    left: list[int] = []
    right: list[int] = []
    confidence: list[np.ndarray] = []
    node_rows: dict[int, np.ndarray] = {}

    def new_node(rows: np.ndarray) -> int:
        node_id = len(feature)
        feature.append(LEAF)
        threshold.append(np.nan)
        left.append(LEAF)
        right.append(LEAF)
        confidence.append(_node_confidence(cw_all[rows].sum(axis=0)))
        node_rows[node_id] = rows
        return node_id

    heap: list[tuple[float, int, int, int, float]] = []
    push_seq = 0

    def consider(node_id: int) -> None:
        nonlocal push_seq
        rows = node_rows[node_id]
        if rows.size < 2 * config.min_leaf or rows.size < 2:
            return
        class_present = cw_all[rows].sum(axis=0) > 0
        if class_present.sum() <= 1:
            return  # pure node
        found = _best_split(x[rows], cw_all[rows], config)
        if found is None:
            return
        decrease, f, thr = found
        heapq.heappush(heap, (-decrease, push_seq, node_id, f, thr))
        push_seq += 1

    root_rows = np.arange(n, dtype=np.int64)
    consider(new_node(root_rows))

    splits_done = 0
    while heap and splits_done < config.max_splits:
        _, _, node_id, f, thr = heapq.heappop(heap)
        rows = node_rows[node_id]
        go_left = x[rows, f] <= thr
        left_id = new_node(rows[go_left])
        right_id = new_node(rows[~go_left])
        feature[node_id] = f
        threshold[node_id] = thr
        left[node_id] = left_id
        right[node_id] = right_id
        splits_done += 1
        consider(left_id)
        consider(right_id)

    return DecisionTree(
        feature=np.asarray(feature, dtype=np.int32),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int32),
        right=np.asarray(right, dtype=np.int32),
        confidence=np.vstack(confidence),
        n_features=x.shape[1],
        n_labels=n_labels,
    )
