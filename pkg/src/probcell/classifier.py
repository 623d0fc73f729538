"""Probabilistic binary classifiers over proposal features.

The default model is a bagged forest of binary decision trees: each tree
trains on a bootstrap resample of the same size, split search considers a
random subset of ceil(sqrt(d)) features per node and picks the split with
the best gini impurity decrease (candidate thresholds are midpoints of
consecutive sorted unique values; ties resolve to the lowest feature index,
then the lowest threshold). Nodes split until pure or below 2 samples, with
no depth limit. A leaf predicts its positive fraction and the forest
predicts the mean over trees, so outputs live in [0, 1].

The comparison model is a small rectifier MLP (hidden widths 50, 50, 20, 20,
logistic output) trained with minibatch adaptive-moment updates on the
binary cross-entropy; the returned weights are those of the epoch with the
best held-out accuracy.

Everything is deterministic given the seed: tree t uses seed + t, so trees
could be built in parallel without changing the result.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .coords import CoordSet
from .errors import DimensionMismatch, NonFiniteLoss, SingleClass
from .features import FeatureSpec, extract_features

FOREST_FORMAT = "probcell-forest"
MLP_FORMAT = "probcell-mlp"


# ---------------------------------------------------------------------------
# random forest
# ---------------------------------------------------------------------------

@dataclass
class Tree:
    feature: np.ndarray    # int, -1 marks a leaf
    threshold: np.ndarray  # float
    left: np.ndarray       # int child index
    right: np.ndarray      # int child index
    n_pos: np.ndarray      # label counts reaching the node
    n_total: np.ndarray


@dataclass
class ForestModel:
    n_features: int
    trees: list[Tree]
    seed: int

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionMismatch(
                f"expected {self.n_features} feature columns, got {X.shape[1] if X.ndim == 2 else X.shape}"
            )
        acc = np.zeros(X.shape[0], dtype=np.float64)
        for tree in self.trees:
            acc += _tree_predict(tree, X)
        return acc / len(self.trees)


def _gini_best_split(values: np.ndarray, labels: np.ndarray):
    """Best split along one feature as an exact rational impurity, or None.

    The weighted child gini equals 2/n * (posL*negL/nL + posR*negR/nR), so
    splits are compared through the integer fraction (num, den) of the
    bracketed term; exact arithmetic keeps the documented tie-break (lowest
    threshold, then lowest feature index at the caller) independent of float
    rounding. Thresholds are midpoints between consecutive distinct sorted
    values. Returns (num, den, threshold).
    """
    order = np.argsort(values, kind="stable")
    sv = values[order]
    sy = labels[order].astype(np.int64)
    boundary = np.nonzero(sv[:-1] < sv[1:])[0]
    if boundary.size == 0:
        return None
    n = sv.size
    pos_prefix = np.cumsum(sy)
    n_left = boundary.astype(np.int64) + 1
    n_right = n - n_left
    pos_left = pos_prefix[boundary]
    pos_right = pos_prefix[-1] - pos_left
    neg_left = n_left - pos_left
    neg_right = n_right - pos_right
    num = pos_left * neg_left * n_right + pos_right * neg_right * n_left
    den = n_left * n_right
    score = num / den
    near = np.nonzero(score <= score.min() + 1e-9 * (1.0 + abs(score.min())))[0]
    best_k = None
    for k in near:  # exact fraction comparison over the float near-minimum set
        if best_k is None or int(num[k]) * int(den[best_k]) < int(num[best_k]) * int(den[k]):
            best_k = k
    b = boundary[best_k]
    thr = 0.5 * (sv[b] + sv[b + 1])
    if thr >= sv[b + 1]:  # adjacent floats: keep the split between the two values
        thr = sv[b]
    return int(num[best_k]), int(den[best_k]), float(thr)


def _build_tree(X, y, rng, n_sub):
    feature, threshold, left, right, n_pos, n_total = [], [], [], [], [], []

    def new_node():
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        n_pos.append(0.0)
        n_total.append(0.0)
        return len(feature) - 1

    d = X.shape[1]
    stack = [(new_node(), np.arange(X.shape[0]))]
    while stack:
        node, idx = stack.pop()
        labels = y[idx]
        pos = float(labels.sum())
        tot = float(idx.size)
        n_pos[node] = pos
        n_total[node] = tot
        if tot < 2 or pos == 0.0 or pos == tot:
            continue
        feats = np.sort(rng.choice(d, size=min(n_sub, d), replace=False))
        best = None
        for f in feats:
            found = _gini_best_split(X[idx, f], labels)
            if found is None:
                continue
            num, den, thr = found
            if best is None or num * best[1] < best[0] * den:
                best = (num, den, int(f), thr)
        if best is None:
            continue
        _, _, f, thr = best
        go_left = X[idx, f] <= thr
        li, ri = new_node(), new_node()
        feature[node] = f
        threshold[node] = thr
        left[node] = li
        right[node] = ri
        # push right first so the left branch is processed next (stable RNG order)
        stack.append((ri, idx[~go_left]))
        stack.append((li, idx[go_left]))
    return Tree(
        feature=np.asarray(feature, dtype=np.int64),
        threshold=np.asarray(threshold, dtype=np.float64),
        left=np.asarray(left, dtype=np.int64),
        right=np.asarray(right, dtype=np.int64),
        n_pos=np.asarray(n_pos, dtype=np.float64),
        n_total=np.asarray(n_total, dtype=np.float64),
    )


def _tree_predict(tree: Tree, X: np.ndarray) -> np.ndarray:
    node = np.zeros(X.shape[0], dtype=np.int64)
    active = tree.feature[node] >= 0
    while active.any():
        idx = np.nonzero(active)[0]
        nd = node[idx]
        go_left = X[idx, tree.feature[nd]] <= tree.threshold[nd]
        node[idx] = np.where(go_left, tree.left[nd], tree.right[nd])
        active[idx] = tree.feature[node[idx]] >= 0
    return tree.n_pos[node] / tree.n_total[node]


def train_forest(
    X,
    labels,
    seed: int,
    n_trees: int = 128,
    n_feature_subset: int | None = None,
    bootstrap: bool = True,
) -> ForestModel:
    """Train the bagged gini forest.

    n_feature_subset defaults to ceil(sqrt(d)). bootstrap=False trains every
    tree on the data as given (used by the split-oracle tests).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be (n, d) with one label per row")
    if np.unique(y).size < 2:
        raise SingleClass("need at least one example of each class")
    d = X.shape[1]
    n_sub = n_feature_subset if n_feature_subset is not None else math.ceil(math.sqrt(d))
    trees = []
    for t in range(n_trees):
        rng = np.random.default_rng(seed + t)
        if bootstrap:
            idx = rng.integers(0, X.shape[0], size=X.shape[0])
            trees.append(_build_tree(X[idx], y[idx], rng, n_sub))
        else:
            trees.append(_build_tree(X, y, rng, n_sub))
    return ForestModel(n_features=d, trees=trees, seed=seed)


# ---------------------------------------------------------------------------
# MLP
# ---------------------------------------------------------------------------

DEFAULT_HIDDEN = (50, 50, 20, 20)


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    seed: int

    @property
    def n_features(self) -> int:
        return self.weights[0].shape[0]

    def logits(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionMismatch(
                f"expected {self.n_features} feature columns, got {X.shape[1] if X.ndim == 2 else X.shape}"
            )
        a = X
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            a = np.maximum(a @ W + b, 0.0)
        return (a @ self.weights[-1] + self.biases[-1]).ravel()

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return _sigmoid(self.logits(X))


def _sigmoid(z):
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def init_mlp(n_features: int, seed: int, hidden=DEFAULT_HIDDEN) -> MlpModel:
    rng = np.random.default_rng(seed)
    sizes = [n_features, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(weights=weights, biases=biases, seed=seed)


def mlp_loss_and_grads(model: MlpModel, X, y):
    """Mean binary cross-entropy and its gradients for every weight and bias."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    acts = [X]
    a = X
    for W, b in zip(model.weights[:-1], model.biases[:-1]):
        a = np.maximum(a @ W + b, 0.0)
        acts.append(a)
    z = (a @ model.weights[-1] + model.biases[-1]).ravel()
    # stable BCE on logits
    loss = float(np.mean(np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))))
    n = X.shape[0]
    delta = ((_sigmoid(z) - y) / n)[:, None]
    grad_w = [None] * len(model.weights)
    grad_b = [None] * len(model.biases)
    grad_w[-1] = acts[-1].T @ delta
    grad_b[-1] = delta.sum(axis=0)
    back = delta @ model.weights[-1].T
    for layer in range(len(model.weights) - 2, -1, -1):
        back = back * (acts[layer + 1] > 0)
        grad_w[layer] = acts[layer].T @ back
        grad_b[layer] = back.sum(axis=0)
        if layer > 0:
            back = back @ model.weights[layer].T
    return loss, grad_w, grad_b


def train_mlp(
    X,
    labels,
    seed: int,
    epochs: int = 200,
    hidden=DEFAULT_HIDDEN,
    learning_rate: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    batch_size: int = 32,
    validation=None,
    validation_fraction: float = 0.2,
) -> MlpModel:
    """Minibatch adaptive-moment training, returning the best-validation epoch.

    ``validation`` may be an explicit (X_val, y_val) pair; otherwise a
    stratified fraction of the training data is held out for epoch
    selection. epochs=0 returns the freshly initialized model.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if np.unique(y).size < 2:
        raise SingleClass("need at least one example of each class")
    model = init_mlp(X.shape[1], seed, hidden)
    if epochs == 0:
        return model
    rng = np.random.default_rng(seed)
    if validation is not None:
        X_tr, y_tr = X, y
        X_val = np.asarray(validation[0], dtype=np.float64)
        y_val = np.asarray(validation[1], dtype=np.float64).reshape(-1)
    else:
        val_idx = []
        for cls in (0, 1):
            cls_idx = np.nonzero(y == cls)[0]
            cls_idx = cls_idx[rng.permutation(cls_idx.size)]
            take = int(round(validation_fraction * cls_idx.size))
            if cls_idx.size >= 2:
                take = max(take, 1)
            val_idx.extend(cls_idx[:take].tolist())
        val_mask = np.zeros(y.size, dtype=bool)
        val_mask[val_idx] = True
        if val_mask.all() or np.unique(y[~val_mask]).size < 2:
            raise SingleClass("not enough data to carve a validation split")
        X_tr, y_tr = X[~val_mask], y[~val_mask]
        X_val, y_val = X[val_mask], y[val_mask]

    b1, b2 = betas
    eps = 1e-8
    m_w = [np.zeros_like(W) for W in model.weights]
    v_w = [np.zeros_like(W) for W in model.weights]
    m_b = [np.zeros_like(b) for b in model.biases]
    v_b = [np.zeros_like(b) for b in model.biases]
    step = 0
    best_acc = -1.0
    best = None
    n = X_tr.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start : start + batch_size]
            loss, grad_w, grad_b = mlp_loss_and_grads(model, X_tr[batch], y_tr[batch])
            if not np.isfinite(loss):
                raise NonFiniteLoss(f"training loss became {loss}")
            step += 1
            corr1 = 1.0 - b1**step
            corr2 = 1.0 - b2**step
            for k in range(len(model.weights)):
                m_w[k] = b1 * m_w[k] + (1 - b1) * grad_w[k]
                v_w[k] = b2 * v_w[k] + (1 - b2) * grad_w[k] ** 2
                model.weights[k] -= learning_rate * (m_w[k] / corr1) / (np.sqrt(v_w[k] / corr2) + eps)
                m_b[k] = b1 * m_b[k] + (1 - b1) * grad_b[k]
                v_b[k] = b2 * v_b[k] + (1 - b2) * grad_b[k] ** 2
                model.biases[k] -= learning_rate * (m_b[k] / corr1) / (np.sqrt(v_b[k] / corr2) + eps)
        acc = float(np.mean((model.predict_proba(X_val) >= 0.5) == (y_val == 1)))
        if acc > best_acc:
            best_acc = acc
            best = ([W.copy() for W in model.weights], [b.copy() for b in model.biases])
    model.weights, model.biases = best
    return model


# ---------------------------------------------------------------------------
# shared surface
# ---------------------------------------------------------------------------

def predict_proba(model, X) -> np.ndarray:
    """Probability per row from either model type; values in [0, 1]."""
    return model.predict_proba(np.asarray(X, dtype=np.float64))


def classify_proposals(
    model,
    maps,
    proposals: CoordSet,
    spec: FeatureSpec = FeatureSpec(),
) -> CoordSet:
    """Attach cell probabilities to proposals (positives are p >= 0.5)."""
    if len(proposals) == 0:
        return CoordSet.empty()
    X = extract_features(maps, proposals, spec)
    p = predict_proba(model, X)
    return CoordSet(proposals.coords.copy(), p=p, dm_value=None if proposals.dm_value is None else proposals.dm_value.copy())


def save_model(model, path) -> None:
    path = Path(path)
    if isinstance(model, ForestModel):
        payload = {
            "format": FOREST_FORMAT,
            "version": 1,
            "n_features": model.n_features,
            "seed": model.seed,
            "trees": [
                {
                    "feature": t.feature.tolist(),
                    "threshold": t.threshold.tolist(),
                    "left": t.left.tolist(),
                    "right": t.right.tolist(),
                    "n_pos": t.n_pos.tolist(),
                    "n_total": t.n_total.tolist(),
                }
                for t in model.trees
            ],
        }
    elif isinstance(model, MlpModel):
        payload = {
            "format": MLP_FORMAT,
            "version": 1,
            "seed": model.seed,
            "layers": [[int(W.shape[0]), int(W.shape[1])] for W in model.weights],
            "weights": [W.ravel().tolist() for W in model.weights],
            "biases": [b.tolist() for b in model.biases],
        }
    else:
        raise TypeError(f"unknown model type {type(model)!r}")
    path.write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_model(path):
    payload = json.loads(Path(path).read_text())
    fmt = payload.get("format")
    if fmt == FOREST_FORMAT:
        trees = [
            Tree(
                feature=np.asarray(t["feature"], dtype=np.int64),
                threshold=np.asarray(t["threshold"], dtype=np.float64),
                left=np.asarray(t["left"], dtype=np.int64),
                right=np.asarray(t["right"], dtype=np.int64),
                n_pos=np.asarray(t["n_pos"], dtype=np.float64),
                n_total=np.asarray(t["n_total"], dtype=np.float64),
            )
            for t in payload["trees"]
        ]
        return ForestModel(n_features=int(payload["n_features"]), trees=trees, seed=int(payload["seed"]))
    if fmt == MLP_FORMAT:
        weights = [
            np.asarray(w, dtype=np.float64).reshape(shape)
            for w, shape in zip(payload["weights"], payload["layers"])
        ]
        biases = [np.asarray(b, dtype=np.float64) for b in payload["biases"]]
        return MlpModel(weights=weights, biases=biases, seed=int(payload["seed"]))
    raise ValueError(f"unknown model format {fmt!r}")
