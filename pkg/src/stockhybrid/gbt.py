"""Gradient-boosted regression trees with squared-error loss.

Trees grow leaf-wise (best-first) under joint ``num_leaves``/``max_depth``
caps, split greedily on exact thresholds, and learn a per-split direction for
missing (NaN) values. Ties break on lower feature index, then lower threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from stockhybrid.core import FeatureVector, SchemaError, StockError


class TrainingError(StockError, ValueError):
    pass


@dataclass(frozen=True)
class GbtHyperParams:
    num_leaves: int = 3
    max_depth: int = 3  # <= 0 means unlimited
    min_data_in_leaf: int = 1
    learning_rate: float = 0.1
    nrounds: int = 60

    def __post_init__(self):
        if self.num_leaves < 2:
            raise TrainingError("num_leaves must be >= 2")
        if not 0 < self.learning_rate <= 1:
            raise TrainingError("learning_rate must lie in (0, 1]")
        if self.nrounds < 1 or self.min_data_in_leaf < 1:
            raise TrainingError("nrounds and min_data_in_leaf must be >= 1")


@dataclass(frozen=True)
class Leaf:
    value: float
    count: int


@dataclass(frozen=True)
class Split:
    feature: int
    feature_name: str
    threshold: float
    missing_goes_left: bool
    left: "TreeNode"
    right: "TreeNode"
    count: int


TreeNode = Union[Leaf, Split]


@dataclass(frozen=True)
class SplitCandidate:
    threshold: float
    gain: float
    missing_goes_left: bool
    n_left: int
    n_right: int


def best_split(x: np.ndarray, residuals: np.ndarray, min_data_in_leaf: int = 1) -> SplitCandidate | None:
    """Exact greedy search over midpoints between consecutive distinct values.

    Gain is the drop in sum of squared errors around the node mean. Missing
    values go to whichever side scores higher (left on ties); when the node
    has none, unseen missing values follow the larger child.
    """
    x = np.asarray(x, dtype=float)
    r = np.asarray(residuals, dtype=float)
    if x.size < 2:
        return None
    miss = np.isnan(x)
    n_miss = int(miss.sum())
    s_miss = float(r[miss].sum()) if n_miss else 0.0
    order = np.argsort(x[~miss], kind="stable")
    xs = x[~miss][order]
    rs = r[~miss][order]
    n_present = xs.size
    if n_present < 2:
        return None
    cut = np.nonzero(xs[1:] > xs[:-1])[0]  # left block is xs[:i+1]
    if cut.size == 0:
        return None
    n = x.size
    total = float(r.sum())
    parent = total * total / n
    csum = np.cumsum(rs)
    tol = _tie_tol(r)
    nl_base = cut + 1
    sl_base = csum[cut]
    best = None
    options = (True, False) if n_miss else (None,)
    for miss_left in options:
        if miss_left:
            nl, sl = nl_base + n_miss, sl_base + s_miss
        else:
            nl, sl = nl_base.astype(float), sl_base
        nr = n - nl
        sr = total - sl
        ok = (nl >= min_data_in_leaf) & (nr >= min_data_in_leaf)
        if not np.any(ok):
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = sl * sl / nl + sr * sr / nr - parent
        gain = np.where(ok, gain, -np.inf)
        i = _first_max(gain, tol)  # lowest threshold among ties
        if best is None or gain[i] > best[0] + tol:
            best = (float(gain[i]), i, miss_left, int(nl[i]), int(nr[i]))
    if best is None:
        return None
    gain, i, miss_left, nl, nr = best
    k = cut[i]
    threshold = 0.5 * (xs[k] + xs[k + 1])
    if miss_left is None:
        miss_left = nl >= nr
    return SplitCandidate(float(threshold), gain, bool(miss_left), nl, nr)


TIE_RTOL = 1e-12  # gains this close, relative to the node's sum of squares, count as ties


def _tie_tol(r: np.ndarray) -> float:
    return TIE_RTOL * float(np.dot(r, r))


def _first_max(gain: np.ndarray, tol: float) -> int:
    return int(np.argmax(gain >= gain.max() - tol))


def _route_left(column: np.ndarray, threshold: float, missing_goes_left: bool) -> np.ndarray:
    miss = np.isnan(column)
    return np.where(miss, missing_goes_left, column <= threshold)


@dataclass
class _Open:
    rows: np.ndarray
    depth: int
    split: tuple | None = None  # (gain, feature, candidate), cached
    done: bool = False


def _leaf_split(X: np.ndarray, r: np.ndarray, node: _Open, hp: GbtHyperParams):
    max_depth = hp.max_depth if hp.max_depth > 0 else math.inf
    if node.depth >= max_depth or node.rows.size < 2 * hp.min_data_in_leaf:
        return None
    best = None
    rr = r[node.rows]
    Xn = X[node.rows]
    has_missing = np.isnan(Xn).any(axis=0)
    tol = _tie_tol(rr)
    dense = _dense_best(Xn, rr, hp.min_data_in_leaf, ~has_missing)
    for j in range(X.shape[1]):
        if has_missing[j]:
            cand = best_split(Xn[:, j], rr, hp.min_data_in_leaf)
        else:
            cand = dense[j]
        if cand is None or cand.gain <= tol:
            continue
        if best is None or cand.gain > best[0] + tol:  # lowest feature among ties
            best = (cand.gain, j, cand)
    return best


def _dense_best(Xn: np.ndarray, r: np.ndarray, min_leaf: int, use: np.ndarray) -> list:
    """``best_split`` for all complete columns at once; same arithmetic, same ties."""
    out: list = [None] * Xn.shape[1]
    cols = np.nonzero(use)[0]
    n = Xn.shape[0]
    if cols.size == 0 or n < 2:
        return out
    sub = Xn[:, cols]
    order = np.argsort(sub, axis=0, kind="stable")
    xs = np.take_along_axis(sub, order, axis=0)
    csum = np.cumsum(r[order], axis=0)
    total = float(r.sum())
    parent = total * total / n
    nl = np.arange(1, n, dtype=float)[:, None]
    nr = n - nl
    sl = csum[:-1]
    sr = total - sl
    valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (nr >= min_leaf)
    gain = np.where(valid, sl * sl / nl + sr * sr / nr - parent, -np.inf)
    idx = np.argmax(gain >= gain.max(axis=0) - _tie_tol(r), axis=0)
    for c, j in enumerate(cols):
        i = idx[c]
        g = gain[i, c]
        if not np.isfinite(g):
            continue
        left, right = int(i) + 1, n - int(i) - 1
        out[j] = SplitCandidate(float(0.5 * (xs[i, c] + xs[i + 1, c])), float(g), left >= right, left, right)
    return out


def grow_tree(X: np.ndarray, r: np.ndarray, hp: GbtHyperParams, names: Sequence[str]) -> TreeNode:
    """One leaf-wise regression tree fitted to residuals ``r``; leaves hold mean residuals."""
    nodes: dict[int, Leaf] = {}
    open_leaves = [(0, _Open(np.arange(X.shape[0]), 0))]
    next_id = 1
    children: dict[int, tuple[int, int, int, SplitCandidate]] = {}
    tol = _tie_tol(r)
    while len(open_leaves) < hp.num_leaves:
        choice = None
        for pos, (nid, leaf) in enumerate(open_leaves):
            if not leaf.done:
                leaf.split = _leaf_split(X, r, leaf, hp)
                leaf.done = True
            if leaf.split is not None and (choice is None or leaf.split[0] > choice[1].split[0] + tol):
                choice = (pos, leaf, nid)
        if choice is None:
            break
        pos, leaf, nid = choice
        _, j, cand = leaf.split
        go_left = _route_left(X[leaf.rows, j], cand.threshold, cand.missing_goes_left)
        left = _Open(leaf.rows[go_left], leaf.depth + 1)
        right = _Open(leaf.rows[~go_left], leaf.depth + 1)
        lid, rid = next_id, next_id + 1
        next_id += 2
        children[nid] = (lid, rid, j, cand)
        open_leaves[pos:pos + 1] = [(lid, left), (rid, right)]
    for nid, leaf in open_leaves:
        nodes[nid] = Leaf(float(np.mean(r[leaf.rows])), int(leaf.rows.size))

    def build(nid: int) -> TreeNode:
        if nid in nodes:
            return nodes[nid]
        lid, rid, j, cand = children[nid]
        left, right = build(lid), build(rid)
        return Split(j, names[j], cand.threshold, cand.missing_goes_left, left, right,
                     _count(left) + _count(right))

    return build(0)


def _count(node: TreeNode) -> int:
    return node.count


def tree_predict(node: TreeNode, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    out = np.empty(X.shape[0])
    for i, row in enumerate(X):
        cur = node
        while isinstance(cur, Split):
            v = row[cur.feature]
            go_left = cur.missing_goes_left if math.isnan(v) else v <= cur.threshold
            cur = cur.left if go_left else cur.right
        out[i] = cur.value
    return out


@dataclass(frozen=True)
class TreeEnsemble:
    base_score: float
    trees: tuple[TreeNode, ...]
    learning_rate: float
    feature_names: tuple[str, ...]
    schema_id: str = field(default="")

    def predict_array(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(self.feature_names):
            raise SchemaError(f"expected {len(self.feature_names)} features, got {X.shape[1]}")
        out = np.full(X.shape[0], self.base_score)
        for tree in self.trees:
            out += self.learning_rate * tree_predict(tree, X)
        return out

    def check(self, x: FeatureVector) -> None:
        if x.schema_id != self.schema_id or x.names != self.feature_names:
            raise SchemaError(f"feature schema {x.schema_id} does not match model schema {self.schema_id}")


def fit_arrays(X: np.ndarray, y: np.ndarray, hp: GbtHyperParams | None = None,
               names: Sequence[str] | None = None, schema_id: str = "") -> TreeEnsemble:
    hp = hp or GbtHyperParams()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise TrainingError("cannot fit on empty data")
    if X.shape[0] != y.size:
        raise TrainingError(f"{X.shape[0]} rows but {y.size} labels")
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    base = float(np.mean(y))
    if y.size == 1:
        return TreeEnsemble(base, (), hp.learning_rate, names, schema_id)
    pred = np.full(y.size, base)
    trees = []
    for _ in range(hp.nrounds):
        tree = grow_tree(X, y - pred, hp, names)
        trees.append(tree)
        pred = pred + hp.learning_rate * tree_predict(tree, X)
    return TreeEnsemble(base, tuple(trees), hp.learning_rate, names, schema_id)


def as_matrix(X: Sequence[FeatureVector]) -> tuple[np.ndarray, tuple[str, ...], str]:
    if not X:
        raise TrainingError("cannot fit on empty data")
    first = X[0]
    for x in X[1:]:
        if x.schema_id != first.schema_id or x.names != first.names:
            raise SchemaError("training rows use inconsistent feature schemas")
    return np.vstack([x.values for x in X]), first.names, first.schema_id


def fit(X: Sequence[FeatureVector], y: Sequence[float], hp: GbtHyperParams | None = None) -> TreeEnsemble:
    """Boost ``hp.nrounds`` trees on residuals of the running prediction, starting at mean(y)."""
    if len(X) != len(y):
        raise TrainingError(f"{len(X)} feature rows but {len(y)} labels")
    mat, names, schema = as_matrix(X)
    return fit_arrays(mat, np.asarray(y, dtype=float), hp, names, schema)


def predict(ensemble: TreeEnsemble, x: FeatureVector) -> float:
    ensemble.check(x)
    return float(ensemble.predict_array(x.values[None, :])[0])


def _node_to_json(node: TreeNode) -> dict:
    if isinstance(node, Leaf):
        return {"leaf": node.value, "count": node.count}
    return {"feature": node.feature, "name": node.feature_name, "threshold": node.threshold,
            "missing_left": node.missing_goes_left, "count": node.count,
            "left": _node_to_json(node.left), "right": _node_to_json(node.right)}


def _node_from_json(d: dict) -> TreeNode:
    if "leaf" in d:
        return Leaf(float(d["leaf"]), int(d["count"]))
    return Split(int(d["feature"]), d["name"], float(d["threshold"]), bool(d["missing_left"]),
                 _node_from_json(d["left"]), _node_from_json(d["right"]), int(d["count"]))


def dumps_ensemble(ensemble: TreeEnsemble) -> str:
    """JSON text; floats are written in shortest round-trip form."""
    return json.dumps({
        "format": "stockhybrid.gbt/1",
        "base_score": ensemble.base_score,
        "learning_rate": ensemble.learning_rate,
        "schema_id": ensemble.schema_id,
        "feature_names": list(ensemble.feature_names),
        "trees": [_node_to_json(t) for t in ensemble.trees],
    })


def loads_ensemble(text: str) -> TreeEnsemble:
    d = json.loads(text)
    if d.get("format") != "stockhybrid.gbt/1":
        raise SchemaError("not a stockhybrid tree ensemble")
    return TreeEnsemble(float(d["base_score"]), tuple(_node_from_json(t) for t in d["trees"]),
                        float(d["learning_rate"]), tuple(d["feature_names"]), d["schema_id"])


def iter_nodes(node: TreeNode, depth: int = 0):
    """Yield (node, depth) pairs in pre-order."""
    yield node, depth
    if isinstance(node, Split):
        yield from iter_nodes(node.left, depth + 1)
        yield from iter_nodes(node.right, depth + 1)
