"""Exact Shapley attributions for tree ensembles.

The value of a coalition S is the tree-conditional expectation: at a split on
a feature in S follow x, otherwise average both children weighted by how many
background rows reach each of them (even weights below a node no background
row reaches). ``tree_shap`` computes these values in polynomial time;
``brute_force_shapley`` enumerates coalitions and serves as its oracle.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from stockhybrid.core import FeatureVector, SchemaError, StockError
from stockhybrid.gbt import Split, TreeEnsemble, TreeNode

MAX_BRUTE_FORCE_FEATURES = 12


@dataclass(frozen=True)
class Attribution:
    names: tuple[str, ...]
    values: np.ndarray  # the explained feature values
    phi: np.ndarray
    base_value: float
    prediction: float

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, (float(p) for p in self.phi)))

    @property
    def residual(self) -> float:
        """Local accuracy gap, zero up to rounding."""
        return self.prediction - self.base_value - float(np.sum(self.phi))


@dataclass
class _Flat:
    feature: np.ndarray
    threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    cover: np.ndarray

    def is_leaf(self, i: int) -> bool:
        return self.left[i] < 0

    def goes_left(self, i: int, x: np.ndarray) -> bool:
        v = x[self.feature[i]]
        return bool(self.missing_left[i]) if math.isnan(v) else v <= self.threshold[i]

    def child_weights(self, i: int) -> tuple[float, float]:
        lc, rc = self.cover[self.left[i]], self.cover[self.right[i]]
        total = lc + rc
        if total <= 0:
            return 0.5, 0.5
        return lc / total, rc / total


def _flatten(tree: TreeNode, background: np.ndarray) -> _Flat:
    feats, thr, mleft, left, right, val, cover = [], [], [], [], [], [], []

    def add(node: TreeNode, rows: np.ndarray) -> int:
        i = len(feats)
        feats.append(-1)
        thr.append(math.nan)
        mleft.append(False)
        left.append(-1)
        right.append(-1)
        val.append(0.0)
        cover.append(float(rows.size))
        if isinstance(node, Split):
            col = background[rows, node.feature]
            go = np.where(np.isnan(col), node.missing_goes_left, col <= node.threshold)
            feats[i], thr[i], mleft[i] = node.feature, node.threshold, node.missing_goes_left
            left[i] = add(node.left, rows[go])
            right[i] = add(node.right, rows[~go])
        else:
            val[i] = node.value
        return i

    add(tree, np.arange(background.shape[0]))
    return _Flat(np.array(feats), np.array(thr), np.array(mleft), np.array(left),
                 np.array(right), np.array(val), np.array(cover))


def _check(ensemble: TreeEnsemble, x: FeatureVector, background: Sequence[FeatureVector]) -> np.ndarray:
    ensemble.check(x)
    if len(background) == 0:
        raise StockError("background set must be non-empty")
    for b in background:
        ensemble.check(b)
    return np.vstack([b.values for b in background])


# Path bookkeeping: each element is [feature, zero_fraction, one_fraction, weight].

def _extend(path: list, pz: float, po: float, feature: int) -> list:
    m = [e[:] for e in path]
    depth = len(m)
    m.append([feature, pz, po, 1.0 if depth == 0 else 0.0])
    for i in range(depth - 1, -1, -1):
        m[i + 1][3] += po * m[i][3] * (i + 1) / (depth + 1)
        m[i][3] = pz * m[i][3] * (depth - i) / (depth + 1)
    return m


def _unwind(path: list, k: int) -> list:
    m = [e[:] for e in path]
    depth = len(m) - 1
    n = m[depth][3]
    o, z = m[k][2], m[k][1]
    for j in range(depth - 1, -1, -1):
        if o != 0:
            t = m[j][3]
            m[j][3] = n * (depth + 1) / ((j + 1) * o)
            n = t - m[j][3] * z * (depth - j) / (depth + 1)
        else:
            m[j][3] = m[j][3] * (depth + 1) / (z * (depth - j))
    for j in range(k, depth):
        m[j][0], m[j][1], m[j][2] = m[j + 1][0], m[j + 1][1], m[j + 1][2]
    return m[:depth]


def _unwound_sum(path: list, k: int) -> float:
    return sum(e[3] for e in _unwind(path, k))


def _tree_phi(flat: _Flat, x: np.ndarray, phi: np.ndarray, scale: float) -> None:
    def recurse(node: int, path: list, pz: float, po: float, feature: int) -> None:
        if pz == 0.0 and po == 0.0:
            return  # nothing reaches this subtree under any coalition
        m = _extend(path, pz, po, feature)
        if flat.is_leaf(node):
            v = flat.value[node] * scale
            for i in range(1, len(m)):
                phi[m[i][0]] += _unwound_sum(m, i) * (m[i][2] - m[i][1]) * v
            return
        wl, wr = flat.child_weights(node)
        if flat.goes_left(node, x):
            hot, cold, wh, wc = flat.left[node], flat.right[node], wl, wr
        else:
            hot, cold, wh, wc = flat.right[node], flat.left[node], wr, wl
        f = int(flat.feature[node])
        iz = io = 1.0
        for k in range(1, len(m)):
            if m[k][0] == f:
                iz, io = m[k][1], m[k][2]
                m = _unwind(m, k)
                break
        recurse(hot, m, iz * wh, io, f)
        recurse(cold, m, iz * wc, 0.0, f)

    recurse(0, [], 1.0, 1.0, -1)


def _expected(flat: _Flat, node: int, x: np.ndarray, known: frozenset) -> float:
    if flat.is_leaf(node):
        return float(flat.value[node])
    if int(flat.feature[node]) in known:
        nxt = flat.left[node] if flat.goes_left(node, x) else flat.right[node]
        return _expected(flat, nxt, x, known)
    wl, wr = flat.child_weights(node)
    return wl * _expected(flat, flat.left[node], x, known) + wr * _expected(flat, flat.right[node], x, known)


def tree_shap(ensemble: TreeEnsemble, x: FeatureVector, background: Sequence[FeatureVector]) -> Attribution:
    """Shapley values of ``ensemble`` at ``x`` with background-occupancy expectations."""
    bg = _check(ensemble, x, background)
    p = len(ensemble.feature_names)
    phi = np.zeros(p)
    base = ensemble.base_score
    for tree in ensemble.trees:
        flat = _flatten(tree, bg)
        base += ensemble.learning_rate * _expected(flat, 0, x.values, frozenset())
        _tree_phi(flat, x.values, phi, ensemble.learning_rate)
    pred = float(ensemble.predict_array(x.values[None, :])[0])
    return Attribution(ensemble.feature_names, x.values.copy(), phi, float(base), pred)


def brute_force_shapley(ensemble: TreeEnsemble, x: FeatureVector,
                        background: Sequence[FeatureVector]) -> Attribution:
    """Shapley values by enumerating every coalition (at most 12 features)."""
    bg = _check(ensemble, x, background)
    p = len(ensemble.feature_names)
    if p > MAX_BRUTE_FORCE_FEATURES:
        raise StockError(f"brute-force Shapley refuses {p} > {MAX_BRUTE_FORCE_FEATURES} features")
    flats = [_flatten(t, bg) for t in ensemble.trees]

    def value(known: frozenset) -> float:
        return ensemble.base_score + ensemble.learning_rate * sum(
            _expected(f, 0, x.values, known) for f in flats)

    values = {}
    for size in range(p + 1):
        for subset in itertools.combinations(range(p), size):
            values[frozenset(subset)] = value(frozenset(subset))
    phi = np.zeros(p)
    fact = math.factorial
    for j in range(p):
        others = [i for i in range(p) if i != j]
        for size in range(p):
            w = fact(size) * fact(p - size - 1) / fact(p)
            for subset in itertools.combinations(others, size):
                s = frozenset(subset)
                phi[j] += w * (values[s | {j}] - values[s])
    pred = float(ensemble.predict_array(x.values[None, :])[0])
    return Attribution(ensemble.feature_names, x.values.copy(), phi, values[frozenset()], pred)


def aggregate_importance(attrs: Sequence[Attribution]) -> list[tuple[str, float]]:
    """Mean |phi| per feature, largest first; ties ordered by feature name."""
    if not attrs:
        raise StockError("no attributions to aggregate")
    names = attrs[0].names
    for a in attrs[1:]:
        if a.names != names:
            raise SchemaError("attributions use inconsistent feature schemas")
    mean_abs = np.mean(np.abs(np.vstack([a.phi for a in attrs])), axis=0)
    ranked = sorted(zip(names, (float(v) for v in mean_abs)), key=lambda kv: kv[0])
    ranked.sort(key=lambda kv: -kv[1])
    return ranked
