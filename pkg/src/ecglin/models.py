"""Interpretable classifiers, evaluation metrics and the compact model format.

Linear models are one-vs-rest heads fitted by damped Newton iterations with
Armijo backtracking; the tree is a greedy CART on class-weighted Gini.
Learned linear weights are rounded to float32 at the end of training so the
in-memory model and its serialized form predict identically.
"""
from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import special, stats
from threadpoolctl import threadpool_limits

from . import AAMI_CLASSES

logger = logging.getLogger(__name__)

MODEL_KINDS = ("logistic_regression", "linear_svc", "decision_tree")
KIND_CODES = {k: i + 1 for i, k in enumerate(MODEL_KINDS)}
MAGIC = b"ECGLM\0"
FORMAT_VERSION = 1
HEADER = struct.Struct("<6sHBBHI")
NODE = struct.Struct("<hhhd")
EFFICIENCY_EPS = 1e-6

LOGISTIC_C = 1.0
SVC_C = 0.1
TREE_DEPTH = 5
GRAD_TOL = 1e-4
MAX_EPOCHS = 1000


# --------------------------------------------------------------------------
# Labels and class weights


def class_order(labels: Sequence, order: Sequence | None = None) -> tuple:
    """Classes present in ``labels``, in ``order`` (AAMI order by default, else sorted)."""
    present = set(labels)
    ref = tuple(order) if order is not None else AAMI_CLASSES
    out = tuple(c for c in ref if c in present)
    rest = sorted(present - set(out), key=str)
    return out + tuple(rest)


def encode_labels(labels: Sequence, classes: Sequence) -> np.ndarray:
    idx = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([idx[l] for l in labels], dtype=np.int64)
    except KeyError as e:
        raise ValueError(f"label {e.args[0]!r} not among classes {tuple(classes)}") from None


def balanced_class_weights(y: np.ndarray, n_classes: int) -> np.ndarray:
    """n / (K n_c) per class; absent classes get 0."""
    counts = np.bincount(y, minlength=n_classes).astype(float)
    present = counts > 0
    w = np.zeros(n_classes)
    w[present] = len(y) / (present.sum() * counts[present])
    return w


def sample_weights(y: np.ndarray, class_weights: np.ndarray) -> np.ndarray:
    """Per-sample weights normalized to mean 1, so overall scale of class weights is irrelevant."""
    s = np.asarray(class_weights, dtype=float)[y]
    m = s.mean()
    if m <= 0:
        raise ValueError("class weights must be positive for present classes")
    return s / m


# --------------------------------------------------------------------------
# Objectives. theta = [w, b]; the intercept is not regularized.


def _augment(x: np.ndarray) -> np.ndarray:
    return np.hstack([x, np.ones((x.shape[0], 1))])


def logistic_objective(theta, xa, ypm, s, c):
    """Weighted L2 logistic loss ``c * sum s log(1 + exp(-y z)) + |w|^2 / 2`` and its gradient."""
    z = xa @ theta
    m = ypm * z
    w = theta[:-1]
    val = c * np.sum(s * np.logaddexp(0.0, -m)) + 0.5 * np.dot(w, w)
    g = xa.T @ (c * s * -ypm * special.expit(-m))
    g[:-1] += w
    return val, g


def _logistic_hessian(theta, xa, ypm, s, c):
    p = special.expit(xa @ theta)
    d = c * s * p * (1 - p)
    h = (xa * d[:, None]).T @ xa
    h[np.diag_indices(len(theta) - 1)] += 1.0
    h[-1, -1] += 1e-10
    return h


def squared_hinge_objective(theta, xa, ypm, s, c):
    """``c * sum s max(0, 1 - y z)^2 + |w|^2 / 2`` and its gradient."""
    m = np.maximum(0.0, 1.0 - ypm * (xa @ theta))
    w = theta[:-1]
    val = c * np.sum(s * m**2) + 0.5 * np.dot(w, w)
    g = xa.T @ (-2.0 * c * s * ypm * m)
    g[:-1] += w
    return val, g


def _hinge_hessian(theta, xa, ypm, s, c):
    active = (1.0 - ypm * (xa @ theta)) > 0
    xs = xa[active]
    h = 2.0 * c * (xs * s[active][:, None]).T @ xs
    h[np.diag_indices(len(theta) - 1)] += 1.0
    h[-1, -1] += 1e-10
    return h


@dataclass
class NewtonResult:
    theta: np.ndarray
    converged: bool
    history: list[float]
    grad_norm: float


def newton_minimize(fun, hess, theta0, args, tol=GRAD_TOL, max_iter=MAX_EPOCHS) -> NewtonResult:
    theta = np.array(theta0, dtype=float)
    val, g = fun(theta, *args)
    history = [float(val)]
    for _ in range(max_iter):
        gn = float(np.linalg.norm(g))
        if gn < tol:
            return NewtonResult(theta, True, history, gn)
        h = hess(theta, *args)
        try:
            p = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            p = -g
        slope = float(g @ p)
        if slope >= 0:
            p, slope = -g, -float(g @ g)
        t = 1.0
        while True:
            cand = theta + t * p
            cval, cg = fun(cand, *args)
            if cval <= val + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-12:
                return NewtonResult(theta, gn < tol, history, gn)
        theta, val, g = cand, cval, cg
        history.append(float(val))
    gn = float(np.linalg.norm(g))
    return NewtonResult(theta, gn < tol, history, gn)


# --------------------------------------------------------------------------
# Models


@dataclass
class LinearModel:
    kind: str
    classes: tuple
    coef: np.ndarray
    intercept: np.ndarray
    class_weights: np.ndarray
    hyperparams: dict = field(default_factory=dict)
    feature_names: list[str] | None = None
    converged: bool = True
    history: list[list[float]] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return self.coef.shape[1]

    def decision_function(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[1]}")
        return x @ self.coef.T + self.intercept

    def predict_index(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.decision_function(x), axis=1)

    def predict(self, x: np.ndarray) -> list:
        return [self.classes[i] for i in self.predict_index(x)]


@dataclass
class TreeModel:
    classes: tuple
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_features: int
    class_weights: np.ndarray
    hyperparams: dict = field(default_factory=dict)
    feature_names: list[str] | None = None
    importances: np.ndarray | None = None
    kind: str = "decision_tree"
    converged: bool = True

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def depth(self) -> int:
        if self.n_nodes == 0:
            return 0
        depth = np.zeros(self.n_nodes, dtype=int)
        for i in range(self.n_nodes):
            if self.feature[i] >= 0:
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def leaf_index(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {x.shape[1]}")
        node = np.zeros(x.shape[0], dtype=np.int64)
        rows = np.arange(x.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            r = rows[inner]
            go_left = x[r, f[inner]] <= self.threshold[node[inner]]
            node[r] = np.where(go_left, self.left[node[r]], self.right[node[r]])

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return self.value[self.leaf_index(x)]

    def predict_index(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)

    def predict(self, x: np.ndarray) -> list:
        return [self.classes[i] for i in self.predict_index(x)]


Model = LinearModel | TreeModel


def _fit_linear(kind, x, labels, c, class_weights, order, feature_names, tol, max_iter) -> LinearModel:
    x = np.asarray(x, dtype=float)
    classes = class_order(labels, order)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    y = encode_labels(labels, classes)
    k = len(classes)
    cw = balanced_class_weights(y, k) if class_weights is None else np.asarray(class_weights, dtype=float)
    s = sample_weights(y, cw)
    xa = _augment(x)
    fun, hess = (logistic_objective, _logistic_hessian) if kind == "logistic_regression" else (
        squared_hinge_objective, _hinge_hessian)
    coef = np.zeros((k, x.shape[1]))
    intercept = np.zeros(k)
    converged, history = True, []
    # a binary problem still gets one head per class so prediction is uniform
    for ci in range(k):
        ypm = np.where(y == ci, 1.0, -1.0)
        res = newton_minimize(fun, hess, np.zeros(x.shape[1] + 1), (xa, ypm, s, c), tol, max_iter)
        if not res.converged:
            logger.warning("%s head %s stopped with |grad| %.2e", kind, classes[ci], res.grad_norm)
        converged &= res.converged
        coef[ci], intercept[ci] = res.theta[:-1], res.theta[-1]
        history.append(res.history)
    return LinearModel(
        kind, classes, coef.astype(np.float32).astype(float), intercept.astype(np.float32).astype(float), cw,
        {"C": c, "tol": tol, "max_iter": max_iter}, feature_names, converged, history,
    )


def train_logistic_regression(x, labels, c=LOGISTIC_C, class_weights=None, order=None, feature_names=None,
                              tol=GRAD_TOL, max_iter=MAX_EPOCHS) -> LinearModel:
    return _fit_linear("logistic_regression", x, labels, c, class_weights, order, feature_names, tol, max_iter)


def train_linear_svc(x, labels, c=SVC_C, class_weights=None, order=None, feature_names=None,
                     tol=GRAD_TOL, max_iter=MAX_EPOCHS) -> LinearModel:
    return _fit_linear("linear_svc", x, labels, c, class_weights, order, feature_names, tol, max_iter)


# --------------------------------------------------------------------------
# CART


def gini(counts: np.ndarray) -> np.ndarray:
    """Gini impurity of (weighted) class count rows."""
    counts = np.atleast_2d(counts)
    tot = counts.sum(axis=1)
    safe = np.where(tot > 0, tot, 1.0)
    return np.where(tot > 0, 1.0 - np.sum((counts / safe[:, None]) ** 2, axis=1), 0.0)


@dataclass(frozen=True)
class Split:
    feature: int
    threshold: float
    impurity: float  # weighted mean child impurity


def best_split(x: np.ndarray, onehot_w: np.ndarray) -> Split | None:
    """Exhaustive threshold search; ties keep the lowest feature, then lowest threshold."""
    n, d = x.shape
    total = onehot_w.sum(axis=0)
    wt = total.sum()
    best = None
    for j in range(d):
        order = np.argsort(x[:, j], kind="stable")
        xs = x[order, j]
        valid = np.nonzero(xs[:-1] < xs[1:])[0]
        if valid.size == 0:
            continue
        cum = np.cumsum(onehot_w[order], axis=0)[valid]
        right = total - cum
        lw, rw = cum.sum(axis=1), right.sum(axis=1)
        imp = (lw * gini(cum) + rw * gini(right)) / wt
        i = int(np.argmin(imp))
        if best is None or imp[i] < best.impurity - 1e-12:
            lo, hi = xs[valid[i]], xs[valid[i] + 1]
            thr = lo + (hi - lo) / 2.0
            if not lo <= thr < hi:
                thr = lo
            best = Split(j, float(thr), float(imp[i]))
    return best


def train_decision_tree(x, labels, max_depth=TREE_DEPTH, class_weights=None, order=None,
                        feature_names=None) -> TreeModel:
    x = np.asarray(x, dtype=float)
    classes = class_order(labels, order)
    y = encode_labels(labels, classes)
    k = len(classes)
    cw = balanced_class_weights(y, k) if class_weights is None else np.asarray(class_weights, dtype=float)
    onehot = np.zeros((len(y), k))
    onehot[np.arange(len(y)), y] = cw[y]
    feat, thr, left, right, value = [], [], [], [], []
    importances = np.zeros(x.shape[1])
    root_w = onehot.sum()

    def new_node(counts):
        feat.append(-1)
        thr.append(0.0)
        left.append(-1)
        right.append(-1)
        tot = counts.sum()
        value.append(counts / tot if tot > 0 else np.full(k, 1.0 / k))
        return len(feat) - 1

    stack = [(np.arange(len(y)), 0, new_node(onehot.sum(axis=0)))]
    while stack:
        rows, depth, node = stack.pop()
        counts = onehot[rows].sum(axis=0)
        parent_imp = float(gini(counts)[0])
        if depth >= max_depth or parent_imp <= 0.0 or len(rows) < 2:
            continue
        sp = best_split(x[rows], onehot[rows])
        if sp is None or sp.impurity >= parent_imp - 1e-12:
            continue
        go_left = x[rows, sp.feature] <= sp.threshold
        lrows, rrows = rows[go_left], rows[~go_left]
        feat[node], thr[node] = sp.feature, sp.threshold
        importances[sp.feature] += counts.sum() * (parent_imp - sp.impurity) / root_w
        l = new_node(onehot[lrows].sum(axis=0))
        r = new_node(onehot[rrows].sum(axis=0))
        left[node], right[node] = l, r
        # right pushed first so the left subtree gets the lower node ids
        stack.append((rrows, depth + 1, r))
        stack.append((lrows, depth + 1, l))
    tot = importances.sum()
    if tot > 0:
        importances = importances / tot
    return TreeModel(
        classes, np.array(feat), np.array(thr), np.array(left), np.array(right),
        np.array(value, dtype=np.float32).astype(float).reshape(-1, k), x.shape[1], cw,
        {"max_depth": max_depth}, feature_names, importances,
    )


TRAINERS: dict[str, Callable[..., Model]] = {
    "logistic_regression": train_logistic_regression,
    "linear_svc": train_linear_svc,
    "decision_tree": train_decision_tree,
}


def train_model(kind: str, x, labels, **kwargs) -> tuple[Model, float]:
    """Fit ``kind`` and return (model, wall-clock training seconds)."""
    if kind not in TRAINERS:
        raise ValueError(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
    t0 = time.perf_counter()
    model = TRAINERS[kind](x, labels, **kwargs)
    return model, time.perf_counter() - t0


# --------------------------------------------------------------------------
# Serialization


def serialize_model(model: Model) -> bytes:
    """16-byte header then little-endian payload (float32 linear weights, packed tree nodes)."""
    k = len(model.classes)
    if isinstance(model, LinearModel):
        payload = np.hstack([model.coef.ravel(), model.intercept]).astype("<f4")
        head = HEADER.pack(MAGIC, FORMAT_VERSION, KIND_CODES[model.kind], k, model.n_features, payload.size)
        return head + payload.tobytes()
    parts = [HEADER.pack(MAGIC, FORMAT_VERSION, KIND_CODES[model.kind], k, model.n_features, model.n_nodes)]
    for i in range(model.n_nodes):
        parts.append(NODE.pack(int(model.feature[i]), int(model.left[i]), int(model.right[i]),
                               float(model.threshold[i])))
        parts.append(model.value[i].astype("<f4").tobytes())
    return b"".join(parts)


def model_schema(model: Model) -> dict:
    return {
        "kind": model.kind,
        "classes": list(model.classes),
        "n_features": model.n_features,
        "feature_names": model.feature_names,
        "class_weights": [float(v) for v in model.class_weights],
        "hyperparams": model.hyperparams,
        "converged": bool(model.converged),
        "format_version": FORMAT_VERSION,
    }


def deserialize_model(blob: bytes, schema: dict) -> Model:
    if len(blob) < HEADER.size:
        raise ValueError("model blob shorter than its header")
    magic, version, code, k, d, count = HEADER.unpack_from(blob)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise ValueError("not a model blob of a supported version")
    kind = MODEL_KINDS[code - 1]
    classes = tuple(schema["classes"])
    cw = np.asarray(schema.get("class_weights", np.ones(k)), dtype=float)
    names = schema.get("feature_names")
    hp = schema.get("hyperparams", {})
    if kind != "decision_tree":
        flat = np.frombuffer(blob, dtype="<f4", count=count, offset=HEADER.size).astype(float)
        return LinearModel(kind, classes, flat[: k * d].reshape(k, d), flat[k * d :], cw, hp, names,
                           schema.get("converged", True))
    off = HEADER.size
    feat, left, right, thr, value = [], [], [], [], []
    for _ in range(count):
        f, l, r, t = NODE.unpack_from(blob, off)
        off += NODE.size
        value.append(np.frombuffer(blob, dtype="<f4", count=k, offset=off).astype(float))
        off += 4 * k
        feat.append(f)
        left.append(l)
        right.append(r)
        thr.append(t)
    return TreeModel(classes, np.array(feat, dtype=int), np.array(thr), np.array(left, dtype=int),
                     np.array(right, dtype=int), np.array(value).reshape(-1, k), d, cw, hp, names)


def save_model(model: Model, path: str | Path) -> int:
    """Write ``model.bin`` plus ``model.bin.json``; returns the weights-only byte count."""
    path = Path(path)
    blob = serialize_model(model)
    path.write_bytes(blob)
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(model_schema(model), indent=1))
    return len(blob)


def load_model(path: str | Path) -> Model:
    path = Path(path)
    schema = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    return deserialize_model(path.read_bytes(), schema)


def model_size_bytes(model: Model) -> int:
    return len(serialize_model(model))


# --------------------------------------------------------------------------
# Timing


@dataclass(frozen=True)
class Latency:
    batched_ms_per_sample: float
    single_row_ms: float
    batch_rows: int
    repeats: int


def time_inference(model: Model, x: np.ndarray, repeats: int = 30, single_rows: int = 200) -> Latency:
    """Median batch time / rows, and median single-row time; one BLAS thread, warmup excluded."""
    x = np.ascontiguousarray(x, dtype=float)
    repeats = max(30, repeats)
    with threadpool_limits(limits=1):
        model.predict_index(x)
        batch = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model.predict_index(x)
            batch.append((time.perf_counter() - t0) / len(x))
        rows = x[: min(single_rows, len(x))]
        model.predict_index(rows[:1])
        single = []
        for r in rows:
            r = r[None, :]
            t0 = time.perf_counter()
            model.predict_index(r)
            single.append(time.perf_counter() - t0)
    return Latency(1e3 * float(np.median(batch)), 1e3 * float(np.median(single)), len(x), repeats)


# --------------------------------------------------------------------------
# Metrics


@dataclass
class ClassMetrics:
    accuracy: float
    precision_w: float
    recall_w: float
    f1_w: float
    per_class_recall: dict
    per_class_precision: dict
    support: dict
    confusion: list[list[int]]


def confusion_matrix(y_true: np.ndarray, y_pred: np.ndarray, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def classification_metrics(true_labels: Sequence, pred_labels: Sequence, classes: Sequence) -> ClassMetrics:
    """Accuracy and support-weighted precision/recall/F1 over classes present in ``true_labels``."""
    if len(true_labels) == 0:
        raise ValueError("empty evaluation set")
    classes = tuple(classes)
    yt = encode_labels(true_labels, classes)
    yp = encode_labels(pred_labels, classes)
    cm = confusion_matrix(yt, yp, len(classes))
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    tp = np.diag(cm).astype(float)
    prec = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    rec = np.divide(tp, support, out=np.full_like(tp, np.nan), where=support > 0)
    present = support > 0
    for c, p in zip(classes, present):
        if not p:
            logger.warning("class %s absent from evaluation set; recall undefined", c)
    r0 = np.nan_to_num(rec)
    f1 = np.divide(2 * prec * r0, prec + r0, out=np.zeros_like(tp), where=(prec + r0) > 0)
    wts = support / support.sum()
    return ClassMetrics(
        accuracy=float(tp.sum() / support.sum()),
        precision_w=float(np.sum(wts * prec)),
        recall_w=float(np.sum(wts[present] * rec[present])),
        f1_w=float(np.sum(wts * f1)),
        per_class_recall={c: (None if np.isnan(v) else float(v)) for c, v in zip(classes, rec)},
        per_class_precision={c: float(v) for c, v in zip(classes, prec)},
        support={c: int(v) for c, v in zip(classes, support)},
        confusion=cm.tolist(),
    )


def efficiency_score(f1: float, acc: float, train_s: float, infer_ms: float, size_kb: float,
                     eps: float = EFFICIENCY_EPS) -> float:
    return (0.6 * f1 + 0.4 * acc) / (0.4 * train_s + 0.4 * infer_ms + 0.2 * size_kb + eps)


@dataclass
class EvalReport:
    kind: str
    accuracy: float
    precision_w: float
    recall_w: float
    f1_w: float
    per_class_recall: dict
    train_time_s: float
    infer_time_ms_per_sample: float
    infer_single_row_ms: float
    model_size_kb: float
    bundle_size_kb: float | None
    efficiency_score: float
    confusion: list[list[int]]
    cv_mean: float | None = None
    cv_std: float | None = None
    ci_low: float | None = None
    ci_high: float | None = None

    def table_row(self) -> dict:
        """The deterministic metric fields plus the machine-dependent cost fields."""
        return {
            "acc": self.accuracy,
            "f1_weighted": self.f1_w,
            "train_s": self.train_time_s,
            "infer_ms": self.infer_time_ms_per_sample,
            "size_kb": self.model_size_kb,
            "efficiency": self.efficiency_score,
        }

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: Model, x: np.ndarray, labels: Sequence, train_time_s: float, repeats: int = 30,
             bundle_bytes: int | None = None, measure_latency: bool = True) -> EvalReport:
    if len(labels) == 0:
        raise ValueError("empty test set")
    pred = model.predict(x)
    m = classification_metrics(labels, pred, model.classes)
    if measure_latency:
        lat = time_inference(model, x, repeats)
        infer_ms, single_ms = lat.batched_ms_per_sample, lat.single_row_ms
    else:
        infer_ms = single_ms = float("nan")
    size_kb = model_size_bytes(model) / 1024.0
    return EvalReport(
        kind=model.kind,
        accuracy=m.accuracy,
        precision_w=m.precision_w,
        recall_w=m.recall_w,
        f1_w=m.f1_w,
        per_class_recall=m.per_class_recall,
        train_time_s=train_time_s,
        infer_time_ms_per_sample=infer_ms,
        infer_single_row_ms=single_ms,
        model_size_kb=size_kb,
        bundle_size_kb=None if bundle_bytes is None else bundle_bytes / 1024.0,
        efficiency_score=efficiency_score(m.f1_w, m.accuracy, train_time_s, infer_ms, size_kb),
        confusion=m.confusion,
    )


# --------------------------------------------------------------------------
# Cross-validation


def stratified_kfold(labels: Sequence, n_folds: int = 5, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """(train, test) index pairs; each class is shuffled then dealt round-robin to folds."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    fold_of = np.empty(len(labels), dtype=np.int64)
    for c in class_order(labels.tolist()):
        idx = np.nonzero(labels == c)[0]
        if len(idx) < n_folds:
            raise ValueError(f"class {c!r} has {len(idx)} samples, fewer than {n_folds} folds")
        idx = rng.permutation(idx)
        fold_of[idx] = np.arange(len(idx)) % n_folds
    all_idx = np.arange(len(labels))
    return [(all_idx[fold_of != f], all_idx[fold_of == f]) for f in range(n_folds)]


def stratified_split(labels: Sequence, test_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; each class contributes round(fraction * n_c) test rows."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    test = []
    for c in class_order(labels.tolist()):
        idx = rng.permutation(np.nonzero(labels == c)[0])
        n_test = int(round(test_fraction * len(idx)))
        if len(idx) >= 2:
            n_test = min(max(n_test, 1), len(idx) - 1)
        test.extend(idx[:n_test].tolist())
    test = np.sort(np.array(test, dtype=np.int64))
    train = np.setdiff1d(np.arange(len(labels)), test)
    return train, test


@dataclass(frozen=True)
class ConfidenceInterval:
    mean: float
    std: float
    low: float
    high: float
    n: int


def t_confidence_interval(scores: Sequence[float], level: float = 0.95) -> ConfidenceInterval:
    """mean +/- t_{n-1} * s / sqrt(n) with the sample standard deviation."""
    s = np.asarray(scores, dtype=float)
    n = len(s)
    if n < 2:
        raise ValueError("need at least two scores")
    mu = float(s.mean())
    sd = float(s.std(ddof=1))
    half = float(stats.t.ppf(0.5 + level / 2, n - 1)) * sd / math.sqrt(n)
    return ConfidenceInterval(mu, sd, mu - half, mu + half, n)


def cross_validate_ci(fold_score: Callable[[np.ndarray, np.ndarray], float], labels: Sequence,
                      n_folds: int = 5, seed: int = 0) -> tuple[list[float], ConfidenceInterval]:
    """Run ``fold_score(train_idx, test_idx)`` on stratified folds and summarize with a t-interval."""
    scores = [float(fold_score(tr, te)) for tr, te in stratified_kfold(labels, n_folds, seed)]
    return scores, t_confidence_interval(scores)


# --------------------------------------------------------------------------
# Importances


def feature_importances(model: Model) -> np.ndarray:
    if isinstance(model, LinearModel):
        if model.coef.size == 0:
            return np.zeros(model.n_features)
        return np.max(np.abs(model.coef), axis=0)
    if model.importances is None:
        return np.zeros(model.n_features)
    return np.asarray(model.importances, dtype=float)


def feature_importance_report(model: Model, names: Sequence[str] | None = None) -> list[tuple[str, float]]:
    """(name, importance) sorted by decreasing importance; stable for ties."""
    imp = feature_importances(model)
    names = list(names or model.feature_names or [f"f{i}" for i in range(len(imp))])
    order = np.argsort(-imp, kind="stable")
    return [(names[i], float(imp[i])) for i in order]
