"""
Classification of per-signal feature vectors into healthy, myopathic or
neuropathic.

Three model kinds share one container, :class:`TrainedModel`:

``lda``  shrinkage linear discriminant analysis
``svm``  one-vs-one linear soft-margin SVMs solved by SMO
``bt``   bagged unpruned CART trees (Gini)

Features are standardized with training-set statistics before every model.
Training samples are put in a canonical order (by signal id) first, so a
model does not depend on the order of its training set. Exact ties go to
the lowest class index in the order healthy, myopathic, neuropathic.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .signal_io import CLASSES, Label

logger = logging.getLogger(__name__)

KINDS = ("lda", "svm", "bt")
KIND_NAMES = {"lda": "LDA", "svm": "SVM", "bt": "BT"}
TIE_RTOL = 1e-12


class ClassifierError(ValueError):
    pass


@dataclass(frozen=True)
class LabeledVector:
    features: np.ndarray
    label: Label
    signal_id: str = ""

    def __post_init__(self):
        f = np.asarray(self.features, dtype=float).reshape(-1)
        if not np.all(np.isfinite(f)):
            raise ClassifierError(f"non-finite feature in {self.signal_id or 'vector'}")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "label", Label.parse(self.label))


@dataclass(frozen=True)
class ClassifierConfig:
    lda_shrinkage: float = 0.1
    svm_c: float = 1.0
    svm_tol: float = 1e-9        # KKT violation at which SMO stops
    svm_max_iter: int = 100_000
    n_trees: int = 100

    def __post_init__(self):
        if not 0 <= self.lda_shrinkage <= 1:
            raise ClassifierError("lda_shrinkage must lie in [0, 1]")
        if not self.svm_c > 0 or not self.svm_tol > 0:
            raise ClassifierError("svm_c and svm_tol must be positive")
        if self.n_trees < 1:
            raise ClassifierError("n_trees must be positive")


def _argmax_first(scores: np.ndarray) -> int:
    """Index of the maximum; near-exact ties resolve to the lowest index."""
    top = scores.max()
    return int(np.flatnonzero(scores >= top - TIE_RTOL * max(1.0, abs(top)))[0])


# ---------------------------------------------------------------------------
# splitting

def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split_dataset(vectors: Sequence[LabeledVector], test_fraction: float,
                  seed: int) -> tuple[list[LabeledVector], list[LabeledVector]]:
    """
    Stratified random split.

    Each class sends ``round(test_fraction * class_size)`` members (rounding
    half up) to the test set, drawn without replacement from the class
    sorted by signal id. Deterministic per seed.
    """
    if not 0 <= test_fraction < 1:
        raise ClassifierError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in CLASSES:
        members = sorted((v for v in vectors if v.label is c), key=lambda v: v.signal_id)
        if not members:
            continue
        if len(members) < 2:
            raise ClassifierError(f"class {c.value} has {len(members)} member(s); at least 2 required")
        n_test = _round_half_up(test_fraction * len(members))
        chosen = set(rng.choice(len(members), size=n_test, replace=False).tolist()) if n_test else set()
        for i, v in enumerate(members):
            (test if i in chosen else train).append(v)
    return train, test


# ---------------------------------------------------------------------------
# LDA

def _fit_lda(X: np.ndarray, y: np.ndarray, n_classes: int, shrinkage: float) -> dict:
    N, d = X.shape
    means = np.array([X[y == k].mean(axis=0) for k in range(n_classes)])
    centred = X - means[y]
    cov = centred.T @ centred / max(N - n_classes, 1)
    target = np.trace(cov) / d
    if target <= 0:
        target = 1.0
    shrunk = (1.0 - shrinkage) * cov + shrinkage * target * np.eye(d)
    precision = np.linalg.inv(shrunk)
    priors = np.bincount(y, minlength=n_classes) / N
    return {"means": means, "precision": precision, "priors": priors}


def lda_scores(params: dict, Z: np.ndarray) -> np.ndarray:
    """Discriminants x'P m_k - m_k'P m_k / 2 + log prior_k for standardized rows ``Z``."""
    M, P = params["means"], params["precision"]
    PM = M @ P                                   # P symmetric
    bias = -0.5 * np.einsum("kd,kd->k", PM, M) + np.log(params["priors"])
    return Z @ PM.T + bias


# ---------------------------------------------------------------------------
# SVM

@dataclass(frozen=True)
class BinarySVM:
    w: np.ndarray
    b: float
    objective: float
    dual: float
    iterations: int

    @property
    def gap(self) -> float:
        return self.objective - self.dual


def svm_primal_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, C: float) -> float:
    hinge = np.maximum(0.0, 1.0 - y * (X @ w + b))
    return float(0.5 * np.dot(w, w) + C * hinge.sum())


def _best_bias(w: np.ndarray, X: np.ndarray, y: np.ndarray, C: float) -> float:
    # the primal is convex piecewise linear in b; its minimum sits on a hinge breakpoint
    candidates = np.unique(y - X @ w)
    objs = [svm_primal_objective(w, b, X, y, C) for b in candidates]
    return float(candidates[int(np.argmin(objs))])


def fit_binary_svm(X: np.ndarray, y: np.ndarray, C: float = 1.0, tol: float = 1e-9,
                   max_iter: int = 100_000) -> BinarySVM:
    """
    Linear soft-margin SVM, labels in {-1, +1}.

    Minimizes ``0.5 |w|^2 + C sum hinge(1 - y (w.x + b))`` through its dual
    with SMO and second-order working-set selection. The bias is then set to
    the exact primal minimizer for the final ``w``.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.size
    if set(np.unique(y)) != {-1.0, 1.0}:
        raise ClassifierError("binary SVM needs both +1 and -1 labels")
    K = X @ X.T
    Q = (y[:, None] * y[None, :]) * K
    QD = np.diag(Q).copy()
    tau = 1e-12
    alpha = np.zeros(n)
    G = -np.ones(n)
    it = 0
    for it in range(1, max_iter + 1):
        up = np.where(y > 0, alpha < C, alpha > 0)
        low = np.where(y > 0, alpha > 0, alpha < C)
        minus_yG = -y * G
        if not up.any() or not low.any():
            break
        cand = np.where(up, minus_yG, -np.inf)
        i = int(np.argmax(cand))
        g_max = cand[i]
        g_min = np.where(low, minus_yG, np.inf).min()
        if g_max - g_min < tol:
            break
        b_it = g_max - minus_yG
        quad = QD[i] + QD - 2.0 * y[i] * y * Q[i]
        quad = np.where(quad > 0, quad, tau)
        obj = np.where(low & (b_it > 0), -(b_it ** 2) / quad, np.inf)
        j = int(np.argmin(obj))
        if not np.isfinite(obj[j]):
            break
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            q = QD[i] + QD[j] + 2.0 * Q[i, j]
            q = q if q > 0 else tau
            delta = (-G[i] - G[j]) / q
            diff = ai - aj
            alpha[i] += delta
            alpha[j] += delta
            if diff > 0:
                if alpha[j] < 0:
                    alpha[j], alpha[i] = 0.0, diff
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, -diff
            if diff > 0:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, C - diff
            elif alpha[j] > C:
                alpha[j], alpha[i] = C, C + diff
        else:
            q = QD[i] + QD[j] - 2.0 * Q[i, j]
            q = q if q > 0 else tau
            delta = (G[i] - G[j]) / q
            total = ai + aj
            alpha[i] -= delta
            alpha[j] += delta
            if total > C:
                if alpha[i] > C:
                    alpha[i], alpha[j] = C, total - C
            elif alpha[j] < 0:
                alpha[j], alpha[i] = 0.0, total
            if total > C:
                if alpha[j] > C:
                    alpha[j], alpha[i] = C, total - C
            elif alpha[i] < 0:
                alpha[i], alpha[j] = 0.0, total
        G += Q[i] * (alpha[i] - ai) + Q[j] * (alpha[j] - aj)
    else:
        logger.warning("SMO stopped at max_iter=%d", max_iter)
    w = (alpha * y) @ X
    b = _best_bias(w, X, y, C)
    dual = float(alpha.sum() - 0.5 * alpha @ Q @ alpha)
    return BinarySVM(w, b, svm_primal_objective(w, b, X, y, C), dual, it)


def _pairs(n_classes: int) -> list[tuple[int, int]]:
    return [(a, b) for a in range(n_classes) for b in range(a + 1, n_classes)]


def _fit_svm(X, y, n_classes, config: ClassifierConfig) -> dict:
    W, B = [], []
    for a, b in _pairs(n_classes):
        mask = (y == a) | (y == b)
        yy = np.where(y[mask] == a, 1.0, -1.0)
        m = fit_binary_svm(X[mask], yy, config.svm_c, config.svm_tol, config.svm_max_iter)
        logger.debug("svm pair (%d,%d): objective %.6g gap %.2e", a, b, m.objective, m.gap)
        W.append(m.w)
        B.append(m.b)
    return {"pairs": _pairs(n_classes), "w": np.array(W), "b": np.array(B)}


def svm_votes(params: dict, Z: np.ndarray, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class vote counts and summed signed margins, each of shape (n, n_classes)."""
    votes = np.zeros((Z.shape[0], n_classes))
    margins = np.zeros((Z.shape[0], n_classes))
    F = Z @ np.asarray(params["w"]).T + np.asarray(params["b"])
    for p, (a, b) in enumerate(params["pairs"]):
        f = F[:, p]
        votes[:, a] += f >= 0
        votes[:, b] += f < 0
        margins[:, a] += f
        margins[:, b] -= f
    return votes, margins


def _svm_decide(votes: np.ndarray, margins: np.ndarray) -> np.ndarray:
    out = np.empty(votes.shape[0], dtype=int)
    for r in range(votes.shape[0]):
        tied = votes[r] == votes[r].max()
        out[r] = _argmax_first(np.where(tied, margins[r], -np.inf))
    return out


# ---------------------------------------------------------------------------
# bagged trees

def _weighted_gini(counts_left: np.ndarray, counts_right: np.ndarray) -> np.ndarray:
    """n_L * gini_L + n_R * gini_R, row-wise."""
    nl = counts_left.sum(axis=1)
    nr = counts_right.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        gl = nl - np.where(nl > 0, (counts_left ** 2).sum(axis=1) / nl, 0.0)
        gr = nr - np.where(nr > 0, (counts_right ** 2).sum(axis=1) / nr, 0.0)
    return gl + gr


def best_gini_split(X: np.ndarray, y: np.ndarray, n_classes: int) -> Optional[tuple[int, float, float]]:
    """
    Best (feature, threshold, weighted impurity) over all features.

    Samples with ``x[f] <= threshold`` go left; the threshold is the
    largest left-hand training value, so splits depend only on ranks.
    Ties keep the lowest feature, then the lowest threshold.
    """
    n, d = X.shape
    best = None
    onehot = np.eye(n_classes)[y]
    total = onehot.sum(axis=0)
    for f in range(d):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        valid = np.flatnonzero(xs[:-1] < xs[1:])
        if valid.size == 0:
            continue
        left = np.cumsum(onehot[order], axis=0)[valid]
        score = _weighted_gini(left, total - left)
        k = int(np.argmin(score))
        if best is None or score[k] < best[2]:
            best = (f, float(xs[valid[k]]), float(score[k]))
    return best


def grow_tree(X: np.ndarray, y: np.ndarray, n_classes: int) -> dict:
    """Unpruned CART tree as flat arrays; leaves have feature -1."""
    feature, threshold, left, right, counts = [], [], [], [], []

    def node(idx: np.ndarray) -> int:
        me = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(np.bincount(y[idx], minlength=n_classes).tolist())
        if idx.size < 2 or np.count_nonzero(counts[me]) == 1:
            return me
        split = best_gini_split(X[idx], y[idx], n_classes)
        if split is None:
            return me
        f, thr, _ = split
        go_left = X[idx, f] <= thr
        feature[me], threshold[me] = f, thr
        left[me] = node(idx[go_left])
        right[me] = node(idx[~go_left])
        return me

    node(np.arange(y.size))
    return {"feature": feature, "threshold": threshold, "left": left, "right": right, "counts": counts}


def tree_leaf(tree: dict, z: np.ndarray) -> int:
    k = 0
    feature, threshold = tree["feature"], tree["threshold"]
    while feature[k] >= 0:
        k = tree["left"][k] if z[feature[k]] <= threshold[k] else tree["right"][k]
    return k


def _fit_trees(X, y, n_classes, config: ClassifierConfig, seed: int) -> dict:
    n = y.size
    trees = []
    for t in range(config.n_trees):
        # per-tree stream keyed on (seed, tree index): independent of training order
        rng = np.random.default_rng([seed, t])
        idx = rng.integers(0, n, size=n)
        trees.append(grow_tree(X[idx], y[idx], n_classes))
    return {"trees": trees}


def tree_votes(params: dict, Z: np.ndarray, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    votes = np.zeros((Z.shape[0], n_classes))
    probs = np.zeros((Z.shape[0], n_classes))
    for r, z in enumerate(Z):
        for tree in params["trees"]:
            c = np.asarray(tree["counts"][tree_leaf(tree, z)], dtype=float)
            votes[r, _argmax_first(c)] += 1
            probs[r] += c / c.sum()
    return votes, probs


# ---------------------------------------------------------------------------
# model container

@dataclass
class TrainedModel:
    kind: str
    classes: tuple[Label, ...]
    mean: np.ndarray
    std: np.ndarray
    params: dict
    config: ClassifierConfig = field(default_factory=ClassifierConfig)
    train_seed: int = 0

    @property
    def n_features(self) -> int:
        return self.mean.size

    def standardize(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ClassifierError(f"expected {self.n_features} features, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise ClassifierError("non-finite feature value")
        return (X - self.mean) / self.std

    def predict_indices(self, X) -> np.ndarray:
        Z = self.standardize(X)
        K = len(self.classes)
        if self.kind == "lda":
            S = lda_scores(self.params, Z)
            return np.array([_argmax_first(s) for s in S], dtype=int)
        if self.kind == "svm":
            return _svm_decide(*svm_votes(self.params, Z, K))
        if self.kind == "bt":
            votes, probs = tree_votes(self.params, Z, K)
            return _svm_decide(votes, probs)
        raise ClassifierError(f"unknown model kind {self.kind!r}")

    def predict_batch(self, X) -> list[Label]:
        return [self.classes[i] for i in self.predict_indices(X)]

    def predict(self, vector) -> Label:
        return self.predict_batch(np.asarray(vector, dtype=float)[None, :])[0]

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "classes": [c.value for c in self.classes],
            "standardization": {"mean": self.mean.tolist(), "std": self.std.tolist()},
            "params": _to_plain(self.params),
            "config": asdict(self.config),
            "train_seed": int(self.train_seed),
        }

    @classmethod
    def from_record(cls, record: dict) -> "TrainedModel":
        kind = record["kind"]
        params = dict(record["params"])
        if kind == "lda":
            params = {k: np.asarray(v, dtype=float) for k, v in params.items()}
        elif kind == "svm":
            params = {"pairs": [tuple(p) for p in params["pairs"]],
                      "w": np.asarray(params["w"], dtype=float), "b": np.asarray(params["b"], dtype=float)}
        elif kind != "bt":
            raise ClassifierError(f"unknown model kind {kind!r}")
        std = record["standardization"]
        return cls(kind, tuple(Label.parse(c) for c in record["classes"]),
                   np.asarray(std["mean"], dtype=float), np.asarray(std["std"], dtype=float),
                   params, ClassifierConfig(**record.get("config", {})), int(record.get("train_seed", 0)))


def _to_plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _canonical(train_set: Sequence[LabeledVector]) -> list[LabeledVector]:
    return sorted(train_set, key=lambda v: (v.signal_id, v.label.index, v.features.tolist()))


def train(kind: str, train_set: Sequence[LabeledVector], config: ClassifierConfig = ClassifierConfig(),
          seed: int = 0) -> TrainedModel:
    """
    Fit one classifier.

    Raises
    ------
    ClassifierError
        On an unknown kind, fewer than two classes, a class too small for
        the kind (LDA needs two members per class), mixed vector lengths or
        non-finite features.
    """
    kind = kind.lower()
    if kind not in KINDS:
        raise ClassifierError(f"unknown model kind {kind!r}; expected one of {KINDS}")
    data = _canonical(train_set)
    if not data:
        raise ClassifierError("empty training set")
    classes = tuple(c for c in CLASSES if any(v.label is c for v in data))
    if len(classes) < 2:
        raise ClassifierError("training set must contain at least two classes")
    try:
        X = np.array([v.features for v in data], dtype=float)
    except ValueError:
        raise ClassifierError("feature vectors differ in length") from None
    if X.ndim != 2 or not np.all(np.isfinite(X)):
        raise ClassifierError("feature vectors must be finite and of equal length")
    y = np.array([classes.index(v.label) for v in data], dtype=int)
    if kind == "lda":
        small = [c.value for k, c in enumerate(classes) if np.count_nonzero(y == k) < 2]
        if small:
            raise ClassifierError(f"LDA needs at least 2 samples per class; too few for {small}")
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std[std == 0] = 1.0
    Z = (X - mean) / std
    K = len(classes)
    if kind == "lda":
        params = _fit_lda(Z, y, K, config.lda_shrinkage)
    elif kind == "svm":
        params = _fit_svm(Z, y, K, config)
    else:
        params = _fit_trees(Z, y, K, config, seed)
    return TrainedModel(kind, classes, mean, std, params, config, seed)


# ---------------------------------------------------------------------------
# evaluation

@dataclass(frozen=True)
class EvalReport:
    """Test-set performance; confusion rows are true classes, columns predictions."""

    accuracy: float
    confusion: np.ndarray
    predict_time_s: Optional[float]
    per_class_recall: dict[Label, Optional[float]]
    kind: str = ""
    predictions: tuple[tuple[str, Label, Label], ...] = ()

    @property
    def n_test(self) -> int:
        return int(self.confusion.sum())

    @property
    def n_correct(self) -> int:
        return int(np.trace(self.confusion))

    def to_record(self) -> dict:
        rec = {
            "kind": self.kind,
            "classes": [c.value for c in CLASSES],
            "n_test": self.n_test,
            "n_correct": self.n_correct,
            "accuracy": self.accuracy,
            "confusion": self.confusion.astype(int).tolist(),
            "per_class_recall": {c.value: r for c, r in self.per_class_recall.items()},
            "predictions": [{"signal_id": s, "true": t.value, "predicted": p.value}
                            for s, t, p in self.predictions],
        }
        if self.predict_time_s is not None:
            rec["predict_time_ms"] = self.predict_time_s * 1000.0
        return rec

    @classmethod
    def from_record(cls, record: dict) -> "EvalReport":
        t = record.get("predict_time_ms")
        return cls(float(record["accuracy"]), np.asarray(record["confusion"], dtype=int),
                   None if t is None else t / 1000.0,
                   {Label.parse(k): v for k, v in record["per_class_recall"].items()},
                   record.get("kind", ""),
                   tuple((p["signal_id"], Label.parse(p["true"]), Label.parse(p["predicted"]))
                         for p in record.get("predictions", [])))


def report_from_predictions(truth: Sequence[Label], predicted: Sequence[Label], predict_time_s=None,
                            kind: str = "", signal_ids: Optional[Sequence[str]] = None) -> EvalReport:
    if len(truth) != len(predicted):
        raise ClassifierError("truth and predictions differ in length")
    if not truth:
        raise ClassifierError("empty test set")
    confusion = np.zeros((len(CLASSES), len(CLASSES)), dtype=int)
    for t, p in zip(truth, predicted):
        confusion[t.index, p.index] += 1
    rows = confusion.sum(axis=1)
    recall = {c: (float(confusion[k, k] / rows[k]) if rows[k] else None) for k, c in enumerate(CLASSES)}
    ids = signal_ids if signal_ids is not None else [""] * len(truth)
    return EvalReport(float(np.trace(confusion) / confusion.sum()), confusion, predict_time_s, recall, kind,
                      tuple(zip(ids, truth, predicted)))


def evaluate(model: TrainedModel, test_set: Sequence[LabeledVector]) -> EvalReport:
    """Accuracy, confusion and wall-clock time of one batch prediction over ``test_set``."""
    if not test_set:
        raise ClassifierError("empty test set")
    X = np.array([v.features for v in test_set])
    start = time.perf_counter()
    predicted = model.predict_batch(X)
    elapsed = time.perf_counter() - start
    return report_from_predictions([v.label for v in test_set], predicted, elapsed, model.kind,
                                   [v.signal_id for v in test_set])


def format_percent(fraction: float) -> str:
    return f"{100.0 * fraction:.2f}%"
