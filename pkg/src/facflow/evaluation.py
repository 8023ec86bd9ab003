"""Posterior-based evaluation of factor manipulation, plus 2D projection.

An MLP classifier per factor (one hidden layer, softmax output, trained on
raw observations with Adam + cross-entropy) estimates class posteriors.  The
manipulation protocol converts every eligible test sample between every
ordered pair of classes of the manipulated factor and reports, averaged over
all (pair, sample) instances uniformly:

  * posterior of the conversion target before and after, and its delta
  * posterior of each untouched factor's true class before and after

A good factorization shows a large target delta and near-zero deltas on the
untouched factors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import TrainingDivergedError, ValidationError
from .factorize import ClassMeanTable, manipulate
from .flow import FlowModel
from .params import ParameterStore
from .priors import PriorSpec
from .training import TrainConfig, TrainState, adam_step


@dataclass
class MlpConfig:
    hidden: int = 800
    epochs: int = 50
    learning_rate: float = 1e-3
    batch_size: int = 128
    seed: int = 0
    val_fraction: float = 0.2

    def validate(self):
        if self.hidden < 1:
            raise ValidationError("hidden width must be >= 1")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValidationError("val_fraction must lie in [0, 1)")


class MlpClassifier:
    """One-hidden-layer softmax classifier (tanh hidden activation)."""

    def __init__(self, n_features: int, n_classes: int, hidden: int):
        self.n_features = n_features
        self.n_classes = n_classes
        self.hidden = hidden
        self.store = ParameterStore()
        self.store.add("w1", (n_features, hidden))
        self.store.add("b1", (hidden,))
        self.store.add("w2", (hidden, n_classes))
        self.store.add("b2", (n_classes,))
        self.store.finalize()
        self.w1 = self.store.view("w1")
        self.b1 = self.store.view("b1")
        self.w2 = self.store.view("w2")
        self.b2 = self.store.view("b2")
        self.train_accuracy = float("nan")
        self.val_accuracy = float("nan")

    def init_params(self, rng: np.random.Generator):
        self.w1[:] = rng.normal(0.0, 1.0 / np.sqrt(self.n_features), self.w1.shape)
        self.b1[:] = 0.0
        self.w2[:] = rng.normal(0.0, 1.0 / np.sqrt(self.hidden), self.w2.shape)
        self.b2[:] = 0.0

    def _logits(self, X):
        h = np.tanh(X @ self.w1 + self.b1)
        return h @ self.w2 + self.b2, h

    def posteriors(self, x) -> np.ndarray:
        X = np.asarray(x, dtype=np.float64)
        single = X.ndim == 1
        if single:
            X = X[None, :]
        logits, _ = self._logits(X)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        return p[0] if single else p

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.posteriors(x), axis=-1)

    def accuracy(self, X, y) -> float:
        return float(np.mean(self.predict(X) == np.asarray(y)))


def _stratified_split(y: np.ndarray, val_fraction: float, rng: np.random.Generator):
    train_idx, val_idx = [], []
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(idx.size)]
        n_val = int(round(val_fraction * idx.size))
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    return np.concatenate(train_idx), np.concatenate(val_idx)


def train_classifier(features, labels, n_classes: int | None = None,
                     config: MlpConfig | None = None) -> MlpClassifier:
    """Cross-entropy training with a seeded stratified train/val split."""
    config = config or MlpConfig()
    config.validate()
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise ValidationError("features must be (N, D) with one label per row")
    present = np.unique(y)
    if present.size < 2:
        raise ValidationError("need at least two distinct classes to train a classifier")
    if n_classes is None:
        n_classes = int(y.max()) + 1
    if y.min() < 0 or y.max() >= n_classes:
        raise ValidationError("label out of range")

    rng = np.random.default_rng(config.seed)
    clf = MlpClassifier(X.shape[1], n_classes, config.hidden)
    clf.init_params(rng)
    train_idx, val_idx = _stratified_split(y, config.val_fraction, rng)
    Xt, yt = X[train_idx], y[train_idx]
    state = TrainState.fresh(clf.store.size)
    opt = TrainConfig(learning_rate=config.learning_rate, grad_clip=None)
    n = Xt.shape[0]
    for epoch in range(config.epochs):
        perm = np.random.default_rng([config.seed, epoch]).permutation(n)
        for lo in range(0, n, config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            xb, yb = Xt[idx], yt[idx]
            logits, h = clf._logits(xb)
            logits = logits - logits.max(axis=1, keepdims=True)
            expl = np.exp(logits)
            p = expl / expl.sum(axis=1, keepdims=True)
            loss = -float(np.mean(np.log(p[np.arange(yb.size), yb] + 1e-300)))
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"classifier loss became non-finite in epoch {epoch}")
            dlogits = p.copy()
            dlogits[np.arange(yb.size), yb] -= 1.0
            dlogits /= yb.size
            grad = clf.store.zeros()
            gw2 = clf.store.view("w2", grad)
            gw2 += h.T @ dlogits
            gb2 = clf.store.view("b2", grad)
            gb2 += dlogits.sum(axis=0)
            dh = (dlogits @ clf.w2.T) * (1.0 - h * h)
            gw1 = clf.store.view("w1", grad)
            gw1 += xb.T @ dh
            gb1 = clf.store.view("b1", grad)
            gb1 += dh.sum(axis=0)
            adam_step(state, clf.store.flat, grad, opt)
    clf.train_accuracy = clf.accuracy(Xt, yt)
    clf.val_accuracy = clf.accuracy(X[val_idx], y[val_idx]) if val_idx.size else float("nan")
    return clf


@dataclass
class PairRecord:
    from_class: int
    to_class: int
    n: int
    target_before: float
    target_after: float
    others: dict[str, tuple[float, float]]   # factor -> (before, after)

    @property
    def target_delta(self) -> float:
        return self.target_after - self.target_before


@dataclass
class ManipulationReport:
    """Averaged posteriors before/after manipulating one factor."""

    factor: str
    n_instances: int
    n_pairs: int
    skipped_pairs: int
    target_before: float
    target_after: float
    other_factors: dict[str, dict] = field(default_factory=dict)
    pairs: list[PairRecord] = field(default_factory=list)

    @property
    def target_delta(self) -> float:
        return self.target_after - self.target_before

    def to_markdown(self, label: str = "model") -> str:
        head = [f"p({self.factor}->target|x)", "p(.|x')", "delta(target)"]
        row = [f"{self.target_before:.3f}", f"{self.target_after:.3f}",
               f"{self.target_delta:.3f}"]
        for name, vals in self.other_factors.items():
            head += [f"p({name}|x)", f"p({name}|x')", f"delta({name})"]
            row += [f"{vals['before']:.3f}", f"{vals['after']:.3f}",
                    f"{vals['delta']:.3f}"]
        lines = ["| model | " + " | ".join(head) + " |",
                 "|" + "---|" * (len(head) + 1),
                 f"| {label} | " + " | ".join(row) + " |"]
        return "\n".join(lines)


def manipulation_eval(model: FlowModel, table: ClassMeanTable,
                      classifiers: dict[str, MlpClassifier], dataset,
                      factor: str) -> ManipulationReport:
    """Run all ordered class-pair conversions of ``factor`` on ``dataset``.

    ``classifiers`` maps every factor of the dataset to a posterior
    estimator trained on raw observations.  Pairs whose source class has no
    test samples, or whose source/target class is empty in the mean table,
    are skipped and counted.
    """
    if factor not in dataset.labels:
        raise ValidationError(f"dataset has no labels for factor {factor!r}")
    if factor != table.factor:
        raise ValidationError(
            f"mean table is for factor {table.factor!r}, asked to manipulate {factor!r}")
    for name in dataset.factor_names:
        if name not in classifiers:
            raise ValidationError(f"missing classifier for factor {name!r}")
    k = int(dataset.class_counts[factor])
    other_names = [n for n in dataset.factor_names if n != factor]
    lab = dataset.labels[factor]

    sums = {"tb": 0.0, "ta": 0.0}
    other_sums = {n: [0.0, 0.0] for n in other_names}
    pairs: list[PairRecord] = []
    n_instances = 0
    skipped = 0
    for c1 in range(k):
        idx = np.flatnonzero(lab == c1)
        if idx.size == 0 or table.counts[c1] == 0:
            skipped += k - 1
            continue
        X = dataset.features[idx]
        post_before = {n: classifiers[n].posteriors(X) for n in dataset.factor_names}
        for c2 in range(k):
            if c2 == c1:
                continue
            if table.counts[c2] == 0:
                skipped += 1
                continue
            x_manip = manipulate(model, table, X, c1, c2)
            tb = post_before[factor][:, c2]
            ta = classifiers[factor].posteriors(x_manip)[:, c2]
            rec_others = {}
            for name in other_names:
                true = dataset.labels[name][idx]
                ob = post_before[name][np.arange(idx.size), true]
                oa = classifiers[name].posteriors(x_manip)[np.arange(idx.size), true]
                other_sums[name][0] += ob.sum()
                other_sums[name][1] += oa.sum()
                rec_others[name] = (float(ob.mean()), float(oa.mean()))
            sums["tb"] += tb.sum()
            sums["ta"] += ta.sum()
            n_instances += idx.size
            pairs.append(PairRecord(c1, c2, int(idx.size),
                                    float(tb.mean()), float(ta.mean()), rec_others))
    if n_instances == 0:
        raise ValidationError(f"no usable class pairs for factor {factor!r}")
    other_factors = {}
    for name in other_names:
        before = other_sums[name][0] / n_instances
        after = other_sums[name][1] / n_instances
        other_factors[name] = {"before": before, "after": after,
                               "delta": after - before}
    return ManipulationReport(
        factor=factor,
        n_instances=n_instances,
        n_pairs=len(pairs),
        skipped_pairs=skipped,
        target_before=sums["tb"] / n_instances,
        target_after=sums["ta"] / n_instances,
        other_factors=other_factors,
        pairs=pairs,
    )


def project_2d(codes) -> np.ndarray:
    """Deterministic PCA onto the top-2 principal components.

    Sign convention: each component's largest-magnitude loading is positive.
    Rejects fewer than two points and zero-variance input.
    """
    X = np.asarray(codes, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValidationError("need at least two row vectors to project")
    centered = X - X.mean(axis=0)
    if not np.any(centered):
        raise ValidationError("zero-variance input has no principal components")
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:2]
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    coords = centered @ comps.T
    if coords.shape[1] < 2:
        coords = np.hstack([coords, np.zeros((coords.shape[0], 1))])
    return coords
