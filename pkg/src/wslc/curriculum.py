"""Relationship-graph distillation and two-stage easy-to-hard training.

Stage 1 trains a fresh network on clean data with plain cross-entropy.
Its soft confusion matrix on that same training set is sparsified into a
row-stochastic relationship graph. Stage 2 fine-tunes on noisy data
against the graph row of each observed label instead of a one-hot target,
which softens the loss toward look-alike classes. With an identity graph
stage 2 degrades to ordinary fine-tuning, which serves as the baseline.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import nncore
from .nncore import TrainingDiverged, lr_schedule, sgd_step, softmax

DEFAULT_TOP_K = 5
LOG_CLAMP = 1e-12
ROW_SUM_TOL = 1e-9


@dataclass
class ClassIndexSets:
    """Per-class sample index sets partitioning a labeled dataset."""

    sets: list  # class -> int ndarray of sample indices

    @classmethod
    def from_labels(cls, labels, num_classes):
        labels = np.asarray(labels)
        return cls([np.flatnonzero(labels == c) for c in range(num_classes)])

    @property
    def num_classes(self):
        return len(self.sets)

    def counts(self):
        return [len(s) for s in self.sets]


@dataclass
class RelationshipGraph:
    """Sparse row-stochastic class-relationship matrix.

    Each row holds at most ``k`` positive weights over class indices and
    sums to one. Row j is the target distribution used in place of the
    one-hot vector for observed label j.
    """

    num_classes: int
    k: int
    rows: list  # class -> list of (class index, weight), ascending index

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if len(self.rows) != self.num_classes:
            raise ValueError("one row per class required")
        for j, row in enumerate(self.rows):
            if not 1 <= len(row) <= self.k:
                raise ValueError(f"row {j} has {len(row)} entries, want 1..{self.k}")
            total = 0.0
            for i, w in row:
                if not 0 <= i < self.num_classes:
                    raise ValueError(f"row {j}: class index {i} out of range")
                if w <= 0:
                    raise ValueError(f"row {j}: non-positive weight for class {i}")
                total += w
            if abs(total - 1.0) > ROW_SUM_TOL:
                raise ValueError(f"row {j} sums to {total!r}, not 1")

    @classmethod
    def identity(cls, num_classes, k=DEFAULT_TOP_K):
        return cls(num_classes, k, [[(j, 1.0)] for j in range(num_classes)])

    def dense(self):
        out = np.zeros((self.num_classes, self.num_classes))
        for j, row in enumerate(self.rows):
            for i, w in row:
                out[j, i] = w
        return out

    def row_dense(self, j):
        out = np.zeros(self.num_classes)
        for i, w in self.rows[j]:
            out[i] = w
        return out


def confusion_matrix(model, images, class_sets, batch_size=256):
    """Soft confusion matrix: entry (j, i) is the mean predicted probability
    of class i over samples whose label is j. Rows sum to one."""
    for j, members in enumerate(class_sets.sets):
        if len(members) == 0:
            raise ValueError(f"class {j} has no samples")
    probs = predict_probs(model, images, batch_size=batch_size).astype(np.float64)
    c = class_sets.num_classes
    conf = np.zeros((c, c))
    for j, members in enumerate(class_sets.sets):
        conf[j] = probs[members].mean(axis=0)
    return conf


def predict_probs(model, images, batch_size=256):
    """Class probabilities for a whole image array, evaluated in fixed-order
    batches so the result is identical for any batch size."""
    chunks = []
    for start in range(0, len(images), batch_size):
        p, _ = nncore.forward(model, images[start:start + batch_size])
        chunks.append(p)
    return np.concatenate(chunks, axis=0)


def sparsify_topk(conf, k=DEFAULT_TOP_K):
    """Keep the k largest entries of each row (ties to the lower class
    index), drop zeros, and renormalize the kept mass to one."""
    if k < 1:
        raise ValueError("k must be >= 1")
    conf = np.asarray(conf, dtype=np.float64)
    if np.any(conf < 0):
        raise ValueError("confusion entries must be non-negative")
    rows = []
    for j in range(conf.shape[0]):
        row = conf[j]
        total = row.sum()
        if total <= 0:
            raise ValueError(f"row {j} sums to zero")
        keep = np.argsort(-row, kind="stable")[:k]
        keep = [int(i) for i in keep if row[i] > 0]
        mass = sum(row[i] for i in keep)
        rows.append(sorted((i, float(row[i] / mass)) for i in keep))
    return RelationshipGraph(conf.shape[0], k, rows)


def graph_loss(probs, label, graph):
    """Cross-entropy of ``probs`` against the graph row of ``label``.

    Probabilities at supported indices are clamped at 1e-12 before the
    log; a clamp is reported as a RuntimeWarning.
    """
    probs = np.asarray(probs, dtype=np.float64)
    loss = 0.0
    for i, w in graph.rows[label]:
        p = probs[i]
        if p < LOG_CLAMP:
            warnings.warn(f"probability for supported class {i} clamped at "
                          f"{LOG_CLAMP}", RuntimeWarning, stacklevel=2)
            p = LOG_CLAMP
        loss -= w * np.log(p)
    return float(loss)


def graph_loss_grad(logits, label, graph):
    """Gradient of graph_loss w.r.t. the logits: softmax(logits) - row."""
    return softmax(np.asarray(logits, dtype=np.float64)) - graph.row_dense(label)


def _batch_loss(probs, targets):
    # mean graph loss over a batch plus the count of clamped entries
    clamped = int(np.count_nonzero((probs < LOG_CLAMP) & (targets > 0)))
    logp = np.log(np.maximum(probs, LOG_CLAMP))
    return -float(np.mean(np.sum(targets * logp, axis=1))), clamped


def _train(model, images, labels, target_matrix, cfg):
    """SGD loop shared by both stages. Mutates ``model`` in place."""
    n = len(images)
    if n == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    target_matrix = target_matrix.astype(model.dtype)
    log = []
    clamp_total = 0
    for it in range(cfg.total_iters):
        idx = rng.integers(0, n, size=cfg.batch_size)
        batch = images[idx]
        probs, _, cache = nncore.forward_with_cache(model, batch)
        targets = target_matrix[labels[idx]]
        loss, clamped = _batch_loss(probs, targets)
        clamp_total += clamped
        if not np.isfinite(loss):
            raise TrainingDiverged(it, "loss")
        dlogits = (probs - targets) / cfg.batch_size
        try:
            sgd_step(model.params, nncore.backward_from_cache(model, cache, dlogits),
                     lr_schedule(cfg, it), cfg.momentum, velocity)
        except TrainingDiverged as exc:
            raise TrainingDiverged(it, str(exc)) from None
        log.append((it, lr_schedule(cfg, it), loss))
    if clamp_total:
        warnings.warn(f"{clamp_total} probabilities clamped at {LOG_CLAMP} "
                      "during training", RuntimeWarning)
    return log


def train_stage1(images, labels, spec, cfg, dtype=np.float32):
    """Train a fresh network on clean data with one-hot cross-entropy.

    Returns (model, loss_log) where the log rows are (iter, lr, loss).
    """
    labels = np.asarray(labels)
    present = np.unique(labels)
    if len(present) != spec.num_classes:
        missing = sorted(set(range(spec.num_classes)) - set(present.tolist()))
        raise ValueError(f"classes {missing} missing from training data")
    model = nncore.build_model(spec, cfg.seed, dtype=dtype)
    targets = np.eye(spec.num_classes)
    log = _train(model, images, labels, targets, cfg)
    return model, log


def finetune_stage2(model, images, labels, graph, cfg):
    """Continue training on noisy data against relationship-graph targets.

    The graph stays fixed for the whole run. Passing an identity graph
    makes this plain fine-tuning (the no-graph baseline). The input model
    is not modified; a trained copy is returned.
    """
    if graph.num_classes != model.spec.num_classes:
        raise ValueError(
            f"graph has {graph.num_classes} classes, model expects "
            f"{model.spec.num_classes}")
    tuned = model.copy()
    log = _train(tuned, images, np.asarray(labels), graph.dense(), cfg)
    return tuned, log


def entropy_of(probs):
    """Shannon entropy (nats) of each probability row."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


def mean_prediction_entropy(model, images, batch_size=256):
    """Mean prediction entropy in nats over a dataset.

    Confident models score near zero; a uniform predictor scores ln C.
    Useful as a quick gauge of how noisy a data source looks to a model.
    """
    if len(images) == 0:
        raise ValueError("empty dataset")
    probs = predict_probs(model, images, batch_size=batch_size)
    return float(entropy_of(probs).mean())


# --- text formats -----------------------------------------------------------

def save_graph(graph, path):
    """Graph text format: "C K" header, then "j i weight" per nonzero in
    ascending (j, i) order, weights at 17 significant digits."""
    with open(path, "w") as f:
        f.write(f"{graph.num_classes} {graph.k}\n")
        for j, row in enumerate(graph.rows):
            for i, w in row:
                f.write(f"{j} {i} {w:.17g}\n")


def load_graph(path):
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 2:
            raise ValueError(f"{path}: bad graph header")
        c, k = int(header[0]), int(header[1])
        rows = [[] for _ in range(c)]
        for line in f:
            parts = line.split()
            if not parts:
                continue
            j, i, w = int(parts[0]), int(parts[1]), float(parts[2])
            rows[j].append((i, w))
    return RelationshipGraph(c, k, rows)


def save_loss_log(log, path):
    with open(path, "w") as f:
        f.write("iter,lr,loss\n")
        for it, lr, loss in log:
            f.write(f"{it},{lr:.17g},{loss:.17g}\n")


def load_loss_log(path):
    rows = []
    with open(path) as f:
        next(f)
        for line in f:
            it, lr, loss = line.strip().split(",")
            rows.append((int(it), float(lr), float(loss)))
    return rows
