"""Per-category linear detectors over embeddings, NMS, and PR evaluation.

SVMs are trained with a deterministic epoch-wise subgradient scheme with
a 1/(lambda t) step size. After every epoch the regularized objective is
checkpointed and the iterate reverts to the best seen so far, so the
epoch objective sequence never increases. Detection chains region
proposals through crop embeddings and per-class scores into per-class
NMS, and evaluation follows the usual greedy-matching all-point
interpolated average precision.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nncore
from .localize import embed_boxes, iou, propose


@dataclass
class LinearSVM:
    w: np.ndarray
    b: float
    c: float = 1.0
    epoch_objectives: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if not (np.all(np.isfinite(self.w)) and np.isfinite(self.b)):
            raise ValueError("non-finite SVM parameters")


@dataclass(frozen=True)
class Detection:
    image_id: object
    box: object  # Box carrying the detection score
    class_id: int

    @property
    def score(self):
        return self.box.score


@dataclass
class PRCurve:
    points: list  # (precision, recall) along the ranking
    ap: float
    num_gt: int = 0
    num_det: int = 0


def svm_objective(w, b, x, y, c):
    """Regularized hinge objective 0.5||w||^2 + C sum(hinge)."""
    margins = y * (x @ w + b)
    return 0.5 * float(w @ w) + c * float(np.maximum(0.0, 1.0 - margins).sum())


def svm_train(pos, neg, c=1.0, epochs=40, seed=0):
    """Hinge-loss linear SVM by deterministic subgradient descent.

    The step size is 1/(lambda t) with lambda = 1/(C n). Epoch
    checkpoints keep the best iterate, so the recorded objective
    sequence is non-increasing and the final objective never exceeds
    the initial one.
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    if pos.ndim != 2 or len(pos) == 0 or neg.ndim != 2 or len(neg) == 0:
        raise ValueError("need non-empty positive and negative sets")
    if c <= 0:
        raise ValueError("C must be positive")
    x = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    n, dim = x.shape
    lam = 1.0 / (c * n)
    radius = 1.0 / np.sqrt(lam)  # optimum lies inside this ball
    rng = np.random.default_rng(seed)
    xa = np.concatenate([x, np.ones((n, 1))], axis=1)  # bias as a feature
    wa = np.zeros(dim + 1)
    best = (svm_objective(wa[:dim], wa[dim], x, y, c), wa.copy())
    objectives = [best[0]]
    t = 0
    for _epoch in range(epochs):
        for i in rng.permutation(n):
            t += 1
            wa *= 1.0 - 1.0 / t  # eta * lam with eta = 1/(lam t)
            if y[i] * (xa[i] @ wa) < 1.0:
                wa += (1.0 / (lam * t)) * y[i] * xa[i]
            norm = np.linalg.norm(wa)
            if norm > radius:
                wa *= radius / norm
        obj = svm_objective(wa[:dim], wa[dim], x, y, c)
        if obj < best[0]:
            best = (obj, wa.copy())
        else:
            wa = best[1].copy()  # epoch checkpoints never regress
        objectives.append(best[0])
    return LinearSVM(best[1][:dim], float(best[1][dim]), c,
                     epoch_objectives=objectives)


def svm_score(svm, embedding):
    """Affine decision value w . x + b."""
    x = np.asarray(embedding)
    if x.shape[-1] != svm.w.shape[0]:
        raise ValueError(f"embedding dim {x.shape[-1]} does not match "
                         f"SVM dim {svm.w.shape[0]}")
    return x @ svm.w + svm.b


def nms(detections, iou_thresh):
    """Greedy non-maximum suppression by descending score.

    A box is suppressed when its IoU with an already kept box exceeds
    the threshold. Ties keep input order.
    """
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, i))
    kept = []
    for i in order:
        d = detections[i]
        if all(iou(d.box, k.box) <= iou_thresh for k in kept):
            kept.append(d)
    return kept


def detect(model, svms, image, image_id=None, max_proposals=30, nms_thresh=0.3):
    """Propose, embed, score per class, and apply per-class NMS."""
    if not svms:
        return []
    boxes = propose(image, max_proposals)
    if not boxes:
        return []
    embeds = embed_boxes(model, image, boxes)
    out = []
    for class_id in sorted(svms):
        scores = svm_score(svms[class_id], embeds)
        dets = [Detection(image_id, box.with_score(s), class_id)
                for box, s in zip(boxes, scores)]
        out.extend(nms(dets, nms_thresh))
    return out


def average_precision(detections, ground_truth, iou_thresh=0.5):
    """All-point interpolated average precision for one class.

    ``detections`` are ranked by descending score (re-sorted here,
    stable). ``ground_truth`` maps image id to its list of boxes. A
    detection is a true positive when it overlaps a not-yet-matched
    ground-truth box of its image at IoU >= iou_thresh (best overlap
    first); each ground-truth box matches at most once.
    """
    num_gt = sum(len(v) for v in ground_truth.values())
    if num_gt == 0:
        raise ValueError("no ground-truth boxes: recall undefined")
    ranked = sorted(detections, key=lambda d: -d.score)
    matched = {img: [False] * len(v) for img, v in ground_truth.items()}
    tp = np.zeros(len(ranked))
    for n, det in enumerate(ranked):
        candidates = ground_truth.get(det.image_id, [])
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(candidates):
            if matched[det.image_id][j]:
                continue
            v = iou(det.box, gt)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= iou_thresh:
            matched[det.image_id][best_j] = True
            tp[n] = 1.0
    tp_cum = tp.cumsum()
    recall = tp_cum / num_gt
    precision = tp_cum / np.arange(1, len(ranked) + 1)
    points = list(zip(precision.tolist(), recall.tolist()))
    # area under the precision envelope over recall
    ap = 0.0
    prev_r = 0.0
    for n in range(len(ranked)):
        if tp[n]:
            ap += (recall[n] - prev_r) * float(precision[n:].max())
            prev_r = recall[n]
    return PRCurve(points, float(ap), num_gt=num_gt, num_det=len(ranked))


def mean_ap(curves):
    """Unweighted mean of per-class average precision."""
    if not curves:
        raise ValueError("need at least one class")
    return float(np.mean([c.ap for c in curves]))


def l2_normalize(v):
    """Scale to unit length; zero vectors pass through with a warning."""
    v = np.asarray(v, dtype=np.float64)
    norm = np.linalg.norm(v, axis=-1, keepdims=v.ndim > 1)
    if np.any(norm == 0):
        warnings.warn("zero vector left unnormalized", RuntimeWarning,
                      stacklevel=2)
        if v.ndim == 1:
            return v.copy()
        norm = np.where(norm == 0, 1.0, norm)
    return v / norm


def linear_probe(embeddings, labels, split, c=1.0, epochs=40, seed=0):
    """Held-out accuracy of one-vs-rest SVMs on unit-length embeddings.

    ``split`` is a (train_indices, test_indices) pair. Every class must
    appear in the training rows.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    train_idx, test_idx = (np.asarray(s) for s in split)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    feats = np.stack([l2_normalize(e) for e in embeddings])
    train_y = labels[train_idx]
    for cls in classes:
        if not np.any(train_y == cls):
            raise ValueError(f"class {cls} missing from train split")
    scores = np.zeros((len(test_idx), len(classes)))
    for col, cls in enumerate(classes):
        pos = feats[train_idx][train_y == cls]
        neg = feats[train_idx][train_y != cls]
        svm = svm_train(pos, neg, c=c, epochs=epochs, seed=seed)
        scores[:, col] = svm_score(svm, feats[test_idx])
    preds = classes[scores.argmax(axis=1)]
    return float((preds == labels[test_idx]).mean())


# --- CSV formats --------------------------------------------------------------

def write_detections_csv(detections, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image_id", "class", "x1", "y1", "x2", "y2", "score"])
        for d in detections:
            writer.writerow([d.image_id, d.class_id, d.box.x1, d.box.y1,
                             d.box.x2, d.box.y2, f"{d.score:.17g}"])


def read_detections_csv(path):
    from .localize import Box
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        next(reader)
        for image_id, cls, x1, y1, x2, y2, score in reader:
            box = Box(int(x1), int(y1), int(x2), int(y2), float(score))
            out.append(Detection(image_id, box, int(cls)))
    return out


def write_eval_report(class_names, curves, path):
    """Per-class AP rows plus a final mAP row."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class", "AP", "num_gt", "num_det"])
        for name, curve in zip(class_names, curves):
            writer.writerow([name, f"{curve.ap:.17g}", curve.num_gt,
                             curve.num_det])
        writer.writerow(["mAP", f"{mean_ap(curves):.17g}", "", ""])
