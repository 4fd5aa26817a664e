"""Object localization from weakly labeled images.

Iconic clean images act as whole-image seed boxes. Each seed trains a
closed-form exemplar-LDA detector over shared negative statistics, which
is fired on edge-density region proposals from the harder images to pull
in nearest neighbors. Neighbor sets are agglomerated into subcategories
and low-density clusters are purged as noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nncore

DEFAULT_KNN = 10
DEFAULT_AFFINITY_TAU = 0.5
DEFAULT_MIN_MEMBERS = 3
DEFAULT_DENSITY_PERCENTILE = 10.0
PROPOSAL_NMS_IOU = 0.7
ELDA_RESIDUAL_TOL = 1e-8


@dataclass(frozen=True)
class Box:
    """Axis-aligned pixel box, inclusive-exclusive coordinates."""

    x1: int
    y1: int
    x2: int
    y2: int
    score: float = 0.0

    def __post_init__(self):
        if not (0 <= self.x1 < self.x2 and 0 <= self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1},{self.y1},{self.x2},{self.y2})")

    @property
    def coords(self):
        return (self.x1, self.y1, self.x2, self.y2)

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def with_score(self, score):
        return Box(self.x1, self.y1, self.x2, self.y2, float(score))


def iou(a, b):
    """Intersection over union of two boxes, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / float(a.area + b.area - inter)


# --- exemplar LDA -----------------------------------------------------------

@dataclass
class NegStats:
    """Shared negative mean/covariance with diagonal shrinkage."""

    mu: np.ndarray
    sigma: np.ndarray
    lam: float
    n: int

    @property
    def sigma_lambda(self):
        return self.sigma + self.lam * np.eye(len(self.mu))


def neg_stats(features, lam=None):
    """Mean and population covariance of the negative pool.

    ``lam`` defaults to 0.1 * trace(sigma) / dim (floored away from zero
    so degenerate pools still yield a positive definite matrix).
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError("need at least 2 feature vectors")
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = (centered.T @ centered) / feats.shape[0]
    if lam is None:
        lam = max(0.1 * np.trace(sigma) / feats.shape[1], 1e-8)
    if lam <= 0:
        raise ValueError("lam must be positive")
    stats = NegStats(mu, sigma, float(lam), feats.shape[0])
    np.linalg.cholesky(stats.sigma_lambda)  # raises if not PD
    return stats


@dataclass
class ExemplarDetector:
    """Whitened linear detector for one seed: w solves sigma_lambda w = x - mu."""

    w: np.ndarray
    b: float
    seed_id: object = None

    def score(self, embedding):
        return float(self.w @ embedding + self.b)

    def score_many(self, embeddings):
        return np.asarray(embeddings) @ self.w + self.b


def elda_fit(seed_embedding, stats, seed_id=None):
    x = np.asarray(seed_embedding, dtype=np.float64)
    if x.shape != stats.mu.shape:
        raise ValueError(f"embedding dim {x.shape} does not match stats "
                         f"{stats.mu.shape}")
    rhs = x - stats.mu
    sig = stats.sigma_lambda
    try:
        w = np.linalg.solve(sig, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"negative covariance solve failed: {exc}") from None
    residual = np.linalg.norm(sig @ w - rhs)
    scale = np.linalg.norm(rhs)
    if scale > 0 and residual >= ELDA_RESIDUAL_TOL * scale:
        raise ValueError(f"solve residual {residual:.3e} too large")
    return ExemplarDetector(w, b=float(-w @ stats.mu), seed_id=seed_id)


# --- region proposals -------------------------------------------------------

PROPOSAL_SCALES = (1 / 4, 1 / 3, 1 / 2)  # small windows first, so ties favor tight boxes
PROPOSAL_ASPECTS = ((1, 1), (2, 1), (1, 2))


def _edge_map(image):
    img = np.asarray(image, dtype=np.float64)
    gray = img @ [0.299, 0.587, 0.114] if img.ndim == 3 else img
    padded = np.pad(gray, 1, mode="edge")
    gx = (padded[:-2, 2:] + 2 * padded[1:-1, 2:] + padded[2:, 2:]
          - padded[:-2, :-2] - 2 * padded[1:-1, :-2] - padded[2:, :-2])
    gy = (padded[2:, :-2] + 2 * padded[2:, 1:-1] + padded[2:, 2:]
          - padded[:-2, :-2] - 2 * padded[:-2, 1:-1] - padded[:-2, 2:])
    return np.sqrt(gx * gx + gy * gy)


def _box_sums(integral, xs, ys, w, h):
    return (integral[ys + h, xs + w] - integral[ys, xs + w]
            - integral[ys + h, xs] + integral[ys, xs])


def _positions(limit, step):
    pos = list(range(0, limit + 1, step))
    if pos[-1] != limit:
        pos.append(limit)  # keep the flush-edge placement
    return np.array(pos)


def propose(image, max_n):
    """Edge-density objectness proposals.

    Multi-scale sliding windows are scored by interior Sobel edge mass
    minus the mass falling in a thin ring just inside the box boundary,
    so windows whose contours are wholly interior win. Greedy NMS at IoU
    0.7 keeps the list diverse; the top ``max_n`` survivors are returned
    in descending score order.
    """
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    edges = _edge_map(image)
    h_img, w_img = edges.shape
    integral = np.zeros((h_img + 1, w_img + 1))
    integral[1:, 1:] = edges.cumsum(axis=0).cumsum(axis=1)

    candidates = []  # (score, order, Box)
    order = 0
    side = min(h_img, w_img)
    for scale in PROPOSAL_SCALES:
        base = side * scale
        for aw, ah in PROPOSAL_ASPECTS:
            w = int(round(base * np.sqrt(aw / ah)))
            h = int(round(base * np.sqrt(ah / aw)))
            if w < 4 or h < 4 or w > w_img or h > h_img:
                continue
            t = max(1, round(0.1 * min(w, h)))
            xs = _positions(w_img - w, max(1, round(w / 8)))
            ys = _positions(h_img - h, max(1, round(h / 8)))
            gx, gy = np.meshgrid(xs, ys)
            gx, gy = gx.ravel(), gy.ravel()
            total = _box_sums(integral, gx, gy, w, h)
            interior = _box_sums(integral, gx + t, gy + t, w - 2 * t, h - 2 * t)
            scores = 2.0 * interior - total
            for x, y, s in zip(gx, gy, scores):
                candidates.append((float(s), order, Box(int(x), int(y),
                                                        int(x + w), int(y + h), float(s))))
                order += 1
    candidates.sort(key=lambda c: (-c[0], c[1]))
    kept = []
    for _s, _o, box in candidates:
        if all(iou(box, k) <= PROPOSAL_NMS_IOU for k in kept):
            kept.append(box)
            if len(kept) == max_n:
                break
    return kept


def crop_and_resize(image, box, out_size):
    """Bilinear crop of ``box`` resized to (out_size, out_size)."""
    img = np.asarray(image, dtype=np.float64)
    crop = img[box.y1:box.y2, box.x1:box.x2]
    ch, cw = crop.shape[:2]
    ys = np.clip((np.arange(out_size) + 0.5) * ch / out_size - 0.5, 0, ch - 1)
    xs = np.clip((np.arange(out_size) + 0.5) * cw / out_size - 0.5, 0, cw - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, ch - 1)
    x1 = np.minimum(x0 + 1, cw - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    if crop.ndim == 2:
        crop = crop[:, :, None]
    top = crop[y0][:, x0] * (1 - wx[..., None]) + crop[y0][:, x1] * wx[..., None]
    bot = crop[y1][:, x0] * (1 - wx[..., None]) + crop[y1][:, x1] * wx[..., None]
    out = top * (1 - wy[..., None]) + bot * wy[..., None]
    return out if out.shape[2] > 1 else out[:, :, 0]


def embed_boxes(model, image, boxes):
    """Embeddings of box crops, resized to the model input size."""
    size = model.spec.input_size
    crops = [crop_and_resize(image, b, size) for b in boxes]
    batch = np.stack(crops).transpose(0, 3, 1, 2)
    return nncore.embed(model, batch)


# --- subcategory discovery --------------------------------------------------

@dataclass
class Subcategory:
    """Cluster of localized boxes with coherent appearance."""

    members: list  # (image_id, Box, embedding)
    seed_ids: list
    density: float = field(default=None)

    def __post_init__(self):
        if not self.members:
            raise ValueError("subcategory must have at least one member")
        if self.density is None:
            self.density = cluster_density([m[2] for m in self.members])


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def cluster_density(embeddings):
    """Mean pairwise cosine similarity; singletons count as 1."""
    if len(embeddings) == 1:
        return 1.0
    units = np.stack([_unit(np.asarray(e, dtype=np.float64)) for e in embeddings])
    total = units.sum(axis=0)
    n = len(units)
    return float((total @ total - n) / (n * (n - 1)))


def knn_propagate(det, candidates, k):
    """Top scoring candidates under a detector, at most one box per image.

    The best-scoring box of each image is kept first (ties by candidate
    order), then the k highest survivors are returned as members with the
    detector score written into each box.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not candidates:
        return []
    best = {}
    for pos, (image_id, box, emb) in enumerate(candidates):
        s = det.score(emb)
        if image_id not in best or s > best[image_id][0]:
            best[image_id] = (s, pos, box, emb)
    ranked = sorted(((s, pos, img, box, emb)
                     for img, (s, pos, box, emb) in best.items()),
                    key=lambda r: (-r[0], r[1]))
    return [(img, box.with_score(s), emb) for s, _pos, img, box, emb in ranked[:k]]


def _mean_unit(members):
    return np.stack([_unit(np.asarray(m[2], dtype=np.float64))
                     for m in members]).mean(axis=0)


def _dedup(members):
    seen = set()
    out = []
    for m in members:
        key = (m[0], m[1].coords)
        if key not in seen:
            seen.add(key)
            out.append(m)
    return out


def merge_subcategories(neighbor_sets, affinity_threshold=DEFAULT_AFFINITY_TAU):
    """Greedy bottom-up agglomeration of neighbor sets.

    Affinity between two sets is the mean cosine similarity over all
    cross-set embedding pairs. The highest-affinity pair is merged while
    that affinity stays at or above the threshold; members are
    deduplicated by (image id, box).
    """
    groups = [(_dedup(list(s.members)), list(s.seed_ids)) for s in neighbor_sets]
    means = [_mean_unit(m) for m, _ in groups]
    while len(groups) > 1:
        best = None  # (affinity, i, j)
        for i in range(len(groups)):
            for j in range(i + 1, len(groups)):
                aff = float(means[i] @ means[j])
                if best is None or aff > best[0]:
                    best = (aff, i, j)
        if best is None or best[0] < affinity_threshold:
            break
        _aff, i, j = best
        merged = _dedup(groups[i][0] + groups[j][0])
        seeds = groups[i][1] + [s for s in groups[j][1] if s not in groups[i][1]]
        groups[i] = (merged, seeds)
        del groups[j]
        means[i] = _mean_unit(merged)
        del means[j]
    return [Subcategory(m, s) for m, s in groups]


def purge_noise(clusters, min_members=DEFAULT_MIN_MEMBERS,
                density_percentile=DEFAULT_DENSITY_PERCENTILE):
    """Drop small clusters and those below the density percentile cut."""
    if not clusters:
        return []
    cut = np.percentile([c.density for c in clusters], density_percentile)
    return [c for c in clusters
            if len(c.members) >= min_members and c.density >= cut]


def discover_subcategories(detectors, candidates, *, k=DEFAULT_KNN,
                           affinity_threshold=DEFAULT_AFFINITY_TAU,
                           min_members=DEFAULT_MIN_MEMBERS,
                           density_percentile=DEFAULT_DENSITY_PERCENTILE):
    """Full chain from seed detectors to purged subcategories."""
    neighbor_sets = []
    for det in detectors:
        members = knn_propagate(det, candidates, k)
        if members:
            neighbor_sets.append(Subcategory(members, [det.seed_id]))
    merged = merge_subcategories(neighbor_sets, affinity_threshold)
    return purge_noise(merged, min_members, density_percentile)


# --- positive-set augmentation ----------------------------------------------

def edgebox_augment(positives, proposals_by_image, threshold=0.5):
    """Add every proposal overlapping a same-image positive at IoU >=
    threshold. Output is the originals plus additions, deduplicated."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    out = list(positives)
    seen = {(img, box.coords) for img, box in positives}
    for image_id, props in proposals_by_image.items():
        anchors = [box for img, box in positives if img == image_id]
        if not anchors:
            continue
        for p in props:
            if (image_id, p.coords) in seen:
                continue
            if any(iou(p, a) >= threshold for a in anchors):
                out.append((image_id, p))
                seen.add((image_id, p.coords))
    return out


def category_expand(graph, category, relatedness_whitelist):
    """Graph-row neighbors of a category filtered by a relatedness
    whitelist of unordered class pairs, in descending graph weight."""
    allowed = {frozenset(p) for p in relatedness_whitelist}
    row = sorted(graph.rows[category], key=lambda e: -e[1])
    return [i for i, _w in row
            if i != category and frozenset((category, i)) in allowed]


# --- text formats and overlays ----------------------------------------------

def write_subcategories(clusters, path):
    """One line per member: "cluster_id image_id x1 y1 x2 y2 score"."""
    with open(path, "w") as f:
        for cid, cluster in enumerate(clusters):
            for image_id, box, _emb in cluster.members:
                f.write(f"{cid} {image_id} {box.x1} {box.y1} {box.x2} {box.y2} "
                        f"{box.score:.17g}\n")


def read_subcategories(path):
    """Members grouped by cluster id (embeddings are not stored)."""
    clusters = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            cid = int(parts[0])
            box = Box(int(parts[2]), int(parts[3]), int(parts[4]), int(parts[5]),
                      float(parts[6]))
            clusters.setdefault(cid, []).append((parts[1], box))
    return [clusters[cid] for cid in sorted(clusters)]


def load_whitelist(path, class_names):
    """Relatedness pairs, one "nameA nameB" per line, as index pairs."""
    index = {name: i for i, name in enumerate(class_names)}
    pairs = set()
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ValueError(f"bad whitelist line: {line.strip()!r}")
            for name in parts:
                if name not in index:
                    raise ValueError(f"unknown category {name!r} in whitelist")
            pairs.add(frozenset((index[parts[0]], index[parts[1]])))
    return pairs


def draw_boxes(image, boxes, color=(1.0, 0.0, 0.0)):
    """Copy of ``image`` with 1-pixel box outlines burned in."""
    out = np.array(image, dtype=np.float32, copy=True)
    col = np.asarray(color, dtype=np.float32)
    h, w = out.shape[:2]
    for box in boxes:
        x1, y1 = max(box.x1, 0), max(box.y1, 0)
        x2, y2 = min(box.x2, w), min(box.y2, h)
        out[y1, x1:x2] = col
        out[y2 - 1, x1:x2] = col
        out[y1:y2, x1] = col
        out[y1:y2, x2 - 1] = col
    return out
