"""Synthetic two-regime web imagery with exact ground truth.

Easy samples mimic search-engine results: one centered, large, cleanly
lit object per image on a quiet background. Hard samples mimic
photo-sharing uploads: off-center instances at smaller scales, clutter
from other categories, and tag noise (structured label flips toward
look-alike categories plus outright junk images). Categories are
parametric shape/hue/texture triples, so visual similarity between
categories is known analytically and flips can be directed at genuine
look-alikes. Also ingests real directory-per-class folders of PPM, PGM,
or uncompressed BMP images.
"""

from __future__ import annotations

import colorsys
import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .curriculum import ClassIndexSets
from .localize import Box

EASY = "EASY"
HARD = "HARD"
NO_OBJECT = -1  # true_label of junk images carrying an unrelated tag

_SHAPE_FAMILY = {
    "disk": "round", "ring": "round",
    "square": "boxy", "frame": "boxy",
    "triangle": "angular", "diamond": "angular",
    "cross": "cross", "hbar": "bar", "vbar": "bar",
}


@dataclass(frozen=True)
class CategoryDef:
    name: str
    shape: str
    hue: float
    striped: bool

    def __post_init__(self):
        if self.shape not in _SHAPE_FAMILY:
            raise ValueError(f"unknown shape {self.shape!r}")


# Look-alike pairs share shape family, hue band, and mostly texture.
_CATALOG = (
    CategoryDef("red_disk", "disk", 0.00, False),
    CategoryDef("red_ring", "ring", 0.00, False),
    CategoryDef("green_square", "square", 0.33, False),
    CategoryDef("green_frame", "frame", 0.33, False),
    CategoryDef("blue_triangle", "triangle", 0.61, False),
    CategoryDef("blue_diamond", "diamond", 0.61, False),
    CategoryDef("gold_cross", "cross", 0.13, False),
    CategoryDef("gold_hbar", "hbar", 0.13, False),
    CategoryDef("cyan_disk", "disk", 0.50, True),
    CategoryDef("cyan_ring", "ring", 0.50, True),
    CategoryDef("magenta_square", "square", 0.83, True),
    CategoryDef("magenta_frame", "frame", 0.83, True),
    CategoryDef("purple_triangle", "triangle", 0.73, True),
    CategoryDef("purple_diamond", "diamond", 0.73, True),
    CategoryDef("orange_vbar", "vbar", 0.07, True),
    CategoryDef("orange_cross", "cross", 0.07, True),
)


def default_categories(num=8):
    if not 2 <= num <= len(_CATALOG):
        raise ValueError(f"num must be in [2, {len(_CATALOG)}]")
    return list(_CATALOG[:num])


def visual_similarity(categories):
    """Analytic look-alike matrix from parameter overlap.

    Zero diagonal, rows normalized over off-diagonal entries, so row j is
    a distribution over plausible flip targets for category j.
    """
    c = len(categories)
    sim = np.zeros((c, c))
    for i, a in enumerate(categories):
        for j, b in enumerate(categories):
            if i == j:
                continue
            hue_dist = abs(a.hue - b.hue)
            hue_dist = min(hue_dist, 1.0 - hue_dist)
            score = 0.02  # floor keeps every row a valid distribution
            score += 0.50 * (_SHAPE_FAMILY[a.shape] == _SHAPE_FAMILY[b.shape])
            score += 0.30 * max(0.0, 1.0 - hue_dist / 0.25)
            score += 0.18 * (a.striped == b.striped)
            sim[i, j] = score
    return sim / sim.sum(axis=1, keepdims=True)


@dataclass(frozen=True)
class NoiseModel:
    """Tag-noise knobs for the hard regime."""

    flip_rate: float = 0.0
    similarity_bias: float = 0.0
    junk_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.flip_rate < 1.0:
            raise ValueError("flip_rate must be in [0, 1)")
        if not 0.0 <= self.similarity_bias <= 1.0:
            raise ValueError("similarity_bias must be in [0, 1]")
        if not 0.0 <= self.junk_rate < 1.0:
            raise ValueError("junk_rate must be in [0, 1)")
        if self.flip_rate + self.junk_rate >= 1.0:
            raise ValueError("flip_rate + junk_rate must be < 1")


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    observed_label: int
    source: str
    true_label: int
    gt_boxes: list = field(default_factory=list)  # (class, Box)


# --- rendering ---------------------------------------------------------------

def _draw_form(shape, rng):
    """Per-instance form parameters for shapes that have them.

    The ranges deliberately overlap with the paired sibling shape: a
    near-zero ring hole is a disk, a thick frame is nearly a square, a
    cross with a hairline vertical arm is a horizontal bar, and a
    top-skewed diamond approaches a triangle. Each category therefore
    has a genuine look-alike tail, and confusion between paired
    categories survives even in a converged model.
    """
    if shape == "ring":
        return (rng.uniform(0.0, 0.55),)  # hole radius
    if shape == "frame":
        return (rng.uniform(0.05, 0.75),)  # inner edge position
    if shape == "cross":
        return (rng.uniform(0.30, 0.55), rng.uniform(0.03, 0.55))  # h, v arms
    if shape in ("hbar", "vbar"):
        return (rng.uniform(0.30, 0.55),)  # bar half-thickness
    if shape == "diamond":
        return (rng.uniform(0.0, 0.90),)  # apex skew toward a triangle
    return ()


def _shape_mask(shape, cx, cy, hw, hh, size, form=()):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx = (xx - cx) / hw
    dy = (yy - cy) / hh
    if shape == "disk":
        return dx * dx + dy * dy <= 1.0
    if shape == "ring":
        hole = form[0] if form else 0.4
        r2 = dx * dx + dy * dy
        return (r2 <= 1.0) & (r2 >= hole * hole)
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 1.0
    if shape == "frame":
        inner = form[0] if form else 0.55
        m = np.maximum(np.abs(dx), np.abs(dy))
        return (m <= 1.0) & (m >= inner)
    if shape == "triangle":
        return (np.abs(dy) <= 1.0) & (np.abs(dx) <= (dy + 1.0) / 2.0)
    if shape == "diamond":
        skew = form[0] if form else 0.0  # widest row sits at dy = skew
        width = np.where(dy <= skew, (dy + 1.0) / (skew + 1.0),
                         (1.0 - dy) / (1.0 - skew + 1e-9))
        return (np.abs(dy) <= 1.0) & (np.abs(dx) <= width)
    if shape == "cross":
        arm_h, arm_v = form if form else (0.35, 0.35)
        return ((np.abs(dy) <= arm_h) & (np.abs(dx) <= 1.0)) | (
            (np.abs(dx) <= arm_v) & (np.abs(dy) <= 1.0))
    if shape == "hbar":
        thick = form[0] if form else 0.45
        return (np.abs(dy) <= thick) & (np.abs(dx) <= 1.0)
    if shape == "vbar":
        thick = form[0] if form else 0.45
        return (np.abs(dx) <= thick) & (np.abs(dy) <= 1.0)
    raise ValueError(f"unknown shape {shape!r}")


def _paint(img, category, cx, cy, hw, hh, rng):
    """Draw one instance, returning its ground-truth box (mask extent)."""
    size = img.shape[0]
    form = _draw_form(category.shape, rng)
    mask = _shape_mask(category.shape, cx, cy, hw, hh, size, form)
    if not mask.any():
        y, x = int(np.clip(cy, 0, size - 1)), int(np.clip(cx, 0, size - 1))
        mask[y, x] = True
    hue = (category.hue + rng.uniform(-0.03, 0.03)) % 1.0
    color = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.70, 0.95),
                                         rng.uniform(0.75, 0.95)))
    shade = np.ones(img.shape[:2])
    if category.striped:
        # contrast near 1 approaches the solid look of the sibling
        period = max(2, int(round(hw / 2)))
        xx = np.arange(size)
        shade *= np.where((xx // period) % 2 == 0, 1.0,
                          rng.uniform(0.40, 0.95))[None, :]
    img[mask] = (color[None, :] * shade[mask, None])
    ys, xs = np.nonzero(mask)
    return Box(int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def _box_dims(area_frac, aspect, size):
    bw = np.sqrt(area_frac * size * size * aspect)
    bh = np.sqrt(area_frac * size * size / aspect)
    return min(bw, size - 1.0) / 2.0, min(bh, size - 1.0) / 2.0


def _quiet_background(size, rng):
    base = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.08),
                                        rng.uniform(0.75, 0.95)))
    img = np.tile(base, (size, size, 1))
    img += rng.normal(scale=0.015, size=img.shape)
    return img


def _cluttered_background(size, rng):
    base = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.05, 0.25),
                                        rng.uniform(0.35, 0.85)))
    img = np.tile(base, (size, size, 1))
    ramp = np.linspace(-1, 1, size)
    direction = rng.uniform(-0.12, 0.12, size=2)
    img += direction[0] * ramp[:, None, None] + direction[1] * ramp[None, :, None]
    img += rng.normal(scale=0.04, size=img.shape)
    return img


def _fuzzy_blobs(img, rng, count):
    # soft gradients, deliberately unlike any crisp category shape
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(count):
        cx, cy = rng.uniform(0, size, size=2)
        r = rng.uniform(0.1, 0.3) * size
        bump = np.exp(-(((xx - cx) ** 2 + (yy - cy) ** 2) / (r * r)))
        color = np.array(colorsys.hsv_to_rgb(rng.uniform(), rng.uniform(0.2, 0.6),
                                             rng.uniform(0.4, 0.9)))
        img += bump[:, :, None] * (color - img) * rng.uniform(0.3, 0.7)


def _sample_rng(seed, category, index):
    return np.random.default_rng(np.random.SeedSequence([seed, category, index]))


def gen_easy(category, n, categories, size=32, seed=0):
    """Iconic clean samples of one category.

    One instance, centered within 5% of the image center, bounding box
    covering 40 to 70 percent of the image, quiet background, and the
    observed label always equal to the true label.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= category < len(categories):
        raise ValueError(f"unknown category {category}")
    cat = categories[category]
    samples = []
    for idx in range(n):
        rng = _sample_rng(seed, category, idx)
        img = _quiet_background(size, rng)
        hw, hh = _box_dims(rng.uniform(0.40, 0.70), rng.uniform(0.75, 1.33), size)
        cx = size / 2.0 + rng.uniform(-0.05, 0.05) * size
        cy = size / 2.0 + rng.uniform(-0.05, 0.05) * size
        box = _paint(img, cat, cx, cy, hw, hh, rng)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        samples.append(Sample(img, category, EASY, category, [(category, box)]))
    return samples


def _check_similarity(similarity, c):
    sim = np.asarray(similarity, dtype=np.float64)
    if sim.shape != (c, c):
        raise ValueError(f"similarity must be {c}x{c}")
    off = sim.copy()
    np.fill_diagonal(off, 0.0)
    if np.any(off < 0) or not np.allclose(off.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("similarity rows must be normalized over "
                         "off-diagonal entries")
    return off


def gen_hard(category, n, noise, visual_similarity, categories, size=32, seed=0):
    """Cluttered, noisily tagged samples of one category.

    Instances are placed uniformly at 10 to 50 percent of the image area
    (1-3 of them), with distractor shapes from other categories recorded
    in the ground truth. With probability flip_rate the observed label is
    flipped, toward a look-alike from the similarity row with probability
    similarity_bias and uniformly otherwise. With probability junk_rate
    the image contains no instance of any labeled class at all; such
    samples carry true_label NO_OBJECT and empty ground truth.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= category < len(categories):
        raise ValueError(f"unknown category {category}")
    if not isinstance(noise, NoiseModel):
        raise ValueError("noise must be a NoiseModel")
    c = len(categories)
    sim = _check_similarity(visual_similarity, c)
    others = [j for j in range(c) if j != category]
    samples = []
    for idx in range(n):
        rng = _sample_rng(seed, category, idx)
        u = rng.uniform()
        img = _cluttered_background(size, rng)
        if u < noise.junk_rate:
            _fuzzy_blobs(img, rng, int(rng.integers(2, 5)))
            img = np.clip(img, 0.0, 1.0).astype(np.float32)
            samples.append(Sample(img, category, HARD, NO_OBJECT, []))
            continue
        gt = []
        for _ in range(int(rng.integers(1, 4))):  # distractors first
            other = int(rng.choice(others))
            hw, hh = _box_dims(rng.uniform(0.03, 0.12), rng.uniform(0.75, 1.33), size)
            cx = rng.uniform(hw, size - hw)
            cy = rng.uniform(hh, size - hh)
            gt.append((other, _paint(img, categories[other], cx, cy, hw, hh, rng)))
        extras = int(rng.integers(0, 3))  # 1-3 instances of the category
        areas = [rng.uniform(0.10, 0.50)] + [rng.uniform(0.05, 0.15)
                                             for _ in range(extras)]
        for area in reversed(areas):  # draw primary last so it stays on top
            hw, hh = _box_dims(area, rng.uniform(0.75, 1.33), size)
            cx = rng.uniform(hw, size - hw)
            cy = rng.uniform(hh, size - hh)
            gt.append((category, _paint(img, categories[category], cx, cy,
                                        hw, hh, rng)))
        observed = category
        if u < noise.junk_rate + noise.flip_rate:
            if rng.uniform() < noise.similarity_bias:
                observed = int(rng.choice(c, p=sim[category]))
            else:
                observed = int(rng.choice(others))
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        samples.append(Sample(img, observed, HARD, category, gt))
    return samples


def gen_background(n, size=32, seed=0):
    """Background-only clutter images (negative-patch source)."""
    images = []
    for idx in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        img = _cluttered_background(size, rng)
        _fuzzy_blobs(img, rng, int(rng.integers(1, 4)))
        images.append(np.clip(img, 0.0, 1.0).astype(np.float32))
    return images


# --- in-memory dataset helpers ------------------------------------------------

def samples_to_arrays(samples):
    """(images NHWC float32, observed labels, true labels) from samples."""
    images = np.stack([s.image for s in samples])
    observed = np.array([s.observed_label for s in samples])
    true = np.array([s.true_label for s in samples])
    return images, observed, true


def as_batch(images):
    """NHWC [0,1] float images to the NCHW float32 network layout."""
    return np.ascontiguousarray(np.asarray(images).transpose(0, 3, 1, 2),
                                dtype=np.float32)


# --- manifests ----------------------------------------------------------------

@dataclass
class ManifestRecord:
    ref: str  # image path, or generator parameter token
    observed_label: int
    source: str
    true_label: int
    gt_boxes: list = field(default_factory=list)


@dataclass
class DatasetManifest:
    records: list
    class_names: list

    def __post_init__(self):
        if not self.records:
            raise ValueError("manifest has no records")
        c = len(self.class_names)
        for r in self.records:
            if not 0 <= r.observed_label < c:
                raise ValueError(f"observed label {r.observed_label} out of range")
            if r.true_label != NO_OBJECT and not 0 <= r.true_label < c:
                raise ValueError(f"true label {r.true_label} out of range")
            if r.source not in (EASY, HARD):
                raise ValueError(f"bad source {r.source!r}")

    @property
    def num_classes(self):
        return len(self.class_names)

    def observed_class_sets(self):
        labels = [r.observed_label for r in self.records]
        return ClassIndexSets.from_labels(labels, self.num_classes)

    def observed_labels(self):
        return np.array([r.observed_label for r in self.records])

    def true_labels(self):
        return np.array([r.true_label for r in self.records])


def _format_boxes(gt_boxes):
    return ";".join(f"{cls}:{b.x1}:{b.y1}:{b.x2}:{b.y2}" for cls, b in gt_boxes)


def _parse_boxes(text):
    boxes = []
    if text:
        for chunk in text.split(";"):
            cls, x1, y1, x2, y2 = chunk.split(":")
            boxes.append((int(cls), Box(int(x1), int(y1), int(x2), int(y2))))
    return boxes


def save_manifest(manifest, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["path_or_params", "observed_label", "source",
                         "true_label", "gt_boxes"])
        writer.writerow(["#classes"] + list(manifest.class_names))
        for r in manifest.records:
            writer.writerow([r.ref, r.observed_label, r.source, r.true_label,
                             _format_boxes(r.gt_boxes)])


def load_manifest(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header[:2] != ["path_or_params", "observed_label"]:
            raise ValueError(f"{path}: not a manifest file")
        names_row = next(reader)
        if names_row[0] != "#classes":
            raise ValueError(f"{path}: missing class-name row")
        class_names = names_row[1:]
        records = [ManifestRecord(ref, int(obs), source, int(true),
                                  _parse_boxes(boxes))
                   for ref, obs, source, true, boxes in reader]
    return DatasetManifest(records, class_names)


def split(manifest, fractions, seed):
    """Deterministic stratified split by true label.

    Within each stratum, shuffled samples are allocated so cumulative
    per-split counts track the target fractions (largest running deficit
    first, ties to the earlier split). The splits are disjoint and their
    union is the input.
    """
    fractions = [float(f) for f in fractions]
    if any(f <= 0 for f in fractions):
        raise ValueError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must sum to 1")
    nsplits = len(fractions)
    rng = np.random.default_rng(seed)
    by_class = {}
    for i, r in enumerate(manifest.records):
        by_class.setdefault(r.true_label, []).append(i)
    assignment = {}
    targets = np.zeros(nsplits)
    allocated = np.zeros(nsplits, dtype=int)
    for label in sorted(by_class):
        idx = np.array(by_class[label])
        if len(idx) < nsplits:
            raise ValueError(f"class {label} has {len(idx)} samples, fewer "
                             f"than {nsplits} splits")
        idx = idx[rng.permutation(len(idx))]
        counts = np.floor(np.array(fractions) * len(idx)).astype(int)
        targets += np.array(fractions) * len(idx)
        for _ in range(len(idx) - counts.sum()):
            deficit = targets - (allocated + counts)
            counts[int(np.argmax(deficit))] += 1
        start = 0
        for s, cnt in enumerate(counts):
            for i in idx[start:start + cnt]:
                assignment[int(i)] = s
            start += cnt
        allocated += counts
    outs = []
    for s in range(nsplits):
        recs = [r for i, r in enumerate(manifest.records) if assignment[i] == s]
        outs.append(DatasetManifest(recs, manifest.class_names))
    return tuple(outs)


# --- image files ---------------------------------------------------------------

def write_ppm(path, image):
    """Binary P6 dump of a float [0,1] or uint8 image."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(img).tobytes())


def _read_pnm_tokens(data, count):
    # header tokens separated by whitespace, '#' comments run to newline
    tokens = []
    pos = 0
    while len(tokens) < count:
        ch = data[pos:pos + 1]
        if not ch:
            raise ValueError("truncated header")
        if ch == b"#":
            pos = data.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(data) and not data[end:end + 1].isspace():
                end += 1
            tokens.append(data[pos:end])
            pos = end
    return tokens, pos + 1  # single whitespace after the last token


def _read_pnm(data):
    magic = data[:2]
    tokens, off = _read_pnm_tokens(data, 4)
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError("only maxval 255 supported")
    channels = 3 if magic == b"P6" else 1
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * channels, offset=off)
    img = pix.reshape(h, w, channels).astype(np.float32) / 255.0
    return np.repeat(img, 3, axis=2) if channels == 1 else img


def _read_bmp(data):
    if data[:2] != b"BM":
        raise ValueError("not a BMP file")
    pixel_off = int.from_bytes(data[10:14], "little")
    header_size = int.from_bytes(data[14:18], "little")
    if header_size < 40:
        raise ValueError("unsupported BMP header")
    w = int.from_bytes(data[18:22], "little", signed=True)
    h = int.from_bytes(data[22:26], "little", signed=True)
    bpp = int.from_bytes(data[28:30], "little")
    compression = int.from_bytes(data[30:34], "little")
    if bpp != 24 or compression != 0:
        raise ValueError("only uncompressed 24-bit BMP supported")
    flipped = h > 0
    h = abs(h)
    stride = (w * 3 + 3) & ~3
    img = np.zeros((h, w, 3), dtype=np.uint8)
    for row in range(h):
        line = np.frombuffer(data, dtype=np.uint8, count=w * 3,
                             offset=pixel_off + row * stride).reshape(w, 3)
        img[h - 1 - row if flipped else row] = line[:, ::-1]  # BGR to RGB
    return img.astype(np.float32) / 255.0


def decode_image(path):
    """Decode a PPM (P6), PGM (P5), or uncompressed 24-bit BMP file to a
    float32 (H, W, 3) array in [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] in (b"P6", b"P5"):
        return _read_pnm(data)
    if data[:2] == b"BM":
        return _read_bmp(data)
    raise ValueError(f"{path}: unsupported image format")


_IMAGE_SUFFIXES = (".ppm", ".pgm", ".bmp")
SOURCE_TAG_FILE = "source.tag"


def load_folder(root):
    """Manifest from a directory-per-class folder of images.

    Each class directory may carry a ``source.tag`` file saying EASY or
    HARD; without one the class defaults to EASY with a warning. Files
    that fail to decode are skipped with a warning each.
    """
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"{root} is not a directory")
    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ValueError(f"{root} has no class directories")
    class_names = [d.name for d in class_dirs]
    records = []
    for label, d in enumerate(class_dirs):
        tag_path = d / SOURCE_TAG_FILE
        if tag_path.exists():
            source = tag_path.read_text().strip().upper()
            if source not in (EASY, HARD):
                raise ValueError(f"{tag_path}: expected EASY or HARD")
        else:
            source = EASY
            warnings.warn(f"{d}: no {SOURCE_TAG_FILE}, defaulting to EASY")
        files = sorted(p for p in d.iterdir()
                       if p.suffix.lower() in _IMAGE_SUFFIXES)
        count = 0
        for p in files:
            try:
                decode_image(p)
            except (ValueError, OSError) as exc:
                warnings.warn(f"skipping {p}: {exc}")
                continue
            records.append(ManifestRecord(str(p), label, source, label))
            count += 1
        if count == 0:
            raise ValueError(f"class directory {d} has no decodable images")
    return DatasetManifest(records, class_names)


def load_images(manifest, root=None):
    """Decode every manifest record into one NHWC float32 array.

    Relative refs are resolved against ``root`` when given.
    """
    base = Path(root) if root is not None else None
    paths = [base / r.ref if base is not None and not Path(r.ref).is_absolute()
             else Path(r.ref) for r in manifest.records]
    return np.stack([decode_image(p) for p in paths])
