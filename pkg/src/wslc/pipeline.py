"""Pipeline stages over persisted artifacts.

Every stage reads its declared inputs from the output directory, writes
its declared outputs there, and returns a one-line summary string. All
randomness is derived from the config's global seed plus the stage name,
so any stage can be rerun in isolation and reproduce its artifacts
byte for byte.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import curriculum, detect, localize, nncore, webdata
from .config import derive_seed

DATA_DIR = "data"
METRICS_DIR = "metrics"
SUBCATS_DIR = "subcats"


def parallel_map(fn, items, threads=1):
    """Order-preserving map; results are identical for any thread count."""
    if threads <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def _write_metrics(out, name, rows):
    path = Path(out) / METRICS_DIR / f"{name}.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write("metric,value\n")
        for key, value in rows:
            f.write(f"{key},{value:.17g}\n" if isinstance(value, float)
                    else f"{key},{value}\n")


def _read_metrics(path):
    rows = []
    with open(path) as f:
        next(f)
        for line in f:
            key, value = line.rstrip("\n").split(",", 1)
            rows.append((key, value))
    return rows


def _manifest_path(out, name):
    return Path(out) / DATA_DIR / f"{name}.csv"


def _load_split(out, name):
    manifest = webdata.load_manifest(_manifest_path(out, name))
    images = webdata.load_images(manifest, root=Path(out) / DATA_DIR)
    return manifest, images


def _dump_samples(samples, name, data_dir, manifest_class_names):
    records = []
    for i, s in enumerate(samples):
        ref = f"images/{name}_{i:04d}.ppm"
        webdata.write_ppm(data_dir / ref, s.image)
        records.append(webdata.ManifestRecord(ref, s.observed_label, s.source,
                                              s.true_label, list(s.gt_boxes)))
    manifest = webdata.DatasetManifest(records, manifest_class_names)
    webdata.save_manifest(manifest, data_dir / f"{name}.csv")
    return manifest


def class_names_for(cfg):
    return [c.name for c in webdata.default_categories(cfg.data.num_categories)]


def run_gen_data(cfg, out, threads=1):
    """Generate all synthetic splits and write images plus manifests."""
    data_dir = Path(out) / DATA_DIR
    (data_dir / "images").mkdir(parents=True, exist_ok=True)
    cats = webdata.default_categories(cfg.data.num_categories)
    names = [c.name for c in cats]
    sim = webdata.visual_similarity(cats)
    noise = cfg.data.noise_model()
    clean = webdata.NoiseModel()
    d = cfg.data
    splits = {
        "easy_train": [s for c in range(len(cats)) for s in webdata.gen_easy(
            c, d.easy_per_class, cats, d.image_size,
            derive_seed(cfg.seed, "data-easy"))],
        "hard_train": [s for c in range(len(cats)) for s in webdata.gen_hard(
            c, d.hard_per_class, noise, sim, cats, d.image_size,
            derive_seed(cfg.seed, "data-hard"))],
        "test": [s for c in range(len(cats)) for s in webdata.gen_hard(
            c, d.test_per_class, clean, sim, cats, d.image_size,
            derive_seed(cfg.seed, "data-test"))],
        "loc_easy": [s for c in range(len(cats)) for s in webdata.gen_easy(
            c, d.loc_easy_per_class, cats, d.loc_image_size,
            derive_seed(cfg.seed, "data-loc-easy"))],
        "loc_hard": [s for c in range(len(cats)) for s in webdata.gen_hard(
            c, d.loc_hard_per_class, noise, sim, cats, d.loc_image_size,
            derive_seed(cfg.seed, "data-loc-hard"))],
        "det_test": [s for c in range(len(cats)) for s in webdata.gen_hard(
            c, d.test_per_class, clean, sim, cats, d.loc_image_size,
            derive_seed(cfg.seed, "data-det-test"))],
    }
    total = 0
    for name, samples in splits.items():
        _dump_samples(samples, name, data_dir, names)
        total += len(samples)
    np.savetxt(data_dir / "similarity.csv", sim, delimiter=",", fmt="%.17g")
    _write_metrics(out, "gen_data",
                   [("num_images", total), ("num_classes", len(cats))])
    return f"gen-data: {total} images across {len(splits)} splits"


def run_train_initial(cfg, out, threads=1):
    manifest, images = _load_split(out, "easy_train")
    batch = webdata.as_batch(images)
    spec = cfg.model_spec()
    tcfg = cfg.stage1.to_train_config(derive_seed(cfg.seed, "stage1"))
    model, log = curriculum.train_stage1(batch, manifest.observed_labels(),
                                         spec, tcfg)
    nncore.save_checkpoint(model, Path(out) / "stage1.ckpt")
    curriculum.save_loss_log(log, Path(out) / "loss_stage1.csv")
    acc = float((curriculum.predict_probs(model, batch).argmax(1)
                 == manifest.observed_labels()).mean())
    _write_metrics(out, "train_initial",
                   [("train_accuracy", acc), ("final_loss", log[-1][2]),
                    ("iterations", len(log))])
    return f"train-initial: {len(log)} iters, train accuracy {acc:.3f}"


def _load_model(cfg, out, name):
    spec = cfg.model_spec()
    return nncore.load_checkpoint(Path(out) / name, spec)


def run_build_graph(cfg, out, threads=1):
    manifest, images = _load_split(out, "easy_train")
    model = _load_model(cfg, out, "stage1.ckpt")
    conf = curriculum.confusion_matrix(model, webdata.as_batch(images),
                                       manifest.observed_class_sets())
    np.savetxt(Path(out) / "confusion.csv", conf, delimiter=",", fmt="%.17g")
    graph = curriculum.sparsify_topk(conf, cfg.graph.top_k)
    curriculum.save_graph(graph, Path(out) / "graph.txt")
    self_mass = float(np.mean([dict(row).get(j, 0.0)
                               for j, row in enumerate(graph.rows)]))
    _write_metrics(out, "build_graph",
                   [("top_k", graph.k), ("mean_self_weight", self_mass)])
    return f"build-graph: top-{graph.k}, mean self weight {self_mass:.3f}"


def run_finetune(cfg, out, identity=False, threads=1):
    manifest, images = _load_split(out, "hard_train")
    model = _load_model(cfg, out, "stage1.ckpt")
    if identity:
        graph = curriculum.RelationshipGraph.identity(cfg.data.num_categories,
                                                      cfg.graph.top_k)
    else:
        graph = curriculum.load_graph(Path(out) / "graph.txt")
    tcfg = cfg.stage2.to_train_config(derive_seed(cfg.seed, "stage2"))
    tuned, log = curriculum.finetune_stage2(model, webdata.as_batch(images),
                                            manifest.observed_labels(), graph,
                                            tcfg)
    suffix = "_identity" if identity else ""
    nncore.save_checkpoint(tuned, Path(out) / f"stage2{suffix}.ckpt")
    curriculum.save_loss_log(log, Path(out) / f"loss_stage2{suffix}.csv")
    final = log[-1][2] if log else float("nan")
    _write_metrics(out, f"finetune{suffix}",
                   [("iterations", len(log)), ("final_loss", final),
                    ("graph", "identity" if identity else "relationship")])
    kind = "identity" if identity else "graph"
    return f"finetune ({kind}): {len(log)} iters, final loss {final:.4f}"


def _detection_model(cfg, out):
    for name in ("stage2.ckpt", "stage1.ckpt"):
        if (Path(out) / name).exists():
            return _load_model(cfg, out, name), name
    raise FileNotFoundError("no stage1.ckpt or stage2.ckpt in output dir")


def _propose_and_embed(model, images, max_proposals, threads):
    """Per image: proposals plus embeddings of their crops."""
    def one(img):
        boxes = localize.propose(img, max_proposals)
        embeds = localize.embed_boxes(model, img, boxes)
        return boxes, embeds
    return parallel_map(one, list(images), threads)


def _gt_hit_fraction(boxes_by_image, gt_by_image, iou_thresh=0.5):
    total, hits = 0, 0
    for image_id, boxes in boxes_by_image:
        gts = gt_by_image.get(image_id, [])
        for b in boxes:
            total += 1
            hits += any(localize.iou(b, g) >= iou_thresh for _cls, g in gts)
    return hits / total if total else 0.0


def run_localize(cfg, out, threads=1):
    """Seed E-LDA detectors on easy images and clean up the hard ones."""
    model, model_name = _detection_model(cfg, out)
    easy_m, easy_images = _load_split(out, "loc_easy")
    hard_m, hard_images = _load_split(out, "loc_hard")
    lc = cfg.localize
    proposals = _propose_and_embed(model, hard_images, lc.max_proposals, threads)
    pool = np.concatenate([e for _b, e in proposals])
    stats = localize.neg_stats(pool, lam=lc.shrinkage or None)
    full_embeds = parallel_map(
        lambda img: localize.embed_boxes(
            model, img, [localize.Box(0, 0, img.shape[1], img.shape[0])])[0],
        list(easy_images), threads)

    gt_by_image = {}
    for i, r in enumerate(hard_m.records):
        gt_by_image[Path(r.ref).stem] = r.gt_boxes

    subcats_dir = Path(out) / SUBCATS_DIR
    subcats_dir.mkdir(parents=True, exist_ok=True)
    hard_obs = hard_m.observed_labels()
    retained_boxes, raw_boxes = [], []
    cluster_counts = []
    for c, name in enumerate(easy_m.class_names):
        detectors = [localize.elda_fit(full_embeds[i], stats, seed_id=f"seed{i}")
                     for i in range(len(easy_m.records))
                     if easy_m.records[i].observed_label == c]
        candidates = []
        for i in np.flatnonzero(hard_obs == c):
            image_id = Path(hard_m.records[i].ref).stem
            boxes, embeds = proposals[i]
            raw_boxes.append((image_id, boxes))
            candidates.extend((image_id, b, e) for b, e in zip(boxes, embeds))
        clusters = localize.discover_subcategories(
            detectors, candidates, k=lc.knn_k,
            affinity_threshold=lc.affinity_tau, min_members=lc.min_members,
            density_percentile=lc.density_percentile)
        localize.write_subcategories(clusters, subcats_dir / f"{name}.txt")
        cluster_counts.append(len(clusters))
        for cl in clusters:
            by_img = {}
            for image_id, box, _e in cl.members:
                by_img.setdefault(image_id, []).append(box)
            retained_boxes.extend(by_img.items())
    retained_frac = _gt_hit_fraction(retained_boxes, gt_by_image)
    raw_frac = _gt_hit_fraction(raw_boxes, gt_by_image)
    _write_metrics(out, "localize",
                   [("model", model_name),
                    ("clusters", int(np.sum(cluster_counts))),
                    ("retained_gt_fraction", retained_frac),
                    ("raw_proposal_gt_fraction", raw_frac)])
    return (f"localize: {int(np.sum(cluster_counts))} subcategories, "
            f"retained on-object {retained_frac:.3f} vs raw {raw_frac:.3f}")


def _embed_members(model, members, images_by_id):
    embeds = []
    for image_id, box, in members:
        img = images_by_id[image_id]
        embeds.append(localize.embed_boxes(model, img, [box])[0])
    return embeds


def run_train_detectors(cfg, out, threads=1):
    """Per-category linear SVMs over localized positives."""
    model, _name = _detection_model(cfg, out)
    hard_m, hard_images = _load_split(out, "loc_hard")
    images_by_id = {Path(r.ref).stem: hard_images[i]
                    for i, r in enumerate(hard_m.records)}
    dc = cfg.detect
    graph = (curriculum.load_graph(Path(out) / "graph.txt")
             if (Path(out) / "graph.txt").exists() else None)
    whitelist = (localize.load_whitelist(dc.whitelist, hard_m.class_names)
                 if dc.whitelist else set())

    positives = {}
    for c, name in enumerate(hard_m.class_names):
        path = Path(out) / SUBCATS_DIR / f"{name}.txt"
        members = [m for cl in localize.read_subcategories(path) for m in cl] \
            if path.exists() else []
        positives[c] = members

    if dc.use_augmentation:
        prop_cache = {}
        for c in positives:
            by_img = {}
            for image_id, box in positives[c]:
                by_img.setdefault(image_id, []).append(box)
            props = {}
            for image_id in by_img:
                if image_id not in prop_cache:
                    prop_cache[image_id] = localize.propose(
                        images_by_id[image_id], cfg.localize.max_proposals)
                props[image_id] = prop_cache[image_id]
            flat = [(img, b) for img, boxes in by_img.items() for b in boxes]
            positives[c] = localize.edgebox_augment(flat, props, dc.augment_iou)

    if graph is not None and whitelist:
        base = {c: list(positives[c]) for c in positives}
        for c in positives:
            for other in localize.category_expand(graph, c, whitelist):
                positives[c] = positives[c] + base[other]

    rng_seed = derive_seed(cfg.seed, "detectors")
    svm_params = {}
    counts = []
    size = cfg.data.loc_image_size
    for c, name in enumerate(hard_m.class_names):
        members = positives[c]
        if not members:
            counts.append(0)
            continue
        pos_embeds = np.stack(_embed_members(model, members, images_by_id))
        n_neg = dc.neg_per_pos * len(pos_embeds)
        backgrounds = webdata.gen_background(
            max(1, n_neg // 4), size, seed=derive_seed(cfg.seed, f"neg-{c}"))
        rng = np.random.default_rng(np.random.SeedSequence([rng_seed, c]))
        neg_embeds = []
        for _ in range(n_neg):
            img = backgrounds[int(rng.integers(len(backgrounds)))]
            w = int(rng.integers(size // 4, size - 1))
            h = int(rng.integers(size // 4, size - 1))
            x = int(rng.integers(0, size - w))
            y = int(rng.integers(0, size - h))
            box = localize.Box(x, y, x + w, y + h)
            neg_embeds.append(localize.embed_boxes(model, img, [box])[0])
        svm = detect.svm_train(pos_embeds, np.stack(neg_embeds), c=dc.svm_c,
                               epochs=dc.svm_epochs,
                               seed=derive_seed(cfg.seed, f"svm-{c}"))
        svm_params[f"{name}.w"] = svm.w.astype(np.float32)
        svm_params[f"{name}.b"] = np.array([svm.b], dtype=np.float32)
        counts.append(len(pos_embeds))
    nncore.write_param_file(svm_params, Path(out) / "detectors.ckpt")
    _write_metrics(out, "train_detectors",
                   [("classes_with_detectors", sum(1 for n in counts if n)),
                    ("total_positives", int(np.sum(counts)))])
    return (f"train-detectors: {sum(1 for n in counts if n)} classes, "
            f"{int(np.sum(counts))} positives")


def _load_detectors(cfg, out, class_names):
    params = nncore.read_param_file(Path(out) / "detectors.ckpt")
    svms = {}
    for c, name in enumerate(class_names):
        if f"{name}.w" in params:
            svms[c] = detect.LinearSVM(params[f"{name}.w"].astype(np.float64),
                                       float(params[f"{name}.b"][0]),
                                       cfg.detect.svm_c)
    return svms


def run_detect(cfg, out, threads=1):
    model, _name = _detection_model(cfg, out)
    test_m, test_images = _load_split(out, "det_test")
    svms = _load_detectors(cfg, out, test_m.class_names)
    def one(item):
        i, img = item
        return detect.detect(model, svms, img,
                             image_id=Path(test_m.records[i].ref).stem,
                             max_proposals=cfg.localize.max_proposals,
                             nms_thresh=cfg.detect.nms_iou)
    all_dets = parallel_map(one, list(enumerate(test_images)), threads)
    detections = [d for dets in all_dets for d in dets]
    detect.write_detections_csv(detections, Path(out) / "detections.csv")
    _write_metrics(out, "detect", [("num_detections", len(detections))])
    return f"detect: {len(detections)} detections over {len(test_images)} images"


def run_eval_cls(cfg, out, threads=1):
    """Classification accuracy and entropy diagnostics."""
    test_m, test_images = _load_split(out, "test")
    easy_m, easy_images = _load_split(out, "easy_train")
    hard_m, hard_images = _load_split(out, "hard_train")
    test_b = webdata.as_batch(test_images)
    true = test_m.true_labels()
    rows = []
    for name in ("stage1.ckpt", "stage2.ckpt", "stage2_identity.ckpt"):
        if not (Path(out) / name).exists():
            continue
        model = _load_model(cfg, out, name)
        preds = curriculum.predict_probs(model, test_b).argmax(1)
        rows.append((f"{Path(name).stem}_test_accuracy",
                     float((preds == true).mean())))
    if (Path(out) / "stage1.ckpt").exists():
        m1 = _load_model(cfg, out, "stage1.ckpt")
        ent_easy = curriculum.mean_prediction_entropy(
            m1, webdata.as_batch(easy_images))
        ent_hard = curriculum.mean_prediction_entropy(
            m1, webdata.as_batch(hard_images))
        rows += [("stage1_entropy_easy", ent_easy),
                 ("stage1_entropy_hard", ent_hard)]
    _write_metrics(out, "eval_cls", rows)
    with open(Path(out) / "eval_cls.csv", "w") as f:
        f.write("metric,value\n")
        for key, value in rows:
            f.write(f"{key},{value:.17g}\n")
    summary = ", ".join(f"{k}={v:.3f}" for k, v in rows)
    return f"eval-cls: {summary}"


def run_eval_det(cfg, out, threads=1):
    test_m, _imgs = _load_split(out, "det_test")
    detections = detect.read_detections_csv(Path(out) / "detections.csv")
    curves = []
    for c, name in enumerate(test_m.class_names):
        gt = {}
        for r in test_m.records:
            boxes = [b for cls, b in r.gt_boxes if cls == c]
            if boxes:
                gt[Path(r.ref).stem] = boxes
        class_dets = [d for d in detections if d.class_id == c]
        if not gt:
            curves.append(detect.PRCurve([], 0.0, 0, len(class_dets)))
            continue
        curves.append(detect.average_precision(class_dets, gt,
                                               cfg.detect.eval_iou))
    detect.write_eval_report(test_m.class_names, curves,
                             Path(out) / "eval_det.csv")
    m_ap = detect.mean_ap(curves)
    _write_metrics(out, "eval_det", [("mAP", m_ap)])
    return f"eval-det: mAP {m_ap:.4f}"


def run_probe(cfg, out, threads=1):
    """Linear probing of the learned embedding on clean test data."""
    test_m, test_images = _load_split(out, "test")
    batch = webdata.as_batch(test_images)
    labels = test_m.true_labels()
    rng = np.random.default_rng(derive_seed(cfg.seed, "probe"))
    order = rng.permutation(len(labels))
    cut = len(labels) // 2
    split = (order[cut:], order[:cut])
    rows = []
    for name in ("stage1.ckpt", "stage2.ckpt"):
        if not (Path(out) / name).exists():
            continue
        model = _load_model(cfg, out, name)
        embeds = np.concatenate(
            [nncore.embed(model, batch[i:i + 256])
             for i in range(0, len(batch), 256)])
        acc = detect.linear_probe(embeds, labels, split, c=cfg.detect.svm_c,
                                  seed=derive_seed(cfg.seed, f"probe-{name}"))
        rows.append((f"{Path(name).stem}_probe_accuracy", float(acc)))
    _write_metrics(out, "probe", rows)
    with open(Path(out) / "probe.csv", "w") as f:
        f.write("metric,value\n")
        for key, value in rows:
            f.write(f"{key},{value:.17g}\n")
    return "probe: " + ", ".join(f"{k}={v:.3f}" for k, v in rows)


def run_report(cfg, out, threads=1):
    """Aggregate stage metrics without recomputing anything."""
    metrics_dir = Path(out) / METRICS_DIR
    if not metrics_dir.is_dir():
        raise FileNotFoundError(f"{metrics_dir} missing; run stages first")
    combined = []
    for path in sorted(metrics_dir.glob("*.csv")):
        for key, value in _read_metrics(path):
            combined.append((path.stem, key, value))
    with open(Path(out) / "report.csv", "w") as f:
        f.write("stage,metric,value\n")
        for stage, key, value in combined:
            f.write(f"{stage},{key},{value}\n")
    tree = {}
    for stage, key, value in combined:
        try:
            parsed = int(value)
        except ValueError:
            try:
                parsed = float(value)
            except ValueError:
                parsed = value
        tree.setdefault(stage, {})[key] = parsed
    with open(Path(out) / "report.json", "w") as f:
        json.dump(tree, f, indent=2, sort_keys=True)
        f.write("\n")
    lines = ["pipeline report", "==============="]
    for stage in sorted(tree):
        lines.append(f"\n[{stage}]")
        for key in sorted(tree[stage]):
            lines.append(f"  {key}: {tree[stage][key]}")
    (Path(out) / "summary.txt").write_text("\n".join(lines) + "\n")
    return f"report: {len(combined)} metrics from {len(tree)} stages"


FULL_PIPELINE = (
    ("gen-data", run_gen_data),
    ("train-initial", run_train_initial),
    ("build-graph", run_build_graph),
    ("finetune", run_finetune),
    ("localize", run_localize),
    ("train-detectors", run_train_detectors),
    ("detect", run_detect),
    ("eval-cls", run_eval_cls),
    ("eval-det", run_eval_det),
    ("probe", run_probe),
    ("report", run_report),
)


def run_full_pipeline(cfg, out, threads=1):
    for name, fn in FULL_PIPELINE:
        print(fn(cfg, out, threads=threads))
    return "full-pipeline: complete"
