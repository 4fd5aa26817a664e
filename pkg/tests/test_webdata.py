"""Synthetic data generators, manifests, splits, and image file IO."""

import numpy as np
import pytest

from wslc import webdata
from wslc.localize import Box
from wslc.webdata import (
    EASY,
    HARD,
    NO_OBJECT,
    DatasetManifest,
    ManifestRecord,
    NoiseModel,
    as_batch,
    decode_image,
    default_categories,
    gen_background,
    gen_easy,
    gen_hard,
    load_folder,
    load_images,
    load_manifest,
    samples_to_arrays,
    save_manifest,
    split,
    visual_similarity,
    write_ppm,
)

CATS8 = default_categories(8)
SIM8 = visual_similarity(CATS8)


class TestCategories:
    def test_default_count_range(self):
        assert len(default_categories(8)) == 8
        assert len(default_categories(16)) == 16
        with pytest.raises(ValueError):
            default_categories(17)

    def test_similarity_rows_normalized_off_diagonal(self):
        sim = visual_similarity(CATS8)
        assert np.allclose(np.diag(sim), 0.0)
        np.testing.assert_allclose(sim.sum(axis=1), 1.0, atol=1e-12)

    def test_lookalike_pairs_dominate(self):
        # the catalog pairs categories (2i, 2i+1) as look-alikes
        sim = visual_similarity(CATS8)
        for i in range(0, 8, 2):
            assert sim[i].argmax() == i + 1
            assert sim[i + 1].argmax() == i


class TestNoiseModel:
    def test_valid_ranges_enforced(self):
        with pytest.raises(ValueError):
            NoiseModel(flip_rate=1.0)
        with pytest.raises(ValueError):
            NoiseModel(flip_rate=0.6, junk_rate=0.5)
        with pytest.raises(ValueError):
            NoiseModel(similarity_bias=1.5)
        NoiseModel(flip_rate=0.3, similarity_bias=0.8, junk_rate=0.05)


class TestGenEasy:
    def test_centered_and_large(self):
        for s in gen_easy(0, 20, CATS8, size=32, seed=5):
            assert len(s.gt_boxes) == 1
            cls, box = s.gt_boxes[0]
            assert cls == 0
            bx = (box.x1 + box.x2) / 2.0
            by = (box.y1 + box.y2) / 2.0
            # drawn center is within 5% of image center by construction;
            # rasterized extents add up to a pixel of slack
            assert abs(bx - 16.0) <= 0.05 * 32 + 1.0
            assert abs(by - 16.0) <= 0.05 * 32 + 1.0
            frac = box.area / (32.0 * 32.0)
            assert 0.30 <= frac <= 0.75

    def test_labels_always_clean(self):
        for s in gen_easy(3, 25, CATS8, size=16, seed=1):
            assert s.observed_label == s.true_label == 3
            assert s.source == EASY

    def test_bit_identical_regeneration(self):
        a = gen_easy(2, 5, CATS8, size=32, seed=9)
        b = gen_easy(2, 5, CATS8, size=32, seed=9)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image, sb.image)

    def test_image_range_and_dtype(self):
        s = gen_easy(1, 1, CATS8, size=32, seed=0)[0]
        assert s.image.dtype == np.float32
        assert s.image.shape == (32, 32, 3)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0

    def test_unknown_category_rejected(self):
        with pytest.raises(ValueError):
            gen_easy(8, 1, CATS8)


class TestGenHard:
    def test_noiseless_labels_correct(self):
        clean = NoiseModel()
        for s in gen_hard(2, 30, clean, SIM8, CATS8, size=16, seed=3):
            assert s.observed_label == s.true_label == 2
            assert s.source == HARD
            assert any(cls == 2 for cls, _ in s.gt_boxes)

    def test_flip_fraction_concentrates(self):
        # binomial: 3 sigma for n=10000 at rho=0.3 is 0.0137 < 0.015
        noise = NoiseModel(flip_rate=0.3, similarity_bias=0.5)
        samples = gen_hard(0, 10000, noise, SIM8, CATS8, size=16, seed=7)
        flipped = np.mean([s.observed_label != s.true_label for s in samples])
        assert abs(flipped - 0.3) <= 0.015

    def test_full_bias_directs_flips_to_single_neighbor(self):
        cats = default_categories(4)
        sim = np.zeros((4, 4))
        sim[0, 1] = sim[1, 0] = 1.0
        sim[2, 3] = sim[3, 2] = 1.0
        noise = NoiseModel(flip_rate=0.4, similarity_bias=1.0)
        samples = gen_hard(0, 300, noise, sim, cats, size=16, seed=2)
        flips = {s.observed_label for s in samples if s.observed_label != 0}
        assert flips == {1}

    def test_junk_has_no_objects(self):
        noise = NoiseModel(junk_rate=0.5)
        samples = gen_hard(1, 200, noise, SIM8, CATS8, size=16, seed=4)
        junk = [s for s in samples if s.true_label == NO_OBJECT]
        assert 60 <= len(junk) <= 140
        for s in junk:
            assert s.gt_boxes == []
            assert s.observed_label == 1

    def test_distractors_recorded(self):
        samples = gen_hard(0, 50, NoiseModel(), SIM8, CATS8, size=32, seed=6)
        assert any(any(cls != 0 for cls, _ in s.gt_boxes) for s in samples)

    def test_instances_smaller_than_easy(self):
        for s in gen_hard(0, 30, NoiseModel(), SIM8, CATS8, size=32, seed=8):
            primary = max(b.area for cls, b in s.gt_boxes if cls == 0)
            assert primary <= 0.55 * 32 * 32

    def test_deterministic(self):
        noise = NoiseModel(flip_rate=0.2, similarity_bias=0.5, junk_rate=0.1)
        a = gen_hard(5, 8, noise, SIM8, CATS8, size=32, seed=11)
        b = gen_hard(5, 8, noise, SIM8, CATS8, size=32, seed=11)
        for sa, sb in zip(a, b):
            np.testing.assert_array_equal(sa.image, sb.image)
            assert sa.observed_label == sb.observed_label

    def test_bad_similarity_rejected(self):
        with pytest.raises(ValueError):
            gen_hard(0, 1, NoiseModel(), np.eye(8), CATS8)


class TestArrays:
    def test_samples_to_arrays_and_batch_layout(self):
        samples = gen_easy(0, 3, CATS8, size=16, seed=0)
        images, observed, true = samples_to_arrays(samples)
        assert images.shape == (3, 16, 16, 3)
        np.testing.assert_array_equal(observed, [0, 0, 0])
        batch = as_batch(images)
        assert batch.shape == (3, 3, 16, 16)
        assert batch.dtype == np.float32
        np.testing.assert_array_equal(batch[0, 1], images[0, :, :, 1])

    def test_background_images(self):
        imgs = gen_background(4, size=16, seed=3)
        assert len(imgs) == 4
        assert imgs[0].shape == (16, 16, 3)


class TestManifest:
    def make(self):
        records = [
            ManifestRecord("a.ppm", 0, EASY, 0, [(0, Box(1, 2, 5, 6))]),
            ManifestRecord("b.ppm", 1, HARD, 0, []),
            ManifestRecord("c.ppm", 1, HARD, NO_OBJECT,
                           [(1, Box(0, 0, 3, 3)), (0, Box(2, 2, 8, 9))]),
        ]
        return DatasetManifest(records, ["cat", "dog"])

    def test_roundtrip(self, tmp_path):
        m = self.make()
        path = tmp_path / "manifest.csv"
        save_manifest(m, path)
        back = load_manifest(path)
        assert back.class_names == ["cat", "dog"]
        assert len(back.records) == 3
        assert back.records[0].gt_boxes == [(0, Box(1, 2, 5, 6))]
        assert back.records[2].true_label == NO_OBJECT
        assert back.records[2].gt_boxes[1][1].coords == (2, 2, 8, 9)

    def test_observed_class_sets(self):
        sets = self.make().observed_class_sets()
        np.testing.assert_array_equal(sets.sets[0], [0])
        np.testing.assert_array_equal(sets.sets[1], [1, 2])

    def test_bad_label_rejected(self):
        with pytest.raises(ValueError):
            DatasetManifest([ManifestRecord("x", 5, EASY, 0)], ["a", "b"])


class TestSplit:
    def balanced_manifest(self, per_class=25, classes=4):
        records = []
        for c in range(classes):
            for i in range(per_class):
                records.append(ManifestRecord(f"{c}_{i}", c, EASY, c))
        return DatasetManifest(records, [f"c{i}" for i in range(classes)])

    def test_stratified_80_10_10(self):
        m = self.balanced_manifest()
        train, val, test = split(m, (0.8, 0.1, 0.1), seed=0)
        assert (len(train.records), len(val.records), len(test.records)) == (80, 10, 10)
        for part, target in ((train, 20), (val, 2.5), (test, 2.5)):
            for c in range(4):
                n = sum(1 for r in part.records if r.true_label == c)
                assert abs(n - target) <= 1

    def test_deterministic(self):
        m = self.balanced_manifest()
        a = split(m, (0.5, 0.5), seed=42)
        b = split(m, (0.5, 0.5), seed=42)
        for pa, pb in zip(a, b):
            assert [r.ref for r in pa.records] == [r.ref for r in pb.records]

    def test_partition_property(self):
        m = self.balanced_manifest(per_class=11, classes=3)
        parts = split(m, (0.6, 0.2, 0.2), seed=1)
        refs = [r.ref for p in parts for r in p.records]
        assert sorted(refs) == sorted(r.ref for r in m.records)
        assert len(set(refs)) == len(refs)

    def test_small_class_rejected(self):
        records = [ManifestRecord("a", 0, EASY, 0),
                   ManifestRecord("b", 1, EASY, 1),
                   ManifestRecord("c", 1, EASY, 1)]
        m = DatasetManifest(records, ["x", "y"])
        with pytest.raises(ValueError, match="fewer"):
            split(m, (0.5, 0.3, 0.2), seed=0)

    def test_bad_fractions_rejected(self):
        m = self.balanced_manifest()
        with pytest.raises(ValueError):
            split(m, (0.5, 0.4), seed=0)


class TestImageIO:
    def test_ppm_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        img = (rng.uniform(size=(7, 5, 3)) * 255).astype(np.uint8)
        path = tmp_path / "img.ppm"
        write_ppm(path, img)
        back = decode_image(path)
        np.testing.assert_array_equal((back * 255).round().astype(np.uint8), img)

    def test_ppm_header(self, tmp_path):
        path = tmp_path / "img.ppm"
        write_ppm(path, np.zeros((4, 6, 3)))
        assert path.read_bytes().startswith(b"P6\n6 4\n255\n")

    def test_pgm_decodes_to_three_channels(self, tmp_path):
        path = tmp_path / "img.pgm"
        pix = np.arange(12, dtype=np.uint8).reshape(3, 4)
        path.write_bytes(b"P5\n4 3\n255\n" + pix.tobytes())
        img = decode_image(path)
        assert img.shape == (3, 4, 3)
        np.testing.assert_allclose(img[:, :, 0], pix / 255.0)
        np.testing.assert_array_equal(img[:, :, 0], img[:, :, 2])

    def test_pnm_comment_in_header(self, tmp_path):
        path = tmp_path / "img.ppm"
        path.write_bytes(b"P6\n# a comment\n2 1\n255\n" + bytes(6))
        assert decode_image(path).shape == (1, 2, 3)

    def test_bmp_24bit(self, tmp_path):
        # 2x2 bottom-up BMP: rows padded to 4 bytes, BGR order
        w, h = 2, 2
        stride = (w * 3 + 3) & ~3
        pixels = {(0, 0): (255, 0, 0), (0, 1): (0, 255, 0),
                  (1, 0): (0, 0, 255), (1, 1): (255, 255, 255)}
        rows = b""
        for row in range(h - 1, -1, -1):
            line = b""
            for col in range(w):
                r, g, b = pixels[(row, col)]
                line += bytes((b, g, r))
            rows += line + bytes(stride - len(line))
        header = (b"BM" + (54 + len(rows)).to_bytes(4, "little") + bytes(4)
                  + (54).to_bytes(4, "little")
                  + (40).to_bytes(4, "little")
                  + w.to_bytes(4, "little") + h.to_bytes(4, "little")
                  + (1).to_bytes(2, "little") + (24).to_bytes(2, "little")
                  + bytes(24))
        path = tmp_path / "img.bmp"
        path.write_bytes(header + rows)
        img = decode_image(path)
        np.testing.assert_array_equal((img[0, 0] * 255).astype(int), [255, 0, 0])
        np.testing.assert_array_equal((img[1, 1] * 255).astype(int), [255, 255, 255])

    def test_unknown_format_rejected(self, tmp_path):
        path = tmp_path / "img.xyz"
        path.write_bytes(b"GIF89a....")
        with pytest.raises(ValueError):
            decode_image(path)


class TestLoadFolder:
    def make_tree(self, tmp_path, with_tags=True):
        for cls, n in (("apple", 3), ("banana", 3)):
            d = tmp_path / cls
            d.mkdir()
            for i in range(n):
                write_ppm(d / f"{i}.ppm", np.full((4, 4, 3), 0.5))
            if with_tags:
                (d / "source.tag").write_text("HARD" if cls == "banana" else "EASY")
        return tmp_path

    def test_two_classes_three_images(self, tmp_path):
        m = load_folder(self.make_tree(tmp_path))
        assert m.class_names == ["apple", "banana"]
        assert len(m.records) == 6
        assert {r.source for r in m.records if r.observed_label == 1} == {HARD}
        for r in m.records:
            assert r.true_label == r.observed_label

    def test_missing_sidecar_defaults_easy_with_warning(self, tmp_path):
        tree = self.make_tree(tmp_path, with_tags=False)
        with pytest.warns(UserWarning, match="source.tag"):
            m = load_folder(tree)
        assert {r.source for r in m.records} == {EASY}

    def test_undecodable_file_skipped_with_warning(self, tmp_path):
        tree = self.make_tree(tmp_path)
        (tree / "apple" / "bad.ppm").write_bytes(b"not an image")
        with pytest.warns(UserWarning, match="skipping"):
            m = load_folder(tree)
        assert len(m.records) == 6

    def test_empty_class_dir_rejected(self, tmp_path):
        tree = self.make_tree(tmp_path)
        (tree / "empty").mkdir()
        (tree / "empty" / "source.tag").write_text("EASY")
        with pytest.raises(ValueError, match="empty"):
            load_folder(tree)

    def test_load_images(self, tmp_path):
        m = load_folder(self.make_tree(tmp_path))
        imgs = load_images(m)
        assert imgs.shape == (6, 4, 4, 3)
        np.testing.assert_allclose(imgs, 0.5, atol=1 / 255)
