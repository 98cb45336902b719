import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from tripletdrn.data import (
    DISTRACTOR_BASE,
    ImageRecord,
    PPMError,
    SynthSpec,
    center_crop,
    class_pattern,
    decode_ppm,
    encode_ppm,
    five_crops,
    generate_groups,
    generate_synthetic,
    load_dataset,
    load_image,
    resize,
    save_dataset,
    save_image,
)
from tripletdrn.tensor import ConfigError

SMALL = SynthSpec(num_classes=4, images_per_class=6, train_per_class=3, queries_per_class=1, distractors=3)


class TestSynthetic:
    def test_split_sizes(self):
        ds = generate_synthetic(SMALL, seed=0)
        assert len(ds.splits["train"]) == 12
        assert len(ds.splits["query"]) == 4
        assert len(ds.splits["gallery"]) == 4 * 2 + 3
        distractors = [r for r in ds.splits["gallery"] if r.label >= DISTRACTOR_BASE]
        assert len({r.label for r in distractors}) == 3

    def test_default_shapes(self):
        spec = SynthSpec()
        ds = generate_synthetic(spec, seed=0)
        n = sum(len(v) for v in ds.splits.values())
        assert n == spec.num_classes * spec.images_per_class + spec.distractors
        assert ds.splits["train"][0].pixels.shape == (3, 32, 32)

    def test_zero_perturbation_identical(self):
        ds = generate_synthetic(SMALL.zero_perturbation(), seed=1)
        recs = [r for split in ds.splits.values() for r in split if r.label == 2]
        for r in recs[1:]:
            assert_array_equal(r.pixels, recs[0].pixels)

    def test_seed_determinism(self):
        a = generate_synthetic(SMALL, seed=5)
        b = generate_synthetic(SMALL, seed=5)
        for split in a.splits:
            assert [r.pixels.tobytes() for r in a.splits[split]] == [r.pixels.tobytes() for r in b.splits[split]]

    def test_pattern_depends_only_on_class(self):
        assert class_pattern(3) == class_pattern(3)
        assert class_pattern(3) != class_pattern(4)

    def test_intra_below_inter(self):
        ds = generate_synthetic(SynthSpec(), seed=0)
        recs = [r for split in ("train", "query", "gallery") for r in ds.splits[split] if r.label < DISTRACTOR_BASE]
        x = np.stack([r.pixels.reshape(-1) for r in recs])
        y = np.array([r.label for r in recs])
        sq = (x * x).sum(1)
        d = np.sqrt(np.maximum(sq[:, None] + sq[None] - 2 * x @ x.T, 0))
        same = (y[:, None] == y[None]) & ~np.eye(len(y), dtype=bool)
        diff = y[:, None] != y[None]
        assert d[same].mean() < d[diff].mean()

    def test_pixels_in_range(self):
        ds = generate_synthetic(SMALL, seed=2)
        for r in ds.splits["train"]:
            assert r.pixels.min() >= 0.0 and r.pixels.max() <= 1.0

    @pytest.mark.parametrize(
        "kw",
        [{"images_per_class": 4, "train_per_class": 3, "queries_per_class": 1}, {"noise": -0.1}, {"image_size": 8}, {"occlusion": 1.5}],
    )
    def test_invalid_specs(self, kw):
        with pytest.raises(ConfigError):
            generate_synthetic(SynthSpec(**kw))

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            SynthSpec.from_dict({"classes": 3})

    def test_groups(self):
        ds = generate_groups(SMALL, seed=0, groups=5, train_per_group=2)
        assert ds.kind == "groups"
        assert len(ds.splits["train"]) == 10 and len(ds.splits["groups"]) == 20
        labels = [r.label for r in ds.splits["groups"]]
        assert all(labels.count(g) == 4 for g in range(5))


def white_1x1():
    return b"P6 1 1 255\n" + bytes([255, 255, 255])


class TestPPM:
    def test_white_pixel(self):
        assert_array_equal(decode_ppm(white_1x1()), np.ones((3, 1, 1)))

    def test_comments_and_whitespace(self):
        raw = b"P6\n# a comment\n2 1\n# another\n255\n" + bytes([0, 0, 0, 255, 128, 0])
        px = decode_ppm(raw)
        assert px.shape == (3, 1, 2)
        assert_allclose(px[:, 0, 1], [1.0, 128 / 255, 0.0])

    def test_encode_decode(self):
        rng = np.random.default_rng(0)
        px = rng.random((3, 5, 7))
        out = decode_ppm(encode_ppm(px))
        assert np.abs(out - px).max() <= 1 / 255

    def test_save_load(self, tmp_path):
        rng = np.random.default_rng(1)
        rec = ImageRecord("x", 3, rng.random((3, 4, 6)))
        save_image(rec, tmp_path / "x.ppm")
        back = load_image(tmp_path / "x.ppm", label=3, id="x")
        assert back.pixels.shape == (3, 4, 6) and np.abs(back.pixels - rec.pixels).max() <= 1 / 255

    @pytest.mark.parametrize(
        "raw",
        [b"", b"P5 1 1 255\n\0", b"P6 1 1 65535\n" + b"\0" * 6, b"P6 0 1 255\n", b"P6 1 1 255\n\xff", b"P6 a 1 255\n\0\0\0"],
    )
    def test_malformed(self, raw):
        with pytest.raises(PPMError):
            decode_ppm(raw)

    def test_truncation_reports_offset(self):
        raw = b"P6 2 2 255\n" + bytes(10)
        with pytest.raises(PPMError) as info:
            decode_ppm(raw)
        assert info.value.offset == len(raw)

    @settings(max_examples=300, deadline=None)
    @given(st.binary(max_size=64))
    def test_fuzz_random_bytes(self, raw):
        try:
            decode_ppm(raw)
        except PPMError:
            pass

    @settings(max_examples=300, deadline=None)
    @given(st.integers(0, 60), st.integers(0, 255), st.integers(0, 59))
    def test_fuzz_mutated_valid_file(self, cut, byte, pos):
        raw = bytearray(encode_ppm(np.random.default_rng(0).random((3, 3, 4))))
        raw[pos % len(raw)] = byte
        try:
            decode_ppm(bytes(raw[: len(raw) - cut]))
        except PPMError:
            pass


class TestGeometry:
    def test_constant_resize(self):
        img = ImageRecord("c", 0, np.full((3, 7, 5), 0.3))
        out = resize(img, 11)
        assert out.pixels.shape == (3, 11, 8)
        assert_allclose(out.pixels, 0.3, atol=1e-15)

    def test_resize_longer_side(self):
        assert resize(ImageRecord("c", 0, np.zeros((3, 20, 40))), 10).pixels.shape == (3, 5, 10)

    def test_resize_square(self):
        assert resize(ImageRecord("c", 0, np.zeros((3, 20, 40))), 10, square=True).pixels.shape == (3, 10, 10)

    def test_identity_resize(self):
        px = np.random.default_rng(2).random((3, 6, 6))
        assert_allclose(resize(ImageRecord("c", 0, px), 6).pixels, px, atol=1e-15)

    def test_center_crop_identity(self):
        px = np.random.default_rng(3).random((3, 6, 6))
        assert_array_equal(center_crop(ImageRecord("c", 0, px), 6).pixels, px)

    def test_center_crop_offset(self):
        px = np.arange(3 * 5 * 5, dtype=float).reshape(3, 5, 5)
        assert_array_equal(center_crop(ImageRecord("c", 0, px), 3).pixels, px[:, 1:4, 1:4])

    def test_five_crops_degenerate(self):
        px = np.random.default_rng(4).random((3, 6, 6))
        crops = five_crops(ImageRecord("c", 0, px), 6)
        assert len(crops) == 5
        for c in crops:
            assert_array_equal(c.pixels, px)

    def test_five_crops_corners(self):
        px = np.arange(3 * 4 * 4, dtype=float).reshape(3, 4, 4)
        crops = five_crops(ImageRecord("c", 0, px), 2)
        assert [c.pixels[0, 0, 0] for c in crops] == [px[0, 1, 1], px[0, 0, 0], px[0, 0, 2], px[0, 2, 0], px[0, 2, 2]]


def test_dataset_directory_round_trip(tmp_path):
    ds = generate_synthetic(SMALL, seed=3)
    save_dataset(ds, tmp_path / "ds")
    manifest = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert manifest["kind"] == "retrieval"
    back = load_dataset(tmp_path / "ds")
    for split, recs in ds.splits.items():
        assert [r.id for r in back.splits[split]] == [r.id for r in recs]
        assert [r.label for r in back.splits[split]] == [r.label for r in recs]
        for a, b in zip(recs, back.splits[split]):
            assert np.abs(a.pixels - b.pixels).max() <= 1 / 255
