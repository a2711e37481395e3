import math
import os

import numpy as np
import pytest
from PIL import Image

from bcdnet.data import (
    AugmentPolicy,
    augment,
    build_manifest,
    dataset_stats,
    decode_png,
    iter_batches,
    make_synth_corpus,
    normalize,
    resize_bilinear,
    rotate_bilinear,
)
from bcdnet.errors import (
    BadConfig,
    DecodeError,
    EmptyClass,
    EmptySplit,
    NoClasses,
    UnsupportedBitDepth,
)

from oracles import resize_bilinear_brute


def write_corpus(root, sizes):
    """Tiny corpus helper: {class_name: image_count}, 8x8 PNGs."""
    rng = np.random.default_rng(0)
    for cname, n in sizes.items():
        d = os.path.join(root, cname)
        os.makedirs(d, exist_ok=True)
        for i in range(n):
            arr = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
            Image.fromarray(arr, "RGB").save(os.path.join(d, f"{i:04d}.png"))


# --- manifest and splits ---

def test_split_sizes_track_7_2_1_within_one():
    for n in (9, 10, 1000):
        root = None
        for seed in (0, 1):
            import tempfile
            with tempfile.TemporaryDirectory() as root:
                write_corpus(root, {"a": n, "b": n})
                m = build_manifest(root, seed=seed)
                counts = m.counts()
                for ci in range(2):
                    tr, va, te = (counts["train"][ci], counts["val"][ci],
                                  counts["test"][ci])
                    assert tr + va + te == n
                    assert abs(tr - 0.7 * n) <= 1.0
                    assert abs(va - 0.2 * n) <= 1.0
                    assert abs(te - 0.1 * n) <= 1.0


def test_split_is_exact_for_nine():
    import tempfile
    with tempfile.TemporaryDirectory() as root:
        write_corpus(root, {"only": 9})
        m = build_manifest(root, seed=0)
        counts = m.counts()
        assert (counts["train"][0], counts["val"][0], counts["test"][0]) \
            == (6, 2, 1)


def test_manifest_is_deterministic_and_disjoint(tmp_path):
    write_corpus(str(tmp_path), {"a": 20, "b": 20})
    m1 = build_manifest(str(tmp_path), seed=5)
    m2 = build_manifest(str(tmp_path), seed=5)
    m3 = build_manifest(str(tmp_path), seed=6)
    assert m1.splits == m2.splits
    assert m1.splits != m3.splits
    all_rel = [rel for s in ("train", "val", "test")
               for _, rel in m1.splits[s]]
    assert len(all_rel) == len(set(all_rel)) == 40


def test_class_indices_follow_sorted_names(tmp_path):
    write_corpus(str(tmp_path), {"zebra": 10, "ant": 10})
    m = build_manifest(str(tmp_path), seed=0)
    assert m.classes == ["ant", "zebra"]
    for ci, rel in m.splits["train"]:
        assert rel.startswith(("ant", "zebra"))
        assert m.classes[ci] == rel.split(os.sep)[0]


def test_manifest_errors(tmp_path):
    with pytest.raises(NoClasses):
        build_manifest(str(tmp_path / "missing"))
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(NoClasses):
        build_manifest(str(empty))
    (empty / "cls").mkdir()
    with pytest.raises(EmptyClass):
        build_manifest(str(empty))
    small = tmp_path / "small"
    write_corpus(str(small), {"a": 2})  # val split comes out empty
    with pytest.raises(EmptySplit):
        build_manifest(str(small))
    with pytest.raises(BadConfig):
        build_manifest(str(small), fractions=(0.5, 0.5, 0.5))


def test_manifest_tsv_format(tmp_path):
    write_corpus(str(tmp_path / "c"), {"a": 10, "b": 10})
    m = build_manifest(str(tmp_path / "c"), seed=0)
    out = tmp_path / "manifest.tsv"
    m.to_tsv(str(out))
    lines = out.read_text().splitlines()
    assert len(lines) == 20
    seen_splits = []
    for line in lines:
        split, ci, rel = line.split("\t")
        assert split in ("train", "val", "test")
        assert ci in ("0", "1")
        assert rel.endswith(".png")
        seen_splits.append(split)
    # grouped by split, train first
    assert seen_splits == sorted(seen_splits,
                                 key=["train", "val", "test"].index)


# --- decoding ---

def test_decode_png_values_and_layout(tmp_path):
    arr = np.zeros((4, 6, 3), dtype=np.uint8)
    arr[0, 0] = (255, 0, 0)
    arr[3, 5] = (0, 128, 255)
    p = tmp_path / "x.png"
    Image.fromarray(arr, "RGB").save(p)
    img = decode_png(str(p))
    assert img.shape == (3, 4, 6)
    assert img.dtype == np.float32
    assert img[0, 0, 0] == 1.0
    assert img[1, 3, 5] == pytest.approx(128 / 255)
    assert img[2, 3, 5] == 1.0


def test_decode_png_grayscale_and_palette_and_alpha(tmp_path):
    g = tmp_path / "g.png"
    Image.fromarray(np.full((5, 5), 100, dtype=np.uint8), "L").save(g)
    img = decode_png(str(g))
    assert img.shape == (3, 5, 5)
    assert np.allclose(img[0], img[1])
    rgba = tmp_path / "a.png"
    arr = np.zeros((5, 5, 4), dtype=np.uint8)
    arr[..., 0] = 200
    arr[..., 3] = 30
    Image.fromarray(arr, "RGBA").save(rgba)
    img = decode_png(str(rgba))
    assert img.shape == (3, 5, 5)
    assert img[0, 0, 0] == pytest.approx(200 / 255)


def test_decode_png_rejects_16_bit(tmp_path):
    p = tmp_path / "deep.png"
    Image.fromarray(np.full((4, 4), 60000, dtype=np.uint16)).save(p)
    with pytest.raises(UnsupportedBitDepth):
        decode_png(str(p))


def test_decode_png_rejects_garbage(tmp_path):
    p = tmp_path / "not.png"
    p.write_bytes(b"definitely not an image")
    with pytest.raises(DecodeError):
        decode_png(str(p))


# --- resize ---

def test_resize_matches_brute_force():
    for trial in range(10):
        rng = np.random.default_rng(trial)
        h, w = rng.integers(2, 9, size=2)
        target = int(rng.integers(1, 9))
        img = rng.random((3, h, w))
        got = resize_bilinear(img, target)
        want = resize_bilinear_brute(img, target)
        assert got.shape == (3, target, target)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_resize_identity_and_corners():
    rng = np.random.default_rng(0)
    img = rng.random((3, 7, 7))
    assert np.array_equal(resize_bilinear(img, 7), img)
    up = resize_bilinear(img, 13)
    # corner alignment maps corners exactly to corners
    for ci in range(3):
        assert up[ci, 0, 0] == pytest.approx(img[ci, 0, 0])
        assert up[ci, 0, -1] == pytest.approx(img[ci, 0, -1])
        assert up[ci, -1, 0] == pytest.approx(img[ci, -1, 0])
        assert up[ci, -1, -1] == pytest.approx(img[ci, -1, -1])


def test_resize_linear_ramp_is_exact():
    # bilinear interpolation reproduces an affine ramp exactly
    y = np.arange(5.0)[:, None] * np.ones(5)
    img = np.stack([y, y.T, y + y.T])
    up = resize_bilinear(img, 9)
    yy = np.arange(9) * (4 / 8)
    assert np.allclose(up[0], yy[:, None] * np.ones(9))
    assert np.allclose(up[1], np.ones(9)[:, None] * yy)


def test_resize_single_pixel_target_samples_center():
    img = np.zeros((1, 5, 5))
    img[0, 2, 2] = 1.0
    out = resize_bilinear(img, 1)
    assert out.shape == (1, 1, 1)
    assert out[0, 0, 0] == 1.0


# --- rotation ---

def test_rotate_zero_is_identity():
    rng = np.random.default_rng(1)
    img = rng.random((3, 6, 6))
    assert np.allclose(rotate_bilinear(img, 0.0), img)


def test_rotate_90_matches_rot90():
    rng = np.random.default_rng(2)
    img = rng.random((2, 7, 7))
    got = rotate_bilinear(img, 90.0)
    # exact 90 degrees lands every sample on a grid point
    want = np.stack([np.rot90(img[c], k=-1) for c in range(2)])
    kalt = np.stack([np.rot90(img[c], k=1) for c in range(2)])
    assert np.allclose(got, want, atol=1e-9) or np.allclose(got, kalt,
                                                            atol=1e-9)


def test_rotate_inverse_restores_interior():
    # bilinear sampling reproduces an affine field exactly, and a rotation
    # of an affine field is affine, so the roundtrip must restore the
    # interior to float precision (borders see the zero fill)
    yy, xx = np.meshgrid(np.arange(21.0), np.arange(21.0), indexing="ij")
    img = (0.3 + 0.02 * xx + 0.01 * yy)[None, :, :]
    back = rotate_bilinear(rotate_bilinear(img, 12.0), -12.0)
    assert np.allclose(back[:, 8:13, 8:13], img[:, 8:13, 8:13], atol=1e-9)


def test_rotate_fills_outside_with_zero():
    img = np.ones((1, 9, 9))
    out = rotate_bilinear(img, 45.0)
    assert out.min() == 0.0  # corners leave the source square
    assert out.max() <= 1.0 + 1e-12


# --- augment pipeline ---

def test_augment_eval_is_resize_plus_normalize():
    rng = np.random.default_rng(4)
    img = rng.random((3, 10, 10)).astype(np.float32)
    policy = AugmentPolicy(target_hw=8, mean=(0.5, 0.5, 0.5),
                           std=(0.25, 0.25, 0.25))
    out = augment(img, policy, train=False)
    want = normalize(resize_bilinear(img, 8), policy.mean, policy.std)
    assert np.array_equal(out, want)


def test_augment_train_draw_order_and_counts():
    img = np.random.default_rng(5).random((3, 6, 6)).astype(np.float32)

    class CountingRng:
        def __init__(self):
            self.uniform_calls = 0
            self.random_calls = 0

        def random(self):
            self.random_calls += 1
            return 0.99  # never flip

        def uniform(self, lo, hi):
            self.uniform_calls += 1
            return 0.0  # rotate by zero degrees

    counter = CountingRng()
    policy = AugmentPolicy(target_hw=6)
    augment(img, policy, rng=counter, train=True)
    assert counter.random_calls == 2   # hflip and vflip draws
    assert counter.uniform_calls == 1  # angle drawn since max_rotation > 0

    counter = CountingRng()
    no_rot = AugmentPolicy(target_hw=6, max_rotation_deg=0.0)
    augment(img, no_rot, rng=counter, train=True)
    assert counter.random_calls == 2
    assert counter.uniform_calls == 0  # no angle draw when rotation is off


def test_augment_flips_apply():
    img = np.zeros((3, 4, 4), dtype=np.float32)
    img[:, 0, 0] = 1.0

    class FlipRng:
        def random(self):
            return 0.0  # always below prob: flip both axes

        def uniform(self, lo, hi):
            return 0.0

    policy = AugmentPolicy(target_hw=4, mean=(0, 0, 0), std=(1, 1, 1))
    out = augment(img, policy, rng=FlipRng(), train=True)
    assert out[0, 3, 3] == 1.0
    assert out[0, 0, 0] == 0.0


def test_augment_requires_rng_for_training():
    img = np.zeros((3, 4, 4), dtype=np.float32)
    with pytest.raises(BadConfig):
        augment(img, AugmentPolicy(target_hw=4), rng=None, train=True)


def test_policy_validation():
    with pytest.raises(BadConfig):
        AugmentPolicy(hflip_prob=1.5).validate()
    with pytest.raises(BadConfig):
        AugmentPolicy(max_rotation_deg=-3).validate()
    with pytest.raises(BadConfig):
        AugmentPolicy(std=(0.5, 0.0, 0.5)).validate()
    with pytest.raises(BadConfig):
        AugmentPolicy(mean=(0.5,)).validate()


# --- batching ---

def test_iter_batches_shapes_labels_and_partial_batch(corpus):
    m = build_manifest(corpus, seed=0)
    policy = AugmentPolicy(target_hw=64)
    batches = list(iter_batches(m, "val", 5, policy, train=False))
    sizes = [b[0].shape[0] for b in batches]
    assert sizes == [5, 5, 5, 1]  # 16 val images, final short batch kept
    for x, labels in batches:
        assert x.shape[1:] == (3, 64, 64)
        assert x.dtype == "single"
        assert labels.dtype == np.int64
        assert set(labels.tolist()) <= {0, 1}
    # eval order is the manifest order
    want = [ci for ci, _ in m.splits["val"]]
    got = [l for _, ls in batches for l in ls.tolist()]
    assert got == want


def test_iter_batches_train_is_seeded_shuffle(corpus):
    m = build_manifest(corpus, seed=0)
    policy = AugmentPolicy(target_hw=64)

    def labels_with(seed):
        rng = np.random.default_rng(seed)
        return [l for _, ls in iter_batches(m, "train", 8, policy, rng=rng,
                                            train=True)
                for l in ls.tolist()]

    a, b, c = labels_with(1), labels_with(1), labels_with(2)
    assert a == b
    assert a != c
    assert sorted(a) == sorted(c)


def test_iter_batches_validation(corpus):
    m = build_manifest(corpus, seed=0)
    policy = AugmentPolicy(target_hw=64)
    with pytest.raises(BadConfig):
        list(iter_batches(m, "train", 0, policy))
    with pytest.raises(BadConfig):
        list(iter_batches(m, "holdout", 4, policy))
    with pytest.raises(BadConfig):
        list(iter_batches(m, "train", 4, policy, train=True, rng=None))


# --- stats ---

def test_dataset_stats_counts_and_moments(corpus):
    m = build_manifest(corpus, seed=0)
    st = dataset_stats(m)
    assert st["classes"] == ["blobs", "stripes"]
    assert st["counts"]["train"] == [28, 28]
    assert st["counts"]["val"] == [8, 8]
    assert st["counts"]["test"] == [4, 4]
    for mean, std in zip(st["train_mean"], st["train_std"]):
        assert 0.3 < mean < 0.7
        assert 0.0 < std < 0.5


# --- synthetic corpus ---

def test_synth_corpus_is_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    make_synth_corpus(str(a), per_class=3, hw=24, seed=9)
    make_synth_corpus(str(b), per_class=3, hw=24, seed=9)
    for rel in ("blobs/blob_000.png", "stripes/stripe_002.png"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    c = tmp_path / "c"
    make_synth_corpus(str(c), per_class=3, hw=24, seed=10)
    assert (a / "blobs/blob_000.png").read_bytes() \
        != (c / "blobs/blob_000.png").read_bytes()


def test_synth_corpus_layout_and_classes_differ(tmp_path):
    written = make_synth_corpus(str(tmp_path), per_class=4, hw=32, seed=0)
    assert len(written) == 8
    blob = decode_png(str(tmp_path / "blobs" / "blob_000.png"))
    stripe = decode_png(str(tmp_path / "stripes" / "stripe_000.png"))
    assert blob.shape == stripe.shape == (3, 32, 32)
    # stripes carry far more high-frequency energy than blobs
    def hf_energy(img):
        d = np.diff(img, axis=2)
        return float((d * d).mean())
    assert hf_energy(stripe) > 4 * hf_energy(blob)
    with pytest.raises(BadConfig):
        make_synth_corpus(str(tmp_path), per_class=0)
