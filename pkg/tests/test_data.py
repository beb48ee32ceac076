import csv
import hashlib
import itertools

import numpy as np
import pytest

from macnet.data import (
    AugmentationPolicy,
    DatasetManifest,
    EventRecord,
    ImageStore,
    augment,
    batch_iterator,
    event_split,
    generate_synthetic_dataset,
    load_image,
    merge_manifests,
    read_manifest,
    save_image,
    write_manifest,
)
from macnet.data.imageio import encode_ppm
from macnet.data.manifest import DEFAULT_RATIOS, greedy_assign, split_table
from macnet.errors import ConfigurationError, ContractError, DimensionError, ImageDecodeError, ManifestError
from macnet.errors import UnsupportedFormatError


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    return generate_synthetic_dataset(root, seed=0, split="train"), root


def random_manifest(rng, max_events=12, classes=3, max_size=40):
    events = []
    names = [f"c{i}" for i in range(classes)]
    for name in names:
        for e in range(int(rng.integers(1, max_events + 1))):
            size = int(rng.integers(1, max_size + 1))
            events.append(EventRecord(f"{name}_{e}", name, [f"{name}/{e}_{i}.ppm" for i in range(size)]))
    return DatasetManifest(names, events)


def split_sizes(manifest, name):
    return [sum(len(ev) for ev in manifest.events if ev.class_label == name and ev.split == s)
            for s in ("train", "val", "test")]


# image codec


def test_zero_pixmap_decodes_to_zero(tmp_path):
    p = tmp_path / "z.ppm"
    p.write_bytes(b"P6\n2 3\n255\n" + bytes(18))
    img = load_image(p)
    assert img.shape == (3, 3, 2) and np.all(img == 0)


def test_red_pixel(tmp_path):
    p = tmp_path / "r.ppm"
    p.write_bytes(b"P6 1 1 255\n" + bytes([255, 0, 0]))
    np.testing.assert_array_equal(load_image(p)[:, 0, 0], [1.0, 0.0, 0.0])


def test_header_comments_accepted(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6\n# made by hand\n1 1\n255\n" + bytes([0, 51, 255]))
    np.testing.assert_allclose(load_image(p, np.float64)[:, 0, 0], [0.0, 0.2, 1.0])


def test_round_trip_exact_at_8_bits(tmp_path, rng):
    raw = rng.integers(0, 256, (3, 7, 5), dtype=np.uint8)
    save_image(tmp_path / "x.ppm", raw)
    back = load_image(tmp_path / "x.ppm", np.float64)
    np.testing.assert_array_equal(np.rint(back * 255).astype(np.uint8), raw)
    assert encode_ppm(back) == encode_ppm(raw)


def test_decode_error_variants(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "missing.ppm")
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P6\nxx\n")
    with pytest.raises(ImageDecodeError) as info:
        load_image(bad)
    assert not isinstance(info.value, UnsupportedFormatError)
    short = tmp_path / "short.ppm"
    short.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(ImageDecodeError, match="truncated"):
        load_image(short)
    for blob in (b"P3\n1 1\n255\n0 0 0\n", b"\x89PNG\r\n", b"P6\n1 1\n65535\n" + bytes(6)):
        other = tmp_path / "o.ppm"
        other.write_bytes(blob)
        with pytest.raises(UnsupportedFormatError):
            load_image(other)


# manifests


def test_manifest_round_trip_relative_paths(synth, tmp_path):
    manifest, root = synth
    path = root / "manifest.csv"
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["image_path", "class_name", "event_id", "split"]
    assert all(not r[0].startswith("/") for r in rows[1:])
    back = read_manifest(path)
    assert back.class_names == manifest.class_names
    assert [(e.event_id, e.image_refs, e.split) for e in back.events] == \
        [(e.event_id, e.image_refs, e.split) for e in manifest.events]
    assert back.resolve(back.events[0].image_refs[0]).exists()


def test_manifest_errors_carry_line_numbers(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("image_path,class_name,event_id,split\na.ppm,bar,e1,train\nb.ppm,bar,e1,test\n")
    with pytest.raises(ManifestError, match=":3:"):
        read_manifest(p)
    p.write_text("image_path,class_name,event_id,split\na.ppm,bar,e1,holdout\n")
    with pytest.raises(ManifestError, match=":2:"):
        read_manifest(p)
    p.write_text("path,label\n")
    with pytest.raises(ManifestError, match=":1:"):
        read_manifest(p)


def test_manifest_counts_recomputed(rng):
    m = event_split(random_manifest(rng), DEFAULT_RATIOS, 0)
    counts = m.counts()
    for split, c in counts.items():
        evs = [e for e in m.events if e.split == split]
        assert c == {"images": sum(len(e) for e in evs), "events": len(evs)}
    assert sum(c["images"] for c in counts.values()) == m.num_images()


def test_event_record_invariants():
    with pytest.raises(ManifestError):
        EventRecord("e", "bar", [])
    with pytest.raises(ManifestError):
        EventRecord("e", "bar", ["x.ppm"], split="holdout")
    with pytest.raises(ManifestError):
        DatasetManifest(["bar"], [EventRecord("e", "pub", ["x.ppm"])])


def test_merge_keeps_images_reachable(synth, tmp_path):
    manifest, _ = synth
    other = generate_synthetic_dataset(tmp_path / "b", seed=1, split="test", events_per_class=1)
    merged = merge_manifests(manifest, other)
    assert merged.num_images("train") == 80 and merged.num_images("test") == 16
    write_manifest(merged, tmp_path / "merged.csv")
    back = read_manifest(tmp_path / "merged.csv")
    assert all(back.resolve(r).exists() for e in back.events for r in e.image_refs)


# event split


def test_single_event_class_goes_to_train():
    m = DatasetManifest(["a"], [EventRecord("e0", "a", ["x"] * 9)])
    assert event_split(m, (0.6, 0.2, 0.2)).events[0].split == "train"


def test_split_50_30_20_example():
    m = DatasetManifest(["a"], [EventRecord(f"e{s}", "a", ["x"] * s) for s in (20, 50, 30)])
    out = {e.event_id: e.split for e in event_split(m, (0.6, 0.2, 0.2)).events}
    assert out == {"e50": "train", "e30": "val", "e20": "test"}


def test_two_events_largest_to_train():
    assert greedy_assign([5, 40], (0.1, 0.1, 0.8))[0] == 0


def test_split_rejects_bad_ratios_and_empty_class():
    m = DatasetManifest(["a", "b"], [EventRecord("e", "a", ["x"])])
    with pytest.raises(ConfigurationError):
        event_split(m, (0.5, 0.5, 0.5))
    with pytest.raises(ManifestError, match="'b'"):
        event_split(m, DEFAULT_RATIOS)


def test_split_deterministic_given_seed(rng):
    m = random_manifest(rng, max_size=3)
    a = [e.split for e in event_split(m, DEFAULT_RATIOS, 5).events]
    b = [e.split for e in event_split(m, DEFAULT_RATIOS, 5).events]
    assert a == b


def test_split_partition_and_deviation_bound(rng):
    for _ in range(100):
        m = random_manifest(rng)
        ratios = tuple(rng.dirichlet([4, 1, 1]) * 0.97 + 0.01)
        ratios = (ratios[0], ratios[1], 1 - ratios[0] - ratios[1])
        out = event_split(m, ratios, int(rng.integers(1000)))
        assert all(e.split in ("train", "val", "test") for e in out.events)
        assert sorted(e.event_id for e in out.events) == sorted(e.event_id for e in m.events)
        for name in m.class_names:
            sizes = [len(e) for e in m.events if e.class_label == name]
            total = sum(sizes)
            got = split_sizes(out, name)
            for s in range(3):
                assert abs(got[s] - ratios[s] * total) <= max(sizes) + 1e-9


def brute_force_best_deviation(sizes, ratios):
    """Smallest achievable max |split images - target| over all 3^n assignments."""
    total = sum(sizes)
    best = np.inf
    for assign in itertools.product(range(3), repeat=len(sizes)):
        filled = [0, 0, 0]
        for size, s in zip(sizes, assign):
            filled[s] += size
        best = min(best, max(abs(f - r * total) for f, r in zip(filled, ratios)))
    return best


def test_split_within_one_event_of_brute_force(rng):
    for _ in range(60):
        sizes = sorted((int(v) for v in rng.integers(1, 30, int(rng.integers(1, 9)))), reverse=True)
        got = greedy_assign(sizes, DEFAULT_RATIOS)
        total = sum(sizes)
        filled = [sum(sz for sz, s in zip(sizes, got) if s == k) for k in range(3)]
        greedy_dev = max(abs(f - r * total) for f, r in zip(filled, DEFAULT_RATIOS))
        assert greedy_dev <= brute_force_best_deviation(sizes, DEFAULT_RATIOS) + max(sizes) + 1e-9


# augmentation


def test_identity_policy_returns_input(rng):
    img = rng.uniform(0, 1, (3, 20, 24)).astype(np.float32)
    out = augment(img, AugmentationPolicy.identity(), np.random.default_rng(0))
    np.testing.assert_allclose(out, img, rtol=0, atol=1e-6)


def test_brightness_only_shift():
    pol = AugmentationPolicy.identity()
    pol = AugmentationPolicy(**{**pol.__dict__, "brightness_delta": 0.2, "jitter_mode": "fixed"})
    out = augment(np.full((3, 8, 8), 0.5), pol, np.random.default_rng(0))
    np.testing.assert_allclose(out, 0.7, rtol=0, atol=1e-12)


def test_augment_replay_bitwise_and_ranges(rng):
    img = rng.uniform(0, 1, (3, 32, 32)).astype(np.float32)
    pol = AugmentationPolicy(crop=(24, 20))
    a = augment(img, pol, np.random.default_rng(42))
    b = augment(img, pol, np.random.default_rng(42))
    np.testing.assert_array_equal(a, b)
    for seed in range(20):
        out = augment(img, pol, np.random.default_rng(seed))
        assert out.shape == (3, 24, 20) and out.min() >= 0 and out.max() <= 1
    assert not np.array_equal(a, augment(img, pol, np.random.default_rng(43)))


def test_augment_crop_too_large():
    with pytest.raises(DimensionError):
        augment(np.zeros((3, 8, 8)), AugmentationPolicy(crop=(10, 8)), np.random.default_rng(0))


def test_policy_validation():
    with pytest.raises(ConfigurationError):
        AugmentationPolicy(scale_range=(1.0, 0.5))
    with pytest.raises(ConfigurationError):
        AugmentationPolicy(jitter_mode="sometimes")


# synthetic generator


def test_synth_counts(synth):
    manifest, root = synth
    assert manifest.num_images() == 80 and len(manifest.events) == 20
    assert len(manifest.class_names) == 4
    rows = list(csv.reader((root / "stats.csv").open()))
    total_row = rows[-1]
    assert total_row[0] == "TOTAL" and int(total_row[1]) == 80
    manifest_lines = len((root / "manifest.csv").read_text().splitlines()) - 1
    assert sum(int(v) for v in total_row[1::2][:4]) == manifest_lines


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_deterministic(tmp_path):
    generate_synthetic_dataset(tmp_path / "a", seed=3, events_per_class=2)
    generate_synthetic_dataset(tmp_path / "b", seed=3, events_per_class=2)
    generate_synthetic_dataset(tmp_path / "c", seed=4, events_per_class=2)
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    assert _tree_digest(tmp_path / "a") != _tree_digest(tmp_path / "c")


def test_synth_rejects_bad_counts(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic_dataset(tmp_path, events_per_class=0)


def test_nearest_centroid_on_mean_colour(synth):
    manifest, _ = synth
    samples = manifest.samples("train")
    feats = np.array([load_image(p, np.float64).mean(axis=(1, 2)) for p, _, _ in samples])
    labels = np.array([y for _, y, _ in samples])
    centroids = np.array([feats[labels == k].mean(axis=0) for k in range(4)])
    pred = np.argmin(((feats[:, None, :] - centroids[None]) ** 2).sum(-1), axis=1)
    assert (pred == labels).mean() > 0.9


# batching


def test_batch_sizes_and_coverage(synth):
    manifest, _ = synth
    store = ImageStore()
    batches = list(batch_iterator(manifest, "train", 32, seed=1, epoch=0, store=store))
    assert [len(y) for _, y in batches] == [32, 32, 16]
    assert batches[0][0].shape == (32, 3, 64, 64)
    labels = np.concatenate([y for _, y in batches])
    expected = [y for _, y, _ in manifest.samples("train")]
    assert sorted(labels.tolist()) == sorted(expected)


def test_epoch_permutations(synth):
    manifest, _ = synth
    store = ImageStore()

    def order(epoch, seed=1):
        return np.concatenate([b[0].data.reshape(len(b[1]), -1)[:, 0] for b in
                               batch_iterator(manifest, "train", 80, seed=seed, epoch=epoch, store=store)])

    assert not np.array_equal(order(0), order(1))
    np.testing.assert_array_equal(order(2), order(2))


def test_eval_split_keeps_manifest_order(synth):
    manifest, _ = synth
    m = manifest.with_split("test")
    labels = np.concatenate([y for _, y in batch_iterator(m, "test", 7, seed=9)])
    assert labels.tolist() == [y for _, y, _ in m.samples("test")]


def test_workers_do_not_change_batches(synth):
    manifest, _ = synth
    pol = AugmentationPolicy()
    serial = [b[0].data for b in batch_iterator(manifest, "train", 16, seed=2, policy=pol)]
    pooled = [b[0].data for b in batch_iterator(manifest, "train", 16, seed=2, policy=pol, workers=3)]
    for a, b in zip(serial, pooled):
        np.testing.assert_array_equal(a, b)


def test_augmentation_only_on_train(synth):
    manifest, _ = synth
    m = manifest.with_split("val")
    plain = next(batch_iterator(m, "val", 4))[0].data
    with_policy = next(batch_iterator(m, "val", 4, policy=AugmentationPolicy()))[0].data
    np.testing.assert_array_equal(plain, with_policy)


def test_empty_split_errors(synth):
    manifest, _ = synth
    with pytest.raises(ContractError):
        next(batch_iterator(manifest, "val", 4))


def test_split_table_matches_events(rng):
    m = event_split(random_manifest(rng), DEFAULT_RATIOS, 1)
    for row in split_table(m):
        name = row[0]
        assert row[1:7:2] == split_sizes(m, name)
