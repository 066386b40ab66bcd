import hashlib
import json

import numpy as np
import pytest

from diffprobe.data import (DatasetRecord, FolderDataset, SyntheticSpec,
                            generate_shapes_classification, generate_shapes_segmentation,
                            load_folder_dataset, render_from_mask, stratification_key,
                            subsample_labels)

TINY = SyntheticSpec(num_train=12, num_val=4, num_test=4, image_size=32, num_classes=4, seed=7)


@pytest.fixture(scope="module")
def seg_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("seg")
    generate_shapes_segmentation(TINY, root)
    return root


@pytest.fixture(scope="module")
def cls_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cls")
    generate_shapes_classification(TINY, root)
    return root


def tree_digest(root):
    h = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()


def test_generation_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_shapes_segmentation(TINY, a)
    generate_shapes_segmentation(TINY, b)
    assert tree_digest(a) == tree_digest(b)
    c = tmp_path / "c"
    generate_shapes_segmentation(SyntheticSpec(**{**TINY.to_dict(), "seed": 8}), c)
    assert tree_digest(a) != tree_digest(c)


def test_every_class_present_in_training_split(seg_root):
    ds = load_folder_dataset(seg_root)
    seen = set()
    for r in ds.records("train"):
        seen.update(np.unique(ds.load_mask(r)).tolist())
    assert seen == set(range(TINY.num_classes))


def test_pixel_histogram_matches_manifest(seg_root):
    ds = load_folder_dataset(seg_root)
    for r in ds.records("train")[:5]:
        mask = ds.load_mask(r)
        counts = np.bincount(mask.ravel(), minlength=TINY.num_classes)
        np.testing.assert_array_equal(counts, np.asarray(r.class_pixel_counts))


def test_zero_noise_images_are_pure_texture(tmp_path):
    spec = SyntheticSpec(num_train=3, num_val=1, num_test=1, image_size=32,
                         num_classes=3, noise_level=0.0, seed=1)
    generate_shapes_segmentation(spec, tmp_path)
    ds = load_folder_dataset(tmp_path)
    r = ds.records("train")[0]
    img = ds.load_image(r)
    mask = ds.load_mask(r)
    want = np.round(np.clip(render_from_mask(mask, 3), 0, 1) * 255) / 255
    np.testing.assert_allclose(img, want, atol=1e-7)


def test_masks_and_checksums_recorded(seg_root):
    ds = load_folder_dataset(seg_root)
    r = ds.records("val")[0]
    assert r.mask_path is not None
    data = (seg_root / r.image_path).read_bytes()
    assert hashlib.sha256(data).hexdigest() == r.sha256


def test_classification_single_labels(cls_root):
    ds = load_folder_dataset(cls_root)
    assert ds.label_kind == "class"
    assert ds.num_classes == TINY.num_classes - 1
    for r in ds.records():
        assert 0 <= r.label < ds.num_classes
        # dominant-class label consistent with the recorded histogram
        assert r.label == int(np.argmax(np.asarray(r.class_pixel_counts)[1:]))


def test_classification_near_uniform_balance(tmp_path):
    spec = SyntheticSpec(num_train=120, num_val=1, num_test=1, image_size=32,
                         num_classes=4, seed=3)
    generate_shapes_classification(spec, tmp_path)
    ds = load_folder_dataset(tmp_path)
    labels = [r.label for r in ds.records("train")]
    counts = np.bincount(labels, minlength=3)
    assert (np.abs(counts / len(labels) - 1 / 3) <= 0.05).all()


def test_multilabel_variant(tmp_path):
    spec = SyntheticSpec(num_train=6, num_val=2, num_test=2, image_size=32,
                         num_classes=4, seed=2)
    generate_shapes_classification(spec, tmp_path, multi_label=True)
    ds = load_folder_dataset(tmp_path)
    assert ds.label_kind == "multilabel"
    for r in ds.records():
        assert r.labels is not None and len(r.labels) == 3
        want = (np.asarray(r.class_pixel_counts)[1:] > 0).astype(int)
        np.testing.assert_array_equal(np.asarray(r.labels), want)
        assert sum(r.labels) >= 1


def test_spec_validation():
    with pytest.raises(ValueError, match="two classes"):
        SyntheticSpec(num_classes=1)
    with pytest.raises(ValueError, match="scale_mix"):
        SyntheticSpec(scale_mix=1.5)


# -- loader ------------------------------------------------------------------------

def test_empty_split_is_empty_not_error(seg_root):
    ds = load_folder_dataset(seg_root)
    assert ds.records("nonexistent-split") == []


def test_iteration_order_stable(seg_root):
    a = [r.image_path for r in load_folder_dataset(seg_root).records("train")]
    b = [r.image_path for r in load_folder_dataset(seg_root).records("train")]
    assert a == b


def test_missing_file_error_carries_path(seg_root, tmp_path):
    import shutil
    broken = tmp_path / "broken"
    shutil.copytree(seg_root, broken)
    ds = load_folder_dataset(broken)
    victim = ds.records("train")[0]
    (broken / victim.mask_path).unlink()
    with pytest.raises(FileNotFoundError, match=str(victim.mask_path)):
        ds.load_mask(victim)


def test_manifest_must_exist_and_have_header(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_folder_dataset(tmp_path)
    (tmp_path / "manifest.jsonl").write_text(json.dumps({"kind": "record"}) + "\n")
    with pytest.raises(ValueError, match="header"):
        load_folder_dataset(tmp_path)


# -- subsampling ------------------------------------------------------------------------

def _records_with_labels(labels):
    return [DatasetRecord(image_path=f"img{i}.png", split="train", bands=("red",),
                          label=int(c)) for i, c in enumerate(labels)]


def test_subsample_identity_at_full_fraction():
    recs = _records_with_labels([0, 1, 2, 0, 1, 2])
    assert subsample_labels(recs, 1.0, seed=0) == recs


def test_subsample_exact_tenth_per_class():
    recs = _records_with_labels(sum(([c] * 100 for c in range(3)), []))
    sub = subsample_labels(recs, 0.1, seed=0)
    counts = np.bincount([r.label for r in sub], minlength=3)
    np.testing.assert_array_equal(counts, [10, 10, 10])


def test_subsample_counts_within_one_of_proportional():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 4, size=237)
    recs = _records_with_labels(labels)
    sub = subsample_labels(recs, 0.1, seed=1)
    for c in range(4):
        n_c = int((labels == c).sum())
        got = sum(1 for r in sub if r.label == c)
        assert abs(got - 0.1 * n_c) <= 1.0


def test_subsample_seeds_change_membership_not_counts():
    recs = _records_with_labels(sum(([c] * 40 for c in range(3)), []))
    a = subsample_labels(recs, 0.25, seed=0)
    b = subsample_labels(recs, 0.25, seed=1)
    ca = np.bincount([r.label for r in a], minlength=3)
    cb = np.bincount([r.label for r in b], minlength=3)
    np.testing.assert_array_equal(ca, cb)
    assert {r.image_path for r in a} != {r.image_path for r in b}
    again = subsample_labels(recs, 0.25, seed=0)
    assert [r.image_path for r in a] == [r.image_path for r in again]


def test_subsample_floors_tiny_classes_with_warning():
    recs = _records_with_labels([0] * 100 + [1] * 3)
    with pytest.warns(UserWarning, match="floors class 1"):
        sub = subsample_labels(recs, 0.1, seed=0)
    assert sum(1 for r in sub if r.label == 1) == 1


def test_subsample_rejects_bad_fraction():
    recs = _records_with_labels([0, 1])
    for frac in (0.0, -0.5, 1.5):
        with pytest.raises(ValueError, match="fraction"):
            subsample_labels(recs, frac, seed=0)


def test_stratification_keys():
    assert stratification_key(DatasetRecord("a", "train", ("red",), label=2)) == 2
    assert stratification_key(DatasetRecord("a", "train", ("red",), labels=(0, 1, 1))) == 1
    seg = DatasetRecord("a", "train", ("red",), class_pixel_counts=(50, 10, 30))
    assert stratification_key(seg) == 2
