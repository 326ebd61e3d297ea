"""Tests for manifests, directory import, synthetic generation, and dataset occlusion."""

import json

import numpy as np
import pytest

from poise.data import (
    DatasetManifest,
    ManifestEntry,
    load_dataset,
    manifest_from_directories,
    occlude_dataset,
)
from poise.occlusion import ObjectPatchLibrary
from poise.pose2sil import rasterize_skeleton
from poise.synth import SyntheticSceneSpec, generate_scene, generate_synthetic_dataset


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    spec = SyntheticSceneSpec(num_scenes=6, seed=11)
    manifest = generate_synthetic_dataset(spec, root)
    return spec, manifest


# ---------------------------------------------------------------- synthesis


def test_generate_counts_and_files(small_dataset):
    spec, manifest = small_dataset
    assert len(manifest) == 6
    for entry in manifest:
        assert manifest.path(entry.image).exists()
        assert manifest.path(entry.mask).exists()
        assert manifest.path(entry.keypoints).exists()


def test_masks_equal_rasterizer_on_emitted_keypoints(small_dataset):
    spec, manifest = small_dataset
    for i, entry in enumerate(manifest):
        _, mask, kps, geom = generate_scene(spec, i)  # deterministic re-derivation
        stored_mask = manifest.load_mask(entry)
        stored_kps = manifest.load_keypoints(entry)
        assert np.array_equal(stored_mask, mask)
        assert np.array_equal(stored_mask, rasterize_skeleton(stored_kps, geom, 96, 96))
        assert np.allclose(stored_kps.coords, kps.coords)


def test_generation_is_byte_identical(tmp_path, small_dataset):
    spec, manifest = small_dataset
    again = generate_synthetic_dataset(spec, tmp_path / "again")
    for e1, e2 in zip(manifest, again):
        assert manifest.path(e1.image).read_bytes() == again.path(e2.image).read_bytes()
        assert manifest.path(e1.mask).read_bytes() == again.path(e2.mask).read_bytes()
        assert manifest.path(e1.keypoints).read_bytes() == again.path(e2.keypoints).read_bytes()


def test_figures_respect_margin(small_dataset):
    spec, manifest = small_dataset
    for entry in manifest:
        mask = manifest.load_mask(entry)
        assert mask.sum() > 0
        rows = np.nonzero(mask.any(axis=1))[0]
        cols = np.nonzero(mask.any(axis=0))[0]
        assert rows.min() >= spec.margin - 1 and rows.max() <= 96 - spec.margin
        assert cols.min() >= spec.margin - 1 and cols.max() <= 96 - spec.margin


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSceneSpec(height=16)
    with pytest.raises(ValueError):
        SyntheticSceneSpec(num_scenes=0)
    with pytest.raises(ValueError):
        SyntheticSceneSpec(background="plasma")


def test_hard_background_mode_runs():
    spec = SyntheticSceneSpec(num_scenes=1, seed=5, background="hard")
    img, mask, kps, _ = generate_scene(spec, 0)
    assert img.shape == (96, 96, 3) and mask.shape == (96, 96)


# ---------------------------------------------------------------- manifests


def test_load_validates_round_trip(small_dataset):
    _, manifest = small_dataset
    loaded = load_dataset(manifest.root)
    assert len(loaded) == len(manifest)
    assert [e.image_id for e in loaded] == [e.image_id for e in manifest]
    assert loaded.split == manifest.split
    assert loaded.seed == manifest.seed


def test_load_reports_all_missing_files(small_dataset, tmp_path):
    _, manifest = small_dataset
    payload = json.loads((manifest.root / "manifest.json").read_text())
    payload["entries"][0]["mask"] = "masks/nope.png"
    payload["entries"][2]["image"] = "images/gone.png"
    bad = tmp_path / "manifest.json"
    bad.write_text(json.dumps(payload))
    with pytest.raises(ValueError) as err:
        load_dataset(bad)
    msg = str(err.value)
    # every entry is offending now (paths resolve against the new directory),
    # but the two named breakages must be listed
    assert "masks/nope.png" in msg
    assert "images/gone.png" in msg


def test_group_ordering_validated(tmp_path):
    (tmp_path / "x.png").write_bytes(b"")
    rows = [
        {"image_id": "a", "image": "x.png", "group": "v0", "frame_index": 1},
        {"image_id": "b", "image": "x.png", "group": "v0", "frame_index": 0},
    ]
    (tmp_path / "manifest.json").write_text(json.dumps({"entries": rows}))
    with pytest.raises(ValueError, match="out of order"):
        load_dataset(tmp_path)


def test_directory_convention_import(small_dataset):
    _, manifest = small_dataset
    imported = manifest_from_directories(manifest.root)
    assert [e.image_id for e in imported] == sorted(e.image_id for e in manifest)
    assert all(e.mask is not None and e.keypoints is not None for e in imported)


def test_directory_import_requires_images_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        manifest_from_directories(tmp_path)


def test_manifest_split_validation(tmp_path):
    with pytest.raises(ValueError):
        DatasetManifest(root=tmp_path, split="validation")


# ---------------------------------------------------------------- dataset occlusion


def test_occlude_dataset_random_erase(small_dataset, tmp_path):
    _, manifest = small_dataset
    occluded = occlude_dataset(manifest, tmp_path / "re20", "random_erase", 20, base_seed=3)
    assert len(occluded) == len(manifest)
    for src, dst in zip(manifest, occluded):
        img0 = manifest.load_image(src)
        img1 = occluded.load_image(dst)
        fp = occluded.root / "footprints" / f"{dst.image_id}.png"
        assert fp.exists()
        # gt mask unchanged
        assert np.array_equal(manifest.load_mask(src), occluded.load_mask(dst))
        assert img0.shape == img1.shape
    assert occluded.extra["occlusion"]["severity"] == 20
    # regeneration is byte-identical
    again = occlude_dataset(manifest, tmp_path / "re20b", "random_erase", 20, base_seed=3)
    for a, b in zip(occluded, again):
        assert (occluded.root / a.image).read_bytes() == (again.root / b.image).read_bytes()


def test_occlude_dataset_object_paste(small_dataset, tmp_path):
    _, manifest = small_dataset
    lib = ObjectPatchLibrary.procedural()
    occluded = occlude_dataset(
        manifest, tmp_path / "op16", "object_paste", 16, base_seed=9, library=lib
    )
    loaded = load_dataset(occluded.root)
    assert len(loaded) == len(manifest)
    assert loaded.extra["occlusion"]["kind"] == "object_paste"
