"""Evaluation-report and silhouette-export tests."""

import hashlib
import json

import numpy as np
import pytest

from poise.data import occlude_dataset
from poise.evalgait import (
    EvalReport,
    EvalRow,
    SequenceLayout,
    compare_methods,
    evaluate_miou,
    export_silhouette_sequence,
    load_exported_sequence,
)
from poise.fusion import OracleSegmenter, image_key
from poise.imaging import binarize, iou
from poise.synth import SyntheticSceneSpec, generate_synthetic_dataset


@pytest.fixture(scope="module")
def eval_sets(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval_data")
    spec = SyntheticSceneSpec(height=32, width=32, num_scenes=5, seed=33, margin=3)
    clean = generate_synthetic_dataset(spec, root / "clean")
    occ = occlude_dataset(clean, root / "occ", kind="random_erase", severity=16, base_seed=2)
    return clean, occ


def gt_predictor(manifest):
    seg = OracleSegmenter.from_manifest(manifest)
    return lambda img: seg(img)


# ---------------------------------------------------------------- evaluate


def test_perfect_predictor_scores_100(eval_sets):
    clean, occ = eval_sets
    report = evaluate_miou(
        gt_predictor(clean), {"clean": clean}, method="oracle", metadata={"seed": 1}
    )
    assert report.conditions() == ["clean"]
    assert report.mean_for("clean") == 100.0
    assert all(v == 1.0 for _, v in report.rows[0].per_image)
    assert report.rows[0].mean_class_avg == 100.0
    assert report.metadata["seed"] == 1
    assert "foreground" in report.metadata["metric"]


def test_report_mean_matches_per_image_brute_force(eval_sets):
    clean, occ = eval_sets
    # a lossy predictor: gt eroded by dropping its first body row
    seg = OracleSegmenter.from_manifest(occ)

    def lossy(img):
        m = seg(img).copy()
        rows = np.where(m.any(axis=1))[0]
        m[rows[0], :] = 0.0
        return m

    report = evaluate_miou(lossy, {"re/16": occ}, method="lossy")
    row = report.rows[0]
    manual, manual_class = [], []
    for entry in occ.entries:
        pred = binarize(lossy(occ.load_image(entry)), 0.5)
        gt = occ.load_mask(entry)
        manual.append(iou(pred, gt))
        manual_class.append(0.5 * (iou(pred, gt) + iou(1 - pred, 1 - gt)))
    assert abs(row.mean_miou - 100.0 * np.mean(manual)) < 1e-9
    assert abs(row.mean_miou - row.recomputed_mean()) < 1e-9
    assert abs(row.mean_class_avg - 100.0 * np.mean(manual_class)) < 1e-9
    assert row.mean_miou < 100.0
    # fg-only is harsher than class-averaged here (bg dominates the frame)
    assert row.mean_class_avg > row.mean_miou


def test_missing_gt_rejected_with_id(eval_sets, tmp_path):
    clean, _ = eval_sets
    import copy

    broken = copy.deepcopy(clean)
    broken.entries[2].mask = None
    with pytest.raises(ValueError, match=broken.entries[2].image_id):
        evaluate_miou(gt_predictor(clean), {"clean": broken})


def test_multiple_conditions_sorted(eval_sets):
    clean, occ = eval_sets
    seg_c = OracleSegmenter.from_manifest(clean)
    seg_o = OracleSegmenter.from_manifest(occ)
    table = dict(seg_c._masks)
    table.update(seg_o._masks)
    both = OracleSegmenter(table)
    report = evaluate_miou(both, {"re/16": occ, "clean": clean})
    assert report.conditions() == ["clean", "re/16"]


def test_report_json_round_trip(eval_sets, tmp_path):
    clean, _ = eval_sets
    report = evaluate_miou(gt_predictor(clean), {"clean": clean}, metadata={"cfg": "abc"})
    path = report.save(tmp_path / "report.json")
    loaded = EvalReport.load(path)
    assert loaded.method == report.method
    assert loaded.metadata == report.metadata
    assert loaded.rows[0].per_image == report.rows[0].per_image
    assert loaded.rows[0].mean_miou == report.rows[0].mean_miou
    assert loaded.rows[0].per_image_class_avg == report.rows[0].per_image_class_avg
    assert loaded.rows[0].mean_class_avg == report.rows[0].mean_class_avg


def test_tampered_mean_rejected():
    row = EvalRow(condition="c", per_image=[("a", 0.5), ("b", 1.0)], mean_miou=99.0)
    with pytest.raises(ValueError, match="does not match"):
        EvalReport("m", [row])


def test_report_csv_shape(eval_sets):
    clean, _ = eval_sets
    report = evaluate_miou(gt_predictor(clean), {"clean": clean}, method="oracle")
    lines = report.to_csv().strip().split("\n")
    assert lines[0] == "method,condition,mean_miou,mean_class_avg,num_images"
    assert lines[1].startswith("oracle,clean,100.000000,100.000000,")


# ---------------------------------------------------------------- export


def test_export_layout_and_round_trip(eval_sets, tmp_path):
    clean, _ = eval_sets
    predict = gt_predictor(clean)
    frames = [clean.load_image(e) for e in clean.entries]
    layout = SequenceLayout(tmp_path / "gait", "subj01", "re-16", "090")
    manifest = export_silhouette_sequence(predict, frames, layout)

    assert manifest["count"] == len(frames)
    names = [f["name"] for f in manifest["files"]]
    assert names == [f"{i:06d}.png" for i in range(len(frames))]
    for f in manifest["files"]:
        path = layout.view_dir / f["name"]
        assert path.exists()
        assert hashlib.sha256(path.read_bytes()).hexdigest() == f["sha256"]
    on_disk = json.loads((layout.view_dir / "sequence.json").read_text())
    assert on_disk == manifest

    masks = load_exported_sequence(layout.view_dir)
    for frame, mask in zip(frames, masks):
        assert np.array_equal(mask, binarize(predict(frame), 0.5))


def test_reexport_is_byte_identical(eval_sets, tmp_path):
    clean, _ = eval_sets
    predict = gt_predictor(clean)
    frames = [clean.load_image(e) for e in clean.entries]
    m1 = export_silhouette_sequence(predict, frames, SequenceLayout(tmp_path / "a", "s", "c", "v"))
    m2 = export_silhouette_sequence(predict, frames, SequenceLayout(tmp_path / "b", "s", "c", "v"))
    assert [f["sha256"] for f in m1["files"]] == [f["sha256"] for f in m2["files"]]


def test_export_rejects_bad_destination(eval_sets, tmp_path):
    clean, _ = eval_sets
    blocker = tmp_path / "s"
    blocker.write_text("file in the way")
    layout = SequenceLayout(tmp_path, "s", "c", "v")
    with pytest.raises((ValueError, OSError)):
        export_silhouette_sequence(gt_predictor(clean), [clean.load_image(clean.entries[0])], layout)
    with pytest.raises(ValueError):
        export_silhouette_sequence(gt_predictor(clean), [], SequenceLayout(tmp_path, "x", "c", "v"))


def test_layout_validation(tmp_path):
    with pytest.raises(ValueError):
        SequenceLayout(tmp_path, "a/b", "c", "v")
    with pytest.raises(ValueError):
        SequenceLayout(tmp_path, "a", "", "v")


def test_load_exported_rejects_gap(eval_sets, tmp_path):
    clean, _ = eval_sets
    layout = SequenceLayout(tmp_path, "s", "c", "v")
    export_silhouette_sequence(gt_predictor(clean), [clean.load_image(e) for e in clean.entries], layout)
    (layout.view_dir / "000001.png").unlink()
    with pytest.raises(ValueError, match="contiguous"):
        load_exported_sequence(layout.view_dir)


# ---------------------------------------------------------------- comparison


def make_report(method, values):
    rows = []
    for cond, v in values.items():
        rows.append(EvalRow(condition=cond, per_image=[("img0", v / 100.0)], mean_miou=v))
    return EvalReport(method, rows)


def test_compare_methods_flags_best():
    a = make_report("i_s", {"re/12": 80.0, "re/20": 60.0})
    b = make_report("poise", {"re/12": 85.0, "re/20": 75.0})
    c = make_report("i_p", {"re/12": 70.0, "re/20": 65.0})
    text, csv_text = compare_methods([a, b, c])

    lines = csv_text.strip().split("\n")
    assert lines[0] == "method,condition,mean_miou,best"
    best = {(m, c): int(flag) for m, c, _, flag in (l.split(",") for l in lines[1:])}
    assert best[("poise", "re/12")] == 1 and best[("poise", "re/20")] == 1
    assert best[("i_s", "re/12")] == 0 and best[("i_p", "re/20")] == 0
    assert "85.00*" in text and "80.00 " in text


def test_compare_single_report_is_its_rows():
    a = make_report("only", {"c1": 50.0, "c2": 75.0})
    text, csv_text = compare_methods([a])
    assert "50.00*" in text and "75.00*" in text
    assert csv_text.count("\n") == 3  # header + 2 rows


def test_compare_axis_mismatch_rejected():
    a = make_report("a", {"c1": 50.0})
    b = make_report("b", {"c2": 50.0})
    with pytest.raises(ValueError, match="axes differ"):
        compare_methods([a, b])
    with pytest.raises(ValueError):
        compare_methods([])
