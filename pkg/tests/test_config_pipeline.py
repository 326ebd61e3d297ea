"""Config layer and pipeline orchestration tests (tiny desk-scale runs)."""

import json
from pathlib import Path

import pytest

from poise.config import DEFAULTS, config_hash, load_config, parse_override
from poise.evalgait import EvalReport
from poise.pipeline import PipelineError, run_pipeline, stage_hashes

TINY = {
    "height": 32,
    "width": 32,
    "scene_margin": 3,
    "train_scenes": 6,
    "test_scenes": 3,
    "occlusion_severity": 20,
    "pose2sil_epochs": 2,
    "pose2sil_channels": 32,
    "adapt_epochs": 2,
    "adapt_warmup": 1,
    "adapt_batch": 4,
    "fusion_epochs": 2,
    "fusion_batch": 4,
    "pl_start_epoch": 1,
    "export_frames": 2,
}


def tiny_config(**kw):
    over = dict(TINY)
    over.update(kw)
    return load_config(overrides=over)


# ---------------------------------------------------------------- config


def test_defaults_and_layering(tmp_path):
    cfg = load_config()
    assert cfg == {**DEFAULTS, "stages": list(DEFAULTS["stages"]), "eval_methods": list(DEFAULTS["eval_methods"])}

    f = tmp_path / "cfg.json"
    f.write_text(json.dumps({"seed": 7, "tau": 0.8}))
    cfg = load_config(f, overrides={"seed": 9})
    assert cfg["seed"] == 9  # overrides beat the file
    assert cfg["tau"] == 0.8
    assert cfg["height"] == DEFAULTS["height"]


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ValueError, match="unknown config key"):
        load_config(overrides={"huight": 64})
    f = tmp_path / "cfg.json"
    f.write_text(json.dumps({"not_a_knob": 1}))
    with pytest.raises(ValueError, match="not_a_knob"):
        load_config(f)


def test_type_and_choice_validation():
    with pytest.raises(ValueError):
        load_config(overrides={"height": "tall"})
    with pytest.raises(ValueError):
        load_config(overrides={"fusion_augment": 1})
    with pytest.raises(ValueError):
        load_config(overrides={"background": "plasma"})
    with pytest.raises(ValueError, match="unknown stages"):
        load_config(overrides={"stages": ["synth", "transmogrify"]})
    with pytest.raises(ValueError, match="eval methods"):
        load_config(overrides={"eval_methods": ["pose"]})
    cfg = load_config(overrides={"tau": 1})  # int promotes to float
    assert cfg["tau"] == 1.0 and isinstance(cfg["tau"], float)


def test_parse_override():
    assert parse_override("seed=3") == ("seed", 3)
    assert parse_override("tau=0.8") == ("tau", 0.8)
    assert parse_override("background=hard") == ("background", "hard")
    assert parse_override('stages=["synth"]') == ("stages", ["synth"])
    assert parse_override("fusion_augment=false") == ("fusion_augment", False)
    with pytest.raises(ValueError):
        parse_override("no-equals-sign")


def test_config_hash_canonical():
    a = load_config(overrides={"seed": 1})
    b = load_config(overrides={"seed": 1})
    c = load_config(overrides={"seed": 2})
    assert config_hash(a) == config_hash(b)
    assert config_hash(a) != config_hash(c)


def test_stage_hash_scoping():
    base = tiny_config()
    h0 = stage_hashes(base)
    # a fusion knob must not invalidate upstream stages
    h1 = stage_hashes(tiny_config(fusion_lr=5e-4))
    for stage in ("synth", "occlude", "train-pose2sil", "adapt-pose"):
        assert h0[stage] == h1[stage]
    for stage in ("train-fusion", "eval", "export"):
        assert h0[stage] != h1[stage]
    # the global seed invalidates everything from synth on down
    h2 = stage_hashes(tiny_config(seed=5))
    assert all(h0[s] != h2[s] for s in h0)


# ---------------------------------------------------------------- pipeline


def test_degenerate_pipeline_oracle_eval(tmp_path):
    cfg = tiny_config(
        stages=["synth", "eval"], eval_split="clean", eval_methods=["oracle"]
    )
    ledger = run_pipeline(cfg, tmp_path)
    assert [s["name"] for s in ledger["stages"]] == ["synth", "eval"]
    assert (tmp_path / "data" / "train_clean" / "manifest.json").exists()
    report = EvalReport.load(tmp_path / "reports" / "oracle.json")
    assert report.mean_for("clean") == 100.0


@pytest.fixture(scope="module")
def full_tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipe") / "run"
    cfg = tiny_config()
    ledger = run_pipeline(cfg, out)
    return cfg, out, ledger


def test_full_tiny_run_artifacts(full_tiny_run):
    cfg, out, ledger = full_tiny_run
    assert [s["name"] for s in ledger["stages"]] == list(cfg["stages"])
    assert not any(s["cached"] for s in ledger["stages"])
    for probe in (
        "data/train_occluded/manifest.json",
        "models/pose2sil/meta.json",
        "models/pose_estimator/meta.json",
        "models/fusion/meta.json",
        "reports/comparison.csv",
        "reports/poise.json",
        "export/subj001/random_erase-20/000/sequence.json",
        "ledger.json",
    ):
        assert (out / probe).exists(), probe
    saved = json.loads((out / "ledger.json").read_text())
    assert saved["config_hash"] == ledger["config_hash"]


def test_rerun_hits_cache(full_tiny_run):
    cfg, out, _ = full_tiny_run
    report_before = (out / "reports" / "comparison.csv").read_bytes()
    ledger = run_pipeline(cfg, out)
    assert all(s["cached"] for s in ledger["stages"])
    assert (out / "reports" / "comparison.csv").read_bytes() == report_before


def test_knob_change_invalidates_downstream_only(full_tiny_run, tmp_path):
    cfg, out, _ = full_tiny_run
    mask_before = (out / "data" / "test_occluded" / "masks" / "000000.png").read_bytes()
    cfg2 = tiny_config(fusion_lr=5e-4)
    ledger = run_pipeline(cfg2, out)
    cached = {s["name"]: s["cached"] for s in ledger["stages"]}
    assert cached["synth"] and cached["occlude"]
    assert cached["train-pose2sil"] and cached["adapt-pose"]
    assert not cached["train-fusion"] and not cached["eval"] and not cached["export"]
    assert (out / "data" / "test_occluded" / "masks" / "000000.png").read_bytes() == mask_before
    # restore the fusion artifacts for the other tests in this module
    run_pipeline(full_tiny_run[0], out)


def test_missing_upstream_stage_names_failing_stage(tmp_path):
    cfg = tiny_config(stages=["train-fusion"])
    with pytest.raises(PipelineError, match="train-fusion") as exc_info:
        run_pipeline(cfg, tmp_path / "broken")
    assert exc_info.value.stage == "train-fusion"


def test_two_runs_byte_identical(tmp_path, full_tiny_run):
    # reduced form of the determinism acceptance check: fresh directory,
    # same config -> same bytes for masks, manifests, and reports
    cfg, out_a, _ = full_tiny_run
    out_b = tmp_path / "again"
    run_pipeline(cfg, out_b)
    for rel in sorted(p.relative_to(out_a) for p in out_a.rglob("*") if p.is_file()):
        s = str(rel)
        if s == "ledger.json" or s.startswith("stamps/"):
            continue  # wall clock lives here
        if s.endswith(".pt"):
            continue  # torch zips embed timestamps; tensor equality is covered downstream
        a, b = out_a / rel, out_b / rel
        assert b.exists(), f"missing {rel} in second run"
        assert a.read_bytes() == b.read_bytes(), f"{rel} differs between runs"
