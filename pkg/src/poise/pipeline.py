"""Stage orchestration: one config, one artifact tree, resumable stages.

Stage order is fixed (synth -> occlude -> train-pose2sil -> adapt-pose ->
train-fusion -> eval -> export); a config selects a subset. Every stage
records a stamp keyed by the hash of exactly what it read (its config keys
plus upstream stage hashes), so reruns with an unchanged config skip work
and a changed knob invalidates precisely the stages downstream of it. The
global seed determines every artifact byte; wall-clock timings live only in
the run ledger.
"""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from .config import ALL_STAGES, config_hash
from .data import DatasetManifest, load_dataset, occlude_dataset
from .occlusion import ObjectPatchLibrary
from .evalgait import SequenceLayout, compare_methods, evaluate_miou, export_silhouette_sequence
from .fusion import (
    FusionConfig,
    NaiveOccludedSegmenter,
    OraclePoseEstimator,
    OracleSegmenter,
    infer_silhouette,
    load_fusion,
    save_fusion,
    train_fusion,
)
from .pose2sil import (
    Pose2SilTrainConfig,
    PoseSilPair,
    load_generator,
    pose_to_silhouette,
    save_generator,
    train_pose2sil,
)
from .poseadapt import (
    AdaptScheduleConfig,
    adapt_pose_estimator,
    as_pose_interface,
    load_pose_estimator,
    save_pose_estimator,
)
from .synth import SyntheticSceneSpec, generate_synthetic_dataset
from .torchops import seed_everything

ARTIFACT_ENV = "POISE_ARTIFACTS"

_STAGE_KEYS = {
    "synth": ("seed", "height", "width", "train_scenes", "test_scenes", "background", "scene_margin"),
    "occlude": ("occlusion_kind", "occlusion_severity", "occlusion_texture"),
    "train-pose2sil": ("pose2sil_epochs", "pose2sil_lr", "pose2sil_batch", "pose2sil_channels"),
    "adapt-pose": (
        "adapt_epochs",
        "adapt_warmup",
        "adapt_batch",
        "adapt_lr",
        "ema_alpha",
        "heatmap_sigma",
        "consistency_weight",
    ),
    "train-fusion": (
        "fusion_epochs",
        "fusion_batch",
        "fusion_lr",
        "lambda1",
        "lambda2",
        "lambda3",
        "tau",
        "pl_start_epoch",
        "fusion_augment",
        "seg_source",
        "pose_source",
    ),
    "eval": ("eval_split", "eval_methods"),
    "export": ("export_frames", "export_subject", "export_view"),
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


def _stage_deps(stage: str, cfg: dict) -> tuple:
    """Upstream stages whose outputs this stage actually reads."""
    if stage == "synth":
        return ()
    if stage in ("occlude", "train-pose2sil"):
        return ("synth",)
    if stage == "adapt-pose":
        return ("synth", "occlude")
    if stage == "train-fusion":
        deps = ["synth", "occlude", "train-pose2sil"]
        if cfg["pose_source"] == "adapted":
            deps.append("adapt-pose")
        return tuple(deps)
    if stage == "eval":
        methods = set(cfg["eval_methods"])
        deps = ["synth"]
        if cfg["eval_split"] == "occluded":
            deps.append("occlude")
        if methods & {"poise", "i_p"}:
            deps.append("train-pose2sil")
        if "poise" in methods:
            deps.append("train-fusion")
        return tuple(deps)
    if stage == "export":
        deps = ["synth", "train-fusion"]
        if cfg["eval_split"] == "occluded":
            deps.append("occlude")
        return tuple(deps)
    raise ValueError(f"unknown stage {stage!r}")


def stage_hashes(cfg: dict) -> dict:
    """Chained per-stage input hashes, derived from config alone."""
    hashes = {}
    for stage in ALL_STAGES:
        payload = {
            "stage": stage,
            "keys": {k: cfg[k] for k in _STAGE_KEYS[stage]},
            "deps": {d: hashes[d] for d in _stage_deps(stage, cfg)},
        }
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        hashes[stage] = hashlib.sha256(canonical.encode()).hexdigest()
    return hashes


def _condition_label(cfg: dict) -> str:
    if cfg["eval_split"] == "clean":
        return "clean"
    return f"{cfg['occlusion_kind']}/{cfg['occlusion_severity']}"


def _eval_manifest_dir(out: Path, cfg: dict) -> Path:
    sub = "test_occluded" if cfg["eval_split"] == "occluded" else "test_clean"
    return out / "data" / sub


def _stage_probe(stage: str, out: Path, cfg: dict) -> Path:
    """One file whose presence says the stage's artifacts survived on disk."""
    if stage == "synth":
        return out / "data" / "test_clean" / "manifest.json"
    if stage == "occlude":
        return out / "data" / "test_occluded" / "manifest.json"
    if stage == "train-pose2sil":
        return out / "models" / "pose2sil" / "meta.json"
    if stage == "adapt-pose":
        return out / "models" / "pose_estimator" / "meta.json"
    if stage == "train-fusion":
        return out / "models" / "fusion" / "meta.json"
    if stage == "eval":
        return out / "reports" / "comparison.csv"
    if stage == "export":
        condition = _condition_label(cfg).replace("/", "-")
        return out / "export" / cfg["export_subject"] / condition / cfg["export_view"] / "sequence.json"
    raise ValueError(f"unknown stage {stage!r}")


# ---------------------------------------------------------------- stage runners


def _run_synth(cfg: dict, out: Path) -> None:
    for split, scenes, seed in (
        ("train_clean", cfg["train_scenes"], cfg["seed"]),
        ("test_clean", cfg["test_scenes"], cfg["seed"] + 1),
    ):
        spec = SyntheticSceneSpec(
            height=cfg["height"],
            width=cfg["width"],
            num_scenes=scenes,
            seed=seed,
            background=cfg["background"],
            margin=cfg["scene_margin"],
        )
        generate_synthetic_dataset(
            spec, out / "data" / split, split="train" if split.startswith("train") else "test"
        )


def _run_occlude(cfg: dict, out: Path) -> None:
    library = ObjectPatchLibrary.procedural() if cfg["occlusion_kind"] == "object_paste" else None
    for src, dst, base in (
        ("train_clean", "train_occluded", cfg["seed"]),
        ("test_clean", "test_occluded", cfg["seed"] + 1),
    ):
        occlude_dataset(
            load_dataset(out / "data" / src),
            out / "data" / dst,
            kind=cfg["occlusion_kind"],
            severity=cfg["occlusion_severity"],
            base_seed=base,
            library=library,
            texture=cfg["occlusion_texture"],
        )


def _run_train_pose2sil(cfg: dict, out: Path) -> None:
    manifest = load_dataset(out / "data" / "train_clean")
    pairs = [
        PoseSilPair(manifest.load_keypoints(e), manifest.load_mask(e), image_id=e.image_id)
        for e in manifest
    ]
    hyper = Pose2SilTrainConfig(
        epochs=cfg["pose2sil_epochs"],
        learning_rate=cfg["pose2sil_lr"],
        batch_size=cfg["pose2sil_batch"],
        seed=cfg["seed"],
        base_channels=cfg["pose2sil_channels"],
    )
    save_generator(out / "models" / "pose2sil", train_pose2sil(pairs, hyper))


def _run_adapt_pose(cfg: dict, out: Path) -> None:
    source_man = load_dataset(out / "data" / "train_clean")
    target_man = load_dataset(out / "data" / "train_occluded")
    source = [(source_man.load_image(e), source_man.load_keypoints(e)) for e in source_man]
    target = [target_man.load_image(e) for e in target_man]
    schedule = AdaptScheduleConfig(
        epochs=cfg["adapt_epochs"],
        warmup_epochs=cfg["adapt_warmup"],
        batch_size=cfg["adapt_batch"],
        learning_rate=cfg["adapt_lr"],
        ema_alpha=cfg["ema_alpha"],
        sigma=cfg["heatmap_sigma"],
        consistency_weight=cfg["consistency_weight"],
        seed=cfg["seed"],
    )
    state = adapt_pose_estimator(source, target, schedule)
    save_pose_estimator(
        out / "models" / "pose_estimator", state.teacher, sigma=cfg["heatmap_sigma"]
    )


def _make_seg(cfg: dict, manifest: DatasetManifest):
    if cfg["seg_source"] == "oracle":
        return OracleSegmenter.from_manifest(manifest)
    return NaiveOccludedSegmenter.from_manifest(manifest)


def _make_pose(cfg: dict, manifest: DatasetManifest, out: Path):
    if cfg["pose_source"] == "oracle":
        return OraclePoseEstimator.from_manifest(manifest)
    if cfg["pose_source"] == "oracle_occluded":
        return OraclePoseEstimator.from_manifest(manifest, drop_occluded=True)
    model, meta = load_pose_estimator(out / "models" / "pose_estimator")
    return as_pose_interface(model)


def _run_train_fusion(cfg: dict, out: Path) -> None:
    manifest = load_dataset(out / "data" / "train_occluded")
    gen = load_generator(out / "models" / "pose2sil")
    fusion_cfg = FusionConfig(
        lambda1=cfg["lambda1"],
        lambda2=cfg["lambda2"],
        lambda3=cfg["lambda3"],
        tau=cfg["tau"],
        pl_start_epoch=cfg["pl_start_epoch"],
        epochs=cfg["fusion_epochs"],
        batch_size=cfg["fusion_batch"],
        learning_rate=cfg["fusion_lr"],
        seed=cfg["seed"],
        augment=cfg["fusion_augment"],
    )
    state = train_fusion(
        manifest, _make_seg(cfg, manifest), _make_pose(cfg, manifest, out), gen, fusion_cfg
    )
    save_fusion(out / "models" / "fusion", state)


def _method_predictors(cfg: dict, out: Path, manifest: DatasetManifest) -> dict:
    predictors = {}
    methods = cfg["eval_methods"]
    if "oracle" in methods:
        predictors["oracle"] = OracleSegmenter.from_manifest(manifest)
    if "i_s" in methods:
        predictors["i_s"] = NaiveOccludedSegmenter.from_manifest(manifest)
    if "i_p" in methods or "poise" in methods:
        gen = load_generator(out / "models" / "pose2sil")
    if "i_p" in methods:
        pose = _make_pose(cfg, manifest, out)
        predictors["i_p"] = lambda img: pose_to_silhouette(gen, pose(img))
    if "poise" in methods:
        fusion = load_fusion(out / "models" / "fusion")
        predictors["poise"] = lambda img: infer_silhouette(fusion, img)
    return predictors


def _run_eval(cfg: dict, out: Path) -> None:
    manifest = load_dataset(_eval_manifest_dir(out, cfg))
    condition = _condition_label(cfg)
    metadata = {"config_hash": config_hash(cfg), "seed": cfg["seed"]}
    reports = []
    report_dir = out / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    for method, predict in _method_predictors(cfg, out, manifest).items():
        report = evaluate_miou(predict, {condition: manifest}, method=method, metadata=metadata)
        report.save(report_dir / f"{method}.json")
        (report_dir / f"{method}.csv").write_text(report.to_csv())
        reports.append(report)
    text, csv_text = compare_methods(reports)
    (report_dir / "comparison.txt").write_text(text)
    (report_dir / "comparison.csv").write_text(csv_text)


def _run_export(cfg: dict, out: Path) -> None:
    manifest = load_dataset(_eval_manifest_dir(out, cfg))
    fusion = load_fusion(out / "models" / "fusion")
    frames = [manifest.load_image(e) for e in manifest.entries[: cfg["export_frames"]]]
    layout = SequenceLayout(
        out / "export",
        cfg["export_subject"],
        _condition_label(cfg).replace("/", "-"),
        cfg["export_view"],
    )
    export_silhouette_sequence(lambda img: infer_silhouette(fusion, img), frames, layout)


_RUNNERS = {
    "synth": _run_synth,
    "occlude": _run_occlude,
    "train-pose2sil": _run_train_pose2sil,
    "adapt-pose": _run_adapt_pose,
    "train-fusion": _run_train_fusion,
    "eval": _run_eval,
    "export": _run_export,
}


# ---------------------------------------------------------------- orchestration


def run_pipeline(cfg: dict, out) -> dict:
    """Run the configured stages under `out`; return the ledger (also saved there).

    A stage is skipped when its stamp matches the current input hash and its
    artifacts are still on disk. A failing stage halts the run, named in the
    raised PipelineError; artifacts written before the failure stay put.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "stamps").mkdir(exist_ok=True)
    hashes = stage_hashes(cfg)
    ledger = {
        "config": cfg,
        "config_hash": config_hash(cfg),
        "stages": [],
    }
    for stage in ALL_STAGES:
        if stage not in cfg["stages"]:
            continue
        stamp_path = out / "stamps" / f"{stage}.json"
        want = hashes[stage]
        fresh = False
        if stamp_path.exists() and _stage_probe(stage, out, cfg).exists():
            fresh = json.loads(stamp_path.read_text()).get("input_hash") == want
        start = time.perf_counter()
        if not fresh:
            seed_everything(cfg["seed"])
            try:
                _RUNNERS[stage](cfg, out)
            except Exception as e:
                raise PipelineError(stage, e) from e
            stamp_path.write_text(
                json.dumps({"stage": stage, "input_hash": want}, sort_keys=True) + "\n"
            )
        ledger["stages"].append(
            {
                "name": stage,
                "cached": fresh,
                "input_hash": want,
                "duration_s": round(time.perf_counter() - start, 3),
            }
        )
    (out / "ledger.json").write_text(json.dumps(ledger, sort_keys=True, indent=1) + "\n")
    return ledger
