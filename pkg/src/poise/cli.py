"""The `poise` command: stage-by-stage tools plus the one-shot `run`."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .config import ALL_STAGES, load_config, parse_override
from .data import load_dataset, manifest_from_directories, occlude_dataset
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
from .imaging import (
    binarize,
    load_image_png,
    load_keypoints_json,
    save_mask_png,
    save_probmap_png,
)
from .occlusion import ObjectPatchLibrary
from .pipeline import ARTIFACT_ENV, run_pipeline
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


def _load_any_dataset(path):
    path = Path(path)
    if (path / "manifest.json").exists() or path.suffix == ".json":
        return load_dataset(path)
    return manifest_from_directories(path)


def _cmd_synth(args) -> int:
    spec = SyntheticSceneSpec(
        height=args.height,
        width=args.width,
        num_scenes=args.scenes,
        seed=args.seed,
        background=args.background,
        margin=args.margin,
    )
    manifest = generate_synthetic_dataset(spec, args.out, split=args.split)
    print(f"wrote {len(manifest)} scenes to {args.out}")
    return 0


def _cmd_occlude(args) -> int:
    manifest = _load_any_dataset(args.data)
    library = None
    if args.kind == "object_paste":
        library = ObjectPatchLibrary.load_dir(args.library) if args.library else ObjectPatchLibrary.procedural()
    severity = [int(s) for s in args.severity.split(",")]
    out = occlude_dataset(
        manifest,
        args.out,
        kind=args.kind,
        severity=severity if len(severity) > 1 else severity[0],
        base_seed=args.seed,
        library=library,
        texture=args.texture,
    )
    print(f"occluded {len(out)} images into {args.out}")
    return 0


def _cmd_train_pose2sil(args) -> int:
    manifest = _load_any_dataset(args.data)
    pairs = [
        PoseSilPair(manifest.load_keypoints(e), manifest.load_mask(e), image_id=e.image_id)
        for e in manifest
    ]
    hyper = Pose2SilTrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        batch_size=args.batch,
        seed=args.seed,
        base_channels=args.channels,
    )
    state = train_pose2sil(pairs, hyper)
    save_generator(args.out, state)
    print(f"pose2sil generator saved to {args.out} (final train bce {state.loss_curve[-1]:.4f})")
    return 0


def _cmd_pose2sil_infer(args) -> int:
    state = load_generator(args.ckpt)
    kps = load_keypoints_json(args.pose)
    sil = pose_to_silhouette(state, kps)
    if args.mask:
        save_mask_png(args.out, binarize(sil, 0.5))
    else:
        save_probmap_png(args.out, sil)
    print(f"silhouette written to {args.out}")
    return 0


def _cmd_adapt_pose(args) -> int:
    source_man = _load_any_dataset(args.source)
    target_man = _load_any_dataset(args.target)
    source = [(source_man.load_image(e), source_man.load_keypoints(e)) for e in source_man]
    target = [target_man.load_image(e) for e in target_man]
    schedule = AdaptScheduleConfig(
        epochs=args.epochs,
        warmup_epochs=args.warmup,
        batch_size=args.batch,
        learning_rate=args.lr,
        ema_alpha=args.ema,
        sigma=args.sigma,
        consistency_weight=args.consistency_weight,
        seed=args.seed,
    )
    state = adapt_pose_estimator(source, target, schedule)
    save_pose_estimator(args.out, state.teacher, sigma=args.sigma)
    print(f"adapted pose estimator (teacher) saved to {args.out}")
    return 0


def _make_pose_source(name, ckpt, manifest):
    if ckpt:
        model, _ = load_pose_estimator(ckpt)
        return as_pose_interface(model)
    if name == "oracle":
        return OraclePoseEstimator.from_manifest(manifest)
    return OraclePoseEstimator.from_manifest(manifest, drop_occluded=True)


def _cmd_train_fusion(args) -> int:
    manifest = _load_any_dataset(args.data)
    gen = load_generator(args.gen)
    seg = (
        OracleSegmenter.from_manifest(manifest)
        if args.seg == "oracle"
        else NaiveOccludedSegmenter.from_manifest(manifest)
    )
    pose = _make_pose_source(args.pose, args.pose_ckpt, manifest)
    cfg = FusionConfig(
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        lambda3=args.lambda3,
        tau=args.tau,
        pl_start_epoch=args.pl_start_epoch,
        epochs=args.epochs,
        batch_size=args.batch,
        learning_rate=args.lr,
        seed=args.seed,
        augment=not args.no_augment,
    )
    state = train_fusion(manifest, seg, pose, gen, cfg)
    save_fusion(args.out, state)
    kept = len(manifest) - len(state.skipped)
    print(
        f"fusion model saved to {args.out} "
        f"({kept}/{len(manifest)} images used, final loss {state.loss_history[-1]['total']:.4f})"
    )
    return 0


def _cmd_infer(args) -> int:
    state = load_fusion(args.ckpt)
    prob = infer_silhouette(state, load_image_png(args.image))
    if args.mask:
        save_mask_png(args.out, binarize(prob, 0.5))
    else:
        save_probmap_png(args.out, prob)
    print(f"silhouette written to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    manifest = _load_any_dataset(args.data)
    methods = args.methods.split(",")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for method in methods:
        if method == "oracle":
            predict = OracleSegmenter.from_manifest(manifest)
        elif method == "i_s":
            predict = NaiveOccludedSegmenter.from_manifest(manifest)
        elif method == "i_p":
            gen = load_generator(args.gen)
            pose = _make_pose_source(args.pose, args.pose_ckpt, manifest)
            predict = lambda img, g=gen, p=pose: pose_to_silhouette(g, p(img))
        elif method == "poise":
            fusion = load_fusion(args.fusion)
            predict = lambda img, f=fusion: infer_silhouette(f, img)
        else:
            raise SystemExit(f"unknown method {method!r}")
        report = evaluate_miou(predict, {args.condition: manifest}, method=method)
        report.save(out / f"{method}.json")
        (out / f"{method}.csv").write_text(report.to_csv())
        reports.append(report)
    text, csv_text = compare_methods(reports)
    (out / "comparison.txt").write_text(text)
    (out / "comparison.csv").write_text(csv_text)
    print(text, end="")
    return 0


def _cmd_export(args) -> int:
    manifest = _load_any_dataset(args.frames)
    fusion = load_fusion(args.ckpt)
    entries = manifest.entries[: args.limit] if args.limit else manifest.entries
    frames = [manifest.load_image(e) for e in entries]
    layout = SequenceLayout(args.out, args.subject, args.condition, args.view)
    result = export_silhouette_sequence(
        lambda img: infer_silhouette(fusion, img), frames, layout
    )
    print(f"exported {result['count']} frames to {layout.view_dir}")
    return 0


def _cmd_run(args) -> int:
    overrides = {}
    for item in args.set or []:
        key, value = parse_override(item)
        overrides[key] = value
    cfg = load_config(args.config, overrides)
    out = args.out or os.environ.get(ARTIFACT_ENV) or "artifacts"
    ledger = run_pipeline(cfg, out)
    print(f"run complete under {out} (config {ledger['config_hash'][:12]})")
    for row in ledger["stages"]:
        mark = "cached" if row["cached"] else f"{row['duration_s']:.1f}s"
        print(f"  {row['name']:<15} {mark}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poise",
        description="Occlusion-robust human silhouette extraction: data synthesis, "
        "training, evaluation, and gait-ready export.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with exact labels")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--background", default="noise_rects", choices=["noise_rects", "hard"])
    p.add_argument("--margin", type=int, default=5, help="empty border kept around the figure")
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("occlude", help="paste occluders over a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", default="random_erase", choices=["random_erase", "object_paste"])
    p.add_argument("--severity", default="20", help="int or comma list cycled over images")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--texture", default="per_pixel_noise", choices=["uniform", "per_pixel_noise"])
    p.add_argument("--library", help="object patch directory (procedural if omitted)")
    p.set_defaults(func=_cmd_occlude)

    p = sub.add_parser("train-pose2sil", help="fit the pose -> silhouette generator")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=120)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--channels", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_pose2sil)

    p = sub.add_parser("pose2sil-infer", help="render a silhouette from keypoints")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--pose", required=True, help="keypoints json")
    p.add_argument("--out", required=True)
    p.add_argument("--mask", action="store_true", help="write a binary mask instead of a probmap")
    p.set_defaults(func=_cmd_pose2sil_infer)

    p = sub.add_parser("adapt-pose", help="mean-teacher adaptation of the pose estimator")
    p.add_argument("--source", required=True, help="labeled source dataset")
    p.add_argument("--target", required=True, help="unlabeled target dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=8)
    p.add_argument("--warmup", type=int, default=4)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--ema", type=float, default=0.999)
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--consistency-weight", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_adapt_pose)

    p = sub.add_parser("train-fusion", help="train the silhouette model on I_S + I_P + pseudo-labels")
    p.add_argument("--data", required=True)
    p.add_argument("--gen", required=True, help="pose2sil checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--seg", default="naive_occluded", choices=["oracle", "naive_occluded"])
    p.add_argument("--pose", default="oracle_occluded", choices=["oracle", "oracle_occluded"])
    p.add_argument("--pose-ckpt", help="adapted pose estimator checkpoint (overrides --pose)")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lambda1", type=float, default=1.0)
    p.add_argument("--lambda2", type=float, default=1.0)
    p.add_argument("--lambda3", type=float, default=0.5)
    p.add_argument("--tau", type=float, default=0.9)
    p.add_argument("--pl-start-epoch", type=int, default=5)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_train_fusion)

    p = sub.add_parser("infer", help="run the fusion model on one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mask", action="store_true", help="write a binary mask instead of a probmap")
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("eval", help="mIoU report for one or more methods")
    p.add_argument("--data", required=True, help="dataset with ground-truth masks")
    p.add_argument("--condition", default="clean", help="condition label for the report rows")
    p.add_argument("--out", required=True)
    p.add_argument("--methods", default="poise", help="comma list: poise,i_s,i_p,oracle")
    p.add_argument("--fusion", help="fusion checkpoint (for poise)")
    p.add_argument("--gen", help="pose2sil checkpoint (for i_p)")
    p.add_argument("--pose", default="oracle_occluded", choices=["oracle", "oracle_occluded"])
    p.add_argument("--pose-ckpt", help="adapted pose estimator checkpoint")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export", help="export binarized silhouettes in the gait folder layout")
    p.add_argument("--ckpt", required=True, help="fusion checkpoint")
    p.add_argument("--frames", required=True, help="dataset whose images become the sequence")
    p.add_argument("--out", required=True)
    p.add_argument("--subject", default="subj001")
    p.add_argument("--condition", default="nm-01")
    p.add_argument("--view", default="000")
    p.add_argument("--limit", type=int, default=0, help="export only the first N frames")
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("run", help=f"run pipeline stages ({', '.join(ALL_STAGES)})")
    p.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    p.add_argument("--out", help=f"artifact root (or ${ARTIFACT_ENV}, default ./artifacts)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    p.set_defaults(func=_cmd_run)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
