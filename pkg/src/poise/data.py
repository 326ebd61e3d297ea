"""Dataset manifests: JSON index of images with optional masks and keypoints.

A manifest is a JSON file sitting at the dataset root; every path inside it
is relative to that root so datasets relocate freely. Loading validates that
every referenced file exists and reports all offenders at once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .imaging import (
    KeypointSet,
    load_image_png,
    load_keypoints_json,
    load_mask_png,
    save_image_png,
    save_mask_png,
)
from .occlusion import ObjectPatchLibrary, OccluderSpec, apply_occluder, derive_spec_seed

MANIFEST_NAME = "manifest.json"
SPLITS = ("train", "test")


@dataclass
class ManifestEntry:
    image_id: str
    image: str
    mask: str | None = None
    keypoints: str | None = None
    group: str | None = None
    frame_index: int | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class DatasetManifest:
    root: Path
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {self.split!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def load_image(self, entry: ManifestEntry) -> np.ndarray:
        return load_image_png(self.path(entry.image))

    def load_mask(self, entry: ManifestEntry) -> np.ndarray:
        if entry.mask is None:
            raise ValueError(f"entry {entry.image_id} has no mask")
        return load_mask_png(self.path(entry.mask))

    def load_keypoints(self, entry: ManifestEntry) -> KeypointSet:
        if entry.keypoints is None:
            raise ValueError(f"entry {entry.image_id} has no keypoints")
        return load_keypoints_json(self.path(entry.keypoints))

    def save(self, path=None) -> Path:
        path = Path(path) if path else self.root / MANIFEST_NAME
        payload = {
            "split": self.split,
            "seed": self.seed,
            "extra": self.extra,
            "entries": [e.to_dict() for e in self.entries],
        }
        path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
        return path


def load_dataset(manifest_path) -> DatasetManifest:
    """Parse and validate a manifest; every problem is listed, not just the first."""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / MANIFEST_NAME
    payload = json.loads(manifest_path.read_text())
    root = manifest_path.parent

    problems = []
    entries = []
    for i, row in enumerate(payload.get("entries", [])):
        if "image_id" not in row or "image" not in row:
            problems.append(f"entry #{i}: missing image_id/image fields")
            continue
        entry = ManifestEntry(
            image_id=row["image_id"],
            image=row["image"],
            mask=row.get("mask"),
            keypoints=row.get("keypoints"),
            group=row.get("group"),
            frame_index=row.get("frame_index"),
        )
        for kind in ("image", "mask", "keypoints"):
            rel = getattr(entry, kind)
            if rel is not None and not (root / rel).exists():
                problems.append(f"entry {entry.image_id}: missing {kind} file {rel}")
        entries.append(entry)

    # grouped frames must be temporally ordered
    by_group: dict[str, list[ManifestEntry]] = {}
    for e in entries:
        if e.group is not None:
            by_group.setdefault(e.group, []).append(e)
    for gid, members in by_group.items():
        idx = [m.frame_index for m in members]
        if any(i is None for i in idx) or sorted(idx) != idx:
            problems.append(f"group {gid}: frame indices missing or out of order")

    if problems:
        raise ValueError("invalid manifest:\n  " + "\n  ".join(problems))
    return DatasetManifest(
        root=root,
        split=payload.get("split", "train"),
        entries=entries,
        seed=payload.get("seed", 0),
        extra=payload.get("extra", {}),
    )


def manifest_from_directories(root, split: str = "train", seed: int = 0) -> DatasetManifest:
    """Import the plain directory convention: images/, masks/, keypoints/.

    Rows follow the sorted listing of images/; masks and keypoints attach by
    matching stem when present.
    """
    root = Path(root)
    image_dir = root / "images"
    if not image_dir.is_dir():
        raise FileNotFoundError(f"no images/ directory under {root}")
    entries = []
    for img in sorted(image_dir.glob("*.png")):
        stem = img.stem
        mask = root / "masks" / f"{stem}.png"
        kps = root / "keypoints" / f"{stem}.json"
        entries.append(
            ManifestEntry(
                image_id=stem,
                image=f"images/{img.name}",
                mask=f"masks/{mask.name}" if mask.exists() else None,
                keypoints=f"keypoints/{kps.name}" if kps.exists() else None,
            )
        )
    return DatasetManifest(root=root, split=split, entries=entries, seed=seed)


def occlude_dataset(
    manifest: DatasetManifest,
    out_root,
    kind: str,
    severity,
    base_seed: int = 0,
    library: ObjectPatchLibrary | None = None,
    texture: str = "per_pixel_noise",
) -> DatasetManifest:
    """Occlude every image of a dataset; keep gt masks/keypoints, save footprints.

    Each image gets one occluder of the given kind anchored on a joint chosen
    by its per-image seed (derived from base_seed and position, so
    regeneration is reproducible image by image). `severity` is an int or a
    sequence of ints cycled across images for mixed-severity sets. The clean
    ground truth travels along unchanged; the occluder footprint is saved so
    stubs and audits can see exactly which pixels were overwritten.
    """
    severities = [severity] if isinstance(severity, int) else [int(s) for s in severity]
    if not severities:
        raise ValueError("severity sequence is empty")
    out_root = Path(out_root)
    for sub in ("images", "masks", "keypoints", "footprints"):
        (out_root / sub).mkdir(parents=True, exist_ok=True)

    out_entries = []
    for index, entry in enumerate(manifest.entries):
        img = manifest.load_image(entry)
        kps = manifest.load_keypoints(entry)
        spec = OccluderSpec(
            kind=kind,
            severity=severities[index % len(severities)],
            anchor_joints=tuple(range(kps.num_joints)),
            texture=texture if kind == "random_erase" else "patch",
            seed=derive_spec_seed(base_seed, index),
        )
        occluded, footprint = apply_occluder(img, kps, spec, library=library)
        name = f"{entry.image_id}.png"
        save_image_png(out_root / "images" / name, occluded)
        save_mask_png(out_root / "footprints" / name, footprint)
        if entry.mask is not None:
            save_mask_png(out_root / "masks" / name, manifest.load_mask(entry))
        (out_root / "keypoints" / f"{entry.image_id}.json").write_bytes(
            manifest.path(entry.keypoints).read_bytes()
        )
        out_entries.append(
            ManifestEntry(
                image_id=entry.image_id,
                image=f"images/{name}",
                mask=f"masks/{name}" if entry.mask is not None else None,
                keypoints=f"keypoints/{entry.image_id}.json",
                group=entry.group,
                frame_index=entry.frame_index,
            )
        )

    out = DatasetManifest(
        root=out_root,
        split=manifest.split,
        entries=out_entries,
        seed=base_seed,
        extra={
            "occlusion": {
                "kind": kind,
                "severity": severities[0] if len(severities) == 1 else severities,
                "base_seed": base_seed,
            },
            "source_seed": manifest.seed,
        },
    )
    out.save()
    return out
