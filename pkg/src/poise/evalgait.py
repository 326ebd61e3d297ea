"""mIoU reporting across occlusion conditions and gait-ready silhouette export.

Reports keep every per-image IoU they aggregate, so any mean in any emitted
table can be recomputed from the persisted rows. Export writes the standard
gait-recognition folder convention (subject/condition/view/000000.png) with
binarized 8-bit masks; recognition itself is an external system's job.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import DatasetManifest
from .imaging import binarize, iou, load_mask_png, save_mask_png

FRAME_PAD = 6
SEQUENCE_MANIFEST = "sequence.json"


@dataclass
class EvalRow:
    """Per-condition scores. Foreground IoU is the primary metric; the
    class-averaged variant (mean of foreground and background IoU) rides
    along so both conventions are visible in every report."""

    condition: str
    per_image: list  # [(image_id, fg iou in [0,1]), ...]
    mean_miou: float  # percent
    per_image_class_avg: list = field(default_factory=list)
    mean_class_avg: float | None = None

    def recomputed_mean(self) -> float:
        if not self.per_image:
            raise ValueError(f"condition {self.condition!r} has no images")
        return 100.0 * float(np.mean([v for _, v in self.per_image]))

    def recomputed_class_avg(self) -> float:
        if not self.per_image_class_avg:
            raise ValueError(f"condition {self.condition!r} has no class-averaged values")
        return 100.0 * float(np.mean([v for _, v in self.per_image_class_avg]))


@dataclass
class EvalReport:
    method: str
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for row in self.rows:
            if abs(row.mean_miou - row.recomputed_mean()) > 1e-9:
                raise ValueError(
                    f"row {row.condition!r}: stored mean {row.mean_miou} does not "
                    f"match its per-image values"
                )
            if row.mean_class_avg is not None and (
                abs(row.mean_class_avg - row.recomputed_class_avg()) > 1e-9
            ):
                raise ValueError(
                    f"row {row.condition!r}: stored class-averaged mean does not "
                    f"match its per-image values"
                )

    def conditions(self) -> list:
        return [r.condition for r in self.rows]

    def mean_for(self, condition: str) -> float:
        for r in self.rows:
            if r.condition == condition:
                return r.mean_miou
        raise KeyError(condition)

    def to_json(self) -> str:
        payload = {
            "method": self.method,
            "metadata": self.metadata,
            "rows": [
                {
                    "condition": r.condition,
                    "mean_miou": r.mean_miou,
                    "per_image": [[i, v] for i, v in r.per_image],
                    "mean_class_avg": r.mean_class_avg,
                    "per_image_class_avg": [[i, v] for i, v in r.per_image_class_avg],
                }
                for r in self.rows
            ],
        }
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        payload = json.loads(text)
        rows = [
            EvalRow(
                condition=r["condition"],
                per_image=[(i, float(v)) for i, v in r["per_image"]],
                mean_miou=float(r["mean_miou"]),
                per_image_class_avg=[(i, float(v)) for i, v in r.get("per_image_class_avg", [])],
                mean_class_avg=r.get("mean_class_avg"),
            )
            for r in payload["rows"]
        ]
        return EvalReport(payload["method"], rows, payload.get("metadata", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @staticmethod
    def load(path) -> "EvalReport":
        return EvalReport.from_json(Path(path).read_text())

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "condition", "mean_miou", "mean_class_avg", "num_images"])
        for r in self.rows:
            class_avg = "" if r.mean_class_avg is None else f"{r.mean_class_avg:.6f}"
            w.writerow([self.method, r.condition, f"{r.mean_miou:.6f}", class_avg, len(r.per_image)])
        return buf.getvalue()


def class_averaged_iou(pred, gt, empty_value: float = 1.0) -> float:
    """Mean of foreground IoU and background IoU (complement masks)."""
    fg = iou(pred, gt, empty_value=empty_value)
    bg = iou(1 - np.asarray(pred, dtype=np.uint8), 1 - np.asarray(gt, dtype=np.uint8), empty_value=empty_value)
    return 0.5 * (fg + bg)


def evaluate_miou(
    predict,
    datasets,
    method: str = "model",
    metadata: dict | None = None,
    empty_value: float = 1.0,
) -> EvalReport:
    """Score a predictor on each condition's dataset against ground truth.

    `datasets` maps condition label -> DatasetManifest; every entry needs a
    gt mask or the whole evaluation is rejected naming the offender. The
    prediction is binarized at 0.5 before IoU. Foreground IoU is the primary
    metric; the class-averaged variant is stored alongside and the choice is
    flagged in the report metadata.
    """
    rows = []
    for condition in sorted(datasets):
        manifest: DatasetManifest = datasets[condition]
        per_image = []
        per_class = []
        for entry in manifest:
            if entry.mask is None:
                raise ValueError(
                    f"condition {condition!r}: entry {entry.image_id} has no ground-truth mask"
                )
            pred = binarize(np.asarray(predict(manifest.load_image(entry)), dtype=np.float64), 0.5)
            gt = manifest.load_mask(entry)
            per_image.append((entry.image_id, iou(pred, gt, empty_value=empty_value)))
            per_class.append((entry.image_id, class_averaged_iou(pred, gt, empty_value=empty_value)))
        if not per_image:
            raise ValueError(f"condition {condition!r} has an empty dataset")
        rows.append(
            EvalRow(
                condition=condition,
                per_image=per_image,
                mean_miou=100.0 * float(np.mean([v for _, v in per_image])),
                per_image_class_avg=per_class,
                mean_class_avg=100.0 * float(np.mean([v for _, v in per_class])),
            )
        )
    meta = dict(metadata or {})
    meta.setdefault("metric", "foreground_iou (primary); class-averaged alongside")
    return EvalReport(method=method, rows=rows, metadata=meta)


# ---------------------------------------------------------------- export


@dataclass(frozen=True)
class SequenceLayout:
    root: Path
    subject: str
    condition: str
    view: str

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        for name, part in (("subject", self.subject), ("condition", self.condition), ("view", self.view)):
            if not part or "/" in part or "\\" in part:
                raise ValueError(f"{name} must be a nonempty single path component, got {part!r}")

    @property
    def view_dir(self) -> Path:
        return self.root / self.subject / self.condition / self.view

    def frame_path(self, index: int) -> Path:
        return self.view_dir / f"{index:0{FRAME_PAD}d}.png"


def export_silhouette_sequence(predict, frames, layout: SequenceLayout) -> dict:
    """Binarize predictions for an ordered frame sequence into the gait layout.

    One 8-bit PNG per frame, indices contiguous from 000000. A sequence.json
    beside the frames records the count and a sha256 per file so re-exports
    can be verified byte for byte.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("frame sequence is empty")
    if layout.view_dir.exists() and not layout.view_dir.is_dir():
        raise ValueError(f"destination {layout.view_dir} exists and is not a directory")
    layout.view_dir.mkdir(parents=True, exist_ok=True)

    files = []
    for index, frame in enumerate(frames):
        mask = binarize(np.asarray(predict(frame), dtype=np.float64), 0.5)
        path = layout.frame_path(index)
        save_mask_png(path, mask)
        files.append(
            {"name": path.name, "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}
        )
    manifest = {
        "subject": layout.subject,
        "condition": layout.condition,
        "view": layout.view,
        "count": len(files),
        "files": files,
    }
    (layout.view_dir / SEQUENCE_MANIFEST).write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n"
    )
    return manifest


def load_exported_sequence(view_dir) -> list:
    """Read an exported sequence back as masks, verifying the index contract."""
    view_dir = Path(view_dir)
    paths = sorted(view_dir.glob("*.png"))
    if not paths:
        raise ValueError(f"no exported frames under {view_dir}")
    for i, p in enumerate(paths):
        if not re.fullmatch(rf"\d{{{FRAME_PAD}}}", p.stem) or int(p.stem) != i:
            raise ValueError(f"frame indices not contiguous from 0: unexpected {p.name}")
    return [load_mask_png(p) for p in paths]


# ---------------------------------------------------------------- comparison


def compare_methods(reports) -> tuple[str, str]:
    """Align reports on their shared condition axis; flag the best per condition.

    Returns (text table, csv text). Rejects an empty list and reports whose
    condition axes differ.
    """
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report to compare")
    axis = reports[0].conditions()
    for r in reports[1:]:
        if r.conditions() != axis:
            raise ValueError(
                f"condition axes differ: {axis} (from {reports[0].method!r}) "
                f"vs {r.conditions()} (from {r.method!r})"
            )
    best = {c: max(reports, key=lambda r: r.mean_for(c)).mean_for(c) for c in axis}

    name_w = max(len("method"), max(len(r.method) for r in reports))
    col_w = {c: max(len(c), 8) for c in axis}
    lines = ["method".ljust(name_w) + "  " + "  ".join(c.rjust(col_w[c]) for c in axis)]
    for r in reports:
        cells = []
        for c in axis:
            v = r.mean_for(c)
            mark = "*" if v == best[c] else " "
            cells.append(f"{v:.2f}{mark}".rjust(col_w[c]))
        lines.append(r.method.ljust(name_w) + "  " + "  ".join(cells))
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "condition", "mean_miou", "best"])
    for r in reports:
        for c in axis:
            v = r.mean_for(c)
            w.writerow([r.method, c, f"{v:.6f}", int(v == best[c])])
    return text, buf.getvalue()
