"""Keypoint-anchored occlusion synthesis and per-video occlusion scheduling.

Two occluder families are supported: random-erase squares (noise or flat
color fill) and object patches alpha-composited from a cut-out library.
Severity is the occluder side length (random-erase) or height (patch) as a
percentage of the person's keypoint bounding-box height, which keeps the
benchmark scale-invariant across image resolutions.

Everything is seeded and pure: the same (image, keypoints, spec) triple
always produces bit-identical output, so occluded benchmarks can be
regenerated exactly from their manifests.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .imaging import (
    KeypointSet,
    as_image,
    as_mask,
    load_image_png,
    load_mask_png,
    save_image_png,
    save_mask_png,
)

KIND_RANDOM_ERASE = "random_erase"
KIND_OBJECT_PASTE = "object_paste"
KINDS = (KIND_RANDOM_ERASE, KIND_OBJECT_PASTE)

TEXTURE_UNIFORM = "uniform_random_color"
TEXTURE_NOISE = "per_pixel_noise"
TEXTURE_PATCH = "patch"
TEXTURES = (TEXTURE_UNIFORM, TEXTURE_NOISE, TEXTURE_PATCH)


class OcclusionError(ValueError):
    """Raised when an occluder cannot be placed as specified."""


@dataclass(frozen=True)
class OccluderSpec:
    """One occluder: what it is, how big, where it may anchor, and its seed.

    severity is an integer percentage in 1..100 of the keypoint bounding-box
    height. anchor_joints lists candidate joint indices; the placement joint
    is drawn uniformly from the visible ones using `seed`, which fully
    determines the output.
    """

    kind: str
    severity: int
    anchor_joints: tuple[int, ...]
    texture: str = TEXTURE_NOISE
    patch_id: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown occluder kind {self.kind!r}")
        if not (1 <= int(self.severity) <= 100):
            raise ValueError(f"severity must be in 1..100, got {self.severity}")
        if not self.anchor_joints:
            raise ValueError("anchor_joints must be nonempty")
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}")
        if self.kind == KIND_RANDOM_ERASE and self.texture == TEXTURE_PATCH:
            raise ValueError("random_erase occluders take a color/noise texture, not a patch")
        object.__setattr__(self, "severity", int(self.severity))
        object.__setattr__(self, "anchor_joints", tuple(int(j) for j in self.anchor_joints))
        object.__setattr__(self, "seed", int(self.seed))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "severity": self.severity,
            "anchor_joints": list(self.anchor_joints),
            "texture": self.texture,
            "patch_id": self.patch_id,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "OccluderSpec":
        return OccluderSpec(
            kind=d["kind"],
            severity=d["severity"],
            anchor_joints=tuple(d["anchor_joints"]),
            texture=d.get("texture", TEXTURE_NOISE),
            patch_id=d.get("patch_id"),
            seed=d.get("seed", 0),
        )


@dataclass(frozen=True)
class OcclusionSchedule:
    """Contiguous occluded frame run inside a video of num_frames frames."""

    num_frames: int
    occluded_range: tuple[int, int]  # [start, end)
    per_frame_specs: tuple[OccluderSpec, ...]

    def __post_init__(self):
        start, end = self.occluded_range
        if not (0 <= start <= end <= self.num_frames):
            raise ValueError(f"occluded range {self.occluded_range} does not fit 0..{self.num_frames}")
        if len(self.per_frame_specs) != end - start:
            raise ValueError("need exactly one spec per occluded frame")

    def spec_for_frame(self, frame_index: int) -> OccluderSpec | None:
        start, end = self.occluded_range
        if start <= frame_index < end:
            return self.per_frame_specs[frame_index - start]
        return None


@dataclass
class ObjectPatchLibrary:
    """Cut-out occluder patches: (id, RGB image, binary alpha mask) triples.

    The bundled default is procedural (simple solid shapes in varied colors)
    so the package ships no binary assets; `load_dir`/`save_dir` define the
    on-disk format (`<id>_rgb.png` + `<id>_mask.png`) for substituting real
    object crops.
    """

    patches: list[tuple[str, np.ndarray, np.ndarray]] = field(default_factory=list)

    def __post_init__(self):
        for pid, rgb, mask in self.patches:
            if rgb.shape[:2] != mask.shape:
                raise ValueError(f"patch {pid}: image and mask shapes differ")
            if int(as_mask(mask).sum()) == 0:
                raise ValueError(f"patch {pid}: mask is empty")

    def __len__(self) -> int:
        return len(self.patches)

    def ids(self) -> list[str]:
        return [pid for pid, _, _ in self.patches]

    def get(self, patch_id: str) -> tuple[np.ndarray, np.ndarray]:
        for pid, rgb, mask in self.patches:
            if pid == patch_id:
                return rgb, mask
        raise KeyError(f"no patch with id {patch_id!r}")

    @staticmethod
    def procedural(num_patches: int = 24, size: int = 33, seed: int = 7) -> "ObjectPatchLibrary":
        """Deterministic library of >= 20 filled shapes (ellipses, boxes, blobs)."""
        rng = np.random.default_rng(seed)
        rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
        center = (size - 1) / 2.0
        patches = []
        shapes = ("ellipse", "box", "blob", "diamond")
        for i in range(num_patches):
            shape = shapes[i % len(shapes)]
            if shape == "ellipse":
                a = rng.uniform(0.28, 0.5) * size
                b = rng.uniform(0.28, 0.5) * size
                mask = (((rr - center) / a) ** 2 + ((cc - center) / b) ** 2) <= 1.0
            elif shape == "box":
                hh = rng.uniform(0.3, 0.5) * size
                ww = rng.uniform(0.3, 0.5) * size
                mask = (np.abs(rr - center) <= hh) & (np.abs(cc - center) <= ww)
            elif shape == "diamond":
                d = rng.uniform(0.55, 0.95) * size
                mask = (np.abs(rr - center) + np.abs(cc - center)) <= d / 2.0
            else:
                # lumpy union of a few disks around the center
                mask = np.zeros((size, size), dtype=bool)
                for _ in range(rng.integers(3, 6)):
                    dr, dc = rng.uniform(-0.18, 0.18, size=2) * size
                    rad = rng.uniform(0.18, 0.3) * size
                    mask |= ((rr - center - dr) ** 2 + (cc - center - dc) ** 2) <= rad**2
            base = rng.uniform(0.05, 0.95, size=3)
            rgb = np.clip(base[None, None, :] + rng.normal(0.0, 0.04, size=(size, size, 3)), 0.0, 1.0)
            patches.append((f"proc{i:03d}", rgb, mask.astype(np.uint8)))
        return ObjectPatchLibrary(patches)

    @staticmethod
    def load_dir(root) -> "ObjectPatchLibrary":
        root = Path(root)
        patches = []
        for mask_path in sorted(root.glob("*_mask.png")):
            pid = mask_path.name[: -len("_mask.png")]
            rgb_path = root / f"{pid}_rgb.png"
            if not rgb_path.exists():
                raise FileNotFoundError(f"patch {pid}: missing {rgb_path.name}")
            patches.append((pid, load_image_png(rgb_path), load_mask_png(mask_path)))
        if not patches:
            raise FileNotFoundError(f"no '*_mask.png' patches under {root}")
        return ObjectPatchLibrary(patches)

    def save_dir(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        for pid, rgb, mask in self.patches:
            save_image_png(root / f"{pid}_rgb.png", rgb)
            save_mask_png(root / f"{pid}_mask.png", mask)


def _choose_anchor(kps: KeypointSet, spec: OccluderSpec, rng: np.random.Generator) -> int:
    candidates = [j for j in spec.anchor_joints if 0 <= j < kps.num_joints and kps.visibility[j]]
    if not candidates:
        raise OcclusionError("no visible anchor joint to occlude")
    return int(candidates[rng.integers(0, len(candidates))])


def _occluder_side(kps: KeypointSet, severity: int) -> int:
    side = int(round(severity / 100.0 * kps.bbox_height()))
    if side <= 0:
        raise OcclusionError(
            f"severity {severity} yields occluder side 0 for bbox height {kps.bbox_height():.2f}"
        )
    return side


def random_erase_occlude(
    image, kps: KeypointSet, spec: OccluderSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Overwrite a square centered on a seeded-random visible anchor joint.

    The square side is round(severity/100 * keypoint bbox height), clipped to
    the image bounds, and filled according to spec.texture. Returns the
    occluded image and the footprint mask marking exactly the overwritten
    pixels; everything outside the footprint is bit-identical to the input.
    """
    img = as_image(image)
    if spec.kind != KIND_RANDOM_ERASE:
        raise ValueError(f"spec kind is {spec.kind!r}, expected {KIND_RANDOM_ERASE!r}")
    rng = np.random.default_rng(spec.seed)
    joint = _choose_anchor(kps, spec, rng)
    side = _occluder_side(kps, spec.severity)

    h, w = img.shape[:2]
    jr = int(round(kps.coords[joint, 0]))
    jc = int(round(kps.coords[joint, 1]))
    jr = min(max(jr, 0), h - 1)
    jc = min(max(jc, 0), w - 1)
    r0, c0 = jr - side // 2, jc - side // 2
    r1, c1 = r0 + side, c0 + side
    r0, c0 = max(r0, 0), max(c0, 0)
    r1, c1 = min(r1, h), min(c1, w)

    out = img.copy()
    if spec.texture == TEXTURE_UNIFORM:
        out[r0:r1, c0:c1] = rng.uniform(0.0, 1.0, size=3)
    else:
        out[r0:r1, c0:c1] = rng.uniform(0.0, 1.0, size=(r1 - r0, c1 - c0, 3))
    footprint = np.zeros((h, w), dtype=np.uint8)
    footprint[r0:r1, c0:c1] = 1
    return out, footprint


def _scale_patch(rgb: np.ndarray, mask: np.ndarray, target_h: int) -> tuple[np.ndarray, np.ndarray]:
    """Crop to the mask bbox, then nearest-neighbor rescale to height target_h."""
    rows = np.nonzero(mask.any(axis=1))[0]
    cols = np.nonzero(mask.any(axis=0))[0]
    rgb = rgb[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1]
    mask = mask[rows.min() : rows.max() + 1, cols.min() : cols.max() + 1]
    ph, pw = mask.shape
    target_h = max(int(target_h), 1)
    target_w = max(int(round(pw * target_h / ph)), 1)
    ridx = np.minimum((np.arange(target_h) + 0.5) * ph / target_h, ph - 1).astype(int)
    cidx = np.minimum((np.arange(target_w) + 0.5) * pw / target_w, pw - 1).astype(int)
    return rgb[np.ix_(ridx, cidx)], mask[np.ix_(ridx, cidx)]


def object_paste_occlude(
    image,
    kps: KeypointSet,
    library: ObjectPatchLibrary,
    spec: OccluderSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Alpha-composite a library patch onto a seeded-random anchor joint.

    The patch is rescaled so its height equals severity% of the keypoint
    bbox height and aligned so that its mask centroid pixel lands on the
    anchor joint, which guarantees the joint lies inside the footprint.
    """
    img = as_image(image)
    if spec.kind != KIND_OBJECT_PASTE:
        raise ValueError(f"spec kind is {spec.kind!r}, expected {KIND_OBJECT_PASTE!r}")
    if len(library) == 0:
        raise OcclusionError("object patch library is empty")
    rng = np.random.default_rng(spec.seed)
    joint = _choose_anchor(kps, spec, rng)
    target_h = _occluder_side(kps, spec.severity)

    if spec.patch_id is not None:
        rgb, mask = library.get(spec.patch_id)
    else:
        pid = library.ids()[rng.integers(0, len(library))]
        rgb, mask = library.get(pid)
    rgb, mask = _scale_patch(rgb, as_mask(mask), target_h)
    if not mask.any():
        raise OcclusionError(f"patch mask vanished when scaled to height {target_h}")

    # Anchor pixel: the mask pixel nearest the mask centroid (always on-mask).
    rows, cols = np.nonzero(mask)
    centroid = np.array([rows.mean(), cols.mean()])
    nearest = int(np.argmin((rows - centroid[0]) ** 2 + (cols - centroid[1]) ** 2))
    ar, ac = int(rows[nearest]), int(cols[nearest])

    h, w = img.shape[:2]
    jr = min(max(int(round(kps.coords[joint, 0])), 0), h - 1)
    jc = min(max(int(round(kps.coords[joint, 1])), 0), w - 1)
    r0, c0 = jr - ar, jc - ac

    pr0, pc0 = max(-r0, 0), max(-c0, 0)
    pr1 = min(mask.shape[0], h - r0)
    pc1 = min(mask.shape[1], w - c0)
    ir0, ic0 = r0 + pr0, c0 + pc0
    ir1, ic1 = r0 + pr1, c0 + pc1

    out = img.copy()
    footprint = np.zeros((h, w), dtype=np.uint8)
    sub = mask[pr0:pr1, pc0:pc1].astype(bool)
    region = out[ir0:ir1, ic0:ic1]
    region[sub] = rgb[pr0:pr1, pc0:pc1][sub]
    footprint[ir0:ir1, ic0:ic1] = sub.astype(np.uint8)
    return out, footprint


def apply_occluder(
    image,
    kps: KeypointSet,
    spec: OccluderSpec,
    library: ObjectPatchLibrary | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Dispatch on spec.kind."""
    if spec.kind == KIND_RANDOM_ERASE:
        return random_erase_occlude(image, kps, spec)
    if library is None:
        raise OcclusionError("object_paste occluder needs a patch library")
    return object_paste_occlude(image, kps, library, spec)


def apply_occluders(
    image,
    kps: KeypointSet,
    specs: Sequence[OccluderSpec],
    library: ObjectPatchLibrary | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Compose several occluders; footprint is the union of the individual ones."""
    out = as_image(image)
    total = np.zeros(out.shape[:2], dtype=np.uint8)
    for spec in specs:
        out, fp = apply_occluder(out, kps, spec, library=library)
        total = np.maximum(total, fp)
    return out, total


def derive_spec_seed(base_seed: int, index: int) -> int:
    """Stable per-item seed for parallel, reproducible generation."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1)[0])


def schedule_video_occlusion(
    num_frames: int,
    duration_fraction: float,
    base_spec: OccluderSpec,
) -> OcclusionSchedule:
    """Pick one contiguous occluded run of round(duration * num_frames) frames.

    The start offset is drawn with the base spec's seed so the run always
    fits; per-frame specs share the base kind/severity/texture but carry
    frame-derived seeds, and are re-anchored to each frame's keypoints when
    applied.
    """
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    if not (0.0 <= duration_fraction <= 1.0):
        raise ValueError(f"duration_fraction must be in [0, 1], got {duration_fraction}")
    run = int(round(duration_fraction * num_frames))
    run = min(run, num_frames)
    rng = np.random.default_rng(base_spec.seed)
    if run == 0:
        return OcclusionSchedule(num_frames, (0, 0), ())
    start = int(rng.integers(0, num_frames - run + 1))
    specs = tuple(
        replace(base_spec, seed=derive_spec_seed(base_spec.seed, start + k)) for k in range(run)
    )
    return OcclusionSchedule(num_frames, (start, start + run), specs)
