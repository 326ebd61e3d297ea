"""Procedural synthetic-human scenes with exact masks and keypoints.

Each scene is a 2-D articulated capsule figure over a textured background.
The figure's silhouette comes straight from the skeleton rasterizer, so the
ground-truth mask is exact by construction, and the sampled joints are the
ground-truth keypoints. Cheap enough to generate thousands of scenes on a
laptop CPU, which is the whole point: every training and evaluation result
in this package can be checked against perfect labels.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom

from .data import DatasetManifest, ManifestEntry
from .imaging import KeypointSet, save_image_png, save_keypoints_json, save_mask_png
from .pose2sil import LimbGeometry, rasterize_skeleton
from .skeleton import JOINT_INDEX, NUM_JOINTS

BACKGROUND_STYLES = ("noise_rects", "hard")

# body segment lengths as fractions of the sampled body height
PROPORTIONS = {
    "torso": 0.32,
    "neck": 0.07,
    "head": 0.12,
    "thigh": 0.25,
    "shin": 0.25,
    "upper_arm": 0.16,
    "forearm": 0.15,
    "hip_width": 0.11,
    "shoulder_width": 0.17,
}


@dataclass(frozen=True)
class SyntheticSceneSpec:
    height: int = 96
    width: int = 96
    num_scenes: int = 100
    seed: int = 0
    background: str = "noise_rects"
    margin: int = 5
    body_height_range: tuple[float, float] = (0.55, 0.80)
    retry_cap: int = 100

    def __post_init__(self):
        if self.height < 32 or self.width < 32:
            raise ValueError("scene resolution must be at least 32x32")
        if self.num_scenes < 1:
            raise ValueError("num_scenes must be >= 1")
        if self.background not in BACKGROUND_STYLES:
            raise ValueError(f"background must be one of {BACKGROUND_STYLES}")
        lo, hi = self.body_height_range
        if not (0.1 <= lo <= hi <= 1.0):
            raise ValueError("body_height_range must satisfy 0.1 <= lo <= hi <= 1.0")

    def to_dict(self) -> dict:
        return asdict(self)


def _polar(base, length, angle_rad):
    """Step from a point: angle 0 points straight down (increasing row)."""
    return base + length * np.array([np.cos(angle_rad), np.sin(angle_rad)])


def sample_figure(rng: np.random.Generator, spec: SyntheticSceneSpec):
    """One articulated figure: joint coordinates plus its limb geometry.

    Returns (KeypointSet, LimbGeometry) or None when the sampled pose cannot
    fit inside the frame with the required margin.
    """
    h_body = rng.uniform(*spec.body_height_range) * spec.height
    p = {k: v * h_body for k, v in PROPORTIONS.items()}

    torso_tilt = rng.uniform(-0.20, 0.20)
    pelvis = np.array([0.0, 0.0])
    thorax = _polar(pelvis, p["torso"], np.pi + torso_tilt)  # up the frame
    neck = _polar(thorax, p["neck"], np.pi + torso_tilt + rng.uniform(-0.15, 0.15))
    head = _polar(neck, p["head"], np.pi + torso_tilt + rng.uniform(-0.25, 0.25))

    coords = np.zeros((NUM_JOINTS, 2))
    coords[JOINT_INDEX["pelvis"]] = pelvis
    coords[JOINT_INDEX["thorax"]] = thorax
    coords[JOINT_INDEX["upper_neck"]] = neck
    coords[JOINT_INDEX["head_top"]] = head

    for side, sign in (("right", -1.0), ("left", 1.0)):
        hip = pelvis + np.array([0.0, sign * p["hip_width"] / 2])
        thigh_angle = rng.uniform(-0.55, 0.55)  # from straight down
        knee = _polar(hip, p["thigh"], thigh_angle)
        shin_angle = thigh_angle + rng.uniform(-0.5, 0.15)  # knees bend one way
        ankle = _polar(knee, p["shin"], shin_angle)
        coords[JOINT_INDEX[f"{side}_hip"]] = hip
        coords[JOINT_INDEX[f"{side}_knee"]] = knee
        coords[JOINT_INDEX[f"{side}_ankle"]] = ankle

        shoulder = thorax + np.array([0.0, sign * p["shoulder_width"] / 2])
        arm_angle = sign * rng.uniform(-0.35, 1.3)  # mostly down/outward
        elbow = _polar(shoulder, p["upper_arm"], arm_angle)
        wrist = _polar(elbow, p["forearm"], arm_angle + sign * rng.uniform(-0.3, 0.9))
        coords[JOINT_INDEX[f"{side}_shoulder"]] = shoulder
        coords[JOINT_INDEX[f"{side}_elbow"]] = elbow
        coords[JOINT_INDEX[f"{side}_wrist"]] = wrist

    geom = LimbGeometry(
        torso_frac=0.10 * rng.uniform(0.85, 1.15),
        head_frac=0.08 * rng.uniform(0.85, 1.15),
        limb_frac=0.05 * rng.uniform(0.85, 1.15),
    )

    # place the figure: shift so the capsule-padded bbox fits, then jitter
    bbox_h = coords[:, 0].max() - coords[:, 0].min()
    pad = max(geom.torso_frac, geom.head_frac) * bbox_h + 1.0
    lo = coords.min(axis=0) - pad
    hi = coords.max(axis=0) + pad
    size = hi - lo
    room = np.array([spec.height, spec.width]) - 2 * spec.margin - size
    if room[0] <= 0 or room[1] <= 0:
        return None
    shift = spec.margin - lo + rng.uniform(0.0, 1.0, size=2) * room
    coords = coords + shift
    return KeypointSet(coords, np.ones(NUM_JOINTS, dtype=bool)), geom


def _value_noise(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Smooth multi-octave value noise in [0,1], (h, w, 3)."""
    out = np.zeros((h, w, 3))
    total = 0.0
    for cells, weight in ((4, 1.0), (9, 0.5), (17, 0.25)):
        coarse = rng.uniform(0.0, 1.0, size=(cells, cells, 3))
        out += weight * zoom(coarse, (h / cells, w / cells, 1), order=1, grid_mode=True, mode="nearest")
        total += weight
    return out / total


def _paint_rect(img, rng, color, alpha):
    h, w = img.shape[:2]
    r0 = rng.integers(0, h - 4)
    c0 = rng.integers(0, w - 4)
    r1 = rng.integers(r0 + 3, min(r0 + h // 2, h) + 1)
    c1 = rng.integers(c0 + 3, min(c0 + w // 2, w) + 1)
    img[r0:r1, c0:c1] = (1 - alpha) * img[r0:r1, c0:c1] + alpha * color


def render_scene(
    kps: KeypointSet, geom: LimbGeometry, rng: np.random.Generator, spec: SyntheticSceneSpec
):
    """Compose body over background. Returns (image, mask); mask is exact."""
    h, w = spec.height, spec.width
    mask = rasterize_skeleton(kps, geom, h, w)

    bg = _value_noise(rng, h, w)
    for _ in range(rng.integers(3, 8)):
        _paint_rect(bg, rng, rng.uniform(0.0, 1.0, size=3), rng.uniform(0.4, 1.0))

    body_color = rng.uniform(0.15, 0.9, size=3)
    if spec.background == "hard":
        # distractors sharing the body's color family
        for _ in range(rng.integers(2, 5)):
            wobble = np.clip(body_color + rng.normal(0.0, 0.08, size=3), 0.0, 1.0)
            _paint_rect(bg, rng, wobble, rng.uniform(0.6, 1.0))

    rr = np.arange(h)[:, None, None] / max(h - 1, 1)
    shade = 1.0 - 0.25 * rr  # simple top-lit gradient
    body = np.clip(
        body_color[None, None, :] * shade + rng.normal(0.0, 0.03, size=(h, w, 3)), 0.0, 1.0
    )
    m = mask[:, :, None].astype(np.float64)
    img = np.clip(bg * (1 - m) + body * m, 0.0, 1.0)
    return img, mask


def generate_scene(spec: SyntheticSceneSpec, index: int):
    """Deterministic scene by (spec.seed, index); independent of other scenes."""
    rng = np.random.default_rng([spec.seed, index])
    for _ in range(spec.retry_cap):
        sampled = sample_figure(rng, spec)
        if sampled is not None:
            kps, geom = sampled
            img, mask = render_scene(kps, geom, rng, spec)
            return img, mask, kps, geom
    raise RuntimeError(
        f"scene {index}: no figure fit within {spec.retry_cap} retries; relax proportions or margin"
    )


def generate_synthetic_dataset(spec: SyntheticSceneSpec, out_root, split: str = "train") -> DatasetManifest:
    """Write images/, masks/, keypoints/ plus a manifest; byte-deterministic."""
    out_root = Path(out_root)
    for sub in ("images", "masks", "keypoints"):
        (out_root / sub).mkdir(parents=True, exist_ok=True)

    entries = []
    for i in range(spec.num_scenes):
        img, mask, kps, _ = generate_scene(spec, i)
        image_id = f"{i:06d}"
        save_image_png(out_root / "images" / f"{image_id}.png", img)
        save_mask_png(out_root / "masks" / f"{image_id}.png", mask)
        save_keypoints_json(out_root / "keypoints" / f"{image_id}.json", kps)
        entries.append(
            ManifestEntry(
                image_id=image_id,
                image=f"images/{image_id}.png",
                mask=f"masks/{image_id}.png",
                keypoints=f"keypoints/{image_id}.json",
            )
        )

    manifest = DatasetManifest(
        root=out_root,
        split=split,
        entries=entries,
        seed=spec.seed,
        extra={"synthetic_spec": spec.to_dict()},
    )
    manifest.save()
    return manifest
