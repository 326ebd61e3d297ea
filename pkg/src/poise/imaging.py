"""Core raster types, binary-mask algebra, weighted cross-entropy, and IoU.

Array conventions used across the package:

- image: float array of shape (H, W, 3), values in [0, 1]
- probability map: float array of shape (H, W), values in [0, 1]
- binary mask: uint8/bool array of shape (H, W), values in {0, 1}
- pixel weight mask: float array of shape (H, W), values in [0, 1]
  (0 = pixel ignored, 1 = full contribution)

All functions here are pure; none of them mutate their inputs.
`weighted_bce` accepts either numpy arrays or torch tensors and keeps the
torch path differentiable, so trainers and numerical oracles share one
formula.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image as PILImage

from .skeleton import SKELETON_EDGES, SKELETON_NAME

# Predictions are clamped to [LOG_EPS, 1 - LOG_EPS] before taking logs.
LOG_EPS = 1e-7

# Default threshold whenever a probability map has to become a mask.
DEFAULT_THRESHOLD = 0.5


class ShapeError(ValueError):
    """Raised when raster operands disagree on shape."""


def _require_same_shape(*arrays) -> None:
    shapes = [tuple(a.shape) for a in arrays]
    if any(s != shapes[0] for s in shapes[1:]):
        raise ShapeError(f"operands have mismatched shapes: {shapes}")


def as_probmap(values) -> np.ndarray:
    """Validate and return a (H, W) float64 probability map."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"probability map must be 2-D, got shape {a.shape}")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError("probability map values must lie in [0, 1]")
    return a


def as_mask(values) -> np.ndarray:
    """Validate and return a (H, W) uint8 binary mask with values {0, 1}."""
    a = np.asarray(values)
    if a.ndim != 2:
        raise ShapeError(f"binary mask must be 2-D, got shape {a.shape}")
    if a.dtype == bool:
        return a.astype(np.uint8)
    u = np.unique(a)
    if not np.isin(u, (0, 1)).all():
        raise ValueError("binary mask entries must be exactly 0 or 1")
    return a.astype(np.uint8)


def as_weights(values) -> np.ndarray:
    """Validate and return a (H, W) float64 pixel weight mask in [0, 1]."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"weight mask must be 2-D, got shape {a.shape}")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError("weight mask values must lie in [0, 1]")
    return a


def as_image(values) -> np.ndarray:
    """Validate and return a (H, W, 3) float64 image with values in [0, 1]."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ShapeError(f"image must have shape (H, W, 3), got {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ShapeError("image must have H >= 1 and W >= 1")
    if a.size and (a.min() < 0.0 or a.max() > 1.0):
        raise ValueError("image channel values must lie in [0, 1]")
    return a


@dataclass(frozen=True)
class KeypointSet:
    """2-D joint locations with visibility on the canonical skeleton.

    Attributes:
        coords: (K, 2) float64 array of (row, col) pixel coordinates.
        visibility: (K,) bool array; invisible joints carry no positional
            meaning and are skipped by consumers.
        skeleton: edge list of joint index pairs. Defaults to the canonical
            16-joint topology.
    """

    coords: np.ndarray
    visibility: np.ndarray
    skeleton: tuple = SKELETON_EDGES

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        vis = np.asarray(self.visibility, dtype=bool)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ShapeError(f"coords must have shape (K, 2), got {coords.shape}")
        if vis.shape != (coords.shape[0],):
            raise ShapeError("visibility must have shape (K,)")
        if not np.all(np.isfinite(coords)):
            raise ValueError("coords must be finite")
        k = coords.shape[0]
        for a, b in self.skeleton:
            if not (0 <= a < k and 0 <= b < k):
                raise ValueError(f"skeleton edge ({a}, {b}) references a joint outside 0..{k - 1}")
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "visibility", vis)
        object.__setattr__(self, "skeleton", tuple((int(a), int(b)) for a, b in self.skeleton))

    @property
    def num_joints(self) -> int:
        return self.coords.shape[0]

    def visible_coords(self) -> np.ndarray:
        return self.coords[self.visibility]

    def bbox(self) -> tuple[float, float, float, float]:
        """(rmin, cmin, rmax, cmax) over visible joints."""
        pts = self.visible_coords()
        if pts.size == 0:
            raise ValueError("bbox undefined: no visible joints")
        return float(pts[:, 0].min()), float(pts[:, 1].min()), float(pts[:, 0].max()), float(pts[:, 1].max())

    def bbox_height(self) -> float:
        rmin, _, rmax, _ = self.bbox()
        return rmax - rmin

    def shifted(self, dr: float, dc: float) -> "KeypointSet":
        return KeypointSet(self.coords + np.array([dr, dc]), self.visibility, self.skeleton)

    def clamped(self, height: int, width: int) -> "KeypointSet":
        """Clamp coordinates into [0, H-1] x [0, W-1]."""
        c = self.coords.copy()
        c[:, 0] = np.clip(c[:, 0], 0.0, height - 1.0)
        c[:, 1] = np.clip(c[:, 1], 0.0, width - 1.0)
        return KeypointSet(c, self.visibility, self.skeleton)


def binarize(prob, threshold: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Threshold a probability map into a binary mask (>= is inclusive).

    Args:
        prob: (H, W) probability map.
        threshold: cut point, must lie strictly inside (0, 1).

    Returns:
        uint8 mask with 1 wherever prob >= threshold.
    """
    if not (0.0 < threshold < 1.0):
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    a = as_probmap(prob)
    return (a >= threshold).astype(np.uint8)


def iou(a, b, empty_value: float = 1.0) -> float:
    """Intersection-over-union of two binary masks.

    Two empty masks score `empty_value` (default 1.0) so all-background
    frames do not poison a dataset mean.
    """
    ma = as_mask(a)
    mb = as_mask(b)
    _require_same_shape(ma, mb)
    inter = int(np.logical_and(ma, mb).sum())
    union = int(np.logical_or(ma, mb).sum())
    if union == 0:
        return float(empty_value)
    return inter / union


def mean_iou(pairs: Sequence[tuple], empty_value: float = 1.0) -> float:
    """Arithmetic mean of per-pair `iou` over a nonempty sequence of mask pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mean_iou needs at least one mask pair")
    return float(np.mean([iou(a, b, empty_value=empty_value) for a, b in pairs]))


def weighted_bce(pred, target, weights, eps: float = LOG_EPS):
    """Pixel-weighted binary cross-entropy, normalized by the weight sum.

    loss = sum_ij w_ij * [-t_ij log p_ij - (1 - t_ij) log(1 - p_ij)]
           / max(sum_ij w_ij, eps)

    Predictions are clamped to [eps, 1 - eps] before the log. Dividing by the
    weight sum (not H*W) keeps losses comparable across masking ratios. If any
    argument is a torch tensor the computation stays in torch and remains
    differentiable w.r.t. `pred`; otherwise it runs in float64 numpy and
    returns a plain float.
    """
    if torch.is_tensor(pred) or torch.is_tensor(target) or torch.is_tensor(weights):
        p, t, w = _as_tensors_like(pred, target, weights)
        _require_same_shape(p, t, w)
        pc = p.clamp(eps, 1.0 - eps)
        ce = -(t * torch.log(pc) + (1.0 - t) * torch.log1p(-pc))
        denom = w.sum().clamp_min(eps)
        return (w * ce).sum() / denom
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    _require_same_shape(p, t, w)
    pc = np.clip(p, eps, 1.0 - eps)
    ce = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc))
    denom = max(float(w.sum()), eps)
    return float((w * ce).sum() / denom)


def _as_tensors_like(pred, *others):
    """Promote mixed numpy/torch operands to tensors sharing pred's dtype/device."""
    if torch.is_tensor(pred):
        ref = pred
    else:
        ref = next(x for x in others if torch.is_tensor(x))
        pred = torch.as_tensor(np.asarray(pred), dtype=ref.dtype, device=ref.device)
    out = [pred]
    for x in others:
        if torch.is_tensor(x):
            out.append(x.to(dtype=ref.dtype, device=ref.device))
        else:
            out.append(torch.as_tensor(np.asarray(x), dtype=ref.dtype, device=ref.device))
    return out


# ---------------------------------------------------------------------------
# Serialization. Masks go to 8-bit single-channel PNG (0 = background,
# 255 = foreground); probability maps go to 16-bit single-channel PNG scaled
# by 65535; images to ordinary 8-bit RGB PNG.
# ---------------------------------------------------------------------------

def save_mask_png(path, mask) -> None:
    m = as_mask(mask)
    PILImage.fromarray((m * 255).astype(np.uint8), mode="L").save(Path(path))


def load_mask_png(path) -> np.ndarray:
    img = PILImage.open(Path(path))
    a = np.asarray(img)
    if a.ndim != 2:
        raise ShapeError(f"mask PNG must be single-channel, got shape {a.shape}")
    return (a >= 128).astype(np.uint8)


def save_probmap_png(path, prob) -> None:
    p = as_probmap(prob)
    scaled = np.round(p * 65535.0).astype(np.uint16)
    PILImage.fromarray(scaled).save(Path(path))


def load_probmap_png(path) -> np.ndarray:
    img = PILImage.open(Path(path))
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeError(f"probability PNG must be single-channel, got shape {a.shape}")
    return a / 65535.0


def save_image_png(path, image) -> None:
    a = as_image(image)
    PILImage.fromarray(np.round(a * 255.0).astype(np.uint8), mode="RGB").save(Path(path))


def load_image_png(path) -> np.ndarray:
    img = PILImage.open(Path(path)).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def save_keypoints_json(path, kps: KeypointSet) -> None:
    payload = {
        "skeleton": SKELETON_NAME if kps.skeleton == SKELETON_EDGES else "custom",
        "edges": [[int(a), int(b)] for a, b in kps.skeleton],
        "num_joints": kps.num_joints,
        "coords": [[float(r), float(c)] for r, c in kps.coords],
        "visibility": [bool(v) for v in kps.visibility],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=0) + "\n")


def load_keypoints_json(path) -> KeypointSet:
    payload = json.loads(Path(path).read_text())
    coords = np.asarray(payload["coords"], dtype=np.float64)
    vis = np.asarray(payload["visibility"], dtype=bool)
    if payload.get("num_joints", coords.shape[0]) != coords.shape[0]:
        raise ValueError(f"keypoint file {path} is inconsistent about K")
    edges = tuple((int(a), int(b)) for a, b in payload.get("edges", SKELETON_EDGES))
    return KeypointSet(coords, vis, skeleton=edges)
