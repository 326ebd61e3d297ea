"""Keypoints-to-silhouette generation: analytic rasterizer and learned decoder.

Two routes from a 2-D pose to a dense silhouette:

* `rasterize_skeleton` draws the skeleton as a union of capsules (segments
  dilated by per-limb radii). It is exact, deterministic, and doubles as the
  label generator for synthetic training data.
* A learned decoder maps normalized joint coordinates to a sigmoid grid. It
  is trained with BCE against silhouette labels and, unlike the rasterizer,
  can be fit to real body shapes. It never sees image pixels.

The decoder works in a body-centered frame: inputs are offsets from the
visible-joint centroid and the output canvas is centered, then shifted back
to the original centroid at inference. Translation covariance is therefore
exact for integer shifts instead of depending on what the net memorized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .imaging import KeypointSet, weighted_bce
from .skeleton import HEAD_EDGES, JOINT_NAMES, NUM_JOINTS, TORSO_EDGES

DEFAULT_TORSO_FRAC = 0.10
DEFAULT_HEAD_FRAC = 0.08
DEFAULT_LIMB_FRAC = 0.05


@dataclass(frozen=True)
class LimbGeometry:
    """Per-edge capsule radii as fractions of the figure's bbox height.

    fixed_radius_px overrides the fractional scheme with one constant pixel
    radius for every edge (useful for tests and degenerate skeletons).
    """

    torso_frac: float = DEFAULT_TORSO_FRAC
    head_frac: float = DEFAULT_HEAD_FRAC
    limb_frac: float = DEFAULT_LIMB_FRAC
    min_radius_px: float = 1.0
    fixed_radius_px: float | None = None

    def __post_init__(self):
        for name in ("torso_frac", "head_frac", "limb_frac", "min_radius_px"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.fixed_radius_px is not None and self.fixed_radius_px <= 0:
            raise ValueError("fixed_radius_px must be positive")

    def edge_radius_px(self, edge: tuple[int, int], bbox_height: float) -> float:
        if self.fixed_radius_px is not None:
            return self.fixed_radius_px
        e = (min(edge), max(edge))
        norm_edges = lambda edges: {(min(a, b), max(a, b)) for a, b in edges}
        if e in norm_edges(TORSO_EDGES):
            frac = self.torso_frac
        elif e in norm_edges(HEAD_EDGES):
            frac = self.head_frac
        else:
            frac = self.limb_frac
        return max(frac * bbox_height, self.min_radius_px)


def rasterize_skeleton(kps: KeypointSet, geom: LimbGeometry, height: int, width: int) -> np.ndarray:
    """Union of capsules over skeleton edges whose joints are both visible.

    A pixel belongs to a capsule when its center lies within the edge radius
    of the segment between the two joints (inclusive). Coincident joints
    degenerate to a disk. Joints may lie outside the frame; only the in-frame
    part is drawn. Exactly deterministic and order-independent.
    """
    mask = np.zeros((height, width), dtype=np.uint8)
    vis = kps.visibility
    if not vis.any():
        return mask
    pts = kps.visible_coords()
    bbox_h = float(pts[:, 0].max() - pts[:, 0].min())
    rr, cc = np.mgrid[0:height, 0:width].astype(np.float64)
    for a, b in kps.skeleton:
        if not (vis[a] and vis[b]):
            continue
        r = geom.edge_radius_px((a, b), bbox_h)
        p0 = kps.coords[a]
        p1 = kps.coords[b]
        d = p1 - p0
        dd = float(d @ d)
        if dd == 0.0:
            dist2 = (rr - p0[0]) ** 2 + (cc - p0[1]) ** 2
        else:
            t = ((rr - p0[0]) * d[0] + (cc - p0[1]) * d[1]) / dd
            t = np.clip(t, 0.0, 1.0)
            dist2 = (rr - (p0[0] + t * d[0])) ** 2 + (cc - (p0[1] + t * d[1])) ** 2
        mask |= dist2 <= r * r
    return mask


@dataclass(frozen=True)
class PoseSilPair:
    """One training sample: a pose and its silhouette label."""

    keypoints: KeypointSet
    silhouette: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        sil = np.asarray(self.silhouette)
        if sil.ndim != 2:
            raise ValueError("silhouette must be 2-D")
        object.__setattr__(self, "silhouette", sil.astype(np.uint8))


class SilhouetteDecoder(nn.Module):
    """Normalized joint coordinates -> H x W sigmoid silhouette canvas."""

    def __init__(self, num_joints: int, height: int, width: int, base_channels: int = 128):
        super().__init__()
        if height % 16 != 0 or width % 16 != 0:
            raise ValueError("decoder resolution must be divisible by 16")
        self.num_joints = num_joints
        self.height = height
        self.width = width
        self.base_channels = base_channels
        h0, w0 = height // 16, width // 16
        self._h0, self._w0 = h0, w0

        self.ff_layers = nn.Sequential(
            nn.Linear(3 * num_joints, 512),
            nn.ReLU(),
            nn.Linear(512, base_channels * h0 * w0),
            nn.ReLU(),
        )
        ch = base_channels
        self.conv_layers = nn.Sequential(
            nn.ConvTranspose2d(ch, ch // 2, 4, stride=2, padding=1),
            nn.BatchNorm2d(ch // 2),
            nn.ReLU(),
            nn.ConvTranspose2d(ch // 2, ch // 4, 4, stride=2, padding=1),
            nn.BatchNorm2d(ch // 4),
            nn.ReLU(),
            nn.ConvTranspose2d(ch // 4, ch // 8, 4, stride=2, padding=1),
            nn.BatchNorm2d(ch // 8),
            nn.ReLU(),
            nn.ConvTranspose2d(ch // 8, 1, 4, stride=2, padding=1),
        )

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        x = self.ff_layers(feats)
        x = x.view(-1, self.base_channels, self._h0, self._w0)
        x = self.conv_layers(x)
        return torch.sigmoid(x)[:, 0]


@dataclass
class GeneratorState:
    """Trained decoder plus everything needed to reproduce its inputs.

    feat_mean/feat_std standardize the body-centered joint offsets; they are
    computed on the training set and frozen into the checkpoint.
    """

    model: SilhouetteDecoder
    num_joints: int
    height: int
    width: int
    feat_mean: np.ndarray  # (K, 2)
    feat_std: np.ndarray  # (K, 2)
    loss_curve: list = field(default_factory=list)
    val_curve: list = field(default_factory=list)


def _center_of(kps: KeypointSet) -> np.ndarray:
    pts = kps.visible_coords()
    if pts.size == 0:
        raise ValueError("pose has no visible joints")
    return pts.mean(axis=0)


def _raw_offsets(kps: KeypointSet, height: int, width: int) -> np.ndarray:
    """(K, 2) offsets from the visible-joint centroid, in half-image units."""
    center = _center_of(kps)
    off = (kps.coords - center) / np.array([height / 2.0, width / 2.0])
    off[~kps.visibility] = 0.0
    return off


def encode_pose(state: GeneratorState, kps: KeypointSet) -> torch.Tensor:
    """Standardized (3K,) input vector: offsets plus visibility flags."""
    if kps.num_joints != state.num_joints:
        raise ValueError(f"expected {state.num_joints} joints, got {kps.num_joints}")
    off = _raw_offsets(kps, state.height, state.width)
    off = (off - state.feat_mean) / state.feat_std
    off[~kps.visibility] = 0.0  # sentinel for missing joints, flag carries the info
    feats = np.concatenate([off.reshape(-1), kps.visibility.astype(np.float64)])
    return torch.from_numpy(feats).float()


def _integer_shift(mask_or_prob: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Shift with zero fill (no wrap-around)."""
    out = np.zeros_like(mask_or_prob)
    h, w = mask_or_prob.shape
    src_r = slice(max(0, -dr), min(h, h - dr))
    src_c = slice(max(0, -dc), min(w, w - dc))
    dst_r = slice(max(0, dr), min(h, h + dr))
    dst_c = slice(max(0, dc), min(w, w + dc))
    out[dst_r, dst_c] = mask_or_prob[src_r, src_c]
    return out


@dataclass(frozen=True)
class Pose2SilTrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-4
    batch_size: int = 32
    seed: int = 0
    val_fraction: float = 0.05
    base_channels: int = 128


def train_pose2sil(dataset, hyper: Pose2SilTrainConfig | None = None) -> GeneratorState:
    """Fit the decoder with BCE between predicted and label silhouettes.

    Labels are re-centered on the visible-joint centroid before training so
    the decoder only has to model body shape, not absolute placement.
    """
    hyper = hyper or Pose2SilTrainConfig()
    pairs = list(dataset)
    if not pairs:
        raise ValueError("training dataset is empty")
    height, width = pairs[0].silhouette.shape
    k = pairs[0].keypoints.num_joints
    for p in pairs:
        if p.silhouette.shape != (height, width):
            raise ValueError(f"pair {p.image_id!r}: silhouette shape {p.silhouette.shape} != {(height, width)}")
        if p.keypoints.num_joints != k:
            raise ValueError(f"pair {p.image_id!r}: expected {k} joints")

    torch.manual_seed(hyper.seed)
    rng = np.random.default_rng(hyper.seed)

    offsets = np.stack([_raw_offsets(p.keypoints, height, width) for p in pairs])
    vis = np.stack([p.keypoints.visibility for p in pairs])
    feat_mean = offsets.mean(axis=0)
    feat_std = np.maximum(offsets.std(axis=0), 1e-3)

    model = SilhouetteDecoder(k, height, width, base_channels=hyper.base_channels)
    state = GeneratorState(model, k, height, width, feat_mean, feat_std)

    # centered labels: figure centroid moved to the canvas center
    center_px = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
    feats = torch.stack([encode_pose(state, p.keypoints) for p in pairs])
    labels = []
    for p in pairs:
        delta = np.round(center_px - _center_of(p.keypoints)).astype(int)
        labels.append(_integer_shift(p.silhouette.astype(np.float32), delta[0], delta[1]))
    labels = torch.from_numpy(np.stack(labels))

    n = len(pairs)
    n_val = min(int(round(hyper.val_fraction * n)), n - 1)
    order = rng.permutation(n)
    val_idx = torch.from_numpy(order[:n_val].copy())
    train_idx = torch.from_numpy(order[n_val:].copy())

    opt = torch.optim.Adam(model.parameters(), lr=hyper.learning_rate)
    for epoch in range(hyper.epochs):
        model.train()
        perm = rng.permutation(len(train_idx))
        total, batches = 0.0, 0
        for s in range(0, len(perm), hyper.batch_size):
            idx = train_idx[perm[s : s + hyper.batch_size]]
            pred = model(feats[idx])
            loss = weighted_bce(pred, labels[idx], torch.ones_like(pred))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.item())
            batches += 1
        state.loss_curve.append(total / max(batches, 1))
        if n_val:
            model.eval()
            with torch.no_grad():
                vpred = model(feats[val_idx])
                vloss = weighted_bce(vpred, labels[val_idx], torch.ones_like(vpred))
            state.val_curve.append(float(vloss))
    model.eval()
    return state


def pose_to_silhouette(state: GeneratorState, kps: KeypointSet) -> np.ndarray:
    """g: pose -> (H, W) probability map, deterministic, never reads pixels."""
    feats = encode_pose(state, kps)
    state.model.eval()
    with torch.no_grad():
        canvas = state.model(feats.unsqueeze(0))[0].numpy().astype(np.float64)
    center_px = np.array([(state.height - 1) / 2.0, (state.width - 1) / 2.0])
    delta = np.round(_center_of(kps) - center_px).astype(int)
    return np.clip(_integer_shift(canvas, delta[0], delta[1]), 0.0, 1.0)


def save_generator(path, state: GeneratorState) -> None:
    """Checkpoint directory: parameter blob + self-describing JSON metadata."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    torch.save(state.model.state_dict(), root / "params.pt")
    meta = {
        "kind": "pose2sil",
        "num_joints": state.num_joints,
        "height": state.height,
        "width": state.width,
        "base_channels": state.model.base_channels,
        "joint_order": list(JOINT_NAMES) if state.num_joints == NUM_JOINTS else None,
        "feat_mean": state.feat_mean.tolist(),
        "feat_std": state.feat_std.tolist(),
        "loss_curve": state.loss_curve,
        "val_curve": state.val_curve,
    }
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_generator(path) -> GeneratorState:
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("kind") != "pose2sil":
        raise ValueError(f"{root} is not a pose-to-silhouette checkpoint")
    model = SilhouetteDecoder(
        meta["num_joints"], meta["height"], meta["width"], base_channels=meta["base_channels"]
    )
    model.load_state_dict(torch.load(root / "params.pt", weights_only=True))
    model.eval()
    return GeneratorState(
        model,
        meta["num_joints"],
        meta["height"],
        meta["width"],
        np.asarray(meta["feat_mean"], dtype=np.float64),
        np.asarray(meta["feat_std"], dtype=np.float64),
        loss_curve=list(meta.get("loss_curve", [])),
        val_curve=list(meta.get("val_curve", [])),
    )
