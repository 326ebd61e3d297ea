"""Self-supervised silhouette fusion: the three-term masked BCE objective.

A silhouette model M learns from two noisy, complementary cues instead of
ground truth: the segmenter's silhouette I_S (trusted only on its foreground,
since occlusion errors flip foreground to background) and the pose-derived
silhouette I_P (coarse but occlusion-robust, supervising every pixel). A
third term reuses M's own confident predictions as pseudo-labels above a
confidence threshold. Total objective:

    lambda1 * BCE(pred, I_S | fg-mask) + lambda2 * BCE(pred, I_P)
    + lambda3 * BCE(pred, PL-labels | PL-mask)

All three consumers meet the same `weighted_bce`; masking differs per term.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from .data import DatasetManifest
from .imaging import KeypointSet, as_probmap, binarize, load_mask_png, weighted_bce
from .pose2sil import GeneratorState, pose_to_silhouette
from .torchops import affine_matrix, image_to_tensor, warp_tensor


class TargetSkip(Exception):
    """A training image that cannot produce usable targets; carries the reason."""


@dataclass(frozen=True)
class FusionConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.5
    tau: float = 0.9
    pl_start_epoch: int = 5
    epochs: int = 15
    batch_size: int = 16
    learning_rate: float = 1e-3
    seed: int = 0
    augment: bool = True
    rotation_range: float = 15.0
    translation_range: float = 0.08
    shear_range: float = 8.0
    mask_segmenter_loss: bool = True  # False: plain distillation regression config
    binarize_pose_target: bool = False
    pl_snapshot: bool = False  # pseudo-labels from an epoch-start snapshot instead of live model

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not (0.5 < self.tau < 1.0):
            raise ValueError(f"tau must lie in (0.5, 1), got {self.tau}")
        if self.pl_start_epoch < 0:
            raise ValueError("pl_start_epoch must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FusionTargets:
    """Per-image training targets; fg_weights is exactly I_S's foreground."""

    i_s: np.ndarray
    i_p: np.ndarray
    fg_weights: np.ndarray
    image_id: str = ""

    def __post_init__(self):
        if not (self.i_s.shape == self.i_p.shape == self.fg_weights.shape):
            raise ValueError("target map shapes differ")
        fg = (np.asarray(self.i_s) >= 0.5).astype(np.float64)
        if not np.array_equal(np.asarray(self.fg_weights, dtype=np.float64), fg):
            raise ValueError("fg_weights must equal the binarized i_s foreground")


def make_targets(x, seg, pose, gen: GeneratorState, binarize_pose: bool = False) -> FusionTargets:
    """I_S from the segmenter, I_P from pose -> silhouette, fg mask from I_S.

    Raises TargetSkip when the image yields nothing usable: the pose model
    finds no visible joints, or both cues come back empty.
    """
    i_s = as_probmap(np.asarray(seg(x), dtype=np.float64))
    kps = pose(x)
    if not kps.visibility.any():
        raise TargetSkip("pose estimator found no visible joints")
    i_p = pose_to_silhouette(gen, kps)
    if binarize_pose:
        i_p = binarize(i_p, 0.5).astype(np.float64)
    fg = binarize(i_s, 0.5).astype(np.float64)
    if fg.sum() == 0 and binarize(i_p, 0.5).sum() == 0:
        raise TargetSkip("both I_S and I_P are empty")
    return FusionTargets(i_s=i_s, i_p=i_p, fg_weights=fg)


def pseudo_label_mask(pred, tau: float):
    """Confident self-labels: labels = pred >= 0.5, weights = [max(p, 1-p) >= tau].

    Torch inputs come back as detached torch tensors (stop-gradient contract);
    numpy inputs come back as numpy arrays.
    """
    if not (0.5 < tau < 1.0):
        raise ValueError(f"tau must lie in (0.5, 1), got {tau}")
    if torch.is_tensor(pred):
        p = pred.detach()
        labels = (p >= 0.5).to(p.dtype)
        conf = torch.maximum(p, 1.0 - p)
        weights = (conf >= tau).to(p.dtype)
        return labels, weights
    p = np.asarray(pred, dtype=np.float64)
    labels = (p >= 0.5).astype(np.float64)
    conf = np.maximum(p, 1.0 - p)
    weights = (conf >= tau).astype(np.float64)
    return labels, weights


def _ones_like(x):
    return torch.ones_like(x) if torch.is_tensor(x) else np.ones_like(np.asarray(x, dtype=np.float64))


def poise_loss(pred, targets, pl, cfg: FusionConfig):
    """Weighted sum of the three BCE terms plus their unweighted breakdown.

    Accepts numpy or torch end to end; any torch operand keeps the result
    differentiable. `targets` needs fields i_s / i_p / fg_weights, so batched
    tensor stand-ins work as well as FusionTargets.
    """
    labels, weights = pl
    fg = targets.fg_weights if cfg.mask_segmenter_loss else _ones_like(targets.fg_weights)
    t1 = weighted_bce(pred, targets.i_s, fg)
    t2 = weighted_bce(pred, targets.i_p, _ones_like(targets.i_p))
    t3 = weighted_bce(pred, labels, weights)
    total = cfg.lambda1 * t1 + cfg.lambda2 * t2 + cfg.lambda3 * t3
    breakdown = {
        "l_s": float(t1.item() if torch.is_tensor(t1) else t1),
        "l_p": float(t2.item() if torch.is_tensor(t2) else t2),
        "l_pl": float(t3.item() if torch.is_tensor(t3) else t3),
    }
    return total, breakdown


# ---------------------------------------------------------------- model


class FusionUNet(nn.Module):
    """Small encoder-decoder with skip connections: (B,3,H,W) -> (B,H,W) in [0,1]."""

    def __init__(self, base: int = 16):
        super().__init__()
        self.base = base

        def block(cin, cout):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1),
                nn.BatchNorm2d(cout),
                nn.ReLU(),
                nn.Conv2d(cout, cout, 3, padding=1),
                nn.BatchNorm2d(cout),
                nn.ReLU(),
            )

        self.enc1 = block(3, base)
        self.enc2 = block(base, base * 2)
        self.enc3 = block(base * 2, base * 4)
        self.bottom = block(base * 4, base * 4)
        self.pool = nn.MaxPool2d(2)
        self.up2 = nn.ConvTranspose2d(base * 4, base * 2, 2, stride=2)
        self.dec2 = block(base * 4, base * 2)
        self.up1 = nn.ConvTranspose2d(base * 2, base, 2, stride=2)
        self.dec1 = block(base * 2, base)
        self.head = nn.Conv2d(base, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        e3 = self.bottom(self.enc3(self.pool(e2)))
        d2 = self.dec2(torch.cat([self.up2(e3), e2], dim=1))
        d1 = self.dec1(torch.cat([self.up1(d2), e1], dim=1))
        return torch.sigmoid(self.head(d1))[:, 0]


@dataclass
class FusionModelState:
    model: nn.Module
    height: int
    width: int
    epoch: int = 0
    config: dict = field(default_factory=dict)
    loss_history: list = field(default_factory=list)
    skipped: list = field(default_factory=list)


# ---------------------------------------------------------------- training


def _sample_matrices(rng: np.random.Generator, n: int, h: int, w: int, cfg: FusionConfig) -> np.ndarray:
    out = np.zeros((n, 3, 3))
    for i in range(n):
        out[i] = affine_matrix(
            h,
            w,
            rotation_deg=rng.uniform(-cfg.rotation_range, cfg.rotation_range),
            translation=(
                rng.uniform(-cfg.translation_range, cfg.translation_range) * h,
                rng.uniform(-cfg.translation_range, cfg.translation_range) * w,
            ),
            shear_deg=rng.uniform(-cfg.shear_range, cfg.shear_range),
        )
    return out


class _BatchTargets:
    """Torch stand-in with the same field names poise_loss reads."""

    def __init__(self, i_s, i_p, fg_weights):
        self.i_s = i_s
        self.i_p = i_p
        self.fg_weights = fg_weights


def train_fusion(
    manifest: DatasetManifest,
    seg,
    pose,
    gen: GeneratorState,
    cfg: FusionConfig | None = None,
) -> FusionModelState:
    """Train M on the three-term objective over a dataset's fusion targets.

    Targets are computed once up front (they depend only on the frozen seg,
    pose, and generator models). Augmentation warps image and targets with
    the same per-sample transform, using reflection padding so L_P keeps its
    everywhere-active weights; the foreground mask is re-derived from the
    warped I_S so its defining invariant survives warping. The pseudo-label
    term switches on at pl_start_epoch.
    """
    cfg = cfg or FusionConfig()
    torch.manual_seed(cfg.seed)

    images, i_s_list, i_p_list, kept_ids, skipped = [], [], [], [], []
    for entry in manifest:
        x = manifest.load_image(entry)
        try:
            t = make_targets(x, seg, pose, gen, binarize_pose=cfg.binarize_pose_target)
        except TargetSkip as e:
            skipped.append({"image_id": entry.image_id, "reason": str(e)})
            continue
        images.append(image_to_tensor(x))
        i_s_list.append(torch.from_numpy(t.i_s).float())
        i_p_list.append(torch.from_numpy(t.i_p).float())
        kept_ids.append(entry.image_id)
    if not images:
        raise ValueError("every image was skipped; nothing to train on")

    images = torch.stack(images)
    i_s_all = torch.stack(i_s_list)
    i_p_all = torch.stack(i_p_list)
    n, _, h, w = images.shape

    model = FusionUNet()
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    state = FusionModelState(model, h, w, config=cfg.to_dict(), skipped=skipped)

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        pl_active = cfg.lambda3 > 0 and epoch >= cfg.pl_start_epoch
        pl_model = copy.deepcopy(model).eval() if (pl_active and cfg.pl_snapshot) else None
        model.train()
        order = rng.permutation(n)
        sums = {"total": 0.0, "l_s": 0.0, "l_p": 0.0, "l_pl": 0.0}
        batches = 0
        for s in range(0, n, cfg.batch_size):
            idx = torch.from_numpy(order[s : s + cfg.batch_size].copy())
            x = images[idx]
            bi_s = i_s_all[idx].unsqueeze(1)
            bi_p = i_p_all[idx].unsqueeze(1)
            if cfg.augment:
                mats = _sample_matrices(rng, len(idx), h, w, cfg)
                x = warp_tensor(x, mats, padding_mode="reflection")
                bi_s = warp_tensor(bi_s, mats, padding_mode="reflection")
                bi_p = warp_tensor(bi_p, mats, padding_mode="reflection")
            bi_s = bi_s[:, 0].clamp(0.0, 1.0)
            bi_p = bi_p[:, 0].clamp(0.0, 1.0)
            fg = (bi_s >= 0.5).float()
            pred = model(x)
            if pl_active:
                if pl_model is not None:
                    with torch.no_grad():
                        pl_source = pl_model(x)
                else:
                    pl_source = pred
                pl = pseudo_label_mask(pl_source, cfg.tau)
            else:
                pl = (torch.zeros_like(pred), torch.zeros_like(pred))
            loss, breakdown = poise_loss(pred, _BatchTargets(bi_s, bi_p, fg), pl, cfg)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            sums["total"] += float(loss.item())
            for k, v in breakdown.items():
                sums[k] += v
            batches += 1
        state.loss_history.append({k: v / max(batches, 1) for k, v in sums.items()})
        state.epoch = epoch + 1
    model.eval()
    return state


def infer_silhouette(state: FusionModelState, x) -> np.ndarray:
    """Deterministic probability map at the input's resolution.

    Inputs at a different resolution than training are bilinearly resized to
    the training size for the forward pass and the prediction is resized
    back, so output shape always equals input shape.
    """
    img = np.asarray(x, dtype=np.float64)
    h, w = img.shape[:2]
    t = image_to_tensor(img).unsqueeze(0)
    if (h, w) != (state.height, state.width):
        t = torch.nn.functional.interpolate(
            t, size=(state.height, state.width), mode="bilinear", align_corners=False
        )
    state.model.eval()
    with torch.no_grad():
        pred = state.model(t).unsqueeze(1)
        if (h, w) != (state.height, state.width):
            pred = torch.nn.functional.interpolate(
                pred, size=(h, w), mode="bilinear", align_corners=False
            )
    return np.clip(pred[0, 0].numpy().astype(np.float64), 0.0, 1.0)


def save_fusion(path, state: FusionModelState) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    torch.save(state.model.state_dict(), root / "params.pt")
    meta = {
        "kind": "fusion",
        "height": state.height,
        "width": state.width,
        "epoch": state.epoch,
        "base": getattr(state.model, "base", 16),
        "config": state.config,
        "loss_history": state.loss_history,
        "skipped": state.skipped,
    }
    (root / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_fusion(path) -> FusionModelState:
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("kind") != "fusion":
        raise ValueError(f"{root} is not a fusion checkpoint")
    model = FusionUNet(base=meta.get("base", 16))
    model.load_state_dict(torch.load(root / "params.pt", weights_only=True))
    model.eval()
    return FusionModelState(
        model,
        meta["height"],
        meta["width"],
        epoch=meta["epoch"],
        config=meta.get("config", {}),
        loss_history=list(meta.get("loss_history", [])),
        skipped=list(meta.get("skipped", [])),
    )


# ---------------------------------------------------------------- oracle stubs


def image_key(image: np.ndarray) -> str:
    """Content address of an image: sha256 of its 8-bit pixel values."""
    a = np.round(np.asarray(image, dtype=np.float64) * 255.0).astype(np.uint8)
    return hashlib.sha256(a.tobytes()).hexdigest()


class OracleSegmenter:
    """Ground-truth-backed segmenter stub: returns the exact mask as a probmap."""

    def __init__(self, masks_by_key: dict):
        self._masks = masks_by_key

    @staticmethod
    def from_manifest(manifest: DatasetManifest) -> "OracleSegmenter":
        table = {}
        for entry in manifest:
            img = manifest.load_image(entry)
            table[image_key(img)] = manifest.load_mask(entry).astype(np.float64)
        return OracleSegmenter(table)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        key = image_key(image)
        if key not in self._masks:
            raise KeyError("image not covered by this oracle stub")
        return self._masks[key]


class NaiveOccludedSegmenter:
    """Occlusion-naive segmenter stub: accurate on visible body, blind under occluders.

    Mimics a segmenter that was never trained on occlusion: every pixel under
    the (dilated) occluder footprint reads as background, and body regions
    disconnected from the main blob by the occluder are lost entirely.
    """

    def __init__(self, table: dict, dilation_px: int = 2):
        self._table = table
        self.dilation_px = dilation_px

    @staticmethod
    def from_manifest(manifest: DatasetManifest, dilation_px: int = 2) -> "NaiveOccludedSegmenter":
        table = {}
        for entry in manifest:
            img = manifest.load_image(entry)
            fp_path = manifest.root / "footprints" / f"{entry.image_id}.png"
            footprint = (
                load_mask_png(fp_path)
                if fp_path.exists()
                else np.zeros(img.shape[:2], dtype=np.uint8)
            )
            table[image_key(img)] = (manifest.load_mask(entry), footprint)
        return NaiveOccludedSegmenter(table, dilation_px)

    def __call__(self, image: np.ndarray) -> np.ndarray:
        key = image_key(image)
        if key not in self._table:
            raise KeyError("image not covered by this oracle stub")
        gt, footprint = self._table[key]
        blocked = footprint.astype(bool)
        if blocked.any() and self.dilation_px > 0:
            blocked = ndimage.binary_dilation(blocked, iterations=self.dilation_px)
        visible = gt.astype(bool) & ~blocked
        if visible.any():
            labels, count = ndimage.label(visible)
            if count > 1:
                largest = int(np.argmax(ndimage.sum_labels(visible, labels, range(1, count + 1)))) + 1
                visible = labels == largest
        return visible.astype(np.float64)


class OraclePoseEstimator:
    """Ground-truth keypoints; optionally loses joints hidden by the occluder.

    With drop_occluded=True this mirrors an estimator that was never adapted
    to occlusion: any joint whose pixel lies inside the occluder footprint is
    reported invisible.
    """

    def __init__(self, table: dict, drop_occluded: bool = False):
        self._table = table
        self.drop_occluded = drop_occluded

    @staticmethod
    def from_manifest(manifest: DatasetManifest, drop_occluded: bool = False) -> "OraclePoseEstimator":
        table = {}
        for entry in manifest:
            img = manifest.load_image(entry)
            kps = manifest.load_keypoints(entry)
            fp_path = manifest.root / "footprints" / f"{entry.image_id}.png"
            footprint = (
                load_mask_png(fp_path)
                if fp_path.exists()
                else np.zeros(img.shape[:2], dtype=np.uint8)
            )
            table[image_key(img)] = (kps, footprint)
        return OraclePoseEstimator(table, drop_occluded)

    def __call__(self, image: np.ndarray):
        key = image_key(image)
        if key not in self._table:
            raise KeyError("image not covered by this oracle stub")
        kps, footprint = self._table[key]
        if not self.drop_occluded:
            return kps
        h, w = footprint.shape
        vis = kps.visibility.copy()
        for j in range(kps.num_joints):
            r = min(max(int(round(kps.coords[j, 0])), 0), h - 1)
            c = min(max(int(round(kps.coords[j, 1])), 0), w - 1)
            if footprint[r, c]:
                vis[j] = False
        return KeypointSet(kps.coords, vis, kps.skeleton)
