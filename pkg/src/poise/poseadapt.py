"""Self-supervised occlusion adaptation of a heatmap pose estimator.

A student network trains on occluded source images with exact labels while a
teacher (an exponential moving average of the student) supplies consistency
targets on unlabeled target images: the student must predict, under one
augmentation, what the teacher predicts under another, after both are warped
back to the common frame. Only the student ever receives gradients; the
teacher moves exclusively through `ema_update`.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .imaging import KeypointSet
from .skeleton import JOINT_NAMES, NUM_JOINTS, SKELETON_EDGES
from .torchops import (
    affine_matrix,
    image_to_tensor,
    round_trip_validity,
    warp_tensor,
)

DEFAULT_SIGMA = 2.0
VISIBILITY_FLOOR = 0.3
HEATMAP_STRIDE = 2


def _to_heatmap_coords(coords: np.ndarray, image_size, resolution) -> np.ndarray:
    """Map image pixel coords to heatmap pixel coords (pixel-center aligned)."""
    sr = image_size[0] / resolution[0]
    sc = image_size[1] / resolution[1]
    out = coords.copy()
    out[:, 0] = (coords[:, 0] - (sr - 1) / 2.0) / sr
    out[:, 1] = (coords[:, 1] - (sc - 1) / 2.0) / sc
    return out


def render_target_heatmaps(
    kps: KeypointSet,
    sigma: float = DEFAULT_SIGMA,
    resolution: tuple[int, int] = (48, 48),
    image_size: tuple[int, int] | None = None,
) -> np.ndarray:
    """Per-joint Gaussian targets, peak 1 at the joint, zeros when invisible.

    Keypoints are given in image coordinates when image_size is set and in
    heatmap coordinates otherwise.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = resolution
    coords = kps.coords
    if image_size is not None:
        coords = _to_heatmap_coords(coords, image_size, resolution)
    rr, cc = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((kps.num_joints, h, w))
    for k in range(kps.num_joints):
        if not kps.visibility[k]:
            continue
        d2 = (rr - coords[k, 0]) ** 2 + (cc - coords[k, 1]) ** 2
        out[k] = np.exp(-d2 / (2.0 * sigma * sigma))
    return out


def decode_keypoints(
    hm: np.ndarray,
    image_size: tuple[int, int] | None = None,
    floor: float = VISIBILITY_FLOOR,
) -> KeypointSet:
    """Argmax readout: per-channel peak location and confidence.

    Ties resolve to the lowest (row, col) in row-major order. Channels whose
    peak falls below `floor` are marked invisible. Coordinates are mapped to
    image scale when image_size is given.
    """
    k, h, w = hm.shape
    coords = np.zeros((k, 2))
    vis = np.zeros(k, dtype=bool)
    for j in range(k):
        flat = int(np.argmax(hm[j]))
        peak = float(hm[j].flat[flat])
        coords[j] = divmod(flat, w)
        vis[j] = peak >= floor
    if image_size is not None:
        sr = image_size[0] / h
        sc = image_size[1] / w
        coords[:, 0] = coords[:, 0] * sr + (sr - 1) / 2.0
        coords[:, 1] = coords[:, 1] * sc + (sc - 1) / 2.0
    skeleton = SKELETON_EDGES if k == NUM_JOINTS else ()
    return KeypointSet(coords, vis, skeleton=skeleton)


class PoseNet(nn.Module):
    """Image -> K sigmoid heatmaps at half resolution."""

    def __init__(self, num_joints: int = NUM_JOINTS):
        super().__init__()
        self.num_joints = num_joints
        self.encoder = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.BatchNorm2d(32),
            nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(),
            nn.Conv2d(64, 96, 3, stride=2, padding=1),
            nn.BatchNorm2d(96),
            nn.ReLU(),
            nn.Conv2d(96, 96, 3, padding=1),
            nn.BatchNorm2d(96),
            nn.ReLU(),
        )
        self.decoder = nn.Sequential(
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(96, 64, 3, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(64, 48, 3, padding=1),
            nn.BatchNorm2d(48),
            nn.ReLU(),
            nn.Conv2d(48, num_joints, 1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.decoder(self.encoder(x)))


@dataclass
class TeacherStudentState:
    student: nn.Module
    teacher: nn.Module
    ema_alpha: float
    step: int = 0

    def __post_init__(self):
        if not (0.0 <= self.ema_alpha <= 1.0):
            raise ValueError("ema_alpha must lie in [0, 1]")


def init_teacher_student(student: nn.Module, ema_alpha: float = 0.999) -> TeacherStudentState:
    """Teacher starts as an exact copy; its parameters never require grad."""
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return TeacherStudentState(student=student, teacher=teacher, ema_alpha=ema_alpha)


def ema_tensors(
    teacher: Sequence[torch.Tensor], student: Sequence[torch.Tensor], alpha: float
) -> list[torch.Tensor]:
    """Pure elementwise recurrence: alpha * teacher + (1 - alpha) * student."""
    if len(teacher) != len(student):
        raise ValueError("teacher/student tensor lists differ in length")
    out = []
    for t, s in zip(teacher, student):
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch {tuple(t.shape)} vs {tuple(s.shape)}")
        out.append(alpha * t + (1.0 - alpha) * s)
    return out


@torch.no_grad()
def ema_update(state: TeacherStudentState) -> None:
    """Move the teacher toward the student; the only sanctioned teacher write."""
    a = state.ema_alpha
    for tp, sp in zip(state.teacher.parameters(), state.student.parameters()):
        tp.mul_(a).add_(sp, alpha=1.0 - a)
    for tb, sb in zip(state.teacher.buffers(), state.student.buffers()):
        if tb.dtype.is_floating_point:
            tb.mul_(a).add_(sb, alpha=1.0 - a)
        else:
            tb.copy_(sb)  # step counters and the like
    state.step += 1


@dataclass(frozen=True)
class AugmentationOp:
    """Invertible geometric transform plus non-invertible photometric jitter.

    The geometric part (rotation, isotropic scale, translation as a fraction
    of the image side, shear) applies to images and heatmaps and has an exact
    inverse matrix. Brightness/contrast jitter applies to images only and
    never enters label space.
    """

    rotation_deg: float = 0.0
    scale: float = 1.0
    translation_frac: tuple[float, float] = (0.0, 0.0)
    shear_deg: float = 0.0
    brightness: float = 0.0
    contrast: float = 1.0

    def __post_init__(self):
        if self.scale == 0.0:
            raise ValueError("scale 0 has no inverse")
        if abs(self.shear_deg) >= 90.0:
            raise ValueError("shear must stay below 90 degrees")

    @staticmethod
    def sample(
        rng: np.random.Generator,
        rotation_range: float = 30.0,
        scale_range: tuple[float, float] = (0.75, 1.25),
        translation_range: float = 0.10,
        jitter: bool = True,
    ) -> "AugmentationOp":
        return AugmentationOp(
            rotation_deg=float(rng.uniform(-rotation_range, rotation_range)),
            scale=float(rng.uniform(*scale_range)),
            translation_frac=(
                float(rng.uniform(-translation_range, translation_range)),
                float(rng.uniform(-translation_range, translation_range)),
            ),
            brightness=float(rng.uniform(-0.1, 0.1)) if jitter else 0.0,
            contrast=float(rng.uniform(0.9, 1.1)) if jitter else 1.0,
        )

    def matrix(self, height: int, width: int) -> np.ndarray:
        tr = (self.translation_frac[0] * height, self.translation_frac[1] * width)
        return affine_matrix(height, width, self.rotation_deg, self.scale, tr, self.shear_deg)

    def apply_to_images(self, x: torch.Tensor) -> torch.Tensor:
        _, _, h, w = x.shape
        warped = warp_tensor(x, self.matrix(h, w), mode="bilinear", padding_mode="reflection")
        return (warped * self.contrast + self.brightness).clamp(0.0, 1.0)

    def warp_heatmaps(self, hm: torch.Tensor) -> torch.Tensor:
        _, _, h, w = hm.shape
        return warp_tensor(hm, self.matrix(h, w), mode="bicubic").clamp(0.0, 1.0)

    def warp_back_heatmaps(self, hm: torch.Tensor) -> torch.Tensor:
        _, _, h, w = hm.shape
        inv = np.linalg.inv(self.matrix(h, w))
        return warp_tensor(hm, inv, mode="bicubic").clamp(0.0, 1.0)

    def round_trip_mask(self, height: int, width: int) -> torch.Tensor:
        """1 where content survives warp + inverse warp without border fill."""
        return (round_trip_validity(self.matrix(height, width), height, width) > 0.999).float()


def _render_batch_targets(kps_list, sigma, resolution, image_size) -> torch.Tensor:
    t = np.stack([render_target_heatmaps(k, sigma, resolution, image_size) for k in kps_list])
    return torch.from_numpy(t).float()


def supervised_step(
    state: TeacherStudentState,
    images: torch.Tensor,
    kps_list: Sequence[KeypointSet],
    optimizer: torch.optim.Optimizer,
    sigma: float = DEFAULT_SIGMA,
) -> float:
    """One MSE step of the student against rendered ground-truth heatmaps."""
    if images.shape[0] != len(kps_list):
        raise ValueError("batch size mismatch between images and keypoints")
    state.student.train()
    pred = state.student(images)
    _, _, hh, ww = pred.shape
    targets = _render_batch_targets(kps_list, sigma, (hh, ww), images.shape[2:])
    loss = F.mse_loss(pred, targets)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.item())


def consistency_step(
    state: TeacherStudentState,
    images: torch.Tensor,
    aug_pair: tuple[AugmentationOp, AugmentationOp],
    optimizer: torch.optim.Optimizer,
    weight: float = 1.0,
) -> float:
    """Student-under-A1 must match teacher-under-A2 in the common frame.

    Teacher activations are computed without gradients; the loss is masked to
    pixels where both inverse warps carry real content.
    """
    a1, a2 = aug_pair
    # eval-mode batch norm on both paths: running stats stay frozen here, so
    # equal params + equal augmentations give an exactly zero loss, and the
    # teacher's buffers are only ever written by ema_update
    was_training = state.student.training
    state.student.eval()
    state.teacher.eval()
    x1 = a1.apply_to_images(images)
    x2 = a2.apply_to_images(images)
    h1 = state.student(x1)
    with torch.no_grad():
        h2 = state.teacher(x2)
    b1 = a1.warp_back_heatmaps(h1)
    b2 = a2.warp_back_heatmaps(h2)
    _, _, hh, ww = b1.shape
    valid = a1.round_trip_mask(hh, ww) * a2.round_trip_mask(hh, ww)
    denom = valid.sum().clamp_min(1.0) * b1.shape[0] * b1.shape[1]
    loss = weight * (((b1 - b2) ** 2) * valid).sum() / denom
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    if was_training:
        state.student.train()
    return float(loss.item())


@dataclass(frozen=True)
class AdaptScheduleConfig:
    epochs: int = 80
    warmup_epochs: int = 40
    batch_size: int = 32
    learning_rate: float = 1e-4
    lr_decay_epochs: tuple[int, ...] = (45, 60)
    lr_decay: float = 0.1
    ema_alpha: float = 0.999
    sigma: float = DEFAULT_SIGMA
    consistency_weight: float = 1.0
    jitter: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs cannot exceed epochs")


def adapt_pose_estimator(
    source: Sequence[tuple[np.ndarray, KeypointSet]],
    target: Sequence[np.ndarray],
    cfg: AdaptScheduleConfig | None = None,
    student: nn.Module | None = None,
) -> TeacherStudentState:
    """Full schedule: supervised warmup, then joint supervised + consistency.

    `source` items are (image, keypoints) with any occlusion already applied
    by the caller; `target` is unlabeled images. After every optimizer step
    the teacher follows via EMA; the returned state's teacher is the adapted
    estimator.
    """
    cfg = cfg or AdaptScheduleConfig()
    source = list(source)
    target = list(target)
    if not source:
        raise ValueError("source dataset is empty")
    if cfg.epochs > cfg.warmup_epochs and not target:
        raise ValueError("target dataset is empty but the schedule has a joint phase")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    if student is None:
        student = PoseNet(source[0][1].num_joints)
    state = init_teacher_student(student, cfg.ema_alpha)
    optimizer = torch.optim.Adam(state.student.parameters(), lr=cfg.learning_rate)

    src_imgs = torch.stack([image_to_tensor(img) for img, _ in source])
    src_kps = [k for _, k in source]
    tgt_imgs = torch.stack([image_to_tensor(img) for img in target]) if target else None

    # target order is drawn lazily so warmup-only schedules never touch it
    tgt_cursor = len(target)
    tgt_order = None
    for epoch in range(cfg.epochs):
        if epoch in cfg.lr_decay_epochs:
            for group in optimizer.param_groups:
                group["lr"] *= cfg.lr_decay
        joint = epoch >= cfg.warmup_epochs
        order = rng.permutation(len(source))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            supervised_step(
                state, src_imgs[idx], [src_kps[i] for i in idx], optimizer, sigma=cfg.sigma
            )
            if joint and tgt_imgs is not None:
                take = min(cfg.batch_size, len(target))
                if tgt_cursor + take > len(target):
                    tgt_order = rng.permutation(len(target))
                    tgt_cursor = 0
                tidx = tgt_order[tgt_cursor : tgt_cursor + take]
                tgt_cursor += take
                augs = (
                    AugmentationOp.sample(rng, jitter=cfg.jitter),
                    AugmentationOp.sample(rng, jitter=cfg.jitter),
                )
                consistency_step(
                    state, tgt_imgs[tidx], augs, optimizer, weight=cfg.consistency_weight
                )
            ema_update(state)
    state.student.eval()
    state.teacher.eval()
    return state


def pck(
    predicted: Sequence[KeypointSet],
    truth: Sequence[KeypointSet],
    threshold: float = 0.2,
) -> float:
    """Fraction of visible gt joints within threshold * gt bbox height."""
    hits, total = 0, 0
    for pred, gt in zip(predicted, truth):
        tol = threshold * gt.bbox_height()
        for j in range(gt.num_joints):
            if not gt.visibility[j]:
                continue
            total += 1
            if pred.visibility[j]:
                d = np.linalg.norm(pred.coords[j] - gt.coords[j])
                if d <= tol:
                    hits += 1
    if total == 0:
        raise ValueError("no visible ground-truth joints to score")
    return hits / total


def as_pose_interface(model: nn.Module, floor: float = VISIBILITY_FLOOR):
    """Wrap a heatmap net as a plain image -> KeypointSet callable."""
    model.eval()

    def predict(image: np.ndarray) -> KeypointSet:
        with torch.no_grad():
            hm = model(image_to_tensor(image).unsqueeze(0))[0].numpy()
        return decode_keypoints(hm, image_size=image.shape[:2], floor=floor)

    return predict


def save_pose_estimator(path, model: nn.Module, sigma: float = DEFAULT_SIGMA, meta: dict | None = None) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), root / "params.pt")
    payload = {
        "kind": "pose_estimator",
        "num_joints": getattr(model, "num_joints", NUM_JOINTS),
        "sigma": sigma,
        "heatmap_stride": HEATMAP_STRIDE,
        "joint_order": list(JOINT_NAMES),
    }
    payload.update(meta or {})
    (root / "meta.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


def load_pose_estimator(path) -> tuple[nn.Module, dict]:
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("kind") != "pose_estimator":
        raise ValueError(f"{root} is not a pose estimator checkpoint")
    model = PoseNet(meta["num_joints"])
    model.load_state_dict(torch.load(root / "params.pt", weights_only=True))
    model.eval()
    return model, meta
