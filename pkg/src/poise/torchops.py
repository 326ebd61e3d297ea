"""Shared torch utilities: affine warps, validity masks, seeding, conversion.

Geometry convention: pixel coordinates are (row, col) with the origin at the
top-left pixel center, matching the keypoint convention. Affine transforms
are 3x3 homogeneous matrices acting on (row, col, 1) column vectors, built
about the image center so rotation/scale/shear leave the center fixed.
grid_sample plumbing uses align_corners=True so integer translations land
exactly on pixel centers.
"""

from __future__ import annotations

import math
import random

import numpy as np
import torch
import torch.nn.functional as F


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch; pin torch to one thread for determinism."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    torch.set_num_threads(1)


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) float in [0,1] -> (3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def probmap_to_tensor(prob: np.ndarray) -> torch.Tensor:
    """(H, W) -> (1, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(prob)).float().unsqueeze(0)


def tensor_to_probmap(t: torch.Tensor) -> np.ndarray:
    """(..., H, W) tensor -> (H, W) float64 array, squeezing leading 1-dims."""
    a = t.detach().cpu().numpy().astype(np.float64)
    while a.ndim > 2:
        if a.shape[0] != 1:
            raise ValueError(f"cannot squeeze leading dim of shape {a.shape}")
        a = a[0]
    return a


def affine_matrix(
    height: int,
    width: int,
    rotation_deg: float = 0.0,
    scale: float = 1.0,
    translation: tuple[float, float] = (0.0, 0.0),
    shear_deg: float = 0.0,
) -> np.ndarray:
    """Forward warp matrix about the image center, as 3x3 on (row, col, 1).

    Applies shear, then isotropic scale, then rotation, then translation
    (rows, cols) in pixels. scale of 0 has no inverse and is rejected.
    """
    if scale == 0.0:
        raise ValueError("scale 0 is not invertible")
    cr, cc = (height - 1) / 2.0, (width - 1) / 2.0
    phi = math.radians(rotation_deg)
    sh = math.tan(math.radians(shear_deg))
    rot = np.array(
        [[math.cos(phi), -math.sin(phi), 0.0], [math.sin(phi), math.cos(phi), 0.0], [0.0, 0.0, 1.0]]
    )
    sc = np.diag([scale, scale, 1.0])
    shear = np.array([[1.0, 0.0, 0.0], [sh, 1.0, 0.0], [0.0, 0.0, 1.0]])
    to_origin = np.array([[1.0, 0.0, -cr], [0.0, 1.0, -cc], [0.0, 0.0, 1.0]])
    back = np.array([[1.0, 0.0, cr + translation[0]], [0.0, 1.0, cc + translation[1]], [0.0, 0.0, 1.0]])
    return back @ rot @ sc @ shear @ to_origin


def invert_affine(matrix: np.ndarray) -> np.ndarray:
    return np.linalg.inv(matrix)


def transform_keypoint_array(matrix: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Apply a 3x3 (row, col, 1) matrix to a (K, 2) coordinate array."""
    hom = np.concatenate([coords, np.ones((coords.shape[0], 1))], axis=1)
    out = hom @ matrix.T
    return out[:, :2]


_SWAP = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


def _theta_for(matrix: np.ndarray, height: int, width: int) -> torch.Tensor:
    """grid_sample theta (maps output grid coords to input coords) for a forward warp."""
    inv = np.linalg.inv(matrix)
    # (y, x) normalized -> (row, col) pixels, align_corners=True convention
    n2p = np.array(
        [[(height - 1) / 2.0, 0.0, (height - 1) / 2.0], [0.0, (width - 1) / 2.0, (width - 1) / 2.0], [0.0, 0.0, 1.0]]
    )
    a_yx = np.linalg.inv(n2p) @ inv @ n2p
    a_xy = _SWAP @ a_yx @ _SWAP
    return torch.from_numpy(a_xy[:2, :]).float()


def warp_tensor(
    x: torch.Tensor,
    matrix: np.ndarray,
    mode: str = "bilinear",
    padding_mode: str = "zeros",
) -> torch.Tensor:
    """Warp a (B, C, H, W) tensor by the forward pixel matrix.

    Pixel p of the output equals the input sampled at matrix^-1 @ p, i.e. the
    image content moves the way the matrix moves points. `matrix` is one 3x3
    shared by the batch or a (B, 3, 3) stack of per-sample transforms.
    """
    if x.ndim != 4:
        raise ValueError(f"expected (B, C, H, W), got shape {tuple(x.shape)}")
    b, _, h, w = x.shape
    ms = np.asarray(matrix, dtype=np.float64)
    if ms.ndim == 2:
        theta = _theta_for(ms, h, w).to(x.dtype).unsqueeze(0).expand(b, -1, -1)
    elif ms.shape == (b, 3, 3):
        theta = torch.stack([_theta_for(m, h, w) for m in ms]).to(x.dtype)
    else:
        raise ValueError(f"matrix must be (3, 3) or (B, 3, 3), got {ms.shape}")
    grid = F.affine_grid(theta, list(x.shape), align_corners=True)
    return F.grid_sample(x, grid, mode=mode, padding_mode=padding_mode, align_corners=True)


def warp_validity(matrix: np.ndarray, height: int, width: int) -> torch.Tensor:
    """(1, 1, H, W) map of how much each output pixel drew from inside the frame."""
    ones = torch.ones(1, 1, height, width)
    return warp_tensor(ones, matrix, mode="bilinear", padding_mode="zeros")


def round_trip_validity(matrix: np.ndarray, height: int, width: int) -> torch.Tensor:
    """Validity of warping forward then back: where content survived both trips."""
    ones = torch.ones(1, 1, height, width)
    fwd = warp_tensor(ones, matrix, padding_mode="zeros")
    return warp_tensor(fwd, np.linalg.inv(matrix), padding_mode="zeros")
