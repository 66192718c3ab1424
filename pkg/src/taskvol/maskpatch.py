"""Binary mask <-> patch-target conversion for the segmentation head.

A full-resolution mask is max-pooled by the ratio of downsample to
intermediate factor, then partitioned into non-overlapping blocks so that
each vision token owns one block of pooled voxels.  The block ordering here
is the single source of truth for token order: row-major over the token
grid with z slowest and x fastest, and the same convention within a block.
The encoder imports its flatten order from this module rather than
duplicating it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GridShapeError


# Permutation of the (x, y, z) grid axes that realizes the canonical token
# order: z slowest, x fastest.  The encoder flattens its feature grid with
# this same constant so the two sides can never drift apart.
TOKEN_AXIS_ORDER = (2, 1, 0)


def flatten_token_grid(grid: np.ndarray) -> np.ndarray:
    """Flatten a (gx, gy, gz, f) feature grid to (gx*gy*gz, f) rows in the
    canonical token order (z slowest, x fastest)."""
    if grid.ndim != 4:
        raise GridShapeError(f"expected a 4D feature grid, got shape {grid.shape}")
    gx, gy, gz, f = grid.shape
    return np.ascontiguousarray(
        grid.transpose(*TOKEN_AXIS_ORDER, 3).reshape(gx * gy * gz, f))


def token_row_index(bx: int, by: int, bz: int, grid_shape: tuple[int, int, int]) -> int:
    """Row index of grid cell (bx, by, bz) under the canonical token order."""
    gx, gy, gz = grid_shape
    if not (0 <= bx < gx and 0 <= by < gy and 0 <= bz < gz):
        raise GridShapeError(f"cell ({bx},{by},{bz}) outside grid {grid_shape}")
    return bz * (gy * gx) + by * gx + bx


@dataclass(frozen=True)
class PatchTarget:
    """Block-partitioned pooled mask: one row per vision token."""

    values: np.ndarray  # (rows, u**3), uint8 in {0, 1}
    d: int
    u: int


def maxpool_mask(mask: np.ndarray, window: int) -> np.ndarray:
    """Non-overlapping max-pool of a binary volume (stride = window)."""
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise GridShapeError(f"expected a 3D mask, got shape {mask.shape}")
    nx, ny, nz = mask.shape
    if any(n % window for n in (nx, ny, nz)):
        raise GridShapeError(
            f"mask shape {mask.shape} not divisible by pool window {window}")
    pooled = mask.reshape(nx // window, window, ny // window, window,
                          nz // window, window).max(axis=(1, 3, 5))
    return pooled


def patchify_mask(mask: np.ndarray, d: int, u: int) -> PatchTarget:
    """Convert a full-resolution binary mask to the per-token patch target.

    The mask is max-pooled with window (and stride) d/u, then the pooled
    volume is split into u^3 blocks laid out in canonical token order.
    Output shape is (n_voxels / d^3, u^3).
    """
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise GridShapeError(f"expected a 3D mask, got shape {mask.shape}")
    if u <= 0 or d <= 0 or d % u:
        raise GridShapeError(f"intermediate factor {u} must divide downsample {d}")
    nx, ny, nz = mask.shape
    if any(n % d for n in (nx, ny, nz)):
        raise GridShapeError(f"mask shape {mask.shape} not divisible by d={d}")
    pooled = maxpool_mask((mask != 0).astype(np.uint8), d // u)
    bx, by, bz = nx // d, ny // d, nz // d
    blocks = pooled.reshape(bx, u, by, u, bz, u)
    # axes (bx, lx, by, ly, bz, lz) -> (bz, by, bx, lz, ly, lx): z slowest,
    # x fastest for both the block grid and the within-block layout.
    ordered = blocks.transpose(4, 2, 0, 5, 3, 1)
    values = np.ascontiguousarray(ordered.reshape(bx * by * bz, u ** 3))
    return PatchTarget(values=values, d=d, u=u)


def unpack_mask(target: PatchTarget, input_shape: tuple[int, int, int]) -> np.ndarray:
    """Invert the block partition back to the pooled volume.

    Returns the max-pooled mask of shape input_shape * u / d — pooling is
    lossy, so the full-resolution mask is not recoverable.
    """
    d, u = target.d, target.u
    nx, ny, nz = input_shape
    if any(n % d for n in (nx, ny, nz)):
        raise GridShapeError(f"input shape {input_shape} not divisible by d={d}")
    bx, by, bz = nx // d, ny // d, nz // d
    values = np.asarray(target.values)
    if values.shape != (bx * by * bz, u ** 3):
        raise GridShapeError(
            f"target shape {values.shape} inconsistent with input {input_shape}, "
            f"d={d}, u={u}: expected {(bx * by * bz, u ** 3)}")
    ordered = values.reshape(bz, by, bx, u, u, u)
    pooled = ordered.transpose(2, 5, 1, 4, 0, 3).reshape(nx // d * u,
                                                         ny // d * u,
                                                         nz // d * u)
    return np.ascontiguousarray(pooled)
