"""Volume preprocessing: raw CT file to fixed-size model input.

The chain is: load -> clip to [-1000, 1000] HU -> locate the body center on
axial slices -> crop the z extent to the lungs plus a margin -> resample to
isotropic 1 mm and crop/pad to a fixed physical frame -> (training only)
augment -> center-crop and resize to the model input shape, rescaled to
[-1, 1].  Masks ride along the same geometric path with nearest-neighbor
interpolation.

File I/O covers a deliberately small NIfTI-1 subset (single-file, little-
endian, int16/float32, optional gzip) plus a raw-blob cache format for
preprocessed arrays.
"""

from __future__ import annotations

import gzip
import json
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels
from .config import FrameSpec
from .errors import CenteringError, IngestionError

HU_MIN = -1000.0
HU_MAX = 1000.0
SOFT_TISSUE_LO = -150.0
SOFT_TISSUE_HI = 250.0

_HEADER_SIZE = 348
_DATA_OFFSET = 352
_DTYPES = {4: np.dtype("<i2"), 16: np.dtype("<f4")}


@dataclass(frozen=True)
class VolumeGrid:
    """A scalar volume with physical spacing, indexed [x, y, z]."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise IngestionError(f"volume must be 3D, got shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing):
            raise IngestionError(f"spacing must be positive, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


def _default_affine(spacing) -> np.ndarray:
    aff = np.eye(4)
    aff[0, 0], aff[1, 1], aff[2, 2] = spacing
    return aff


# ---------------------------------------------------------------------------
# NIfTI-1 subset I/O
# ---------------------------------------------------------------------------

def _open_maybe_gzip(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_volume(path) -> VolumeGrid:
    """Read a single-file NIfTI-1 volume (little-endian, int16 or float32).

    Rejects anything outside the supported subset — bad magic, unsupported
    dtype, multi-channel data, non-positive spacing, or a degenerate
    orientation matrix — with an error naming the file.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"{path}: file does not exist")
    try:
        with _open_maybe_gzip(path) as fh:
            header = fh.read(_HEADER_SIZE)
            if len(header) < _HEADER_SIZE:
                raise IngestionError(f"{path}: truncated header")
            sizeof_hdr = struct.unpack_from("<i", header, 0)[0]
            if sizeof_hdr != _HEADER_SIZE:
                raise IngestionError(
                    f"{path}: bad header size {sizeof_hdr} (not little-endian NIfTI-1?)")
            magic = header[344:348]
            if magic not in (b"n+1\x00", b"ni1\x00"):
                raise IngestionError(f"{path}: bad magic {magic!r}")
            if magic == b"ni1\x00":
                raise IngestionError(f"{path}: detached .hdr/.img pairs not supported")
            dim = struct.unpack_from("<8h", header, 40)
            ndim = dim[0]
            if ndim < 3:
                raise IngestionError(f"{path}: expected 3D data, got ndim={ndim}")
            if ndim > 3 and any(d > 1 for d in dim[4:1 + ndim]):
                raise IngestionError(
                    f"{path}: multi-channel data rejected (dim={dim[:1 + ndim]})")
            nx, ny, nz = dim[1], dim[2], dim[3]
            if min(nx, ny, nz) < 1:
                raise IngestionError(f"{path}: bad dims {(nx, ny, nz)}")
            datatype = struct.unpack_from("<h", header, 70)[0]
            if datatype not in _DTYPES:
                raise IngestionError(f"{path}: unsupported datatype code {datatype}")
            pixdim = struct.unpack_from("<8f", header, 76)
            spacing = (float(pixdim[1]), float(pixdim[2]), float(pixdim[3]))
            if any(s <= 0 for s in spacing):
                raise IngestionError(f"{path}: non-positive spacing {spacing}")
            vox_offset = int(struct.unpack_from("<f", header, 108)[0])
            scl_slope = struct.unpack_from("<f", header, 112)[0]
            scl_inter = struct.unpack_from("<f", header, 116)[0]
            srow = np.array([
                struct.unpack_from("<4f", header, 280),
                struct.unpack_from("<4f", header, 296),
                struct.unpack_from("<4f", header, 312),
            ], dtype=np.float64)
            affine = np.vstack([srow, [0.0, 0.0, 0.0, 1.0]])
            if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
                raise IngestionError(f"{path}: non-invertible affine")
            fh.read(max(0, vox_offset - _HEADER_SIZE))
            dtype = _DTYPES[datatype]
            count = nx * ny * nz
            raw = fh.read(count * dtype.itemsize)
            if len(raw) < count * dtype.itemsize:
                raise IngestionError(f"{path}: truncated data section")
            arr = np.frombuffer(raw, dtype=dtype, count=count)
            # NIfTI stores x fastest on disk.
            data = arr.reshape((nx, ny, nz), order="F").astype(np.float32)
    except OSError as exc:
        raise IngestionError(f"{path}: unreadable ({exc})") from exc
    if scl_slope != 0.0 and not (scl_slope == 1.0 and scl_inter == 0.0):
        data = data * np.float32(scl_slope) + np.float32(scl_inter)
    return VolumeGrid(data=data, spacing=spacing, affine=affine)


def save_volume(path, volume: VolumeGrid) -> None:
    """Write a volume in the same NIfTI-1 subset the reader accepts."""
    path = Path(path)
    nx, ny, nz = volume.dims
    header = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", header, 0, _HEADER_SIZE)
    header[38] = ord("r")  # "regular" flag, conventional
    struct.pack_into("<8h", header, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, 16)   # float32
    struct.pack_into("<h", header, 72, 32)   # bits per voxel
    struct.pack_into("<8f", header, 76, 1.0, *volume.spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, float(_DATA_OFFSET))
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    struct.pack_into("<h", header, 254, 1)    # sform present
    aff = np.asarray(volume.affine, dtype=np.float64)
    struct.pack_into("<4f", header, 280, *aff[0])
    struct.pack_into("<4f", header, 296, *aff[1])
    struct.pack_into("<4f", header, 312, *aff[2])
    header[344:348] = b"n+1\x00"
    payload = np.asfortranarray(volume.data.astype("<f4")).tobytes(order="F")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00" * (_DATA_OFFSET - _HEADER_SIZE))
        fh.write(payload)


def save_cache(base_path, volume: VolumeGrid) -> None:
    """Write the internal cache pair: <base>.raw float32 blob + <base>.json."""
    base = Path(base_path)
    base.parent.mkdir(parents=True, exist_ok=True)
    with open(base.with_suffix(".raw"), "wb") as fh:
        fh.write(np.ascontiguousarray(volume.data, dtype="<f4").tobytes())
    meta = {"dims": list(volume.dims), "spacing": list(volume.spacing)}
    with open(base.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh)


def load_cache(base_path) -> VolumeGrid:
    base = Path(base_path)
    with open(base.with_suffix(".json")) as fh:
        meta = json.load(fh)
    dims = tuple(meta["dims"])
    with open(base.with_suffix(".raw"), "rb") as fh:
        data = np.frombuffer(fh.read(), dtype="<f4").reshape(dims).copy()
    spacing = tuple(float(s) for s in meta["spacing"])
    return VolumeGrid(data=data, spacing=spacing, affine=_default_affine(spacing))


# ---------------------------------------------------------------------------
# Intensity + geometry operations
# ---------------------------------------------------------------------------

def clip_hu(volume: VolumeGrid) -> VolumeGrid:
    """Clamp intensities to [-1000, 1000] HU."""
    return replace(volume, data=np.clip(volume.data, HU_MIN, HU_MAX))


def _convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Monotone-chain convex hull; returns CCW vertices (k, 2)."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts
    # lexicographic sort on (x, y)
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def _fill_hull_slice(points: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Boolean (nx, ny) image with the convex hull of integer points filled."""
    filled = np.zeros(shape, dtype=bool)
    if len(points) == 0:
        return filled
    hull = _convex_hull_2d(points)
    if len(hull) < 3:
        # Degenerate hull (single point or collinear): fill the bounding box,
        # which coincides with the segment for axis-aligned cases and has the
        # same centroid otherwise.
        x0, y0 = points.min(axis=0)
        x1, y1 = points.max(axis=0)
        filled[x0:x1 + 1, y0:y1 + 1] = True
        return filled
    x0, y0 = hull.min(axis=0)
    x1, y1 = hull.max(axis=0)
    xs = np.arange(x0, x1 + 1)
    ys = np.arange(y0, y1 + 1)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    inside = np.ones(gx.shape, dtype=bool)
    for i in range(len(hull)):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % len(hull)]
        # CCW polygon: interior lies left of every edge
        inside &= (bx - ax) * (gy - ay) - (by - ay) * (gx - ax) >= -1e-9
    filled[x0:x1 + 1, y0:y1 + 1] = inside
    return filled


def body_center(volume: VolumeGrid) -> tuple[float, float]:
    """Locate the patient's axial center from soft tissue.

    Thresholds the soft-tissue window, keeps the largest 26-connected
    component, fills the component's 2D convex hull on each axial slice, and
    returns the x-y center of mass of the filled stack.
    """
    data = volume.data
    tissue = (data >= SOFT_TISSUE_LO) & (data <= SOFT_TISSUE_HI)
    if not tissue.any():
        raise CenteringError("no soft-tissue voxels in volume")
    labels, n = ndimage.label(tissue, structure=np.ones((3, 3, 3), dtype=bool))
    if n == 0:
        raise CenteringError("no soft-tissue component found")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    component = labels == sizes.argmax()
    filled = np.zeros_like(component)
    for k in range(component.shape[2]):
        pts = np.argwhere(component[:, :, k])
        if len(pts):
            filled[:, :, k] = _fill_hull_slice(pts, component.shape[:2])
    xs, ys, _ = np.nonzero(filled)
    return float(xs.mean()), float(ys.mean())


def z_keep_range(lung_mask: np.ndarray, spacing_z: float, margin_mm: float,
                 nz: int) -> tuple[int, int] | None:
    """Inclusive z-index range to keep around the lung, or None if empty."""
    zs = np.flatnonzero(np.asarray(lung_mask).any(axis=(0, 1)))
    if len(zs) == 0:
        return None
    margin_vox = margin_mm / spacing_z
    lo = max(0, int(np.floor(zs.min() - margin_vox)))
    hi = min(nz - 1, int(np.ceil(zs.max() + margin_vox)))
    return lo, hi


def crop_z_to_lung(volume: VolumeGrid, lung_mask: np.ndarray,
                   margin_mm: float = 5.0) -> VolumeGrid:
    """Discard axial slices farther than margin_mm beyond the lung extent."""
    if np.asarray(lung_mask).shape != volume.dims:
        raise IngestionError(
            f"lung mask shape {np.asarray(lung_mask).shape} != volume {volume.dims}")
    kept = z_keep_range(lung_mask, volume.spacing[2], margin_mm, volume.dims[2])
    if kept is None:
        warnings.warn("empty lung mask; z crop skipped", RuntimeWarning,
                      stacklevel=2)
        return volume
    lo, hi = kept
    affine = np.asarray(volume.affine, dtype=np.float64).copy()
    affine[:3, 3] += affine[:3, 2] * lo
    return replace(volume, data=volume.data[:, :, lo:hi + 1], affine=affine)


def _gather(data: np.ndarray, xs, ys, zs, *, mask: bool, fill: float):
    if mask:
        return kernels.nearest_gather(data, xs, ys, zs, fill)
    return kernels.trilinear_gather(data, xs, ys, zs, fill)


def resample_and_frame(volume: VolumeGrid, center: tuple[float, float],
                       frame: FrameSpec, *, mask: bool = False) -> VolumeGrid:
    """Resample to isotropic 1 mm and crop/pad to the physical frame.

    The frame is centered on (cx, cy) from body_center in x-y and on the
    volume middle in z.  Intensities use trilinear interpolation with air
    fill; masks use nearest-neighbor with zero fill.
    """
    fx, fy, fz = (int(round(e)) for e in frame.frame_mm)
    sx, sy, sz = volume.spacing
    cx, cy = center
    cz = (volume.dims[2] - 1) / 2.0
    ox = np.arange(fx) - (fx - 1) / 2.0
    oy = np.arange(fy) - (fy - 1) / 2.0
    oz = np.arange(fz) - (fz - 1) / 2.0
    gx, gy, gz = np.meshgrid(cx + ox / sx, cy + oy / sy, cz + oz / sz,
                             indexing="ij")
    fill = 0.0 if mask else HU_MIN
    out = _gather(volume.data, gx, gy, gz, mask=mask, fill=fill)
    return VolumeGrid(data=out, spacing=(1.0, 1.0, 1.0),
                      affine=_default_affine((1.0, 1.0, 1.0)))


@dataclass(frozen=True)
class AugmentParams:
    """Sampled augmentation parameters; all-zero rotation/noise with zoom 1
    reproduces the input up to interpolation rounding."""

    angle_deg: float
    zoom: float
    noise_sigma: float
    offset: float
    noise_seed: int


ROTATION_LIMIT_DEG = 15.0
ZOOM_RANGE = (0.9, 1.1)
NOISE_SIGMA_HU = 20.0
OFFSET_LIMIT_HU = 50.0


def sample_augment_params(seed: int) -> AugmentParams:
    rng = np.random.default_rng(seed)
    return AugmentParams(
        angle_deg=float(rng.uniform(-ROTATION_LIMIT_DEG, ROTATION_LIMIT_DEG)),
        zoom=float(rng.uniform(*ZOOM_RANGE)),
        noise_sigma=NOISE_SIGMA_HU,
        offset=float(rng.uniform(-OFFSET_LIMIT_HU, OFFSET_LIMIT_HU)),
        noise_seed=int(rng.integers(0, 2 ** 31 - 1)),
    )


def apply_augment(volume: VolumeGrid, params: AugmentParams, *,
                  mask: bool = False) -> VolumeGrid:
    """Rotate about z, zoom about the volume center, then (intensities only)
    add Gaussian noise and a global offset."""
    nx, ny, nz = volume.dims
    cx, cy, cz = (nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0
    theta = np.deg2rad(params.angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    ix = np.arange(nx) - cx
    iy = np.arange(ny) - cy
    iz = np.arange(nz) - cz
    gx, gy, gz = np.meshgrid(ix, iy, iz, indexing="ij")
    # inverse map: rotate by -theta and divide by zoom
    sxs = (cos_t * gx + sin_t * gy) / params.zoom + cx
    sys_ = (-sin_t * gx + cos_t * gy) / params.zoom + cy
    szs = gz / params.zoom + cz
    fill = 0.0 if mask else HU_MIN
    out = _gather(volume.data, sxs, sys_, szs, mask=mask, fill=fill)
    if not mask:
        rng = np.random.default_rng(params.noise_seed)
        if params.noise_sigma > 0:
            out = out + rng.normal(0.0, params.noise_sigma, size=out.shape)
        out = np.clip(out + params.offset, HU_MIN, HU_MAX)
    return replace(volume, data=out.astype(volume.data.dtype, copy=False))


def augment(volume: VolumeGrid, seed: int, *, mask: bool = False) -> VolumeGrid:
    return apply_augment(volume, sample_augment_params(seed), mask=mask)


def _resize(data: np.ndarray, out_shape: tuple[int, int, int], *,
            mask: bool) -> np.ndarray:
    """Resize by pixel-center-aligned interpolation (trilinear or nearest)."""
    in_shape = data.shape
    coords = []
    for n_in, n_out in zip(in_shape, out_shape):
        scale = n_in / n_out
        coords.append((np.arange(n_out) + 0.5) * scale - 0.5)
    gx, gy, gz = np.meshgrid(*coords, indexing="ij")
    fill = 0.0 if mask else HU_MIN
    return _gather(data, gx, gy, gz, mask=mask, fill=fill)


def finalize_input(volume: VolumeGrid, frame: FrameSpec, *,
                   mask: bool = False) -> np.ndarray:
    """Center-crop the framed volume to the inference extents, resize to the
    model input shape, and rescale intensities from [-1000, 1000] to [-1, 1].

    Masks skip the rescale and use nearest-neighbor resizing.
    """
    fx, fy, fz = (int(round(e)) for e in frame.frame_mm)
    if volume.dims != (fx, fy, fz):
        raise IngestionError(
            f"finalize_input expects a framed volume {(fx, fy, fz)}, "
            f"got {volume.dims}")
    crop = tuple(int(round(e)) for e in frame.crop_mm)
    off = tuple((f - c) // 2 for f, c in zip((fx, fy, fz), crop))
    cropped = volume.data[off[0]:off[0] + crop[0],
                          off[1]:off[1] + crop[1],
                          off[2]:off[2] + crop[2]]
    resized = _resize(cropped, tuple(frame.input_shape), mask=mask)
    if mask:
        return resized.astype(np.float32)
    return (resized / np.float32(1000.0)).astype(np.float32)
