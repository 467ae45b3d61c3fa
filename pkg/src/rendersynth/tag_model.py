"""Parametric renderer for circular 12-bit barcode tags.

A tag is a flat disk: an outer ring of twelve 30 degree bit cells around an
inner disk split into a white half (towards the orientation arrow) and a
black half.  The disk is rotated by (yaw, pitch, roll) and projected
orthographically onto the image plane.

Tag-local coordinates ``(a, b)`` are measured in units of the outer radius;
``+b`` points along the orientation arrow and cell ``i`` spans the polar
angles ``[i * 30deg, (i + 1) * 30deg)`` counter-clockwise from ``+a``.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

N_BITS = 12
WHITE_HALF = 12
BLACK_HALF = 13
GAP = 14
BACKGROUND = -1


class UndecodableGeometry(ValueError):
    """A cell region vanished after erosion (pose too extreme or image too small)."""


class DecodeFailure(ValueError):
    """The white reference half is not brighter than the black one."""


@dataclass(frozen=True)
class TagGeometry:
    # outer radius as a fraction of the canvas width at scale 1 (22 px on 64 px)
    outer_radius: float = 22.0 / 64.0
    ring_inner: float = 0.55
    inner_disk: float = 0.45
    supersample: int = 4
    erosion_px: float = 1.5
    max_tilt: float = np.pi / 3
    background_value: float = 0.0
    min_resolution: int = 16


DEFAULT_GEOMETRY = TagGeometry()


@dataclass(frozen=True)
class TagLabel:
    """Ground-truth label: 12 ID bits plus the pose of the tag."""

    bits: tuple[bool, ...]
    center_x: float
    center_y: float
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        bits = tuple(bool(b) for b in self.bits)
        if len(bits) != N_BITS:
            raise ValueError(f"expected {N_BITS} bits, got {len(bits)}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "bits", bits)

    @classmethod
    def centered(cls, bits, resolution: int = 64, **pose) -> "TagLabel":
        return cls(bits=tuple(bits), center_x=resolution / 2, center_y=resolution / 2, **pose)

    @classmethod
    def from_string(cls, code: str, resolution: int = 64, **pose) -> "TagLabel":
        return cls.centered([c == "1" for c in code], resolution, **pose)

    @property
    def pose(self) -> tuple[float, ...]:
        return (self.center_x, self.center_y, self.yaw, self.pitch, self.roll, self.scale)

    def bits_array(self) -> np.ndarray:
        return np.array(self.bits, dtype=bool)

    def bit_string(self) -> str:
        return "".join("1" if b else "0" for b in self.bits)


@dataclass
class RenderOutput:
    image: np.ndarray
    bg_mask: np.ndarray
    depth: np.ndarray


@dataclass(frozen=True)
class PoseSampling:
    """Distributions used to draw labels when generating datasets."""

    yaw_range: tuple[float, float] = (0.0, 2 * np.pi)
    tilt_sigma: float = 0.3
    tilt_bound: float = np.pi / 3
    # center jitter in pixels on a 64 px canvas, scaled with the resolution
    center_jitter: float = 4.0
    scale_range: tuple[float, float] = (0.8, 1.1)


DEFAULT_POSES = PoseSampling()
# near-frontal tags with little translation, for pose-agnostic pooled decoders
EVAL_POSES = PoseSampling(yaw_range=(-0.05, 0.05), tilt_sigma=0.1, center_jitter=0.5, scale_range=(0.97, 1.03))


def rotation_matrix(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """``R_roll @ R_pitch @ R_yaw`` with yaw about z, pitch about x, roll about y."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    r_yaw = np.array([[cy, -sy, 0.0], [sy, cy, 0.0], [0.0, 0.0, 1.0]])
    r_pitch = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    r_roll = np.array([[cr, 0.0, sr], [0.0, 1.0, 0.0], [-sr, 0.0, cr]])
    return r_roll @ r_pitch @ r_yaw


def _check_pose(label: TagLabel, geometry: TagGeometry) -> None:
    if abs(label.pitch) >= geometry.max_tilt or abs(label.roll) >= geometry.max_tilt:
        raise ValueError(
            f"pitch/roll must satisfy |angle| < {geometry.max_tilt:.4f}, "
            f"got pitch={label.pitch}, roll={label.roll}"
        )


def _check_resolution(resolution: int, geometry: TagGeometry) -> None:
    if resolution < geometry.min_resolution:
        raise ValueError(f"resolution must be >= {geometry.min_resolution}, got {resolution}")


def _local_frame(label: TagLabel, resolution: int, geometry: TagGeometry):
    """Affine map from image points to tag-local (a, b) and the z row of the rotation."""
    rot = rotation_matrix(label.yaw, label.pitch, label.roll)
    radius = geometry.outer_radius * resolution * label.scale
    inv = np.linalg.inv(rot[:2, :2]) / radius
    return inv, rot[2, :2]


def _to_local(label: TagLabel, frame, px, py):
    """Map image points to tag-local (a, b, z) via the inverse projection."""
    inv, zrow = frame
    wx = px - label.center_x
    wy = label.center_y - py
    a = inv[0, 0] * wx + inv[0, 1] * wy
    b = inv[1, 0] * wx + inv[1, 1] * wy
    return a, b, zrow[0] * a + zrow[1] * b, float(np.hypot(*zrow))


def _classify(a, b, geometry: TagGeometry) -> np.ndarray:
    rho2 = a * a + b * b
    ring = (rho2 >= geometry.ring_inner**2) & (rho2 <= 1.0)
    region = np.where(rho2 <= 1.0, GAP, BACKGROUND)
    theta = np.arctan2(b[ring], a[ring])
    theta[theta < 0] += 2 * np.pi
    region[ring] = np.minimum((theta * (6 / np.pi)).astype(np.int64), N_BITS - 1)
    inner = rho2 < geometry.inner_disk**2
    region[inner] = np.where(b[inner] >= 0, WHITE_HALF, BLACK_HALF)
    return region


def _region_values(region: np.ndarray, bits: tuple[bool, ...], background: float) -> np.ndarray:
    # lookup indexed by region + 1 so that BACKGROUND (-1) maps to slot 0
    lut = np.empty(GAP + 2)
    lut[0] = background
    lut[1 : N_BITS + 1] = np.where(np.array(bits), 1.0, -1.0)
    lut[WHITE_HALF + 1] = 1.0
    lut[BLACK_HALF + 1] = -1.0
    lut[GAP + 1] = -1.0
    return lut[region + 1]


def render(label: TagLabel, resolution: int = 64, geometry: TagGeometry = DEFAULT_GEOMETRY) -> RenderOutput:
    """Render the clean tag image, background mask and normalized depth map.

    Pixels are supersampled on an ``S x S`` grid and box filtered.  Pixels
    with less than half tag coverage are background: ``bg_mask`` is 1 there,
    the image holds ``background_value`` and the depth is 0.
    """
    _check_resolution(resolution, geometry)
    _check_pose(label, geometry)
    s = geometry.supersample
    centers = np.arange(resolution, dtype=np.float64)
    py, px = np.meshgrid(centers, centers, indexing="ij")
    frame = _local_frame(label, resolution, geometry)
    image = np.zeros((resolution, resolution))
    fg_count = np.zeros((resolution, resolution))
    depth_sum = np.zeros((resolution, resolution))
    # one pass per sub-pixel offset keeps the temporaries small
    for oy in (np.arange(s) + 0.5) / s:
        for ox in (np.arange(s) + 0.5) / s:
            a, b, z, zmax = _to_local(label, frame, px + ox, py + oy)
            region = _classify(a, b, geometry)
            image += _region_values(region, label.bits, geometry.background_value)
            fg = region != BACKGROUND
            fg_count += fg
            depth_sub = 0.5 + 0.5 * z / zmax if zmax > 1e-12 else 0.5
            depth_sum += np.where(fg, depth_sub, 0.0)
    n_sub = s * s
    image /= n_sub
    bg_mask = (fg_count / n_sub < 0.5).astype(np.float64)
    depth = np.where(fg_count > 0, depth_sum / np.maximum(fg_count, 1), 0.0)

    image = np.where(bg_mask > 0, geometry.background_value, image)
    depth = np.where(bg_mask > 0, 0.0, depth)
    return RenderOutput(image=image, bg_mask=bg_mask, depth=depth)


def white_mask(x: np.ndarray) -> np.ndarray:
    """1 where the pixel is white (``x > 0``), else 0."""
    return (np.asarray(x) > 0).astype(np.float64)


def _erosion_offsets(radius: float) -> np.ndarray:
    outer = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    inner = np.linspace(0, 2 * np.pi, 8, endpoint=False) + np.pi / 8
    pts = [(0.0, 0.0)]
    pts += [(radius * np.cos(t), radius * np.sin(t)) for t in outer]
    pts += [(0.5 * radius * np.cos(t), 0.5 * radius * np.sin(t)) for t in inner]
    return np.array(pts)


@functools.lru_cache(maxsize=4096)
def _cell_regions_cached(pose: tuple, resolution: int, geometry: TagGeometry) -> np.ndarray:
    label = TagLabel((False,) * N_BITS, *pose)
    centers = np.arange(resolution) + 0.5
    py, px = np.meshgrid(centers, centers, indexing="ij")
    frame = _local_frame(label, resolution, geometry)
    center_region = None
    stable = np.ones((resolution, resolution), dtype=bool)
    for ox, oy in _erosion_offsets(geometry.erosion_px):
        a, b, _, _ = _to_local(label, frame, px + ox, py + oy)
        region = _classify(a, b, geometry)
        if center_region is None:
            center_region = region
        else:
            stable &= region == center_region
    masks = np.stack([stable & (center_region == k) for k in range(BLACK_HALF + 1)])
    masks.setflags(write=False)
    return masks


def cell_regions(label: TagLabel, resolution: int = 64, geometry: TagGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Eroded pixel masks for cells 0-11 and the white (12) / black (13) halves.

    Returns a read-only boolean array of shape ``(14, resolution, resolution)``.
    A pixel belongs to region ``k`` only if every point within
    ``erosion_px`` of its center lies in ``k``, so the masks are pairwise
    disjoint and avoid antialiased edges.

    Raises:
        UndecodableGeometry: if any region is empty after erosion.
    """
    _check_pose(label, geometry)
    masks = _cell_regions_cached(label.pose, int(resolution), geometry)
    empty = [k for k in range(BLACK_HALF + 1) if not masks[k].any()]
    if empty:
        raise UndecodableGeometry(f"regions {empty} are empty after erosion at resolution {resolution}")
    return masks


def decode_oracle(x: np.ndarray, label: TagLabel, geometry: TagGeometry = DEFAULT_GEOMETRY) -> np.ndarray:
    """Read the 12 bits of ``x`` using the known geometry of ``label``.

    Each cell is compared with the midpoint of the mean intensities of the
    white and black reference halves, so any increasing affine intensity
    map leaves the result unchanged.

    Raises:
        DecodeFailure: if the white reference is not brighter than the black one.
    """
    x = np.asarray(x, dtype=np.float64)
    masks = cell_regions(label, x.shape[-1], geometry)
    w = x[masks[WHITE_HALF]].mean()
    b = x[masks[BLACK_HALF]].mean()
    if not w > b:
        raise DecodeFailure(f"white reference {w:.4f} <= black reference {b:.4f}")
    threshold = 0.5 * (w + b)
    return np.array([x[masks[i]].mean() > threshold for i in range(N_BITS)])


def _truncated_normal(rng: np.random.Generator, sigma: float, bound: float, size: int) -> np.ndarray:
    out = rng.normal(0.0, sigma, size)
    bad = np.abs(out) >= bound
    while bad.any():
        out[bad] = rng.normal(0.0, sigma, int(bad.sum()))
        bad = np.abs(out) >= bound
    return out


def sample_labels(
    rng: np.random.Generator,
    n: int,
    resolution: int = 64,
    poses: PoseSampling = DEFAULT_POSES,
) -> list[TagLabel]:
    """Draw ``n`` labels: uniform bits and poses from ``poses``."""
    bits = rng.random((n, N_BITS)) < 0.5
    yaw = rng.uniform(*poses.yaw_range, n)
    pitch = _truncated_normal(rng, poses.tilt_sigma, poses.tilt_bound, n)
    roll = _truncated_normal(rng, poses.tilt_sigma, poses.tilt_bound, n)
    jitter = poses.center_jitter * resolution / 64.0
    cx = resolution / 2 + rng.uniform(-jitter, jitter, n)
    cy = resolution / 2 + rng.uniform(-jitter, jitter, n)
    scale = rng.uniform(*poses.scale_range, n)
    return [
        TagLabel(tuple(bits[i]), float(cx[i]), float(cy[i]), float(yaw[i]),
                 float(pitch[i]), float(roll[i]), float(scale[i]))
        for i in range(n)
    ]
