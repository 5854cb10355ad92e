"""Server-side slice rendering: deterministic 8-bit grayscale PNGs.

Windowing reuses the cohort preprocessing convention (1st-99th percentile
of the volume's nonzero voxels), so every reader sees identical contrast.
"""

from __future__ import annotations

import io

import numpy as np
from PIL import Image

from ..errors import DegenerateInputError, ValidationError
from ..volume_io import VoxelGrid, percentile_thresholds

AXES = {"sagittal": 0, "coronal": 1, "axial": 2}


def slice_count(volume: VoxelGrid, axis: str) -> int:
    if axis not in AXES:
        raise ValidationError(f"axis must be one of {sorted(AXES)}, got {axis!r}")
    return volume.dims[AXES[axis]]


def render_slice(volume: VoxelGrid, axis: str, index: int) -> bytes:
    """Extract one plane, window it, and encode as PNG."""
    count = slice_count(volume, axis)
    if not (0 <= index < count):
        raise ValidationError(
            f"slice index {index} out of range [0, {count}) along {axis}"
        )
    ax = AXES[axis]
    plane = np.take(volume.data, index, axis=ax).astype(np.float64)
    try:
        lo, hi = percentile_thresholds(volume, 1.0, 99.0, domain="nonzero")
    except DegenerateInputError:
        lo = hi = 0.0
    if hi > lo:
        scaled = np.clip((plane - lo) / (hi - lo), 0.0, 1.0) * 255.0
        arr = scaled.astype(np.uint8)
    else:
        arr = np.full(plane.shape, 128, dtype=np.uint8)
    # display convention: second array axis runs upward
    image = Image.fromarray(np.flipud(arr.T))
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    return buf.getvalue()
