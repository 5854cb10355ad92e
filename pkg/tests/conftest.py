import numpy as np
import pytest

from enhanceval.volume_io import LabelGrid, ProbGrid, VoxelGrid

EYE4 = np.eye(4)


def voxel_grid(data, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data, dtype=np.float32)
    affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
    return VoxelGrid(data.shape, spacing, affine, data)


def label_grid(data, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data)
    affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
    return LabelGrid(data.shape, spacing, affine, data)


def prob_grid(data, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(data, dtype=np.float32)
    affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
    return ProbGrid(data.shape[:3], spacing, affine, data)


def ball_mask(radius, pad=2, dims=None):
    if dims is None:
        n = 2 * int(radius) + 1 + 2 * pad
        dims = (n, n, n)
    center = [(d - 1) / 2.0 for d in dims]
    idx = np.indices(dims, dtype=np.float64)
    d2 = sum((idx[i] - center[i]) ** 2 for i in range(3))
    return d2 <= radius * radius


def cube_mask(side, pad=2):
    n = int(side) + 2 * pad
    m = np.zeros((n, n, n), dtype=bool)
    m[pad : pad + side, pad : pad + side, pad : pad + side] = True
    return m


@pytest.fixture(scope="session")
def small_cohort(tmp_path_factory):
    """A quick 24-voxel-grid phantom cohort shared by pipeline-level tests."""
    from enhanceval.phantom import PhantomSpec, generate_cohort

    out = tmp_path_factory.mktemp("small_cohort")
    mix = [
        PhantomSpec(shape="ball", radius=5.0),
        PhantomSpec(shape="cube", side=7.0),
        PhantomSpec(shape="ball", radius=4.0),
        PhantomSpec(shape="multi_ball", count=3, radius=2.5),
    ]
    manifest = generate_cohort(
        out, 24, seed=7734, mix=mix, negative_fraction=0.25, grid_dims=(24, 24, 24)
    )
    return manifest


@pytest.fixture(scope="session")
def reader_cohort(tmp_path_factory):
    """Cohort large enough for 50/50 reader-study sessions."""
    from enhanceval.phantom import PhantomSpec, generate_cohort

    out = tmp_path_factory.mktemp("reader_cohort")
    mix = [
        PhantomSpec(shape="ball", radius=5.0),
        PhantomSpec(shape="cube", side=7.0),
        PhantomSpec(shape="ball", radius=4.0),
    ]
    manifest = generate_cohort(
        out, 130, seed=1234, mix=mix, negative_fraction=0.5, grid_dims=(24, 24, 24)
    )
    return manifest
