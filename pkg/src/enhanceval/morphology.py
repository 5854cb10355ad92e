"""3D connected components, shape features, and the radiomic category rules.

Masks are plain boolean arrays (typically ``LabelGrid.class_mask(3)``)
paired with a voxel spacing in mm.  Feature definitions:

* volume ``V``: voxel count x voxel volume (mm^3)
* surface area ``A``: marching-cubes isosurface area (mm^2), see
  :func:`surface_area`
* sphericity: ``pi^(1/3) * (6V)^(2/3) / A``
* solidity: ``V / convex-hull volume`` of the voxel centers
* compactness: ``A^3 / (36 pi V^2)`` (equals sphericity^-3)
* surface-to-volume ratio: ``A / V`` (1/mm)
* elongation: ratio of largest to smallest eigenvalue of the population
  covariance of voxel-center coordinates (mm)
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, sparse
from scipy.spatial import ConvexHull, QhullError
from skimage import measure

from .errors import AlignmentError, DegenerateInputError, ValidationError

CATEGORY_MULTIPLE = "multiple"
CATEGORY_WELL_CIRCUMSCRIBED = "well_circumscribed_single"
CATEGORY_INFILTRATIVE = "infiltrative_single"
CATEGORY_IRREGULAR = "irregular_complex_single"

CONNECTIVITY_STRUCTURES = {6: 1, 18: 2, 26: 3}

# Mesh smoothing: enough iterations to flatten the half-voxel staircase of a
# binary isosurface without shrinking; meshes this small collapse instead of
# smoothing, so they are left as extracted.
_TAUBIN_LAMBDA = 0.5
_TAUBIN_MU = -0.53
_TAUBIN_ITERS = 10
_MIN_SMOOTH_VERTS = 50

_ELONGATION_EPS = 1e-9


@dataclass
class ComponentSet:
    labels: np.ndarray = field(repr=False)
    n_components: int
    component_volumes_cm3: list[float]
    component_voxels: list[int]
    spacing: tuple[float, float, float]

    @property
    def total_voxels(self) -> int:
        return int(sum(self.component_voxels))


def _structure(connectivity: int) -> np.ndarray:
    if connectivity not in CONNECTIVITY_STRUCTURES:
        raise ValidationError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    return ndimage.generate_binary_structure(3, CONNECTIVITY_STRUCTURES[connectivity])


def connected_components(
    mask: np.ndarray, spacing=(1.0, 1.0, 1.0), connectivity: int = 26
) -> ComponentSet:
    """Label connected components, ids assigned by descending volume.

    Ties break on the lowest linear (C-order) voxel index.  An empty mask
    yields zero components, not an error.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 3:
        raise ValidationError(f"mask must be 3D, got shape {mask.shape}")
    raw, n = ndimage.label(mask, structure=_structure(connectivity))
    if n == 0:
        return ComponentSet(
            labels=np.zeros(mask.shape, dtype=np.int32),
            n_components=0,
            component_volumes_cm3=[],
            component_voxels=[],
            spacing=tuple(float(s) for s in spacing),
        )
    flat = raw.ravel()
    counts = np.bincount(flat, minlength=n + 1)[1:]
    # scipy assigns ids in scan order, so the first occurrence of each id is
    # its lowest linear index.
    ids, first = np.unique(flat, return_index=True)
    first_index = dict(zip(ids.tolist(), first.tolist()))
    order = sorted(range(1, n + 1), key=lambda k: (-counts[k - 1], first_index[k]))
    remap = np.zeros(n + 1, dtype=np.int32)
    for new_id, old_id in enumerate(order, start=1):
        remap[old_id] = new_id
    voxvol = float(np.prod(spacing))
    voxels = [int(counts[k - 1]) for k in order]
    return ComponentSet(
        labels=remap[raw],
        n_components=int(n),
        component_volumes_cm3=[v * voxvol / 1000.0 for v in voxels],
        component_voxels=voxels,
        spacing=tuple(float(s) for s in spacing),
    )


def _taubin_smooth(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    n = len(verts)
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    i = np.concatenate([edges[:, 0], edges[:, 1]])
    j = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sparse.csr_matrix((np.ones(len(i)), (i, j)), shape=(n, n))
    weights = sparse.diags(1.0 / np.asarray(adj.sum(axis=1)).ravel()) @ adj
    v = verts.astype(np.float64)
    for _ in range(_TAUBIN_ITERS):
        v = v + _TAUBIN_LAMBDA * (weights @ v - v)
        v = v + _TAUBIN_MU * (weights @ v - v)
    return v


def surface_mesh(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)):
    """Marching-cubes mesh (level 0.5) of a binary mask, Taubin-smoothed.

    The raw isosurface of binary data carries a half-voxel staircase that
    overestimates curved surfaces by ~9%; a few non-shrinking smoothing
    passes remove it while leaving flat faces in place.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DegenerateInputError("cannot mesh an empty mask")
    padded = np.pad(mask, 1).astype(np.float32)
    verts, faces, _, _ = measure.marching_cubes(
        padded, level=0.5, spacing=tuple(float(s) for s in spacing)
    )
    if len(verts) >= _MIN_SMOOTH_VERTS:
        verts = _taubin_smooth(verts, faces)
    return verts, faces


def surface_area(mask: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> float:
    """Surface area in mm^2 of the mask's smoothed isosurface."""
    verts, faces = surface_mesh(mask, spacing)
    return float(measure.mesh_surface_area(verts, faces))


def convex_hull_volume(points: np.ndarray) -> float:
    """Volume in mm^3 of the 3D convex hull of the given points."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValidationError(f"points must be (n, 3), got {points.shape}")
    if len(points) < 4:
        raise DegenerateInputError(
            f"need >= 4 points for a 3D hull, got {len(points)}"
        )
    try:
        hull = ConvexHull(points)
    except QhullError as exc:
        raise DegenerateInputError(f"degenerate hull: {exc}") from exc
    return float(hull.volume)


@dataclass
class RadiomicFeatures:
    n_components: int
    volume_cm3: float
    surface_area_mm2: float
    sphericity: float
    solidity: float
    compactness: float
    surface_to_volume: float
    elongation: float
    category: str | None = None
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_components": self.n_components,
            "volume_cm3": self.volume_cm3,
            "surface_area_mm2": self.surface_area_mm2,
            "sphericity": self.sphericity,
            "solidity": self.solidity,
            "compactness": self.compactness,
            "surface_to_volume": self.surface_to_volume,
            "elongation": self.elongation,
            "category": self.category,
            "flags": self.flags,
        }

    CSV_FIELDS = (
        "case_id",
        "n_components",
        "volume_cm3",
        "surface_area_mm2",
        "sphericity",
        "solidity",
        "compactness",
        "surface_to_volume",
        "elongation",
        "category",
        "flags",
    )


def _elongation(centers_mm: np.ndarray, flags: list[str]) -> float:
    if len(centers_mm) == 1:
        flags.append("single-voxel-elongation")
        return 1.0
    cov = np.cov(centers_mm, rowvar=False, bias=True)
    eigvals = np.sort(np.linalg.eigvalsh(cov))
    lam_min, lam_max = float(eigvals[0]), float(eigvals[-1])
    if lam_max <= 0.0:
        flags.append("single-voxel-elongation")
        return 1.0
    if lam_min < _ELONGATION_EPS * lam_max:
        flags.append("degenerate-elongation")
        return float("inf")
    return lam_max / lam_min


def shape_features(
    mask: np.ndarray, spacing=(1.0, 1.0, 1.0), connectivity: int = 26
) -> RadiomicFeatures:
    """Shape features of one mask; ``category`` is left unset.

    Degenerate hulls (coplanar or collinear masks) fall back to solidity 1
    with a flag instead of failing the case.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DegenerateInputError("cannot compute shape features of an empty mask")
    spacing = tuple(float(s) for s in spacing)
    flags: list[str] = []
    voxvol = float(np.prod(spacing))
    n_vox = int(np.count_nonzero(mask))
    volume_mm3 = n_vox * voxvol
    area = surface_area(mask, spacing)
    centers = np.argwhere(mask).astype(np.float64) * np.asarray(spacing)
    try:
        hull_volume = convex_hull_volume(centers)
        solidity = volume_mm3 / hull_volume
    except DegenerateInputError:
        flags.append("degenerate-hull")
        solidity = 1.0
    return RadiomicFeatures(
        n_components=connected_components(mask, spacing, connectivity).n_components,
        volume_cm3=volume_mm3 / 1000.0,
        surface_area_mm2=area,
        sphericity=np.pi ** (1.0 / 3.0) * (6.0 * volume_mm3) ** (2.0 / 3.0) / area,
        solidity=solidity,
        compactness=area**3 / (36.0 * np.pi * volume_mm3**2),
        surface_to_volume=area / volume_mm3,
        elongation=_elongation(centers, flags),
        flags=flags,
    )


def classify_category(
    components: ComponentSet, dominant_features: RadiomicFeatures
) -> str:
    """Four-way radiomic category from component structure and shape.

    Rule order: (1) multiple for >= 3 components, or 2 components with the
    largest under 80% of total volume; (2) well-circumscribed for
    sphericity > 0.7 and solidity > 0.9; (3) infiltrative for
    sphericity < 0.5 or solidity < 0.7; (4) irregular/complex otherwise.
    """
    n = components.n_components
    if n == 0:
        raise DegenerateInputError("no lesion: zero connected components")
    if n >= 3:
        return CATEGORY_MULTIPLE
    if n == 2:
        largest = components.component_voxels[0]
        if largest / components.total_voxels < 0.8:
            return CATEGORY_MULTIPLE
    if dominant_features.sphericity > 0.7 and dominant_features.solidity > 0.9:
        return CATEGORY_WELL_CIRCUMSCRIBED
    if dominant_features.sphericity < 0.5 or dominant_features.solidity < 0.7:
        return CATEGORY_INFILTRATIVE
    return CATEGORY_IRREGULAR


def _in_stated_irregular_band(features: RadiomicFeatures) -> bool:
    return 0.5 <= features.sphericity <= 0.7 and 0.7 <= features.solidity <= 0.9


def radiomic_profile(
    mask: np.ndarray, spacing=(1.0, 1.0, 1.0), connectivity: int = 26
) -> RadiomicFeatures:
    """Component analysis + shape features of the dominant component + category.

    Shape features are computed on the largest connected component (the
    category rules describe a single dominant lesion); ``n_components``
    always refers to the whole mask.
    """
    components = connected_components(mask, spacing, connectivity)
    if components.n_components == 0:
        raise DegenerateInputError("no lesion: zero connected components")
    dominant = components.labels == 1
    features = shape_features(dominant, spacing, connectivity)
    features.n_components = components.n_components
    features.category = classify_category(components, features)
    if features.category == CATEGORY_IRREGULAR and not _in_stated_irregular_band(
        features
    ):
        features.flags.append("rule-gap")
    return features


@dataclass(frozen=True)
class DuplicatePair:
    case_a: str
    case_b: str
    r: float


@dataclass
class DuplicateScanResult:
    flagged: list[DuplicatePair]
    excluded: list[str]


def duplicate_scan(
    masks: list[tuple[str, np.ndarray]], threshold: float = 0.95
) -> DuplicateScanResult:
    """Flag suspiciously correlated mask pairs (voxel-wise Pearson r > threshold).

    All masks must live on the identical grid.  Empty or full masks have zero
    variance, get excluded with a warning, and are reported back.
    """
    if not masks:
        return DuplicateScanResult(flagged=[], excluded=[])
    shape = np.asarray(masks[0][1]).shape
    usable: list[tuple[str, np.ndarray, int]] = []
    excluded: list[str] = []
    for case_id, mask in masks:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != shape:
            raise AlignmentError(
                f"mask {case_id!r} has shape {mask.shape}, expected {shape}"
            )
        count = int(np.count_nonzero(mask))
        if count == 0 or count == mask.size:
            warnings.warn(
                f"excluding zero-variance mask {case_id!r} from duplicate scan",
                stacklevel=2,
            )
            excluded.append(case_id)
        else:
            usable.append((case_id, mask, count))
    n = int(np.prod(shape))
    flagged = []
    for i in range(len(usable)):
        id_a, a, ca = usable[i]
        for id_b, b, cb in usable[i + 1 :]:
            overlap = int(np.count_nonzero(a & b))
            num = n * overlap - ca * cb
            den = np.sqrt(float(ca) * (n - ca) * cb * (n - cb))
            r = num / den
            if r > threshold:
                flagged.append(DuplicatePair(case_a=id_a, case_b=id_b, r=float(r)))
    flagged.sort(key=lambda p: -p.r)
    return DuplicateScanResult(flagged=flagged, excluded=excluded)
