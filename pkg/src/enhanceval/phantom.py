"""Synthetic cohort generator with analytic ground truth.

Phantoms validate arithmetic, not radiology: labels are exact geometric
digitizations (a voxel belongs to a shape iff its center satisfies the
implicit inequality), intensities are class-dependent means plus seeded
smooth noise, and every case ships with the analytic feature values its
shape implies, so the morphology and metrics modules can be checked
end to end at desk scale.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import DEFAULT_SEED
from .errors import ValidationError
from .volume_io import LabelGrid, ProbGrid, VoxelGrid, write_nifti

SHAPES = ("ball", "ellipsoid", "cube", "multi_ball", "infiltrative_blob")
SEQUENCES = ("t1", "t2", "flair")

# Mean intensity per (sequence, class); class 0 stays at zero like a
# brain-extracted volume.
_CLASS_MEANS = {
    "t1": {1: 100.0, 2: 80.0, 3: 70.0},
    "t2": {1: 90.0, 2: 130.0, 3: 115.0},
    "flair": {1: 85.0, 2: 145.0, 3: 125.0},
}
_NOISE_SD = 4.0

CUBE_SPHERICITY = float(np.pi / 6.0) ** (1.0 / 3.0)

MANIFEST_COLUMNS = (
    "case_id",
    "cohort",
    "pathology",
    "country",
    "age",
    "sex",
    "split",
    "t1",
    "t2",
    "flair",
    "t1ce",
    "gt_labels",
    "pred_labels",
    "pred_prob",
)

PATHOLOGIES = (
    "presurgical glioma",
    "postoperative glioma resection",
    "meningioma",
    "metastases",
    "paediatric presurgical tumour",
)
COUNTRIES = ("UK", "USA", "Netherlands", "Sub-Saharan Africa")


@dataclass
class PhantomSpec:
    shape: str = "ball"
    radius: float = 12.0
    semi_axes: tuple[float, float, float] = (15.0, 6.0, 6.0)
    side: float = 12.0
    count: int = 3
    grid_dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    target_dice: float | None = None
    degrade_method: str = "shift"
    positive: bool = True
    false_positive: bool = False
    nonenh_blob: bool = False
    seed: int = 0
    case_id: str = "case"
    cohort: str = "phantom"
    pathology: str = "presurgical glioma"
    country: str = "Synthetica"
    age: float | None = None
    sex: str | None = None
    split: str = "test"


@dataclass
class ExpectedFeatures:
    """Analytic feature expectations with tolerance bands, where known."""

    sphericity: tuple[float, float] | None = None
    compactness: tuple[float, float] | None = None
    elongation: tuple[float, float] | None = None
    volume_cm3: tuple[float, float] | None = None
    n_components: int | None = None
    category: str | None = None


@dataclass
class PhantomCase:
    spec: PhantomSpec
    sequences: dict[str, VoxelGrid]
    gt: LabelGrid
    pred: LabelGrid
    prob: ProbGrid
    expected: ExpectedFeatures | None
    achieved_dice: float | None
    flags: list[str] = field(default_factory=list)


def _mask_dice(a: np.ndarray, b: np.ndarray) -> float:
    denom = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if denom == 0:
        return 1.0
    return 2 * int(np.count_nonzero(a & b)) / denom


def _check_fits(mask: np.ndarray, margin: int = 2) -> None:
    if not mask.any():
        return
    idx = np.argwhere(mask)
    lo = idx.min(axis=0)
    hi = idx.max(axis=0)
    dims = np.array(mask.shape)
    if (lo < margin).any() or (hi > dims - 1 - margin).any():
        raise ValidationError(
            f"shape exceeds the grid: occupied box {lo.tolist()}..{hi.tolist()} "
            f"needs a {margin}-voxel margin inside dims {mask.shape}"
        )


def _ball_mask(dims, center, radius) -> np.ndarray:
    idx = np.indices(dims, dtype=np.float64)
    d2 = sum((idx[i] - center[i]) ** 2 for i in range(3))
    return d2 <= radius * radius


def _ellipsoid_mask(dims, center, semi_axes) -> np.ndarray:
    idx = np.indices(dims, dtype=np.float64)
    q = sum(((idx[i] - center[i]) / semi_axes[i]) ** 2 for i in range(3))
    return q <= 1.0


def _cube_mask(dims, center, side) -> np.ndarray:
    idx = np.indices(dims, dtype=np.float64)
    half = side / 2.0
    inside = np.ones(dims, dtype=bool)
    for i in range(3):
        inside &= (idx[i] > center[i] - half) & (idx[i] <= center[i] + half)
    return inside


def _lesion_mask(spec: PhantomSpec, rng: np.random.Generator) -> tuple[np.ndarray, ExpectedFeatures]:
    dims = spec.grid_dims
    center = tuple((d - 1) / 2.0 for d in dims)

    if spec.shape == "ball":
        r = float(spec.radius)
        mask = _ball_mask(dims, center, r)
        vol = 4.0 / 3.0 * np.pi * r**3 / 1000.0
        expected = ExpectedFeatures(
            sphericity=(0.97, 1.03),
            compactness=(0.91, 1.09),
            elongation=(0.9, 1.1),
            volume_cm3=(vol * 0.92, vol * 1.08),
            n_components=1,
            category="well_circumscribed_single",
        )
    elif spec.shape == "cube":
        s = float(spec.side)
        mask = _cube_mask(dims, center, s)
        vol = s**3 / 1000.0
        expected = ExpectedFeatures(
            sphericity=(CUBE_SPHERICITY * 0.97, CUBE_SPHERICITY * 1.03),
            elongation=(0.9, 1.1),
            volume_cm3=(vol * 0.95, vol * 1.05),
            n_components=1,
            category="well_circumscribed_single",
        )
    elif spec.shape == "ellipsoid":
        a, b, c = (float(s) for s in spec.semi_axes)
        mask = _ellipsoid_mask(dims, center, (a, b, c))
        ratio = (max(a, b, c) / min(a, b, c)) ** 2
        vol = 4.0 / 3.0 * np.pi * a * b * c / 1000.0
        expected = ExpectedFeatures(
            elongation=(ratio * 0.9, ratio * 1.1),
            volume_cm3=(vol * 0.9, vol * 1.1),
            n_components=1,
        )
    elif spec.shape == "multi_ball":
        k = int(spec.count)
        if k < 2:
            raise ValidationError("multi_ball needs count >= 2")
        r = float(spec.radius)
        mask = np.zeros(dims, dtype=bool)
        centers: list[np.ndarray] = []
        limit = min(dims) / 2.0 - r - 3.0
        if limit <= 0:
            raise ValidationError("multi_ball components do not fit the grid")
        attempts = 0
        while len(centers) < k:
            attempts += 1
            if attempts > 1000:
                raise ValidationError("could not place non-touching components")
            cand = np.array(center) + rng.uniform(-limit, limit, size=3)
            if all(np.linalg.norm(cand - c) > 2 * r + 3.0 for c in centers):
                centers.append(cand)
        for c in centers:
            mask |= _ball_mask(dims, c, r)
        vol = k * 4.0 / 3.0 * np.pi * r**3 / 1000.0
        expected = ExpectedFeatures(
            n_components=k,
            volume_cm3=(vol * 0.9, vol * 1.1),
            category="multiple" if k >= 3 else None,
        )
    elif spec.shape == "infiltrative_blob":
        # Curved tube: overlapping small balls along a circular arc.  The
        # bent shape has low solidity, landing it in the infiltrative rule.
        arc_r = min(spec.grid_dims) / 2.0 - 10.0
        tube_r = 2.5
        mask = np.zeros(dims, dtype=bool)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        for theta in np.linspace(0.0, 1.5 * np.pi, 80):
            c = (
                center[0] + arc_r * np.cos(theta + phase),
                center[1] + arc_r * np.sin(theta + phase),
                center[2],
            )
            mask |= _ball_mask(dims, c, tube_r)
        expected = ExpectedFeatures(
            n_components=1, category="infiltrative_single"
        )
    else:
        raise ValidationError(f"unknown phantom shape {spec.shape!r}")

    _check_fits(mask)
    return mask, expected


def _shift_mask(mask: np.ndarray, t: int, axis: int) -> np.ndarray | None:
    """Translate without wrap; None when foreground would leave the grid."""
    if t == 0:
        return mask.copy()
    out = np.zeros_like(mask)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    if t > 0:
        lost = [slice(None)] * 3
        lost[axis] = slice(mask.shape[axis] - t, None)
        if mask[tuple(lost)].any():
            return None
        src[axis] = slice(0, mask.shape[axis] - t)
        dst[axis] = slice(t, None)
    else:
        lost = [slice(None)] * 3
        lost[axis] = slice(0, -t)
        if mask[tuple(lost)].any():
            return None
        src[axis] = slice(-t, None)
        dst[axis] = slice(0, mask.shape[axis] + t)
    out[tuple(dst)] = mask[tuple(src)]
    return out


def degrade_to_dice(
    gt_lesion: np.ndarray, target: float, method: str = "shift"
) -> tuple[np.ndarray, float, list[str]]:
    """Derive a degraded predicted mask whose Dice against gt is near target.

    Returns (mask, achieved_dice, flags).  Callers must assert against the
    achieved value, not the request; a "nearest-achievable" flag marks
    targets the discrete steps cannot hit within 0.025.
    """
    gt_lesion = np.asarray(gt_lesion, dtype=bool)
    if not (0.0 < target <= 1.0):
        raise ValidationError(f"target Dice must be in (0, 1], got {target}")
    if not gt_lesion.any():
        raise ValidationError("cannot degrade an empty lesion")
    if target == 1.0:
        return gt_lesion.copy(), 1.0, []
    flags: list[str] = []
    if method == "shift":
        # Shift along the axis with the most room, one voxel at a time;
        # Dice decreases monotonically with |t|.
        idx = np.argwhere(gt_lesion)
        room = [
            gt_lesion.shape[ax] - 1 - idx[:, ax].max()
            for ax in range(3)
        ]
        axis = int(np.argmax(room))
        best = (gt_lesion.copy(), 1.0)
        for t in range(1, room[axis] + 1):
            shifted = _shift_mask(gt_lesion, t, axis)
            if shifted is None:
                break
            d = _mask_dice(gt_lesion, shifted)
            if abs(d - target) < abs(best[1] - target):
                best = (shifted, d)
            if d < target:
                break
        else:
            if best[1] > target:
                flags.append("nearest-achievable")
        mask, achieved = best
    elif method == "erode":
        mask = gt_lesion.copy()
        achieved = 1.0
        while achieved > target:
            eroded = ndimage.binary_erosion(mask)
            achieved = _mask_dice(gt_lesion, eroded)
            mask = eroded
            if not mask.any():
                flags.append("eroded-to-empty")
                break
    else:
        raise ValidationError(f"unknown degrade method {method!r}")
    if abs(achieved - target) > 0.025 and "nearest-achievable" not in flags:
        flags.append("nearest-achievable")
    return mask, achieved, flags


def _intensity(labels: np.ndarray, sequence: str, rng: np.random.Generator) -> np.ndarray:
    means = _CLASS_MEANS[sequence]
    out = np.zeros(labels.shape, dtype=np.float64)
    for cls, mean in means.items():
        out[labels == cls] = mean
    noise = ndimage.gaussian_filter(rng.normal(0.0, _NOISE_SD, labels.shape), 1.0)
    out[labels > 0] += noise[labels > 0]
    return np.clip(out, 0.0, None)


def _prob_from_labels(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    confidence = rng.uniform(0.8, 0.95)
    rest = (1.0 - confidence) / 3.0
    prob = np.full(labels.shape + (4,), rest, dtype=np.float64)
    for cls in range(4):
        prob[labels == cls, cls] = confidence
    return prob


def generate_case(spec: PhantomSpec) -> PhantomCase:
    """Build one synthetic case: three sequences, gt, prediction, probabilities."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    dims = tuple(int(d) for d in spec.grid_dims)
    spacing = tuple(float(s) for s in spec.spacing)
    affine = np.diag([spacing[0], spacing[1], spacing[2], 1.0])
    center = tuple((d - 1) / 2.0 for d in dims)

    brain = _ball_mask(dims, center, min(dims) / 2.0 - 3.0)
    gt = np.zeros(dims, dtype=np.uint8)
    gt[brain] = 1

    expected: ExpectedFeatures | None = None
    achieved: float | None = None
    flags: list[str] = []

    if spec.positive:
        lesion, expected = _lesion_mask(spec, rng)
        rim = ndimage.binary_dilation(lesion, iterations=2) & ~lesion & brain
        gt[rim] = 2
        gt[lesion] = 3
        if spec.target_dice is not None:
            pred_lesion, achieved, flags = degrade_to_dice(
                lesion, spec.target_dice, spec.degrade_method
            )
        else:
            pred_lesion, achieved = lesion.copy(), 1.0
        pred = gt.copy()
        pred[gt == 3] = 1
        pred[gt == 2] = 1
        pred[~brain & (pred > 0)] = 0
        pred_rim = ndimage.binary_dilation(pred_lesion, iterations=2) & ~pred_lesion & brain
        pred[pred_rim] = 2
        pred[pred_lesion] = 3
    else:
        if spec.nonenh_blob:
            blob = _ball_mask(dims, center, 6.0)
            gt[blob & brain] = 2
        pred = gt.copy()
        if spec.false_positive:
            offset = rng.uniform(-8.0, 8.0, size=3)
            spurious = _ball_mask(dims, np.array(center) + offset, 4.0)
            pred[spurious & brain] = 3

    gt_grid = LabelGrid(dims, spacing, affine, gt)
    pred_grid = LabelGrid(dims, spacing, affine, pred)
    prob_grid = ProbGrid(dims, spacing, affine, _prob_from_labels(pred, rng))
    sequences = {
        seq: VoxelGrid(dims, spacing, affine, _intensity(gt, seq, rng))
        for seq in SEQUENCES
    }
    return PhantomCase(
        spec=spec,
        sequences=sequences,
        gt=gt_grid,
        pred=pred_grid,
        prob=prob_grid,
        expected=expected,
        achieved_dice=achieved,
        flags=flags,
    )


def _case_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence((base_seed, index)).generate_state(1, np.uint64)[0])


def default_mix() -> list[PhantomSpec]:
    """Shape rotation covering all phantom kinds and volume bins."""
    return [
        PhantomSpec(shape="ball", radius=12.0),
        PhantomSpec(shape="cube", side=14.0),
        PhantomSpec(shape="ball", radius=5.0),
        PhantomSpec(shape="ellipsoid", semi_axes=(18.0, 8.0, 8.0)),
        PhantomSpec(shape="multi_ball", count=3, radius=5.0),
        PhantomSpec(shape="ball", radius=8.0),
        PhantomSpec(shape="infiltrative_blob"),
        PhantomSpec(shape="cube", side=9.0),
    ]


def generate_cohort(
    out_dir: str | Path,
    n_cases: int,
    seed: int = DEFAULT_SEED,
    mix: list[PhantomSpec] | None = None,
    negative_fraction: float = 0.25,
    false_positive_rate: float = 0.25,
    strata: list[tuple[str, float | None]] | None = None,
    train_fraction: float = 0.0,
    grid_dims: tuple[int, int, int] = (64, 64, 64),
    gzip_output: bool = True,
) -> Path:
    """Write a phantom cohort to disk and return the manifest path.

    ``strata`` assigns cohort labels with optional per-stratum target Dice,
    rotating over cases; every ``round(1/negative_fraction)``-th case is
    ground-truth negative.  Deterministic per seed including file bytes.
    """
    out_dir = Path(out_dir)
    (out_dir / "cases").mkdir(parents=True, exist_ok=True)
    mix = mix or default_mix()
    if strata is None:
        strata = [("phantom", None)]

    neg_every = round(1.0 / negative_fraction) if negative_fraction > 0 else 0
    n_train = int(round(train_fraction * n_cases))
    # Strata are assigned by a seeded permutation of a balanced round-robin,
    # so stratum membership does not synchronize with the negativity or
    # shape cycles below.
    assign_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA551)))
    perm = assign_rng.permutation(n_cases)
    rows = []
    fp_counter = 0
    pos_counter = 0
    for i in range(n_cases):
        case_id = f"case{i:04d}"
        cohort, target = strata[int(perm[i]) % len(strata)]
        positive = not (neg_every and i % neg_every == neg_every - 1)
        false_positive = False
        if positive:
            base = mix[pos_counter % len(mix)]
            pos_counter += 1
        else:
            base = mix[0]
            fp_counter += 1
            false_positive = (
                false_positive_rate > 0
                and fp_counter % max(1, round(1.0 / false_positive_rate)) == 0
            )
        spec = replace(
            base,
            grid_dims=grid_dims,
            target_dice=target if positive else None,
            positive=positive,
            false_positive=false_positive,
            nonenh_blob=not positive and i % 2 == 0,
            seed=_case_seed(seed, i),
            case_id=case_id,
            cohort=cohort,
            pathology=PATHOLOGIES[i % len(PATHOLOGIES)],
            country=COUNTRIES[i % len(COUNTRIES)],
            age=None if i % 7 == 6 else round(5.0 + (i * 13) % 80, 1),
            sex=None if i % 11 == 10 else ("male", "female")[i % 2],
            split="train" if i < n_train else "test",
        )
        case = generate_case(spec)
        ext = ".nii.gz" if gzip_output else ".nii"
        paths = {}
        for seq in SEQUENCES:
            paths[seq] = f"cases/{case_id}_{seq}{ext}"
            (out_dir / paths[seq]).write_bytes(
                write_nifti(case.sequences[seq], gzip_output=gzip_output)
            )
        paths["gt_labels"] = f"cases/{case_id}_gt{ext}"
        (out_dir / paths["gt_labels"]).write_bytes(
            write_nifti(case.gt, gzip_output=gzip_output)
        )
        paths["pred_labels"] = f"cases/{case_id}_pred{ext}"
        (out_dir / paths["pred_labels"]).write_bytes(
            write_nifti(case.pred, gzip_output=gzip_output)
        )
        paths["pred_prob"] = f"cases/{case_id}_prob{ext}"
        (out_dir / paths["pred_prob"]).write_bytes(
            write_nifti(case.prob, gzip_output=gzip_output)
        )
        rows.append(
            {
                "case_id": case_id,
                "cohort": spec.cohort,
                "pathology": spec.pathology,
                "country": spec.country,
                "age": "" if spec.age is None else repr(spec.age),
                "sex": spec.sex or "",
                "split": spec.split,
                "t1": paths["t1"],
                "t2": paths["t2"],
                "flair": paths["flair"],
                "t1ce": "",
                "gt_labels": paths["gt_labels"],
                "pred_labels": paths["pred_labels"],
                "pred_prob": paths["pred_prob"],
            }
        )

    manifest = out_dir / "manifest.csv"
    with manifest.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def manifest_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
