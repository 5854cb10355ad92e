"""Cohort ingestion: manifest parsing and per-case evaluation fan-out.

A manifest is a flat CSV or JSON table binding case metadata to image,
label, and probability files (paths relative to the manifest).  Columns:

    case_id,cohort,pathology,country,age,sex,split,
    t1,t2,flair,t1ce,gt_labels,pred_labels,pred_prob

``age``, ``sex``, ``t1ce``, ``pred_labels`` and ``pred_prob`` may be empty;
unknown columns are preserved as opaque attributes.
"""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InputOutputError, ValidationError
from .metrics import CaseEvaluation, evaluate_case
from .morphology import RadiomicFeatures, radiomic_profile
from .uncertainty import UncertaintySummary, summarize_case
from .volume_io import LabelGrid, ProbGrid, VoxelGrid, parse_nifti

MANDATORY_COLUMNS = (
    "case_id",
    "cohort",
    "pathology",
    "country",
    "split",
    "t1",
    "t2",
    "flair",
    "gt_labels",
)
OPTIONAL_COLUMNS = ("age", "sex", "t1ce", "pred_labels", "pred_prob")
PATH_COLUMNS = ("t1", "t2", "flair", "t1ce", "gt_labels", "pred_labels", "pred_prob")


@dataclass
class CaseRecord:
    case_id: str
    cohort: str
    pathology: str
    country: str
    age: float | None
    sex: str | None
    split: str
    paths: dict[str, Path | None]
    extras: dict[str, str] = field(default_factory=dict)


def _parse_age(value, case_id: str) -> float | None:
    if value is None or value == "":
        return None
    try:
        age = float(value)
    except (TypeError, ValueError):
        raise ValidationError(f"case {case_id!r}: unparseable age {value!r}")
    if age < 0:
        raise ValidationError(f"case {case_id!r}: negative age {age}")
    return age


def _parse_sex(value, case_id: str) -> str | None:
    if value is None or value == "":
        return None
    if value not in ("male", "female"):
        raise ValidationError(
            f"case {case_id!r}: sex must be 'male' or 'female', got {value!r}"
        )
    return value


def _record_from_row(row: dict, base: Path) -> CaseRecord:
    case_id = str(row.get("case_id", "")).strip()
    if not case_id:
        raise ValidationError("manifest row with empty case_id")
    split = row.get("split")
    if split not in ("train", "test"):
        raise ValidationError(
            f"case {case_id!r}: split must be 'train' or 'test', got {split!r}"
        )
    paths: dict[str, Path | None] = {}
    for col in PATH_COLUMNS:
        value = row.get(col) or None
        if value is None and col in MANDATORY_COLUMNS:
            raise ValidationError(f"case {case_id!r}: missing {col} path")
        paths[col] = (base / value) if value else None
    known = set(MANDATORY_COLUMNS) | set(OPTIONAL_COLUMNS)
    extras = {
        k: str(v) for k, v in row.items() if k not in known and v not in (None, "")
    }
    return CaseRecord(
        case_id=case_id,
        cohort=str(row["cohort"]),
        pathology=str(row["pathology"]),
        country=str(row["country"]),
        age=_parse_age(row.get("age"), case_id),
        sex=_parse_sex(row.get("sex"), case_id),
        split=split,
        paths=paths,
        extras=extras,
    )


def load_manifest(path: str | Path, strict: bool = False) -> list[CaseRecord]:
    """Load and validate a cohort manifest (CSV or JSON).

    With ``strict`` every referenced file is checked for existence up front;
    otherwise missing files surface on first use.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputOutputError(f"cannot read manifest {path}: {exc}") from exc
    base = path.parent

    if path.suffix.lower() == ".json":
        rows = json.loads(text)
        if not isinstance(rows, list):
            raise ValidationError("JSON manifest must be a list of objects")
        header = set(rows[0]) if rows else set(MANDATORY_COLUMNS)
    else:
        reader = csv.DictReader(text.splitlines())
        header = set(reader.fieldnames or [])
        rows = list(reader)

    missing = [c for c in MANDATORY_COLUMNS if c not in header]
    if missing:
        raise ValidationError(f"manifest is missing mandatory columns: {missing}")

    records = []
    seen: set[str] = set()
    for row in rows:
        record = _record_from_row(row, base)
        if record.case_id in seen:
            raise ValidationError(f"duplicate case_id {record.case_id!r} in manifest")
        seen.add(record.case_id)
        records.append(record)

    if strict:
        for record in records:
            for col, p in record.paths.items():
                if p is not None and not p.is_file():
                    raise InputOutputError(
                        f"case {record.case_id!r}: {col} file not found: {p}"
                    )
    return records


def _read(path: Path | None, what: str, case_id: str) -> bytes:
    if path is None:
        raise ValidationError(f"case {case_id!r} has no {what} file")
    try:
        return path.read_bytes()
    except OSError as exc:
        raise InputOutputError(
            f"case {case_id!r}: cannot read {what} at {path}: {exc}"
        ) from exc


def load_label(record: CaseRecord, which: str) -> LabelGrid:
    return parse_nifti(_read(record.paths[which], which, record.case_id), "label")


def load_intensity(record: CaseRecord, which: str) -> VoxelGrid:
    return parse_nifti(_read(record.paths[which], which, record.case_id), "intensity")


def load_probability(record: CaseRecord) -> ProbGrid:
    return parse_nifti(
        _read(record.paths["pred_prob"], "pred_prob", record.case_id), "probability"
    )


@dataclass
class CaseResult:
    record: CaseRecord
    evaluation: CaseEvaluation
    features: RadiomicFeatures | None
    uncertainty: UncertaintySummary | None


def run_case(
    record: CaseRecord,
    min_pred_volume_cm3: float = 0.0,
    connectivity: int = 26,
    with_features: bool = True,
    with_uncertainty: bool = True,
) -> CaseResult:
    """Evaluate one case: metrics, gt radiomics, uncertainty summary."""
    gt = load_label(record, "gt_labels")
    pred = load_label(record, "pred_labels")
    evaluation = evaluate_case(
        gt, pred, case_id=record.case_id, min_pred_volume_cm3=min_pred_volume_cm3
    )
    features = None
    if with_features and evaluation.gt_positive:
        features = radiomic_profile(
            gt.class_mask(3), gt.spacing, connectivity=connectivity
        )
    unc = None
    if with_uncertainty and record.paths.get("pred_prob") is not None:
        prob = load_probability(record)
        unc = summarize_case(prob, pred, gt.intracranial_mask())
    return CaseResult(
        record=record, evaluation=evaluation, features=features, uncertainty=unc
    )


def run_cases(
    records: list[CaseRecord],
    jobs: int = 1,
    min_pred_volume_cm3: float = 0.0,
    connectivity: int = 26,
    with_features: bool = True,
    with_uncertainty: bool = True,
) -> list[CaseResult]:
    """Evaluate many cases (parallel across cases), sorted by case_id."""

    def work(record: CaseRecord) -> CaseResult:
        return run_case(
            record,
            min_pred_volume_cm3=min_pred_volume_cm3,
            connectivity=connectivity,
            with_features=with_features,
            with_uncertainty=with_uncertainty,
        )

    if jobs <= 1:
        results = [work(r) for r in records]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, records))
    return sorted(results, key=lambda r: r.record.case_id)


def test_split(records: list[CaseRecord]) -> list[CaseRecord]:
    return [r for r in records if r.split == "test"]
