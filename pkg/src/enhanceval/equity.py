"""Stratified performance/uncertainty reporting across patient attributes.

Strata are disjoint within one attribute; cases missing the attribute are
excluded and counted.  Lesion-level metrics (Dice, radiomic category,
volume bins) cover ground-truth-positive cases only; detection metrics use
every case.  All bootstraps run 1000 iterations from seeds derived
deterministically from the run seed and the stratum name, so reports are
byte-identical across runs and stratum orderings.
"""

from __future__ import annotations

import csv
import io
import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DegenerateStatisticsError, InputOutputError
from .metrics import (
    CLASSES,
    ConfusionCounts,
    DetectionSummary,
    balanced_accuracy,
    cohort_detection,
    f1,
    precision,
    recall,
    roc_pr,
)
from .pipeline import CaseResult
from .stats import (
    BootstrapSummary,
    TestResult,
    anova_oneway,
    apply_bonferroni,
    bland_altman,
    bootstrap_multi,
    chi_square_2xk,
    levene,
    ols_r2,
    welch_t,
)

SCHEMA_VERSION = 1

ATTRIBUTES = (
    "cohort",
    "pathology",
    "country",
    "age_bin",
    "sex",
    "volume_bin",
    "category",
)

# Lower-inclusive bin edges.
VOLUME_BINS = (
    (0.0, 0.5, "<0.5"),
    (0.5, 1.0, "0.5-1"),
    (1.0, 5.0, "1-5"),
    (5.0, 10.0, "5-10"),
    (10.0, math.inf, ">10"),
)
AGE_PRESETS = {
    "paper": (
        (0.0, 21.0, "0-20"),
        (21.0, 41.0, "21-40"),
        (41.0, 61.0, "41-60"),
        (61.0, 81.0, "61-80"),
        (81.0, math.inf, "81+"),
    ),
    "le30": ((0.0, 31.0, "0-30"), (31.0, math.inf, "31+")),
}


def _bin_label(value: float, bins) -> str:
    for lo, hi, label in bins:
        if lo <= value < hi:
            return label
    return bins[-1][2]


def stratum_seed(base_seed: int, attribute: str, stratum: str) -> int:
    """Stable per-stratum bootstrap seed (crc32 of the stratum name)."""
    return (int(base_seed) + zlib.crc32(f"{attribute}/{stratum}".encode())) % 2**63


def _pair_counts(pairs: np.ndarray) -> ConfusionCounts:
    g = pairs[:, 0].astype(bool)
    p = pairs[:, 1].astype(bool)
    tp = int(np.count_nonzero(g & p))
    fp = int(np.count_nonzero(~g & p))
    fn = int(np.count_nonzero(g & ~p))
    return ConfusionCounts(tp=tp, fp=fp, tn=len(g) - tp - fp - fn, fn=fn)


_DETECTION_REDUCERS = {
    "balanced_accuracy": lambda pairs: balanced_accuracy(_pair_counts(pairs)),
    "sensitivity": lambda pairs: recall(_pair_counts(pairs)),
    "specificity": lambda pairs: (
        lambda c: c.tn / (c.tn + c.fp) if c.tn + c.fp else 0.0
    )(_pair_counts(pairs)),
    "precision": lambda pairs: precision(_pair_counts(pairs)),
    "f1": lambda pairs: f1(_pair_counts(pairs)),
}


def _mean_sd(values: list[float]) -> tuple[float | None, float | None]:
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return float(arr.mean()), sd


@dataclass
class StratumReport:
    attribute: str
    stratum: str
    n: int
    detection: DetectionSummary
    detection_bootstrap: dict[str, BootstrapSummary] | None
    mean_dice: float | None
    dice_sd: float | None
    success_rate: float | None
    mean_max_enh_prob: float | None
    max_enh_prob_sd: float | None
    flags: list[str] = field(default_factory=list)
    # per-case samples, kept for the equity tests; not serialized
    dice_values: list[float] = field(default_factory=list, repr=False)
    max_enh_prob_values: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "stratum": self.stratum,
            "n": self.n,
            "detection": self.detection.to_dict(),
            "detection_bootstrap": {
                k: v.to_dict() for k, v in self.detection_bootstrap.items()
            }
            if self.detection_bootstrap
            else None,
            "mean_dice": self.mean_dice,
            "dice_sd": self.dice_sd,
            "success_rate": self.success_rate,
            "mean_max_enh_prob": self.mean_max_enh_prob,
            "max_enh_prob_sd": self.max_enh_prob_sd,
            "flags": self.flags,
        }


@dataclass
class AttributeReport:
    attribute: str
    strata: list[StratumReport]
    excluded_missing: int

    def to_dict(self) -> dict:
        return {
            "attribute": self.attribute,
            "strata": [s.to_dict() for s in self.strata],
            "excluded_missing": self.excluded_missing,
        }


def _attribute_value(result: CaseResult, attribute: str, age_preset: str):
    record = result.record
    if attribute == "cohort":
        return record.cohort
    if attribute == "pathology":
        return record.pathology
    if attribute == "country":
        return record.country
    if attribute == "sex":
        return record.sex
    if attribute == "age_bin":
        if record.age is None:
            return None
        return _bin_label(record.age, AGE_PRESETS[age_preset])
    if attribute == "volume_bin":
        if not result.evaluation.gt_positive:
            return None
        return _bin_label(result.evaluation.gt_enh_volume_cm3, VOLUME_BINS)
    if attribute == "category":
        if result.features is None:
            return None
        return result.features.category
    raise ValueError(f"unknown attribute {attribute!r}")


def _stratum_order(attribute: str, labels: list[str], age_preset: str) -> list[str]:
    if attribute == "volume_bin":
        order = [label for *_, label in VOLUME_BINS]
        return [l for l in order if l in labels]
    if attribute == "age_bin":
        order = [label for *_, label in AGE_PRESETS[age_preset]]
        return [l for l in order if l in labels]
    return sorted(labels)


def stratify(
    results: list[CaseResult],
    attribute: str,
    seed: int = 0,
    iterations: int = 1000,
    age_preset: str = "paper",
) -> AttributeReport:
    """Per-stratum detection, Dice, and uncertainty summaries for one attribute."""
    groups: dict[str, list[CaseResult]] = {}
    excluded = 0
    for result in results:
        value = _attribute_value(result, attribute, age_preset)
        if value is None:
            excluded += 1
        else:
            groups.setdefault(str(value), []).append(result)

    strata = []
    for label in _stratum_order(attribute, list(groups), age_preset):
        members = groups[label]
        evals = [m.evaluation for m in members]
        detection = cohort_detection(evals)
        flags = list(detection.flags)
        boot = None
        if len(members) >= 2:
            pairs = np.array(
                [(e.gt_positive, e.pred_positive) for e in evals], dtype=bool
            )
            boot = bootstrap_multi(
                pairs,
                _DETECTION_REDUCERS,
                iterations=iterations,
                seed=stratum_seed(seed, attribute, label),
            )
        else:
            flags.append("insufficient-n")
        dice_values = [e.enh_dice for e in evals if e.gt_positive]
        mean_dice, dice_sd = _mean_sd(dice_values)
        prob_values = [
            m.uncertainty.max_enh_prob for m in members if m.uncertainty is not None
        ]
        mean_prob, prob_sd = _mean_sd(prob_values)
        strata.append(
            StratumReport(
                attribute=attribute,
                stratum=label,
                n=len(members),
                detection=detection,
                detection_bootstrap=boot,
                mean_dice=mean_dice,
                dice_sd=dice_sd,
                success_rate=detection.success_rate,
                mean_max_enh_prob=mean_prob,
                max_enh_prob_sd=prob_sd,
                flags=flags,
                dice_values=dice_values,
                max_enh_prob_values=prob_values,
            )
        )
    return AttributeReport(attribute=attribute, strata=strata, excluded_missing=excluded)


def equity_tests(strata: list[StratumReport]) -> list[TestResult]:
    """Classical tests for performance variation across one attribute's strata.

    One-way ANOVA on per-case Dice, Levene on per-case maximal enhancing
    probability, and Welch's t on Dice for binary attributes.  Bonferroni
    correction is applied by the caller over the whole emitted family.
    """
    eligible = [s for s in strata if s.n >= 2]
    if len(eligible) < 2:
        raise DegenerateStatisticsError(
            f"need >= 2 strata with n >= 2, got {len(eligible)}"
        )
    attribute = eligible[0].attribute
    results = []
    dice_groups = [s.dice_values for s in eligible if len(s.dice_values) >= 2]
    if len(dice_groups) >= 2:
        try:
            r = anova_oneway(dice_groups)
            r.test_name = "anova_dice"
            r.attribute = attribute
            results.append(r)
            if len(dice_groups) == 2:
                t = welch_t(dice_groups[0], dice_groups[1])
                t.test_name = "welch_t_dice"
                t.attribute = attribute
                results.append(t)
        except DegenerateStatisticsError:
            pass
    prob_groups = [
        s.max_enh_prob_values for s in eligible if len(s.max_enh_prob_values) >= 2
    ]
    if len(prob_groups) >= 2:
        try:
            r = levene(prob_groups)
            r.test_name = "levene_max_enh_prob"
            r.attribute = attribute
            results.append(r)
        except DegenerateStatisticsError:
            pass
    return results


# ---------------------------------------------------------------------------
# Cohort summary and full report
# ---------------------------------------------------------------------------


def _per_class_means(results: list[CaseResult]) -> dict:
    """Mean +/- SD of voxel metrics per class.

    Class 3 aggregates over ground-truth-positive cases (lesion metrics are
    meaningless on negatives); classes 1 and 2 over cases where the class
    occurs at all.
    """
    out = {}
    for cls in CLASSES:
        rows = []
        for r in results:
            m = r.evaluation.per_class[cls]
            if cls == 3:
                if r.evaluation.gt_positive:
                    rows.append(m)
            elif "absent-in-both" not in m.flags:
                rows.append(m)
        summary = {}
        for metric in ("dice", "balanced_accuracy", "precision", "recall", "f1"):
            mean, sd = _mean_sd([getattr(m, metric) for m in rows])
            summary[metric] = {"mean": mean, "sd": sd}
        summary["n"] = len(rows)
        out[str(cls)] = summary
    return out


def cohort_summary(
    results: list[CaseResult], seed: int = 0, iterations: int = 1000
) -> dict:
    evals = [r.evaluation for r in results]
    detection = cohort_detection(evals)
    out: dict = {
        "n_evaluated": len(results),
        "detection": detection.to_dict(),
        "per_class_voxel_metrics": _per_class_means(results),
    }
    if len(results) >= 2:
        pairs = np.array([(e.gt_positive, e.pred_positive) for e in evals], dtype=bool)
        boot = bootstrap_multi(
            pairs,
            _DETECTION_REDUCERS,
            iterations=iterations,
            seed=stratum_seed(seed, "cohort_detection", "all"),
        )
        out["detection_bootstrap"] = {k: v.to_dict() for k, v in boot.items()}

    positives = [e for e in evals if e.gt_positive]
    volume_agreement = None
    if len(positives) >= 2:
        gt_vols = [e.gt_enh_volume_cm3 for e in positives]
        pred_vols = [e.pred_enh_volume_cm3 for e in positives]
        try:
            slope, intercept, r2 = ols_r2(gt_vols, pred_vols)
            mean_diff, loa_lo, loa_hi = bland_altman(pred_vols, gt_vols)
            volume_agreement = {
                "slope": slope,
                "intercept": intercept,
                "r2": r2,
                "bland_altman": {
                    "mean_diff": mean_diff,
                    "loa_lo": loa_lo,
                    "loa_hi": loa_hi,
                },
                "n": len(positives),
            }
        except DegenerateStatisticsError:
            volume_agreement = None
    out["volume_agreement"] = volume_agreement

    scores = [
        (r.uncertainty.max_enh_prob, r.evaluation.gt_positive)
        for r in results
        if r.uncertainty is not None
    ]
    roc = None
    if scores:
        try:
            curves = roc_pr(scores)
            roc = {
                "auroc": curves.auroc,
                "average_precision": curves.average_precision,
                "n": len(scores),
            }
        except DegenerateStatisticsError:
            roc = None
    out["roc"] = roc
    return out


def split_balance(records) -> dict | None:
    """Train/test balance checks on age, sex, and site (None without a train split)."""
    train = [r for r in records if r.split == "train"]
    test = [r for r in records if r.split == "test"]
    if not train or not test:
        return None
    out: dict = {
        "n_train": len(train),
        "n_test": len(test),
        "train_fraction": len(train) / (len(train) + len(test)),
    }
    tests: list[TestResult] = []
    ages_train = [r.age for r in train if r.age is not None]
    ages_test = [r.age for r in test if r.age is not None]
    if len(ages_train) >= 2 and len(ages_test) >= 2:
        t = welch_t(ages_train, ages_test)
        t.test_name = "welch_t_age"
        t.attribute = "split"
        tests.append(t)
    for attr in ("sex", "cohort"):
        labels = sorted(
            {getattr(r, attr) for r in records if getattr(r, attr) is not None}
        )
        if len(labels) >= 2:
            table = [
                [sum(1 for r in split if getattr(r, attr) == label) for label in labels]
                for split in (train, test)
            ]
            try:
                t = chi_square_2xk(table)
                t.test_name = f"chi_square_{attr}"
                t.attribute = "split"
                tests.append(t)
            except DegenerateStatisticsError:
                pass
    apply_bonferroni(tests)
    out["tests"] = [t.to_dict() for t in tests]
    return out


@dataclass
class EquityReport:
    seed: int
    iterations: int
    manifest_digest: str
    n_records: int
    n_train: int
    n_test: int
    cohort: dict
    attributes: list[AttributeReport]
    tests: list[TestResult]
    split_balance: dict | None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "tool": {"name": "enhanceval", "version": __version__},
            "seed": self.seed,
            "iterations": self.iterations,
            "manifest": {
                "digest": self.manifest_digest,
                "n_records": self.n_records,
                "n_train": self.n_train,
                "n_test": self.n_test,
            },
            "cohort": self.cohort,
            "attributes": [a.to_dict() for a in self.attributes],
            "tests": [t.to_dict() for t in self.tests],
            "split_balance": self.split_balance,
        }


def build_report(
    results: list[CaseResult],
    records,
    manifest_digest: str,
    seed: int = 0,
    iterations: int = 1000,
    attributes=ATTRIBUTES,
    age_preset: str = "paper",
) -> EquityReport:
    attribute_reports = [
        stratify(results, a, seed=seed, iterations=iterations, age_preset=age_preset)
        for a in attributes
    ]
    tests: list[TestResult] = []
    for report in attribute_reports:
        try:
            tests.extend(equity_tests(report.strata))
        except DegenerateStatisticsError:
            continue
    apply_bonferroni(tests)
    return EquityReport(
        seed=seed,
        iterations=iterations,
        manifest_digest=manifest_digest,
        n_records=len(records),
        n_train=sum(1 for r in records if r.split == "train"),
        n_test=sum(1 for r in records if r.split == "test"),
        cohort=cohort_summary(results, seed=seed, iterations=iterations),
        attributes=attribute_reports,
        tests=tests,
        split_balance=split_balance(records),
    )


# ---------------------------------------------------------------------------
# Emission: report.json, tables/*.csv, report.md
# ---------------------------------------------------------------------------

_CSV_FIELDS = (
    "attribute",
    "stratum",
    "n",
    "balanced_accuracy",
    "ba_sd",
    "ba_ci_lo",
    "ba_ci_hi",
    "sensitivity",
    "specificity",
    "precision",
    "f1",
    "mean_dice",
    "dice_sd",
    "success_rate",
    "mean_max_enh_prob",
    "max_enh_prob_sd",
    "flags",
)


def _csv_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _stratum_csv_row(s: StratumReport) -> dict:
    boot = s.detection_bootstrap or {}
    ba = boot.get("balanced_accuracy")
    return {
        "attribute": s.attribute,
        "stratum": s.stratum,
        "n": s.n,
        "balanced_accuracy": _csv_value(s.detection.balanced_accuracy),
        "ba_sd": _csv_value(ba.sd if ba else None),
        "ba_ci_lo": _csv_value(ba.ci_lo if ba else None),
        "ba_ci_hi": _csv_value(ba.ci_hi if ba else None),
        "sensitivity": _csv_value(s.detection.sensitivity),
        "specificity": _csv_value(s.detection.specificity),
        "precision": _csv_value(s.detection.precision),
        "f1": _csv_value(s.detection.f1),
        "mean_dice": _csv_value(s.mean_dice),
        "dice_sd": _csv_value(s.dice_sd),
        "success_rate": _csv_value(s.success_rate),
        "mean_max_enh_prob": _csv_value(s.mean_max_enh_prob),
        "max_enh_prob_sd": _csv_value(s.max_enh_prob_sd),
        "flags": ";".join(s.flags),
    }


def _fmt(value, digits=3) -> str:
    if value is None:
        return "-"
    return f"{value:.{digits}f}"


def _markdown(report: EquityReport) -> str:
    lines = [
        "# Equity report",
        "",
        f"- tool: enhanceval {__version__}",
        f"- seed: {report.seed}",
        f"- manifest digest: `{report.manifest_digest}`",
        f"- cases evaluated: {report.cohort['n_evaluated']} "
        f"(manifest: {report.n_records} records, {report.n_test} test)",
        "",
        "## Cohort detection",
        "",
    ]
    det = report.cohort["detection"]
    lines += [
        "| metric | value |",
        "| --- | --- |",
        f"| balanced accuracy | {_fmt(det['balanced_accuracy'])} |",
        f"| sensitivity | {_fmt(det['sensitivity'])} |",
        f"| specificity | {_fmt(det['specificity'])} |",
        f"| precision | {_fmt(det['precision'])} |",
        f"| F1 | {_fmt(det['f1'])} |",
        f"| success rate (Dice >= 0.3) | {_fmt(det['success_rate'])} |",
        "",
    ]
    for attr in report.attributes:
        lines += [f"## By {attr.attribute}", ""]
        if attr.excluded_missing:
            lines.append(
                f"_{attr.excluded_missing} case(s) excluded "
                f"(attribute missing or not applicable)._"
            )
            lines.append("")
        lines += [
            "| stratum | n | Dice (mean +/- SD) | success rate | BA | BA 95% CI |",
            "| --- | --- | --- | --- | --- | --- |",
        ]
        for s in attr.strata:
            boot = s.detection_bootstrap or {}
            ba = boot.get("balanced_accuracy")
            dice = (
                f"{_fmt(s.mean_dice)} +/- {_fmt(s.dice_sd)}"
                if s.mean_dice is not None
                else "-"
            )
            ci = f"[{_fmt(ba.ci_lo)}, {_fmt(ba.ci_hi)}]" if ba else "-"
            lines.append(
                f"| {s.stratum} | {s.n} | {dice} | {_fmt(s.success_rate)} "
                f"| {_fmt(s.detection.balanced_accuracy)} | {ci} |"
            )
        lines.append("")
    if report.tests:
        lines += [
            "## Tests",
            "",
            "| attribute | test | statistic | df | p | p (Bonferroni) |",
            "| --- | --- | --- | --- | --- | --- |",
        ]
        for t in report.tests:
            df = t.df if not isinstance(t.df, tuple) else f"{t.df[0]}, {t.df[1]}"
            lines.append(
                f"| {t.attribute} | {t.test_name} | {_fmt(t.statistic)} | {df} "
                f"| {_fmt(t.p, 6)} | {_fmt(t.p_bonferroni, 6)} |"
            )
        lines.append("")
    return "\n".join(lines)


def emit_report(
    report: EquityReport,
    out_dir: str | Path,
    formats: tuple[str, ...] = ("json", "csv", "markdown"),
) -> list[Path]:
    """Write report.json, tables/*.csv, and report.md; returns written paths."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputOutputError(f"cannot create output directory {out_dir}: {exc}")
    written = []
    if "json" in formats:
        path = out_dir / "report.json"
        path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        written.append(path)
    if "csv" in formats:
        tables = out_dir / "tables"
        tables.mkdir(exist_ok=True)
        for attr in report.attributes:
            path = tables / f"{attr.attribute}.csv"
            buf = io.StringIO()
            writer = csv.DictWriter(buf, fieldnames=_CSV_FIELDS)
            writer.writeheader()
            for s in attr.strata:
                writer.writerow(_stratum_csv_row(s))
            path.write_text(buf.getvalue())
            written.append(path)
    if "markdown" in formats:
        path = out_dir / "report.md"
        path.write_text(_markdown(report))
        written.append(path)
    return written
