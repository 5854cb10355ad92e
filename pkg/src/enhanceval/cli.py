"""Command-line interface.

Subcommands: evaluate, radiomics, equity, detect-fit, uncertainty, phantom,
dedup, serve.  Every run is deterministic given its inputs and --seed; the
seed and manifest digest are echoed into each report.

Exit codes: 0 success, 1 validation, 2 I/O, 3 degenerate statistics.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path

import numpy as np

from . import DEFAULT_SEED, __version__
from .equity import ATTRIBUTES, build_report, emit_report
from .errors import (
    DegenerateStatisticsError,
    EngineError,
    InputOutputError,
    ValidationError,
)
from .metrics import CaseEvaluation
from .morphology import RadiomicFeatures, duplicate_scan
from .phantom import generate_cohort, manifest_digest
from .pipeline import load_label, load_manifest, run_cases, test_split
from .stats import fit_logistic
from .uncertainty import UncertaintySummary, entropy_map
from .volume_io import write_nifti


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, fieldnames, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames)
    writer.writeheader()
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def _provenance(args) -> dict:
    return {
        "tool": {"name": "enhanceval", "version": __version__},
        "seed": args.seed,
        "manifest_digest": manifest_digest(args.manifest),
    }


def _evaluated(args, with_features=True, with_uncertainty=True):
    records = load_manifest(args.manifest, strict=args.strict)
    results = run_cases(
        test_split(records),
        jobs=args.jobs,
        min_pred_volume_cm3=args.min_pred_volume_cm3,
        connectivity=args.connectivity,
        with_features=with_features,
        with_uncertainty=with_uncertainty,
    )
    return records, results


def cmd_evaluate(args) -> int:
    from .equity import cohort_summary

    records, results = _evaluated(args, with_features=False, with_uncertainty=True)
    out = Path(args.out)
    for r in results:
        _write_json(out / "cases" / f"{r.record.case_id}.json", r.evaluation.to_dict())
    _write_csv(
        out / "cases.csv",
        CaseEvaluation.CSV_FIELDS,
        [r.evaluation.to_csv_row() for r in results],
    )
    _write_json(
        out / "detection.json",
        {
            **_provenance(args),
            "cohort": cohort_summary(results, seed=args.seed, iterations=args.iterations),
        },
    )
    print(f"evaluated {len(results)} cases -> {out}")
    return 0


def cmd_radiomics(args) -> int:
    records, results = _evaluated(args, with_features=True, with_uncertainty=False)
    rows = []
    for r in results:
        if r.features is None:
            continue
        row = {"case_id": r.record.case_id}
        for key, value in r.features.to_dict().items():
            row[key] = ";".join(value) if key == "flags" else (
                repr(value) if isinstance(value, float) else value
            )
        rows.append(row)
    _write_csv(Path(args.out) / "radiomics.csv", RadiomicFeatures.CSV_FIELDS, rows)
    skipped = len(results) - len(rows)
    print(f"radiomic features for {len(rows)} gt-positive cases "
          f"({skipped} negative case(s) skipped) -> {args.out}")
    return 0


def cmd_equity(args) -> int:
    records, results = _evaluated(args)
    report = build_report(
        results,
        records,
        manifest_digest(args.manifest),
        seed=args.seed,
        iterations=args.iterations,
        attributes=tuple(args.attributes.split(",")) if args.attributes else ATTRIBUTES,
        age_preset=args.age_preset,
    )
    written = emit_report(report, args.out)
    print(f"equity report over {len(results)} cases -> " + ", ".join(map(str, written)))
    return 0


def cmd_detect_fit(args) -> int:
    records, results = _evaluated(args, with_features=False, with_uncertainty=False)
    positives = [r.evaluation for r in results if r.evaluation.gt_positive]
    detected = [e.enh_dice >= 0.3 for e in positives]
    volumes = [e.gt_enh_volume_cm3 for e in positives]
    fit = fit_logistic(detected, volumes)
    grid = np.logspace(
        np.log10(min(volumes)), np.log10(max(volumes)), num=100
    )
    curve = [
        {
            "volume_cm3": float(v),
            "p_detect": float(
                1.0 / (1.0 + np.exp(-(fit.intercept + fit.beta * np.log10(v))))
            ),
        }
        for v in grid
    ]
    _write_json(
        Path(args.out) / "detect_fit.json",
        {**_provenance(args), "fit": fit.to_dict(), "curve": curve},
    )
    print(
        f"detectability fit on {fit.n} lesions: beta={fit.beta:.3f} "
        f"OR/decade={fit.or_per_decade:.3f} -> {args.out}"
    )
    return 0


def cmd_uncertainty(args) -> int:
    records, results = _evaluated(args, with_features=False, with_uncertainty=True)
    rows = []
    n_without = 0
    out = Path(args.out)
    for r in results:
        if r.uncertainty is None:
            n_without += 1
            continue
        row = {"case_id": r.record.case_id}
        for key, value in r.uncertainty.to_dict().items():
            if key == "flags":
                row[key] = ";".join(value)
            elif isinstance(value, float):
                row[key] = repr(value)
            elif isinstance(value, bool):
                row[key] = int(value)
            else:
                row[key] = value
        rows.append(row)
    _write_csv(out / "uncertainty.csv", UncertaintySummary.CSV_FIELDS, rows)
    if args.export_entropy:
        from .pipeline import load_probability

        maps_dir = out / "entropy_maps"
        maps_dir.mkdir(parents=True, exist_ok=True)
        for r in results:
            if r.record.paths.get("pred_prob") is None:
                continue
            grid = entropy_map(load_probability(r.record))
            (maps_dir / f"{r.record.case_id}_entropy.nii.gz").write_bytes(
                write_nifti(grid, gzip_output=True)
            )
    print(
        f"uncertainty summaries for {len(rows)} cases "
        f"({n_without} without probability maps) -> {out}"
    )
    return 0


def cmd_phantom(args) -> int:
    strata = None
    if args.strata:
        strata = []
        for item in args.strata.split(","):
            name, _, target = item.partition(":")
            strata.append((name, float(target) if target else None))
    manifest = generate_cohort(
        args.out,
        args.n,
        seed=args.seed,
        negative_fraction=args.negative_fraction,
        false_positive_rate=args.fp_rate,
        strata=strata,
        train_fraction=args.train_fraction,
        grid_dims=(args.grid, args.grid, args.grid),
    )
    print(f"phantom cohort of {args.n} cases -> {manifest}")
    return 0


def cmd_dedup(args) -> int:
    records = load_manifest(args.manifest, strict=args.strict)
    masks = []
    for record in test_split(records):
        gt = load_label(record, "gt_labels")
        masks.append((record.case_id, gt.class_mask(3)))
    result = duplicate_scan(masks, threshold=args.threshold)
    _write_csv(
        Path(args.out) / "dedup.csv",
        ("case_a", "case_b", "r"),
        [
            {"case_a": p.case_a, "case_b": p.case_b, "r": repr(p.r)}
            for p in result.flagged
        ],
    )
    print(
        f"duplicate scan over {len(masks)} masks: {len(result.flagged)} flagged pair(s), "
        f"{len(result.excluded)} excluded -> {args.out}"
    )
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .reader_study import create_app

    app = create_app(
        args.manifest,
        args.journal_dir,
        bearer_token=args.bearer_token,
        min_pred_volume_cm3=args.min_pred_volume_cm3,
    )
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


def _add_common(parser: argparse.ArgumentParser, manifest: bool = True) -> None:
    if manifest:
        parser.add_argument("--manifest", required=True, help="cohort manifest (CSV or JSON)")
        parser.add_argument("--strict", action="store_true",
                            help="check all referenced files exist up front")
    parser.add_argument("--seed", type=int, default=DEFAULT_SEED,
                        help=f"run seed (default {DEFAULT_SEED}), echoed into reports")


def _add_eval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel case workers")
    parser.add_argument("--min-pred-volume-cm3", type=float, default=0.0,
                        dest="min_pred_volume_cm3",
                        help="predicted enhancing volume required to call a case positive")
    parser.add_argument("--connectivity", type=int, default=26, choices=(6, 18, 26))
    parser.add_argument("--iterations", type=int, default=1000,
                        help="bootstrap iterations")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enhanceval",
        description="Evaluation engine for enhancing-tumour predictions "
        "from non-contrast MRI",
    )
    parser.add_argument("--version", action="version", version=f"enhanceval {__version__}")
    parser.add_argument("--json-errors", action="store_true",
                        help="emit machine-readable JSON errors on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("evaluate", help="per-case metrics + cohort detection")
    _add_common(p)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("radiomics", help="shape features and categories (gt lesions)")
    _add_common(p)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_radiomics)

    p = sub.add_parser("equity", help="stratified report + equity tests")
    _add_common(p)
    _add_eval_flags(p)
    p.add_argument("--attributes", default="",
                   help=f"comma-separated attributes (default: {','.join(ATTRIBUTES)})")
    p.add_argument("--age-preset", default="paper", choices=("paper", "le30"))
    p.set_defaults(func=cmd_equity)

    p = sub.add_parser("detect-fit", help="logistic detectability-vs-volume fit")
    _add_common(p)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_detect_fit)

    p = sub.add_parser("uncertainty", help="probability-map summaries")
    _add_common(p)
    _add_eval_flags(p)
    p.add_argument("--export-entropy", action="store_true",
                   help="also write per-case entropy maps as NIfTI")
    p.set_defaults(func=cmd_uncertainty)

    p = sub.add_parser("phantom", help="generate a synthetic cohort")
    _add_common(p, manifest=False)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True, help="number of cases")
    p.add_argument("--negative-fraction", type=float, default=0.25)
    p.add_argument("--fp-rate", type=float, default=0.25,
                   help="fraction of negative cases given a spurious prediction")
    p.add_argument("--strata", default="",
                   help="cohort strata with optional target Dice, e.g. 'A:0.8,B:0.4'")
    p.add_argument("--train-fraction", type=float, default=0.0)
    p.add_argument("--grid", type=int, default=64, help="cubic grid size in voxels")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("dedup", help="flag near-duplicate lesion masks")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.95)
    p.set_defaults(func=cmd_dedup)

    p = sub.add_parser("serve", help="run the reader-study service")
    _add_common(p)
    p.add_argument("--journal-dir", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--bearer-token", default=None)
    p.add_argument("--min-pred-volume-cm3", type=float, default=0.0,
                   dest="min_pred_volume_cm3")
    p.set_defaults(func=cmd_serve)

    return parser


def _exit_code(exc: EngineError) -> int:
    if isinstance(exc, DegenerateStatisticsError):
        return 3
    if isinstance(exc, InputOutputError):
        return 2
    return 1


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EngineError as exc:
        if args.json_errors:
            print(
                json.dumps({"code": type(exc).__name__, "message": str(exc)}),
                file=sys.stderr,
            )
        else:
            print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
