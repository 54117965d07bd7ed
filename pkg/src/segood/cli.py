"""Command line interface: fit, eval, gate, synth.

Exit codes: 0 success, 1 validation error (bad flags or semantic value
constraints), 2 data error (missing/malformed/corrupt files, empty
datasets), 3 internal numerical error. All file outputs are written
atomically; reports are JSON and curves are CSV with floats printed at
17 significant digits so they round-trip exactly.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
import re
import sys
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np
import scipy

from . import __version__
from .bank import FitConfig, class_correlation, fit_bank, load_bank, save_bank
from .datasets import load_manifest
from .errors import (
    DataIOError,
    EmptyDatasetError,
    FormatError,
    IntegrityError,
    NumericalError,
    SchemaError,
    SegoodError,
    ValidationError,
)
from .evaluation import (
    DEFAULT_SWEEP_POINTS,
    RiskCoverageCurve,
    SweepPoint,
    evaluate_dataset,
)
from .gate import DEFAULT_MAX_RISK, DEFAULT_MIN_COVERAGE, SafetyRequirement, evaluate_gate
from .scoring import write_distance_map
from .synth import SynthSpec, generate
from ._util import atomic_write_text, fmt_float, sha256_of_json

CURVE_CSV_HEADER = ["threshold_index", "epsilon_mean", "risk_mean", "coverage_mean", "n_degenerate"]

REPORT_SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# Curve CSV


def write_curve_csv(path: Path | str, curve: RiskCoverageCurve) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_CSV_HEADER)
    for p in curve.points:
        writer.writerow(
            [p.threshold_index, fmt_float(p.epsilon), fmt_float(p.risk), fmt_float(p.coverage), p.n_degenerate]
        )
    atomic_write_text(path, buf.getvalue())


def read_curve_csv(path: Path | str) -> RiskCoverageCurve:
    """Rebuild a curve from its CSV. A point counts as degenerate when its
    mean coverage is exactly zero (no image accepted anything there)."""
    path = Path(path)
    try:
        text = path.read_text("utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot open curve file {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CURVE_CSV_HEADER:
        raise FormatError(
            f"{path}: not a curve CSV, expected header {','.join(CURVE_CSV_HEADER)}"
        )
    points = []
    for i, row in enumerate(rows[1:]):
        if len(row) != len(CURVE_CSV_HEADER):
            raise FormatError(f"{path}: row {i + 1} has {len(row)} fields, expected {len(CURVE_CSV_HEADER)}")
        try:
            t = int(row[0])
            epsilon, risk, coverage = float(row[1]), float(row[2]), float(row[3])
            n_degenerate = int(row[4])
        except ValueError as exc:
            raise FormatError(f"{path}: row {i + 1}: {exc}") from exc
        if t != i:
            raise FormatError(f"{path}: threshold_index {t} out of order at row {i + 1}")
        points.append(
            SweepPoint(
                threshold_index=t,
                epsilon=epsilon,
                risk=risk,
                coverage=coverage,
                degenerate=coverage == 0.0,
                n_degenerate=n_degenerate,
            )
        )
    if not points:
        raise FormatError(f"{path}: curve CSV has no rows")
    return RiskCoverageCurve(
        points=tuple(points),
        baseline_iou=1.0 - points[-1].risk,
        baseline_coverage=points[-1].coverage,
        n_images=None,
    )


def write_correlation_csv(path: Path | str, matrix, registry) -> None:
    """Correlation matrix as CSV. The first line names the basis; the
    diagonal is self-correlation and meant to be masked when rendered."""
    buf = io.StringIO()
    buf.write(f"# basis: {matrix.basis}; diagonal is self-correlation (mask when rendering)\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["class"] + list(registry.class_names))
    for i, name in enumerate(registry.class_names):
        row = [name]
        for v in matrix.values[i]:
            row.append("nan" if math.isnan(v) else fmt_float(v))
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# Helpers


def _safe_name(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", name) or "dataset"


def _finite_or_none(x: float | None):
    if x is None:
        return None
    return x if math.isfinite(x) else None


def _utc_now() -> str:
    # honor SOURCE_DATE_EPOCH so reports can be byte-reproducible
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is not None:
        try:
            return datetime.fromtimestamp(int(epoch), timezone.utc).isoformat(timespec="seconds")
        except (ValueError, OverflowError, OSError):
            pass
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# Commands


@click.group()
@click.version_option(version=__version__, prog_name="segood")
def cli():
    """Gaussian OOD scoring and risk-coverage safety evaluation for
    semantic segmentation softmax outputs."""


@cli.command("fit")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(path_type=Path), help="Training dataset manifest (JSON).")
@click.option("--out", "out_path", required=True, type=click.Path(path_type=Path), help="Output bank file (JSON).")
@click.option("--max-pixels", default=1_000_000, show_default=True, help="Dataset-wide pixel cap per class.")
@click.option("--max-per-image", default=10_000, show_default=True, help="Per-image pixel cap per class.")
@click.option("--ridge", default=1e-6, show_default=True, help="Relative ridge for covariance inversion.")
@click.option("--min-samples", default=None, type=int, help="Minimum pool size for a valid class (default: K+1).")
@click.option("--seed", default=0, show_default=True, help="Subsampling seed.")
@click.option("--correlation-out", default=None, type=click.Path(path_type=Path), help="Correlation CSV path (default: next to the bank).")
def cmd_fit(manifest_path, out_path, max_pixels, max_per_image, ridge, min_samples, seed, correlation_out):
    """Fit per-class Gaussians from a manifest and write the bank."""
    config = FitConfig(
        max_pixels_per_class=max_pixels,
        max_pixels_per_class_per_image=max_per_image,
        ridge_scale=ridge,
        min_samples_per_class=min_samples,
        rng_seed=seed,
    )
    manifest = load_manifest(manifest_path)
    bank = fit_bank(manifest, config)
    save_bank(bank, out_path)
    if correlation_out is None:
        correlation_out = out_path.with_name(out_path.stem + "_correlation.csv")
    matrix = class_correlation(bank)
    write_correlation_csv(correlation_out, matrix, bank.registry)
    n_valid = sum(g.valid for g in bank.gaussians)
    click.echo(f"bank written to {out_path} ({n_valid}/{bank.n_classes} classes valid)")
    click.echo(f"class correlation written to {correlation_out}")


@cli.command("eval")
@click.option("--bank", "bank_path", required=True, type=click.Path(path_type=Path), help="Fitted bank file.")
@click.option("--manifest", "manifest_paths", required=True, multiple=True, type=click.Path(path_type=Path), help="Evaluation manifest(s); repeatable.")
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path), help="Output directory for curves and the report.")
@click.option("--points", default=DEFAULT_SWEEP_POINTS, show_default=True, help="Threshold points per image sweep.")
@click.option("--abstain", default=0.5, show_default=True, help="Abstention threshold on the max softmax (0 disables).")
@click.option("--max-risk", default=DEFAULT_MAX_RISK, show_default=True, help="Risk ceiling of the safety requirement.")
@click.option("--min-coverage", default=DEFAULT_MIN_COVERAGE, show_default=True, help="Coverage floor of the safety requirement.")
@click.option("--auc-mode", default="pooled", show_default=True, type=click.Choice(["pooled", "per-image"]), help="Separability aggregation.")
@click.option("--auc-cap", default=10_000_000, show_default=True, help="Per-population subsample cap for the separability statistic.")
@click.option("--seed", default=0, show_default=True, help="Subsampling seed.")
@click.option("--export-distances", is_flag=True, help="Also write per-sample distance maps (NPY float32).")
def cmd_eval(bank_path, manifest_paths, out_dir, points, abstain, max_risk, min_coverage, auc_mode, auc_cap, seed, export_distances):
    """Evaluate dataset(s) against a bank: risk-coverage curves,
    separability and safety verdicts, consolidated into report.json."""
    # flag values are validated before any data is touched so they fail
    # with the validation exit code, not as a dataset error
    if not (0.0 <= abstain < 1.0):
        raise ValidationError(f"--abstain must be in [0, 1), got {abstain}")
    if points < 2:
        raise ValidationError(f"--points must be at least 2, got {points}")
    if auc_cap < 1:
        raise ValidationError(f"--auc-cap must be positive, got {auc_cap}")
    requirement = SafetyRequirement(max_risk=max_risk, min_coverage=min_coverage)
    bank = load_bank(bank_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    config = {
        "bank": str(bank_path),
        "manifests": [str(p) for p in manifest_paths],
        "points": points,
        "abstain_threshold": abstain,
        "max_risk": max_risk,
        "min_coverage": min_coverage,
        "auc_mode": auc_mode,
        "auc_subsample_cap": auc_cap,
        "seed": seed,
        "export_distances": bool(export_distances),
    }
    datasets = []
    n_failed = 0
    used_names: set[str] = set()
    for mpath in manifest_paths:
        label = str(mpath)
        try:
            manifest = load_manifest(mpath)
            label = manifest.name
            base = _safe_name(manifest.name)
            if base in used_names:
                base = f"{base}_{len(used_names)}"
            used_names.add(base)

            sink = None
            if export_distances:
                ddir = out_dir / "distances" / base
                ddir.mkdir(parents=True, exist_ok=True)
                sink = lambda entry, dmap: write_distance_map(ddir / f"{_safe_name(entry.sample_id)}.npy", dmap)

            result = evaluate_dataset(
                bank,
                manifest,
                n_points=points,
                abstain_threshold=abstain,
                auc_mode=auc_mode,
                auc_subsample_cap=auc_cap,
                seed=seed,
                distance_sink=sink,
            )
            curve_name = f"curve_{base}.csv"
            write_curve_csv(out_dir / curve_name, result.curve)
            verdict = evaluate_gate(result.curve, requirement)
            datasets.append(
                {
                    "name": manifest.name,
                    "location_tag": manifest.location_tag,
                    "status": "ok",
                    "n_images": result.n_images,
                    "n_excluded_images": result.n_excluded,
                    "warnings": list(result.warnings),
                    "baseline_iou": result.curve.baseline_iou,
                    "baseline_coverage": result.curve.baseline_coverage,
                    "auc": _finite_or_none(result.auc.value),
                    "auc_mode": result.auc.mode,
                    "auc_n_pos": result.auc.n_pos,
                    "auc_n_neg": result.auc.n_neg,
                    "auc_reason": result.auc.reason,
                    "risk_nonmonotone": result.risk_nonmonotone,
                    "risk_nonmonotone_index": result.risk_nonmonotone_index,
                    "curve_csv": curve_name,
                    "verdict": verdict.to_dict(),
                }
            )
            state = "PASS" if verdict.passed else "FAIL"
            auc_text = "n/a" if _finite_or_none(result.auc.value) is None else f"{result.auc.value:.4f}"
            click.echo(
                f"{manifest.name}: baseline IoU {result.curve.baseline_iou:.4f}, "
                f"AUC {auc_text}, {requirement.requirement_id} {state}"
            )
        except SegoodError as exc:
            n_failed += 1
            datasets.append(
                {
                    "name": label,
                    "status": "failed",
                    "error_type": type(exc).__name__,
                    "error": str(exc),
                }
            )
            click.echo(f"{label}: FAILED ({type(exc).__name__}: {exc})", err=True)
    report = {
        "schema": REPORT_SCHEMA_VERSION,
        "tool": {"name": "segood", "version": __version__},
        "bank": {"path": str(bank_path), "provenance": bank.provenance},
        "config": config,
        "config_hash": sha256_of_json(config),
        "requirement": {
            "id": requirement.requirement_id,
            "max_risk": requirement.max_risk,
            "min_coverage": requirement.min_coverage,
        },
        "datasets": datasets,
        "metadata": {
            "created_utc": _utc_now(),
            "versions": {
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
        },
    }
    report_path = out_dir / "report.json"
    atomic_write_text(report_path, json.dumps(report, indent=2, sort_keys=True) + "\n")
    click.echo(f"report written to {report_path}")
    if n_failed:
        raise _DataFailure(f"{n_failed} of {len(manifest_paths)} dataset(s) failed")


class _DataFailure(SegoodError):
    """Raised after a partially failed eval so the exit code signals it."""


@cli.command("gate")
@click.option("--curve", "curve_path", required=True, type=click.Path(path_type=Path), help="Curve CSV produced by eval.")
@click.option("--max-risk", default=DEFAULT_MAX_RISK, show_default=True, help="Risk ceiling.")
@click.option("--min-coverage", default=DEFAULT_MIN_COVERAGE, show_default=True, help="Coverage floor.")
def cmd_gate(curve_path, max_risk, min_coverage):
    """Re-gate an existing curve CSV and print the verdict JSON."""
    curve = read_curve_csv(curve_path)
    requirement = SafetyRequirement(max_risk=max_risk, min_coverage=min_coverage)
    verdict = evaluate_gate(curve, requirement)
    click.echo(json.dumps(verdict.to_dict(), indent=2, sort_keys=True))


@cli.command("synth")
@click.option("--spec", "spec_path", required=True, type=click.Path(path_type=Path), help="Generator spec (JSON).")
@click.option("--out", "out_dir", required=True, type=click.Path(path_type=Path), help="Output dataset directory.")
def cmd_synth(spec_path, out_dir):
    """Generate a synthetic dataset with planted ground truth."""
    try:
        raw = Path(spec_path).read_text("utf-8")
    except OSError as exc:
        raise DataIOError(f"cannot open spec file {spec_path}: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{spec_path}: spec is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{spec_path}: spec root must be a JSON object")
    spec = SynthSpec.from_dict(doc)
    truth = generate(spec, out_dir)
    click.echo(f"dataset '{spec.name}' written to {out_dir} ({spec.n_images} images, manifest {truth.manifest_path})")


# ---------------------------------------------------------------------------
# Entry point


def main(argv=None) -> int:
    """Run the CLI with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.Abort:
        click.echo("aborted", err=True)
        return 1
    except click.UsageError as exc:
        exc.show()
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except ValidationError as exc:
        click.echo(f"validation error: {exc}", err=True)
        return 1
    except (DataIOError, FormatError, SchemaError, IntegrityError, EmptyDatasetError, _DataFailure) as exc:
        click.echo(f"data error: {exc}", err=True)
        return 2
    except NumericalError as exc:
        click.echo(f"numerical error: {exc}", err=True)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
