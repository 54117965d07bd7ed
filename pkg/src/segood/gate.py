"""Safety-requirement verdicts over risk-coverage curves.

A requirement pairs a risk ceiling with a coverage floor (defaults: risk
at most 15%, coverage at least 50%). A curve passes when a single
non-degenerate sweep point satisfies both at once; no interpolation
between points is performed. Degenerate points (zero acceptance) never
qualify.
"""
from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError
from .evaluation import RiskCoverageCurve

DEFAULT_MAX_RISK = 0.15
DEFAULT_MIN_COVERAGE = 0.50


@dataclass(frozen=True)
class SafetyRequirement:
    requirement_id: str = "FS1"
    max_risk: float = DEFAULT_MAX_RISK
    min_coverage: float = DEFAULT_MIN_COVERAGE

    def __post_init__(self):
        if not (0.0 <= self.max_risk <= 1.0):
            raise ValidationError(f"max_risk must be in [0, 1], got {self.max_risk}")
        if not (0.0 <= self.min_coverage <= 1.0):
            raise ValidationError(f"min_coverage must be in [0, 1], got {self.min_coverage}")


@dataclass(frozen=True)
class GateVerdict:
    requirement: SafetyRequirement
    passed: bool
    fs_coverage: float | None
    chosen_threshold_index: int | None
    elicited_risk: float | None
    elicited_risk_index: int | None
    in_distribution: bool
    aggregation: str

    def to_dict(self) -> dict:
        return {
            "requirement": {
                "id": self.requirement.requirement_id,
                "max_risk": self.requirement.max_risk,
                "min_coverage": self.requirement.min_coverage,
            },
            "pass": self.passed,
            "fs_coverage": self.fs_coverage,
            "threshold_index": self.chosen_threshold_index,
            "elicited_risk": self.elicited_risk,
            "elicited_risk_index": self.elicited_risk_index,
            "in_distribution": self.in_distribution,
            "aggregation": self.aggregation,
        }


def _qualifying(curve: RiskCoverageCurve):
    return [p for p in curve.points if not p.degenerate]


def max_coverage_at_risk(curve: RiskCoverageCurve, max_risk: float) -> tuple[float, int] | None:
    """Best coverage among non-degenerate points with risk <= max_risk,
    with its threshold index (lowest index on ties). None when no point
    qualifies."""
    best = None
    for p in _qualifying(curve):
        if p.risk <= max_risk and (best is None or p.coverage > best[0]):
            best = (p.coverage, p.threshold_index)
    return best


def min_risk_at_coverage(curve: RiskCoverageCurve, min_coverage: float) -> tuple[float, int] | None:
    """Smallest risk among non-degenerate points with coverage >=
    min_coverage, with its threshold index. None when no point reaches the
    coverage floor."""
    best = None
    for p in _qualifying(curve):
        if p.coverage >= min_coverage and (best is None or p.risk < best[0]):
            best = (p.risk, p.threshold_index)
    return best


def evaluate_gate(
    curve: RiskCoverageCurve,
    requirement: SafetyRequirement | None = None,
    aggregation: str = "dataset-mean-curve",
) -> GateVerdict:
    """Verdict for one curve: pass iff the coverage reachable inside the
    risk budget meets the coverage floor. ``elicited_risk`` reports the
    risk the operator would have to accept to reach the floor."""
    if requirement is None:
        requirement = SafetyRequirement()
    fs = max_coverage_at_risk(curve, requirement.max_risk)
    elicited = min_risk_at_coverage(curve, requirement.min_coverage)
    passed = fs is not None and fs[0] >= requirement.min_coverage
    return GateVerdict(
        requirement=requirement,
        passed=passed,
        fs_coverage=fs[0] if fs is not None else None,
        chosen_threshold_index=fs[1] if fs is not None else None,
        elicited_risk=elicited[0] if elicited is not None else None,
        elicited_risk_index=elicited[1] if elicited is not None else None,
        in_distribution=passed,
        aggregation=aggregation,
    )


def evaluate_gate_per_image(sweeps, requirement: SafetyRequirement | None = None) -> list[GateVerdict]:
    """Strict mode: gate every image's own sweep. The dataset passes this
    mode only when every usable image passes."""
    from .evaluation import aggregate_dataset

    verdicts = []
    for sweep in sweeps:
        if sweep.excluded:
            continue
        curve = aggregate_dataset([sweep])
        verdicts.append(evaluate_gate(curve, requirement, aggregation=f"per-image:{sweep.sample_id}"))
    return verdicts
