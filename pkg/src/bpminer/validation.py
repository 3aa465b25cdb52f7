"""Post-processing gates and the grounding classifier.

Range checks and the cohort-size threshold mirror the published
post-processing; the grounding check automates the manual review by
classifying every extracted value against the source abstract as exact,
derived (mean of 2..max_subset_size abstract numbers), or unsupported.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from bpminer import kernels
from bpminer.extraction import BPExtraction, COUNT_FIELDS, FIELD_NAMES, is_complete
from bpminer.ingest import AbstractRecord

logger = logging.getLogger(__name__)

MEAN_FIELDS = tuple(name for name in FIELD_NAMES if "_mean_" in name)
SD_FIELDS = tuple(name for name in FIELD_NAMES if "_sd_" in name)

_NUMBER_TOKEN = re.compile(r"\d{1,3}(?:,\d{3})+(?:\.\d+)?|\d+(?:\.\d+)?")


@dataclass
class ValidationConfig:
    """Physiological bounds, cohort threshold, and grounding-search knobs."""

    dbp_min: float = 30.0
    dbp_max: float = 120.0
    sbp_min: float = 60.0
    sbp_max: float = 200.0
    min_total_cohort: int = 100  # strict: total must exceed this
    grounding_rel_tol: float = 1e-9
    grounding_abs_tol: float = 0.05
    max_subset_size: int = 4
    max_numbers: int = 60  # larger abstracts truncate the candidate list

    def __post_init__(self):
        if not (self.dbp_min < self.dbp_max and self.sbp_min < self.sbp_max):
            raise ValueError("range bounds must satisfy min < max")
        if self.min_total_cohort < 0:
            raise ValueError("min_total_cohort must be >= 0")
        if self.max_subset_size < 2:
            raise ValueError("max_subset_size must be >= 2")

    def tolerance(self, value: float) -> float:
        return self.grounding_abs_tol + self.grounding_rel_tol * abs(value)


@dataclass
class RangeVerdict:
    passed: bool
    failures: list = field(default_factory=list)  # (field, value) pairs


def validate_ranges(x: BPExtraction, cfg: Optional[ValidationConfig] = None) -> RangeVerdict:
    """Check every mean against its inclusive bounds; SDs only for sign.

    The caller filters for completeness first.
    """
    if cfg is None:
        cfg = ValidationConfig()
    if not is_complete(x):
        raise ValueError(f"extraction {x.pmid!r} is incomplete; filter first")
    failures = []
    for name in MEAN_FIELDS:
        value = getattr(x, name)
        lo, hi = (cfg.sbp_min, cfg.sbp_max) if name.startswith("sbp") else (cfg.dbp_min, cfg.dbp_max)
        if not (lo <= value <= hi):
            failures.append((name, value))
    for name in SD_FIELDS:
        value = getattr(x, name)
        if value < 0:
            failures.append((name, value))
    return RangeVerdict(passed=not failures, failures=failures)


def passes_cohort_filter(x: BPExtraction, cfg: Optional[ValidationConfig] = None) -> bool:
    """True iff n_male + n_female strictly exceeds the threshold."""
    if cfg is None:
        cfg = ValidationConfig()
    if x.n_male is None or x.n_female is None:
        raise ValueError(f"extraction {x.pmid!r} is missing cohort counts")
    return (x.n_male + x.n_female) > cfg.min_total_cohort


@dataclass(frozen=True)
class NumberToken:
    value: float
    start: int
    end: int
    text: str


def extract_numbers(abstract_text: str) -> list[NumberToken]:
    """Every decimal numeric token with its character span, left to right.

    Both halves of slash pairs like "120/80" come out as separate tokens;
    thousands-grouped integers ("1,200") are single tokens.
    """
    tokens = []
    for match in _NUMBER_TOKEN.finditer(abstract_text):
        text = match.group(0)
        tokens.append(NumberToken(
            value=float(text.replace(",", "")),
            start=match.start(),
            end=match.end(),
            text=text,
        ))
    return tokens


class FieldVerdict(str, Enum):
    EXACT = "exact"
    DERIVED = "derived"
    UNSUPPORTED = "unsupported"
    MISSING = "missing"


@dataclass(frozen=True)
class Evidence:
    """Supporting abstract numbers for an exact or derived verdict."""

    values: tuple
    spans: tuple

    def to_dict(self) -> dict:
        return {"values": list(self.values), "spans": [list(s) for s in self.spans]}


@dataclass
class GroundingReport:
    """Per-field verdicts for one extraction against its source abstract."""

    pmid: str
    verdicts: dict
    evidence: dict

    def fully_grounded(self) -> bool:
        """All ten fields exact or derived (implies the extraction is complete)."""
        return all(v in (FieldVerdict.EXACT, FieldVerdict.DERIVED)
                   for v in self.verdicts.values())

    def has_unsupported(self) -> bool:
        return any(v is FieldVerdict.UNSUPPORTED for v in self.verdicts.values())

    def to_dict(self) -> dict:
        return {
            "pmid": self.pmid,
            "verdicts": {name: verdict.value for name, verdict in self.verdicts.items()},
            "evidence": {name: ev.to_dict() for name, ev in self.evidence.items()},
        }


def ground_check(x: BPExtraction, abstract: AbstractRecord,
                 cfg: Optional[ValidationConfig] = None) -> GroundingReport:
    """Classify each extracted value against the abstract's numbers.

    Priority is exact > derived > unsupported: a value matching an
    abstract number (within tolerance) is exact; otherwise, if it equals
    the mean of some 2..max_subset_size abstract numbers it is derived;
    otherwise unsupported. Absent fields are missing.
    """
    if cfg is None:
        cfg = ValidationConfig()
    tokens = extract_numbers(abstract.abstract_text)
    if len(tokens) > cfg.max_numbers:
        logger.warning(
            "grounding %s: %d numeric tokens, truncating to %d",
            x.pmid, len(tokens), cfg.max_numbers,
        )
        tokens = tokens[: cfg.max_numbers]
    values = np.array([t.value for t in tokens], dtype=np.float64)

    verdicts = {}
    evidence = {}
    for name in FIELD_NAMES:
        raw = getattr(x, name)
        if raw is None:
            verdicts[name] = FieldVerdict.MISSING
            continue
        target = float(raw)
        tol = cfg.tolerance(target)
        exact_idx = next(
            (i for i, t in enumerate(tokens) if abs(t.value - target) <= tol), None
        )
        if exact_idx is not None:
            tok = tokens[exact_idx]
            verdicts[name] = FieldVerdict.EXACT
            evidence[name] = Evidence(values=(tok.value,), spans=((tok.start, tok.end),))
            continue
        hit = kernels.subset_mean_hit(values, target, tol, cfg.max_subset_size)
        if hit is not None:
            verdicts[name] = FieldVerdict.DERIVED
            evidence[name] = Evidence(
                values=tuple(tokens[i].value for i in hit),
                spans=tuple((tokens[i].start, tokens[i].end) for i in hit),
            )
        else:
            verdicts[name] = FieldVerdict.UNSUPPORTED
    return GroundingReport(pmid=x.pmid, verdicts=verdicts, evidence=evidence)


@dataclass
class ReviewSummary:
    """Batch grounding accounting; merges associatively."""

    n_records: int = 0
    n_complete: int = 0
    n_fully_grounded: int = 0
    n_with_unsupported: int = 0
    field_histograms: dict = field(default_factory=dict)

    def __add__(self, other: "ReviewSummary") -> "ReviewSummary":
        merged = {}
        for hist in (self.field_histograms, other.field_histograms):
            for name, counts in hist.items():
                slot = merged.setdefault(name, {})
                for verdict, count in counts.items():
                    slot[verdict] = slot.get(verdict, 0) + count
        return ReviewSummary(
            self.n_records + other.n_records,
            self.n_complete + other.n_complete,
            self.n_fully_grounded + other.n_fully_grounded,
            self.n_with_unsupported + other.n_with_unsupported,
            merged,
        )

    def to_dict(self) -> dict:
        return {
            "n_records": self.n_records,
            "n_complete": self.n_complete,
            "n_fully_grounded": self.n_fully_grounded,
            "n_with_unsupported": self.n_with_unsupported,
            "field_histograms": self.field_histograms,
        }


def summarize_review(reports: Sequence[GroundingReport],
                     extractions: Sequence[BPExtraction]) -> ReviewSummary:
    """Aggregate verdicts over a batch, joined to extractions by pmid."""
    by_pmid = {r.pmid: r for r in reports}
    summary = ReviewSummary()
    for x in extractions:
        report = by_pmid.get(x.pmid)
        if report is None:
            raise ValueError(f"no grounding report for pmid {x.pmid!r}")
        summary.n_records += 1
        complete = is_complete(x)
        if complete:
            summary.n_complete += 1
            if report.fully_grounded():
                summary.n_fully_grounded += 1
            if report.has_unsupported():
                summary.n_with_unsupported += 1
        for name, verdict in report.verdicts.items():
            slot = summary.field_histograms.setdefault(name, {})
            slot[verdict.value] = slot.get(verdict.value, 0) + 1
    return summary
