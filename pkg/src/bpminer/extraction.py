"""Ten-variable extraction schema: prompt building and answer parsing.

The answer schema is line-oriented, one "Label: value" line per variable,
with N/A marking variables the abstract does not report. Parsing is
label-keyed and total: junk lines or junk values yield absent fields,
never errors.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from bpminer.errors import TemplateError

PLACEHOLDER = "{{abstract}}"
NOT_AVAILABLE = "N/A"

# Field order matches the answer schema; labels are the canonical line keys.
ANSWER_FIELDS = (
    ("n_male", "Number of males"),
    ("n_female", "Number of females"),
    ("sbp_mean_male", "Mean SBP males"),
    ("sbp_sd_male", "SD SBP males"),
    ("sbp_mean_female", "Mean SBP females"),
    ("sbp_sd_female", "SD SBP females"),
    ("dbp_mean_male", "Mean DBP males"),
    ("dbp_sd_male", "SD DBP males"),
    ("dbp_mean_female", "Mean DBP females"),
    ("dbp_sd_female", "SD DBP females"),
)
FIELD_NAMES = tuple(name for name, _ in ANSWER_FIELDS)
COUNT_FIELDS = frozenset({"n_male", "n_female"})

_LABEL_TO_FIELD = {label.casefold(): name for name, label in ANSWER_FIELDS}
_UNIT_SUFFIX = re.compile(r"\s*(?:mmhg|mm\s+hg)\s*$", re.IGNORECASE)
_GROUPED_INT = re.compile(r"^\d{1,3}(?:,\d{3})+$")
_NUMBER = re.compile(r"^[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?$")


@dataclass
class BPExtraction:
    """The ten optional extracted variables for one abstract."""

    n_male: Optional[int] = None
    n_female: Optional[int] = None
    sbp_mean_male: Optional[float] = None
    sbp_sd_male: Optional[float] = None
    sbp_mean_female: Optional[float] = None
    sbp_sd_female: Optional[float] = None
    dbp_mean_male: Optional[float] = None
    dbp_sd_male: Optional[float] = None
    dbp_mean_female: Optional[float] = None
    dbp_sd_female: Optional[float] = None
    pmid: str = ""
    raw_answer: str = ""

    def get(self, name: str):
        if name not in FIELD_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def to_dict(self) -> dict:
        d = {name: getattr(self, name) for name in FIELD_NAMES}
        d["pmid"] = self.pmid
        d["raw_answer"] = self.raw_answer
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BPExtraction":
        kwargs = {}
        for name in FIELD_NAMES:
            value = d.get(name)
            if value is not None:
                value = int(value) if name in COUNT_FIELDS else float(value)
            kwargs[name] = value
        return cls(pmid=d.get("pmid", ""), raw_answer=d.get("raw_answer", ""), **kwargs)


def is_complete(x: BPExtraction) -> bool:
    """True iff all ten variables are present."""
    return all(getattr(x, name) is not None for name in FIELD_NAMES)


def _default_template_text(labels: Sequence[str]) -> str:
    schema_lines = "\n".join(f"{label}: <value>" for label in labels)
    return (
        "You are given the abstract of a biomedical research article. "
        "Identify the values of the following ten variables for the cohort "
        "described in the abstract: the number of males and the number of "
        "females, and the mean and standard deviation of systolic blood "
        "pressure (SBP) and diastolic blood pressure (DBP) for males and "
        "for females, in mmHg.\n"
        "\n"
        "Answer with exactly ten lines, one per variable, in this format:\n"
        "\n"
        f"{schema_lines}\n"
        "\n"
        "Write only the value after each label: a number, optionally "
        f"followed by the unit mmHg. If the abstract does not report a "
        f"variable, write {NOT_AVAILABLE} for it. Do not add any other "
        "text.\n"
        "\n"
        "Abstract:\n"
        f"{PLACEHOLDER}\n"
    )


@dataclass
class PromptTemplate:
    """Prompt text with one abstract placeholder and the ten answer labels."""

    template_text: str
    answer_schema: Sequence[str] = tuple(label for _, label in ANSWER_FIELDS)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        count = self.template_text.count(PLACEHOLDER)
        if count != 1:
            raise TemplateError(
                f"template must contain {PLACEHOLDER} exactly once, found {count}"
            )
        if len(self.answer_schema) != len(ANSWER_FIELDS):
            raise TemplateError(
                f"answer schema must list {len(ANSWER_FIELDS)} labels, "
                f"got {len(self.answer_schema)}"
            )
        if len(set(self.answer_schema)) != len(self.answer_schema):
            raise TemplateError("answer schema labels must be unique")

    @classmethod
    def default(cls) -> "PromptTemplate":
        labels = tuple(label for _, label in ANSWER_FIELDS)
        return cls(template_text=_default_template_text(labels), answer_schema=labels)

    @classmethod
    def from_file(cls, path) -> "PromptTemplate":
        return cls(template_text=Path(path).read_text(encoding="utf-8"))


def build_prompt(abstract, template: PromptTemplate) -> str:
    """Substitute the abstract into the template (single pass).

    A literal placeholder inside the abstract text is left verbatim; only
    the template's own placeholder is replaced.
    """
    template.validate()
    before, _, after = template.template_text.partition(PLACEHOLDER)
    return before + abstract.abstract_text + after


def _parse_value(name: str, raw: str):
    """Parse one value token; None for N/A or anything unparseable."""
    raw = raw.strip()
    if not raw or raw.casefold() in ("n/a", "na"):
        return None
    raw = _UNIT_SUFFIX.sub("", raw).strip()
    if name in COUNT_FIELDS and _GROUPED_INT.match(raw):
        raw = raw.replace(",", "")
    if not _NUMBER.match(raw):
        return None
    try:
        value = float(raw)
    except ValueError:
        return None
    if not math.isfinite(value) or value < 0:
        return None
    if name in COUNT_FIELDS:
        if value != int(value):
            return None
        return int(value)
    return value


def parse_answer(answer, pmid: str = "") -> BPExtraction:
    """Parse a backend answer into a BPExtraction.

    Lines are matched by label, not position; missing or unparseable lines
    yield absent fields. The parse is total: arbitrary garbage produces an
    all-absent extraction.
    """
    text = getattr(answer, "text", answer)
    if not isinstance(text, str):
        text = str(text)
    values = {}
    for line in text.splitlines():
        if ":" not in line:
            continue
        label, _, raw = line.partition(":")
        name = _LABEL_TO_FIELD.get(" ".join(label.split()).casefold())
        if name is None or name in values:
            continue
        parsed = _parse_value(name, raw)
        if parsed is not None:
            values[name] = parsed
    return BPExtraction(pmid=pmid, raw_answer=text, **values)


def render_answer(x: BPExtraction) -> str:
    """Render an extraction in the canonical answer schema.

    parse_answer(render_answer(x)) recovers the ten fields exactly.
    """
    lines = []
    for name, label in ANSWER_FIELDS:
        value = getattr(x, name)
        if value is None:
            lines.append(f"{label}: {NOT_AVAILABLE}")
        elif name in COUNT_FIELDS:
            lines.append(f"{label}: {int(value)}")
        else:
            lines.append(f"{label}: {value!r} mmHg")
    return "\n".join(lines)
