"""Categorization of continuous clinical variables into text labels."""
import json
import math
from importlib import resources
from pathlib import Path
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from medimp.exceptions import CategorizationError, ConfigError
from medimp.schemas import ClinicalRecord, Exam, PromptLabels


class Bin(BaseModel):
    model_config = ConfigDict(frozen=True)

    lo: float
    hi: Optional[float] = None  # None: unbounded above
    label: str = Field(min_length=1)

    @property
    def upper(self) -> float:
        return math.inf if self.hi is None else self.hi


class CategorizationRule(BaseModel):
    """Ordered half-open bins ``[lo, hi)`` mapping a variable to labels."""

    model_config = ConfigDict(frozen=True)

    variable: str
    unit: str = ""
    bins: tuple[Bin, ...]

    @model_validator(mode="after")
    def _contiguous(self):
        if not self.bins:
            raise ValueError(f"rule for {self.variable} has no bins")
        for left, right in zip(self.bins, self.bins[1:]):
            if left.hi is None or left.hi != right.lo:
                raise ValueError(f"rule for {self.variable}: bins {left} and {right} are not contiguous")
        for b in self.bins:
            if b.upper <= b.lo:
                raise ValueError(f"rule for {self.variable}: empty bin {b}")
        return self


class RuleSet(BaseModel):
    model_config = ConfigDict(frozen=True)

    gfr: CategorizationRule
    donor_age: CategorizationRule
    creat_rel_threshold: float = Field(gt=0.0)
    date_phrases: dict[Exam, str]

    @field_validator("date_phrases")
    @classmethod
    def _every_exam(cls, value):
        missing = [e.value for e in Exam if e not in value]
        if missing:
            raise ValueError(f"date phrases missing for exams {missing}")
        return value


def categorize(value: float, rule: CategorizationRule) -> str:
    for b in rule.bins:
        if b.lo <= value < b.upper:
            return b.label
    raise CategorizationError(f"{rule.variable} value {value} is outside the rule coverage")


def creat_trend(prev: Optional[float], curr: float, rel_threshold: float) -> str:
    """``unstable`` when creatinine moved by more than ``rel_threshold`` since the previous exam."""
    if prev is None:
        return "stable"
    return "unstable" if abs(curr - prev) / prev > rel_threshold else "stable"


def record_labels(record: ClinicalRecord, rules: RuleSet) -> PromptLabels:
    return PromptLabels(
        gfr=categorize(record.gfr_value, rules.gfr),
        creat=creat_trend(record.creat_prev, record.creat_curr, rules.creat_rel_threshold),
        donor_age=categorize(record.donor_age_value, rules.donor_age),
        date=rules.date_phrases[record.exam],
    )


def load_rules(path: str | Path | None = None) -> RuleSet:
    """Read a rule file; ``None`` loads the rules shipped with the package."""
    if path is None:
        text = resources.files("medimp").joinpath("data/rules.json").read_text(encoding="utf-8")
        source = "packaged rules.json"
    else:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"Cannot read rules file {path}: {e}")
        source = str(path)
    try:
        return RuleSet.model_validate(json.loads(text))
    except (json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"Invalid rules in {source}: {e}")
