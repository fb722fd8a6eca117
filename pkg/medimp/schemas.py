from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from medimp.imaging.volume import Volume

CHECKPOINT_MAGIC = b"MEDIMPCK"
CHECKPOINT_VERSION = 1


class Exam(str, Enum):
    D15 = "D15"
    D30 = "D30"
    M3 = "M3"
    M12 = "M12"

    @property
    def day(self) -> int:
        return EXAM_DAYS[self]

    @property
    def index(self) -> int:
        return list(Exam).index(self)


EXAM_DAYS = {Exam.D15: 15, Exam.D30: 30, Exam.M3: 90, Exam.M12: 365}


class ClinicalRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject_id: str
    exam: Exam
    gfr_value: float = Field(gt=0.0)  # mL/min
    creat_prev: Optional[float] = Field(default=None, gt=0.0)  # umol/L, absent at the first exam
    creat_curr: float = Field(gt=0.0)
    donor_age_value: float = Field(ge=0.0, le=120.0)


class PromptLabels(BaseModel):
    model_config = ConfigDict(frozen=True)

    gfr: str
    creat: str
    donor_age: str
    date: str


class Prompt(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject_id: str
    exam: Exam
    variables_used: tuple[str, ...]
    template_id: str
    text: str
    labels: PromptLabels

    @field_validator("text")
    @classmethod
    def _no_placeholders(cls, value):
        if "{" in value or "}" in value:
            raise ValueError(f"prompt text still contains a placeholder: {value!r}")
        return value


@dataclass(frozen=True)
class PairedSample:
    """One subject-exam: its volume and its clinical record."""

    volume: Volume
    record: ClinicalRecord

    @property
    def sample_id(self) -> str:
        return f"{self.record.subject_id}/{self.record.exam.value}"


@dataclass
class Checkpoint:
    """All trainable state of a pretrained model.

    ``tensors`` maps unique parameter names to arrays; ``metadata`` carries the
    encoder configurations and vocabulary needed to rebuild the model.
    """

    logit_scale: float
    tensors: dict[str, np.ndarray]
    metadata: dict[str, Any] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION
