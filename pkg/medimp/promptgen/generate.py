"""Prompt generation from clinical records, plus JSONL persistence."""
import logging
from pathlib import Path
from typing import Iterable, Literal, Sequence

from pydantic import ValidationError

from medimp.config import PROMPT_VARIABLES
from medimp.exceptions import LeakageError, PromptError
from medimp.promptgen.bank import SLOT_FOR_TAG, AugmentationBank, Variant, render_clauses
from medimp.promptgen.rules import RuleSet, load_rules, record_labels
from medimp.schemas import ClinicalRecord, Prompt, PromptLabels
from medimp.seeds import derive_rng
from medimp.storage import atomic_write_text

logger = logging.getLogger(__name__)

PromptMode = Literal["augmented", "manual"]


def _slots(labels: PromptLabels) -> dict[str, str]:
    return {"gfr": labels.gfr, "date": labels.date, "adj": labels.creat, "age": labels.donor_age}


def _ordered(variables: Iterable[str]) -> tuple[str, ...]:
    variables = set(variables)
    if not variables:
        raise PromptError("at least one prompt variable is required")
    unknown = variables - set(SLOT_FOR_TAG)
    if unknown:
        raise PromptError(f"unknown prompt variables {sorted(unknown)}")
    return tuple(v for v in PROMPT_VARIABLES if v in variables)


def _build(record: ClinicalRecord, variant: Variant, variables: tuple[str, ...], labels: PromptLabels) -> Prompt:
    text = render_clauses(variant.select(variables), _slots(labels))
    prompt = Prompt(
        subject_id=record.subject_id,
        exam=record.exam,
        variables_used=variables,
        template_id=variant.template_id,
        text=text,
        labels=labels,
    )
    check_leakage(prompt, record)
    return prompt


def generate_prompts(
    record: ClinicalRecord,
    bank: AugmentationBank,
    variables: Iterable[str],
    mode: PromptMode = "augmented",
    rng_seed: int = 0,
    rules: RuleSet | None = None,
    n: int = 1,
) -> list[Prompt]:
    """Render prompts for one record.

    Manual mode returns the single original-template prompt whatever the
    seed; augmented mode draws ``n`` variants uniformly from those that can
    express ``variables``, seeded by (seed, subject, exam).
    """
    variables = _ordered(variables)
    labels = record_labels(record, rules or load_rules())
    if mode == "manual":
        if not bank.original.supports(variables):
            raise PromptError(f"original template cannot express variables {variables}")
        return [_build(record, bank.original, variables, labels)]
    if mode != "augmented":
        raise PromptError(f"unknown prompt mode {mode!r}")
    candidates = bank.supporting(variables)
    if not candidates:
        raise PromptError(f"no bank variant expresses variables {variables}")
    rng = derive_rng("prompts", rng_seed, record.subject_id, record.exam.value)
    picks = rng.integers(0, len(candidates), size=n)
    return [_build(record, candidates[i], variables, labels) for i in picks]


def expand_prompts(
    record: ClinicalRecord,
    bank: AugmentationBank,
    variables: Iterable[str],
    n: int = 10,
    rng_seed: int = 0,
    rules: RuleSet | None = None,
) -> list[Prompt]:
    """Pre-expanded augmentation: ``n`` prompts per record, reused across epochs."""
    return generate_prompts(record, bank, variables, "augmented", rng_seed, rules, n=n)


def render_all_variants(
    record: ClinicalRecord, bank: AugmentationBank, variables: Iterable[str], rules: RuleSet | None = None
) -> list[str]:
    """Every text the bank can produce for ``record``; used to build vocabularies."""
    variables = _ordered(variables)
    slots = _slots(record_labels(record, rules or load_rules()))
    return [render_clauses(v.select(variables), slots) for v in bank.supporting(variables)]


def _numeral_forms(value: float) -> set[str]:
    forms = {f"{value:g}", f"{value:.1f}", f"{value:.2f}", str(int(round(value)))}
    if float(value).is_integer():
        forms.add(str(int(value)))
    return forms


def check_leakage(prompt: Prompt, record: ClinicalRecord) -> None:
    """Raise if any raw clinical value of ``record`` is written out in the prompt."""
    values = [record.gfr_value, record.creat_curr, record.donor_age_value]
    if record.creat_prev is not None:
        values.append(record.creat_prev)
    for value in values:
        for form in _numeral_forms(value):
            if form in prompt.text:
                raise LeakageError(
                    f"prompt for {prompt.subject_id}/{prompt.exam.value} leaks value {form!r}: {prompt.text!r}"
                )


def write_prompts_jsonl(path: str | Path, prompts: Sequence[Prompt]) -> Path:
    lines = "".join(p.model_dump_json() + "\n" for p in prompts)
    out = atomic_write_text(path, lines)
    logger.info("Wrote %d prompts to %s", len(prompts), out)
    return out


def read_prompts_jsonl(path: str | Path) -> list[Prompt]:
    prompts = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            prompts.append(Prompt.model_validate_json(line))
        except ValidationError as e:
            raise PromptError(f"{path}:{lineno}: invalid prompt record: {e}")
    return prompts
