"""Clause templates and the static augmentation bank.

Each bank variant is one phrasing of the full template sentence, split into
clauses tagged with the variables they express. Selecting the clauses for a
subset of variables gives the variable-ablation prompts.
"""
import json
import re
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from medimp.config import PROMPT_VARIABLES
from medimp.exceptions import ConfigError, PromptError

# variable tag -> placeholder name
SLOT_FOR_TAG = {"GFR": "gfr", "Exam": "date", "Creat": "adj", "D.A.": "age"}
PLACEHOLDER = re.compile(r"\{(\w+)\}")
CANONICAL_SLOTS = {slot: "{" + slot + "}" for slot in SLOT_FOR_TAG.values()}


class ClauseTemplate(BaseModel):
    model_config = ConfigDict(frozen=True)

    template_id: str
    tags: tuple[str, ...]
    text: str

    @field_validator("tags")
    @classmethod
    def _known_tags(cls, value):
        if not value or set(value) - set(PROMPT_VARIABLES):
            raise ValueError(f"clause tags {value} must be a nonempty subset of {PROMPT_VARIABLES}")
        return value

    @model_validator(mode="after")
    def _placeholders_declared(self):
        allowed = {SLOT_FOR_TAG[t] for t in self.tags}
        used = set(PLACEHOLDER.findall(self.text))
        if used - allowed:
            raise ValueError(f"clause {self.text!r} uses placeholders {sorted(used - allowed)} not covered by tags {self.tags}")
        return self

    @property
    def placeholders(self) -> list[str]:
        return PLACEHOLDER.findall(self.text)


class Variant(BaseModel):
    model_config = ConfigDict(frozen=True)

    template_id: str
    clauses: tuple[ClauseTemplate, ...]

    @model_validator(mode="before")
    @classmethod
    def _tag_clauses(cls, data):
        if isinstance(data, dict) and "clauses" in data:
            tid = data.get("template_id")
            data = dict(data)
            data["clauses"] = [
                {"template_id": tid, **c} if isinstance(c, dict) else c for c in data["clauses"]
            ]
        return data

    @property
    def tags(self) -> frozenset[str]:
        return frozenset(t for c in self.clauses for t in c.tags)

    def select(self, variables: Iterable[str]) -> list[ClauseTemplate]:
        """Clauses expressing exactly ``variables``, each at most once, in listed order."""
        wanted = set(variables)
        covered: set[str] = set()
        chosen = []
        for clause in self.clauses:
            tags = set(clause.tags)
            if tags <= wanted and not tags & covered:
                chosen.append(clause)
                covered |= tags
        return chosen if covered == wanted else []

    def supports(self, variables: Iterable[str]) -> bool:
        return bool(self.select(variables))


class AugmentationBank(BaseModel):
    model_config = ConfigDict(frozen=True)

    variants: tuple[Variant, ...]

    @model_validator(mode="after")
    def _consistent(self):
        if not self.variants:
            raise ValueError("augmentation bank is empty")
        ids = [v.template_id for v in self.variants]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate template ids in bank: {ids}")
        reference = self.variants[0].tags
        for v in self.variants[1:]:
            if not v.tags <= reference:
                raise ValueError(f"variant {v.template_id} covers {sorted(v.tags)}, beyond {sorted(reference)}")
        return self

    @property
    def original(self) -> Variant:
        return self.variants[0]

    def get(self, template_id: str) -> Variant:
        for v in self.variants:
            if v.template_id == template_id:
                return v
        raise PromptError(f"template {template_id!r} not in bank")

    def supporting(self, variables: Iterable[str]) -> list[Variant]:
        variables = tuple(variables)
        return [v for v in self.variants if v.supports(variables)]


def render(template: ClauseTemplate, slots: Mapping[str, str]) -> str:
    def fill(match):
        name = match.group(1)
        if name not in slots:
            raise PromptError(f"no value for placeholder {{{name}}} in clause {template.text!r}")
        return slots[name]

    return PLACEHOLDER.sub(fill, template.text)


def render_clauses(clauses: Iterable[ClauseTemplate], slots: Mapping[str, str]) -> str:
    return " ".join(render(c, slots) for c in clauses)


def scan(template: ClauseTemplate, text: str) -> dict[str, str]:
    """Recover the slot values a rendered clause was filled with."""
    pattern, last = "", 0
    for match in PLACEHOLDER.finditer(template.text):
        pattern += re.escape(template.text[last : match.start()]) + f"(?P<{match.group(1)}>.+?)"
        last = match.end()
    pattern += re.escape(template.text[last:])
    found = re.fullmatch(pattern, text)
    if found is None:
        raise PromptError(f"text {text!r} was not rendered from clause {template.text!r}")
    return found.groupdict()


def load_bank(path: str | Path | None = None) -> AugmentationBank:
    """Read a bank file; ``None`` loads the bank shipped with the package."""
    if path is None:
        text = resources.files("medimp").joinpath("data/bank.json").read_text(encoding="utf-8")
        source = "packaged bank.json"
    else:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"Cannot read bank file {path}: {e}")
        source = str(path)
    try:
        return AugmentationBank.model_validate(json.loads(text))
    except (json.JSONDecodeError, ValidationError) as e:
        raise ConfigError(f"Invalid augmentation bank in {source}: {e}")
