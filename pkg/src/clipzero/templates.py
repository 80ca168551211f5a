"""Masked-template generation: LM demonstrations, parse rules and their ensemble."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Sequence

import yaml

from .errors import (
    GenerationError,
    InvalidInputError,
    NoTemplateError,
    TemplateError,
    YesNoGenerationError,
)
from .infill import SENTINEL, InfillLM, strip_special_tokens
from .parsing import ParseResult, question_to_template, question_to_yesno
from .text import MASK, clean_statement

log = logging.getLogger(__name__)

# decoding budget for template generation
TEMPLATE_BEAMS = 20
TEMPLATE_RETURNED = 10
TEMPLATE_MAX_SPAN = 30
DEFAULT_DEMOS_PER_TYPE = 4


class TemplateSource(str, Enum):
    DEMO = "demo"
    PARSING = "parsing"


@dataclass(frozen=True)
class MaskedTemplate:
    text: str
    source: TemplateSource
    confidence: float | None = None
    question_type: str = ""

    def __post_init__(self):
        if not self.text.strip():
            raise InvalidInputError("empty template")
        if self.text.count(MASK) != 1:
            raise InvalidInputError(f"template must contain {MASK} exactly once: {self.text!r}")
        if self.confidence is not None and not math.isfinite(self.confidence):
            raise InvalidInputError(f"non-finite confidence {self.confidence}")

    def fill(self, answer: str) -> str:
        return clean_statement(self.text.replace(MASK, answer))


@dataclass(frozen=True)
class YesNoPromptPair:
    positive: str
    negative: str
    source: TemplateSource = TemplateSource.DEMO

    def __post_init__(self):
        for s in (self.positive, self.negative):
            if not s.strip() or MASK in s:
                raise InvalidInputError(f"invalid yes/no prompt {s!r}")


Demo = tuple[str, str]


@dataclass
class DemonstrationBank:
    """Per-question-type demonstrations.

    Masked entries pair a question with its ``[mask]`` statement. Yes/no
    entries live in ``positive``/``negative`` and pair a question with an
    affirming or negating statement.
    """

    entries: dict[str, list[Demo]] = field(default_factory=dict)
    positive: dict[str, list[Demo]] = field(default_factory=dict)
    negative: dict[str, list[Demo]] = field(default_factory=dict)

    def __post_init__(self):
        for qtype, demos in self.entries.items():
            for q, s in demos:
                if s.count(MASK) != 1:
                    raise InvalidInputError(f"demo for {qtype!r} must hold one {MASK}: {s!r}")

    @classmethod
    def load(cls, path: str | Path | None = None, taxonomy: Sequence[str] | None = None) -> "DemonstrationBank":
        if path is None:
            raw = resources.files("clipzero.data").joinpath("demonstrations.yaml").read_text()
        else:
            raw = Path(path).read_text()
        data = yaml.safe_load(raw) or {}
        bank = cls()
        for qtype, value in data.items():
            qtype = str(qtype).lower()
            if taxonomy is not None and qtype not in taxonomy:
                raise InvalidInputError(f"demonstration key {qtype!r} is not a question type")
            if isinstance(value, dict):
                bank.positive[qtype] = [tuple(x) for x in value.get("positive", [])]
                bank.negative[qtype] = [tuple(x) for x in value.get("negative", [])]
            else:
                bank.entries[qtype] = [tuple(x) for x in value]
        bank.__post_init__()
        return bank

    @staticmethod
    def _lookup(table: dict[str, list[Demo]], question: str) -> str | None:
        words = question.lower().replace("?", " ").split()
        best, best_len = None, 0
        for key in table:
            kw = key.split()
            if len(kw) > best_len and words[: len(kw)] == kw:
                best, best_len = key, len(kw)
        return best

    def demos_for(self, question: str, limit: int = DEFAULT_DEMOS_PER_TYPE) -> list[Demo]:
        """Demos of the longest bank key that prefixes the question."""
        key = self._lookup(self.entries, question)
        return list(self.entries[key][:limit]) if key else []

    def yesno_demos_for(self, question: str, limit: int = DEFAULT_DEMOS_PER_TYPE) -> tuple[list[Demo], list[Demo]]:
        key = self._lookup(self.positive, question)
        if key is None:
            return [], []
        return list(self.positive[key][:limit]), list(self.negative.get(key, [])[:limit])


def build_infill_request(question: str, demos: Sequence[Demo]) -> str:
    """``"Q1 S1 Q2 S2 ... Q <extra_id_0>"`` for conditional span generation."""
    if not demos:
        raise InvalidInputError("at least one demonstration is required")
    parts = [f"{q.strip()} {s.strip()}" for q, s in demos]
    parts.append(question.strip())
    parts.append(SENTINEL)
    return " ".join(parts)


def generate_template_demo(lm: InfillLM, question: str, demos: Sequence[Demo],
                           question_type: str = "") -> MaskedTemplate:
    request = build_infill_request(question, demos)
    gens = lm.generate(request, num_beams=TEMPLATE_BEAMS, num_return_sequences=TEMPLATE_RETURNED,
                       max_span_length=TEMPLATE_MAX_SPAN)
    best = None
    for g in gens:
        text = clean_statement(strip_special_tokens(g.text))
        if text.count(MASK) != 1 or not math.isfinite(g.score):
            continue
        if best is None or g.score > best[1]:
            best = (text, g.score)
    if best is None:
        raise GenerationError(f"no generated span holds exactly one {MASK} for {question!r}")
    return MaskedTemplate(best[0], TemplateSource.DEMO, best[1], question_type)


def generate_template_parsing(parse: ParseResult, question: str = "", question_type: str = "") -> MaskedTemplate:
    return MaskedTemplate(question_to_template(parse), TemplateSource.PARSING, None, question_type)


def ensemble_template(
    t_demo: MaskedTemplate | Exception | None,
    t_parsing: MaskedTemplate | Exception | None,
    threshold: float,
) -> MaskedTemplate:
    """Prefer the demonstration template unless its confidence is below ``threshold``."""
    demo = t_demo if isinstance(t_demo, MaskedTemplate) else None
    parsing = t_parsing if isinstance(t_parsing, MaskedTemplate) else None
    if demo is not None and demo.confidence is not None and demo.confidence >= threshold:
        return demo
    if parsing is not None:
        return parsing
    if demo is not None:
        return demo
    raise NoTemplateError(f"no template available (demo: {t_demo!r}, parsing: {t_parsing!r})")


def generate_yesno_prompts(
    question: str,
    positive_demos: Sequence[Demo],
    negative_demos: Sequence[Demo],
    lm: InfillLM,
) -> YesNoPromptPair:
    statements = []
    for demos, polarity in ((positive_demos, "positive"), (negative_demos, "negative")):
        try:
            request = build_infill_request(question, demos)
        except InvalidInputError as e:
            raise YesNoGenerationError(f"no {polarity} demonstrations for {question!r}") from e
        gens = lm.generate(request, num_beams=TEMPLATE_BEAMS, num_return_sequences=TEMPLATE_RETURNED,
                           max_span_length=TEMPLATE_MAX_SPAN)
        pick = None
        for g in sorted(gens, key=lambda g: -g.score):
            text = clean_statement(strip_special_tokens(g.text))
            if text and MASK not in text:
                pick = text
                break
        if pick is None:
            raise YesNoGenerationError(f"{polarity} pass produced no statement for {question!r}")
        statements.append(pick)
    return YesNoPromptPair(statements[0], statements[1], TemplateSource.DEMO)


def yesno_prompts_from_parse(parse: ParseResult) -> YesNoPromptPair:
    try:
        pos, neg = question_to_yesno(parse)
    except TemplateError as e:
        raise YesNoGenerationError(str(e)) from e
    return YesNoPromptPair(pos, neg, TemplateSource.PARSING)
