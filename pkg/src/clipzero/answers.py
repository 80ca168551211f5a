"""Answer filtering with an infilling LM and prompt assembly."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

from .dataset import AnswerVocabulary
from .errors import AssemblyError, InvalidInputError
from .infill import SENTINEL, InfillLM, strip_special_tokens
from .templates import MaskedTemplate, YesNoPromptPair
from .text import MASK, clean_statement, normalize_answer

log = logging.getLogger(__name__)

FILTER_BATCH_SIZE = 128
FILTER_MAX_SPAN = 6
FILTER_BEAMS = 200
FILTER_RETURNED = 200
MAX_DEMONSTRATIONS = 16
DEFAULT_K = 200

YES_NO_ANSWERS = ("yes", "no")


class FilterMode(str, Enum):
    PLAIN = "plain"
    DEMONSTRATED = "demonstrated"


@dataclass(frozen=True)
class CandidateScore:
    answer: str
    log_prob: float
    index: int = 0  # vocabulary position, used for tie-breaking


@dataclass(frozen=True)
class FilteredAnswerSet:
    answers: tuple[str, ...]
    k: int
    mode: FilterMode = FilterMode.PLAIN
    scores: tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.answers) > self.k:
            raise InvalidInputError(f"{len(self.answers)} answers exceed k={self.k}")

    def __len__(self) -> int:
        return len(self.answers)

    def __iter__(self):
        return iter(self.answers)


@dataclass(frozen=True)
class PromptSet:
    entries: tuple[tuple[str, str], ...]
    template: MaskedTemplate | YesNoPromptPair | None = None

    def __post_init__(self):
        for _, prompt in self.entries:
            if MASK in prompt:
                raise AssemblyError(f"prompt still holds {MASK}: {prompt!r}")

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def answers(self) -> list[str]:
        return [a for a, _ in self.entries]

    @property
    def prompts(self) -> list[str]:
        return [p for _, p in self.entries]

    def with_answer(self, answer: str, prompt: str) -> "PromptSet":
        return PromptSet(self.entries + ((answer, prompt),), self.template)


def infill_context(template: MaskedTemplate, demos: Sequence[str] = ()) -> str:
    ctx = template.text.replace(MASK, SENTINEL)
    return " ".join([*(d.strip() for d in demos), ctx]) if demos else ctx


def score_answers(
    lm: InfillLM,
    template: MaskedTemplate,
    vocab: AnswerVocabulary | Sequence[str],
    *,
    demos: Sequence[str] = (),
    max_span_length: int = FILTER_MAX_SPAN,
    batch_size: int = FILTER_BATCH_SIZE,
    generative: bool = False,
) -> list[CandidateScore]:
    """Log-likelihood of every vocabulary answer filling the template's slot.

    Multi-token answers get the summed token log-probability. Answers longer
    than ``max_span_length`` tokens score ``-inf``. With ``generative=True``
    the LM beam-generates spans instead, and answers it never produced score
    ``-inf``.
    """
    answers = list(vocab)
    if not answers:
        raise InvalidInputError("empty vocabulary")
    context = infill_context(template, demos)
    if generative:
        gens = lm.generate(context, num_beams=FILTER_BEAMS, num_return_sequences=FILTER_RETURNED,
                           max_span_length=max_span_length)
        best: dict[str, float] = {}
        for g in gens:
            key = normalize_answer(strip_special_tokens(g.text))
            if key not in best or g.score > best[key]:
                best[key] = g.score
        return [CandidateScore(a, best.get(normalize_answer(a), -math.inf), i) for i, a in enumerate(answers)]
    out: list[CandidateScore] = []
    for start in range(0, len(answers), batch_size):
        chunk = answers[start : start + batch_size]
        lps = lm.span_log_probs([context] * len(chunk), chunk, max_span_length)
        out.extend(CandidateScore(a, float(lp), start + j) for j, (a, lp) in enumerate(zip(chunk, lps)))
    return out


def filter_top_k(scores: Sequence[CandidateScore], k: int = DEFAULT_K,
                 mode: FilterMode = FilterMode.PLAIN) -> FilteredAnswerSet:
    """The k best finite-scoring answers; ties go to the lower vocabulary index."""
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    ranked = sorted((s for s in scores if s.log_prob != -math.inf and not math.isnan(s.log_prob)),
                    key=lambda s: (-s.log_prob, s.index))[:k]
    return FilteredAnswerSet(tuple(s.answer for s in ranked), k, mode, tuple(s.log_prob for s in ranked))


def filter_with_demos(
    lm: InfillLM,
    template: MaskedTemplate,
    filled_demos: Sequence[str],
    vocab: AnswerVocabulary | Sequence[str],
    k: int = DEFAULT_K,
    **score_kw,
) -> FilteredAnswerSet:
    """Top-k answers conditioned on answered demonstrations of the same question type."""
    if not filled_demos:
        log.warning("no demonstrations for %r; falling back to plain answer filtering", template.text)
        return filter_top_k(score_answers(lm, template, vocab, **score_kw), k, FilterMode.PLAIN)
    demos = list(filled_demos)[:MAX_DEMONSTRATIONS]
    scores = score_answers(lm, template, vocab, demos=demos, **score_kw)
    return filter_top_k(scores, k, FilterMode.DEMONSTRATED)


def assemble_prompts(
    template: MaskedTemplate | YesNoPromptPair,
    answers: FilteredAnswerSet | Sequence[str] | None = None,
) -> PromptSet:
    if isinstance(template, YesNoPromptPair):
        return PromptSet((("yes", template.positive), ("no", template.negative)), template)
    if answers is None:
        raise InvalidInputError("masked templates need answers to fill")
    entries = []
    for a in answers:
        prompt = clean_statement(template.text.replace(MASK, a))
        if not prompt:
            raise AssemblyError(f"empty prompt for answer {a!r}")
        entries.append((a, prompt))
    return PromptSet(tuple(entries), template)


class FilterCache:
    """Directory of JSON records holding filtered answer sets.

    Records are keyed by template text, vocabulary, mode, demonstrations, k
    and the LM name.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def key(template_text: str, vocab_fp: str, mode: FilterMode | str, demos: Sequence[str], k: int,
            lm_name: str = "") -> str:
        demo_hash = hashlib.sha256("\n".join(demos).encode()).hexdigest()
        payload = json.dumps([hashlib.sha256(template_text.encode()).hexdigest(), vocab_fp,
                              FilterMode(mode).value, demo_hash, int(k), lm_name])
        return hashlib.sha256(payload.encode()).hexdigest()

    def get(self, key: str) -> FilteredAnswerSet | None:
        path = self.root / f"{key}.json"
        if not path.exists():
            return None
        rec = json.loads(path.read_text())
        return FilteredAnswerSet(tuple(rec["answers"]), rec["k"], FilterMode(rec["mode"]),
                                 tuple(float(x) for x in rec["scores"]))

    def put(self, key: str, value: FilteredAnswerSet) -> None:
        rec = {"answers": list(value.answers), "k": value.k, "mode": value.mode.value,
               "scores": list(value.scores)}
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        with os.fdopen(fd, "w") as f:
            json.dump(rec, f)
        os.replace(tmp, self.root / f"{key}.json")
