"""VQA score, per-answer-type breakdowns, entailment accuracy and QIP prompts."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from .dataset import NUM_HUMAN_ANSWERS, AnswerType
from .errors import ContractError, InvalidInputError
from .text import normalize_answer

VQA_SCORE_DEFINITION = (
    "min(#human answers equal to the prediction / 3, 1), both sides normalized "
    "(lowercase, articles/punctuation stripped, number words to digits)"
)


def vqa_score(prediction: str, human_answers: Sequence[str]) -> float:
    if len(human_answers) != NUM_HUMAN_ANSWERS:
        raise ContractError(f"expected {NUM_HUMAN_ANSWERS} human answers, got {len(human_answers)}")
    pred = normalize_answer(prediction)
    matches = sum(normalize_answer(a) == pred for a in human_answers)
    return min(matches / 3.0, 1.0)


@dataclass(frozen=True)
class VqaResult:
    question_id: str
    prediction: str
    score: float
    answer_type: AnswerType
    provenance: str = ""
    error: str | None = None


@dataclass(frozen=True)
class Breakdown:
    yes_no: float | None
    number: float | None
    other: float | None
    all: float
    counts: tuple[int, int, int, int] = (0, 0, 0, 0)

    COLUMNS = ("Yes/No", "Number", "Other", "All")

    def row(self) -> list[str]:
        return [("-" if v is None else f"{v:.2f}") for v in (self.yes_no, self.number, self.other, self.all)]


def aggregate(results: Sequence[VqaResult]) -> Breakdown:
    """Per-answer-type means and the overall mean, all scaled to 0-100.

    ``all`` is the plain mean over questions, so categories weigh in by size.
    """
    if not results:
        raise InvalidInputError("no results to aggregate")
    buckets: dict[AnswerType, list[float]] = {t: [] for t in AnswerType}
    for r in results:
        buckets[AnswerType(r.answer_type)].append(r.score)

    def mean(xs):
        return 100.0 * sum(xs) / len(xs) if xs else None

    return Breakdown(
        yes_no=mean(buckets[AnswerType.YES_NO]),
        number=mean(buckets[AnswerType.NUMBER]),
        other=mean(buckets[AnswerType.OTHER]),
        all=mean([r.score for r in results]),
        counts=(
            len(buckets[AnswerType.YES_NO]),
            len(buckets[AnswerType.NUMBER]),
            len(buckets[AnswerType.OTHER]),
            len(results),
        ),
    )


def entailment_accuracy(predictions: Sequence, golds: Sequence) -> float:
    if len(predictions) != len(golds):
        raise ContractError(f"{len(predictions)} predictions vs {len(golds)} gold labels")
    if not golds:
        return 0.0
    return sum(p == g for p, g in zip(predictions, golds)) / len(golds)


def build_qip_prompts(question: str, answers: Sequence[str]):
    """Question-irrelevant baseline prompts: ``question: {q} answer: {a}``."""
    from .answers import PromptSet  # local: answers imports evaluation helpers

    if not answers:
        raise InvalidInputError("no answers to build prompts from")
    entries = tuple((a, f"question: {question} answer: {a}") for a in answers)
    return PromptSet(entries=entries, template=None)


def format_table(rows: Sequence[tuple[str, Breakdown]], title: str = "Method") -> str:
    """Aligned text table with the Yes/No | Number | Other | All layout."""
    header = [title, *Breakdown.COLUMNS]
    body = [[name, *b.row()] for name, b in rows]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    lines = []
    for r in [header, None, *body]:
        if r is None:
            lines.append("-+-".join("-" * w for w in widths))
            continue
        cells = [r[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(r[1:], widths[1:])]
        lines.append(" | ".join(cells))
    return "\n".join(lines)


def write_results(path: str | Path, results: Sequence[VqaResult], breakdown: Breakdown) -> None:
    records = []
    for r in results:
        d = asdict(r)
        d["answer_type"] = AnswerType(r.answer_type).value
        records.append(d)
    payload = {
        "metric": VQA_SCORE_DEFINITION,
        "results": records,
        "breakdown": {
            "yes_no": breakdown.yes_no,
            "number": breakdown.number,
            "other": breakdown.other,
            "all": breakdown.all,
            "counts": list(breakdown.counts),
        },
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))
