"""VQAv2 / SNLI-VE ingestion, question-type taxonomy and few-shot sampling."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .errors import InvalidInputError, LoadError
from .text import normalize_answer

log = logging.getLogger(__name__)

FALLBACK_QUESTION_TYPE = "none of the above"
NUM_HUMAN_ANSWERS = 10


class AnswerType(str, Enum):
    YES_NO = "yes/no"
    NUMBER = "number"
    OTHER = "other"


class EntailmentLabel(str, Enum):
    ENTAILMENT = "entailment"
    NEUTRAL = "neutral"
    CONTRADICTION = "contradiction"


ENTAILMENT_LABELS = tuple(EntailmentLabel)

Way = tuple[str, AnswerType]


@dataclass(frozen=True)
class VqaExample:
    question_id: str
    image_ref: str
    question: str
    question_type: str
    answer_type: AnswerType
    human_answers: tuple[str, ...]
    majority_answer: str

    def __post_init__(self):
        if len(self.human_answers) != NUM_HUMAN_ANSWERS:
            raise InvalidInputError(
                f"question {self.question_id}: expected {NUM_HUMAN_ANSWERS} human answers, "
                f"got {len(self.human_answers)}"
            )
        if not isinstance(self.answer_type, AnswerType):
            object.__setattr__(self, "answer_type", AnswerType(self.answer_type))

    @property
    def way(self) -> Way:
        return (self.question_type, self.answer_type)


@dataclass(frozen=True)
class VeExample:
    premise_image_ref: str
    premise_caption: str
    hypothesis: str
    label: EntailmentLabel
    pair_id: str = ""


# ---------------------------------------------------------------------------
# taxonomy and vocabulary


def load_question_types(path: str | Path | None = None) -> list[str]:
    """One prefix per line. Without a path, the bundled VQAv2 list is used."""
    if path is None:
        text = resources.files("clipzero.data").joinpath("question_types.txt").read_text()
    else:
        text = Path(path).read_text()
    types = [line.strip().lower() for line in text.splitlines() if line.strip()]
    if len(set(types)) != len(types):
        raise LoadError("duplicate question types", str(path) if path else None)
    return types


def _words(text: str) -> list[str]:
    return text.lower().replace("?", " ").split()


def classify_question_type(question: str, taxonomy: Sequence[str]) -> str:
    """Longest taxonomy prefix of ``question``, compared word by word."""
    if not question or not question.strip():
        raise InvalidInputError("empty question")
    words = _words(question)
    best, best_len = None, 0
    for prefix in taxonomy:
        pw = prefix.split()
        if len(pw) > best_len and words[: len(pw)] == pw:
            best, best_len = prefix, len(pw)
    return best if best is not None else FALLBACK_QUESTION_TYPE


@dataclass(frozen=True)
class AnswerVocabulary:
    answers: tuple[str, ...]
    index: dict[str, int] = field(repr=False, compare=False)

    @classmethod
    def from_answers(cls, answers: Iterable[str]) -> "AnswerVocabulary":
        answers = tuple(answers)
        if not answers:
            raise InvalidInputError("empty answer vocabulary")
        index: dict[str, int] = {}
        for i, a in enumerate(answers):
            key = normalize_answer(a)
            if key in index:
                raise InvalidInputError(
                    f"answer {a!r} (line {i + 1}) duplicates {answers[index[key]]!r} after normalization"
                )
            index[key] = i
        return cls(answers, index)

    @classmethod
    def load(cls, path: str | Path) -> "AnswerVocabulary":
        lines = Path(path).read_text().splitlines()
        return cls.from_answers(line.strip() for line in lines if line.strip())

    def __len__(self) -> int:
        return len(self.answers)

    def __iter__(self):
        return iter(self.answers)

    def __contains__(self, answer: str) -> bool:
        return normalize_answer(answer) in self.index

    def lookup(self, answer: str) -> int | None:
        return self.index.get(normalize_answer(answer))

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha256("\n".join(self.answers).encode()).hexdigest()


# ---------------------------------------------------------------------------
# loaders


def _read_json(path: str | Path) -> object:
    try:
        with open(path) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise LoadError(f"malformed JSON: {e.msg}", str(path), f"offset {e.pos}") from e


def load_vqa_split(
    questions_file: str | Path,
    annotations_file: str | Path,
    vocab: AnswerVocabulary | None = None,
    taxonomy: Sequence[str] | None = None,
    image_root: str | Path | None = None,
) -> list[VqaExample]:
    """Join a VQAv2 questions file with its annotations file.

    ``vocab`` is accepted for interface symmetry and only used to log how many
    majority answers fall outside the vocabulary.
    """
    taxonomy = load_question_types() if taxonomy is None else taxonomy
    qdata = _read_json(questions_file)
    adata = _read_json(annotations_file)
    try:
        questions = qdata["questions"]
        annotations = adata["annotations"]
    except (TypeError, KeyError) as e:
        raise LoadError(f"missing top-level key {e}", str(questions_file)) from e
    subtype = qdata.get("data_subtype") if isinstance(qdata, dict) else None

    by_id: dict[object, dict] = {}
    for i, ann in enumerate(annotations):
        try:
            by_id[ann["question_id"]] = ann
        except (TypeError, KeyError) as e:
            raise LoadError("annotation record without question_id", str(annotations_file), f"record {i}") from e

    examples: list[VqaExample] = []
    images: set = set()
    oov = 0
    for i, rec in enumerate(questions):
        try:
            qid, image_id, question = rec["question_id"], rec["image_id"], rec["question"]
        except (TypeError, KeyError) as e:
            raise LoadError(f"malformed question record, missing {e}", str(questions_file), f"record {i}") from e
        ann = by_id.pop(qid, None)
        if ann is None:
            raise LoadError(f"question_id {qid} has no annotation", str(annotations_file), qid)
        if ann.get("image_id", image_id) != image_id:
            raise LoadError(f"question_id {qid} image_id mismatch", str(annotations_file), qid)
        try:
            human = tuple(a["answer"] for a in ann["answers"])
            example = VqaExample(
                question_id=str(qid),
                image_ref=_image_ref(image_id, subtype, image_root),
                question=question,
                question_type=classify_question_type(question, taxonomy),
                answer_type=AnswerType(ann["answer_type"]),
                human_answers=human,
                majority_answer=ann["multiple_choice_answer"],
            )
        except (KeyError, TypeError, ValueError) as e:
            raise LoadError(f"malformed annotation: {e}", str(annotations_file), qid) from e
        if vocab is not None and example.majority_answer not in vocab:
            oov += 1
        images.add(image_id)
        examples.append(example)
    if by_id:
        orphan = next(iter(by_id))
        raise LoadError(f"annotation question_id {orphan} has no question", str(questions_file), orphan)
    log.info("loaded %d VQA examples over %d images (%d majority answers out of vocab)",
             len(examples), len(images), oov)
    return examples


def _image_ref(image_id, subtype: str | None, image_root) -> str:
    if subtype:
        name = f"COCO_{subtype}_{int(image_id):012d}.jpg"
        return str(Path(image_root) / name) if image_root else name
    return str(Path(image_root) / str(image_id)) if image_root else str(image_id)


_VE_KEYS = {
    "image": ("Flickr30K_ID", "premise_image", "image_id", "image"),
    "caption": ("sentence1", "premise_caption", "caption", "premise"),
    "hypothesis": ("sentence2", "hypothesis"),
    "label": ("gold_label", "label"),
}


def _pick(rec: dict, role: str):
    for key in _VE_KEYS[role]:
        if key in rec:
            return rec[key]
    raise KeyError(role)


def load_snli_ve_split(path: str | Path, image_root: str | Path | None = None) -> list[VeExample]:
    """Read a line-delimited SNLI-VE file (one JSON record per line)."""
    out: list[VeExample] = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                image = str(_pick(rec, "image"))
                raw_label = str(_pick(rec, "label")).strip().lower()
                caption = str(_pick(rec, "caption"))
                hypothesis = str(_pick(rec, "hypothesis"))
            except json.JSONDecodeError as e:
                raise LoadError(f"malformed record: {e.msg}", str(path), f"line {lineno}") from e
            except KeyError as e:
                raise LoadError(f"record missing {e}", str(path), f"line {lineno}") from e
            try:
                label = EntailmentLabel(raw_label)
            except ValueError:
                raise LoadError(f"unknown label {raw_label!r}", str(path), f"line {lineno}") from None
            if image_root is not None:
                image = str(Path(image_root) / (image if "." in image else image + ".jpg"))
            out.append(VeExample(image, caption, hypothesis, label, str(rec.get("pairID", lineno))))
    log.info("loaded %d SNLI-VE examples from %s", len(out), path)
    return out


# ---------------------------------------------------------------------------
# few-shot sampling


def all_ways(taxonomy: Sequence[str] | None = None) -> list[Way]:
    taxonomy = load_question_types() if taxonomy is None else taxonomy
    return [(q, a) for q in taxonomy for a in AnswerType]


@dataclass(frozen=True)
class FewShotPool:
    ways: dict[Way, tuple[VqaExample, ...]]
    K: int
    seed: int
    omitted_ways: tuple[Way, ...]

    def __len__(self) -> int:
        return sum(len(v) for v in self.ways.values())

    def examples(self) -> list[VqaExample]:
        return [e for shots in self.ways.values() for e in shots]

    def to_manifest(self) -> dict:
        return {
            "K": self.K,
            "seed": self.seed,
            "ways": [
                {"question_type": q, "answer_type": a.value, "question_ids": [e.question_id for e in shots]}
                for (q, a), shots in self.ways.items()
            ],
            "omitted_ways": [[q, a.value] for q, a in self.omitted_ways],
        }

    @classmethod
    def from_manifest(cls, manifest: dict, examples: Iterable[VqaExample]) -> "FewShotPool":
        by_id = {e.question_id: e for e in examples}
        try:
            ways = {
                (w["question_type"], AnswerType(w["answer_type"])): tuple(by_id[q] for q in w["question_ids"])
                for w in manifest["ways"]
            }
        except KeyError as e:
            raise LoadError(f"pool manifest references unknown question id {e}") from e
        omitted = tuple((q, AnswerType(a)) for q, a in manifest["omitted_ways"])
        return cls(ways, int(manifest["K"]), int(manifest["seed"]), omitted)


def sample_pool(
    examples: Sequence[VqaExample],
    K: int,
    seed: int,
    taxonomy: Sequence[str] | None = None,
) -> FewShotPool:
    """Draw up to K distinct examples for each (question type, answer type) way."""
    if K < 1:
        raise InvalidInputError(f"K must be >= 1, got {K}")
    grouped: dict[Way, list[VqaExample]] = {}
    for e in examples:
        grouped.setdefault(e.way, []).append(e)
    rng = random.Random(seed)
    ways: dict[Way, tuple[VqaExample, ...]] = {}
    omitted: list[Way] = []
    for way in all_ways(taxonomy):
        avail = grouped.get(way)
        if not avail:
            omitted.append(way)
            continue
        picked = rng.sample(range(len(avail)), min(K, len(avail)))
        ways[way] = tuple(avail[i] for i in picked)
    return FewShotPool(ways, K, seed, tuple(omitted))


@dataclass(frozen=True)
class Episode:
    chosen_ways: tuple[Way, ...]
    support: tuple[VqaExample, ...]
    query: tuple[VqaExample, ...]
    proportion: float


def split_support_query(
    pool: FewShotPool,
    C: int | None = None,
    proportion: float = 0.75,
    seed: int = 0,
) -> Episode:
    """Pick C populated ways and split each way's shots into support and query.

    Each way contributes ``ceil(proportion * n)`` support shots, where n is
    the number of shots that way holds. ``C=None`` takes every populated way.
    """
    if not 0.0 < proportion < 1.0:
        raise InvalidInputError(f"proportion must lie in (0, 1), got {proportion}")
    populated = list(pool.ways)
    if C is None:
        C = len(populated)
    if not 1 <= C <= len(populated):
        raise InvalidInputError(f"C={C} outside 1..{len(populated)} populated ways")
    rng = random.Random(seed)
    chosen = rng.sample(populated, C)
    support: list[VqaExample] = []
    query: list[VqaExample] = []
    for way in chosen:
        shots = list(pool.ways[way])
        rng.shuffle(shots)
        # round first so 0.7 * 10 does not ceil to 8
        n_support = min(len(shots), math.ceil(round(proportion * len(shots), 9)))
        support.extend(shots[:n_support])
        query.extend(shots[n_support:])
    return Episode(tuple(chosen), tuple(support), tuple(query), proportion)


def episode_manifest(ep: Episode, C: int | None, seed: int) -> dict:
    return {
        "C": C,
        "seed": seed,
        "proportion": ep.proportion,
        "chosen_ways": [[q, a.value] for q, a in ep.chosen_ways],
        "support": [e.question_id for e in ep.support],
        "query": [e.question_id for e in ep.query],
    }
