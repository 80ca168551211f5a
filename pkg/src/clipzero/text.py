"""Answer normalization in the style of the official VQA evaluation.

The rules are a deliberately idempotent subset of the official script:
lowercase, drop apostrophes, strip punctuation (keeping decimal points and
thousands separators between digits intact), map number words to digits,
drop articles and collapse whitespace.
"""

from __future__ import annotations

import re

MASK = "[mask]"

_NUMBER_WORDS = {
    "none": "0",
    "zero": "0",
    "one": "1",
    "two": "2",
    "three": "3",
    "four": "4",
    "five": "5",
    "six": "6",
    "seven": "7",
    "eight": "8",
    "nine": "9",
    "ten": "10",
}
_ARTICLES = {"a", "an", "the"}

_THOUSANDS = re.compile(r"(?<=\d),(?=\d{3}\b)")
_DECIMAL = re.compile(r"(?<=\d)\.(?=\d)")
_PUNCT = re.compile(r"[^\w\s\x00]")


def normalize_answer(text: str) -> str:
    s = text.lower().replace("\x00", " ")
    s = s.replace("'", "").replace("’", "")
    s = _THOUSANDS.sub("", s)
    # protect decimal points while stripping the rest of the punctuation
    s = _DECIMAL.sub("\x00", s)
    s = _PUNCT.sub(" ", s)
    s = s.replace("\x00", ".").replace("_", " ")
    words = []
    for w in s.split():
        w = _NUMBER_WORDS.get(w, w)
        if w in _ARTICLES:
            continue
        words.append(w)
    return " ".join(words)


def clean_statement(text: str) -> str:
    """Whitespace and punctuation cleanup for generated or infilled statements."""
    s = " ".join(text.split())
    s = re.sub(r"\s+([.,;:!?])", r"\1", s)
    s = re.sub(r"([.,;:!?])\1+", r"\1", s)
    return s.strip()


def capitalize_first(text: str) -> str:
    for i, ch in enumerate(text):
        if ch.isalpha():
            return text[:i] + ch.upper() + text[i + 1 :]
        if ch == "[":
            # leading "[mask]" stays lowercase
            return text
    return text
