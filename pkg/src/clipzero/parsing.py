"""Rule-based question-to-statement conversion over dependency parses.

The converter consumes Universal Dependencies parses produced elsewhere
(Stanza, a CoNLL-U file, a test fixture); it never runs a parser itself.
Rules follow the usual declarative-reordering recipe: locate the wh-phrase,
the root, the fronted auxiliary/copula and any stranded preposition, undo
subject-auxiliary inversion (re-inflecting the verb under do-support) and put
the answer slot where the wh-phrase belonged.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Protocol

from .errors import ConversionError, InvalidInputError, UnsupportedQuestionError
from .text import MASK, capitalize_first, clean_statement


@dataclass(frozen=True)
class Token:
    form: str
    upos: str
    head: int  # 0-based index of the head, -1 for the root
    deprel: str
    lemma: str = ""

    @property
    def rel(self) -> str:
        return self.deprel.split(":")[0]

    @property
    def lower(self) -> str:
        return self.form.lower()


@dataclass(frozen=True)
class ParseResult:
    tokens: tuple[Token, ...]
    root_index: int

    def __post_init__(self):
        n = len(self.tokens)
        roots = [i for i, t in enumerate(self.tokens) if t.head == -1]
        if roots != [self.root_index]:
            raise InvalidInputError(f"parse must have exactly one root, found {roots}")
        for i, t in enumerate(self.tokens):
            if not -1 <= t.head < n or t.head == i:
                raise InvalidInputError(f"token {i} ({t.form!r}) has head {t.head} out of range")

    @property
    def text(self) -> str:
        return detokenize(t.form for t in self.tokens)

    def children(self, i: int) -> list[int]:
        return [j for j, t in enumerate(self.tokens) if t.head == i]

    def subtree(self, i: int) -> set[int]:
        out, stack = {i}, [i]
        while stack:
            for c in self.children(stack.pop()):
                if c not in out:
                    out.add(c)
                    stack.append(c)
        return out


class ParseProvider(Protocol):
    def __call__(self, question: str) -> ParseResult: ...


# ---------------------------------------------------------------------------
# CoNLL-U


def parse_conllu(text: str) -> Iterator[tuple[dict[str, str], ParseResult]]:
    """Yield ``(comments, parse)`` per sentence; comments are ``# key = value`` lines."""
    comments: dict[str, str] = {}
    rows: list[list[str]] = []

    def flush():
        toks = []
        for cols in rows:
            head = int(cols[6]) - 1
            toks.append(Token(form=cols[1], lemma="" if cols[2] == "_" else cols[2],
                              upos=cols[3], head=head, deprel=cols[7]))
        root = next((i for i, t in enumerate(toks) if t.head == -1), -1)
        return dict(comments), ParseResult(tuple(toks), root)

    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.rstrip("\n")
        if not line.strip():
            if rows:
                yield flush()
            comments, rows = {}, []
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition("=")
            comments[key.strip()] = value.strip()
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise InvalidInputError(f"CoNLL-U line {lineno}: expected 10 tab-separated columns")
        if "-" in cols[0] or "." in cols[0]:
            continue  # multiword / empty nodes
        rows.append(cols)
    if rows:
        yield flush()


def to_conllu(parse: ParseResult, **comments: str) -> str:
    lines = [f"# {k} = {v}" for k, v in comments.items()]
    for i, t in enumerate(parse.tokens):
        lines.append("\t".join([str(i + 1), t.form, t.lemma or "_", t.upos, "_", "_",
                                str(t.head + 1), t.deprel, "_", "_"]))
    return "\n".join(lines) + "\n"


class ConlluParseProvider:
    """Parse provider backed by pre-parsed questions, keyed by their ``# text``."""

    def __init__(self, parses: dict[str, ParseResult]):
        self._parses = {_key(k): v for k, v in parses.items()}

    @classmethod
    def from_file(cls, path: str | Path) -> "ConlluParseProvider":
        parses = {}
        for comments, parse in parse_conllu(Path(path).read_text()):
            parses[comments.get("text") or parse.text] = parse
        return cls(parses)

    def __contains__(self, question: str) -> bool:
        return _key(question) in self._parses

    def __call__(self, question: str) -> ParseResult:
        try:
            return self._parses[_key(question)]
        except KeyError:
            raise UnsupportedQuestionError(f"no parse available for {question!r}") from None


def _key(question: str) -> str:
    return " ".join(question.lower().split())


class StanzaParseProvider:
    """Adapter around a ``stanza.Pipeline`` (tokenize, pos, lemma, depparse)."""

    def __init__(self, pipeline=None, lang: str = "en"):
        if pipeline is None:
            import stanza

            pipeline = stanza.Pipeline(lang, processors="tokenize,pos,lemma,depparse", verbose=False)
        self.pipeline = pipeline

    def __call__(self, question: str) -> ParseResult:
        doc = self.pipeline(question)
        offset, toks = 0, []
        for s in doc.sentences:
            for w in s.words:
                head = -1 if w.head == 0 else offset + w.head - 1
                toks.append(Token(w.text, w.upos, head, w.deprel, w.lemma or ""))
            offset += len(s.words)
        roots = [i for i, t in enumerate(toks) if t.head == -1]
        if len(roots) != 1:
            # multi-sentence output: attach later roots to the first one
            toks = [t if i == roots[0] or t.head != -1 else Token(t.form, t.upos, roots[0], "parataxis", t.lemma)
                    for i, t in enumerate(toks)]
        return ParseResult(tuple(toks), roots[0])


# ---------------------------------------------------------------------------
# morphology

_IRREGULAR_3SG = {"have": "has", "do": "does", "go": "goes", "be": "is"}
_IRREGULAR_PAST = {
    "be": "was", "have": "had", "do": "did", "say": "said", "make": "made", "go": "went",
    "eat": "ate", "take": "took", "see": "saw", "get": "got", "come": "came", "hold": "held",
    "wear": "wore", "ride": "rode", "sit": "sat", "stand": "stood", "run": "ran", "buy": "bought",
    "feel": "felt", "throw": "threw", "catch": "caught", "drink": "drank", "fly": "flew",
    "give": "gave", "hit": "hit", "put": "put", "read": "read", "write": "wrote", "win": "won",
    "drive": "drove", "break": "broke", "fall": "fell", "lose": "lost", "find": "found",
    "grow": "grew", "build": "built", "leave": "left", "bring": "brought", "swim": "swam",
}
_VOWELS = set("aeiou")


def third_person(verb: str) -> str:
    v = verb.lower()
    if v in _IRREGULAR_3SG:
        return _IRREGULAR_3SG[v]
    if v.endswith(("s", "sh", "ch", "x", "z", "o")):
        return v + "es"
    if len(v) > 1 and v.endswith("y") and v[-2] not in _VOWELS:
        return v[:-1] + "ies"
    return v + "s"


def past_tense(verb: str) -> str:
    v = verb.lower()
    if v in _IRREGULAR_PAST:
        return _IRREGULAR_PAST[v]
    if v.endswith("e"):
        return v + "d"
    if len(v) > 1 and v.endswith("y") and v[-2] not in _VOWELS:
        return v[:-1] + "ied"
    return v + "ed"


# ---------------------------------------------------------------------------
# conversion

WH_WORDS = {"what", "which", "who", "whom", "whose", "where", "when", "why", "how"}
_DO_FORMS = {"do": "base", "does": "3sg", "did": "past"}
_BE_FORMS = {"is", "are", "was", "were", "am"}
_DEMONSTRATIVES = {"this", "that", "these", "those", "it", "they", "he", "she"}
_ADVERBIAL_SLOT = {"why": "because of " + MASK, "where": "at " + MASK, "when": "at " + MASK,
                   "how": "by " + MASK}
_SUBJECT_RELS = {"nsubj", "csubj"}
_NO_SPACE_BEFORE = {"'s", "'", "n't", ",", ".", "!", "?", ";", ":", "'re", "'m", "'ve", "'ll", "'d"}


def detokenize(forms: Iterable[str]) -> str:
    out = ""
    for f in forms:
        if not out:
            out = f
        elif f.lower() in _NO_SPACE_BEFORE:
            out += f
        else:
            out += " " + f
    return out


@dataclass
class _Clause:
    parse: ParseResult
    content: list[int]  # token indices without the final punctuation

    def tok(self, i: int) -> Token:
        return self.parse.tokens[i]


def _content_indices(parse: ParseResult) -> list[int]:
    idx = list(range(len(parse.tokens)))
    while idx and parse.tokens[idx[-1]].upos == "PUNCT":
        idx.pop()
    return idx


def _surface(parse: ParseResult, i: int, sentence_initial: bool) -> str:
    t = parse.tokens[i]
    if sentence_initial and t.upos != "PROPN" and t.form != "I":
        return t.form.lower()
    return t.form


def _words(parse: ParseResult, indices: Iterable[int]) -> list[str]:
    return [_surface(parse, i, i == 0) for i in indices]


def _subject_of(parse: ParseResult, head: int, prefer_expl: bool = False) -> int | None:
    kids = parse.children(head)
    expl = [c for c in kids if parse.tokens[c].rel == "expl"]
    subj = [c for c in kids if parse.tokens[c].rel in _SUBJECT_RELS]
    if prefer_expl and expl:
        return expl[0]
    return subj[0] if subj else (expl[0] if expl else None)


def _wh_phrase(parse: ParseResult, content: list[int]) -> tuple[str, list[int], int | None]:
    """Return (kind, phrase indices, head noun) for the fronted wh-phrase at index 0."""
    toks = parse.tokens
    wh = toks[0]
    w = wh.lower
    if w == "how" and len(content) > 1 and toks[1].lower in {"many", "much"}:
        noun = toks[1].head if toks[toks[1].head].upos in {"NOUN", "PROPN"} else None
        if noun is None or noun < 1:
            return "degree", [0, 1], None
        return "count", _extend_nmod(parse, list(range(0, noun + 1)), noun), noun
    if w in {"which", "what", "whose"} and wh.rel == "det":
        noun = wh.head
        return "det", _extend_nmod(parse, list(range(0, noun + 1)), noun), noun
    if w == "how" and len(content) > 1 and toks[1].upos in {"ADJ", "ADV"} and toks[0].head == 1:
        return "degree", [0, 1], None
    if w in {"what", "who", "whom", "which"}:
        return "pron", [0], None
    if w in _ADVERBIAL_SLOT:
        return "adv", [0], None
    raise UnsupportedQuestionError(f"unsupported wh-word {wh.form!r}")


def _extend_nmod(parse: ParseResult, phrase: list[int], noun: int) -> list[int]:
    """Grow a fronted noun phrase over the noun's right-hand nominal modifiers."""
    end = phrase[-1]
    for c in sorted(parse.children(noun)):
        if c <= end or parse.tokens[c].rel != "nmod":
            continue
        sub = parse.subtree(c)
        if min(sub) != end + 1:
            break
        end = max(sub)
    return list(range(phrase[0], end + 1))


def _mask_phrase(parse: ParseResult, kind: str, phrase: list[int], noun: int | None, subject: bool) -> str:
    if kind == "count":
        rest = [i for i in phrase if i > 1]
        return " ".join([MASK, *(_words(parse, rest))])
    if kind == "det":
        rest = [i for i in phrase if i > 0]
        w = parse.tokens[0].lower
        lead = MASK + "'s" if w == "whose" else "the " + MASK
        return " ".join([lead, *(_words(parse, rest))])
    if kind == "pron":
        return "the " + MASK if subject else MASK
    return MASK


def _finish(words: list[str]) -> str:
    s = clean_statement(detokenize(words))
    s = capitalize_first(s)
    if not s.endswith((".", "!")):
        s += "."
    if s.count(MASK) != 1:
        raise ConversionError(f"conversion produced {s.count(MASK)} answer slots: {s!r}")
    return s


def question_to_template(parse: ParseResult) -> str:
    """Convert a parsed question into a statement with exactly one ``[mask]``."""
    content = _content_indices(parse)
    if not content:
        raise UnsupportedQuestionError("empty question")
    toks = parse.tokens
    if MASK in parse.text:
        raise ConversionError("question already contains an answer slot")
    first = toks[0]
    if first.lower not in WH_WORDS:
        if first.upos == "AUX" or first.lower in _DO_FORMS or first.lower in _BE_FORMS:
            positive, _ = _yesno_words(parse)
            return _finish([MASK + ",", *positive])
        raise UnsupportedQuestionError(f"no wh-word and not auxiliary-initial: {parse.text!r}")

    kind, phrase, noun = _wh_phrase(parse, content)
    pset = set(phrase)
    rest = [i for i in content if i not in pset]
    root = parse.root_index

    # wh-phrase is the (copular) predicate: "What color is X?", "What is X?", "Where is X?"
    if root in pset or (kind in {"adv", "degree"} and root == 0):
        subj = _subject_of(parse, root)
        if subj is None:
            raise UnsupportedQuestionError("copular question without subject")
        s_idx = sorted(parse.subtree(subj) - pset)
        others = [i for i in rest if i not in s_idx]
        subj_words = _words(parse, s_idx)
        other_words = _words(parse, others)  # copula plus adverbs, in order
        if kind == "det":
            noun_words = _words(parse, [i for i in phrase if i > 0])
            if len(s_idx) == 1 and toks[s_idx[0]].lower in _DEMONSTRATIVES:
                return _finish([*subj_words, *other_words, "the", MASK, *noun_words])
            return _finish(["the", *noun_words, "of", *subj_words, *other_words, MASK])
        slot = _ADVERBIAL_SLOT.get(first.lower, MASK) if kind == "adv" and first.lower != "how" else MASK
        return _finish([*subj_words, *other_words, slot])

    subj = _subject_of(parse, root)
    expl = next((c for c in parse.children(root) if toks[c].rel == "expl"), None)

    # wh-phrase is the subject: "Which hand holds ...", "What is on the table?"
    if subj is not None and subj in pset:
        after = rest[0] if rest else None
        if kind == "count" and after is not None and toks[after].lower in _BE_FORMS:
            tail = [i for i in rest if i not in (after, expl)]
            return _finish(["there", toks[after].lower, _mask_phrase(parse, kind, phrase, noun, True),
                            *_words(parse, tail)])
        return _finish([_mask_phrase(parse, kind, phrase, noun, True), *_words(parse, rest)])

    # object / oblique wh-phrase with subject-auxiliary inversion
    aux = rest[0] if rest and toks[rest[0]].upos == "AUX" else None
    if subj is None:
        raise UnsupportedQuestionError("cannot locate the subject")
    s_idx = sorted(parse.subtree(subj) - pset)
    body = [i for i in rest if i not in s_idx and i != aux]
    words: list[tuple[int, str]] = []  # (token index or -1, surface)
    words += [(i, w) for i, w in zip(s_idx, _words(parse, s_idx))]
    verb_form = None
    if aux is not None:
        tense = _DO_FORMS.get(toks[aux].lower)
        if tense is None:
            words.append((aux, toks[aux].lower))
        else:
            verb_form = tense
    for i in body:
        w = _surface(parse, i, False)
        if verb_form is not None and i == root and toks[i].upos in {"VERB", "AUX"}:
            base = toks[i].lemma or w
            w = {"base": base, "3sg": third_person(base), "past": past_tense(base)}[verb_form]
        words.append((i, w))

    slot_words = _mask_phrase(parse, kind, phrase, noun, False)
    stranded = [i for i in body if toks[i].rel == "case" and toks[i].head in pset]
    if kind == "adv":
        words.append((-1, _ADVERBIAL_SLOT[first.lower]))
    elif stranded:
        at = next(k for k, (i, _) in enumerate(words) if i == stranded[-1])
        words.insert(at + 1, (-1, slot_words))
    else:
        anchor = root
        for c in parse.children(root):
            if toks[c].deprel == "compound:prt" and c == anchor + 1:
                anchor = c
        pos = next((k for k, (i, _) in enumerate(words) if i == anchor), None)
        if pos is None:
            words.append((-1, slot_words))
        else:
            words.insert(pos + 1, (-1, slot_words))
    return _finish([w for _, w in words])


def _yesno_words(parse: ParseResult) -> tuple[list[str], list[str]]:
    content = _content_indices(parse)
    toks = parse.tokens
    aux, root = 0, parse.root_index
    subj = _subject_of(parse, root, prefer_expl=True)
    if subj is None:
        raise UnsupportedQuestionError(f"no subject in yes/no question {parse.text!r}")
    s_idx = sorted(parse.subtree(subj) - {aux})
    body = [i for i in content if i not in s_idx and i != aux]
    a = toks[aux].lower
    subj_words = _words(parse, s_idx)
    body_words = [_surface(parse, i, False) for i in body]
    if a in _DO_FORMS and root != aux:
        base = toks[root].lemma or toks[root].form.lower()
        inflected = {"base": base, "3sg": third_person(base), "past": past_tense(base)}[_DO_FORMS[a]]
        positive = [*subj_words, *(inflected if i == root else w for i, w in zip(body, body_words))]
        negative = [*subj_words, a, "not", *(base if i == root else w for i, w in zip(body, body_words))]
    else:
        positive = [*subj_words, a, *body_words]
        negative = [*subj_words, a, "not", *body_words]
    return positive, negative


def question_to_yesno(parse: ParseResult) -> tuple[str, str]:
    """Affirming and negating statements for an auxiliary-initial question."""
    content = _content_indices(parse)
    if not content:
        raise UnsupportedQuestionError("empty question")
    first = parse.tokens[0]
    if not (first.upos == "AUX" or first.lower in _DO_FORMS or first.lower in _BE_FORMS):
        raise UnsupportedQuestionError(f"not an auxiliary-initial question: {parse.text!r}")
    positive, negative = _yesno_words(parse)
    return (capitalize_first(clean_statement(detokenize(positive))),
            capitalize_first(clean_statement(detokenize(negative))))
