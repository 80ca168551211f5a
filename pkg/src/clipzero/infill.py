"""Span-infilling language model adapters.

An adapter fills the sentinel ``<extra_id_0>`` in a context. It must support
two calls: beam generation returning scored spans, and exact scoring of
given spans. Scores are natural-log probabilities.
"""

from __future__ import annotations

import hashlib
import math
import re
import threading
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

SENTINEL = "<extra_id_0>"
_SPECIAL = re.compile(r"<extra_id_\d+>|</s>|<pad>|<unk>")


@dataclass(frozen=True)
class Generation:
    text: str
    score: float  # mean per-token log-probability of the span
    num_tokens: int = 0


class InfillLM(Protocol):
    name: str

    def generate(self, request: str, *, num_beams: int, num_return_sequences: int,
                 max_span_length: int) -> list[Generation]: ...

    def span_log_probs(self, contexts: Sequence[str], spans: Sequence[str],
                       max_span_length: int) -> list[float]: ...


def strip_special_tokens(text: str) -> str:
    return " ".join(_SPECIAL.sub(" ", text).split())


class SerializedLM:
    """Wrap an adapter so calls through this handle never overlap."""

    def __init__(self, lm: InfillLM):
        self.lm = lm
        self.name = lm.name
        self._lock = threading.Lock()

    def generate(self, request, **kw):
        with self._lock:
            return self.lm.generate(request, **kw)

    def span_log_probs(self, contexts, spans, max_span_length):
        with self._lock:
            return self.lm.span_log_probs(contexts, spans, max_span_length)


def _whitespace_tokens(span: str) -> int:
    return len(span.split())


class ScriptedInfillLM:
    """Deterministic test double.

    ``generations`` maps a request to its beam outputs (or is a callable);
    ``scorer(context, span)`` gives the span log-probability. Spans longer
    than ``max_span_length`` whitespace tokens score ``-inf``.
    """

    def __init__(
        self,
        generations: dict[str, list[Generation]] | Callable[[str], list[Generation]] | None = None,
        scorer: Callable[[str, str], float] | None = None,
        name: str = "scripted",
    ):
        self._generations = generations or {}
        self._scorer = scorer or (lambda context, span: 0.0)
        self.name = name
        self.calls = 0

    def generate(self, request, *, num_beams=20, num_return_sequences=10, max_span_length=30):
        self.calls += 1
        if callable(self._generations):
            gens = self._generations(request)
        else:
            gens = self._generations.get(request, [])
        return list(gens)[:num_return_sequences]

    def span_log_probs(self, contexts, spans, max_span_length):
        self.calls += 1
        out = []
        for c, s in zip(contexts, spans, strict=True):
            out.append(-math.inf if _whitespace_tokens(s) > max_span_length else float(self._scorer(c, s)))
        return out


class IndexInfillLM(ScriptedInfillLM):
    """Scores every answer by its negated vocabulary position: a ranking-neutral LM."""

    def __init__(self, answers: Sequence[str], **kw):
        pos = {a: i for i, a in enumerate(answers)}
        super().__init__(scorer=lambda c, s: -float(pos.get(s, len(pos))), name="index", **kw)


def _unit_hash(*parts: str) -> float:
    h = hashlib.sha256("\x1f".join(parts).encode()).digest()
    return int.from_bytes(h[:8], "little") / 2**64


class HashInfillLM:
    """Seeded pseudo-LM for desk-scale runs; every output is a pure function of the input.

    Generation proposes a masked restatement of the final question in the
    request plus a mask-free restatement, so both the template path and the
    yes/no path have something to pick from.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.name = f"hash-lm-{seed}"

    def generate(self, request, *, num_beams=20, num_return_sequences=10, max_span_length=30):
        body = request.replace(SENTINEL, "").strip()
        last = body.rsplit("?", 2)
        question = (last[-2] if len(last) >= 2 else body).split(".")[-1].strip()
        core = question[:1].lower() + question[1:] if question else "it"
        conf_a = -2.0 * _unit_hash(str(self.seed), request, "a")
        conf_b = -2.0 * _unit_hash(str(self.seed), request, "b")
        gens = [Generation(f"The answer to {core} is [mask].", conf_a, len(core.split()) + 6),
                Generation(f"It is true that {core}", conf_b, len(core.split()) + 4)]
        gens.sort(key=lambda g: -g.score)
        return gens[:num_return_sequences]

    def span_log_probs(self, contexts, spans, max_span_length):
        out = []
        for c, s in zip(contexts, spans, strict=True):
            if _whitespace_tokens(s) > max_span_length:
                out.append(-math.inf)
            else:
                out.append(-10.0 * _unit_hash(str(self.seed), c, s))
        return out


class T5InfillLM:
    """Span infilling with a Hugging Face T5 checkpoint (``t5-large`` by default)."""

    def __init__(self, model_name: str = "t5-large", device: str = "cpu", batch_size: int = 128,
                 model=None, tokenizer=None):
        import torch
        from transformers import AutoTokenizer, T5ForConditionalGeneration

        self.torch = torch
        self.tokenizer = tokenizer or AutoTokenizer.from_pretrained(model_name)
        self.model = (model or T5ForConditionalGeneration.from_pretrained(model_name)).to(device).eval()
        self.device = device
        self.batch_size = batch_size
        self.name = f"t5:{model_name}"
        self._s0 = self.tokenizer.convert_tokens_to_ids("<extra_id_0>")
        self._s1 = self.tokenizer.convert_tokens_to_ids("<extra_id_1>")

    def count_tokens(self, span: str) -> int:
        return len(self.tokenizer(span, add_special_tokens=False).input_ids)

    def generate(self, request, *, num_beams=20, num_return_sequences=10, max_span_length=30):
        torch = self.torch
        enc = self.tokenizer(request, return_tensors="pt").to(self.device)
        with torch.no_grad():
            out = self.model.generate(
                **enc,
                num_beams=num_beams,
                num_return_sequences=num_return_sequences,
                max_new_tokens=max_span_length + 2,
                output_scores=True,
                return_dict_in_generate=True,
            )
        trans = self.model.compute_transition_scores(
            out.sequences, out.scores, getattr(out, "beam_indices", None), normalize_logits=False
        )
        gens = []
        stop = {self._s1, self.tokenizer.eos_token_id, self.tokenizer.pad_token_id}
        for seq, sc in zip(out.sequences.tolist(), trans.tolist()):
            # seq[0] is the decoder start token; sc[j] scores seq[j + 1]
            span_ids, span_scores = [], []
            started = False
            for tok, s in zip(seq[1:], sc):
                if tok == self._s0 and not started:
                    started = True
                    continue
                if tok in stop:
                    break
                if started:
                    span_ids.append(tok)
                    span_scores.append(s)
            if not span_ids:
                continue
            text = self.tokenizer.decode(span_ids, skip_special_tokens=True)
            gens.append(Generation(text.strip(), sum(span_scores) / len(span_scores), len(span_ids)))
        return gens

    def span_log_probs(self, contexts, spans, max_span_length):
        torch = self.torch
        out = [0.0] * len(spans)
        todo = []
        for i, s in enumerate(spans):
            ids = self.tokenizer(s, add_special_tokens=False).input_ids
            if len(ids) > max_span_length:
                out[i] = -math.inf
            else:
                todo.append((i, ids))
        eos = self.tokenizer.eos_token_id
        for b in range(0, len(todo), self.batch_size):
            chunk = todo[b : b + self.batch_size]
            enc = self.tokenizer([contexts[i] for i, _ in chunk], return_tensors="pt", padding=True).to(self.device)
            labels = [[self._s0, *ids, self._s1, eos] for _, ids in chunk]
            width = max(len(x) for x in labels)
            lab = torch.full((len(chunk), width), -100, dtype=torch.long)
            span_mask = torch.zeros((len(chunk), width), dtype=torch.bool)
            for r, ((_, ids), row) in enumerate(zip(chunk, labels)):
                lab[r, : len(row)] = torch.tensor(row)
                span_mask[r, 1 : 1 + len(ids)] = True
            lab = lab.to(self.device)
            with torch.no_grad():
                logits = self.model(**enc, labels=lab).logits
            logp = torch.log_softmax(logits.float(), dim=-1)
            picked = logp.gather(-1, lab.clamp(min=0).unsqueeze(-1)).squeeze(-1)
            sums = (picked * span_mask.to(self.device)).sum(-1).tolist()
            for (i, _), v in zip(chunk, sums):
                out[i] = float(v)
        return out
