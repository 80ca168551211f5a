"""Zero-shot VQA by prompting a dual encoder: template, answer filter, then alignment argmax."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

from .answers import (
    DEFAULT_K,
    MAX_DEMONSTRATIONS,
    FilterCache,
    FilteredAnswerSet,
    FilterMode,
    PromptSet,
    assemble_prompts,
    filter_top_k,
    filter_with_demos,
    score_answers,
)
from .dataset import AnswerType, AnswerVocabulary, VqaExample
from .errors import ClipZeroError, ConfigError, TemplateError
from .evaluation import VqaResult, build_qip_prompts, vqa_score
from .infill import InfillLM, SerializedLM
from .parsing import ParseProvider
from .scoring import EmbeddingCache, EncoderBundle, predict_zero_shot
from .templates import (
    DEFAULT_DEMOS_PER_TYPE,
    DemonstrationBank,
    MaskedTemplate,
    YesNoPromptPair,
    ensemble_template,
    generate_template_demo,
    generate_template_parsing,
    generate_yesno_prompts,
    yesno_prompts_from_parse,
)

log = logging.getLogger(__name__)

# Mean per-token log-probability below which the demonstration template is
# replaced by the parse-rule template.
DEFAULT_THRESHOLD = -1.0


@dataclass(frozen=True)
class TapcOptions:
    threshold: float = DEFAULT_THRESHOLD
    k: int = DEFAULT_K
    demos_per_type: int = DEFAULT_DEMOS_PER_TYPE
    no_answer_filter: bool = False
    qip_baseline: bool = False
    no_demo_template: bool = False
    no_parsing_template: bool = False
    demo_filter: bool = False  # condition answer filtering on filled pool demonstrations

    def __post_init__(self):
        if self.qip_baseline and (self.no_demo_template or self.no_parsing_template):
            raise ConfigError("qip_baseline already skips template generation; "
                              "it cannot be combined with no_demo_template/no_parsing_template")
        if self.no_demo_template and self.no_parsing_template:
            raise ConfigError("no_demo_template and no_parsing_template together leave no template source")
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.demos_per_type < 1:
            raise ConfigError("demos_per_type must be >= 1")


class TapcPipeline:
    """Builds prompt sets for questions and answers them with a dual encoder."""

    def __init__(
        self,
        lm: InfillLM,
        bundle: EncoderBundle,
        vocab: AnswerVocabulary,
        bank: DemonstrationBank,
        parser: ParseProvider | None = None,
        options: TapcOptions = TapcOptions(),
        cache: EmbeddingCache | None = None,
        filter_cache: FilterCache | None = None,
        demo_pool: Sequence[VqaExample] = (),
    ):
        self.lm = lm if isinstance(lm, SerializedLM) else SerializedLM(lm)
        self.bundle = bundle
        self.vocab = vocab
        self.bank = bank
        self.parser = parser
        self.options = options
        self.cache = cache
        self.filter_cache = filter_cache
        self.demo_pool = tuple(demo_pool)
        self._templates: dict[str, MaskedTemplate | YesNoPromptPair] = {}

    # templates

    def _parse_template(self, question: str, qtype: str) -> MaskedTemplate | Exception:
        if self.parser is None:
            return TemplateError("no parse provider configured")
        try:
            return generate_template_parsing(self.parser(question), question, qtype)
        except ClipZeroError as e:
            return e

    def _demo_template(self, question: str, qtype: str) -> MaskedTemplate | Exception:
        demos = self.bank.demos_for(question, self.options.demos_per_type)
        if not demos:
            return TemplateError(f"no demonstrations match {question!r}")
        try:
            return generate_template_demo(self.lm, question, demos, qtype)
        except ClipZeroError as e:
            return e

    def _yesno(self, question: str) -> YesNoPromptPair:
        errors = []
        if not self.options.no_demo_template:
            pos, neg = self.bank.yesno_demos_for(question, self.options.demos_per_type)
            try:
                return generate_yesno_prompts(question, pos, neg, self.lm)
            except ClipZeroError as e:
                errors.append(e)
        if not self.options.no_parsing_template and self.parser is not None:
            try:
                return yesno_prompts_from_parse(self.parser(question))
            except ClipZeroError as e:
                errors.append(e)
        raise TemplateError(f"no yes/no prompts for {question!r}: {errors}")

    def template_for(self, example: VqaExample) -> MaskedTemplate | YesNoPromptPair:
        """Template for a question; yes/no questions get a positive/negative pair."""
        key = f"{example.answer_type.value}|{example.question}"
        if key in self._templates:
            return self._templates[key]
        if example.answer_type is AnswerType.YES_NO:
            tmpl: MaskedTemplate | YesNoPromptPair = self._yesno(example.question)
        else:
            opts = self.options
            demo = None if opts.no_demo_template else self._demo_template(example.question, example.question_type)
            parsing = None if opts.no_parsing_template else self._parse_template(example.question, example.question_type)
            tmpl = ensemble_template(demo, parsing, opts.threshold)
        self._templates[key] = tmpl
        return tmpl

    # answers

    def filled_demos(self, example: VqaExample) -> list[str]:
        """Pool statements of the same question type with their gold answers filled in."""
        out = []
        for other in self.demo_pool:
            if other.question_id == example.question_id or other.question_type != example.question_type:
                continue
            if other.answer_type is AnswerType.YES_NO:
                continue
            try:
                tmpl = self.template_for(other)
            except ClipZeroError:
                continue
            out.append(tmpl.fill(other.majority_answer))
            if len(out) == MAX_DEMONSTRATIONS:
                break
        return out

    def filtered_answers(self, example: VqaExample, template: MaskedTemplate) -> FilteredAnswerSet:
        opts = self.options
        if opts.no_answer_filter:
            answers = tuple(self.vocab)
            return FilteredAnswerSet(answers, len(answers))
        demos = self.filled_demos(example) if opts.demo_filter else []
        mode = FilterMode.DEMONSTRATED if demos else FilterMode.PLAIN
        key = None
        if self.filter_cache is not None:
            key = FilterCache.key(template.text, self.vocab.fingerprint(), mode, demos, opts.k, self.lm.name)
            hit = self.filter_cache.get(key)
            if hit is not None:
                return hit
        if demos:
            result = filter_with_demos(self.lm, template, demos, self.vocab, opts.k)
        else:
            result = filter_top_k(score_answers(self.lm, template, self.vocab), opts.k)
        if key is not None:
            self.filter_cache.put(key, result)
        return result

    def prompts_for(self, example: VqaExample) -> PromptSet:
        if self.options.qip_baseline:
            answers = ["yes", "no"] if example.answer_type is AnswerType.YES_NO else list(self.vocab)
            return build_qip_prompts(example.question, answers)
        tmpl = self.template_for(example)
        if isinstance(tmpl, YesNoPromptPair):
            return assemble_prompts(tmpl)
        return assemble_prompts(tmpl, self.filtered_answers(example, tmpl))

    # prediction

    def answer(self, example: VqaExample, prompt_set: PromptSet | None = None) -> VqaResult:
        """Predict and score one question; any pipeline failure yields score 0 with the error recorded."""
        try:
            ps = prompt_set if prompt_set is not None else self.prompts_for(example)
            pred, _ = predict_zero_shot(self.bundle, example.image_ref, ps, self.cache)
            provenance = _provenance(ps)
            return VqaResult(example.question_id, pred, vqa_score(pred, example.human_answers),
                             example.answer_type, provenance)
        except Exception as e:  # noqa: BLE001 - recorded per question, run continues
            log.warning("question %s failed: %s", example.question_id, e)
            return VqaResult(example.question_id, "", 0.0, example.answer_type, "", f"{type(e).__name__}: {e}")

    def run(self, examples: Sequence[VqaExample], workers: int = 1,
            progress: Callable[[int], None] | None = None) -> list[VqaResult]:
        if workers <= 1:
            out = []
            for i, ex in enumerate(examples):
                out.append(self.answer(ex))
                if progress:
                    progress(i + 1)
            return out
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(self.answer, examples))


def _provenance(ps: PromptSet) -> str:
    t = ps.template
    if t is None:
        return f"qip:{len(ps)}"
    if isinstance(t, YesNoPromptPair):
        return f"yesno:{t.source.value}"
    return f"{t.source.value}:{len(ps)}:{t.text}"
