import math

import pytest

from clipzero.errors import (
    ConversionError,
    GenerationError,
    InvalidInputError,
    NoTemplateError,
    UnsupportedQuestionError,
    YesNoGenerationError,
)
from clipzero.infill import SENTINEL, Generation, HashInfillLM, ScriptedInfillLM
from clipzero.parsing import ParseResult, Token, parse_conllu, question_to_template, question_to_yesno, to_conllu
from clipzero.templates import (
    DemonstrationBank,
    MaskedTemplate,
    TemplateSource,
    build_infill_request,
    ensemble_template,
    generate_template_demo,
    generate_template_parsing,
    generate_yesno_prompts,
    yesno_prompts_from_parse,
)
from clipzero.text import MASK

from helpers import PARSES

CORPUS = list(parse_conllu(PARSES.read_text()))


@pytest.fixture(scope="module")
def bank():
    return DemonstrationBank.load()


def test_corpus_size_and_coverage():
    texts = [c["text"] for c, _ in CORPUS]
    assert len(texts) >= 20
    for prefix in ("What color is", "Why is the", "Which", "How many", "Does this"):
        assert any(t.startswith(prefix) for t in texts), prefix


@pytest.mark.parametrize("comments, parse", CORPUS, ids=[c["text"] for c, _ in CORPUS])
def test_parsing_converter(comments, parse):
    expected = comments["expected"]
    if expected == "!unsupported":
        with pytest.raises(UnsupportedQuestionError):
            question_to_template(parse)
        return
    out = question_to_template(parse)
    assert out == expected
    assert out.count(MASK) == 1


@pytest.mark.parametrize("comments, parse", [c for c in CORPUS if "positive" in c[0]],
                         ids=[c["text"] for c, _ in CORPUS if "positive" in c])
def test_parsing_yesno_pairs(comments, parse):
    assert question_to_yesno(parse) == (comments["positive"], comments["negative"])


def test_conllu_roundtrip():
    _, parse = CORPUS[0]
    again = next(parse_conllu(to_conllu(parse, text="x")))[1]
    assert again == parse


def test_parse_result_validates_roots():
    with pytest.raises(InvalidInputError):
        ParseResult((Token("a", "DET", -1, "root"), Token("b", "NOUN", -1, "root")), 0)


def test_conversion_error_when_mask_would_be_lost():
    # a bare interjection: no wh-word, not auxiliary-initial
    parse = ParseResult((Token("Hello", "INTJ", -1, "root"), Token("?", "PUNCT", 0, "punct")), 0)
    with pytest.raises((UnsupportedQuestionError, ConversionError)):
        question_to_template(parse)


def test_bank_holds_the_reference_demonstrations(bank):
    assert len(bank.demos_for("What color is the statue near the building?")) == 4
    assert bank.demos_for("How many engines does it have?")[0][1].startswith("There are [mask] unopened rolls")
    pos, neg = bank.yesno_demos_for("Does this pizza look hot?")
    assert len(pos) == 2 and len(neg) == 4
    assert bank.demos_for("Zebras galloping?") == []


def test_bank_rejects_bad_entries(tmp_path):
    p = tmp_path / "bank.yaml"
    p.write_text('which:\n  - ["Which one?", "No slot here."]\n')
    with pytest.raises(InvalidInputError):
        DemonstrationBank.load(p)
    p.write_text('not a type:\n  - ["Q?", "The [mask]."]\n')
    with pytest.raises(InvalidInputError):
        DemonstrationBank.load(p, taxonomy=["which"])


def test_build_infill_request(bank):
    q = "What color is the statue near the building?"
    demos = bank.demos_for(q)
    req = build_infill_request(q, demos)
    assert req.endswith(f"{q} {SENTINEL}")
    assert req.startswith("What color is the floor of this area? The color of floor of this area is [mask].")
    one = build_infill_request(q, demos[:1])
    assert one == f"{demos[0][0]} {demos[0][1]} {q} {SENTINEL}"
    how_many = bank.demos_for("How many dogs are there?")
    assert "There are [mask] unopened rolls of paper in the picture." in build_infill_request("How many dogs?", how_many)
    with pytest.raises(InvalidInputError):
        build_infill_request(q, [])


def test_generate_template_demo_picks_best_single_mask():
    lm = ScriptedInfillLM(lambda req: [
        Generation("The color of the fence behind the man is [mask] [mask].", -0.1),
        Generation("The color of the fence behind the man is [mask].", -0.4),
        Generation("The fence is [mask].", -0.9),
        Generation("no slot", -0.05),
    ])
    t = generate_template_demo(lm, "What color is the fence behind the man?", [("Q?", "A [mask].")])
    assert t.text == "The color of the fence behind the man is [mask]."
    assert t.source is TemplateSource.DEMO and t.confidence == -0.4


def test_generate_template_demo_passthrough_and_sentinels():
    lm = ScriptedInfillLM(lambda req: [Generation("<extra_id_0> X [mask]. </s>", -0.3)])
    t = generate_template_demo(lm, "Q?", [("Q1?", "S [mask].")])
    assert t.text == "X [mask]." and "<extra_id" not in t.text


def test_generate_template_demo_failure():
    lm = ScriptedInfillLM(lambda req: [Generation("nothing", -0.1)])
    with pytest.raises(GenerationError):
        generate_template_demo(lm, "Q?", [("Q1?", "S [mask].")])


def test_generate_template_parsing():
    comments, parse = next(c for c in CORPUS if c[0]["text"] == "How many engines does the closest airplane have?")
    t = generate_template_parsing(parse, comments["text"], "how many")
    assert t.text == "The closest airplane has [mask] engines."
    assert t.source is TemplateSource.PARSING and t.confidence is None


def test_masked_template_invariants():
    with pytest.raises(InvalidInputError):
        MaskedTemplate("no slot", TemplateSource.PARSING)
    with pytest.raises(InvalidInputError):
        MaskedTemplate("[mask] and [mask]", TemplateSource.PARSING)
    with pytest.raises(InvalidInputError):
        MaskedTemplate("The [mask].", TemplateSource.DEMO, math.inf)


DEMO = MaskedTemplate("Demo [mask].", TemplateSource.DEMO, -0.2)
LOW = MaskedTemplate("Demo [mask].", TemplateSource.DEMO, -3.0)
PARSING = MaskedTemplate("Parsing [mask].", TemplateSource.PARSING)


@pytest.mark.parametrize("demo, parsing, expected", [
    (DEMO, PARSING, DEMO),
    (LOW, PARSING, PARSING),
    (GenerationError("x"), PARSING, PARSING),
    (LOW, UnsupportedQuestionError("x"), LOW),
    (None, PARSING, PARSING),
])
def test_ensemble(demo, parsing, expected):
    assert ensemble_template(demo, parsing, -1.0) == expected


def test_ensemble_both_failed():
    with pytest.raises(NoTemplateError):
        ensemble_template(GenerationError("a"), UnsupportedQuestionError("b"), -1.0)


def test_raising_threshold_never_switches_back_to_demo():
    prev_parsing = False
    for threshold in [-5.0, -2.0, -1.0, -0.5, -0.1, 0.0]:
        chosen = ensemble_template(LOW, PARSING, threshold)
        if prev_parsing:
            assert chosen is PARSING
        prev_parsing = chosen is PARSING


def test_generate_yesno_prompts_two_passes(bank):
    q = "Does this look like a happy occasion?"
    pos, neg = bank.yesno_demos_for(q)
    outputs = {build_infill_request(q, pos): [Generation("This looks like a happy occasion", -0.2)],
               build_infill_request(q, neg): [Generation("This does not look like a happy occasion", -0.3)]}
    pair = generate_yesno_prompts(q, pos, neg, ScriptedInfillLM(outputs))
    assert (pair.positive, pair.negative) == ("This looks like a happy occasion",
                                              "This does not look like a happy occasion")


def test_generate_yesno_failure(bank):
    q = "Does this transportation run on gasoline?"
    pos, neg = bank.yesno_demos_for(q)
    with pytest.raises(YesNoGenerationError):
        generate_yesno_prompts(q, pos, neg, ScriptedInfillLM({}))
    with pytest.raises(YesNoGenerationError):
        generate_yesno_prompts(q, pos, [], HashInfillLM())


def test_yesno_from_parse():
    _, parse = next(c for c in CORPUS if c[0]["text"] == "Does this transportation run on gasoline?")
    pair = yesno_prompts_from_parse(parse)
    assert pair.negative == "This transportation does not run on gasoline"


def test_template_generation_ignores_answers_and_images():
    lm = HashInfillLM(3)
    q = "Which hand holds the racket?"
    demos = [("Which foot is lifted in the air?", "The [mask] foot is lifted in the air.")]
    assert generate_template_demo(lm, q, demos) == generate_template_demo(HashInfillLM(3), q, demos)
