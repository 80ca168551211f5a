"""Fixture builders shared by the test modules."""

from __future__ import annotations

import json
import random
from pathlib import Path

import numpy as np

from clipzero.dataset import EntailmentLabel, VeExample

DATA = Path(__file__).parent / "data"
PARSES = DATA / "question_parses.conllu"

# (question, answer type, plausible answers); every question has a parse in PARSES
QUESTIONS = [
    ("Which hand holds the racket?", "other", ["left", "right"]),
    ("How many dogs are there?", "number", ["2", "3", "1"]),
    ("What color is the fence behind the man?", "other", ["white", "brown", "red"]),
    ("What is on the table?", "other", ["plate", "cup", "laptop"]),
    ("Does this look like a happy occasion?", "yes/no", ["yes", "no"]),
    ("What room is this?", "other", ["kitchen", "bathroom"]),
    ("How many people are wearing plaid shirts?", "number", ["2", "4"]),
    ("Is the man wearing a hat?", "yes/no", ["yes", "no"]),
    ("Why is the car being towed?", "other", ["accident", "parking"]),
    ("What is the man holding?", "other", ["umbrella", "bat", "phone"]),
    ("What sport is being played?", "other", ["tennis", "baseball"]),
    ("Where is the cat?", "other", ["couch", "table"]),
]

VOCAB = [
    "yes", "no", "0", "1", "2", "3", "4", "5", "left", "right", "white", "brown", "red", "blue", "green",
    "plate", "cup", "laptop", "kitchen", "bathroom", "accident", "parking", "umbrella", "bat", "phone",
    "tennis", "baseball", "couch", "table", "dog", "cat", "sunny", "night", "pizza",
]


def write_vqa(dirpath: Path, n: int, seed: int = 0, subtype: str = "val2014", stem: str = "val") -> tuple[Path, Path]:
    """Questions/annotations files in the official VQAv2 layout."""
    rng = random.Random(seed)
    questions, annotations = [], []
    for i in range(n):
        q, atype, answers = QUESTIONS[i % len(QUESTIONS)]
        qid = seed * 100000 + i
        image_id = 1000 + i
        gold = rng.choice(answers)
        human = [gold] * rng.randint(2, 10)
        human += [rng.choice(answers) for _ in range(10 - len(human))]
        questions.append({"question_id": qid, "image_id": image_id, "question": q})
        annotations.append({
            "question_id": qid, "image_id": image_id, "answer_type": atype,
            "multiple_choice_answer": gold, "question_type": "",
            "answers": [{"answer": a, "answer_confidence": "yes", "answer_id": j + 1} for j, a in enumerate(human)],
        })
    dirpath.mkdir(parents=True, exist_ok=True)
    qf, af = dirpath / f"{stem}_questions.json", dirpath / f"{stem}_annotations.json"
    qf.write_text(json.dumps({"data_subtype": subtype, "questions": questions}))
    af.write_text(json.dumps({"data_subtype": subtype, "annotations": annotations}))
    return qf, af


def write_vocab(path: Path) -> Path:
    path.write_text("\n".join(VOCAB) + "\n")
    return path


LABEL_ORDER = (EntailmentLabel.ENTAILMENT, EntailmentLabel.CONTRADICTION, EntailmentLabel.NEUTRAL)


def aligned_fixture(groups: int = 300, dim: int = 16, seed: int = 0, noise: float = 0.075):
    """Synthetic aligned-modality entailment data.

    Every image embeds exactly like its caption. Each hypothesis occurs once
    with each label: the entailing premise lies near the hypothesis, the
    contradicting one near its negation and the neutral one is orthogonal.
    Hypotheses alone therefore carry no label information.
    """
    rng = np.random.default_rng(seed)
    text, image, examples = {}, {}, []
    for g in range(groups):
        h = rng.standard_normal(dim)
        h /= np.linalg.norm(h)
        r = rng.standard_normal(dim)
        r -= (r @ h) * h
        r /= np.linalg.norm(r)
        text[f"hypothesis {g}"] = h
        premises = (h + noise * rng.standard_normal(dim), -h + noise * rng.standard_normal(dim), r)
        for label, p in zip(LABEL_ORDER, premises):
            cap, ref = f"caption {g} {label.value}", f"{g}_{label.value}.jpg"
            text[cap] = p
            image[ref] = p
            examples.append(VeExample(ref, cap, f"hypothesis {g}", label, f"{g}-{label.value}"))
    image["<black-image>"] = rng.standard_normal(dim)
    return examples, text, image


def write_ve(dirpath: Path, groups: int = 120, seed: int = 0) -> dict[str, Path]:
    """SNLI-VE style jsonl splits plus an .npz of fixed vectors for the lookup encoder."""
    examples, text, image = aligned_fixture(groups, seed=seed)
    dirpath.mkdir(parents=True, exist_ok=True)
    n = len(examples)
    cut = {"train": examples[: n * 3 // 5], "dev": examples[n * 3 // 5 : n * 4 // 5], "test": examples[n * 4 // 5 :]}
    out = {}
    for name, part in cut.items():
        p = dirpath / f"snli_ve_{name}.jsonl"
        p.write_text("".join(json.dumps({"Flickr30K_ID": e.premise_image_ref, "sentence1": e.premise_caption,
                                         "sentence2": e.hypothesis, "gold_label": e.label.value,
                                         "pairID": e.pair_id}) + "\n" for e in part))
        out[name] = p
    vec = {f"text:{k}": v for k, v in text.items()} | {f"image:{k}": v for k, v in image.items()}
    np.savez(dirpath / "vectors.npz", **vec)
    out["vectors"] = dirpath / "vectors.npz"
    return out


def toy_color_task(seed: int = 0, n_per: int = 40, dim: int = 4, noise: float = 0.6, offset: float = 1.0):
    """Three-answer colour task for the toy dual encoder.

    Prompts embed at per-answer prototypes; images sit near their prototype
    plus a shared offset the encoder has to learn away.
    Returns (examples, prompt set, image inputs, text inputs).
    """
    from clipzero.answers import assemble_prompts
    from clipzero.dataset import AnswerType, VqaExample
    from clipzero.templates import MaskedTemplate, TemplateSource

    rng = np.random.default_rng(seed)
    answers = ["red", "blue", "green"]
    # one question type per answer, so each answer is its own way
    questions = {"red": ("What color is it?", "what color is"),
                 "blue": ("What color is the car?", "what color is the"),
                 "green": ("What color are the leaves?", "what color are the")}
    protos = {a: rng.standard_normal(dim) for a in answers}
    shift = offset * rng.standard_normal(dim)
    ps = assemble_prompts(MaskedTemplate("The color is [mask].", TemplateSource.PARSING), answers)
    text_inputs = {p: protos[a] for a, p in ps.entries}
    images, examples = {}, []
    for a in answers:
        for i in range(n_per):
            ref = f"img-{a}-{i}"
            images[ref] = protos[a] + shift + noise * rng.standard_normal(dim)
            examples.append(VqaExample(f"q{a}{i}", ref, *questions[a], AnswerType.OTHER, (a,) * 10, a))
    return examples, ps, images, text_inputs
