"""Few-shot fine-tuning of bias and normalization parameters (plus BitFit/full baselines)."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .answers import PromptSet
from .dataset import FewShotPool, VqaExample, split_support_query
from .errors import ClipZeroError, ConfigError, InvalidInputError, NonFiniteLossError, TaggingError
from .evaluation import vqa_score
from .scoring import ParamInfo, ParamKind, TorchBundle
from .text import normalize_answer

log = logging.getLogger(__name__)


class TrainMode(str, Enum):
    BINOR = "binor"
    BITFIT = "bitfit"
    FULL = "full"


MODE_KINDS = {
    TrainMode.BINOR: frozenset({ParamKind.BIAS, ParamKind.NORM_GAIN, ParamKind.NORM_SHIFT}),
    TrainMode.BITFIT: frozenset({ParamKind.BIAS, ParamKind.NORM_SHIFT}),
    TrainMode.FULL: frozenset(ParamKind),
}


@dataclass(frozen=True)
class SelectionCounts:
    bias_count: int  # linear/projection biases plus normalization shifts
    norm_count: int  # normalization gains plus shifts
    total_selected: int
    total_params: int


@dataclass(frozen=True)
class TrainableSelection:
    mode: TrainMode
    selected: tuple[str, ...]
    counts: SelectionCounts

    def __contains__(self, name: str) -> bool:
        return name in set(self.selected)


def select_trainable(bundle: TorchBundle | Sequence[ParamInfo], mode: TrainMode | str) -> TrainableSelection:
    """Choose the trainable parameters for ``mode`` and freeze the rest.

    Accepts a torch-backed bundle (whose ``requires_grad`` flags are set) or a
    bare parameter list such as a checkpoint manifest. Any parameter without
    a kind aborts the selection with every parameter left frozen.
    """
    mode = TrainMode(mode)
    params = list(bundle.parameters()) if hasattr(bundle, "parameters") else list(bundle)
    torch_bundle = bundle if isinstance(bundle, TorchBundle) else None
    if torch_bundle is not None:
        for _, p in torch_bundle.named_tensors():
            p.requires_grad_(False)
    untagged = [p.name for p in params if p.kind is None]
    if untagged:
        raise TaggingError(f"{len(untagged)} untagged parameter(s), e.g. {untagged[0]!r}")
    kinds = MODE_KINDS[mode]
    selected = tuple(p.name for p in params if p.kind in kinds)
    by_kind = {k: sum(p.numel for p in params if p.kind is k) for k in ParamKind}
    counts = SelectionCounts(
        bias_count=by_kind[ParamKind.BIAS] + by_kind[ParamKind.NORM_SHIFT],
        norm_count=by_kind[ParamKind.NORM_GAIN] + by_kind[ParamKind.NORM_SHIFT],
        total_selected=sum(p.numel for p in params if p.kind in kinds),
        total_params=sum(p.numel for p in params),
    )
    if torch_bundle is not None:
        chosen = set(selected)
        for name, p in torch_bundle.named_tensors():
            p.requires_grad_(name in chosen)
    return TrainableSelection(mode, selected, counts)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 2e-5
    adam_epsilon: float = 1e-8
    adam_betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 2.0
    weight_decay: float = 0.001
    init_temperature: float = 0.07
    max_temperature: float = 100.0  # upper bound on the logit scale (inverse temperature)
    filtered_answers_k: int = 200
    seed: int = 0
    C: int | None = None
    proportion: float = 0.75
    inject_gold: bool = True

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(self.adam_betas))
        positives = {k: getattr(self, k) for k in ("epochs", "batch_size", "learning_rate", "adam_epsilon",
                                                   "grad_clip", "init_temperature", "max_temperature",
                                                   "filtered_answers_k")}
        bad = [k for k, v in positives.items() if not v > 0]
        if bad:
            raise ConfigError(f"must be positive: {', '.join(bad)}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not all(0 <= b < 1 for b in self.adam_betas):
            raise ConfigError(f"adam_betas out of range: {self.adam_betas}")
        if 1.0 / self.init_temperature > self.max_temperature:
            raise ConfigError("initial logit scale exceeds its maximum")
        if not 0 < self.proportion < 1:
            raise ConfigError(f"proportion must lie in (0, 1), got {self.proportion}")

    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# labels


class SkipExample(ClipZeroError):
    """Gold answer missing from the prompt set and injection disabled."""

    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message)


@dataclass
class InjectionCounter:
    injected: int = 0
    skipped: int = 0


def _answer_index(prompt_set: PromptSet, answer: str) -> int | None:
    target = normalize_answer(answer)
    for i, a in enumerate(prompt_set.answers):
        if normalize_answer(a) == target:
            return i
    return None


def map_label(example: VqaExample, prompt_set: PromptSet, *, inject: bool = True,
              counter: InjectionCounter | None = None) -> tuple[int, PromptSet]:
    idx = _answer_index(prompt_set, example.majority_answer)
    if idx is not None:
        return idx, prompt_set
    template = prompt_set.template
    if not inject or template is None or not hasattr(template, "fill"):
        if counter is not None:
            counter.skipped += 1
        raise SkipExample(f"gold answer {example.majority_answer!r} not among the prompts of {example.question_id}")
    if counter is not None:
        counter.injected += 1
    grown = prompt_set.with_answer(example.majority_answer, template.fill(example.majority_answer))
    return len(prompt_set), grown


def map_labels(examples: Sequence[VqaExample], prompt_sets: Sequence[PromptSet], *, inject: bool = True,
               counter: InjectionCounter | None = None) -> tuple[list[int], list[PromptSet]]:
    """Label of each example = position of its gold answer's prompt.

    Missing gold answers are appended to the prompt set when ``inject`` is on;
    otherwise :class:`SkipExample` is raised carrying the example's position.
    """
    if len(examples) != len(prompt_sets):
        raise InvalidInputError("examples and prompt sets differ in length")
    labels, sets = [], []
    for i, (ex, ps) in enumerate(zip(examples, prompt_sets)):
        try:
            label, ps = map_label(ex, ps, inject=inject, counter=counter)
        except SkipExample as e:
            e.index = i
            raise
        labels.append(label)
        sets.append(ps)
    return labels, sets


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainItem:
    image: Any
    prompt_set: PromptSet
    label: int
    example: VqaExample | None = None


def _selected_tensors(bundle: TorchBundle, selection: TrainableSelection):
    chosen = set(selection.selected)
    return [(n, p) for n, p in bundle.named_tensors() if n in chosen]


def make_optimizer(bundle: TorchBundle, selection: TrainableSelection, config: TrainConfig):
    """Adam over the selected parameters (with weight decay) and the logit scale (without)."""
    import torch

    groups = [{"params": [p for _, p in _selected_tensors(bundle, selection)], "weight_decay": config.weight_decay},
              {"params": [bundle.scale], "weight_decay": 0.0}]
    groups = [g for g in groups if g["params"]]
    return torch.optim.Adam(groups, lr=config.learning_rate, betas=config.adam_betas, eps=config.adam_epsilon)


def batch_logits(bundle: TorchBundle, batch: Sequence[TrainItem]):
    """Per-example logit vectors ``scale * <image, prompt_i>`` over that example's own prompts."""
    import torch.nn.functional as F

    img = F.normalize(bundle.visual_features([it.image for it in batch]), dim=-1)
    out = []
    for i, it in enumerate(batch):
        txt = F.normalize(bundle.text_features(it.prompt_set.prompts), dim=-1)
        out.append(bundle.scale * (txt @ img[i]))
    return out


def batch_loss(bundle: TorchBundle, batch: Sequence[TrainItem]):
    import torch
    import torch.nn.functional as F

    losses = [F.cross_entropy(lg.unsqueeze(0), torch.tensor([it.label])) for lg, it in zip(batch_logits(bundle, batch), batch)]
    return torch.stack(losses)


def training_step(bundle: TorchBundle, selection: TrainableSelection, batch: Sequence[TrainItem],
                  config: TrainConfig, optimizer=None) -> float:
    """One clipped Adam step on the selected parameters; returns the mean loss."""
    import torch

    if not batch:
        raise InvalidInputError("empty batch")
    if len(batch) > config.batch_size:
        raise InvalidInputError(f"batch of {len(batch)} exceeds batch_size={config.batch_size}")
    if optimizer is None:
        optimizer = make_optimizer(bundle, selection, config)
    bundle.module.eval()  # keep normalization statistics fixed; only parameters move
    optimizer.zero_grad(set_to_none=True)
    per_example = batch_loss(bundle, batch)
    loss = per_example.mean()
    if not torch.isfinite(loss):
        raise NonFiniteLossError("non-finite training loss", {
            "per_example": per_example.detach().tolist(),
            "logit_scale": bundle.logit_scale,
            "question_ids": [it.example.question_id if it.example else None for it in batch],
        })
    loss.backward()
    params = [p for g in optimizer.param_groups for p in g["params"]]
    torch.nn.utils.clip_grad_norm_(params, config.grad_clip)
    optimizer.step()
    bundle.max_scale = config.max_temperature
    bundle.clamp_scale()
    bundle.mark_updated()
    return float(loss.detach())


@dataclass
class EpochRecord:
    epoch: int
    support_loss: float
    query_score: float | None
    logit_scale: float
    update_norm: float
    num_support: int
    num_query: int


@dataclass
class TrainTrace:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int | None = None
    injected: int = 0
    skipped: int = 0

    def to_json(self) -> dict:
        return {"records": [asdict(r) for r in self.records], "best_epoch": self.best_epoch,
                "injected": self.injected, "skipped": self.skipped}


def predict(bundle: TorchBundle, image, prompt_set: PromptSet) -> str:
    import torch

    with torch.no_grad():
        logits = batch_logits(bundle, [TrainItem(image, prompt_set, 0)])[0]
    return prompt_set.answers[int(torch.argmax(logits))]


def evaluate_vqa(bundle: TorchBundle, examples: Sequence[VqaExample], prompt_sets: dict[str, PromptSet]) -> float | None:
    """Mean vqa score (0-1) of zero-shot predictions; ``None`` for no examples."""
    if not examples:
        return None
    bundle.module.eval()
    scores = [vqa_score(predict(bundle, ex.image_ref, prompt_sets[ex.question_id]), ex.human_answers)
              for ex in examples]
    return float(np.mean(scores))


def _snapshot(bundle: TorchBundle, selection: TrainableSelection):
    state = {n: p.detach().clone() for n, p in _selected_tensors(bundle, selection)}
    state["<logit_scale>"] = bundle.scale.detach().clone()
    return state


def _restore(bundle: TorchBundle, state) -> None:
    import torch

    params = dict(bundle.named_tensors())
    with torch.no_grad():
        for n, v in state.items():
            (bundle.scale if n == "<logit_scale>" else params[n]).copy_(v)
    bundle.mark_updated()


def train_few_shot(bundle: TorchBundle, pool: FewShotPool, config: TrainConfig, mode: TrainMode | str,
                   prompt_sets: dict[str, PromptSet]) -> tuple[TorchBundle, TrainTrace]:
    """Episodic few-shot training.

    Each epoch draws an episode from the pool, runs minibatch steps over its
    support set and scores the query set. The parameters of the best-scoring
    epoch are restored at the end (the last epoch when no query set exists).
    """
    import torch

    selection = select_trainable(bundle, mode)
    with torch.no_grad():
        bundle.scale.fill_(1.0 / config.init_temperature)
    bundle.max_scale = config.max_temperature
    optimizer = make_optimizer(bundle, selection, config)
    counter = InjectionCounter()
    labelled: dict[str, TrainItem | None] = {}
    for ex in pool.examples():
        try:
            label, ps = map_label(ex, prompt_sets[ex.question_id], inject=config.inject_gold, counter=counter)
            labelled[ex.question_id] = TrainItem(ex.image_ref, ps, label, ex)
        except SkipExample:
            labelled[ex.question_id] = None
    if not any(labelled.values()):
        raise ConfigError("no trainable support examples in the pool")
    eval_sets = {q: (it.prompt_set if it else prompt_sets[q]) for q, it in labelled.items()}

    trace = TrainTrace()
    rng = random.Random(config.seed)
    best_score, best_state = -math.inf, None
    for epoch in range(config.epochs):
        episode = split_support_query(pool, config.C, config.proportion, seed=rng.randrange(2**32))
        support = [labelled[e.question_id] for e in episode.support if labelled[e.question_id] is not None]
        if not support:
            raise ConfigError(f"epoch {epoch}: empty support set")
        rng.shuffle(support)
        before = _snapshot(bundle, selection)
        losses = []
        for start in range(0, len(support), config.batch_size):
            chunk = support[start : start + config.batch_size]
            losses.append((training_step(bundle, selection, chunk, config, optimizer), len(chunk)))
        after = _snapshot(bundle, selection)
        update = math.sqrt(sum(float(((after[n] - before[n]) ** 2).sum()) for n in after if n != "<logit_scale>"))
        query_score = evaluate_vqa(bundle, episode.query, eval_sets)
        mean_loss = sum(l * n for l, n in losses) / sum(n for _, n in losses)
        trace.records.append(EpochRecord(epoch, mean_loss, query_score, bundle.logit_scale, update,
                                         len(support), len(episode.query)))
        log.info("epoch %d loss %.4f query %s", epoch, mean_loss, query_score)
        if query_score is not None and query_score > best_score:
            best_score, best_state, trace.best_epoch = query_score, after, epoch
    if best_state is not None:
        _restore(bundle, best_state)
    else:
        trace.best_epoch = config.epochs - 1
    trace.injected, trace.skipped = counter.injected, counter.skipped
    return bundle, trace


# ---------------------------------------------------------------------------
# checkpoints and checks


def save_checkpoint(path: str | Path, bundle: TorchBundle, selection: TrainableSelection, config: TrainConfig) -> None:
    """Selected parameters only, with the logit scale and a config fingerprint."""
    import torch

    payload = {
        "tensors": {n: p.detach().cpu().clone() for n, p in _selected_tensors(bundle, selection)},
        "logit_scale": bundle.scale.detach().cpu().clone(),
        "mode": selection.mode.value,
        "config_fingerprint": config.fingerprint(),
        "bundle": bundle.name,
    }
    torch.save(payload, Path(path))


def load_checkpoint(path: str | Path, bundle: TorchBundle) -> dict:
    import torch

    payload = torch.load(Path(path), map_location="cpu", weights_only=True)
    params = dict(bundle.named_tensors())
    missing = [n for n in payload["tensors"] if n not in params]
    if missing:
        raise InvalidInputError(f"checkpoint holds unknown parameters: {missing[:3]}")
    with torch.no_grad():
        for n, v in payload["tensors"].items():
            params[n].copy_(v)
        bundle.scale.copy_(payload["logit_scale"])
    bundle.mark_updated()
    return payload


def gradient_check(bundle: TorchBundle, selection: TrainableSelection, batch: Sequence[TrainItem],
                   eps: float = 1e-6) -> float:
    """Largest relative gap between autograd and central-difference gradients.

    Covers every selected scalar. Meant for float64 toy models.
    """
    import torch

    named = _selected_tensors(bundle, selection)
    for _, p in named:
        p.grad = None
    batch_loss(bundle, batch).mean().backward()
    worst = 0.0
    with torch.no_grad():
        for _, p in named:
            analytic = p.grad.detach().clone()
            flat = p.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + eps
                up = batch_loss(bundle, batch).mean().item()
                flat[j] = orig - eps
                down = batch_loss(bundle, batch).mean().item()
                flat[j] = orig
                numeric = (up - down) / (2 * eps)
                a = analytic.view(-1)[j].item()
                denom = max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, abs(a - numeric) / denom)
    for _, p in named:
        p.grad = None
    return worst

