"""Cross-modality transfer on visual entailment.

A small MLP learns entailment from fused (premise, hypothesis) text
embeddings and is then evaluated with the premise given as an image, or the
other way round. Encoders stay frozen throughout.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .dataset import ENTAILMENT_LABELS, EntailmentLabel, VeExample
from .errors import ConfigError, ContractError, InvalidInputError
from .evaluation import entailment_accuracy
from .scoring import BLACK_IMAGE, EmbeddingCache, EncoderBundle, encode_image, encode_text

log = logging.getLogger(__name__)

HIDDEN_DIMS = (1024, 128)
NUM_CLASSES = 3
MLP_EPOCHS = 20
DEFAULT_GRID = {
    "learning_rate": (1e-6, 3e-6, 5e-6),
    "batch_size": (32, 64, 128),
    "dropout": (0.0, 0.1, 0.4),
}
_IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png", ".bmp", ".gif", ".webp")


def fuse(v1, v2) -> np.ndarray:
    """``[v1, v2, v1 + v2, v1 - v2, v1 * v2]`` along the last axis."""
    a, b = np.asarray(v1), np.asarray(v2)
    if a.shape != b.shape:
        raise ContractError(f"cannot fuse shapes {a.shape} and {b.shape}")
    return np.concatenate([a, b, a + b, a - b, a * b], axis=-1)


class Direction(str, Enum):
    TEXT_TO_IMAGE = "text->image"
    IMAGE_TO_TEXT = "image->text"


class PremiseMode(str, Enum):
    TEXT = "text"  # caption through the text encoder
    IMAGE = "image"  # image through the visual encoder
    BLACK = "black"  # all-black image through the visual encoder
    ZERO = "zero"  # zero vector in place of the premise embedding


@dataclass(frozen=True)
class GridPoint:
    learning_rate: float
    batch_size: int
    dropout: float


def grid_points(grid: dict[str, Sequence] | None = None) -> list[GridPoint]:
    grid = DEFAULT_GRID if grid is None else grid
    unknown = set(grid) - set(DEFAULT_GRID)
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    full = {**DEFAULT_GRID, **grid}
    pts = [GridPoint(float(lr), int(bs), float(dp))
           for lr, bs, dp in itertools.product(full["learning_rate"], full["batch_size"], full["dropout"])]
    for p in pts:
        if p.learning_rate <= 0 or p.batch_size < 1 or not 0 <= p.dropout < 1:
            raise ConfigError(f"invalid grid point {p}")
    return pts


@dataclass(frozen=True)
class MlpConfig:
    epochs: int = MLP_EPOCHS
    hidden: tuple[int, ...] = HIDDEN_DIMS
    adam_epsilon: float = 1e-8
    adam_betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float = 2.0


def build_mlp(in_dim: int, dropout: float, hidden: Sequence[int] = HIDDEN_DIMS):
    import torch.nn as nn

    layers: list = []
    prev = in_dim
    for h in hidden:
        layers += [nn.Linear(prev, h), nn.ReLU(), nn.Dropout(dropout)]
        prev = h
    layers.append(nn.Linear(prev, NUM_CLASSES))
    return nn.Sequential(*layers)


@dataclass
class EntailmentClassifier:
    module: Any
    in_dim: int
    point: GridPoint
    seed: int
    valid_accuracy: float | None = None
    candidates: list[tuple[GridPoint, float]] = field(default_factory=list)

    def logits(self, fused: np.ndarray) -> np.ndarray:
        import torch

        x = np.atleast_2d(np.asarray(fused, dtype=np.float32))
        if x.shape[1] != self.in_dim:
            raise ContractError(f"classifier expects {self.in_dim} inputs, got {x.shape[1]}")
        self.module.eval()
        with torch.no_grad():
            return self.module(torch.from_numpy(x)).numpy()

    def predict(self, fused: np.ndarray) -> list[EntailmentLabel]:
        return [ENTAILMENT_LABELS[i] for i in self.logits(fused).argmax(axis=1)]

    def save(self, path: str | Path) -> None:
        import torch

        torch.save({"state": self.module.state_dict(), "in_dim": self.in_dim, "point": asdict(self.point),
                    "seed": self.seed, "hidden": list(HIDDEN_DIMS), "valid_accuracy": self.valid_accuracy},
                   Path(path))

    @classmethod
    def load(cls, path: str | Path) -> "EntailmentClassifier":
        import torch

        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
        point = GridPoint(**blob["point"])
        module = build_mlp(blob["in_dim"], point.dropout, blob["hidden"])
        module.load_state_dict(blob["state"])
        return cls(module, blob["in_dim"], point, blob["seed"], blob["valid_accuracy"])


# ---------------------------------------------------------------------------
# features


def premise_embeddings(bundle: EncoderBundle, examples: Sequence[VeExample], mode: PremiseMode | str,
                       cache: EmbeddingCache | None = None) -> np.ndarray:
    mode = PremiseMode(mode)
    if mode is PremiseMode.TEXT:
        missing = [i for i, e in enumerate(examples) if not e.premise_caption]
        if missing:
            raise ConfigError(f"example #{missing[0]} has no premise caption")
        embs = encode_text(bundle, [e.premise_caption for e in examples], cache)
    elif mode is PremiseMode.IMAGE:
        embs = encode_image(bundle, [e.premise_image_ref for e in examples], cache)
    elif mode is PremiseMode.BLACK:
        black = encode_image(bundle, [BLACK_IMAGE], cache)[0]
        return np.tile(black.vector, (len(examples), 1))
    else:
        return np.zeros((len(examples), bundle.embed_dim))
    return np.stack([e.vector for e in embs])


def fusion_features(bundle: EncoderBundle, examples: Sequence[VeExample], mode: PremiseMode | str,
                    cache: EmbeddingCache | None = None) -> np.ndarray:
    if not examples:
        raise InvalidInputError("no examples")
    prem = premise_embeddings(bundle, examples, mode, cache)
    hyp = np.stack([e.vector for e in encode_text(bundle, [e.hypothesis for e in examples], cache)])
    return fuse(prem, hyp)


def _labels(examples: Sequence[VeExample]) -> np.ndarray:
    return np.array([ENTAILMENT_LABELS.index(EntailmentLabel(e.label)) for e in examples])


# ---------------------------------------------------------------------------
# training


def train_mlp(X: np.ndarray, y: np.ndarray, point: GridPoint, seed: int = 0, config: MlpConfig = MlpConfig()):
    """One grid point: Adam with gradient clipping, shuffled minibatches, fixed epochs."""
    import torch
    import torch.nn.functional as F

    torch.manual_seed(seed)
    module = build_mlp(X.shape[1], point.dropout, config.hidden)
    opt = torch.optim.Adam(module.parameters(), lr=point.learning_rate, betas=config.adam_betas,
                           eps=config.adam_epsilon)
    gen = torch.Generator().manual_seed(seed)
    Xt = torch.as_tensor(X, dtype=torch.float32)
    yt = torch.as_tensor(y, dtype=torch.long)
    module.train()
    for _ in range(config.epochs):
        order = torch.randperm(len(Xt), generator=gen)
        for start in range(0, len(order), point.batch_size):
            idx = order[start : start + point.batch_size]
            opt.zero_grad()
            loss = F.cross_entropy(module(Xt[idx]), yt[idx])
            loss.backward()
            torch.nn.utils.clip_grad_norm_(module.parameters(), config.grad_clip)
            opt.step()
    module.eval()
    return module


def train_entailment(
    train: Sequence[VeExample],
    valid: Sequence[VeExample],
    bundle: EncoderBundle,
    grid: dict[str, Sequence] | None = None,
    seed: int = 0,
    premise_mode: PremiseMode | str = PremiseMode.TEXT,
    config: MlpConfig = MlpConfig(),
    cache: EmbeddingCache | None = None,
) -> EntailmentClassifier:
    """Train one classifier per grid point and keep the best on ``valid``.

    Validation uses the same premise modality as training, so model selection
    never sees the transfer modality. The bundle's parameter fingerprint must
    be unchanged afterwards.
    """
    if not train:
        raise InvalidInputError("no training examples")
    fp_before = bundle.fingerprint()
    X, y = fusion_features(bundle, train, premise_mode, cache), _labels(train)
    Xv, yv = (fusion_features(bundle, valid, premise_mode, cache), _labels(valid)) if valid else (X, y)
    best: EntailmentClassifier | None = None
    candidates = []
    for point in grid_points(grid):
        module = train_mlp(X, y, point, seed, config)
        clf = EntailmentClassifier(module, X.shape[1], point, seed)
        acc = float((clf.logits(Xv).argmax(axis=1) == yv).mean())
        candidates.append((point, acc))
        log.info("grid point %s: valid accuracy %.4f", point, acc)
        if best is None or acc > best.valid_accuracy:
            clf.valid_accuracy = acc
            best = clf
    if bundle.fingerprint() != fp_before:
        raise ContractError("encoder parameters changed during classifier training")
    best.candidates = candidates
    return best


def train_text_entailment(examples: Sequence[VeExample], bundle: EncoderBundle,
                          grid: dict[str, Sequence] | None = None, seed: int = 0,
                          valid: Sequence[VeExample] = (), **kw) -> EntailmentClassifier:
    """Classifier on fuse(text(caption), text(hypothesis))."""
    return train_entailment(examples, valid, bundle, grid, seed, PremiseMode.TEXT, **kw)


def _is_image(premise) -> bool:
    if isinstance(premise, np.ndarray) or not isinstance(premise, (str, Path)):
        return True
    s = str(premise)
    return s == BLACK_IMAGE or s.lower().endswith(_IMAGE_SUFFIXES)


def predict_entailment(classifier: EntailmentClassifier, bundle: EncoderBundle, premise, hypothesis: str,
                       modality: PremiseMode | str | None = None,
                       cache: EmbeddingCache | None = None) -> EntailmentLabel:
    """Label for one pair. The premise goes to the visual encoder when it is an
    image (array, image path or :data:`BLACK_IMAGE`) and to the text encoder otherwise."""
    return predict_entailment_batch(classifier, bundle, [premise], [hypothesis], modality, cache)[0]


def predict_entailment_batch(classifier: EntailmentClassifier, bundle: EncoderBundle, premises: Sequence,
                             hypotheses: Sequence[str], modality: PremiseMode | str | None = None,
                             cache: EmbeddingCache | None = None) -> list[EntailmentLabel]:
    if len(premises) != len(hypotheses):
        raise InvalidInputError("premises and hypotheses differ in length")
    rows = []
    for p in premises:
        mode = PremiseMode(modality) if modality is not None else (
            PremiseMode.IMAGE if _is_image(p) else PremiseMode.TEXT)
        if mode is PremiseMode.IMAGE:
            rows.append(encode_image(bundle, [p], cache)[0].vector)
        elif mode is PremiseMode.TEXT:
            rows.append(encode_text(bundle, [p], cache)[0].vector)
        elif mode is PremiseMode.BLACK:
            rows.append(encode_image(bundle, [BLACK_IMAGE], cache)[0].vector)
        else:
            rows.append(np.zeros(bundle.embed_dim))
    hyp = np.stack([e.vector for e in encode_text(bundle, list(hypotheses), cache)])
    return classifier.predict(fuse(np.stack(rows), hyp))


def evaluate(classifier: EntailmentClassifier, bundle: EncoderBundle, examples: Sequence[VeExample],
             mode: PremiseMode | str, cache: EmbeddingCache | None = None) -> tuple[float, np.ndarray]:
    """Accuracy and a 3x3 confusion matrix (rows gold, columns predicted)."""
    preds = classifier.predict(fusion_features(bundle, examples, mode, cache))
    golds = [EntailmentLabel(e.label) for e in examples]
    conf = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=int)
    for p, g in zip(preds, golds):
        conf[ENTAILMENT_LABELS.index(g), ENTAILMENT_LABELS.index(p)] += 1
    return entailment_accuracy(preds, golds), conf


def masked_control(classifier: EntailmentClassifier, bundle: EncoderBundle, examples: Sequence[VeExample],
                   variant: str = "black", cache: EmbeddingCache | None = None) -> float:
    """Accuracy with every premise image replaced by a black image (or a zero embedding)."""
    mode = {"black": PremiseMode.BLACK, "zero": PremiseMode.ZERO}.get(variant)
    if mode is None:
        raise ConfigError(f"unknown masking variant {variant!r}")
    return evaluate(classifier, bundle, examples, mode, cache)[0]


def majority_rate(examples: Sequence[VeExample]) -> float:
    counts = np.bincount(_labels(examples), minlength=NUM_CLASSES)
    return float(counts.max() / counts.sum())


@dataclass
class TransferReport:
    direction: Direction
    train_mode: PremiseMode
    eval_mode: PremiseMode
    valid_accuracy: float | None
    test_accuracy: float
    control_accuracy: float | None
    confusion: list[list[int]]
    grid_point: GridPoint | None = None
    same_modality_valid_accuracy: float | None = None

    def __post_init__(self):
        for v in (self.valid_accuracy, self.test_accuracy, self.control_accuracy):
            if v is not None and not 0.0 <= v <= 1.0:
                raise ContractError(f"accuracy {v} outside [0, 1]")

    def to_json(self) -> dict:
        d = asdict(self)
        d["direction"] = self.direction.value
        d["train_mode"] = self.train_mode.value
        d["eval_mode"] = self.eval_mode.value
        return d


def run_transfer(
    train: Sequence[VeExample],
    valid: Sequence[VeExample],
    test: Sequence[VeExample],
    bundle: EncoderBundle,
    direction: Direction | str = Direction.TEXT_TO_IMAGE,
    grid: dict[str, Sequence] | None = None,
    seed: int = 0,
    control: bool = True,
    control_variant: str = "black",
    config: MlpConfig = MlpConfig(),
    cache: EmbeddingCache | None = None,
) -> tuple[TransferReport, EntailmentClassifier]:
    """Train in one premise modality, evaluate in the other.

    The masked control only applies when images are the evaluation modality.
    """
    direction = Direction(direction)
    src, dst = ((PremiseMode.TEXT, PremiseMode.IMAGE) if direction is Direction.TEXT_TO_IMAGE
                else (PremiseMode.IMAGE, PremiseMode.TEXT))
    clf = train_entailment(train, valid, bundle, grid, seed, src, config, cache)
    valid_acc = evaluate(clf, bundle, valid, dst, cache)[0] if valid else None
    test_acc, conf = evaluate(clf, bundle, test, dst, cache)
    ctrl = None
    if control and dst is PremiseMode.IMAGE:
        ctrl = masked_control(clf, bundle, test, control_variant, cache)
    report = TransferReport(direction, src, dst, valid_acc, test_acc, ctrl, conf.tolist(), clf.point,
                            clf.valid_accuracy)
    return report, clf
