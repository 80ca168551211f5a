"""Declarative run configuration (YAML) with strict key checking."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError

CACHE_ENV = "CLIPZERO_CACHE"
CHECKPOINT_ENV = "CLIPZERO_CHECKPOINTS"

Command = Literal["zero-shot-vqa", "few-shot-vqa", "entailment"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    questions: str | None = None  # evaluation split (VQA)
    annotations: str | None = None
    train_questions: str | None = None  # few-shot pool source
    train_annotations: str | None = None
    vocab: str | None = None
    taxonomy: str | None = None
    demonstrations: str | None = None
    parses: str | None = None  # CoNLL-U file of pre-parsed questions
    image_root: str | None = None
    ve_train: str | None = None
    ve_valid: str | None = None
    ve_test: str | None = None
    limit: int | None = Field(default=None, ge=1)


class BackendConfig(_Strict):
    encoder: str = "hash:0"
    lm: str = "hash:0"
    parser: Literal["none", "conllu", "stanza"] = "conllu"
    device: str = "cpu"


class TapcConfig(_Strict):
    threshold: float = -1.0
    k: int = Field(default=200, ge=1)
    demos_per_type: int = Field(default=4, ge=1)
    no_answer_filter: bool = False
    qip_baseline: bool = False
    no_demo_template: bool = False
    no_parsing_template: bool = False
    demo_filter: bool = False

    @model_validator(mode="after")
    def _flags(self):
        if self.qip_baseline and (self.no_demo_template or self.no_parsing_template):
            raise ValueError("qip_baseline cannot be combined with no_demo_template or no_parsing_template")
        if self.no_demo_template and self.no_parsing_template:
            raise ValueError("no_demo_template and no_parsing_template together leave no template source")
        return self


class FewShotConfig(_Strict):
    K: int = Field(default=1, ge=1)
    C: int | None = Field(default=None, ge=1)
    proportion: float = Field(default=0.75, gt=0, lt=1)
    modes: list[Literal["binor", "bitfit", "full"]] = ["binor"]
    seed: int = 0
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=8, ge=1)
    learning_rate: float = Field(default=2e-5, gt=0)
    weight_decay: float = Field(default=0.001, ge=0)
    grad_clip: float = Field(default=2.0, gt=0)
    init_temperature: float = Field(default=0.07, gt=0)
    max_temperature: float = Field(default=100.0, gt=0)
    inject_gold: bool = True


class EntailmentConfig(_Strict):
    direction: Literal["text->image", "image->text"] = "text->image"
    grid: dict[Literal["learning_rate", "batch_size", "dropout"], list[float]] | None = None
    epochs: int = Field(default=20, ge=1)
    masked_control: bool = True
    control_variant: Literal["black", "zero"] = "black"
    seed: int = 0


class OutputConfig(_Strict):
    dir: str = "runs/latest"
    cache: str | None = None
    checkpoints: str | None = None


class RunConfig(_Strict):
    command: Command
    data: DataConfig = DataConfig()
    backend: BackendConfig = BackendConfig()
    tapc: TapcConfig = TapcConfig()
    few_shot: FewShotConfig = FewShotConfig()
    entailment: EntailmentConfig = EntailmentConfig()
    output: OutputConfig = OutputConfig()
    workers: int = Field(default=1, ge=1)

    def cache_root(self) -> Path | None:
        root = self.output.cache or os.environ.get(CACHE_ENV)
        return Path(root) if root else None

    def checkpoint_root(self) -> Path:
        root = self.output.checkpoints or os.environ.get(CHECKPOINT_ENV)
        return Path(root) if root else Path(self.output.dir)


def _set_path(tree: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted!r}: {k!r} is not a section")
    node[keys[-1]] = value


def build_config(raw: dict | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Validate a raw mapping after applying dotted-key overrides."""
    tree: dict = dict(raw or {})
    for key, value in (overrides or {}).items():
        _set_path(tree, key, value)
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(map(str, err['loc'])) or '<root>'}: {err['msg']}" for err in e.errors())
        raise ConfigError(f"invalid run config: {problems}") from None


def load_config(path: str | Path, overrides: dict[str, Any] | None = None) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: not valid YAML ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return build_config(raw, overrides)


def parse_override(text: str) -> tuple[str, Any]:
    """``section.key=value`` with the value read as YAML (numbers, booleans, lists)."""
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    return key.strip(), yaml.safe_load(value)
