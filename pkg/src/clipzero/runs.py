"""Experiment runners behind the command line: backends, outputs and run manifests."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .answers import FilterCache
from .binor import TrainConfig, predict, save_checkpoint, select_trainable, train_few_shot
from .config import RunConfig
from .dataset import AnswerVocabulary, FewShotPool, load_question_types, load_snli_ve_split, load_vqa_split, sample_pool
from .entailment import Direction, MlpConfig, majority_rate, run_transfer
from .errors import ConfigError
from .evaluation import Breakdown, VqaResult, aggregate, format_table, vqa_score, write_results
from .infill import HashInfillLM, IndexInfillLM, T5InfillLM
from .parsing import ConlluParseProvider, StanzaParseProvider
from .pipeline import TapcOptions, TapcPipeline
from .scoring import (
    EmbeddingCache,
    HashEncoderBundle,
    LookupBundle,
    OpenClipBundle,
    ToyDualEncoder,
    TorchBundle,
)
from .templates import DemonstrationBank

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# backends


def _split_spec(spec: str) -> tuple[str, list[str]]:
    kind, _, rest = spec.partition(":")
    return kind, [p for p in rest.split(":") if p] if rest else []


def make_encoder(spec: str, device: str = "cpu"):
    """Encoder bundle from a backend spec.

    ``hash:SEED[:DIM]`` seeded mock; ``toy:SEED`` trainable 4-d mock;
    ``lookup:FILE.npz`` fixed vectors (keys ``text:...``/``image:...``);
    ``open_clip:ARCH[:PRETRAINED]`` real checkpoint.
    """
    kind, args = _split_spec(spec)
    try:
        if kind == "hash":
            return HashEncoderBundle(dim=int(args[1]) if len(args) > 1 else 64, seed=int(args[0]) if args else 0)
        if kind == "toy":
            seed = int(args[0]) if args else 0
            return TorchBundle(ToyDualEncoder(seed=seed), name=f"toy-{seed}")
        if kind == "lookup":
            data = np.load(args[0])
            text = {k[5:]: data[k] for k in data.files if k.startswith("text:")}
            image = {k[6:]: data[k] for k in data.files if k.startswith("image:")}
            digest = hashlib.sha256(Path(args[0]).read_bytes()).hexdigest()[:12]
            return LookupBundle(text, image, name=f"lookup-{digest}")
        if kind == "open_clip":
            return OpenClipBundle(args[0] if args else "ViT-B/16", args[1] if len(args) > 1 else "openai", device)
    except (IndexError, ValueError, OSError) as e:
        raise ConfigError(f"bad encoder spec {spec!r}: {e}") from e
    raise ConfigError(f"unknown encoder backend {spec!r}")


def make_lm(spec: str, vocab: AnswerVocabulary | None = None, device: str = "cpu"):
    """``hash:SEED`` seeded mock, ``index`` vocabulary-order mock, ``t5:MODEL`` real model."""
    kind, args = _split_spec(spec)
    if kind == "hash":
        return HashInfillLM(int(args[0]) if args else 0)
    if kind == "index":
        if vocab is None:
            raise ConfigError("the index LM needs a vocabulary")
        return IndexInfillLM(list(vocab))
    if kind == "t5":
        return T5InfillLM(args[0] if args else "t5-large", device)
    raise ConfigError(f"unknown LM backend {spec!r}")


def make_parser(cfg: RunConfig):
    if cfg.backend.parser == "stanza":
        return StanzaParseProvider()
    if cfg.backend.parser == "conllu" and cfg.data.parses:
        return ConlluParseProvider.from_file(cfg.data.parses)
    return None


# ---------------------------------------------------------------------------
# manifests


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def code_fingerprint() -> str:
    root = Path(__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix in {".py", ".txt", ".yaml", ".json"}:
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def dataset_hashes(cfg: RunConfig) -> dict[str, str]:
    out = {}
    for key, value in cfg.data.model_dump().items():
        if isinstance(value, str) and Path(value).is_file():
            out[key] = file_sha256(value)
    for spec in (cfg.backend.encoder,):
        kind, args = _split_spec(spec)
        if kind == "lookup" and args and Path(args[0]).is_file():
            out["encoder_vectors"] = file_sha256(args[0])
    return out


@dataclass
class RunOutcome:
    out_dir: Path
    artifacts: dict[str, str] = field(default_factory=dict)
    summary: dict[str, Any] = field(default_factory=dict)


def write_manifest(cfg: RunConfig, outcome: RunOutcome, started: float) -> Path:
    path = outcome.out_dir / "manifest.json"
    manifest = {
        "config": cfg.model_dump(mode="json"),
        "code": {"version": __version__, "sha256": code_fingerprint()},
        "datasets": dataset_hashes(cfg),
        "started": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "wall_clock_seconds": round(time.time() - started, 3),
        "artifacts": outcome.artifacts,
    }
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    outcome.artifacts["manifest"] = str(path)
    return path


def check_replay(manifest: dict, cfg: RunConfig) -> None:
    """Refuse to replay when a recorded dataset file changed."""
    recorded = manifest.get("datasets", {})
    current = dataset_hashes(cfg)
    changed = [k for k, v in recorded.items() if current.get(k) != v]
    if changed:
        raise ConfigError(f"dataset files changed since the recorded run: {', '.join(sorted(changed))}")


# ---------------------------------------------------------------------------
# runners


def _vqa_inputs(cfg: RunConfig, questions: str | None, annotations: str | None, what: str):
    if not questions or not annotations:
        raise ConfigError(f"{what} needs data.{'questions' if what == 'evaluation' else 'train_questions'} "
                          "and matching annotations")
    for p in (questions, annotations):
        if not Path(p).is_file():
            raise ConfigError(f"missing data file {p}")
    taxonomy = load_question_types(cfg.data.taxonomy)
    return load_vqa_split(questions, annotations, None, taxonomy, cfg.data.image_root), taxonomy


def _vocab(cfg: RunConfig) -> AnswerVocabulary:
    if not cfg.data.vocab or not Path(cfg.data.vocab).is_file():
        raise ConfigError("data.vocab must point to an answer vocabulary file")
    return AnswerVocabulary.load(cfg.data.vocab)


def _pipeline(cfg: RunConfig, bundle, vocab, demo_pool=()) -> TapcPipeline:
    t = cfg.tapc
    options = TapcOptions(t.threshold, t.k, t.demos_per_type, t.no_answer_filter, t.qip_baseline,
                          t.no_demo_template, t.no_parsing_template, t.demo_filter)
    cache_root = cfg.cache_root()
    return TapcPipeline(
        make_lm(cfg.backend.lm, vocab, cfg.backend.device), bundle, vocab,
        DemonstrationBank.load(cfg.data.demonstrations), make_parser(cfg), options,
        cache=EmbeddingCache(cache_root / "embeddings" if cache_root else None),
        filter_cache=FilterCache(cache_root / "filtered") if cache_root else None,
        demo_pool=demo_pool,
    )


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_vqa(out: Path, stem: str, results: list[VqaResult], label: str) -> tuple[Breakdown, dict[str, str]]:
    breakdown = aggregate(results)
    res_path = out / f"{stem}.json"
    write_results(res_path, results, breakdown)
    table_path = out / f"{stem}.txt"
    table_path.write_text(format_table([(label, breakdown)]) + "\n")
    return breakdown, {stem: str(res_path), f"{stem}_table": str(table_path)}


def run_zero_shot_vqa(cfg: RunConfig) -> RunOutcome:
    started = time.time()
    examples, _ = _vqa_inputs(cfg, cfg.data.questions, cfg.data.annotations, "evaluation")
    examples = examples[: cfg.data.limit] if cfg.data.limit else examples
    vocab = _vocab(cfg)
    bundle = make_encoder(cfg.backend.encoder, cfg.backend.device)
    pipe = _pipeline(cfg, bundle, vocab)
    results = pipe.run(examples, workers=cfg.workers)
    out = _out_dir(cfg)
    breakdown, artifacts = _write_vqa(out, "results", results, "TAP-C")
    outcome = RunOutcome(out, artifacts, {"breakdown": asdict(breakdown),
                                          "errors": sum(r.error is not None for r in results)})
    write_manifest(cfg, outcome, started)
    return outcome


def run_few_shot(cfg: RunConfig) -> RunOutcome:
    started = time.time()
    fs = cfg.few_shot
    train, taxonomy = _vqa_inputs(cfg, cfg.data.train_questions, cfg.data.train_annotations, "few-shot pool")
    evaluation, _ = _vqa_inputs(cfg, cfg.data.questions, cfg.data.annotations, "evaluation")
    evaluation = evaluation[: cfg.data.limit] if cfg.data.limit else evaluation
    vocab = _vocab(cfg)
    pool = sample_pool(train, fs.K, fs.seed, taxonomy)
    if len(pool) == 0:
        raise ConfigError("few-shot pool is empty")
    out = _out_dir(cfg)
    ckpt_root = cfg.checkpoint_root()
    ckpt_root.mkdir(parents=True, exist_ok=True)
    outcome = RunOutcome(out)
    (out / "pool.json").write_text(json.dumps(pool.to_manifest(), indent=1, sort_keys=True))
    outcome.artifacts["pool"] = str(out / "pool.json")
    rows = []
    for mode in fs.modes:
        bundle = make_encoder(cfg.backend.encoder, cfg.backend.device)
        if not isinstance(bundle, TorchBundle):
            raise ConfigError(f"few-shot training needs a trainable encoder (toy:SEED or open_clip:...), "
                              f"got {cfg.backend.encoder!r}")
        pipe = _pipeline(cfg, bundle, vocab, demo_pool=pool.examples())
        prompt_sets = {}
        for ex in pool.examples() + list(evaluation):
            try:
                prompt_sets[ex.question_id] = pipe.prompts_for(ex)
            except Exception as e:  # noqa: BLE001
                log.warning("no prompts for %s: %s", ex.question_id, e)
        kept = {w: tuple(e for e in shots if e.question_id in prompt_sets) for w, shots in pool.ways.items()}
        pool_ok = FewShotPool({w: s for w, s in kept.items() if s}, pool.K, pool.seed, pool.omitted_ways)
        config = TrainConfig(epochs=fs.epochs, batch_size=fs.batch_size, learning_rate=fs.learning_rate,
                             weight_decay=fs.weight_decay, grad_clip=fs.grad_clip,
                             init_temperature=fs.init_temperature, max_temperature=fs.max_temperature,
                             filtered_answers_k=cfg.tapc.k, seed=fs.seed, C=fs.C, proportion=fs.proportion,
                             inject_gold=fs.inject_gold)
        bundle, trace = train_few_shot(bundle, pool_ok, config, mode, prompt_sets)
        selection = select_trainable(bundle, mode)
        ckpt = ckpt_root / f"checkpoint_{mode}.pt"
        save_checkpoint(ckpt, bundle, selection, config)
        trace_path = out / f"trace_{mode}.json"
        trace_path.write_text(json.dumps(trace.to_json(), indent=1, sort_keys=True))
        results = []
        for ex in evaluation:
            if ex.question_id not in prompt_sets:
                results.append(VqaResult(ex.question_id, "", 0.0, ex.answer_type, "", "no prompt set"))
                continue
            try:
                pred = predict(bundle, ex.image_ref, prompt_sets[ex.question_id])
                results.append(VqaResult(ex.question_id, pred, vqa_score(pred, ex.human_answers), ex.answer_type,
                                         f"{mode}:{len(prompt_sets[ex.question_id])}"))
            except Exception as e:  # noqa: BLE001
                results.append(VqaResult(ex.question_id, "", 0.0, ex.answer_type, "", f"{type(e).__name__}: {e}"))
        breakdown, arts = _write_vqa(out, f"results_{mode}", results, mode)
        rows.append((mode, breakdown))
        outcome.artifacts.update(arts)
        outcome.artifacts[f"checkpoint_{mode}"] = str(ckpt)
        outcome.artifacts[f"trace_{mode}"] = str(trace_path)
        outcome.summary[mode] = {"all": breakdown.all, "selected": selection.counts.total_selected,
                                 "epochs": len(trace.records), "injected": trace.injected}
    table = out / "modes.txt"
    table.write_text(format_table(rows, "Strategy") + "\n")
    outcome.artifacts["modes_table"] = str(table)
    write_manifest(cfg, outcome, started)
    return outcome


def run_entailment(cfg: RunConfig) -> RunOutcome:
    started = time.time()
    d, e = cfg.data, cfg.entailment
    paths = {"ve_train": d.ve_train, "ve_valid": d.ve_valid, "ve_test": d.ve_test}
    missing = [k for k, p in paths.items() if k != "ve_valid" and (not p or not Path(p).is_file())]
    if missing:
        raise ConfigError(f"missing SNLI-VE files: {', '.join('data.' + m for m in missing)}")
    splits = {k: (load_snli_ve_split(p, d.image_root) if p else []) for k, p in paths.items()}
    if d.limit:
        splits = {k: v[: d.limit] for k, v in splits.items()}
    bundle = make_encoder(cfg.backend.encoder, cfg.backend.device)
    cache_root = cfg.cache_root()
    cache = EmbeddingCache(cache_root / "embeddings" if cache_root else None)
    report, clf = run_transfer(splits["ve_train"], splits["ve_valid"], splits["ve_test"], bundle,
                               Direction(e.direction), e.grid, e.seed, e.masked_control, e.control_variant,
                               MlpConfig(epochs=e.epochs), cache)
    out = _out_dir(cfg)
    payload = report.to_json() | {"majority_rate": majority_rate(splits["ve_test"]),
                                  "routing": {"train_premise": report.train_mode.value,
                                              "eval_premise": report.eval_mode.value}}
    rpath = out / "transfer_report.json"
    rpath.write_text(json.dumps(payload, indent=1, sort_keys=True))
    table = out / "transfer_report.txt"
    table.write_text(format_transfer([(e.direction, report)]) + "\n")
    ckpt = cfg.checkpoint_root() / "entailment_classifier.pt"
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    clf.save(ckpt)
    outcome = RunOutcome(out, {"report": str(rpath), "report_table": str(table), "classifier": str(ckpt)},
                         {"test_accuracy": report.test_accuracy, "control_accuracy": report.control_accuracy})
    write_manifest(cfg, outcome, started)
    return outcome


def format_transfer(rows) -> str:
    """Valid / test accuracy per direction, plus the masked control, in percent."""
    def pct(x):
        return "-" if x is None else f"{100 * x:.2f}"

    header = ["Direction", "Transfer (valid / test)", "Image masked (test)"]
    body = [[name, f"{pct(r.valid_accuracy)} / {pct(r.test_accuracy)}", pct(r.control_accuracy)] for name, r in rows]
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(3)]
    return "\n".join(" | ".join(c.ljust(w) for c, w in zip(r, widths)) for r in [header, *body])


RUNNERS = {"zero-shot-vqa": run_zero_shot_vqa, "few-shot-vqa": run_few_shot, "entailment": run_entailment}


def report(paths: list[str | Path]) -> str:
    """Combine result files from earlier runs into one table per kind."""
    vqa_rows, ve_rows = [], []
    for p in paths:
        data = json.loads(Path(p).read_text())
        if "breakdown" in data:
            b = data["breakdown"]
            vqa_rows.append((Path(p).stem if Path(p).stem != "results" else Path(p).parent.name,
                             Breakdown(b["yes_no"], b["number"], b["other"], b["all"], tuple(b["counts"]))))
        elif "test_accuracy" in data:
            from .entailment import TransferReport, PremiseMode

            ve_rows.append((f"{Path(p).parent.name} ({data['direction']})", TransferReport(
                Direction(data["direction"]), PremiseMode(data["train_mode"]), PremiseMode(data["eval_mode"]),
                data["valid_accuracy"], data["test_accuracy"], data["control_accuracy"], data["confusion"])))
        else:
            raise ConfigError(f"{p}: not a results file")
    parts = []
    if vqa_rows:
        parts.append(format_table(vqa_rows))
    if ve_rows:
        parts.append(format_transfer(ve_rows))
    return "\n\n".join(parts)
