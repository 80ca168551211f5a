"""Dual-encoder backends, embedding cache and image-prompt alignment scoring."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
import threading
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import ClipZeroError, ContractError, InvalidInputError

log = logging.getLogger(__name__)

INIT_TEMPERATURE = 0.07
MAX_LOGIT_SCALE = 100.0
BLACK_IMAGE = "<black-image>"
NORM_ATOL = 1e-6


class EncodingError(ClipZeroError):
    def __init__(self, message: str, index: int | None = None):
        self.index = index
        super().__init__(message if index is None else f"{message} (input #{index})")


class Modality(str, Enum):
    IMAGE = "image"
    TEXT = "text"


class ParamKind(str, Enum):
    WEIGHT = "weight"
    BIAS = "bias"
    NORM_GAIN = "norm_gain"
    NORM_SHIFT = "norm_shift"


@dataclass
class ParamInfo:
    name: str
    shape: tuple[int, ...]
    kind: ParamKind | None
    trainable: bool = True

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1


# Normalization layers are recognized by module name, following the OpenAI
# CLIP naming (bn1, ln_1, ln_final, ...) plus common Hugging Face spellings.
# BatchNorms inside ResNet ``downsample`` blocks are plain indices and so
# count as ordinary weights/biases, matching how CLIP's parameters are usually tallied.
_NORM_MODULE = re.compile(r"^(bn\d*|ln(_\w+|\d*)|norm\d*|\w*layer_?norm\w*)$", re.IGNORECASE)


def kind_from_name(param_name: str) -> ParamKind:
    module, _, leaf = param_name.rpartition(".")
    last = module.rpartition(".")[2]
    if _NORM_MODULE.match(last):
        if leaf == "weight":
            return ParamKind.NORM_GAIN
        if leaf == "bias":
            return ParamKind.NORM_SHIFT
    if leaf.endswith("bias"):
        return ParamKind.BIAS
    return ParamKind.WEIGHT


def load_param_manifest(arch: str) -> list[ParamInfo]:
    """Parameter names and shapes of a released CLIP architecture, kind-tagged.

    ``arch`` is one of ``RN101``, ``RN50x16``, ``ViT-B/16``.
    """
    fname = "params_" + re.sub(r"[^a-z0-9]", "", arch.lower()) + ".json"
    try:
        data = json.loads(resources.files("clipzero.data").joinpath(fname).read_text())
    except FileNotFoundError:
        raise InvalidInputError(f"no parameter manifest for architecture {arch!r}") from None
    return [ParamInfo(n, tuple(s), kind_from_name(n)) for n, s in data["parameters"]]


@dataclass(frozen=True)
class Embedding:
    vector: np.ndarray
    modality: Modality
    source_hash: str

    def __post_init__(self):
        norm = float(np.linalg.norm(self.vector))
        if abs(norm - 1.0) > NORM_ATOL:
            raise ContractError(f"embedding norm {norm} is not 1")


def l2_normalize(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise EncodingError("cannot normalize a zero vector")
    return x / norms


def content_hash(item: Any) -> str:
    h = hashlib.sha256()
    if isinstance(item, np.ndarray):
        h.update(b"array:" + str(item.dtype).encode() + str(item.shape).encode())
        h.update(np.ascontiguousarray(item).tobytes())
    elif isinstance(item, (str, Path)) and Path(item).is_file():
        h.update(b"file:")
        h.update(Path(item).read_bytes())
    else:
        h.update(b"ref:" + str(item).encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# bundles


class EncoderBundle:
    """Visual encoder, text encoder, logit scale and tagged parameter list."""

    name: str = "bundle"
    embed_dim: int = 0

    def visual_encode(self, images: Sequence[Any]) -> np.ndarray:
        raise NotImplementedError

    def text_encode(self, texts: Sequence[str]) -> np.ndarray:
        raise NotImplementedError

    @property
    def logit_scale(self) -> float:
        return 1.0 / INIT_TEMPERATURE

    def parameters(self) -> list[ParamInfo]:
        return []

    def fingerprint(self) -> str:
        return self.name


def _seeded_vector(dim: int, *parts: str) -> np.ndarray:
    digest = hashlib.sha256("\x1f".join(parts).encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    return rng.standard_normal(dim)


class HashEncoderBundle(EncoderBundle):
    """Deterministic mock: every input maps to a seeded pseudo-random vector."""

    def __init__(self, dim: int = 64, seed: int = 0, scale: float = 1.0 / INIT_TEMPERATURE):
        self.embed_dim = dim
        self.seed = seed
        self._scale = scale
        self.name = f"hash-{dim}-{seed}"
        self.calls = 0

    @property
    def logit_scale(self) -> float:
        return self._scale

    def _vec(self, modality: str, item) -> np.ndarray:
        if isinstance(item, np.ndarray):
            return np.asarray(item, dtype=np.float64)
        return _seeded_vector(self.embed_dim, str(self.seed), modality, str(item))

    def visual_encode(self, images):
        self.calls += 1
        return np.stack([self._vec("image", i) for i in images])

    def text_encode(self, texts):
        self.calls += 1
        return np.stack([self._vec("text", t) for t in texts])


class LookupBundle(HashEncoderBundle):
    """Mock with explicit vectors for chosen inputs; anything else falls back to hashing."""

    def __init__(self, text_vectors: dict[str, np.ndarray] | None = None,
                 image_vectors: dict[str, np.ndarray] | None = None, dim: int | None = None,
                 seed: int = 0, name: str = "lookup"):
        text_vectors = dict(text_vectors or {})
        image_vectors = dict(image_vectors or {})
        if dim is None:
            some = next(iter({**text_vectors, **image_vectors}.values()), None)
            if some is None:
                raise InvalidInputError("dim is required when no vectors are given")
            dim = len(some)
        super().__init__(dim, seed)
        self.text_vectors = text_vectors
        self.image_vectors = image_vectors
        self.name = name

    def visual_encode(self, images):
        self.calls += 1
        return np.stack([np.asarray(self.image_vectors[i], dtype=np.float64)
                         if not isinstance(i, np.ndarray) and i in self.image_vectors
                         else self._vec("image", i) for i in images])

    def text_encode(self, texts):
        self.calls += 1
        return np.stack([np.asarray(self.text_vectors[t], dtype=np.float64) if t in self.text_vectors
                         else self._vec("text", t) for t in texts])


class TorchBundle(EncoderBundle):
    """Bundle over a torch module exposing ``encode_image`` and ``encode_text``.

    The logit scale is held as a multiplier (inverse temperature), clamped to
    ``(0, max_scale]`` after every update.
    """

    def __init__(self, module, name: str = "torch", init_temperature: float = INIT_TEMPERATURE,
                 max_scale: float = MAX_LOGIT_SCALE, embed_dim: int | None = None):
        import torch

        self.torch = torch
        self.module = module
        self.name = name
        self.max_scale = max_scale
        dtype = next(module.parameters()).dtype
        self.scale = torch.nn.Parameter(torch.tensor(1.0 / init_temperature, dtype=dtype))
        self.embed_dim = embed_dim or getattr(module, "embed_dim", 0)
        self._fingerprint: str | None = None

    @property
    def logit_scale(self) -> float:
        return float(self.scale.detach())

    def clamp_scale(self) -> None:
        with self.torch.no_grad():
            self.scale.clamp_(min=1e-6, max=self.max_scale)

    def mark_updated(self) -> None:
        """Forget the cached fingerprint; call after mutating parameters."""
        self._fingerprint = None

    def visual_features(self, images):
        return self.module.encode_image(images)

    def text_features(self, texts):
        return self.module.encode_text(texts)

    def visual_encode(self, images):
        with self.torch.no_grad():
            return self.visual_features(images).detach().cpu().double().numpy()

    def text_encode(self, texts):
        with self.torch.no_grad():
            return self.text_features(texts).detach().cpu().double().numpy()

    def named_tensors(self):
        return list(self.module.named_parameters())

    def parameters(self) -> list[ParamInfo]:
        return [ParamInfo(n, tuple(p.shape), kind_from_name(n), p.requires_grad)
                for n, p in self.module.named_parameters()]

    def fingerprint(self) -> str:
        if self._fingerprint is None:
            h = hashlib.sha256(self.name.encode())
            for n, p in self.module.named_parameters():
                h.update(n.encode())
                h.update(p.detach().cpu().contiguous().numpy().tobytes())
            self._fingerprint = h.hexdigest()
        return self._fingerprint


class ToyDualEncoder:
    """Tiny differentiable dual encoder for desk-scale training checks.

    Parameters: two 4x4 linear layers with biases and one shared layer norm
    (48 scalars, 16 of them bias/normalization). Inputs are fixed
    ``dim``-vectors, looked up in ``image_inputs``/``text_inputs`` or hashed.
    """

    def __new__(cls, *args, **kwargs):
        import torch.nn as nn

        class _Toy(nn.Module):
            def __init__(self, dim: int = 4, seed: int = 0, image_inputs=None, text_inputs=None,
                         dtype=None):
                import torch

                super().__init__()
                self.embed_dim = dim
                self.seed = seed
                dtype = dtype or torch.float64
                gen = torch.Generator().manual_seed(seed)
                self.visual_proj = nn.Linear(dim, dim, dtype=dtype)
                self.text_proj = nn.Linear(dim, dim, dtype=dtype)
                self.ln = nn.LayerNorm(dim, dtype=dtype)
                with torch.no_grad():
                    for lin in (self.visual_proj, self.text_proj):
                        lin.weight.copy_(torch.eye(dim, dtype=dtype) + 0.1 * torch.randn(dim, dim, generator=gen, dtype=dtype))
                        lin.bias.copy_(0.1 * torch.randn(dim, generator=gen, dtype=dtype))
                self.image_inputs = dict(image_inputs or {})
                self.text_inputs = dict(text_inputs or {})
                self._dtype = dtype

            def _inputs(self, items, table, modality):
                import torch

                rows = []
                for it in items:
                    if isinstance(it, np.ndarray):
                        rows.append(it)
                    elif it in table:
                        rows.append(np.asarray(table[it]))
                    else:
                        rows.append(_seeded_vector(self.embed_dim, str(self.seed), modality, str(it)))
                return torch.tensor(np.stack(rows), dtype=self._dtype)

            def encode_image(self, images):
                return self.ln(self.visual_proj(self._inputs(images, self.image_inputs, "image")))

            def encode_text(self, texts):
                return self.ln(self.text_proj(self._inputs(texts, self.text_inputs, "text")))

        return _Toy(*args, **kwargs)


class OpenClipBundle(TorchBundle):
    """Real CLIP checkpoints through ``open_clip`` (optional dependency)."""

    ARCHS = {"ViT-B/16": "ViT-B-16", "RN50x16": "RN50x16", "RN101": "RN101"}

    def __init__(self, arch: str = "ViT-B/16", pretrained: str | None = "openai", device: str = "cpu",
                 init_temperature: float = INIT_TEMPERATURE):
        import open_clip
        import torch
        import torch.nn as nn

        model, _, preprocess = open_clip.create_model_and_transforms(
            self.ARCHS.get(arch, arch), pretrained=pretrained, device=device)
        tokenizer = open_clip.get_tokenizer(self.ARCHS.get(arch, arch))
        size = getattr(model.visual, "image_size", 224)
        size = size[0] if isinstance(size, (tuple, list)) else size

        class _Wrapper(nn.Module):
            def __init__(self):
                super().__init__()
                self.model = model

            def encode_image(self, images):
                from PIL import Image

                batch = []
                for ref in images:
                    if isinstance(ref, str) and ref == BLACK_IMAGE:
                        img = Image.new("RGB", (size, size))
                    elif isinstance(ref, Image.Image):
                        img = ref
                    else:
                        img = Image.open(ref).convert("RGB")
                    batch.append(preprocess(img))
                return self.model.encode_image(torch.stack(batch).to(device))

            def encode_text(self, texts):
                return self.model.encode_text(tokenizer(list(texts)).to(device))

        super().__init__(_Wrapper(), name=f"open_clip:{arch}:{pretrained}", init_temperature=init_temperature,
                         embed_dim=model.text_projection.shape[1])


# ---------------------------------------------------------------------------
# cache


class EmbeddingCache:
    """Content-addressed embedding store, in memory and optionally on disk.

    Records are keyed by bundle name, parameter fingerprint, modality and
    content hash, so a parameter update invalidates earlier entries. On disk
    each record is a JSON header line followed by the raw little-endian
    float64 vector.
    """

    def __init__(self, root: str | Path | None = None):
        self.root = Path(root) if root is not None else None
        if self.root is not None:
            self.root.mkdir(parents=True, exist_ok=True)
        self._mem: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(bundle_name: str, fingerprint: str, modality: Modality, chash: str) -> str:
        return hashlib.sha256("|".join([bundle_name, fingerprint, modality.value, chash]).encode()).hexdigest()

    def get(self, key: str) -> np.ndarray | None:
        vec = self._mem.get(key)
        if vec is None and self.root is not None:
            path = self.root / f"{key}.emb"
            if path.exists():
                raw = path.read_bytes()
                header, _, payload = raw.partition(b"\n")
                meta = json.loads(header)
                vec = np.frombuffer(payload, dtype="<f8").copy()
                if vec.shape != (meta["dim"],):
                    raise EncodingError(f"corrupt cache record {path}")
                self._mem[key] = vec
        if vec is None:
            self.misses += 1
        else:
            self.hits += 1
        return vec

    def put(self, key: str, vec: np.ndarray, modality: Modality, chash: str, fingerprint: str) -> None:
        vec = np.asarray(vec, dtype="<f8")
        with self._lock:
            self._mem[key] = vec
            if self.root is None:
                return
            header = json.dumps({"hash": chash, "modality": modality.value, "dim": int(vec.shape[0]),
                                 "fingerprint": fingerprint, "dtype": "<f8"}).encode()
            fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
            with os.fdopen(fd, "wb") as f:
                f.write(header + b"\n" + vec.tobytes())
            os.replace(tmp, self.root / f"{key}.emb")

    def clear(self) -> None:
        with self._lock:
            self._mem.clear()


def _encode(bundle: EncoderBundle, items: Sequence[Any], cache: EmbeddingCache | None,
            modality: Modality) -> list[Embedding]:
    if len(items) == 0:
        raise InvalidInputError(f"no {modality.value} inputs")
    fp = bundle.fingerprint() if cache is not None else ""
    hashes = [content_hash(x) if modality is Modality.IMAGE else
              hashlib.sha256(b"text:" + str(x).encode()).hexdigest() for x in items]
    vectors: list[np.ndarray | None] = [None] * len(items)
    if cache is not None:
        for i, h in enumerate(hashes):
            vectors[i] = cache.get(EmbeddingCache.key(bundle.name, fp, modality, h))
    missing = [i for i, v in enumerate(vectors) if v is None]
    if missing:
        fn = bundle.visual_encode if modality is Modality.IMAGE else bundle.text_encode
        batch = [items[i] for i in missing]
        try:
            raw = np.asarray(fn(batch), dtype=np.float64)
        except Exception:
            # locate the offending input
            for i in missing:
                try:
                    fn([items[i]])
                except Exception as e:
                    raise EncodingError(f"{modality.value} encoder failed: {e}", i) from e
            raise
        if raw.shape != (len(batch), bundle.embed_dim):
            raise ContractError(f"{modality.value} encoder returned shape {raw.shape}, "
                                f"expected ({len(batch)}, {bundle.embed_dim})")
        for j, i in enumerate(missing):
            try:
                vec = l2_normalize(raw[j])
            except EncodingError as e:
                raise EncodingError(str(e), i) from e
            vectors[i] = vec
            if cache is not None:
                cache.put(EmbeddingCache.key(bundle.name, fp, modality, hashes[i]), vec, modality, hashes[i], fp)
    return [Embedding(v, modality, h) for v, h in zip(vectors, hashes)]


def encode_text(bundle: EncoderBundle, texts: Sequence[str], cache: EmbeddingCache | None = None) -> list[Embedding]:
    return _encode(bundle, texts, cache, Modality.TEXT)


def encode_image(bundle: EncoderBundle, images: Sequence[Any], cache: EmbeddingCache | None = None) -> list[Embedding]:
    return _encode(bundle, images, cache, Modality.IMAGE)


def _as_vector(x) -> np.ndarray:
    return x.vector if isinstance(x, Embedding) else np.asarray(x, dtype=np.float64)


def alignment_scores(image_emb, text_embs: Sequence, scale: float = 1.0) -> np.ndarray:
    """``scale * <image, text_i>`` for every text embedding, in order."""
    if scale <= 0:
        raise ContractError(f"scale must be positive, got {scale}")
    img = _as_vector(image_emb)
    texts = np.stack([_as_vector(t) for t in text_embs]) if len(text_embs) else np.zeros((0, img.shape[0]))
    if texts.shape[1:] != img.shape:
        raise ContractError(f"dimension mismatch: image {img.shape}, texts {texts.shape[1:]}")
    return scale * (texts @ img)


@dataclass(frozen=True)
class ScoreRow:
    answer: str
    prompt: str
    score: float


def predict_zero_shot(bundle: EncoderBundle, image, prompt_set, cache: EmbeddingCache | None = None,
                      scale: float | None = None) -> tuple[str, list[ScoreRow]]:
    """Answer whose prompt aligns best with the image; ties go to the earlier prompt."""
    if prompt_set is None or len(prompt_set) == 0:
        raise ContractError("empty prompt set")
    img = encode_image(bundle, [image], cache)[0]
    txt = encode_text(bundle, prompt_set.prompts, cache)
    scores = alignment_scores(img, txt, bundle.logit_scale if scale is None else scale)
    best = int(np.argmax(scores))
    table = [ScoreRow(a, p, float(s)) for (a, p), s in zip(prompt_set.entries, scores)]
    return prompt_set.entries[best][0], table
