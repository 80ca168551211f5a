import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clipzero.answers import PromptSet
from clipzero.errors import ContractError, InvalidInputError
from clipzero.scoring import (
    BLACK_IMAGE,
    INIT_TEMPERATURE,
    EmbeddingCache,
    EncodingError,
    HashEncoderBundle,
    LookupBundle,
    ParamKind,
    TorchBundle,
    ToyDualEncoder,
    alignment_scores,
    encode_image,
    encode_text,
    kind_from_name,
    load_param_manifest,
    predict_zero_shot,
)


@pytest.mark.parametrize("name, kind", [
    ("visual.bn1.weight", ParamKind.NORM_GAIN),
    ("visual.layer1.0.bn3.bias", ParamKind.NORM_SHIFT),
    ("visual.layer1.0.downsample.1.weight", ParamKind.WEIGHT),
    ("visual.layer1.0.downsample.1.bias", ParamKind.BIAS),
    ("transformer.resblocks.0.ln_1.weight", ParamKind.NORM_GAIN),
    ("ln_final.bias", ParamKind.NORM_SHIFT),
    ("visual.ln_post.weight", ParamKind.NORM_GAIN),
    ("transformer.resblocks.3.attn.in_proj_bias", ParamKind.BIAS),
    ("transformer.resblocks.3.attn.in_proj_weight", ParamKind.WEIGHT),
    ("encoder.layer.0.attention.output.LayerNorm.weight", ParamKind.NORM_GAIN),
    ("encoder.layer.0.layernorm_before.weight", ParamKind.NORM_GAIN),
    ("visual.attnpool.c_proj.bias", ParamKind.BIAS),
    ("logit_scale", ParamKind.WEIGHT),
])
def test_kind_from_name(name, kind):
    assert kind_from_name(name) is kind


# bias / norm / bias+norm parameter totals, checked against the released checkpoints' tallies
TABLE = {
    "RN101": (127_488, 123_392, 189_184),
    "RN50x16": (209_088, 220_800, 319_488),
    "ViT-B/16": (171_008, 65_536, 203_776),
}


@pytest.mark.parametrize("arch", TABLE)
def test_manifest_counts(arch):
    params = load_param_manifest(arch)
    bias = sum(p.numel for p in params if p.kind in (ParamKind.BIAS, ParamKind.NORM_SHIFT))
    norm = sum(p.numel for p in params if p.kind in (ParamKind.NORM_GAIN, ParamKind.NORM_SHIFT))
    binor = sum(p.numel for p in params if p.kind is not ParamKind.WEIGHT)
    assert (bias, norm, binor) == TABLE[arch]


def test_manifest_unknown_arch():
    with pytest.raises(InvalidInputError):
        load_param_manifest("RN9000")


@settings(max_examples=50, deadline=None)
@given(st.lists(st.text(min_size=1, max_size=20), min_size=1, max_size=8))
def test_embeddings_have_unit_norm(texts):
    for e in encode_text(HashEncoderBundle(dim=8), texts):
        assert abs(np.linalg.norm(e.vector) - 1) <= 1e-6


def test_lookup_pass_through():
    basis = np.zeros(6)
    basis[2] = 3.0
    b = LookupBundle({"hello": basis}, {}, dim=6)
    assert np.array_equal(encode_text(b, ["hello"])[0].vector, basis / 3.0)


def test_cache_bit_identical_and_skips_adapter(tmp_path):
    b = HashEncoderBundle(dim=16)
    cache = EmbeddingCache(tmp_path)
    cold = encode_text(b, ["a cat", "a dog"], cache)
    calls = b.calls
    warm = encode_text(b, ["a cat", "a dog"], cache)
    assert b.calls == calls
    assert all(x.vector.tobytes() == y.vector.tobytes() for x, y in zip(cold, warm))
    # a fresh process reading from disk
    disk = encode_text(HashEncoderBundle(dim=16), ["a cat"], EmbeddingCache(tmp_path))
    assert disk[0].vector.tobytes() == cold[0].vector.tobytes()
    nocache = encode_text(HashEncoderBundle(dim=16), ["a cat"])
    assert nocache[0].vector.tobytes() == cold[0].vector.tobytes()


def test_cache_invalidated_by_parameter_update():
    import torch

    bundle = TorchBundle(ToyDualEncoder(seed=0), name="toy")
    cache = EmbeddingCache()
    before = encode_image(bundle, ["img"], cache)[0].vector
    with torch.no_grad():
        bundle.module.visual_proj.bias.add_(torch.tensor([0.5, -0.5, 0.0, 0.2], dtype=torch.float64))
    bundle.mark_updated()
    after = encode_image(bundle, ["img"], cache)[0].vector
    assert not np.allclose(before, after)


def test_encoding_error_points_at_bad_input():
    class Picky(HashEncoderBundle):
        def text_encode(self, texts):
            if any(t == "bad" for t in texts):
                raise ValueError("cannot tokenize")
            return super().text_encode(texts)

    with pytest.raises(EncodingError) as info:
        encode_text(Picky(dim=4), ["fine", "ok", "bad", "x"])
    assert info.value.index == 2


def test_zero_vector_is_an_encoding_error():
    b = LookupBundle({"zero": np.zeros(4)}, {}, dim=4)
    with pytest.raises(EncodingError):
        encode_text(b, ["zero"])


def test_empty_inputs():
    with pytest.raises(InvalidInputError):
        encode_text(HashEncoderBundle(), [])


def test_alignment_examples():
    assert list(alignment_scores(np.array([1.0, 0.0]), [np.array([1.0, 0.0]), np.array([0.0, 1.0])])) == [1.0, 0.0]
    rng = np.random.default_rng(0)
    vs = rng.standard_normal((6, 8))
    vs /= np.linalg.norm(vs, axis=1, keepdims=True)
    img, texts = vs[0], list(vs[1:])
    s = 1 / INIT_TEMPERATURE
    got = alignment_scores(img, texts, s)
    assert np.allclose(got, [s * float(np.dot(img, t)) for t in texts])
    assert np.allclose(got, s * alignment_scores(img, texts, 1.0))
    # operand swap
    assert np.allclose([alignment_scores(t, [img])[0] for t in texts], alignment_scores(img, texts))
    with pytest.raises(ContractError):
        alignment_scores(img, texts, 0.0)
    with pytest.raises(ContractError):
        alignment_scores(img, [np.ones(3)])


def test_predict_self_similar_prompt_wins():
    v = np.array([0.2, 0.9, -0.1, 0.3])
    b = LookupBundle({"This looks like a happy occasion": v, "This does not look like a happy occasion": -v},
                     {"party.jpg": v}, dim=4)
    ps = PromptSet((("yes", "This looks like a happy occasion"), ("no", "This does not look like a happy occasion")))
    answer, table = predict_zero_shot(b, "party.jpg", ps)
    assert answer == "yes" and table[0].score > table[1].score


@pytest.mark.parametrize("seed", range(5))
def test_predict_matches_oracle_and_is_scale_invariant(seed):
    b = HashEncoderBundle(dim=32, seed=seed)
    ps = PromptSet(tuple((f"a{i}", f"prompt number {i}") for i in range(200)))
    answer, table = predict_zero_shot(b, f"image-{seed}", ps)
    img = encode_image(b, [f"image-{seed}"])[0].vector
    oracle = max(range(200), key=lambda i: (float(np.dot(img, encode_text(b, [ps.prompts[i]])[0].vector)), -i))
    assert answer == ps.answers[oracle]
    for scale in (1e-3, 1.0, 14.3, 100.0, 1e4):
        assert predict_zero_shot(b, f"image-{seed}", ps, scale=scale)[0] == answer


def test_predict_ties_go_to_first_prompt():
    v = np.array([1.0, 0.0])
    b = LookupBundle({"p": v, "q": v}, {"img": v}, dim=2)
    assert predict_zero_shot(b, "img", PromptSet((("first", "p"), ("second", "q"))))[0] == "first"


def test_predict_rejects_empty():
    with pytest.raises(ContractError):
        predict_zero_shot(HashEncoderBundle(), "img", PromptSet(()))


def test_black_image_is_an_ordinary_reference():
    e = encode_image(HashEncoderBundle(dim=8), [BLACK_IMAGE])[0]
    assert abs(np.linalg.norm(e.vector) - 1) < 1e-9


def test_toy_parameter_tags():
    params = TorchBundle(ToyDualEncoder(), name="toy").parameters()
    assert sum(p.numel for p in params) == 48
    assert sum(p.numel for p in params if p.kind is not ParamKind.WEIGHT) == 16


@pytest.mark.heavy
def test_open_clip_real_checkpoint():
    pytest.importorskip("open_clip")
    from clipzero.scoring import OpenClipBundle

    try:
        bundle = OpenClipBundle("ViT-B/16", pretrained="openai")
    except Exception as e:  # weights not cached offline
        pytest.skip(f"checkpoint unavailable: {e}")
    names = {p.name for p in bundle.parameters()}
    manifest = {p.name for p in load_param_manifest("ViT-B/16")}
    assert manifest <= names | {"logit_scale"}
