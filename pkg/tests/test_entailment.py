import dataclasses

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from clipzero.dataset import ENTAILMENT_LABELS, EntailmentLabel
from clipzero.entailment import (
    EntailmentClassifier,
    GridPoint,
    MlpConfig,
    PremiseMode,
    build_mlp,
    evaluate,
    fuse,
    fusion_features,
    grid_points,
    majority_rate,
    masked_control,
    predict_entailment,
    predict_entailment_batch,
    run_transfer,
    train_text_entailment,
)
from clipzero.errors import ConfigError, ContractError, InvalidInputError
from clipzero.scoring import BLACK_IMAGE, LookupBundle, TorchBundle, ToyDualEncoder

from helpers import aligned_fixture

DESK_GRID = {"learning_rate": [1e-3], "batch_size": [32], "dropout": [0.0]}


@pytest.fixture(scope="module")
def fixture():
    examples, text, image = aligned_fixture(300, seed=0)
    bundle = LookupBundle(text, image, dim=16, name="aligned")
    n = len(examples)
    return examples[: n * 3 // 5], examples[n * 3 // 5 : n * 4 // 5], examples[n * 4 // 5 :], bundle


@pytest.fixture(scope="module")
def transfer(fixture):
    train, valid, test, bundle = fixture
    return run_transfer(train, valid, test, bundle, "text->image", DESK_GRID, seed=0)


def test_fuse_examples():
    assert fuse([1, 0], [0, 1]).tolist() == [1, 0, 0, 1, 1, 1, 1, -1, 0, 0]
    v = np.array([0.5, -2.0, 3.0])
    out = fuse(v, v)
    assert np.array_equal(out[9:12], np.zeros(3)) and np.array_equal(out[6:9], 2 * v)
    assert np.array_equal(out[12:], v ** 2)
    with pytest.raises(ContractError):
        fuse([1, 2], [1, 2, 3])


@pytest.mark.parametrize("d", [2, 512])
def test_fuse_blocks_recover_exactly(d):
    rng = np.random.default_rng(d)
    for _ in range(1000 if d == 2 else 100):
        a, b = rng.standard_normal(d), rng.standard_normal(d)
        out = fuse(a, b)
        assert out.shape == (5 * d,)
        for block, expected in zip(np.split(out, 5), (a, b, a + b, a - b, a * b)):
            assert np.array_equal(block, expected)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (2, 7), elements=st.floats(-1e6, 1e6)))
def test_fuse_batched_matches_rows(m):
    batch = fuse(m[:1].repeat(3, 0), m[1:].repeat(3, 0))
    assert batch.shape == (3, 35)
    assert np.array_equal(batch[0], fuse(m[0], m[1]))


def test_grid_has_27_points():
    pts = grid_points()
    assert len(pts) == 27 and len(set(pts)) == 27
    assert {p.learning_rate for p in pts} == {1e-6, 3e-6, 5e-6}
    with pytest.raises(ConfigError):
        grid_points({"momentum": [0.9]})
    with pytest.raises(ConfigError):
        grid_points({"dropout": [1.0]})


def test_grid_search_selects_one_of_all_candidates(fixture):
    train, valid, _, bundle = fixture
    grid = {"learning_rate": [1e-4, 1e-3, 3e-3], "batch_size": [32, 64, 128], "dropout": [0.0, 0.1, 0.4]}
    # 2 epochs per point keeps the 27 runs short
    clf = train_text_entailment(train[:90], bundle, grid, seed=0, valid=valid[:60], config=MlpConfig(epochs=2))
    assert len(clf.candidates) == 27
    assert clf.valid_accuracy == max(acc for _, acc in clf.candidates)


def test_mlp_shape():
    layers = [m for m in build_mlp(80, 0.1) if isinstance(m, torch.nn.Linear)]
    assert [(l.in_features, l.out_features) for l in layers] == [(80, 1024), (1024, 128), (128, 3)]


def test_encoder_frozen_during_training():
    examples, text, image = aligned_fixture(20, dim=4)
    toy = TorchBundle(ToyDualEncoder(dim=4, text_inputs=text, image_inputs=image), name="toy")
    before = toy.fingerprint()
    train_text_entailment(examples, toy, DESK_GRID, seed=0)
    assert toy.fingerprint() == before


def test_training_is_deterministic(fixture):
    train, valid, _, bundle = fixture
    a = train_text_entailment(train[:120], bundle, DESK_GRID, seed=4, valid=valid, config=MlpConfig(epochs=3))
    b = train_text_entailment(train[:120], bundle, DESK_GRID, seed=4, valid=valid, config=MlpConfig(epochs=3))
    for (_, x), (_, y) in zip(a.module.state_dict().items(), b.module.state_dict().items()):
        assert torch.equal(x, y)


def test_missing_inputs(fixture):
    _, _, _, bundle = fixture
    with pytest.raises(InvalidInputError):
        train_text_entailment([], bundle, DESK_GRID)


def test_premise_routing():
    class Spy(LookupBundle):
        def __init__(self, *a, **k):
            super().__init__(*a, **k)
            self.seen = []

        def visual_encode(self, images):
            self.seen += [("image", i) for i in images]
            return super().visual_encode(images)

        def text_encode(self, texts):
            self.seen += [("text", t) for t in texts]
            return super().text_encode(texts)

    spy = Spy({}, {}, dim=4)
    clf = EntailmentClassifier(build_mlp(20, 0.0), 20, GridPoint(1e-3, 32, 0.0), 0)
    predict_entailment(clf, spy, "123.jpg", "A dog.")
    predict_entailment(clf, spy, "A dog runs.", "A dog.")
    predict_entailment(clf, spy, BLACK_IMAGE, "A dog.")
    assert ("image", "123.jpg") in spy.seen and ("text", "A dog runs.") in spy.seen
    assert ("image", BLACK_IMAGE) in spy.seen


def test_identity_classifier_on_constructed_fusion():
    # weights read the product block: positive sum -> entailment, negative -> contradiction
    d = 2
    module = torch.nn.Sequential(torch.nn.Linear(5 * d, 3, bias=False))
    with torch.no_grad():
        w = torch.zeros(3, 5 * d)
        w[ENTAILMENT_LABELS.index(EntailmentLabel.ENTAILMENT), 4 * d :] = 1.0
        w[ENTAILMENT_LABELS.index(EntailmentLabel.CONTRADICTION), 4 * d :] = -1.0
        module[0].weight.copy_(w)
    clf = EntailmentClassifier(module, 5 * d, GridPoint(1e-3, 32, 0.0), 0)
    b = LookupBundle({"h": np.array([1.0, 0.0]), "p": np.array([1.0, 0.1]), "q": np.array([-1.0, 0.1])}, {}, dim=2)
    assert predict_entailment(clf, b, "p", "h", "text") is EntailmentLabel.ENTAILMENT
    assert predict_entailment(clf, b, "q", "h", "text") is EntailmentLabel.CONTRADICTION


def test_batch_equals_single(fixture, transfer):
    _, _, test, bundle = fixture
    _, clf = transfer
    sub = test[:25]
    premises = [e.premise_image_ref for e in sub]
    hyps = [e.hypothesis for e in sub]
    assert predict_entailment_batch(clf, bundle, premises, hyps) == [
        predict_entailment(clf, bundle, p, h) for p, h in zip(premises, hyps)]


def test_masking_is_idempotent(fixture):
    _, _, test, bundle = fixture
    masked = [dataclasses.replace(e, premise_image_ref=BLACK_IMAGE) for e in test]
    once = fusion_features(bundle, test, PremiseMode.BLACK)
    twice = fusion_features(bundle, masked, PremiseMode.BLACK)
    assert np.array_equal(once, twice)
    assert np.array_equal(fusion_features(bundle, masked, PremiseMode.IMAGE), once)


def test_cross_modal_transfer_and_control(fixture, transfer):
    _, _, test, bundle = fixture
    report, clf = transfer
    assert report.test_accuracy >= 0.95
    # hypotheses carry no label signal, so a constant premise leaves only the majority rate
    assert abs(report.control_accuracy - majority_rate(test)) <= 0.02
    zero = masked_control(clf, bundle, test, "zero")
    assert abs(zero - majority_rate(test)) <= 0.02
    with pytest.raises(ConfigError):
        masked_control(clf, bundle, test, "grey")


def test_fixture_is_separable_by_an_independent_rule(fixture):
    # thresholding the product block's sum (the premise-hypothesis cosine) labels the fixture
    _, _, test, bundle = fixture
    d = bundle.embed_dim
    cos = fusion_features(bundle, test, PremiseMode.IMAGE)[:, 4 * d :].sum(1)
    pred = np.where(cos > 0.5, "entailment", np.where(cos < -0.5, "contradiction", "neutral"))
    assert (pred == np.array([e.label.value for e in test])).mean() >= 0.95


def test_image_to_text_report_has_same_schema(fixture, transfer):
    train, valid, test, bundle = fixture
    forward, _ = transfer
    back, _ = run_transfer(train, valid, test, bundle, "image->text", DESK_GRID, seed=0)
    assert set(back.to_json()) == set(forward.to_json())
    assert back.control_accuracy is None and back.eval_mode is PremiseMode.TEXT
    assert back.test_accuracy >= 0.95


def test_confusion_matrix_sums(fixture, transfer):
    _, _, test, bundle = fixture
    report, clf = transfer
    acc, conf = evaluate(clf, bundle, test, PremiseMode.IMAGE)
    assert conf.sum() == len(test) and np.trace(conf) / len(test) == pytest.approx(acc)


def test_classifier_save_load(tmp_path, fixture, transfer):
    _, _, test, bundle = fixture
    _, clf = transfer
    clf.save(tmp_path / "clf.pt")
    again = EntailmentClassifier.load(tmp_path / "clf.pt")
    X = fusion_features(bundle, test[:10], PremiseMode.IMAGE)
    assert np.array_equal(clf.logits(X), again.logits(X))
