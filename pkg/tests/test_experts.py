import numpy as np
import pytest

from loracl import experts, lora, tensor as T, vit
from loracl.errors import ContractError, DataError, NumericError

from oracles import linear_probe_accuracy

CFG = vit.ModelConfig()


@pytest.fixture(scope="module")
def backbone():
    params = vit.init_params(CFG, seed=0)
    params.freeze()
    return params


def _tinted_two_class(n_per=80, seed=5):
    rng = np.random.default_rng(seed)
    imgs = rng.random((2 * n_per, 16, 16, 3)) * 0.4
    imgs[:n_per, :, :, 0] += 0.6
    imgs[n_per:, :, :, 2] += 0.6
    labels = np.array([0] * n_per + [1] * n_per)
    return imgs, labels


def _hash_tensors(named):
    return {name: t.data.tobytes() for name, t in named}


# ---------------------------------------------------------------- optimizer


def test_cosine_schedule_endpoints():
    assert experts.cosine_multiplier(0, 400) == 1.0
    assert experts.cosine_multiplier(399, 400) <= 1e-6
    assert experts.cosine_multiplier(0, 1) == 1.0
    with pytest.raises(ContractError):
        experts.cosine_multiplier(5, 5)
    with pytest.raises(ContractError):
        experts.cosine_multiplier(-1, 5)


def test_cosine_schedule_within_unit_interval():
    vals = [experts.cosine_multiplier(i, 37) for i in range(37)]
    assert all(0.0 <= v <= 1.0 for v in vals)
    assert vals == sorted(vals, reverse=True)


def test_zero_gradient_zero_decay_leaves_params():
    p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    before = p.data.tobytes()
    cfg = experts.TrainConfig(weight_decay=0.0)
    opt = experts.AdamW([("p", p)], cfg, total_steps=10)
    p.grad = np.zeros(2)
    opt.step(0)
    assert p.data.tobytes() == before
    opt.step(1)  # no grad set at all: also a no-op
    assert p.data.tobytes() == before


def test_quadratic_converges_to_optimum():
    w = T.Tensor(np.array([0.0]), requires_grad=True)
    cfg = experts.TrainConfig(learning_rate=0.1, weight_decay=0.0)
    opt = experts.AdamW([("w", w)], cfg, total_steps=200)
    for step in range(200):
        w.grad = 2.0 * (w.data - 3.0)
        opt.step(step)
    assert abs(w.data[0] - 3.0) < 1e-2


def test_nonfinite_gradient_names_parameter():
    p = T.Tensor(np.ones(3), requires_grad=True)
    opt = experts.AdamW([("head.w", p)], experts.TrainConfig(), total_steps=5)
    p.grad = np.array([1.0, np.nan, 0.0])
    with pytest.raises(NumericError, match="head.w"):
        opt.step(0)


def test_step_beyond_schedule_rejected():
    p = T.Tensor(np.ones(1), requires_grad=True)
    opt = experts.AdamW([("p", p)], experts.TrainConfig(), total_steps=3)
    with pytest.raises(ContractError):
        opt.step(3)


# ----------------------------------------------------------------- training


def test_single_class_dataset_reaches_perfect_accuracy(backbone):
    rng = np.random.default_rng(7)
    imgs = rng.random((24, 16, 16, 3))
    ex = experts.train_expert(backbone, imgs, np.full(24, 4),
                              experts.TrainConfig(epochs=3, seed=1))
    assert ex.head.label_map == (4,)
    assert ex.training_log[-1]["accuracy"] == 1.0
    assert ex.training_log[-1]["loss"] < 1e-12


def test_separable_two_class_trains_to_high_accuracy(backbone):
    imgs, labels = _tinted_two_class()
    feats = vit.embed_images(imgs, backbone)
    assert linear_probe_accuracy(feats, labels, feats, labels) >= 0.95

    ex = experts.train_expert(backbone, imgs, labels, experts.TrainConfig(seed=3))
    assert ex.training_log[-1]["accuracy"] >= 0.99
    assert ex.training_log[-1]["loss"] <= ex.training_log[0]["loss"]
    assert ex.trained


def test_backbone_bitwise_unchanged_and_experts_isolated(backbone):
    imgs, labels = _tinted_two_class(n_per=30)
    before = _hash_tensors(backbone.named_tensors())
    cfg = experts.TrainConfig(epochs=4, seed=11)
    first = experts.train_expert(backbone, imgs, labels, cfg, dataset_id="d1")
    first_snapshot = _hash_tensors(first.named_tensors())

    second = experts.train_expert(backbone, imgs[::-1], labels[::-1], cfg,
                                  dataset_id="d2")
    assert _hash_tensors(backbone.named_tensors()) == before
    assert _hash_tensors(first.named_tensors()) == first_snapshot
    assert second.dataset_id == "d2"


def test_trainable_scalar_budget_matches_accounting(backbone):
    imgs, labels = _tinted_two_class(n_per=20)
    cfg = experts.TrainConfig(epochs=2, rank=3, seed=2)
    ex = experts.train_expert(backbone, imgs, labels, cfg)
    actual = sum(t.size for _, t in ex.named_tensors())
    assert actual == lora.count_trainable_params(CFG, rank=3, num_classes=2)


def test_training_is_bitwise_deterministic(backbone):
    imgs, labels = _tinted_two_class(n_per=25)
    cfg = experts.TrainConfig(epochs=6, seed=9)
    a = experts.train_expert(backbone, imgs, labels, cfg)
    b = experts.train_expert(backbone, imgs, labels, cfg)
    assert _hash_tensors(a.named_tensors()) == _hash_tensors(b.named_tensors())
    assert a.training_log == b.training_log


def test_finalized_tensors_are_fp32_exact(backbone):
    imgs, labels = _tinted_two_class(n_per=20)
    ex = experts.train_expert(backbone, imgs, labels,
                              experts.TrainConfig(epochs=2, seed=4))
    for _, t in ex.named_tensors():
        snapped = t.data.astype(np.float32).astype(np.float64)
        assert t.data.tobytes() == snapped.tobytes()
        assert not t.requires_grad


def test_training_contract_errors(backbone):
    imgs, labels = _tinted_two_class(n_per=10)
    with pytest.raises(ContractError):
        experts.train_expert(backbone, imgs[:0], labels[:0], experts.TrainConfig())
    with pytest.raises(DataError):
        experts.train_expert(backbone, imgs, labels, experts.TrainConfig(epochs=1),
                             label_map=(0, 5))
    thawed = vit.init_params(CFG, seed=1, trainable=True)
    with pytest.raises(ContractError):
        experts.train_expert(thawed, imgs, labels, experts.TrainConfig(epochs=1))


# --------------------------------------------------------------- prediction


def _manual_expert(w, b, label_map):
    adapters = lora.new_adapter_set(CFG, rank=1, seed=0, dataset_id="m")
    head = experts.ClassifierHead(w=T.Tensor(w), b=T.Tensor(b), label_map=label_map)
    return experts.Expert(dataset_id="m", adapter_set=adapters, head=head,
                          trained=True)


def test_zero_head_predicts_first_label_uniformly(backbone):
    ex = _manual_expert(np.zeros((32, 2)), np.zeros(2), (7, 3))
    img = np.random.default_rng(0).random((16, 16, 3))
    class_id, probs = experts.predict_with_expert(ex, img, backbone)
    assert class_id == 7
    np.testing.assert_allclose(probs, [0.5, 0.5], atol=1e-12)


def test_probabilities_sum_to_one(backbone):
    rng = np.random.default_rng(1)
    ex = _manual_expert(rng.normal(size=(32, 5)), rng.normal(size=5),
                        (0, 1, 2, 3, 4))
    imgs = rng.random((8, 16, 16, 3))
    feats = vit.embed_images(imgs, backbone, adapters=ex.adapter_set)
    _, probs = experts.predict_batch(ex, feats)
    np.testing.assert_allclose(probs.sum(axis=1), np.ones(8), atol=1e-6)


def test_logit_shift_leaves_prediction(backbone):
    rng = np.random.default_rng(2)
    w = rng.normal(size=(32, 4))
    ex = _manual_expert(w, np.zeros(4), (10, 11, 12, 13))
    shifted = _manual_expert(w, np.full(4, 25.0), (10, 11, 12, 13))
    imgs = rng.random((6, 16, 16, 3))
    feats = vit.embed_images(imgs, backbone, adapters=ex.adapter_set)
    ids_a, _ = experts.predict_batch(ex, feats)
    ids_b, _ = experts.predict_batch(shifted, feats)
    np.testing.assert_array_equal(ids_a, ids_b)


def test_untrained_expert_rejected(backbone):
    ex = _manual_expert(np.zeros((32, 2)), np.zeros(2), (0, 1))
    ex.trained = False
    with pytest.raises(ContractError):
        experts.predict_batch(ex, np.zeros((1, 32)))


def test_predictions_match_merged_weight_recomputation(backbone):
    imgs, labels = _tinted_two_class(n_per=40)
    ex = experts.train_expert(backbone, imgs, labels,
                              experts.TrainConfig(epochs=10, seed=6))

    merged = vit.init_params(CFG, seed=0)
    merged.freeze()
    for li, layer in enumerate(merged.layers, start=1):
        layer.wq = lora.merge(layer.wq, ex.adapter_set.get(li, "query"))
        layer.wv = lora.merge(layer.wv, ex.adapter_set.get(li, "value"))

    held_out, _ = _tinted_two_class(n_per=15, seed=77)
    via_adapters = vit.embed_images(held_out, backbone, adapters=ex.adapter_set)
    via_merged = vit.embed_images(held_out, merged)
    ids_a, _ = experts.predict_batch(ex, via_adapters)
    ids_b, _ = experts.predict_batch(ex, via_merged)
    np.testing.assert_array_equal(ids_a, ids_b)
