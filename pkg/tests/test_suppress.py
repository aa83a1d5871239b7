import numpy as np
import pytest
import torch

import chamfer_ood.classifier as classifier_module
from chamfer_ood.classifier import (
    AttackConfig,
    ClassifierConfig,
    ClassifierModel,
    build_classifier,
    make_adversarial_ood,
    neighborhood_worst_case,
    predict_confidences,
    suppression_loss,
    suppression_loss_torch,
    train_classifier,
)
from chamfer_ood.data import ImageBatch, LabeledDataset, load_dataset, make_uniform_ood, subsample
from chamfer_ood.exceptions import ArgumentError, CheckpointError, DivergenceError
from chamfer_ood.rng import RngState


def softmax_oracle(logits):
    exp = np.exp(np.asarray(logits, dtype=np.float64))
    v = exp / exp.sum()
    return float(-(1.0 / len(v)) * np.log(v).sum())


def toy_dataset(n=64, k=4, h=8, w=8, seed=0):
    gen = np.random.default_rng(seed)
    images = gen.random((n, h, w, 1), dtype=np.float32)
    labels = np.arange(n) % k
    return LabeledDataset(images, labels, k, "train", "toy")


def quick_config(**overrides):
    base = dict(architecture="small_conv", num_classes=4, epochs=1, batch_size=16, lr=1e-3)
    base.update(overrides)
    return ClassifierConfig(**base)


@pytest.fixture(scope="module")
def digits_model(tmp_path_factory):
    """A small baseline net with real class signal, for attack tests."""
    root = tmp_path_factory.mktemp("data")
    ds = subsample(load_dataset("synth_digits", "train", root=root), 2000, RngState(0))
    config = ClassifierConfig(num_classes=10, epochs=3, batch_size=128, lr=1e-3)
    model = train_classifier(config, ds, None, RngState(1))
    return ds, model


# ---------------------------------------------------------------------------
# suppression loss
# ---------------------------------------------------------------------------

def test_suppression_uniform_minimum():
    assert suppression_loss(np.zeros(10)) == pytest.approx(np.log(10), abs=1e-9)
    assert suppression_loss(np.full(7, 3.3)) == pytest.approx(np.log(7), abs=1e-9)


def test_suppression_hand_oracle():
    logits = np.zeros(10)
    logits[0] = 10.0
    value = suppression_loss(logits)
    assert value == pytest.approx(softmax_oracle(logits), rel=1e-12)
    assert value > np.log(10)


def test_suppression_shift_invariance():
    gen = np.random.default_rng(0)
    logits = gen.normal(size=6)
    assert suppression_loss(logits + 17.5) == pytest.approx(suppression_loss(logits), rel=1e-12)


def test_suppression_errors():
    with pytest.raises(ArgumentError):
        suppression_loss([1.0])
    with pytest.raises(ArgumentError):
        suppression_loss([np.inf, 0.0])


def test_suppression_gradient_matches_finite_differences():
    gen = np.random.default_rng(1)
    logits = gen.normal(size=8)
    t = torch.tensor(logits, dtype=torch.float64, requires_grad=True)
    suppression_loss_torch(t.view(1, -1)).sum().backward()
    eps = 1e-6
    numeric = np.empty_like(logits)
    for i in range(len(logits)):
        hi, lo = logits.copy(), logits.copy()
        hi[i] += eps
        lo[i] -= eps
        numeric[i] = (suppression_loss(hi) - suppression_loss(lo)) / (2 * eps)
    denom = max(np.abs(numeric).max(), 1e-12)
    assert np.abs(t.grad.numpy() - numeric).max() / denom < 1e-5


def test_suppression_torch_matches_numpy():
    gen = np.random.default_rng(2)
    batch = gen.normal(size=(5, 9))
    got = suppression_loss_torch(torch.tensor(batch)).numpy()
    want = [suppression_loss(row) for row in batch]
    assert np.allclose(got, want, rtol=1e-6)


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ArgumentError):
        ClassifierConfig(mode="codes_plus")  # attack required
    with pytest.raises(ArgumentError):
        ClassifierConfig(architecture="vgg")
    with pytest.raises(ArgumentError):
        AttackConfig(epsilon=-0.1)
    assert AttackConfig(epsilon=0.3, steps=40).resolved_step_size == pytest.approx(2.5 * 0.3 / 40)
    cfg = ClassifierConfig(mode="codes_plus", attack={"epsilon": 0.3, "steps": 5})
    assert isinstance(cfg.attack, AttackConfig)


# ---------------------------------------------------------------------------
# prediction contract
# ---------------------------------------------------------------------------

def test_predict_confidences_rows():
    ds = toy_dataset()
    model = train_classifier(quick_config(), ds, None, RngState(3))
    batch = np.concatenate([ds.images[:4], ds.images[:1]])  # duplicate row 0
    conf = predict_confidences(model, batch)
    assert conf.shape == (5, 4)
    assert np.abs(conf.sum(axis=1) - 1.0).max() < 1e-6
    assert np.allclose(conf[0], conf[4])
    with pytest.raises(ArgumentError):
        model.logits(np.zeros((2, 6, 6, 1), dtype=np.float32))


def test_train_smoke_history_and_reload(tmp_path):
    ds = toy_dataset()
    model = train_classifier(quick_config(), ds, None, RngState(4), out_dir=tmp_path)
    assert len(model.history) == 1
    assert np.isfinite(model.history[0]["ce_loss"])
    assert (tmp_path / "train_history.csv").read_text().startswith(
        "epoch,ce_loss,suppression_loss,train_accuracy"
    )
    reloaded = ClassifierModel.load(tmp_path / "classifier.pt")
    probe = ds.images[:8]
    assert np.array_equal(model.logits(probe), reloaded.logits(probe))
    truncated = tmp_path / "broken.pt"
    truncated.write_bytes((tmp_path / "classifier.pt").read_bytes()[:100])
    with pytest.raises(CheckpointError):
        ClassifierModel.load(truncated)


def test_train_codes_requires_pool():
    ds = toy_dataset()
    with pytest.raises(ArgumentError):
        train_classifier(quick_config(mode="codes"), ds, None, RngState(0))
    bad_pool = np.zeros((8, 4, 4, 1), dtype=np.float32)
    with pytest.raises(ArgumentError):
        train_classifier(quick_config(mode="codes"), ds, bad_pool, RngState(0))


def test_train_deterministic():
    ds = toy_dataset()
    pool = make_uniform_ood((8, 8, 1), 32, RngState(5)).images
    a = train_classifier(quick_config(mode="codes"), ds, pool, RngState(6))
    b = train_classifier(quick_config(mode="codes"), ds, pool, RngState(6))
    assert np.array_equal(a.logits(ds.images[:8]), b.logits(ds.images[:8]))


def test_clean_half_sequence_shared_across_modes(monkeypatch):
    """Baseline and codes runs must consume identical clean-image sequences."""
    ds = toy_dataset(n=64)
    pool = make_uniform_ood((8, 8, 1), 16, RngState(7)).images
    runs = {}
    original = classifier_module.build_classifier

    def record(mode):
        captured = []

        def spy(config, shape):
            model = original(config, shape)
            model.net.register_forward_pre_hook(
                lambda module, args: captured.append(args[0].detach().clone())
            )
            return model

        monkeypatch.setattr(classifier_module, "build_classifier", spy)
        train_classifier(quick_config(mode=mode, epochs=2), ds,
                         pool if mode != "baseline" else None, RngState(8))
        monkeypatch.setattr(classifier_module, "build_classifier", original)
        return captured

    runs["baseline"] = record("baseline")
    runs["codes"] = record("codes")
    # baseline: one forward per step; codes: clean then code forward per step
    clean_baseline = runs["baseline"]
    clean_codes = runs["codes"][0::2]
    assert len(clean_baseline) == len(clean_codes)
    for a, b in zip(clean_baseline, clean_codes):
        assert torch.equal(a, b)


def test_separate_norm_branches_do_not_mix():
    ds = toy_dataset(n=32)
    gen = np.random.default_rng(9)
    pool = np.clip(gen.random((16, 8, 8, 1)) * 0.2 + 0.8, 0, 1).astype(np.float32)  # bright pool
    config = quick_config(mode="codes", separate_norm=True, epochs=1, batch_size=8)
    model = train_classifier(config, ds, pool, RngState(10))
    assert model.norm_branches == 2
    clean_bn, codes_bn = model.net.norm1.branches
    assert not torch.allclose(clean_bn.running_mean, codes_bn.running_mean)


def test_divergence_error_carries_batch():
    ds = toy_dataset()
    with pytest.raises(DivergenceError, match="epoch 1"):
        train_classifier(quick_config(lr=1e18, epochs=1), ds, None, RngState(11))


# ---------------------------------------------------------------------------
# input-space ascent
# ---------------------------------------------------------------------------

def test_worst_case_zero_epsilon_identity(digits_model):
    ds, model = digits_model
    batch = ImageBatch(ds.images[:6], "code")
    out = neighborhood_worst_case(model, batch, AttackConfig(epsilon=0.0, steps=3))
    assert np.array_equal(out.images, batch.images)


def test_worst_case_projection_and_monotonicity(digits_model):
    ds, model = digits_model
    attack = AttackConfig(epsilon=0.1, steps=8)
    start = ds.images[:16]
    out = neighborhood_worst_case(model, ImageBatch(start, "code"), attack)
    assert np.all(out.images <= 1.0) and np.all(out.images >= 0.0)
    assert np.abs(out.images - start).max() <= attack.epsilon + 1e-6
    before = predict_confidences(model, start).max(axis=1)
    after = predict_confidences(model, out.images).max(axis=1)
    assert np.all(after >= before - 1e-6)


def test_adversarial_noise_raises_confidence(digits_model):
    ds, model = digits_model
    attack = AttackConfig(epsilon=0.3, steps=15)
    rng = RngState(12)
    adv = make_adversarial_ood(model, "noise", ds, attack, rng, n=64)
    assert adv.provenance == "adversarial"
    seeds_again = make_adversarial_ood(model, "noise", ds, attack, rng, n=64)
    assert np.array_equal(adv.images, seeds_again.images)  # determinism
    from chamfer_ood.data import make_noise_ood

    base = make_noise_ood(ds, 64, rng.child(0))
    before = predict_confidences(model, base).max(axis=1)
    after = predict_confidences(model, adv).max(axis=1)
    assert after.mean() > before.mean()
    assert (after > before).mean() >= 0.9
    assert np.abs(adv.images - base.images).max() <= attack.epsilon + 1e-6


def test_adversarial_sample_mode(digits_model):
    ds, model = digits_model
    attack = AttackConfig(epsilon=0.1, steps=5)
    adv = make_adversarial_ood(model, "sample", ds, attack, RngState(13), n=32)
    assert adv.images.shape == (32, 28, 28, 1)
    with pytest.raises(ArgumentError):
        make_adversarial_ood(model, "sample", ImageBatch(ds.images[:4], "indist"), attack, RngState(0))
    with pytest.raises(ArgumentError):
        make_adversarial_ood(model, "mystery", ds, attack, RngState(0))


def test_resnet_architecture_smoke():
    gen = np.random.default_rng(14)
    images = gen.random((24, 32, 32, 3), dtype=np.float32)
    ds = LabeledDataset(images, np.arange(24) % 3, 3, "train", "rgb")
    config = ClassifierConfig(architecture="resnet18_class", num_classes=3, epochs=1, batch_size=8)
    model = train_classifier(config, ds, None, RngState(15))
    conf = predict_confidences(model, images[:4])
    assert conf.shape == (4, 3)
    emb = model.embeddings(images[:4])
    assert emb.shape == (4, 512)
