import numpy as np
import pytest
import torch

from chamfer_ood.data import LabeledDataset
from chamfer_ood.exceptions import ArgumentError, CheckpointError, UsageError
from chamfer_ood.gan import (
    GanConfig,
    GanModel,
    build_gan,
    codes_to_array,
    generate_codes,
    gradient_penalty,
    train_chamfer_gan,
    wasserstein_losses,
)
from chamfer_ood.rng import RngState
from chamfer_ood.seeds import generate_seeds


def tiny_config(**overrides):
    base = dict(epochs=2, batch_size=8, critic_iters=2, latent_shape=(2, 2, 32))
    base.update(overrides)
    return GanConfig(**base)


def toy_dataset(n=32, h=16, w=16, c=1, k_classes=4, seed=0):
    gen = np.random.default_rng(seed)
    images = gen.random((n, h, w, c), dtype=np.float32)
    labels = np.arange(n) % k_classes
    return LabeledDataset(images, labels, k_classes, "train", "toy")


def test_wasserstein_losses_values():
    l_wd, gen_obj = wasserstein_losses([1.0, 1.0], [0.0, 0.0])
    assert l_wd == pytest.approx(1.0)
    assert gen_obj == pytest.approx(0.0)
    l_wd, _ = wasserstein_losses([0.3, 0.7], [0.3, 0.7])
    assert l_wd == pytest.approx(0.0)


def test_wasserstein_shift_invariance():
    real = [0.1, 0.9, 0.4]
    fake = [0.2, 0.3]
    base, _ = wasserstein_losses(real, fake)
    shifted, _ = wasserstein_losses([r + 5.0 for r in real], [f + 5.0 for f in fake])
    assert shifted == pytest.approx(base)


def test_wasserstein_empty_errors():
    with pytest.raises(ArgumentError):
        wasserstein_losses([], [1.0])
    with pytest.raises(ArgumentError):
        wasserstein_losses(torch.zeros(0), torch.ones(2))


def test_gradient_penalty_unit_linear_critic():
    weights = torch.zeros(1, 2, 2)
    weights[0, 0, 0] = 1.0  # gradient is exactly this weight vector, norm 1

    def critic(x):
        return (x * weights).flatten(1).sum(dim=1)

    real = torch.rand(6, 1, 2, 2)
    fake = torch.rand(6, 1, 2, 2)
    assert gradient_penalty(critic, real, fake, RngState(0)).item() == pytest.approx(0.0, abs=1e-12)


def test_gradient_penalty_constant_critic():
    def critic(x):
        return x.flatten(1).sum(dim=1) * 0.0

    real = torch.rand(4, 1, 3, 3)
    fake = torch.rand(4, 1, 3, 3)
    assert gradient_penalty(critic, real, fake, RngState(1)).item() == pytest.approx(1.0)


def test_gradient_penalty_nonnegative_random_critic():
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Flatten(), torch.nn.Linear(9, 4), torch.nn.Tanh(),
                              torch.nn.Linear(4, 1))

    def critic(x):
        return net(x).squeeze(1)

    real = torch.rand(5, 1, 3, 3)
    fake = torch.rand(5, 1, 3, 3)
    assert gradient_penalty(critic, real, fake, RngState(2)).item() >= 0.0


def test_latent_shape_validation():
    with pytest.raises(ArgumentError):
        build_gan(GanConfig(latent_shape=(3, 3, 32)), (16, 16, 1))
    model = build_gan(tiny_config(), (16, 16, 1))
    out = model.transform(np.random.default_rng(0).random((3, 16, 16, 1), dtype=np.float32))
    assert out.shape == (3, 16, 16, 1)


def test_autoencoder_shapes_28_and_32():
    for side in (28, 32):
        model = build_gan(tiny_config(), (side, side, 1))
        images = np.random.default_rng(1).random((2, side, side, 1), dtype=np.float32)
        assert model.transform(images).shape == (2, side, side, 1)


def test_config_validation():
    with pytest.raises(ArgumentError):
        GanConfig(alpha=0.0)
    with pytest.raises(ArgumentError):
        GanConfig(gp_lambda=-1.0)
    with pytest.raises(ArgumentError):
        GanConfig(critic_iters=0)
    assert GanConfig().alpha == pytest.approx(1.0e-5)


def test_checkpoint_schedule_scaling():
    assert GanConfig(epochs=1800).resolved_checkpoint_epochs() == (200, 400, 800, 1200, 1600, 1800)
    scaled = GanConfig(epochs=120).resolved_checkpoint_epochs()
    assert scaled == (13, 27, 53, 80, 107, 120)
    assert GanConfig(epochs=10, checkpoint_epochs=(5, 10, 99)).resolved_checkpoint_epochs() == (5, 10)


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("gan")
    ds = toy_dataset()
    seeds = generate_seeds(ds, 2, 24, RngState(3))
    model = train_chamfer_gan(tiny_config(), ds, seeds, RngState(4), out_dir=out)
    return ds, seeds, model, out


def test_smoke_training_finite_history(smoke_run):
    _, _, model, out = smoke_run
    assert model.epoch == 2
    assert len(model.history) == 2
    for record in model.history:
        assert np.isfinite(record["l_cd"]) and np.isfinite(record["l_wd"])
    history = (out / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,l_cd,l_wd,critic_loss"
    assert len(history) == 3


def test_smoke_checkpoint_reload_bit_identical(smoke_run):
    ds, seeds, model, out = smoke_run
    checkpoints = sorted(out.glob("gan-epoch*.pt"))
    assert checkpoints
    reloaded = GanModel.load(checkpoints[-1])
    probe = np.random.default_rng(5).random((4, 16, 16, 1), dtype=np.float32)
    assert np.array_equal(model.transform(probe), reloaded.transform(probe))
    assert reloaded.epoch == model.epoch


def test_checkpoint_header_and_corruption(smoke_run, tmp_path):
    _, _, model, out = smoke_run
    path = sorted(out.glob("gan-epoch*.pt"))[-1]
    payload = torch.load(path, map_location="cpu", weights_only=False)
    assert payload["config_hash"] == model.config.hash()
    assert payload["format_version"] == 1
    truncated = tmp_path / "broken.pt"
    truncated.write_bytes(path.read_bytes()[:200])
    with pytest.raises(CheckpointError):
        GanModel.load(truncated)
    with pytest.raises(CheckpointError):
        GanModel.load(tmp_path / "missing.pt")


def test_generate_codes_contract(smoke_run):
    ds, seeds, model, _ = smoke_run
    codes = generate_codes(model, seeds)
    assert len(codes) == len(seeds)
    stack = codes_to_array(codes)
    assert stack.shape == (len(seeds), 16, 16, 1)
    assert stack.min() >= 0.0 and stack.max() <= 1.0
    again = codes_to_array(generate_codes(model, seeds))
    assert np.array_equal(stack, again)
    assert codes[0].gan_epoch == model.epoch


def test_generate_codes_untrained_guard():
    model = build_gan(tiny_config(), (16, 16, 1))
    images = np.zeros((2, 16, 16, 1), dtype=np.float32)
    with pytest.raises(UsageError):
        generate_codes(model, images)
    assert len(generate_codes(model, images, allow_untrained=True)) == 2


def test_train_shape_mismatch():
    ds = toy_dataset(h=16, w=16)
    bad_seeds = np.zeros((4, 8, 8, 1), dtype=np.float32)
    with pytest.raises(ArgumentError):
        train_chamfer_gan(tiny_config(), ds, bad_seeds, RngState(0))


def test_training_deterministic():
    ds = toy_dataset(n=16)
    seeds = generate_seeds(ds, 2, 8, RngState(6))
    config = tiny_config(epochs=1, batch_size=4, critic_iters=1)
    a = train_chamfer_gan(config, ds, seeds, RngState(7))
    b = train_chamfer_gan(config, ds, seeds, RngState(7))
    probe = np.random.default_rng(8).random((2, 16, 16, 1), dtype=np.float32)
    assert np.array_equal(a.transform(probe), b.transform(probe))
    assert a.history == b.history
