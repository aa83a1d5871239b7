"""Distribution transformation of seed examples: an autoencoder generator
trained against a Wasserstein critic under a pixel-multiset Chamfer restriction."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .chamfer import chamfer_loss_torch, image_pixel_sets
from .data import LabeledDataset, check_images
from .exceptions import ArgumentError, DivergenceError, ShapeError, UsageError
from .persist import config_hash, load_checkpoint, save_checkpoint, write_csv
from .rng import RngState
from .seeds import SeedExample, seeds_to_array

PAPER_CHECKPOINT_FRACTIONS = (200 / 1800, 400 / 1800, 800 / 1800, 1200 / 1800, 1600 / 1800, 1.0)


@dataclass
class GanConfig:
    """Hyperparameters for the critic/generator training loop.

    The Wasserstein term enters the generator objective with a small weight
    alpha while the Chamfer restriction keeps weight 1, so the distribution
    transformation proceeds gradually. Optimizer defaults follow the
    gradient-penalty critic recipe: Adam(lr=1e-4, betas=(0, 0.9)), penalty
    weight 10, five critic iterations per generator iteration.
    """

    alpha: float = 1.0e-5
    gp_lambda: float = 10.0
    critic_iters: int = 5
    batch_size: int = 32
    epochs: int = 800
    lr: float = 1.0e-4
    beta1: float = 0.0
    beta2: float = 0.9
    latent_shape: tuple[int, int, int] = (2, 2, 512)
    checkpoint_epochs: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.alpha <= 0:
            raise ArgumentError(f"alpha must be positive, got {self.alpha}")
        if self.gp_lambda < 0:
            raise ArgumentError(f"gp_lambda must be nonnegative, got {self.gp_lambda}")
        if self.critic_iters < 1:
            raise ArgumentError(f"critic_iters must be >= 1, got {self.critic_iters}")
        if self.batch_size < 2 or self.epochs < 1:
            raise ArgumentError("batch_size must be >= 2 and epochs >= 1")
        self.latent_shape = tuple(self.latent_shape)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def resolved_checkpoint_epochs(self) -> tuple[int, ...]:
        """Checkpoint schedule; defaults to the standard sweep points scaled to `epochs`."""
        if self.checkpoint_epochs:
            epochs = tuple(sorted({int(e) for e in self.checkpoint_epochs if 1 <= e <= self.epochs}))
            return epochs or (self.epochs,)
        scaled = sorted({max(1, round(f * self.epochs)) for f in PAPER_CHECKPOINT_FRACTIONS})
        return tuple(scaled)


def _stage_sizes(side: int, latent_side: int) -> list[int]:
    # stride-2 halvings (ceil) until the bottleneck side is reached
    sizes = [side]
    while sizes[-1] > latent_side:
        sizes.append((sizes[-1] + 1) // 2)
        if len(sizes) > 16:
            break
    if sizes[-1] != latent_side or len(sizes) < 2:
        raise ArgumentError(
            f"latent side {latent_side} unreachable from image side {side} by stride-2 halving"
        )
    return sizes


def _conv_params(size_in: int) -> tuple[int, int]:
    # stride-2 halving: kernel 4 on even sizes, 3 on odd, both with padding 1
    return (4, 1) if size_in % 2 == 0 else (3, 1)


def _encoder_channels(latent_channels: int, stages: int) -> list[int]:
    return [max(latent_channels >> (stages - 1 - i), 4) for i in range(stages)]


class Encoder(nn.Module):
    def __init__(self, image_shape: tuple[int, int, int], latent_shape: tuple[int, int, int]):
        super().__init__()
        h, w, c = image_shape
        if h != w:
            raise ShapeError(f"square images required, got {h}x{w}")
        sizes = _stage_sizes(h, latent_shape[0])
        stages = len(sizes) - 1
        channels = [c] + _encoder_channels(latent_shape[2], stages)
        layers = []
        for i in range(stages):
            k, p = _conv_params(sizes[i])
            layers += [nn.Conv2d(channels[i], channels[i + 1], k, stride=2, padding=p),
                       nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, image_shape: tuple[int, int, int], latent_shape: tuple[int, int, int]):
        super().__init__()
        h, w, c = image_shape
        sizes = _stage_sizes(h, latent_shape[0])
        stages = len(sizes) - 1
        channels = [c] + _encoder_channels(latent_shape[2], stages)
        layers = []
        for i in reversed(range(stages)):
            # invert the encoder stage that mapped sizes[i] -> sizes[i+1]
            k, p = _conv_params(sizes[i])
            layers += [nn.ConvTranspose2d(channels[i + 1], channels[i], k, stride=2, padding=p)]
            layers += [nn.Sigmoid()] if i == 0 else [nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)

    def forward(self, z):
        return self.net(z)


class Critic(nn.Module):
    """Stride-2 conv stack to a scalar score; no normalization layers."""

    def __init__(self, image_shape: tuple[int, int, int], latent_shape: tuple[int, int, int]):
        super().__init__()
        h, w, c = image_shape
        sizes = _stage_sizes(h, latent_shape[0])
        stages = len(sizes) - 1
        channels = [c] + _encoder_channels(latent_shape[2], stages)
        layers = []
        for i in range(stages):
            k, p = _conv_params(sizes[i])
            layers += [nn.Conv2d(channels[i], channels[i + 1], k, stride=2, padding=p),
                       nn.LeakyReLU(0.2)]
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(channels[-1] * sizes[-1] * sizes[-1], 1)

    def forward(self, x):
        f = self.features(x)
        return self.head(f.flatten(1)).squeeze(1)


def wasserstein_losses(real_scores, fake_scores):
    """(L_WD, generator objective) from critic scores.

    L_WD = mean(real) - mean(fake): the critic maximizes it (its training loss
    is the negation plus the gradient penalty); the generator minimizes
    -mean(fake).
    """
    real_mean = _score_mean(real_scores)
    fake_mean = _score_mean(fake_scores)
    return real_mean - fake_mean, -fake_mean


def _score_mean(scores):
    if isinstance(scores, torch.Tensor):
        if scores.numel() == 0:
            raise ArgumentError("empty score tensor")
        return scores.mean()
    scores = list(scores)
    if not scores:
        raise ArgumentError("empty score list")
    return float(np.mean(scores))


def gradient_penalty(critic, real_batch: torch.Tensor, fake_batch: torch.Tensor,
                     rng: RngState | torch.Generator | None = None) -> torch.Tensor:
    """Mean squared deviation of the critic's gradient norm from 1 on random interpolates."""
    if real_batch.shape != fake_batch.shape:
        raise ShapeError(f"batch shapes differ: {tuple(real_batch.shape)} vs {tuple(fake_batch.shape)}")
    n = real_batch.shape[0]
    if isinstance(rng, RngState):
        eps = torch.from_numpy(rng.generator().random(n, dtype=np.float32))
    elif isinstance(rng, torch.Generator):
        eps = torch.rand(n, generator=rng)
    else:
        eps = torch.rand(n)
    eps = eps.view(n, *([1] * (real_batch.dim() - 1))).to(real_batch)
    interp = (eps * real_batch + (1 - eps) * fake_batch).requires_grad_(True)
    scores = critic(interp)
    grads, = torch.autograd.grad(scores.sum(), interp, create_graph=True)
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


@dataclass
class CodeExample:
    """A GAN-transformed seed example."""

    image: np.ndarray
    seed_ref: int
    gan_epoch: int

    def __post_init__(self):
        check_images(self.image[None])


@dataclass
class GanModel:
    encoder: Encoder
    decoder: Decoder
    critic: Critic
    config: GanConfig
    image_shape: tuple[int, int, int]
    epoch: int = 0
    history: list[dict] = field(default_factory=list)

    def transform(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Deterministic encode-decode of an image stack, clamped to [0, 1]."""
        images = check_images(images)
        if tuple(images.shape[1:]) != tuple(self.image_shape):
            raise ArgumentError(f"images are {images.shape[1:]}, model expects {self.image_shape}")
        self.encoder.eval()
        self.decoder.eval()
        outs = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                chunk = torch.from_numpy(images[start:start + batch_size]).permute(0, 3, 1, 2)
                out = self.decoder(self.encoder(chunk))
                outs.append(out.permute(0, 2, 3, 1).clamp(0.0, 1.0).numpy())
        return np.concatenate(outs)

    def save(self, path: Path):
        save_checkpoint(
            {
                "kind": "gan",
                "config": self.config.to_dict(),
                "config_hash": self.config.hash(),
                "image_shape": tuple(self.image_shape),
                "epoch": self.epoch,
                "history": self.history,
                "encoder": self.encoder.state_dict(),
                "decoder": self.decoder.state_dict(),
                "critic": self.critic.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path: Path) -> "GanModel":
        payload = load_checkpoint(path, expected_kind="gan")
        config = GanConfig(**{**payload["config"],
                              "latent_shape": tuple(payload["config"]["latent_shape"]),
                              "checkpoint_epochs": tuple(payload["config"]["checkpoint_epochs"] or ())
                              or None})
        model = build_gan(config, tuple(payload["image_shape"]))
        model.encoder.load_state_dict(payload["encoder"])
        model.decoder.load_state_dict(payload["decoder"])
        model.critic.load_state_dict(payload["critic"])
        model.epoch = payload["epoch"]
        model.history = payload["history"]
        return model


def build_gan(config: GanConfig, image_shape: tuple[int, int, int]) -> GanModel:
    h, w, _ = image_shape
    latent_h, latent_w, _ = config.latent_shape
    if latent_h != latent_w or h != w:
        raise ArgumentError("square images and square bottlenecks only")
    _stage_sizes(h, latent_h)  # raises when unreachable
    return GanModel(
        encoder=Encoder(image_shape, config.latent_shape),
        decoder=Decoder(image_shape, config.latent_shape),
        critic=Critic(image_shape, config.latent_shape),
        config=config,
        image_shape=tuple(image_shape),
    )


def train_chamfer_gan(
    config: GanConfig,
    indist: LabeledDataset,
    seeds: list[SeedExample] | np.ndarray,
    rng: RngState,
    out_dir: Path | None = None,
) -> GanModel:
    """Alternate critic and generator updates per the combined objective.

    Per generator step: critic_iters critic updates on (training images,
    reconstructed seeds), then one generator update minimizing
    alpha * (-mean fake score) + mean Chamfer(seed, reconstruction).
    Checkpoints are written at the configured epochs when out_dir is given.
    """
    seed_images = seeds if isinstance(seeds, np.ndarray) else seeds_to_array(seeds)
    seed_images = check_images(seed_images)
    if tuple(seed_images.shape[1:]) != tuple(indist.image_shape):
        raise ArgumentError(
            f"seed images {seed_images.shape[1:]} do not match dataset {indist.image_shape}"
        )

    torch.manual_seed(rng.child(0).torch_seed())
    model = build_gan(config, indist.image_shape)
    opt_gen = torch.optim.Adam(
        list(model.encoder.parameters()) + list(model.decoder.parameters()),
        lr=config.lr, betas=(config.beta1, config.beta2),
    )
    opt_critic = torch.optim.Adam(model.critic.parameters(), lr=config.lr,
                                  betas=(config.beta1, config.beta2))

    real_all = torch.from_numpy(indist.images).permute(0, 3, 1, 2)
    seed_all = torch.from_numpy(seed_images).permute(0, 3, 1, 2)
    batch = config.batch_size
    steps_per_epoch = max(len(seed_images) // batch, 1)
    real_rng = rng.child(1).generator()
    seed_rng = rng.child(2).generator()
    gp_rng = torch.Generator().manual_seed(rng.child(3).torch_seed())
    checkpoint_epochs = set(config.resolved_checkpoint_epochs())

    for epoch in range(1, config.epochs + 1):
        model.encoder.train()
        model.decoder.train()
        model.critic.train()
        epoch_cd, epoch_wd, epoch_critic = [], [], []
        for _ in range(steps_per_epoch):
            for _ in range(config.critic_iters):
                real = real_all[real_rng.integers(0, len(real_all), batch)]
                bar = seed_all[seed_rng.integers(0, len(seed_all), batch)]
                with torch.no_grad():
                    fake = model.decoder(model.encoder(bar))
                real_scores = model.critic(real)
                fake_scores = model.critic(fake)
                l_wd, _ = wasserstein_losses(real_scores, fake_scores)
                penalty = gradient_penalty(model.critic, real, fake, gp_rng)
                critic_loss = -l_wd + config.gp_lambda * penalty
                opt_critic.zero_grad()
                critic_loss.backward()
                opt_critic.step()
                epoch_wd.append(float(l_wd.detach()))
                epoch_critic.append(float(critic_loss.detach()))

            bar = seed_all[seed_rng.integers(0, len(seed_all), batch)]
            recon = model.decoder(model.encoder(bar))
            gen_adv = -model.critic(recon).mean()  # the generator side of wasserstein_losses
            l_cd = chamfer_loss_torch(image_pixel_sets(recon), image_pixel_sets(bar)).mean()
            gen_loss = config.alpha * gen_adv + l_cd
            opt_gen.zero_grad()
            gen_loss.backward()
            opt_gen.step()
            epoch_cd.append(float(l_cd.detach()))
            if not np.isfinite(epoch_cd[-1]) or not np.isfinite(epoch_wd[-1]):
                raise DivergenceError(f"non-finite GAN loss at epoch {epoch}")

        model.epoch = epoch
        model.history.append(
            {
                "epoch": epoch,
                "l_cd": float(np.mean(epoch_cd)),
                "l_wd": float(np.mean(epoch_wd)),
                "critic_loss": float(np.mean(epoch_critic)),
            }
        )
        if out_dir is not None and epoch in checkpoint_epochs:
            model.save(Path(out_dir) / f"gan-epoch{epoch:05d}.pt")

    if out_dir is not None:
        write_csv(Path(out_dir) / "history.csv", ["epoch", "l_cd", "l_wd", "critic_loss"],
                  model.history)
        if model.epoch not in checkpoint_epochs:
            model.save(Path(out_dir) / f"gan-epoch{model.epoch:05d}.pt")
    return model


def generate_codes(
    model: GanModel,
    seeds: list[SeedExample] | np.ndarray,
    allow_untrained: bool = False,
) -> list[CodeExample]:
    """One CODE per seed via the trained encoder-decoder; inference only."""
    if model.epoch < 1 and not allow_untrained:
        raise UsageError("model has no training epochs; pass allow_untrained=True to override")
    seed_images = seeds if isinstance(seeds, np.ndarray) else seeds_to_array(seeds)
    outputs = model.transform(seed_images)
    return [CodeExample(img, ref, model.epoch) for ref, img in enumerate(outputs)]


def codes_to_array(codes: list[CodeExample]) -> np.ndarray:
    if not codes:
        raise ArgumentError("empty code list")
    return np.stack([c.image for c in codes])
