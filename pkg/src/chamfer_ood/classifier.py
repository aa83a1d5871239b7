"""Classifier training with the half-clean / half-code batch mix, uniform
suppression on codes, neighborhood worst-case search, and adversarial OOD
construction."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import ImageBatch, LabeledDataset, check_images, make_noise_ood
from .exceptions import ArgumentError, DivergenceError, ShapeError
from .metrics import check_confidence_matrix
from .persist import config_hash, load_checkpoint, save_checkpoint, write_csv
from .rng import RngState

ARCHITECTURES = ("small_conv", "resnet18_class")
MODES = ("baseline", "codes", "codes_plus")

CLEAN_BRANCH = 0
CODES_BRANCH = 1


@dataclass
class AttackConfig:
    """L-infinity projected gradient ascent settings.

    epsilon = 0 is tolerated and degenerates to the identity (empty ball);
    training modes that rely on the attack require it positive.
    """

    epsilon: float = 0.3
    steps: int = 40
    step_size: float | None = None  # defaults to 2.5 * epsilon / steps
    objective: str = "max_confidence"

    def __post_init__(self):
        if self.epsilon < 0:
            raise ArgumentError(f"epsilon must be nonnegative, got {self.epsilon}")
        if self.steps < 1:
            raise ArgumentError(f"steps must be >= 1, got {self.steps}")
        if self.objective != "max_confidence":
            raise ArgumentError(f"unknown attack objective {self.objective!r}")

    @property
    def resolved_step_size(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.epsilon / self.steps

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClassifierConfig:
    architecture: str = "small_conv"
    num_classes: int = 10
    epochs: int = 20
    batch_size: int = 128  # per step: batch_size//2 clean (+ batch_size//2 codes)
    lr: float = 1.0e-3
    lr_decay_epochs: tuple[int, ...] = ()
    lr_decay_factor: float = 0.1
    mode: str = "baseline"
    separate_norm: bool = False
    attack: AttackConfig | None = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ArgumentError(f"unknown architecture {self.architecture!r}")
        if self.mode not in MODES:
            raise ArgumentError(f"unknown mode {self.mode!r}")
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if self.mode == "codes_plus" and (self.attack is None or self.attack.epsilon <= 0):
            raise ArgumentError("codes_plus mode requires an attack config with positive epsilon")
        if self.num_classes < 2:
            raise ArgumentError(f"need at least 2 classes, got {self.num_classes}")
        if self.batch_size < 2:
            raise ArgumentError("batch_size must be >= 2")
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["attack"] = self.attack.to_dict() if self.attack else None
        return payload

    def hash(self) -> str:
        return config_hash(self.to_dict())


class _NormSwitch:
    """Shared flag selecting which running-statistics branch is active."""

    def __init__(self):
        self.branch = CLEAN_BRANCH


class DualBatchNorm2d(nn.Module):
    """Two BatchNorm branches with disjoint running statistics.

    The clean branch normalizes original training images, the codes branch the
    suppression half; inference always uses the clean branch.
    """

    def __init__(self, channels: int, switch: _NormSwitch):
        super().__init__()
        self.branches = nn.ModuleList([nn.BatchNorm2d(channels), nn.BatchNorm2d(channels)])
        self._switch = switch

    def forward(self, x):
        return self.branches[self._switch.branch](x)


def _make_norm(channels: int, switch: _NormSwitch | None) -> nn.Module:
    if switch is None:
        return nn.BatchNorm2d(channels)
    return DualBatchNorm2d(channels, switch)


class SmallConvNet(nn.Module):
    """LeNet-class net: two conv/pool stages, a 128-wide penultimate layer, K logits."""

    def __init__(self, image_shape: tuple[int, int, int], num_classes: int,
                 switch: _NormSwitch | None = None):
        super().__init__()
        h, w, c = image_shape
        self.conv1 = nn.Conv2d(c, 32, 5, padding=2)
        self.norm1 = _make_norm(32, switch)
        self.conv2 = nn.Conv2d(32, 64, 5, padding=2)
        self.norm2 = _make_norm(64, switch)
        self.fc1 = nn.Linear(64 * (h // 4) * (w // 4), 128)
        self.fc2 = nn.Linear(128, num_classes)

    def penultimate(self, x):
        x = F.max_pool2d(F.relu(self.norm1(self.conv1(x))), 2)
        x = F.max_pool2d(F.relu(self.norm2(self.conv2(x))), 2)
        return F.relu(self.fc1(x.flatten(1)))

    def forward(self, x):
        return self.fc2(self.penultimate(x))


class BasicBlock(nn.Module):
    def __init__(self, c_in, c_out, stride, switch):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _make_norm(c_out, switch)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.norm2 = _make_norm(c_out, switch)
        self.short = None
        if stride != 1 or c_in != c_out:
            self.short = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride=stride, bias=False), _make_norm(c_out, switch)
            )

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        out = out + (x if self.short is None else self.short(x))
        return F.relu(out)


class ResNet18(nn.Module):
    """Compact 3x3-stem residual net for 32x32-class inputs; 512-wide penultimate."""

    def __init__(self, image_shape: tuple[int, int, int], num_classes: int,
                 switch: _NormSwitch | None = None):
        super().__init__()
        _, _, c = image_shape
        self.stem = nn.Conv2d(c, 64, 3, padding=1, bias=False)
        self.stem_norm = _make_norm(64, switch)
        stages = []
        widths = [64, 128, 256, 512]
        c_in = 64
        for i, width in enumerate(widths):
            stride = 1 if i == 0 else 2
            stages += [BasicBlock(c_in, width, stride, switch), BasicBlock(width, width, 1, switch)]
            c_in = width
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(512, num_classes)

    def penultimate(self, x):
        x = F.relu(self.stem_norm(self.stem(x)))
        x = self.stages(x)
        return F.adaptive_avg_pool2d(x, 1).flatten(1)

    def forward(self, x):
        return self.fc(self.penultimate(x))


# ---------------------------------------------------------------------------
# Suppression loss
# ---------------------------------------------------------------------------

def suppression_loss(logits) -> float:
    """Cross-entropy of softmax(logits) against the uniform K-way target.

    Equals -(1/K) * sum_i log softmax_i(logits); minimized, at value log K,
    exactly when the softmax is uniform. Invariant to adding a constant to all
    logits.
    """
    logits = np.asarray(logits, dtype=np.float64).ravel()
    if logits.size < 2:
        raise ArgumentError(f"need K >= 2 logits, got {logits.size}")
    if not np.isfinite(logits).all():
        raise ArgumentError("non-finite logits")
    shifted = logits - logits.max()
    log_softmax = shifted - np.log(np.exp(shifted).sum())
    return float(-log_softmax.mean())


def suppression_loss_torch(logits: torch.Tensor) -> torch.Tensor:
    """Batched uniform-target cross-entropy -> per-row losses."""
    return -F.log_softmax(logits, dim=1).mean(dim=1)


# ---------------------------------------------------------------------------
# Model wrapper
# ---------------------------------------------------------------------------

def _images_to_tensor(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(check_images(images)).permute(0, 3, 1, 2)


@dataclass
class ClassifierModel:
    net: nn.Module
    config: ClassifierConfig
    image_shape: tuple[int, int, int]
    switch: _NormSwitch | None = None
    history: list[dict] = field(default_factory=list)
    trained_epochs: int = 0

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def norm_branches(self) -> int:
        return 2 if self.switch is not None else 1

    @property
    def extractor_tag(self) -> str:
        return f"{self.config.architecture}:{self.config.hash()}:penultimate"

    def _check_shape(self, images: np.ndarray):
        if tuple(images.shape[1:]) != tuple(self.image_shape):
            raise ArgumentError(
                f"images are {images.shape[1:]}, model expects {self.image_shape}"
            )

    def set_branch(self, branch: int):
        if self.switch is not None:
            self.switch.branch = branch

    def logits(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        images = check_images(images)
        self._check_shape(images)
        self.net.eval()
        self.set_branch(CLEAN_BRANCH)
        outs = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                x = _images_to_tensor(images[start:start + batch_size])
                outs.append(self.net(x).numpy())
        return np.concatenate(outs)

    def embeddings(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        images = check_images(images)
        self._check_shape(images)
        self.net.eval()
        self.set_branch(CLEAN_BRANCH)
        outs = []
        with torch.no_grad():
            for start in range(0, len(images), batch_size):
                x = _images_to_tensor(images[start:start + batch_size])
                outs.append(self.net.penultimate(x).numpy())
        return np.concatenate(outs)

    def save(self, path: Path):
        save_checkpoint(
            {
                "kind": "classifier",
                "config": self.config.to_dict(),
                "config_hash": self.config.hash(),
                "image_shape": tuple(self.image_shape),
                "trained_epochs": self.trained_epochs,
                "history": self.history,
                "state": self.net.state_dict(),
            },
            path,
        )

    @classmethod
    def load(cls, path: Path) -> "ClassifierModel":
        payload = load_checkpoint(path, expected_kind="classifier")
        raw = dict(payload["config"])
        attack = raw.pop("attack", None)
        config = ClassifierConfig(**{**raw, "attack": attack})
        model = build_classifier(config, tuple(payload["image_shape"]))
        model.net.load_state_dict(payload["state"])
        model.trained_epochs = payload["trained_epochs"]
        model.history = payload["history"]
        return model


def build_classifier(config: ClassifierConfig, image_shape: tuple[int, int, int]) -> ClassifierModel:
    switch = _NormSwitch() if config.separate_norm else None
    if config.architecture == "small_conv":
        net = SmallConvNet(image_shape, config.num_classes, switch)
    else:
        net = ResNet18(image_shape, config.num_classes, switch)
    return ClassifierModel(net, config, tuple(image_shape), switch)


def predict_confidences(model: ClassifierModel, batch: ImageBatch | np.ndarray) -> np.ndarray:
    """Softmax confidences, one row per image, evaluation-mode statistics."""
    images = batch.images if isinstance(batch, ImageBatch) else batch
    logits = model.logits(images)
    probs = F.softmax(torch.from_numpy(logits).double(), dim=1).numpy()
    return check_confidence_matrix(probs)


# ---------------------------------------------------------------------------
# Input-space ascent
# ---------------------------------------------------------------------------

def _max_confidence(logits: torch.Tensor, exclude: torch.Tensor | None = None) -> torch.Tensor:
    probs = F.softmax(logits, dim=1)
    if exclude is not None:
        probs = probs.scatter(1, exclude.view(-1, 1), -1.0)
    return probs.max(dim=1).values


def _ascend_confidence(
    model: ClassifierModel,
    start: np.ndarray,
    attack: AttackConfig,
    exclude_labels: np.ndarray | None = None,
    branch: int = CLEAN_BRANCH,
) -> np.ndarray:
    """PGD ascent on (non-excluded) max softmax confidence inside the epsilon ball.

    Keeps the best iterate per image, so the returned confidence never falls
    below the starting one.
    """
    was_training = model.net.training
    model.net.eval()
    model.set_branch(branch)
    origin = _images_to_tensor(start)
    exclude = None
    if exclude_labels is not None:
        exclude = torch.from_numpy(np.asarray(exclude_labels, dtype=np.int64))

    x = origin.clone()
    with torch.no_grad():
        best_conf = _max_confidence(model.net(x), exclude)
    best_x = x.clone()
    step = attack.resolved_step_size
    for _ in range(attack.steps):
        x = x.detach().requires_grad_(True)
        conf = _max_confidence(model.net(x), exclude)
        conf.sum().backward()
        with torch.no_grad():
            x = x + step * x.grad.sign()
            x = origin + (x - origin).clamp(-attack.epsilon, attack.epsilon)
            x = x.clamp(0.0, 1.0)
            conf = _max_confidence(model.net(x), exclude)
            improved = conf > best_conf
            best_conf = torch.where(improved, conf, best_conf)
            best_x[improved] = x[improved]
    if was_training:
        model.net.train()
    return best_x.detach().permute(0, 2, 3, 1).numpy()


def neighborhood_worst_case(model: ClassifierModel, batch: ImageBatch | np.ndarray,
                            attack: AttackConfig, branch: int = CLEAN_BRANCH) -> ImageBatch:
    """Replace each image by its highest-confidence neighbor in the epsilon ball."""
    images = check_images(batch.images if isinstance(batch, ImageBatch) else batch)
    worst = _ascend_confidence(model, images, attack, branch=branch)
    provenance = batch.provenance if isinstance(batch, ImageBatch) else "code"
    return ImageBatch(worst, provenance)


def make_adversarial_ood(
    model: ClassifierModel,
    source: str,
    dataset: LabeledDataset,
    attack: AttackConfig,
    rng: RngState,
    n: int = 1000,
) -> ImageBatch:
    """Adversarial OOD inputs: confidence ascent from noise or from test images.

    source='noise' starts at permuted-pixel noise and raises max confidence;
    source='sample' starts at dataset images and raises the best non-true-class
    confidence.
    """
    if source not in ("noise", "sample"):
        raise ArgumentError(f"unknown adversarial source {source!r}")
    if not isinstance(dataset, LabeledDataset):
        raise ArgumentError(f"{source} mode needs a labeled dataset, got {type(dataset).__name__}")
    n = min(n, len(dataset))
    if source == "noise":
        start = make_noise_ood(dataset, n, rng.child(0)).images
        worst = _ascend_confidence(model, start, attack)
    else:
        picks = rng.child(0).generator().choice(len(dataset), size=n, replace=False)
        start = dataset.images[picks]
        worst = _ascend_confidence(model, start, attack, exclude_labels=dataset.labels[picks])
    return ImageBatch(worst, "adversarial")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train_classifier(
    config: ClassifierConfig,
    dataset: LabeledDataset,
    code_pool: np.ndarray | None,
    rng: RngState,
    out_dir: Path | None = None,
) -> ClassifierModel:
    """Train per the configured mode.

    Every optimizer step consumes batch_size//2 clean images with
    cross-entropy; codes modes add batch_size//2 pool images with the uniform
    suppression loss (codes_plus first replaces them by their neighborhood
    worst case). The clean half draws from its own rng stream, so baseline and
    codes runs with one RngState see identical clean sequences.
    """
    if dataset.num_classes != config.num_classes:
        raise ArgumentError(
            f"dataset has {dataset.num_classes} classes, config expects {config.num_classes}"
        )
    use_codes = config.mode in ("codes", "codes_plus")
    if use_codes:
        if code_pool is None or len(code_pool) == 0:
            raise ArgumentError(f"mode {config.mode!r} needs a nonempty code pool")
        code_pool = check_images(code_pool)
        if tuple(code_pool.shape[1:]) != dataset.image_shape:
            raise ShapeError(
                f"code pool {code_pool.shape[1:]} does not match dataset {dataset.image_shape}"
            )

    torch.manual_seed(rng.child(0).torch_seed())
    model = build_classifier(config, dataset.image_shape)
    optimizer = torch.optim.Adam(model.net.parameters(), lr=config.lr)

    clean_all = _images_to_tensor(dataset.images)
    labels_all = torch.from_numpy(dataset.labels)
    codes_all = _images_to_tensor(code_pool) if use_codes else None
    half = config.batch_size // 2
    steps_per_epoch = max(len(dataset) // half, 1)
    clean_rng = rng.child(1).generator()
    code_rng = rng.child(2).generator()

    for epoch in range(1, config.epochs + 1):
        if epoch in config.lr_decay_epochs:
            for group in optimizer.param_groups:
                group["lr"] *= config.lr_decay_factor
        order = clean_rng.permutation(len(dataset))
        model.net.train()
        ce_losses, sup_losses, correct, seen = [], [], 0, 0
        for step in range(steps_per_epoch):
            idx = order[step * half:(step + 1) * half]
            if len(idx) == 0:
                break
            code_idx = code_rng.integers(0, len(codes_all), half) if use_codes else None

            code_batch = None
            if use_codes:
                code_batch = codes_all[code_idx]
                if config.mode == "codes_plus":
                    worst = _ascend_confidence(
                        model,
                        code_batch.permute(0, 2, 3, 1).numpy(),
                        config.attack,
                        branch=CODES_BRANCH if model.switch else CLEAN_BRANCH,
                    )
                    code_batch = _images_to_tensor(worst)

            model.set_branch(CLEAN_BRANCH)
            logits = model.net(clean_all[idx])
            ce = F.cross_entropy(logits, labels_all[idx])
            loss = ce
            if use_codes:
                model.set_branch(CODES_BRANCH)
                sup = suppression_loss_torch(model.net(code_batch)).mean()
                loss = ce + sup
                sup_losses.append(float(sup.detach()))
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

            ce_losses.append(float(ce.detach()))
            if not np.isfinite(float(loss.detach())):
                raise DivergenceError(f"non-finite loss at epoch {epoch} batch {step}")
            correct += int((logits.argmax(dim=1) == labels_all[idx]).sum())
            seen += len(idx)

        model.trained_epochs = epoch
        model.history.append(
            {
                "epoch": epoch,
                "ce_loss": float(np.mean(ce_losses)),
                "suppression_loss": float(np.mean(sup_losses)) if sup_losses else float("nan"),
                "train_accuracy": correct / max(seen, 1),
            }
        )

    if out_dir is not None:
        out_dir = Path(out_dir)
        write_csv(out_dir / "train_history.csv",
                  ["epoch", "ce_loss", "suppression_loss", "train_accuracy"], model.history)
        model.save(out_dir / "classifier.pt")
    return model
