"""Quantitative evaluation: confidence, calibration, detection, and
distribution-distance metrics, plus histogram/sweep payloads for export."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .exceptions import ArgumentError, ShapeError


def check_confidence_matrix(conf: np.ndarray) -> np.ndarray:
    """Validate an (n, K) row-stochastic confidence matrix."""
    conf = np.asarray(conf, dtype=np.float64)
    if conf.ndim != 2 or conf.shape[0] == 0 or conf.shape[1] < 2:
        raise ArgumentError(f"expected nonempty (n, K>=2) confidence matrix, got {conf.shape}")
    if conf.min() < -1e-9:
        raise ArgumentError(f"negative confidence {conf.min():.3g}")
    if np.abs(conf.sum(axis=1) - 1.0).max() > 1e-6:
        raise ArgumentError("confidence rows do not sum to 1 within 1e-6")
    return conf


def mmc(conf: np.ndarray) -> float:
    """Mean over rows of the row maximum confidence."""
    conf = check_confidence_matrix(conf)
    return float(conf.max(axis=1).mean())


def test_error(conf: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of rows whose argmax (ties toward the smallest index) misses the label."""
    conf = check_confidence_matrix(conf)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (conf.shape[0],):
        raise ArgumentError(f"{conf.shape[0]} rows but {labels.shape} labels")
    return float((conf.argmax(axis=1) != labels).mean())


def _bin_index(values: np.ndarray, bins: int, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    # equal-width bins over (lo, hi] with a right-inclusive upper edge;
    # values at lo (or below, within roundoff) fall into the first bin
    scaled = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)
    idx = np.ceil(scaled * bins).astype(int) - 1
    return np.clip(idx, 0, bins - 1)


def ece(conf: np.ndarray, labels: np.ndarray, bins: int = 15) -> float:
    """Expected calibration error over equal-width max-confidence bins.

    ECE = sum_b (n_b / N) * |accuracy_b - mean confidence_b|; empty bins
    contribute nothing. With one bin this reduces to
    |overall accuracy - mean max confidence|.
    """
    if bins < 1:
        raise ArgumentError(f"bins must be >= 1, got {bins}")
    conf = check_confidence_matrix(conf)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (conf.shape[0],):
        raise ArgumentError(f"{conf.shape[0]} rows but {labels.shape} labels")
    top = conf.max(axis=1)
    correct = conf.argmax(axis=1) == labels
    idx = _bin_index(top, bins)
    total = 0.0
    for b in range(bins):
        mask = idx == b
        n_b = int(mask.sum())
        if n_b == 0:
            continue
        total += (n_b / len(top)) * abs(correct[mask].mean() - top[mask].mean())
    return float(total)


def detection_metrics(scores_in: np.ndarray, scores_out: np.ndarray) -> tuple[float, float, float]:
    """(AUROC, AUPR, FPR95) treating higher scores as more in-distribution.

    AUROC is the rank statistic with ties counted half; AUPR takes
    in-distribution as the positive class with step interpolation over
    descending thresholds; FPR95 is the fraction of OOD scores at or above
    the threshold where ID TPR first reaches 0.95.
    """
    s_in = np.asarray(scores_in, dtype=np.float64).ravel()
    s_out = np.asarray(scores_out, dtype=np.float64).ravel()
    if len(s_in) == 0 or len(s_out) == 0:
        raise ArgumentError("both score lists must be nonempty")

    # AUROC via pair counting on sorted OOD scores
    out_sorted = np.sort(s_out)
    less = np.searchsorted(out_sorted, s_in, side="left")
    less_eq = np.searchsorted(out_sorted, s_in, side="right")
    auroc = float((less + 0.5 * (less_eq - less)).sum() / (len(s_in) * len(s_out)))

    # AUPR over descending distinct thresholds, predict ID when score >= t
    thresholds = np.unique(np.concatenate([s_in, s_out]))[::-1]
    in_sorted = np.sort(s_in)
    tp = len(s_in) - np.searchsorted(in_sorted, thresholds, side="left")
    fp = len(s_out) - np.searchsorted(out_sorted, thresholds, side="left")
    precision = tp / np.maximum(tp + fp, 1)
    recall = tp / len(s_in)
    recall_prev = np.concatenate([[0.0], recall[:-1]])
    aupr = float(((recall - recall_prev) * precision).sum())

    # FPR at the first (largest) threshold reaching 95% TPR
    k = int(np.ceil(0.95 * len(s_in)))
    threshold95 = np.sort(s_in)[::-1][k - 1]
    fpr95 = float((s_out >= threshold95).mean())
    return auroc, aupr, fpr95


def confidence_histogram(conf: np.ndarray, bins: int) -> dict:
    """Counts of row maxima over equal-width bins spanning [1/K, 1]."""
    if bins < 1:
        raise ArgumentError(f"bins must be >= 1, got {bins}")
    conf = check_confidence_matrix(conf)
    k = conf.shape[1]
    top = conf.max(axis=1)
    idx = _bin_index(top, bins, lo=1.0 / k, hi=1.0)
    counts = np.bincount(idx, minlength=bins)
    edges = np.linspace(1.0 / k, 1.0, bins + 1)
    return {"edges": edges.tolist(), "counts": counts.tolist(), "n": int(len(top))}


# ---------------------------------------------------------------------------
# Fréchet embedding distance
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingSet:
    """Penultimate-layer feature rows from a fixed extractor."""

    features: np.ndarray
    extractor_tag: str

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise ArgumentError(f"expected (n, d) features, got {self.features.shape}")

    @property
    def degenerate(self) -> bool:
        n, d = self.features.shape
        return n < d + 1


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    # symmetric square root; roundoff-negative eigenvalues are clipped at 0
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def fed(a: EmbeddingSet, b: EmbeddingSet, regularization: float = 1e-6) -> float:
    """Fréchet distance between Gaussian fits of two embedding sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2). When a
    set is degenerate (n < d + 1) a diagonal regularization is added to both
    covariances so the square root stays well defined.
    """
    fa, fb = a.features, b.features
    if fa.shape[1] != fb.shape[1]:
        raise ArgumentError(f"dimension mismatch: {fa.shape[1]} vs {fb.shape[1]}")
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.cov(fa, rowvar=False) if fa.shape[0] > 1 else np.zeros((fa.shape[1],) * 2)
    cov_b = np.cov(fb, rowvar=False) if fb.shape[0] > 1 else np.zeros((fb.shape[1],) * 2)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    if a.degenerate or b.degenerate:
        eye = np.eye(fa.shape[1]) * regularization
        cov_a, cov_b = cov_a + eye, cov_b + eye
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    value = float(((mu_a - mu_b) ** 2).sum() + np.trace(cov_a + cov_b - 2.0 * cross))
    return max(value, 0.0)


def extract_embeddings(model, batch_images: np.ndarray) -> EmbeddingSet:
    """Penultimate-layer features from a trained classifier (delegates to the model)."""
    return EmbeddingSet(model.embeddings(batch_images), model.extractor_tag)


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation (used by the checkpoint sweep report)."""
    return float(stats.spearmanr(x, y).statistic)


# ---------------------------------------------------------------------------
# Checkpoint sweep
# ---------------------------------------------------------------------------

def checkpoint_sweep(checkpoints, seeds_images: np.ndarray, indist, trainer, evaluator) -> list[dict]:
    """For each GAN checkpoint: generate codes, measure FED to train data, train
    a suppression classifier, and record its ID/OOD confidences.

    checkpoints: iterable of (tag, generate_codes_fn); trainer(codes) -> model;
    evaluator(model, codes_fed) -> dict of metric columns. Returns one row per
    checkpoint, in order.
    """
    checkpoints = list(checkpoints)
    if len(checkpoints) < 2:
        raise ArgumentError(f"sweep needs at least 2 checkpoints, got {len(checkpoints)}")
    rows = []
    for tag, generate in checkpoints:
        try:
            codes = generate(seeds_images)
            model = trainer(codes)
            row = {"tag": tag}
            row.update(evaluator(model, codes))
            rows.append(row)
        except Exception as exc:
            raise type(exc)(f"[checkpoint {tag}] {exc}") from exc
    return rows


# ---------------------------------------------------------------------------
# Report container
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    """Named scalar metrics plus histogram and sweep payloads."""

    scalars: dict = field(default_factory=dict)
    histograms: dict = field(default_factory=dict)
    sweeps: dict = field(default_factory=dict)

    _BOUNDED = ("mmc", "auroc", "aupr", "fpr95", "ece", "te", "test_error")

    def add_scalar(self, name: str, value: float, **metadata):
        value = float(value)
        base = name.split("/")[0].split(":")[0].lower()
        if base in self._BOUNDED and not -1e-9 <= value <= 1.0 + 1e-9:
            raise ArgumentError(f"{name}={value} outside [0, 1]")
        if base == "fed" and value < -1e-9:
            raise ArgumentError(f"{name}={value} must be nonnegative")
        self.scalars[name] = {"value": value, **metadata}

    def scalar(self, name: str) -> float:
        return self.scalars[name]["value"]

    def to_json(self) -> str:
        return json.dumps(
            {"scalars": self.scalars, "histograms": self.histograms, "sweeps": self.sweeps},
            indent=2, sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        payload = json.loads(text)
        return cls(payload.get("scalars", {}), payload.get("histograms", {}), payload.get("sweeps", {}))

    def save(self, path: Path):
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: Path) -> "MetricsReport":
        return cls.from_json(Path(path).read_text())
