"""Noise-based OOD datasets and the percentile-confidence OOD rule."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import binomtest

from spindrop.datasets import load_cifar10_batch
from spindrop.dropout import mc_predict
from spindrop.errors import ParameterError

THRESHOLD = 0.9
PERCENTILE = 10.0
PROSE = "prose"
FORMULA = "formula"


@dataclass
class OODDataset:
    id: str
    images: np.ndarray
    provenance: str = "synthesized"

    def __len__(self):
        return len(self.images)


@dataclass
class OODDecision:
    score: float
    threshold: float
    verdict: str


@dataclass
class DetectionResult:
    dataset_id: str
    n: int
    T: int
    threshold: float
    percentile: float
    detection_rate: float
    ci_low: float
    ci_high: float


def _check_n(n):
    if n <= 0:
        raise ParameterError(f"dataset size must be positive, got {n}")


def gen_gaussian_noise(n, dims, rng) -> OODDataset:
    """D1: every pixel drawn from N(0, 1)."""
    _check_n(n)
    return OODDataset("D1", rng.standard_normal((n, *dims)))


def gen_uniform_noise(n, dims, rng) -> OODDataset:
    """D2: every pixel drawn from U(0, 1)."""
    _check_n(n)
    return OODDataset("D2", rng.random((n, *dims)))


def corrupt_with_noise(id_images, kind, rng, amplitude=1.0, value_range=(0.0, 1.0)) -> OODDataset:
    """D3/D4: in-distribution images plus unit-scale noise, clipped to ``value_range``."""
    x = np.asarray(id_images, dtype=np.float64)
    if x.size == 0:
        raise ParameterError("cannot corrupt an empty image set")
    if kind == "gaussian":
        noise, ds = rng.standard_normal(x.shape), "D3"
    elif kind == "uniform":
        noise, ds = rng.random(x.shape), "D4"
    else:
        raise ParameterError(f"unknown noise kind {kind!r}")
    return OODDataset(ds, np.clip(x + amplitude * noise, *value_range))


def load_external_ood(path, dataset_id="D5") -> OODDataset:
    """Pre-resized 32x32 RGB corpus stored in CIFAR-10 record layout (labels ignored)."""
    images, _ = load_cifar10_batch(path)
    return OODDataset(dataset_id, images, provenance="loaded")


def ood_scores(per_run_probs, percentile=PERCENTILE, rule=PROSE) -> np.ndarray:
    """Confidence scores for a (T, C) or (T, B, C) stack of per-run softmax outputs.

    ``prose``: per class, the percentile of that class's probability across the
    T runs; the score is the largest of these. ``formula``: the percentile is
    taken over the single run-averaged vector, which reduces to the maximum
    class probability of the MC mean.
    """
    p = np.asarray(per_run_probs, dtype=np.float64)
    if p.ndim not in (2, 3):
        raise ParameterError(f"expected (T, C) or (T, B, C) probabilities, got {p.shape}")
    if rule == PROSE:
        if p.shape[0] < 2:
            raise ParameterError("the percentile rule needs at least T = 2 runs")
        return np.percentile(p, percentile, axis=0, method="linear").max(axis=-1)
    if rule == FORMULA:
        mean = p.mean(axis=0)
        return np.percentile(mean[None], percentile, axis=0, method="linear").max(axis=-1)
    raise ParameterError(f"unknown decision rule {rule!r}")


def ood_decide(per_run_probs, threshold=THRESHOLD, percentile=PERCENTILE, rule=PROSE) -> OODDecision:
    p = np.asarray(per_run_probs, dtype=np.float64)
    if p.ndim != 2:
        raise ParameterError(f"expected a (T, C) matrix, got {p.shape}")
    if not np.allclose(p.sum(axis=1), 1.0, atol=1e-6, rtol=0):
        raise ParameterError("every run's probabilities must sum to 1")
    score = float(ood_scores(p, percentile, rule))
    return OODDecision(score, threshold, "OOD" if score < threshold else "ID")


def wilson_interval(k, n, confidence=0.95):
    ci = binomtest(int(k), int(n)).proportion_ci(confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def detection_rate(net, dataset, T, seed, threshold=THRESHOLD, percentile=PERCENTILE, rule=PROSE,
                   batch_size=250, engine=None) -> DetectionResult:
    """Fraction of ``dataset`` flagged OOD under MC inference.

    For an in-distribution set this is the false-OOD rate.
    """
    images = dataset.images if isinstance(dataset, OODDataset) else np.asarray(dataset)
    ds_id = dataset.id if isinstance(dataset, OODDataset) else "ID"
    n = len(images)
    if n == 0:
        raise ParameterError("cannot evaluate an empty dataset")
    flagged = 0
    for b, s in enumerate(range(0, n, batch_size)):
        _, per_run = mc_predict(net, images[s:s + batch_size], T, seed=seed + b, engine=engine)
        flagged += int(np.sum(ood_scores(per_run, percentile, rule) < threshold))
    lo, hi = wilson_interval(flagged, n)
    return DetectionResult(ds_id, n, T, threshold, percentile, flagged / n, lo, hi)


OOD_CSV_FIELDS = ["dataset_id", "n", "T", "threshold", "percentile", "detection_rate", "ci_low", "ci_high"]


def write_ood_csv(path, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(OOD_CSV_FIELDS)
        for r in results:
            w.writerow([r.dataset_id, r.n, r.T, r.threshold, r.percentile,
                        f"{r.detection_rate:.6f}", f"{r.ci_low:.6f}", f"{r.ci_high:.6f}"])
