"""Spatial and element-wise dropout, the regularized objective, MC prediction.

Random streams are keyed by ``(master_seed, *tags)`` through a counter-based
Philox generator, so one (layer, MC run) stream can be replayed in isolation
and the crossbar simulator can draw the very same bits as the reference
engine.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from spindrop.errors import DimensionError, ParameterError

DEFAULT_RHO = 0.15
DEFAULT_LAMBDA = 1e-6

LAYER_WISE = "layer-wise"
TOPOLOGY_WISE = "topology-wise"


def stream(seed: int, *tags: int) -> np.random.Generator:
    """Independent, reproducible generator for one ``(seed, *tags)`` key."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, tags)])))


def keep_scale(rho: float) -> float:
    return 1.0 / (1.0 - rho)


def check_rho(rho: float) -> float:
    rho = float(rho)
    if not 0.0 <= rho < 1.0:
        raise ParameterError(f"dropout probability must lie in [0, 1), got {rho}")
    return rho


@dataclass
class SpatialMask:
    """Per-channel keep flags; ``keep`` has shape (C,) or (B, C)."""

    keep: np.ndarray
    rho: float
    seed_tag: tuple = ()

    @property
    def channels(self) -> int:
        return self.keep.shape[-1]


@dataclass
class ElementMask:
    keep: np.ndarray
    rho: float = 0.0


@dataclass
class DropoutPlacement:
    """Where spatial dropout is applied.

    ``targets`` are indices into the network's layer list of the MVM layers
    whose *input* is dropped.
    """

    mode: str = TOPOLOGY_WISE
    targets: tuple = ()

    def __post_init__(self):
        if self.mode not in (LAYER_WISE, TOPOLOGY_WISE):
            raise ParameterError(f"unknown placement mode {self.mode!r}")
        self.targets = tuple(int(t) for t in self.targets)


@dataclass
class HyperParams:
    rho: float = DEFAULT_RHO
    lam: float = DEFAULT_LAMBDA
    T: int = 20

    def __post_init__(self):
        check_rho(self.rho)
        if self.lam < 0:
            raise ParameterError(f"lambda must be >= 0, got {self.lam}")
        if self.T < 1:
            raise ParameterError(f"T must be >= 1, got {self.T}")


def sample_spatial_mask(C: int, rho: float, rng: np.random.Generator, batch: int | None = None, seed_tag=()) -> SpatialMask:
    """One Bernoulli draw per channel (per image when ``batch`` is given)."""
    rho = check_rho(rho)
    shape = (C,) if batch is None else (batch, C)
    drop = rng.random(shape) < rho
    return SpatialMask(keep=~drop, rho=rho, seed_tag=tuple(seed_tag))


def sample_element_mask(shape, rho: float, rng: np.random.Generator) -> ElementMask:
    rho = check_rho(rho)
    return ElementMask(keep=~(rng.random(shape) < rho), rho=rho)


def _channel_keep(x, keep):
    keep = np.asarray(keep, dtype=np.float64)
    if keep.shape[-1] != x.shape[1]:
        raise DimensionError(f"mask of {keep.shape[-1]} channels does not match input {x.shape}")
    if keep.ndim == 1:
        return keep.reshape(1, -1, *([1] * (x.ndim - 2)))
    if keep.shape[0] != x.shape[0]:
        raise DimensionError(f"mask batch {keep.shape} does not match input {x.shape}")
    return keep.reshape(keep.shape[0], keep.shape[1], *([1] * (x.ndim - 2)))


def apply_spatial_dropout(x, m: SpatialMask, scale: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = x * _channel_keep(x, m.keep)
    if scale:
        out = out * keep_scale(m.rho)
    return out


def apply_element_dropout(x, m: ElementMask, scale: bool = True) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if m.keep.shape != x.shape:
        raise DimensionError(f"element mask {m.keep.shape} does not match input {x.shape}")
    out = x * m.keep
    if scale:
        out = out * keep_scale(m.rho)
    return out


def spatial_dropout_objective(task_loss: float, proxy_weights, lam: float) -> float:
    """Task loss plus ``lam`` times the summed squared L2 norm of every proxy weight."""
    if lam < 0:
        raise ParameterError(f"lambda must be >= 0, got {lam}")
    penalty = 0.0
    for w in proxy_weights:
        w = np.asarray(w, dtype=np.float64).ravel()
        penalty += float(w @ w)
    return float(task_loss) + lam * penalty


def max_workers() -> int:
    """Thread cap from ``SPINDROP_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("SPINDROP_THREADS", "1")))
    except ValueError:
        return 1


def run_mean(per_run) -> np.ndarray:
    """Mean over axis 0 that ignores run order bit for bit.

    Runs are sorted elementwise and deviations from the smallest are summed,
    so identical runs average to exactly their common value.
    """
    s = np.sort(np.asarray(per_run, dtype=np.float64), axis=0)
    base = s[0]
    total = np.zeros_like(base)
    for p in s[1:]:
        total = total + (p - base)
    return base + total / s.shape[0]


def mc_predict(net, x, T: int, seed: int, placement: DropoutPlacement | None = None, engine=None):
    """Monte-Carlo predictive distribution.

    Runs ``T`` stochastic passes, each with fresh spatial masks drawn from the
    ``(seed, layer, run)`` streams. Returns ``(mean_probs, per_run_probs)``
    where ``per_run_probs`` has shape (T, B, classes) (or (T, classes) for a
    single unbatched image) and ``mean_probs`` is its mean over runs.
    """
    if T < 1:
        raise ParameterError(f"T must be >= 1, got {T}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]

    def run(t):
        return net.predict_proba(x, mc_seed=seed, run=t, placement=placement, engine=engine)

    workers = min(max_workers(), T)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            runs = list(pool.map(run, range(T)))
    else:
        runs = [run(t) for t in range(T)]
    per_run = np.stack(runs)
    mean = run_mean(per_run)
    if single:
        return mean[0], per_run[:, 0]
    return mean, per_run
