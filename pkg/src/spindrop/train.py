"""Momentum-SGD training of binarized CNNs with spatial dropout."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from spindrop import dropout as dr
from spindrop import tensor as tc
from spindrop.errors import ConfigurationError, DivergedTrainingError, FormatError, ParameterError
from spindrop.model import BinaryConvNet, build_network

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SPDCKPT\0"
CHECKPOINT_VERSION = 1
_TRAIN_STREAM = 0x7472  # keeps training masks apart from MC-inference streams


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    seed: int
    momentum: float = 0.9
    schedule: str = "cosine"

    def __post_init__(self):
        if self.seed is None:
            raise ConfigurationError("a training seed is mandatory")
        if self.epochs < 0 or self.batch_size < 1 or self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigurationError(f"invalid training config {self}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigurationError(f"unknown learning-rate schedule {self.schedule!r}")

    def lr_at(self, step, total_steps):
        if self.schedule == "constant" or total_steps <= 1:
            return self.lr
        return 0.5 * self.lr * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class DatasetSplit:
    x_train: np.ndarray
    y_train: np.ndarray
    x_eval: np.ndarray
    y_eval: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    ratio: tuple = (80, 20)


def split_dataset(x, y, seed, held_out=0.2, ratio=(80, 20)) -> DatasetSplit:
    """Shuffle once, hold out a pool, and split the pool eval:cross-val = 80:20."""
    n = len(y)
    order = np.random.default_rng(seed).permutation(n)
    n_pool = int(round(n * held_out))
    pool, train = order[:n_pool], order[n_pool:]
    n_eval = int(round(n_pool * ratio[0] / sum(ratio)))
    ev, va = pool[:n_eval], pool[n_eval:]
    return DatasetSplit(x[train], y[train], x[ev], y[ev], x[va], y[va], tuple(ratio))


class MomentumSGD:
    """Heavy-ball SGD: ``v <- m*v + g``, ``p <- p - lr*v``."""

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.velocity = {}

    def step(self, key, param, grad, lr):
        v = self.velocity.get(key)
        v = grad.copy() if v is None else self.momentum * v + grad
        self.velocity[key] = v
        return param - lr * v


def train_seed(seed):
    return int(np.random.SeedSequence([int(seed), _TRAIN_STREAM]).generate_state(1)[0])


def sgd_step(net: BinaryConvNet, xb, yb, lr, optimizer: MomentumSGD, *, mask_seed=None, step=0, epoch=0, batch=0):
    """One forward/backward/update on a batch; returns (pre-step objective, batch accuracy).

    Spatial masks are drawn from ``stream(mask_seed, layer, step)``; with
    ``mask_seed=None`` dropout is disabled for the step.
    """
    if len(yb) == 0:
        raise ParameterError("empty batch")
    logits = net.forward(xb, train=True, mc_seed=mask_seed, run=step)
    task, dlogits = tc.cross_entropy(logits, yb)
    objective = net.objective(task)
    if not math.isfinite(objective):
        raise DivergedTrainingError(epoch, batch, objective)
    net.backward(dlogits)
    lam = net.hyper.lam
    for i, (layer, name) in enumerate(net.parameters()):
        grad = layer.grads[name]
        if name == "proxy" and lam:
            grad = grad + 2.0 * lam * layer.proxy
        setattr(layer, name, optimizer.step(i, getattr(layer, name), grad, lr))
    acc = float(np.mean(np.argmax(logits, axis=1) == yb))
    return objective, acc


def accuracy(net, x, y, batch_size=500):
    hits = 0
    for s in range(0, len(y), batch_size):
        hits += int(np.sum(np.argmax(net.forward(x[s:s + batch_size]), axis=1) == y[s:s + batch_size]))
    return hits / max(len(y), 1)


def train(net: BinaryConvNet, data: DatasetSplit, cfg: TrainConfig, dropout=True):
    """Train in place and return ``(best_net, log)``.

    ``log`` holds one dict per epoch (epoch, objective, train_acc, val_acc).
    The returned net is a copy of the best cross-validation checkpoint.
    """
    history = []
    if cfg.epochs == 0:
        return net, history
    n = len(data.y_train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    opt = MomentumSGD(cfg.momentum)
    mask_seed = train_seed(cfg.seed) if dropout else None
    best, best_acc = None, -1.0
    step = 0
    for epoch in range(cfg.epochs):
        order = dr.stream(cfg.seed, _TRAIN_STREAM, epoch).permutation(n)
        objs, accs, sizes = [], [], []
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            obj, acc = sgd_step(net, data.x_train[idx], data.y_train[idx], cfg.lr_at(step, total), opt,
                                mask_seed=mask_seed, step=step, epoch=epoch, batch=b)
            objs.append(obj)
            accs.append(acc)
            sizes.append(len(idx))
            step += 1
        w = np.asarray(sizes, dtype=np.float64)
        row = {
            "epoch": epoch,
            "objective": float(np.dot(objs, w) / w.sum()),
            "train_acc": float(np.dot(accs, w) / w.sum()),
            "val_acc": accuracy(net, data.x_val, data.y_val) if len(data.y_val) else float("nan"),
        }
        history.append(row)
        log.info("epoch %d objective %.4f train %.4f val %.4f", epoch, row["objective"], row["train_acc"], row["val_acc"])
        if best is None or row["val_acc"] > best_acc:
            best, best_acc = net.copy(), row["val_acc"]
    return best, history


def write_metrics_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "objective", "train_acc", "val_acc"], lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# -- checkpoints ---------------------------------------------------------


def save_checkpoint(net: BinaryConvNet, path) -> None:
    """Binary tensor file plus a ``.json`` sidecar describing how to rebuild the net."""
    path = Path(path)
    state = net.state()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))
    args = dict(net.build_args)
    args["hyper"] = asdict(net.hyper)
    args["input_shape"] = list(args["input_shape"])
    args["targets"] = list(args["targets"])
    args["format_version"] = CHECKPOINT_VERSION
    sidecar(path).write_text(json.dumps(args, indent=2, sort_keys=True) + "\n")


def sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_tensors(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file", offset=0)
    try:
        version, count = struct.unpack_from("<II", buf, 8)
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=8)
        off = 16
        out = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2:off + 2 + ln].decode()
            off += 2 + ln
            (ndim,) = struct.unpack_from("<B", buf, off)
            shape = struct.unpack_from(f"<{ndim}I", buf, off + 1)
            off += 1 + 4 * ndim
            size = int(np.prod(shape)) * 8
            if off + size > len(buf):
                raise FormatError(f"{path}: truncated tensor {name}", offset=off)
            out[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=off).reshape(shape).astype(np.float64)
            off += size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})", offset=len(buf)) from None
    return out


def load_checkpoint(path) -> BinaryConvNet:
    args = json.loads(sidecar(path).read_text())
    args.pop("format_version", None)
    args["hyper"] = dr.HyperParams(**args["hyper"])
    args["input_shape"] = tuple(args["input_shape"])
    args["targets"] = tuple(args["targets"])
    net = build_network(**args)
    net.load_state(read_tensors(path))
    return net
