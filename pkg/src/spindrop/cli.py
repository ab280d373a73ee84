"""``spindrop`` command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 data-format error,
3 diverged training or a failed engine-equivalence check.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from spindrop import config as cfgmod
from spindrop import cost, crossbar, datasets, ood
from spindrop import dropout as dr
from spindrop.errors import ConfigurationError, DimensionError, DivergedTrainingError, FormatError, ParameterError
from spindrop.model import build_network
from spindrop.train import (
    TrainConfig, accuracy, load_checkpoint, save_checkpoint, split_dataset, train, write_metrics_csv,
)

EXIT_CONFIG, EXIT_FORMAT, EXIT_FAILED = 1, 2, 3


class CheckFailed(Exception):
    """A run finished but its verdict is negative (exit code 3)."""


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_images(path, limit=0) -> np.ndarray:
    """(N, C, H, W) images from a ``.npy`` array or an IDX image file."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"input file {path} does not exist")
    if path.suffix == ".npy":
        try:
            x = np.load(path, allow_pickle=False)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from None
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4:
            raise FormatError(f"{path}: expected a (N, C, H, W) array, got shape {x.shape}")
    else:
        x = datasets.load_idx_images(path)
    return x[:limit] if limit else x


def load_training_data(c: cfgmod.ExperimentConfig):
    src = c.data.source
    if src == "mnist5k":
        x, y = datasets.load_mnist5k()
    elif src == "idx":
        try:
            x, y = datasets.load_mnist_dir(c.data.path)
        except FileNotFoundError as exc:
            raise ConfigurationError(str(exc)) from None
    else:
        x, y = datasets.make_blobs(c.data.limit or 200, seed=c.train.seed)
    if c.data.limit:
        x, y = x[:c.data.limit], y[:c.data.limit]
    return x, y


def network_from_config(c: cfgmod.ExperimentConfig):
    m = c.model
    return build_network(
        m.topology, tuple(m.input_shape), seed=c.train.seed, placement_mode=m.placement,
        targets=tuple(m.targets) or None,
        hyper=dr.HyperParams(rho=c.dropout.rho, lam=c.dropout.lam, T=c.dropout.T),
        binary=m.binary, activation=m.activation, init_scale=m.init_scale,
    )


# -- commands --------------------------------------------------------------


def cmd_train(args):
    try:
        text = Path(args.config).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {args.config}: {exc.strerror}") from None
    c = cfgmod.parse(text)
    out = _out_dir(args.out or c.output.dir)
    (out / "config.toml").write_text(text)
    (out / "effective_config.toml").write_text(cfgmod.emit(c))

    x, y = load_training_data(c)
    data = split_dataset(x, y, seed=c.train.seed)
    net = network_from_config(c)
    t = c.train
    tc = TrainConfig(t.epochs, t.batch_size, t.lr, t.seed, momentum=t.momentum, schedule=t.schedule)
    best, history = train(net, data, tc)
    save_checkpoint(best, out / "model.ckpt")
    write_metrics_csv(out / "metrics.csv", history)
    acc = accuracy(best, data.x_val, data.y_val) if len(data.y_val) else float("nan")
    print(f"trained {t.epochs} epochs; best cross-val accuracy {acc:.4f}; checkpoint {out / 'model.ckpt'}")


def _engine(net, name, strategy):
    if name == "reference":
        return None
    return crossbar.CrossbarEngine(crossbar.build_layouts(net, crossbar.S1 if strategy == 1 else crossbar.S2))


def _rho_override(net, rho):
    if rho is not None:
        net.hyper = dr.HyperParams(rho=rho, lam=net.hyper.lam, T=net.hyper.T)


def cmd_predict(args):
    net = load_checkpoint(args.checkpoint)
    _rho_override(net, args.rho)
    x = load_images(args.input, args.limit)
    T = args.mc_samples or net.hyper.T
    mean, per_run = dr.mc_predict(net, x, T, seed=args.seed, engine=_engine(net, args.engine, args.strategy))
    out = _out_dir(args.out)
    _dump_json(out / "predictions.json", {
        "T": T, "seed": args.seed, "rho": net.hyper.rho,
        "mean": mean.tolist(), "per_run": per_run.tolist(),
        "predicted_class": np.argmax(mean, axis=-1).tolist(),
    })
    print(f"{args.engine}: {len(x)} images, T={T}; wrote {out / 'predictions.json'}")


def cmd_simulate(args):
    net = load_checkpoint(args.checkpoint)
    strategy = crossbar.S1 if args.strategy == 1 else crossbar.S2
    layouts = crossbar.build_layouts(net, strategy)
    if args.input:
        x = load_images(args.input, args.limit)
    else:
        x = dr.stream(args.seed, 0x696E).random((args.limit or 2, *net.input_shape))
    out = _out_dir(args.out)
    for i, layout in layouts.items():
        (out / f"layout_layer{i}.json").write_text(crossbar.dump_layout(layout))

    same = True
    for i, (ref, hw) in crossbar.compare_ofms(net, layouts, x, args.seed).items():
        np.save(out / f"ofm_layer{i}_reference.npy", ref)
        np.save(out / f"ofm_layer{i}_crossbar.npy", hw)
        same &= ref.tobytes() == hw.tobytes()
    T = args.mc_samples
    ref_runs = dr.mc_predict(net, x, T, seed=args.seed)[1]
    hw_runs = crossbar.simulate_network(net, layouts, x, T, seed=args.seed)[1]
    same &= ref_runs.tobytes() == hw_runs.tobytes()

    verdict = "EQUIVALENT" if same else "NOT EQUIVALENT"
    (out / "verdict.txt").write_text(verdict + "\n")
    print(verdict)
    if not same:
        raise CheckFailed("crossbar simulation differs from the reference engine")


def cmd_ood(args):
    net = load_checkpoint(args.checkpoint)
    T = args.mc_samples or net.hyper.T
    wanted = [d.strip().lower() for d in args.datasets.split(",") if d.strip()]
    bad = [d for d in wanted if d not in ("d1", "d2", "d3", "d4")]
    if bad:
        raise ConfigurationError(f"unknown OOD datasets {bad}")
    id_images = load_images(args.id_input, args.n) if args.id_input else None
    if id_images is None and ({"d3", "d4"} & set(wanted)):
        raise ConfigurationError("d3/d4 corrupt in-distribution images; pass --id-input")
    rng = np.random.default_rng(args.seed)
    sets = []
    for d in wanted:
        if d == "d1":
            sets.append(ood.gen_gaussian_noise(args.n, net.input_shape, rng))
        elif d == "d2":
            sets.append(ood.gen_uniform_noise(args.n, net.input_shape, rng))
        else:
            sets.append(ood.corrupt_with_noise(id_images, "gaussian" if d == "d3" else "uniform", rng))
    if id_images is not None:
        sets.append(id_images)
    results = [ood.detection_rate(net, s, T, seed=args.seed, threshold=args.threshold,
                                  percentile=args.percentile, rule=args.rule) for s in sets]
    out = _out_dir(args.out)
    ood.write_ood_csv(out / "ood.csv", results)
    for r in results:
        label = "false-OOD" if r.dataset_id == "ID" else "detected"
        print(f"{r.dataset_id}: {label} {r.detection_rate:.4f} (95% CI {r.ci_low:.4f}-{r.ci_high:.4f}, n={r.n})")


def cmd_cost(args):
    if args.topology:
        net = build_network(args.topology, tuple(args.input_shape), placement_mode=args.placement)
        report = cost.cost_report(cost.network_layers(net))
    else:
        report = cost.single_layer_report(C_in=args.config_cin, K=args.k, C_out=args.cout)
    out = _out_dir(args.out)
    (out / "cost.csv").write_text(report.to_csv())
    (out / "cost.json").write_text(report.to_json())
    (out / "energy.csv").write_text(cost.energy_summary())
    sys.stdout.write(report.to_csv())


def cmd_inspect(args):
    try:
        text = Path(args.layout).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read {args.layout}: {exc.strerror}") from None
    layout = crossbar.load_layout(text)
    d = layout.dims
    print(f"strategy       {layout.strategy}")
    print("dims           " + " ".join(f"{k}={v}" for k, v in d.items()))
    print(f"crossbars      {len(layout.crossbars)} x {layout.shape[0]} rows x {layout.shape[1]} cols")
    print(f"dropout groups {layout.n_modules}")
    sizes = np.bincount(np.asarray(layout.row_groups))
    print(f"rows/group     {sizes.min()}" + ("" if sizes.min() == sizes.max() else f"..{sizes.max()}"))
    plus = np.mean([np.mean(x > 0) for x in layout.crossbars])
    print(f"+1 cells       {plus:.4f}")


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spindrop", description="Binary Bayesian CNNs with spatial dropout on simulated crossbars.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network from a TOML config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (default: [output] dir)")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="MC-dropout prediction")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--input", required=True, help=".npy (N,C,H,W) array or IDX image file")
    pr.add_argument("--mc-samples", type=int, default=0, help="T (default: checkpoint's)")
    pr.add_argument("--engine", choices=("reference", "crossbar"), default="reference")
    pr.add_argument("--strategy", type=int, choices=(1, 2), default=1)
    pr.add_argument("--rho", type=float)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--limit", type=int, default=0)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    s = sub.add_parser("simulate", help="check the crossbar simulator against the reference engine")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--strategy", type=int, choices=(1, 2), default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--input")
    s.add_argument("--limit", type=int, default=0)
    s.add_argument("--mc-samples", type=int, default=2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("ood", help="OOD detection rates")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--datasets", default="d1,d2")
    o.add_argument("--n", type=int, default=500)
    o.add_argument("--mc-samples", type=int, default=0)
    o.add_argument("--id-input", help="in-distribution images (for d3/d4 and the false-OOD row)")
    o.add_argument("--threshold", type=float, default=ood.THRESHOLD)
    o.add_argument("--percentile", type=float, default=ood.PERCENTILE)
    o.add_argument("--rule", choices=(ood.PROSE, ood.FORMULA), default=ood.PROSE)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_ood)

    c = sub.add_parser("cost", help="dropout-module cost report")
    c.add_argument("--k", type=int, default=3)
    c.add_argument("--config-cin", type=int, default=256)
    c.add_argument("--cout", type=int, default=512)
    c.add_argument("--topology", help="cost a network instead of a single layer configuration")
    c.add_argument("--input-shape", type=int, nargs=3, default=[1, 28, 28])
    c.add_argument("--placement", choices=("layer-wise", "topology-wise"), default="topology-wise")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cost)

    i = sub.add_parser("inspect", help="summarize a crossbar layout file")
    i.add_argument("layout")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except (ConfigurationError, ParameterError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (DivergedTrainingError, CheckFailed) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    return 0


if __name__ == "__main__":
    sys.exit(main())
