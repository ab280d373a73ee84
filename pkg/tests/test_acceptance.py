"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
Every criterion writes its artifacts under a run directory; criterion 10
executes criteria 1 to 9 a second time and compares the two trees byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import tempfile
import time
from decimal import Decimal
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import binomtest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import ood_score_oracle  # noqa: E402
from test_tensor import gradient_check  # noqa: E402

from spindrop import cost, crossbar as cb, datasets, ood, tensor as tc  # noqa: E402
from spindrop import dropout as dr  # noqa: E402
from spindrop.model import LENET, build_network  # noqa: E402
from spindrop.train import TrainConfig, accuracy, save_checkpoint, split_dataset, train, write_metrics_csv  # noqa: E402

# desk-scale training recipe shared by criteria 7 and 8
TRAIN = dict(epochs=15, batch_size=64, lr=0.1, seed=3)
INIT_SCALE = 1e-3
RHO = 0.15
OOD_N = int(os.environ.get("SPINDROP_OOD_N", "500"))
OOD_T = 20


def _random_layer(rng):
    k = int(rng.integers(1, 4))
    s = int(rng.integers(1, 3))
    c_in, c_out = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    h, w = int(rng.integers(k, 10)), int(rng.integers(k, 10))
    x = rng.integers(-4, 5, size=(1, c_in, h, w)).astype(float)
    signs = np.where(rng.random((c_out, c_in, k, k)) < 0.5, -1.0, 1.0)
    return x, signs, s


def _simulate(x, signs, stride, strategy, keep):
    mapper = cb.map_strategy1 if strategy == cb.S1 else cb.map_strategy2
    modules = cb.make_modules(signs.shape[1], 0.3)
    for m, k in zip(modules, keep):
        m.force(bool(k))
    mode = cb.S1_CONV if strategy == cb.S1 else cb.S2_CONV
    stream = cb.stream_moving_windows(x, signs.shape[2], stride, 0, strategy)
    return cb.simulate_layer(mapper(signs, stride, 0), stream, modules, mode)


def crit1(out: Path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    hits, total, rows = 0, 0, []
    for strategy in (cb.S1, cb.S2):
        for case in range(50):
            x, signs, s = _random_layer(rng)
            keep = rng.random(signs.shape[1]) >= 0.3
            ofm = _simulate(x, signs, s, strategy, keep)
            ref = tc.conv2d_kernel(x * keep[None, :, None, None], signs, s, 0)[0]
            ok = ofm.shape == ref.shape and np.array_equal(ofm, ref)
            hits += ok
            total += 1
            rows.append(f"{strategy},{case},{int(ok)},{hashlib.sha256(ofm.tobytes()).hexdigest()[:16]}")
    dt = time.perf_counter() - t0
    (out / "c1_cases.csv").write_text("strategy,case,equal,ofm_sha\n" + "\n".join(rows) + "\n")
    return hits == total and dt < 60, f"{hits}/{total} exact, {dt:.1f}s"


def crit2(out: Path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(202)
    same = 0
    for _ in range(20):
        x, signs, s = _random_layer(rng)
        keep = rng.random(signs.shape[1]) >= 0.3
        same += np.array_equal(_simulate(x, signs, s, cb.S1, keep), _simulate(x, signs, s, cb.S2, keep))
    dt = time.perf_counter() - t0
    (out / "c2.json").write_text(json.dumps({"identical": int(same), "layers": 20}) + "\n")
    return same == 20 and dt < 30, f"{same}/20 identical, {dt:.1f}s"


def crit3(out: Path):
    rng = np.random.default_rng(303)
    mask_rng = dr.stream(303)
    within_changes, first_masks, violations = 0, set(), []
    for _ in range(1000):
        c_in, c_out = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        h, w = int(rng.integers(4, 10)), int(rng.integers(4, 10))
        x = rng.integers(-4, 5, size=(1, c_in, h, w)).astype(float)
        signs = np.where(rng.random((c_out, c_in, 3, 3)) < 0.5, -1.0, 1.0)
        for strategy, mapper, mode in ((cb.S1, cb.map_strategy1, cb.S1_CONV), (cb.S2, cb.map_strategy2, cb.S2_CONV)):
            stream = cb.stream_moving_windows(x, 3, 1, 0, strategy)
            trace = []
            cb.simulate_layer(mapper(signs), stream, cb.make_modules(c_in, 0.3), mode, mask_rng, trace=trace)
            within_changes += sum(not np.array_equal(t, trace[0]) for t in trace[1:])
            first_masks.add((c_in, trace[0].tobytes()))
        s1 = cb.stream_moving_windows(x, 3, 1, 0, cb.S1)
        masks = cb.sample_per_cycle_element_masks(s1, 0.3, mask_rng)
        violations.append(cb.demonstrate_mask_inconsistency(s1, masks).count)
    across = len(first_masks) > 1
    (out / "c3.json").write_text(json.dumps({
        "within_pass_changes": within_changes, "distinct_first_masks": len(first_masks),
        "element_wise_violations": violations}) + "\n")
    ok = within_changes == 0 and across and min(violations) > 0
    return ok, (f"{within_changes} in-pass changes over 2000 passes, {len(first_masks)} distinct masks, "
                f"element-wise baseline violations min {min(violations)} / mean {np.mean(violations):.1f}")


def crit4(out: Path):
    rng = dr.stream(404)
    m = cb.MTJDropoutModule(0, 0.15)
    drops = sum(not cb.mtj_sample(m, rng).keep for _ in range(100_000))
    frac = drops / 100_000
    (out / "c4.json").write_text(json.dumps({"drops": drops, "n": 100_000}) + "\n")
    sd = np.sqrt(0.15 * 0.85 / 100_000)
    p = binomtest(drops, 100_000, 0.15).pvalue
    # the pinned band is +-0.0022, about 1.95 sigma; report the 3-sigma band alongside
    return 0.1478 <= frac <= 0.1522, (f"drop fraction {frac:.5f} vs band [0.1478, 0.1522]; "
                                      f"3-sigma band [{0.15 - 3 * sd:.4f}, {0.15 + 3 * sd:.4f}], binomial p={p:.3f}")


def crit5(out: Path):
    report = cost.single_layer_report(C_in=256, K=3, C_out=512)
    published = {
        (cost.CONV, cost.SPINDROP): (2304, "79833.6", "51.84"),
        (cost.CONV, cost.SPATIAL): (256, "8870.4", "5.76"),
        (cost.TOPO_AVGPOOL, cost.SPINDROP): (512, "17740.8", "11.52"),
        (cost.TOPO_AVGPOOL, cost.SPATIAL): (512, "17740.8", "11.52"),
        (cost.TOPO_FLATTEN, cost.SPINDROP): (4608, "159667.2", "103.68"),
        (cost.TOPO_FLATTEN, cost.SPATIAL): (512, "17740.8", "11.52"),
    }
    ok = True
    for r in report.rows:
        n, area, power = published[(r.mode, r.method)]
        ok &= (r.modules, r.area, r.power, r.latency) == (n, Fraction(area), Fraction(power), 15)
    formulas = all(
        cost.dropout_module_count(cost.SPINDROP, cost.CONV, k, c, 1) == k * k * c
        and cost.dropout_module_count(cost.SPATIAL, cost.CONV, k, c, 1) == c
        for k in range(1, 8) for c in (1, 7, 256))
    factor = cost.cost_report([("l", cost.CONV, 3, 256, 512)]).reduction_factors()["modules"]
    (out / "c5.csv").write_text(report.to_csv())
    ok &= formulas and factor == 9
    return ok, f"{len(report.rows)} table rows reproduced, count formulas {'ok' if formulas else 'WRONG'}, conv reduction {factor}x, latency 15 ns"


def crit6(out: Path):
    rows = {r.work: r for r in cost.energy_reference_table()}
    text = cost.energy_summary()
    (out / "c6.csv").write_text(text)
    ok = rows["SpinDrop"].ratio == Decimal("2.94") and rows["Malhotra et al."].ratio == Decimal("13.67") and "94.11" in text
    return ok, f"vs SpinDrop {rows['SpinDrop'].ratio}x, vs RRAM {rows['Malhotra et al.'].ratio}x; headline 94.11x printed with a discrepancy note"


def _mnist():
    mnist_dir = os.environ.get("SPINDROP_MNIST_DIR")
    if mnist_dir:
        x, y = datasets.load_mnist_dir(mnist_dir)
        return x[:10_000], y[:10_000], "MNIST train[:10000]"
    x, y = datasets.load_mnist5k()
    return x, y, "mnist5k (5000 real MNIST digits)"


def _train(data, rho, out: Path, tag):
    net = build_network(LENET, (1, 28, 28), seed=1, init_scale=INIT_SCALE, placement_mode="topology-wise",
                        hyper=dr.HyperParams(rho=rho, lam=1e-6, T=OOD_T))
    best, history = train(net, data, TrainConfig(**TRAIN))
    save_checkpoint(best, out / f"c7_{tag}.ckpt")
    write_metrics_csv(out / f"c7_{tag}_metrics.csv", history)
    return best, accuracy(best, data.x_val, data.y_val)


def crit7(out: Path, state: dict):
    t0 = time.perf_counter()
    x, y, name = _mnist()
    data = split_dataset(x, y, seed=0)
    net, acc = _train(data, RHO, out, "rho015")
    _, acc0 = _train(data, 0.0, out, "rho0")
    dt = time.perf_counter() - t0
    state["net"], state["data"] = net, data
    gap = abs(acc - acc0) * 100
    return gap <= 5.0 and dt < 1800, (f"{name}: cross-val {acc:.4f} (rho=0.15) vs {acc0:.4f} (rho=0), "
                                       f"gap {gap:.2f} pp, {dt:.0f}s")


def crit8(out: Path, state: dict):
    net, data = state["net"], state["data"]
    rng = np.random.default_rng(808)
    sets = [ood.gen_gaussian_noise(OOD_N, (1, 28, 28), rng), ood.gen_uniform_noise(OOD_N, (1, 28, 28), rng),
            ood.corrupt_with_noise(data.x_eval[:OOD_N], "gaussian", rng),
            ood.corrupt_with_noise(data.x_eval[:OOD_N], "uniform", rng), data.x_eval]
    res = {r.dataset_id: r for r in (ood.detection_rate(net, s, OOD_T, seed=88) for s in sets)}
    ood.write_ood_csv(out / "c8_ood.csv", res.values())
    d1, d2, idr = res["D1"], res["D2"], res["ID"]
    ok = d1.detection_rate >= 0.9 and d2.detection_rate >= 0.9 and idr.detection_rate <= 0.25

    def f(r):
        return f"{r.detection_rate:.3f} [{r.ci_low:.3f}, {r.ci_high:.3f}]"

    return ok, (f"T={OOD_T}, n={OOD_N}: D1 {f(d1)}, D2 {f(d2)}, false-OOD on ID {f(idr)}; "
                f"D3 {res['D3'].detection_rate:.3f}, D4 {res['D4'].detection_rate:.3f}")


def crit9(out: Path):
    errors = np.asarray(gradient_check())
    (out / "c9_errors.npy").write_bytes(errors.tobytes())
    return len(errors) == 100 and errors.max() < 1e-3, f"max relative error {errors.max():.2e} over {len(errors)} coordinates"


def crit11(out: Path):
    rng = np.random.default_rng(1111)
    worst, disagree = 0.0, 0
    for _ in range(1000):
        T, C = int(rng.integers(2, 31)), int(rng.integers(2, 11))
        base = rng.dirichlet(np.full(C, 0.1))
        p = rng.dirichlet(base * rng.uniform(2, 200) + 1e-3, size=T)
        prose = ood.ood_decide(p)
        formula = ood.ood_decide(p, rule=ood.FORMULA)
        worst = max(worst, abs(prose.score - ood_score_oracle(p)))
        disagree += prose.verdict != formula.verdict
    (out / "c11.json").write_text(json.dumps({"max_abs_error": worst, "disagreements": disagree}) + "\n")
    return worst <= 1e-12, f"max |score - oracle| {worst:.1e}; prose vs formula verdicts disagree on {disagree}/1000 ({disagree / 10:.1f}%)"


def run_criteria_1_to_9(out: Path) -> dict:
    state = {}
    return {
        1: crit1(out), 2: crit2(out), 3: crit3(out), 4: crit4(out), 5: crit5(out), 6: crit6(out),
        7: crit7(out, state), 8: crit8(out, state), 9: crit9(out),
    }


def tree_digest(root: Path) -> dict:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(root.iterdir())}


def run_all(base: Path) -> dict:
    a, b = base / "run_a", base / "run_b"
    a.mkdir()
    b.mkdir()
    results = run_criteria_1_to_9(a)
    run_criteria_1_to_9(b)
    da, db = tree_digest(a), tree_digest(b)
    diff = sorted(k for k in da.keys() | db.keys() if da.get(k) != db.get(k))
    results[10] = (not diff, f"{len(da)} artifacts compared, {len(diff)} differ" + (f": {diff}" if diff else ""))
    c11 = base / "c11"
    c11.mkdir()
    results[11] = crit11(c11)
    return results


def format_line(n, result):
    ok, detail = result
    return f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


@pytest.fixture(scope="module")
def results(tmp_path_factory):
    res = run_all(tmp_path_factory.mktemp("acceptance"))
    print()
    for n in sorted(res):
        print(format_line(n, res[n]))
    return res


@pytest.mark.parametrize("n", range(1, 12))
def test_criterion(results, n, capsys):
    with capsys.disabled():
        print(format_line(n, results[n]))
    assert results[n][0], results[n][1]


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        res = run_all(Path(tmp))
    for n in sorted(res):
        print(format_line(n, res[n]))
    sys.exit(0 if all(ok for ok, _ in res.values()) else 1)
