import numpy as np
import pytest

from spindrop import tensor as tc
from spindrop.datasets import make_blobs
from spindrop.dropout import HyperParams
from spindrop.errors import ConfigurationError, DivergedTrainingError, FormatError, ParameterError
from spindrop.model import build_network
from spindrop.train import (
    DatasetSplit, MomentumSGD, TrainConfig, accuracy, load_checkpoint, read_tensors, save_checkpoint,
    sgd_step, split_dataset, train, write_metrics_csv,
)

from oracles import perceptron_separates


@pytest.fixture
def blobs():
    x, y = make_blobs(200, seed=0)
    return DatasetSplit(x, y, x[:0], y[:0], x, y)


def blob_net(rho=0.0, lam=1e-6):
    return build_network("fc2", (1, 1, 2), seed=0, hyper=HyperParams(rho=rho, lam=lam))


def small_net(rho=0.15):
    return build_network("c4k3,p2,fc3", (1, 8, 8), seed=5, hyper=HyperParams(rho=rho))


def small_data(n=60, seed=0):
    rng = np.random.default_rng(seed)
    return rng.random((n, 1, 8, 8)), rng.integers(0, 3, n)


class TestConfig:
    def test_seed_required(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(1, 8, 0.1, seed=None)

    @pytest.mark.parametrize("kw", [{"epochs": -1}, {"batch_size": 0}, {"lr": -0.1}, {"momentum": 1.0}, {"schedule": "step"}])
    def test_invalid(self, kw):
        base = dict(epochs=1, batch_size=8, lr=0.1, seed=0)
        with pytest.raises(ConfigurationError):
            TrainConfig(**{**base, **kw})

    def test_cosine(self):
        cfg = TrainConfig(1, 8, 0.01, seed=0)
        assert cfg.lr_at(0, 100) == 0.01
        assert cfg.lr_at(50, 100) == pytest.approx(0.005, abs=1e-15)
        assert TrainConfig(1, 8, 0.01, seed=0, schedule="constant").lr_at(99, 100) == 0.01


class TestSplit:
    @pytest.mark.parametrize("n", [1, 7, 50, 1001])
    def test_disjoint_and_ratio(self, n):
        x = np.arange(n, dtype=float).reshape(n, 1, 1, 1)
        d = split_dataset(x, np.arange(n), seed=3)
        parts = [set(d.y_train), set(d.y_eval), set(d.y_val)]
        assert sum(map(len, parts)) == n and len(set().union(*parts)) == n
        pool = len(d.y_eval) + len(d.y_val)
        assert abs(len(d.y_eval) - 0.8 * pool) <= 1

    def test_seeded(self):
        x = np.arange(40.0).reshape(40, 1, 1, 1)
        a, b = split_dataset(x, np.arange(40), 1), split_dataset(x, np.arange(40), 1)
        np.testing.assert_array_equal(a.y_val, b.y_val)


class TestMomentum:
    def test_plain_gd_closed_form(self):
        # f(p) = (p - 3)^2, lr = 0.1, no momentum: p_k = 3 + (p0 - 3) * 0.8^k
        opt, p = MomentumSGD(0.0), np.array([1.0])
        for k in range(1, 6):
            p = opt.step("p", p, 2 * (p - 3.0), 0.1)
            assert p[0] == pytest.approx(3.0 - 2.0 * 0.8 ** k, abs=1e-9)

    def test_heavy_ball_recurrence(self):
        # hand-unrolled v_k = m v_{k-1} + g_k, p_k = p_{k-1} - lr v_k for f(p) = p^2 / 2
        m, lr = 0.9, 0.1
        expect, p_ref, v = [], 1.0, 0.0
        for _ in range(5):
            v = m * v + p_ref
            p_ref = p_ref - lr * v
            expect.append(p_ref)
        opt, p = MomentumSGD(m), np.array([1.0])
        for e in expect:
            p = opt.step(0, p, p.copy(), lr)
            assert p[0] == pytest.approx(e, abs=1e-9)


class TestStep:
    def test_zero_lr_leaves_net(self):
        net = small_net(rho=0.15)
        net.hyper = HyperParams(rho=0.15, lam=0.0)
        # running batch-norm statistics are buffers, refreshed by any training pass
        before = [getattr(layer, name).copy() for layer, name in net.parameters()]
        x, y = small_data()
        obj, _ = sgd_step(net, x, y, 0.0, MomentumSGD(), mask_seed=None)
        for b, (layer, name) in zip(before, net.parameters()):
            np.testing.assert_array_equal(b, getattr(layer, name))
        ce, _ = tc.cross_entropy(net.forward(x, train=True), y)
        assert obj == ce

    def test_empty_batch(self):
        with pytest.raises(ParameterError):
            sgd_step(small_net(), np.zeros((0, 1, 8, 8)), np.zeros(0, int), 0.1, MomentumSGD())

    def test_divergence(self):
        net = small_net()
        x, y = small_data()
        net.layers[-1].gamma[:] = np.inf
        with pytest.raises(DivergedTrainingError) as err:
            sgd_step(net, x, y, 0.1, MomentumSGD(), epoch=2, batch=5)
        assert "epoch 2" in str(err.value) and "batch 5" in str(err.value)

    def test_binary_view_refreshed(self):
        net = small_net()
        x, y = small_data()
        sgd_step(net, x, y, 1.0, MomentumSGD(), mask_seed=3)
        w = net.layers[0]
        np.testing.assert_array_equal(w.weight(), tc.binarize(tc.normalize_weights(w.proxy)))


class TestTrain:
    def test_zero_epochs(self, blobs):
        net = blob_net()
        before = net.state()
        out, log = train(net, blobs, TrainConfig(0, 16, 0.01, seed=1))
        assert out is net and log == []
        for k, v in before.items():
            np.testing.assert_array_equal(v, net.state()[k])

    def test_blobs_reach_full_accuracy(self, blobs):
        assert perceptron_separates(blobs.x_train, blobs.y_train)
        net = blob_net()
        _, log = train(net, blobs, TrainConfig(20, 16, 0.01, seed=1))
        assert log[-1]["train_acc"] == 1.0
        assert accuracy(net, blobs.x_train, blobs.y_train) == 1.0

    def test_objective_falls_in_first_epoch(self, blobs):
        net, opt = blob_net(), MomentumSGD()
        order = np.random.default_rng(0).permutation(200)
        objs = [sgd_step(net, blobs.x_train[idx], blobs.y_train[idx], 0.01, opt)[0] for idx in order.reshape(-1, 20)]
        assert np.mean(objs[5:]) < np.mean(objs[:5])

    def test_epoch_means_decrease(self, blobs):
        _, log = train(blob_net(), blobs, TrainConfig(3, 16, 0.01, seed=1))
        assert log[1]["objective"] < log[0]["objective"]

    def test_determinism(self):
        x, y = small_data(80)
        data = split_dataset(x, y, seed=0)
        runs = []
        for _ in range(2):
            net = small_net(rho=0.15)
            best, log = train(net, data, TrainConfig(2, 16, 0.05, seed=9))
            runs.append((log, net.state(), best.state()))
        assert runs[0][0] == runs[1][0]
        for a, b in zip(runs[0][1:], runs[1][1:]):
            for k in a:
                assert a[k].tobytes() == b[k].tobytes()

    def test_best_checkpoint_kept(self):
        x, y = small_data(80)
        data = split_dataset(x, y, seed=0)
        best, log = train(small_net(), data, TrainConfig(3, 16, 0.05, seed=2))
        assert accuracy(best, data.x_val, data.y_val) == max(r["val_acc"] for r in log)

    def test_metrics_csv(self, tmp_path, blobs):
        _, log = train(blob_net(), blobs, TrainConfig(2, 16, 0.01, seed=1))
        write_metrics_csv(tmp_path / "m.csv", log)
        lines = (tmp_path / "m.csv").read_text().splitlines()
        assert lines[0] == "epoch,objective,train_acc,val_acc" and len(lines) == 3


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        net = small_net()
        x, y = small_data()
        sgd_step(net, x, y, 0.5, MomentumSGD(), mask_seed=1)
        save_checkpoint(net, tmp_path / "n.ckpt")
        back = load_checkpoint(tmp_path / "n.ckpt")
        assert back.forward(x).tobytes() == net.forward(x).tobytes()
        assert back.predict_proba(x, mc_seed=4).tobytes() == net.predict_proba(x, mc_seed=4).tobytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(8))
        with pytest.raises(FormatError):
            read_tensors(tmp_path / "x.ckpt")

    def test_truncated(self, tmp_path):
        save_checkpoint(small_net(), tmp_path / "n.ckpt")
        raw = (tmp_path / "n.ckpt").read_bytes()
        (tmp_path / "n.ckpt").write_bytes(raw[:-10])
        with pytest.raises(FormatError):
            read_tensors(tmp_path / "n.ckpt")

    def test_byte_stable(self, tmp_path):
        save_checkpoint(small_net(), tmp_path / "a.ckpt")
        save_checkpoint(small_net(), tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert (tmp_path / "a.ckpt.json").read_text() == (tmp_path / "b.ckpt.json").read_text()
