import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TOY_CONFIG, conv_softmax_graph
from dermclass.checkpoint import load_checkpoint
from dermclass.errors import EmptyValidation, ShapeMismatch
from dermclass.loss import weighted_cce
from dermclass.model import build_network, freeze_for_fine_tuning, init_parameters
from dermclass.training import (
    EpochRecord,
    OptimizerConfig,
    TrainConfig,
    fit,
    read_history_csv,
    resume_from_best,
    run_epoch,
    sgd_step,
    write_history_csv,
)


def reference_stop(seq, patience):
    """Independent patience counter: returns (stop_epoch, best_epoch)."""
    best, best_epoch, wait = -math.inf, 0, 0
    for epoch, metric in enumerate(seq, start=1):
        if metric > best:
            best, best_epoch, wait = metric, epoch, 0
        else:
            wait += 1
        if wait >= patience:
            return epoch, best_epoch
    return len(seq), best_epoch


def scripted(seq, seen=None):
    """Epoch stub replaying ``seq`` as validation accuracy; nudges a weight so checkpoints differ."""

    def run(graph, data, epoch, velocity, phase):
        if seen is not None:
            seen.append({"phase": phase, "velocity": dict(velocity), "trainable": set(graph.trainable_units)})
        name = sorted(graph.params)[0]
        graph.params[name] = graph.params[name] + 0.001
        return EpochRecord(epoch, 1.0 / epoch, 0.5, 1.0, seq[epoch - 1])

    return run


class TestWeightedCCE:
    def test_uniform_is_ln_k(self):
        probs = torch.full((3, 7), 1 / 7, dtype=torch.float64)
        assert abs(weighted_cce(probs, [0, 3, 6]).item() - math.log(7)) <= 1e-9

    def test_weighted_pair(self):
        probs = torch.tensor([[0.5, 0.5], [0.5, 0.5]], dtype=torch.float64)
        loss = weighted_cce(probs, [0, 1], [2.0, 1.0]).item()
        assert abs(loss - 1.5 * math.log(2)) <= 1e-9
        assert loss == pytest.approx(1.039721, abs=5e-7)

    def test_perfect_prediction(self):
        probs = torch.eye(3, dtype=torch.float64)
        assert abs(weighted_cce(probs, [0, 1, 2], [5.0, 0.3, 2.0]).item()) <= 1e-9

    def test_saturated_wrong_is_finite(self):
        loss = weighted_cce(torch.tensor([[1.0, 0.0]], dtype=torch.float64), [1]).item()
        assert loss == pytest.approx(-math.log(1e-12))

    @given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2**31))
    def test_unit_weights_equal_plain(self, b, k, seed):
        rng = np.random.default_rng(seed)
        probs = torch.softmax(torch.from_numpy(rng.normal(size=(b, k))), 1)
        y = rng.integers(0, k, b)
        plain = -sum(math.log(probs[i, y[i]].item()) for i in range(b)) / b
        assert abs(weighted_cce(probs, y, np.ones(k)).item() - plain) <= 1e-12

    def test_shape_errors(self):
        with pytest.raises(ShapeMismatch):
            weighted_cce(np.full((2, 3), 1 / 3), [0])
        with pytest.raises(ShapeMismatch):
            weighted_cce(np.full((1, 3), 1 / 3), [0], [1.0, 1.0])


class TestSGD:
    def test_nesterov_by_hand(self):
        p = {"w": torch.tensor([1.0], dtype=torch.float64)}
        v = {"w": torch.tensor([0.0], dtype=torch.float64)}
        sgd_step(p, {"w": torch.tensor([0.5], dtype=torch.float64)}, v, OptimizerConfig(0.1, 0.9, True))
        assert abs(v["w"].item() - (-0.05)) <= 1e-12
        assert abs(p["w"].item() - 0.905) <= 1e-12

    def test_classical_momentum_by_hand(self):
        p, v = {"w": torch.tensor([1.0], dtype=torch.float64)}, {"w": torch.tensor([0.2], dtype=torch.float64)}
        sgd_step(p, {"w": torch.tensor([0.5], dtype=torch.float64)}, v, OptimizerConfig(0.1, 0.9, False))
        # v = 0.18 - 0.05
        assert abs(v["w"].item() - 0.13) <= 1e-12 and abs(p["w"].item() - 1.13) <= 1e-12

    @given(st.lists(st.floats(-10, 10), min_size=1, max_size=5), st.floats(0, 1), st.booleans())
    def test_zero_momentum_is_vanilla(self, values, lr, nesterov):
        theta = torch.tensor(values, dtype=torch.float32)
        g = torch.tensor(values[::-1], dtype=torch.float32)
        p = {"w": theta.clone()}
        sgd_step(p, {"w": g}, {}, OptimizerConfig(lr, 0.0, nesterov))
        assert torch.equal(p["w"], theta - lr * g)

    def test_zero_gradient_recurrence(self):
        mu, v0 = 0.9, 0.3
        p = {"w": torch.tensor([2.0], dtype=torch.float64)}
        v = {"w": torch.tensor([v0], dtype=torch.float64)}
        zero = {"w": torch.zeros(1, dtype=torch.float64)}
        cfg = OptimizerConfig(0.5, mu, True)
        steps, prev_v = [], v0
        for n in range(1, 4):
            before = p["w"].item()
            sgd_step(p, zero, v, cfg)
            step = p["w"].item() - before
            # lookahead form: (1 + mu) * v_new - mu * v_old
            assert abs(step - ((1 + mu) * v["w"].item() - mu * prev_v)) <= 1e-12
            assert abs(v["w"].item() - mu**n * v0) <= 1e-12
            prev_v = v["w"].item()
            steps.append(step)
        assert abs(steps[1] / steps[0] - mu) <= 1e-12 and abs(steps[2] / steps[1] - mu) <= 1e-12
        assert abs(p["w"].item() - (2.0 + v0 * (mu**2 + mu**3 + mu**4))) <= 1e-12

    def test_frozen_untouched(self):
        p = {"a": torch.ones(3), "frozen": torch.full((2,), 7.0)}
        for _ in range(5):
            sgd_step(p, {"a": torch.ones(3)}, {}, OptimizerConfig(0.1))
        assert torch.equal(p["frozen"], torch.full((2,), 7.0))

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            sgd_step({"a": torch.ones(3)}, {"a": torch.ones(2)}, {}, OptimizerConfig())
        with pytest.raises(ShapeMismatch):
            sgd_step({"a": torch.ones(3)}, {"a": torch.ones(3)}, {"a": torch.ones(1)}, OptimizerConfig())


def separable_set(n=24, size=3, seed=0):
    """Two classes told apart by which channel carries the signal."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.random((n, size, size, 3)).astype(np.float32) * 0.1
    images[labels == 0, :, :, 0] += 0.8
    images[labels == 1, :, :, 1] += 0.8
    return images, labels


class TestRunEpoch:
    def test_loss_decreases_on_separable_data(self):
        graph = conv_softmax_graph(k=2)
        images, labels = separable_set()
        velocity, losses = {}, []
        for epoch in range(1, 4):
            rec = run_epoch(graph, zip(images, labels), (images, labels), None, OptimizerConfig(0.05), 4, velocity, epoch)
            losses.append(rec.train_loss)
        assert losses[0] > losses[1] > losses[2]
        assert 0 <= rec.train_accuracy <= 1 and 0 <= rec.val_accuracy <= 1

    def test_zero_learning_rate(self, toy_graph):
        rng = np.random.default_rng(0)
        images = rng.random((3, 75, 75, 3)).astype(np.float32)
        labels = np.array([0, 3, 6])
        before = {k: v.clone() for k, v in toy_graph.params.items()}
        rec = run_epoch(toy_graph, zip(images, labels), (images, labels), None, OptimizerConfig(0.0), 2)
        assert all(torch.equal(before[k], v) for k, v in toy_graph.params.items())
        assert math.isfinite(rec.train_loss) and 0 <= rec.train_accuracy <= 1

    def test_frozen_parameters_stay_bit_identical(self, toy_graph):
        freeze_for_fine_tuning(toy_graph, 3)
        images = np.random.default_rng(1).random((4, 75, 75, 3)).astype(np.float32)
        labels = np.array([0, 1, 2, 3])
        frozen = {k: v.clone() for k, v in toy_graph.params.items() if not k.startswith(("head_fc", "logits"))}
        run_epoch(toy_graph, zip(images, labels), (images, labels), None, OptimizerConfig(0.1), 2)
        assert all(torch.equal(toy_graph.params[k], v) for k, v in frozen.items())
        assert not torch.equal(toy_graph.params["logits/bias"], torch.zeros(7))

    def test_empty_validation(self, tiny_graph):
        images, labels = separable_set(4)
        with pytest.raises(EmptyValidation):
            run_epoch(tiny_graph, zip(images, labels), (images[:0], labels[:0]), None, OptimizerConfig())


class TestFit:
    def _fit(self, graph, seq, tmp_path, patience, **kw):
        cfg = TrainConfig(epochs=len(seq), patience=patience)
        return fit(graph, None, cfg, OptimizerConfig(), None, tmp_path, epoch_fn=scripted(seq), **kw)

    def test_example_sequence(self, tiny_graph, tmp_path):
        res = self._fit(tiny_graph, [0.50, 0.60, 0.55, 0.58], tmp_path, 2)
        assert res.stopped_early and res.stop_epoch == 4 and res.state.best_epoch == 2
        assert load_checkpoint(res.best_checkpoint).meta["epoch"] == 2

    def test_strictly_improving(self, tiny_graph, tmp_path):
        res = self._fit(tiny_graph, [0.1, 0.2, 0.3, 0.4, 0.5], tmp_path, 1)
        assert not res.stopped_early and res.stop_epoch == 5 and res.state.best_epoch == 5

    def test_patience_at_least_epochs(self, tiny_graph, tmp_path):
        res = self._fit(tiny_graph, [0.9, 0.1, 0.1, 0.1], tmp_path, 4)
        assert not res.stopped_early and len(res.history) == 4

    def test_ties_do_not_improve(self, tiny_graph, tmp_path):
        res = self._fit(tiny_graph, [0.5, 0.5, 0.5], tmp_path, 5)
        assert res.state.best_epoch == 1

    def test_best_checkpoint_holds_best_weights(self, tiny_graph, tmp_path):
        res = self._fit(tiny_graph, [0.2, 0.7, 0.3], tmp_path, 5)
        # stub adds 0.001 per epoch to the first parameter
        name = sorted(tiny_graph.params)[0]
        saved = load_checkpoint(res.best_checkpoint).tensors[name]
        np.testing.assert_allclose(saved, tiny_graph.params[name].numpy() - 0.001, atol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.sampled_from([0.1, 0.2, 0.3, 0.4]), min_size=1, max_size=12), st.integers(1, 5))
    def test_matches_reference(self, tmp_path_factory, seq, patience):
        graph = conv_softmax_graph()
        res = self._fit(graph, seq, tmp_path_factory.mktemp("fit"), patience)
        assert (res.stop_epoch, res.state.best_epoch) == reference_stop(seq, patience)


@pytest.fixture
def phase1_checkpoint(tmp_path):
    graph = freeze_for_fine_tuning(init_parameters(build_network(TOY_CONFIG), 0), 5)
    res = fit(graph, None, TrainConfig(epochs=3, patience=5), OptimizerConfig(), None, tmp_path,
              epoch_fn=scripted([0.7, 0.734, 0.73]))
    return res.best_checkpoint


class TestResume:
    cfg = TrainConfig(patience=3)

    def test_zero_extra_epochs(self, phase1_checkpoint):
        data = phase1_checkpoint.read_bytes()
        res = resume_from_best(phase1_checkpoint, None, 0, OptimizerConfig(), None, self.cfg, epoch_fn=scripted([]))
        assert res.best_checkpoint == phase1_checkpoint and res.best_checkpoint.read_bytes() == data

    def test_never_improving(self, phase1_checkpoint):
        res = resume_from_best(phase1_checkpoint, None, 3, OptimizerConfig(), None, self.cfg,
                               epoch_fn=scripted([0.7, 0.734, 0.6]))
        assert res.best_checkpoint == phase1_checkpoint and res.state.best_metric == 0.734

    def test_replayed_two_phase_scenario(self, phase1_checkpoint):
        seen = []
        res = resume_from_best(phase1_checkpoint, None, 2, OptimizerConfig(), None, self.cfg,
                               epoch_fn=scripted([0.74, 0.789], seen))
        assert res.state.best_metric == 0.789
        meta = load_checkpoint(res.best_checkpoint).meta
        assert res.best_checkpoint.name == "best_resumed.ckpt"
        assert meta["best_val_accuracy"] == 0.789 and meta["phase"] == 2 and meta["epoch"] == 2
        # velocity restarts at zero, freeze mask comes back from the checkpoint
        assert seen[0]["velocity"] == {} and seen[0]["phase"] == 2
        assert len(seen[0]["trainable"]) == 5

    def test_monotone_across_boundary(self, phase1_checkpoint):
        res = resume_from_best(phase1_checkpoint, None, 4, OptimizerConfig(), None, self.cfg,
                               epoch_fn=scripted([0.5, 0.75, 0.74, 0.76]))
        assert res.state.best_metric == 0.76 >= 0.734


def test_history_csv_round_trip(tmp_path):
    rows = [EpochRecord(1, 0.5, 0.25, 0.75, 0.1), EpochRecord(2, 0.4, 0.5, 0.7, 0.3)]
    write_history_csv(tmp_path / "h.csv", rows, [1, 1])
    text = (tmp_path / "h.csv").read_text().splitlines()
    assert text[0] == "epoch,train_loss,train_accuracy,val_loss,val_accuracy,phase"
    back = read_history_csv(tmp_path / "h.csv")
    assert [float(r["val_accuracy"]) for r in back] == [0.1, 0.3] and back[1]["phase"] == "1"
