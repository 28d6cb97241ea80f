import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import TOY_CONFIG, conv_softmax_graph, he_limit
from dermclass.errors import OutOfRange, ShapeMismatch, ShapeUnderflow
from dermclass.loss import weighted_cce
from dermclass.model import (
    NetworkConfig,
    backward,
    build_network,
    forward,
    freeze_for_fine_tuning,
    init_parameters,
    residual_blocks,
    stage_shapes,
)


def hand_shape_walk(n):
    """Spatial size through stem and both reductions, from kernel/stride/padding alone."""
    valid = lambda size, k, s: (size - k) // s + 1
    n = valid(n, 3, 2)   # stem conv1 3x3/2
    n = valid(n, 3, 1)   # stem conv2 3x3
    #                      stem conv3 3x3 same
    n = valid(n, 3, 2)   # max-pool 3x3/2
    #                      stem conv4 1x1
    n = valid(n, 3, 1)   # stem conv5 3x3
    stem = n = valid(n, 3, 2)  # max-pool 3x3/2; mixed block keeps size
    red_a = n = valid(n, 3, 2)
    red_b = valid(n, 3, 2)
    return stem, red_a, red_b


class TestBuildNetwork:
    def test_default_stage_sizes(self):
        g = build_network(NetworkConfig())
        shapes = stage_shapes(g)
        stem, red_a, red_b = hand_shape_walk(299)
        assert (stem, red_a, red_b) == (35, 17, 8)
        assert shapes["stem"][1:] == (stem, stem)
        assert shapes["reduction_a"][1:] == (red_a, red_a)
        assert shapes["reduction_b"][1:] == (red_b, red_b)
        assert shapes["head"] == (7,)

    def test_default_widths(self):
        shapes = stage_shapes(build_network(NetworkConfig()))
        assert shapes["stem"][0] == 320 and shapes["reduction_a"][0] == 1088 and shapes["reduction_b"][0] == 2080

    def test_block_structure(self):
        g = build_network(NetworkConfig())
        kinds = [l.kind for l in g.layers]
        assert kinds.count("residual-add") == 40
        assert sum(1 for l in g.layers if l.kind == "max-pool" and l.stage.startswith("reduction")) == 2
        assert any(l.kind == "average-pool" for l in g.layers)
        assert [l.name for l in g.layers[-7:]] == [
            "head_flatten", "head_fc1", "head_fc1_relu", "head_fc2", "head_fc2_relu", "logits", "softmax",
        ]
        assert g.by_name["head_fc1"].params["kernel"] == (64, 8 * 8 * 2080)

    @settings(max_examples=15, deadline=None)
    @given(st.integers(75, 320), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.sampled_from([4, 8, 32]))
    def test_residual_blocks_preserve_shape(self, hw, a, b, c, base):
        g = build_network(NetworkConfig(input_hw=hw, block_counts=(a, b, c), base_filters=base))
        blocks = residual_blocks(g)
        assert len(blocks) == a + b + c
        for _, shape_in, shape_out in blocks:
            assert shape_in == shape_out

    def test_concats_agree_spatially(self):
        g = build_network(TOY_CONFIG)
        for l in g.layers:
            if l.kind == "concat":
                shapes = [g.by_name[i].out_shape for i in l.inputs]
                assert len({s[1:] for s in shapes}) == 1

    def test_underflow(self):
        with pytest.raises(ShapeUnderflow):
            build_network(NetworkConfig(input_hw=60))
        build_network(NetworkConfig(input_hw=75))

    def test_names_deterministic(self):
        a = [l.name for l in build_network(TOY_CONFIG).layers]
        assert a == [l.name for l in build_network(TOY_CONFIG).layers]
        assert len(set(a)) == len(a)

    def test_listing(self, toy_graph):
        text = toy_graph.listing()
        assert text.splitlines()[0].split() == ["name", "kind", "output_shape", "params", "trainable"]
        assert "block_a01_up" in text and "80x7x7" in text
        assert f"total parameters: {toy_graph.num_params()}" in text

    def test_global_pool_switch(self):
        g = build_network(NetworkConfig(global_pool=True, block_counts=(1, 1, 1)))
        assert g.by_name["head_fc1"].params["kernel"] == (64, 2080)


class TestForward:
    def test_rows_are_probabilities(self, toy_graph):
        x = np.random.default_rng(0).random((3, 75, 75, 3), dtype=np.float32)
        for training in (False, True):
            p = forward(toy_graph, x, training=training, update_stats=False).detach().double()
            assert p.shape == (3, 7)
            assert (p >= 0).all()
            assert torch.allclose(p.sum(1), torch.ones(3, dtype=torch.float64), atol=1e-5)

    def test_identical_images_identical_rows(self, toy_graph):
        img = np.random.default_rng(1).random((75, 75, 3), dtype=np.float32)
        p = forward(toy_graph, np.stack([img, img]))
        assert torch.equal(p[0], p[1])

    def test_deterministic(self, toy_graph):
        x = np.random.default_rng(2).random((2, 75, 75, 3), dtype=np.float32)
        other = init_parameters(build_network(TOY_CONFIG), 0)
        assert torch.equal(forward(toy_graph, x), forward(other, x))

    def test_conv_softmax_by_hand(self):
        g = conv_softmax_graph(k=3)
        kernel = torch.zeros(3, 3, 3, 3)
        kernel[:, 0, 1, 1] = torch.tensor([0.0, math.log(2.0), math.log(3.0)])
        kernel[:, 2, 0, 0] = 5.0  # reads a zero pixel
        g.params["conv/kernel"] = kernel
        g.params["conv/bias"] = torch.zeros(3)
        x = np.zeros((1, 3, 3, 3), np.float32)
        x[0, 1, 1, 0] = 1.0
        p = forward(g, x)[0].double()
        assert torch.allclose(p, torch.tensor([1 / 6, 2 / 6, 3 / 6], dtype=torch.float64), atol=1e-7)

    def test_shape_mismatch(self, toy_graph):
        with pytest.raises(ShapeMismatch):
            forward(toy_graph, np.zeros((1, 70, 75, 3), np.float32))

    def test_training_updates_moving_stats_only_when_asked(self, toy_graph):
        x = np.random.default_rng(3).random((4, 75, 75, 3), dtype=np.float32)
        before = {k: v.clone() for k, v in toy_graph.buffers.items()}
        forward(toy_graph, x, training=True, update_stats=False)
        assert all(torch.equal(before[k], v) for k, v in toy_graph.buffers.items())
        forward(toy_graph, x, training=True)
        assert not torch.equal(before["stem_conv1_bn/moving_mean"], toy_graph.buffers["stem_conv1_bn/moving_mean"])


def central_difference(loss_fn, tensor, idx, h):
    plus, minus = tensor.clone(), tensor.clone()
    plus.view(-1)[idx] += h
    minus.view(-1)[idx] -= h
    return (loss_fn(plus) - loss_fn(minus)) / (2 * h)


class TestBackward:
    def test_conv_softmax_finite_differences(self):
        g = conv_softmax_graph(k=4, size=3).clone(torch.float64)
        rng = np.random.default_rng(0)
        x = rng.random((5, 3, 3, 3))
        y = np.array([0, 1, 2, 3, 1])
        w = np.array([2.0, 1.0, 0.5, 1.5])
        _, _, grads = backward(g, x, y, w)

        for name in ("conv/kernel", "conv/bias"):
            def loss_fn(t, name=name):
                with torch.no_grad():
                    return weighted_cce(forward(g, x, params={name: t}), y, w).item()
            for idx in range(g.params[name].numel()):
                num = central_difference(loss_fn, g.params[name], idx, 1e-3)
                ana = grads[name].view(-1)[idx].item()
                assert abs(num - ana) <= 1e-4 * max(abs(num), abs(ana), 1e-6)

    def test_saturated_correct_prediction_is_stationary(self):
        g = conv_softmax_graph(k=2, size=3).clone(torch.float64)
        kernel = torch.zeros_like(g.params["conv/kernel"])
        kernel[0, 0, 1, 1], kernel[1, 0, 1, 1] = 60.0, -60.0
        g.params["conv/kernel"] = kernel
        x = np.zeros((2, 3, 3, 3))
        x[0, 1, 1, 0], x[1, 1, 1, 0] = 1.0, -1.0
        loss, _, grads = backward(g, x, np.array([0, 1]))
        norm = math.sqrt(sum(float((t**2).sum()) for t in grads.values()))
        assert loss.item() < 1e-9
        assert norm < 1e-6

    def test_frozen_layers_get_no_gradient(self, toy_graph):
        freeze_for_fine_tuning(toy_graph, 3)
        x = np.random.default_rng(0).random((2, 75, 75, 3), dtype=np.float32)
        _, _, grads = backward(toy_graph, x, [1, 2])
        assert set(grads) == {f"{n}/{p}" for n in ("head_fc1", "head_fc2", "logits") for p in ("kernel", "bias")}

    def test_target_length_checked(self, toy_graph):
        with pytest.raises(ShapeMismatch):
            backward(toy_graph, np.zeros((2, 75, 75, 3), np.float32), [0])


def expected_last_n(n, c_blocks=10):
    """Hand enumeration: head FCs, then each C block's up-conv and branches, outermost first."""
    names = ["logits", "head_fc2", "head_fc1"]
    for i in range(c_blocks, 0, -1):
        block = f"block_c{i:02d}"
        names += [f"{block}_up", f"{block}_b1_conv3", f"{block}_b1_conv2", f"{block}_b1_conv1", f"{block}_b0_conv"]
    return set(names[:n])


class TestFreeze:
    def test_all(self, toy_graph):
        total = len(toy_graph.parameterized_units())
        freeze_for_fine_tuning(toy_graph, total)
        assert toy_graph.trainable_units == set(toy_graph.parameterized_units())

    def test_head_only(self):
        g = build_network(NetworkConfig())
        freeze_for_fine_tuning(g, 3)
        assert g.trainable_units == {"head_fc1", "head_fc2", "logits"}

    def test_last_forty_default(self):
        g = build_network(NetworkConfig())
        freeze_for_fine_tuning(g, 40)
        assert g.trainable_units == expected_last_n(40)
        # batch-norm follows its convolution
        assert g.is_trainable(g.by_name["block_c03_b1_conv3_bn"])
        assert not g.is_trainable(g.by_name["block_c03_b1_conv2_bn"])

    @given(st.integers(1, 40))
    def test_count_exact(self, n):
        g = build_network(TOY_CONFIG)
        freeze_for_fine_tuning(g, n)
        assert len(g.trainable_units) == n

    def test_out_of_range(self, toy_graph):
        with pytest.raises(OutOfRange):
            freeze_for_fine_tuning(toy_graph, 0)
        with pytest.raises(OutOfRange):
            freeze_for_fine_tuning(toy_graph, len(toy_graph.parameterized_units()) + 1)

    def test_frozen_batch_norm_uses_moving_stats(self, toy_graph):
        freeze_for_fine_tuning(toy_graph, 3)
        x = np.random.default_rng(0).random((2, 75, 75, 3), dtype=np.float32)
        before = {k: v.clone() for k, v in toy_graph.buffers.items()}
        forward(toy_graph, x, training=True)
        assert all(torch.equal(before[k], v) for k, v in toy_graph.buffers.items())


class TestInit:
    def test_same_seed_same_tensors(self):
        a = init_parameters(build_network(TOY_CONFIG), 5)
        b = init_parameters(build_network(TOY_CONFIG), 5)
        assert all(torch.equal(a.params[k], b.params[k]) for k in a.params)
        c = init_parameters(build_network(TOY_CONFIG), 6)
        assert not torch.equal(a.params["logits/kernel"], c.params["logits/kernel"])

    def test_biases_and_batch_norm(self, toy_graph):
        for name, t in toy_graph.params.items():
            if name.endswith("/bias") or name.endswith("/beta"):
                assert not t.any()
            if name.endswith("/gamma"):
                assert (t == 1).all()
        for name, t in toy_graph.buffers.items():
            assert (t == (1.0 if name.endswith("moving_var") else 0.0)).all()

    def test_kernel_moments(self):
        g = init_parameters(build_network(NetworkConfig()), 0)
        kernel = g.params["head_fc1/kernel"]
        limit = he_limit(kernel.shape[1])
        sample = kernel.flatten()[:1000].double().numpy()
        assert np.abs(sample).max() <= limit
        sd = limit / math.sqrt(3)
        assert abs(sample.mean()) < 4 * sd / math.sqrt(1000)
        assert sample.var() == pytest.approx(sd**2, rel=0.15)
