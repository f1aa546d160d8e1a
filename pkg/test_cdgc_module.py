#!/usr/bin/env python3
# -*- coding: utf-8 -*-

"""
CDGC 模块测试
"""

import numpy as np
import pytest

import tensor_core as tc
from cdgc_errors import ConfigError, DimensionError
from cdgc_module import (CdgcConfig, CdgcModule, aggregate_classes, class_graph, class_wise_reason, fuse,
                         graph_convolve)
from graph_builder import SampledSet, row_softmax, similarity_scores
from tensor_core import ParamStore, Rng


def _module(num_classes=3, channels=4, fusion="concat", seed=0):
    params = ParamStore()
    return CdgcModule.initialize(CdgcConfig(num_classes, channels, fusion), params, Rng(seed))


def _set(module, name, value):
    module.params[name].data = np.asarray(value, dtype=module.params[name].data.dtype)


def test_config_validation():
    with pytest.raises(ConfigError):
        CdgcConfig(1, 4)
    with pytest.raises(ConfigError):
        CdgcConfig(2, 0)
    with pytest.raises(ConfigError):
        CdgcConfig(2, 4, fusion="product")
    with pytest.raises(ConfigError):
        CdgcConfig(2, 4, shared_group_weights=True)


def test_parameter_shapes():
    module = _module(3, 4, "concat")
    assert module.aggregation_kernel.shape == (4, 12, 1, 1)
    assert module.fusion_kernel.shape == (4, 8, 1, 1)
    assert module.group_weight(2).shape == (4, 4)
    assert _module(3, 4, "sum").fusion_kernel.shape == (4, 4, 1, 1)


# ---- graph_convolve ----
def test_graph_convolve_identity():
    x = tc.tensor(Rng(0).uniform(0, 1, (5, 3)))
    out = graph_convolve(tc.tensor(np.eye(5)), x, tc.tensor(np.eye(3)))
    np.testing.assert_allclose(out.data, x.data)


def test_graph_convolve_uniform_rows_average():
    x = tc.tensor(Rng(1).normal(1.0, (4, 3)))
    out = graph_convolve(tc.tensor(np.full((4, 4), 0.25)), x, tc.tensor(np.eye(3))).data
    expected = np.maximum(x.data.mean(axis=0), 0)
    for row in out:
        np.testing.assert_allclose(row, expected, rtol=1e-5, atol=1e-6)


def test_graph_convolve_matches_composition():
    rng = Rng(2)
    a, x, w = rng.normal(1.0, (5, 5)), rng.normal(1.0, (5, 3)), rng.normal(1.0, (3, 3))
    with tc.float64_mode():
        out = graph_convolve(tc.tensor(a), tc.tensor(x), tc.tensor(w)).data
    np.testing.assert_allclose(out, np.maximum(a @ x @ w, 0), rtol=1e-6, atol=1e-9)


def test_graph_convolve_shape_error():
    with pytest.raises(DimensionError):
        graph_convolve(tc.zeros((3, 3)), tc.zeros((4, 2)), tc.zeros((2, 2)))


# ---- class_wise_reason ----
def test_empty_class_gives_zero_slice():
    module = _module(2, 3)
    x = tc.tensor(Rng(3).normal(1.0, (3, 2, 2)))
    sampled = SampledSet([np.arange(4), np.array([], dtype=np.int64)], 4)
    per_class = class_wise_reason(x, sampled, module).data
    assert per_class.shape == (2, 3, 4)
    assert np.all(per_class[1] == 0)

    x_flat = tc.reshape(x, (3, 4))
    adj = row_softmax(similarity_scores(x_flat, module.sim_w, module.sim_w_prime, np.arange(4)), np.arange(4))
    expected = graph_convolve(adj, tc.transpose(x_flat), module.group_weight(0))
    np.testing.assert_allclose(per_class[0], expected.data.T, rtol=1e-5, atol=1e-6)


def test_single_node_class():
    module = _module(2, 3)
    x = tc.tensor(Rng(4).normal(1.0, (3, 2, 3)))
    sampled = SampledSet([np.array([4]), np.array([0, 1])], 6)
    per_class = class_wise_reason(x, sampled, module).data
    x_k = x.data.reshape(3, 6)[:, 4]
    expected = np.maximum(x_k @ module.group_weight(0).data, 0)
    np.testing.assert_allclose(per_class[0][:, 4], expected, rtol=1e-5, atol=1e-6)
    assert np.all(per_class[0][:, [0, 1, 2, 3, 5]] == 0)


def test_class_wise_reason_matches_per_class_loop():
    rng = Rng(5)
    module = _module(3, 4, seed=5)
    with tc.float64_mode():
        for name, p in module.params.items():
            p.data = p.data.astype(np.float64)
        x = tc.tensor(rng.normal(1.0, (4, 4, 4)))
        indices = [rng.sample_without_replacement(np.arange(16), rng.integers(1, 17)) for _ in range(3)]
        per_class = class_wise_reason(x, SampledSet(indices, 16), module).data
    xf = x.data.reshape(4, 16)
    for m, support in enumerate(indices):
        expected = np.zeros((16, 4))
        xs = xf[:, support]
        scores = (module.sim_w.data @ xs).T @ (module.sim_w_prime.data @ xs)
        adj = np.exp(scores - scores.max(axis=1, keepdims=True))
        adj /= adj.sum(axis=1, keepdims=True)
        expected[support] = np.maximum(adj @ xs.T @ module.group_weight(m).data, 0)
        np.testing.assert_allclose(per_class[m], expected.T, rtol=1e-6, atol=1e-9)


def test_class_graph_matches_dense_adjacency():
    rng = Rng(11)
    module = _module(2, 3, seed=11)
    with tc.float64_mode():
        for _, p in module.params.items():
            p.data = p.data.astype(np.float64)
        x_flat = tc.tensor(rng.normal(1.0, (3, 10)))
        support = np.array([0, 2, 3, 7, 9])
        graph = class_graph(x_flat, support, module.group_weight(1), module)
        dense = row_softmax(similarity_scores(x_flat, module.sim_w, module.sim_w_prime, support), support)
    np.testing.assert_allclose(graph.dense_adjacency(10), dense.data, atol=1e-12)
    before = graph.dense_nodes(10)
    np.testing.assert_array_equal(before[:, support], x_flat.data[:, support])
    assert np.all(np.delete(before, support, axis=1) == 0)
    assert np.all(np.delete(graph.out.data, support, axis=1) == 0)


def test_readout_only_masks_outputs():
    rng = Rng(12)
    module = _module(2, 3, seed=12)
    x = tc.tensor(rng.normal(1.0, (3, 2, 4)))
    indices = [np.array([0, 1, 2, 5, 6]), np.array([3, 4, 7])]
    readout = np.zeros((2, 8), dtype=bool)
    readout[0, [0, 2, 6]] = True
    readout[1, [3, 4, 7]] = True
    full = class_wise_reason(x, SampledSet(indices, 8), module).data
    masked = class_wise_reason(x, SampledSet(indices, 8, readout=readout), module).data
    for m in range(2):
        np.testing.assert_array_equal(masked[m][:, readout[m]], full[m][:, readout[m]])
        assert np.all(masked[m][:, ~readout[m]] == 0)


def test_readout_shape_is_checked():
    with pytest.raises(DimensionError):
        SampledSet([np.arange(2), np.arange(2)], 4, readout=np.ones((2, 3), dtype=bool))


def test_class_isolation():
    rng = Rng(6)
    for _ in range(50):
        module = _module(3, 3, seed=rng.integers(0, 1000))
        with tc.float64_mode():
            for _, p in module.params.items():
                p.data = p.data.astype(np.float64)
            data = rng.normal(1.0, (3, 3, 3))
            indices = [rng.sample_without_replacement(np.arange(9), rng.integers(0, 10)) for _ in range(3)]
            sampled = SampledSet(indices, 9)
            base = class_wise_reason(tc.tensor(data), sampled, module).data
            m = rng.integers(0, 3)
            outside = np.setdiff1d(np.arange(9), indices[m])
            if outside.size == 0:
                continue
            j = outside[rng.integers(0, outside.size)]
            perturbed = data.copy()
            perturbed[:, j // 3, j % 3] += rng.normal(1.0, 3)
            after = class_wise_reason(tc.tensor(perturbed), sampled, module).data
        assert np.max(np.abs(after[m] - base[m])) < 1e-12


def test_zero_input_fixpoint():
    module = _module(3, 4)
    x = tc.zeros((4, 3, 3))
    refined = module.forward(x, SampledSet([np.arange(3), np.arange(3, 9), np.array([0, 8])], 9))
    assert np.all(refined.per_class.data == 0)
    assert np.all(refined.aggregated.data == 0)


def test_pixel_permutation_consistency():
    rng = Rng(7)
    module = _module(2, 3, seed=7)
    with tc.float64_mode():
        for _, p in module.params.items():
            p.data = p.data.astype(np.float64)
        x = rng.normal(1.0, (3, 12))
        indices = [rng.sample_without_replacement(np.arange(12), 5), rng.sample_without_replacement(np.arange(12), 7)]
        base = class_wise_reason(tc.tensor(x.reshape(3, 3, 4)), SampledSet(indices, 12), module).data
        perm = rng.permutation(12)
        inverse = np.argsort(perm)
        permuted = [np.sort(inverse[s]) for s in indices]
        moved = class_wise_reason(tc.tensor(x[:, perm].reshape(3, 3, 4)), SampledSet(permuted, 12), module).data
    np.testing.assert_allclose(moved, base[:, :, perm], atol=1e-10)


# ---- 聚合与融合 ----
def test_aggregation_zero_kernel():
    module = _module(2, 3)
    _set(module, "cdgc.aggregation", np.zeros((3, 6, 1, 1)))
    out = aggregate_classes(tc.tensor(Rng(0).normal(1.0, (2, 3, 4))), module, 2, 2)
    assert np.all(out.data == 0)


def test_aggregation_matches_conv_oracle():
    module = _module(2, 3)
    per_class = Rng(1).normal(1.0, (2, 3, 6))
    out = aggregate_classes(tc.tensor(per_class), module, 2, 3).data
    kernel = module.aggregation_kernel.data[:, :, 0, 0]
    expected = np.einsum("ok,khw->ohw", kernel, per_class.reshape(6, 2, 3))
    np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-5)


def test_fuse_sum_identity():
    module = _module(2, 3, "sum")
    _set(module, "cdgc.fusion", np.eye(3).reshape(3, 3, 1, 1))
    original = tc.tensor(Rng(2).normal(1.0, (3, 2, 2)))
    out = fuse(original, tc.zeros((3, 2, 2)), module)
    np.testing.assert_allclose(out.data, original.data, rtol=1e-6)


def test_fuse_concat_projection():
    module = _module(2, 3, "concat")
    projection = np.zeros((3, 6))
    projection[:, :3] = np.eye(3)
    _set(module, "cdgc.fusion", projection.reshape(3, 6, 1, 1))
    rng = Rng(3)
    original, refined = tc.tensor(rng.normal(1.0, (3, 2, 2))), tc.tensor(rng.normal(1.0, (3, 2, 2)))
    np.testing.assert_allclose(fuse(original, refined, module).data, original.data, rtol=1e-6)


def test_fuse_matches_composition_in_both_modes():
    rng = Rng(4)
    original, refined = rng.normal(1.0, (3, 2, 2)), rng.normal(1.0, (3, 2, 2))
    for fusion in ("concat", "sum"):
        module = _module(2, 3, fusion)
        kernel = module.fusion_kernel.data[:, :, 0, 0]
        combined = np.concatenate([original, refined]) if fusion == "concat" else original + refined
        expected = np.einsum("ok,khw->ohw", kernel, combined)
        out = fuse(tc.tensor(original), tc.tensor(refined), module).data
        np.testing.assert_allclose(out, expected, rtol=1e-5, atol=1e-5)


def test_cdgc_forward_grad_check():
    rng = Rng(8)
    with tc.float64_mode():
        module = _module(2, 3, "concat", seed=8)
        x = tc.tensor(rng.normal(0.5, (3, 2, 3)))
        sampled = SampledSet([np.array([0, 1, 2, 5]), np.array([3, 4])], 6)
        params = [p for _, p in module.params.items()]
        err = tc.grad_check(lambda x_, *_: tc.sum(module.forward(x_, sampled).fused), [x] + params)
    assert err < 1e-4


def test_forward_plain_shapes():
    module = _module(2, 3)
    refined = module.forward_plain(tc.tensor(Rng(9).normal(1.0, (3, 2, 2))))
    assert refined.per_class is None
    assert refined.fused.shape == (3, 2, 2)
