"""Acceptance criteria, one test (or group of tests) per criterion.

Each criterion prints a PASS/FAIL line in the terminal summary. Runtime
limits are asserted inside the tests.
"""
import itertools
import time

import numpy as np
import pytest

from resquant import (
    Activation,
    BatchNorm,
    Conv2D,
    Dense,
    Network,
    QuantConfig,
    RunConfig,
    build_ensemble,
    candidate_groupings,
    ensemble_bound,
    expand,
    expand_network,
    expanded_network,
    fold_batch_norm,
    fuse_kernels,
    load_model,
    logits_max_error,
    network_bound,
    run_pipeline,
    save_model,
    select_grouping,
)
from resquant.bounds import layer_spectral_norms, weight_bound
from resquant.cli import main
from resquant.ensemble import logit_norm_from_inputs
from resquant.headcount import FLOAT_MUL_BOPS, bops_expanded, bops_original
from resquant.model import apply_layer
from conftest import random_mlp, unit_inputs
from test_ensemble import positive_net
from test_headcount import count_conv_multiplies


@pytest.mark.criterion(1, "exponential convergence of the residual expansion")
def test_exponential_convergence():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    violations = []
    for trial in range(50):
        rows, cols = rng.integers(1, 65, size=2)
        W = rng.standard_normal((rows, cols)) * rng.uniform(0.01, 10)
        for bits in (2, 3, 4, 8):
            qmax = 2 ** (bits - 1) - 1
            exp = expand(W, QuantConfig(bits), 6)
            errors = []
            for K in range(1, 7):
                err = np.abs(W - exp.partial_sum(K))
                if np.any(err.max(axis=1) > weight_bound(exp, K)):
                    violations.append(("bound", trial, bits, K))
                errors.append(err.max())
            if bits >= 3:
                for K in range(1, 6):
                    if errors[K] > (1 / qmax + 1e-12) * errors[K - 1]:
                        violations.append(("ratio", trial, bits, K))
    assert violations == []
    assert time.perf_counter() - start < 10


def _soundness_networks():
    rng = np.random.default_rng(77)
    nets = []
    for i in range(30):
        depth = 2 + i % 3
        widths = [int(w) for w in rng.integers(4, 65, size=depth + 1)]
        net = random_mlp(rng, widths)
        if i % 5 == 0:
            # give some networks a batch norm to fold first
            n = widths[1]
            bn = BatchNorm(rng.uniform(0.5, 1.5, n), rng.normal(0, 0.1, n), rng.normal(0, 0.1, n),
                           rng.uniform(0.5, 1.5, n))
            net = net.with_layers(net.layers[:1] + (bn,) + net.layers[1:])
        nets.append(fold_batch_norm(net))
    return nets


@pytest.mark.criterion(2, "bound soundness on random folded ReLU MLPs")
def test_bound_soundness():
    start = time.perf_counter()
    rng = np.random.default_rng(78)
    checked, violations = 0, []
    for n, net in enumerate(_soundness_networks()):
        xs = unit_inputs(rng, 500, net.input_shape)
        ref = net.forward_batch(xs)
        norms = layer_spectral_norms(net)
        for bits, K, gamma in itertools.product((2, 3, 4, 8), range(1, 6), (0.25, 0.5, 1.0)):
            if K == 1 and gamma < 1:
                continue  # order 1 is never masked
            exp = expand_network(net, QuantConfig(bits), K, gamma)
            measured = float(np.max(np.abs(ref - expanded_network(net, exp).forward_batch(xs))))
            kinds = ("dense", "sparse") if K >= 2 else ("dense",)
            for kind in kinds:
                U = network_bound(net, exp, kind, spectral_norms=norms).U
                checked += 1
                if measured > U:
                    violations.append((n, bits, K, gamma, kind, measured, U))
    print(f"{checked} (network, config, kind) cases checked")
    assert violations == []
    assert time.perf_counter() - start < 60


@pytest.mark.criterion(3, "bound trend at desk scale (b=8: K=4 vs K=1, sparse K=2 vs K=1)")
def test_table_trend():
    net = random_mlp(np.random.default_rng(5), [32, 64, 64, 10])
    U = lambda **kw: run_pipeline(net, RunConfig(bits=8, **kw)).report["bounds"]
    u1 = U(order=1)["dense"]["U"]
    u4 = U(order=4)["dense"]["U"]
    sparse = U(order=2, sparsity=0.5)["sparse"]["U"]
    print(f"U(K=1)={u1:.3e} U(K=4)={u4:.3e} U(K=2, 50%)={sparse:.3e}")
    assert u4 * 1e4 <= u1
    assert sparse <= u1


@pytest.mark.criterion(4, "ensemble exactness oracles and bound")
def test_ensemble_identity_exact():
    start = time.perf_counter()
    rng = np.random.default_rng(11)
    for sizes in ([6, 4], [6, 12, 4]):
        net = random_mlp(rng, sizes, act="identity")
        exp = expand_network(net, QuantConfig(3), 4)
        expanded = expanded_network(net, exp)
        xs = rng.standard_normal((200, 6))
        for grouping in candidate_groupings(4):
            assert logits_max_error(expanded, build_ensemble(net, exp, grouping), xs) <= 1e-9
    assert time.perf_counter() - start < 30


@pytest.mark.criterion(4, "ensemble exactness oracles and bound")
def test_ensemble_positive_exact():
    rng = np.random.default_rng(12)
    for _ in range(5):
        net = positive_net(rng)
        exp = expand_network(net, QuantConfig(4), 2)
        xs = rng.uniform(0, 1, (200, 5))
        ens = build_ensemble(net, exp, [1, 1])
        ref = expanded_network(net, exp).forward_batch(xs)
        # every pre-activation is non-negative, so the split is exact up to float summation order
        assert np.max(np.abs(ens.forward_batch(xs) - ref)) <= 1e-12 * np.max(np.abs(ref))


@pytest.mark.criterion(4, "ensemble exactness oracles and bound")
def test_ensemble_bound_random_relu():
    start = time.perf_counter()
    violations = []
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        depth = 2 + seed % 2
        widths = [int(w) for w in rng.integers(4, 33, size=depth + 1)]
        net = random_mlp(rng, widths)
        bits = (2, 3, 4, 8)[seed % 4]
        exp = expand_network(net, QuantConfig(bits), 4)
        expanded = expanded_network(net, exp)
        xs = unit_inputs(rng, 1000, net.input_shape)
        for grouping in ([2, 2], [3, 1], [1, 1, 2]):
            gap = logits_max_error(expanded, build_ensemble(net, exp, grouping), xs)
            U = ensemble_bound(net, exp, grouping).U
            if gap > U:
                violations.append((seed, grouping, gap, U))
    assert violations == []
    assert time.perf_counter() - start < 30


@pytest.mark.criterion(5, "fused kernel equals per-order evaluation")
def test_fused_kernels():
    rng = np.random.default_rng(13)
    for i in range(20):
        bits, K, gamma = int(rng.integers(2, 9)), int(rng.integers(1, 5)), float(rng.choice([0.25, 0.5, 1.0]))
        if i % 2:
            n_out = int(rng.integers(1, 20))
            layer = Dense(rng.standard_normal((n_out, 7)), rng.standard_normal(n_out))
            xs = rng.standard_normal((10, 7))
        else:
            n_out = int(rng.integers(1, 6))
            stride, padding = int(rng.integers(1, 3)), str(rng.choice(["same", "valid"]))
            layer = Conv2D(rng.standard_normal((n_out, 3, 3, 3)), rng.standard_normal(n_out), stride, padding)
            xs = rng.standard_normal((4, 3, 8, 8))
        exp = expand(layer.weight, QuantConfig(bits), K, gamma)
        fused = fuse_kernels(exp, layer)
        per_order = sum(apply_layer(type(layer)(**{**_fields(layer), "weight": w, "bias": None}), xs)
                        for w in exp.weights())
        bias = apply_layer(type(layer)(**{**_fields(layer), "weight": np.zeros_like(layer.weight)}), xs)
        assert np.max(np.abs(fused.forward_batch(xs) - (per_order + bias))) <= 1e-9


def _fields(layer):
    if isinstance(layer, Conv2D):
        return dict(weight=layer.weight, bias=layer.bias, stride=layer.stride, padding=layer.padding)
    return dict(weight=layer.weight, bias=layer.bias)


@pytest.mark.criterion(6, "BOPs brute-force oracle and hand-computed examples")
def test_bops_oracle():
    cases = 0
    for D, d, s, n_i, n_o in itertools.product(range(1, 9), (1, 2, 3), (1, 2), range(1, 5), range(1, 5)):
        if D % s:
            continue  # the closed form assumes the stride divides the map size
        assert count_conv_multiplies(n_i, n_o, D, d, s) * FLOAT_MUL_BOPS == bops_original(D, d, s, n_i, n_o)
        cases += 1
    print(f"{cases} conv configurations enumerated")
    assert bops_original(1, 1, 1, 1, 1) == 160
    assert bops_expanded(1, 1, 1, 1, 1, b=4, K=1, gamma_per_order=[1]).total == 328
    assert bops_expanded(1, 1, 1, 1, 1, b=4, K=2, gamma_per_order=[1, 0.5]).total == 332


@pytest.mark.criterion(7, "byte-identical reports and bit-identical containers")
def test_determinism(tmp_path):
    rng = np.random.default_rng(14)
    net = random_mlp(rng, [8, 16, 4])
    model = save_model(net, tmp_path / "model")
    np.save(tmp_path / "calib.npy", unit_inputs(rng, 32, (8,)))
    args = ["quantize", str(model), "--bits", "4", "--order", "4", "--sparsity", "0.5", "--grouping", "auto",
            "--calib", str(tmp_path / "calib.npy"), "--seed", "3"]
    assert main(args + ["--report", str(tmp_path / "a.json")]) == 0
    assert main(args + ["--report", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    first = load_model(model)
    save_model(first, tmp_path / "again")
    second = load_model(tmp_path / "again")
    for a, b in zip(first.layers, second.layers):
        for field in ("weight", "bias"):
            x, y = getattr(a, field, None), getattr(b, field, None)
            assert (x is None and y is None) or x.tobytes() == y.tobytes()
    for name in ("layer0.weight.bin", "layer2.bias.bin", "manifest.json"):
        assert (model / name).read_bytes() == (tmp_path / "again" / name).read_bytes()


@pytest.mark.criterion(8, "grouping selection against the logit norm")
def test_grouping_selection():
    rng = np.random.default_rng(15)
    net = random_mlp(rng, [16, 32, 10])
    exp = expand_network(net, QuantConfig(8), 4)
    norm = logit_norm_from_inputs(expanded_network(net, exp), unit_inputs(rng, 500, (16,)))
    candidates = [[4], [3, 1], [2, 2]]
    assert select_grouping(net, exp, candidates, norm, threshold_ratio=0).sizes == (4,)
    assert ensemble_bound(net, exp, [2, 2]).U < 0.1 * norm
    assert select_grouping(net, exp, candidates, norm, threshold_ratio=0.1).sizes == (2, 2)
