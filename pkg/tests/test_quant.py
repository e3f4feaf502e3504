from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from danlab.bars import BarsConfig, gen_bars, toy_network
from danlab.dan import Architecture, ConvSpec, DanNetwork
from danlab.quant import (
    SWEEP_FIELDS,
    QuantSpec,
    accuracy_vs_bits,
    dequantize,
    error_bound,
    param_bits,
    quantize_indices,
    quantize_linear,
    quantize_model,
)
from danlab.tensor import Tensor
from danlab.train import evaluate

# float round-off when snapping exactly-halfway values; a few ulps of the range
ULP_SLACK = 8


def nearest_level_oracle(x, bits):
    """Exact rational search over every grid level; ties pick the lower level."""
    vals = [Fraction(float(v)) for v in x]
    lo, hi = min(vals), max(vals)
    steps = 2 ** bits - 1
    levels = [lo + (hi - lo) * Fraction(i, steps) for i in range(steps + 1)]
    out = []
    for v in vals:
        dists = [abs(v - L) for L in levels]
        out.append(dists.index(min(dists)))
    return np.array(out)


def test_bits32_identity(rng):
    x = rng.normal(size=(4, 5))
    assert np.array_equal(quantize_linear(x, 32), x)
    t = Tensor(x)
    q = quantize_linear(t, 32)
    assert isinstance(q, Tensor) and np.array_equal(q.data, x)


@pytest.mark.parametrize("bits", [1, 2, 4, 8, 16])
def test_endpoints_unchanged(bits):
    assert quantize_linear(np.array([0.0, 1.0]), bits).tolist() == [0.0, 1.0]


def test_constant_tensor():
    x = np.full(5, 2.5)
    assert np.array_equal(quantize_linear(x, 4), x)


def test_linspace_two_bits():
    x = np.linspace(0, 1, 9)
    idx, lo, hi = quantize_indices(x, 2)
    assert np.array_equal(idx, nearest_level_oracle(x, 2))
    q = quantize_linear(x, 2)
    assert np.max(np.abs(q - x)) <= 1 / 6 + 1e-15
    assert set(np.round(q * 3, 12)) <= {0.0, 1.0, 2.0, 3.0}


def test_ties_go_down():
    # 0.5 sits exactly between levels 0 and 1 of a one-bit grid over [0, 1]
    assert quantize_linear(np.array([0.0, 0.5, 1.0]), 1).tolist() == [0.0, 0.0, 1.0]


@settings(max_examples=150, deadline=None)
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-1e3, 1e3, allow_nan=False, width=64)),
       st.sampled_from([1, 2, 3, 4, 6, 8]))
def test_indices_match_oracle(x, bits):
    if x.max() == x.min():
        return
    idx, lo, hi = quantize_indices(x, bits)
    oracle = nearest_level_oracle(x, bits)
    # a disagreement is only allowed where the value is a float hair from an exact tie
    steps = 2 ** bits - 1
    for i in np.flatnonzero(idx != oracle):
        v = Fraction(float(x[i]))
        lvl = lambda j: Fraction(lo) + (Fraction(hi) - Fraction(lo)) * Fraction(int(j), steps)
        gap = abs(abs(v - lvl(idx[i])) - abs(v - lvl(oracle[i])))
        assert abs(int(idx[i]) - int(oracle[i])) == 1
        assert gap <= Fraction(hi - lo) * Fraction(1, 10**9)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 60), elements=st.floats(-1e4, 1e4, allow_nan=False, width=64)),
       st.sampled_from([4, 6, 8, 16, 32]))
def test_error_bound_property(x, bits):
    q = quantize_linear(x, bits)
    rng_ = float(x.max()) - float(x.min())
    slack = ULP_SLACK * np.spacing(max(abs(float(x.max())), abs(float(x.min())), 1e-300))
    assert np.all(np.abs(q - x) <= error_bound(x, bits) + slack)
    assert q.min() >= x.min() and q.max() <= x.max()
    if bits == 32:
        assert rng_ >= 0 and np.array_equal(q, x)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(-100, 100, allow_nan=False, width=64)),
       st.sampled_from([4, 6, 8, 16]))
def test_idempotent(x, bits):
    q = quantize_linear(x, bits)
    assert np.array_equal(quantize_linear(q, bits), q)


def test_dequantize_top_level_exact():
    idx = np.array([0, 15])
    assert dequantize(idx, -0.3, 0.7, 4).tolist() == [-0.3, 0.7]


def test_spec_validation():
    with pytest.raises(ValueError):
        QuantSpec(bits=5)
    with pytest.raises(ValueError):
        QuantSpec(bits=8, scope="per-channel")


# ---- models

@pytest.fixture(scope="module")
def bn_net():
    rng = np.random.default_rng(2)
    arch = Architecture((3, 12, 12), [ConvSpec(4, 3, batchnorm=True), ConvSpec(6, 3, pool=0, batchnorm=True)], [8], 5)
    net = DanNetwork.random(arch, rng)
    for bank in net.bn:
        bank.params[0].gamma.data[:] = rng.uniform(0.5, 2.0, size=bank.channels)
        bank.params[0].running_var[:] = rng.uniform(0.5, 2.0, size=bank.channels)
    net.freeze_base()
    net.add_task("lin", mode="dan-linear", init="random", rng=rng)
    net.add_task("diag", mode="dan-diagonal", init="random", rng=rng)
    return net


def test_quantize_model_copy_semantics(bn_net):
    snap = bn_net.snapshot()
    q = quantize_model(bn_net, QuantSpec(4))
    assert all(np.array_equal(v, bn_net.named_tensors()[k]) for k, v in snap.items())
    assert q is not bn_net


def test_quantize_model_bits32_bit_identical(bn_net, rng):
    x = rng.normal(size=(3, 3, 12, 12))
    q = quantize_model(bn_net, QuantSpec(32))
    for t in range(bn_net.n_tasks):
        assert np.array_equal(q.task_forward(x, t).data, bn_net.task_forward(x, t).data)


def test_quantize_model_excludes_bn(bn_net):
    q = quantize_model(bn_net, QuantSpec(4)).named_tensors()
    orig = bn_net.named_tensors()
    diag = {"task2.conv0.W", "task2.conv1.W"}
    for k in orig:
        if k.startswith("bn"):
            assert np.array_equal(q[k], orig[k]), k
        else:
            vals = np.diag(q[k]) if k in diag else q[k]
            assert len(np.unique(vals)) <= 16, k
    q_all = quantize_model(bn_net, QuantSpec(4, exclude_bn=False)).named_tensors()
    assert not np.array_equal(q_all["bn0.task0.gamma"], orig["bn0.task0.gamma"])
    assert np.array_equal(q_all["bn0.task0.running_var"], orig["bn0.task0.running_var"])


def test_diagonal_controller_keeps_zeros(bn_net):
    q = quantize_model(bn_net, QuantSpec(4)).named_tensors()
    W = q["task2.conv1.W"]
    assert np.array_equal(W, np.diag(np.diag(W)))


def test_per_tensor_bound_8bit(bn_net):
    orig = bn_net.named_tensors()
    q = quantize_model(bn_net, QuantSpec(8)).named_tensors()
    for k, x in orig.items():
        if k.startswith("bn"):
            continue
        vals = np.diag(x) if k == "task2.conv0.W" or k == "task2.conv1.W" else x
        qv = np.diag(q[k]) if vals is not x else q[k]
        slack = ULP_SLACK * np.spacing(np.abs(vals).max())
        assert np.max(np.abs(qv - vals)) <= (vals.max() - vals.min()) / (2 * 255) + slack, k


def test_param_bits_accounting(bn_net):
    n_bn = sum(2 * b.channels * len(b.params) for b in bn_net.bn)
    diag = sum(tl.controller.c_out for tl in bn_net.tasks[2].layers)
    n_rest = sum(v.size for k, v in bn_net.named_tensors().items()
                 if not k.startswith("bn") and k not in ("task2.conv0.W", "task2.conv1.W"))
    for bits in (4, 8, 32):
        assert param_bits(bn_net, QuantSpec(bits)) == (n_rest + diag) * bits + n_bn * 32


def test_accuracy_vs_bits_rows():
    rng = np.random.default_rng(0)
    net = DanNetwork.random(toy_network(), rng)
    data = gen_bars(BarsConfig("red-horizontal", 40, 0.5, 0)).test
    rows = accuracy_vs_bits(net, data, [32])
    assert rows == [{"bits": 32, "accuracy": evaluate(net, data, 0), "total_param_bits": rows[0]["total_param_bits"]}]
    rows = accuracy_vs_bits(net, data, [16, 4, 8])
    assert [r["bits"] for r in rows] == [16, 4, 8]
    assert all(set(r) == set(SWEEP_FIELDS) for r in rows)
