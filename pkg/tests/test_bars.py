import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from danlab.bars import (
    SCENARIOS,
    BarsConfig,
    bar_length,
    canonical_variant,
    corner_filter_v,
    export_bars,
    gen_bars,
    load_bars,
    make_bar_filter,
    scenario_setup,
    toy_network,
)
from danlab.dan import DanNetwork, init_controller
from danlab.tensor import FilterBank, Tensor, conv2d


@pytest.fixture(scope="module")
def data():
    return gen_bars(BarsConfig("red-horizontal", 1000, 0.75, seed=7))


def test_split_sizes(data):
    assert len(data.train) == 750 and len(data.test) == 250


def test_images_sum_to_bar_length(data):
    for part in (data.train, data.test):
        sums = part.x.sum(axis=(1, 2, 3))
        assert np.array_equal(sums, [bar_length(int(y)) for y in part.y])


def test_label_balance(data):
    y = np.concatenate([data.train.y, data.test.y])
    counts = np.bincount(y, minlength=5)
    assert counts.tolist() == [200] * 5


@settings(max_examples=25, deadline=None)
@given(st.integers(5, 200), st.integers(0, 10_000), st.sampled_from(["red-horizontal", "red-vertical", "green-horizontal"]))
def test_balance_and_structure_property(n, seed, variant):
    d = gen_bars(BarsConfig(variant, n, 0.6, seed))
    y = np.concatenate([d.train.y, d.test.y])
    counts = np.bincount(y, minlength=5)
    assert counts.max() - counts.min() <= 1
    x = np.concatenate([d.train.x, d.test.x])
    ch = 1 if variant.startswith("green") else 0
    assert set(np.unique(x)) <= {0.0, 1.0}
    others = [c for c in range(3) if c != ch]
    assert not x[:, others].any()
    for img, lab in zip(x, y):
        rows, cols = np.nonzero(img[ch])
        length = bar_length(int(lab))
        if variant.endswith("horizontal"):
            assert len(set(rows)) == 1 and cols.max() - cols.min() + 1 == length == len(cols)
        else:
            assert len(set(cols)) == 1 and rows.max() - rows.min() + 1 == length == len(rows)


def test_determinism():
    a = gen_bars(BarsConfig("red-vertical", 50, 0.5, 3))
    b = gen_bars(BarsConfig("red-vertical", 50, 0.5, 3))
    assert np.array_equal(a.train.x, b.train.x) and np.array_equal(a.test.y, b.test.y)


def test_bars_reach_every_allowed_row():
    d = gen_bars(BarsConfig("red-horizontal", 2000, 0.5, 0))
    rows = {int(np.nonzero(img[0])[0][0]) for img in d.train.x}
    assert rows == set(range(2, 26))


def test_config_validation():
    for kw in ({"n_examples": 4}, {"split": 0.0}, {"split": 1.0}, {"variant": "blue-diagonal"}, {"margin": 6}):
        with pytest.raises(ValueError):
            BarsConfig(**kw)
    assert BarsConfig("transposed").variant == "red-vertical"


def test_bar_filter_construction():
    f = make_bar_filter("horizontal", "green")
    nz = np.argwhere(f)
    assert len(nz) == 5 and set(nz[:, 0]) == {1} and set(nz[:, 1]) == {2}
    v = make_bar_filter("vertical", "green")
    assert np.array_equal(v[1], f[1].T)
    with pytest.raises(ValueError):
        make_bar_filter("diagonal")


def test_bar_filter_correlation():
    f = make_bar_filter("horizontal", "green")
    seg = np.zeros((3, 5, 5))
    seg[1, 2, :] = 1.0
    assert float((f * seg).sum()) == 5.0
    red = np.zeros((3, 5, 5))
    red[0, 2, :] = 1.0
    assert float((f * red).sum()) == 0.0


def test_corner_filter():
    v = corner_filter_v()
    patch = np.zeros((3, 3))
    patch[[0, 0, 2, 2], [0, 2, 0, 2]] = 1.0
    assert float((v * patch).sum()) == 4.0
    assert float((v * np.zeros((3, 3))).sum()) == 0.0
    assert np.array_equal(np.rot90(v), v)


def test_corner_filter_efficiency():
    v = corner_filter_v()
    corner = np.zeros((3, 3))
    corner[[0, 0, 2, 2], [0, 2, 0, 2]] = 1.0
    # among all 512 binary patches v responds most strongly to the corner patch alone
    scores = {}
    for bits in itertools.product([0.0, 1.0], repeat=9):
        p = np.array(bits).reshape(3, 3)
        scores[bits] = float((v * p).sum())
    best = max(scores.values())
    assert [k for k, s in scores.items() if s == best] == [tuple(corner.ravel())]
    # nine delta filters span every 3x3 patch, so a controller can still express v exactly
    deltas = FilterBank(Tensor(np.eye(9).reshape(9, 1, 3, 3)), Tensor(np.zeros(9)))
    target = np.zeros((9, 1, 3, 3))
    target[0, 0] = v
    c = init_controller("linear_approx", deltas, target=FilterBank(Tensor(target), Tensor(np.zeros(9))))
    assert np.allclose(c.adapted(deltas).data[0, 0], v, atol=1e-12)


def test_toy_shapes():
    arch = toy_network()
    assert arch.conv_dims() == [(1, 3, 5), (20, 1, 5)]
    h = 28
    for _ in range(2):
        h = (h - 5 + 1) // 2
    assert h == 4 and 20 * h * h == 320 == arch.feature_dim()
    assert arch.head_sizes() == [320, 50, 5]
    net = DanNetwork.random(arch, np.random.default_rng(0))
    assert net.task_forward(np.zeros((2, 3, 28, 28)), 0).shape == (2, 5)
    assert net.tasks[0].head.num_params() == 16305


def test_scenarios():
    assert len(SCENARIOS) == 7
    o = scenario_setup("original")
    assert o.variant == "red-horizontal" and o.first_init == "bar" and not o.first_trainable
    assert o.epochs == 50 and o.trials == 20 and o.optimizer == "adam"
    cs = scenario_setup("channel switch + clean start")
    assert cs.first_init == "random" and cs.first_trainable and cs.controller_mask == (False, False)
    n = scenario_setup("channel-switch+noise")
    assert n.first_init == "bar+noise" and n.noise_sigma == 0.1
    assert scenario_setup("transposed").variant == "red-vertical"
    assert scenario_setup("channel-switch").variant == "green-horizontal"
    assert scenario_setup("original", epochs=3).epochs == 3
    with pytest.raises(ValueError):
        scenario_setup("upside-down")


def test_original_filter_sees_every_bar_pixel(data):
    # a fixed matching-channel bar filter responds at every bar pixel
    w = make_bar_filter("horizontal", "red")[None]
    out = conv2d(Tensor(data.train.x[:100]), Tensor(w)).data[:, 0]
    for img, resp in zip(data.train.x[:100], out):
        r, c = np.nonzero(img[0])
        assert (resp[r - 2, c - 2] > 0).all()


def test_export_roundtrip(tmp_path):
    d = gen_bars(BarsConfig("green-horizontal", 40, 0.75, 5))
    p = export_bars(d, tmp_path / "b.bin")
    raw = p.read_bytes()
    assert raw[:4] == b"BARS"
    assert len(raw) == 4 + 20 + 40 * (1 + 4 * 3 * 28 * 28)
    back = load_bars(p)
    assert back.config == d.config
    assert np.array_equal(back.train.x, d.train.x) and np.array_equal(back.test.y, d.test.y)
    side = (tmp_path / "b.bin.txt").read_text()
    assert "variant=green-horizontal" in side and "n_train=30" in side


def test_load_rejects_corruption(tmp_path):
    d = gen_bars(BarsConfig("red-horizontal", 10, 0.5, 0))
    p = export_bars(d, tmp_path / "b.bin")
    raw = p.read_bytes()
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_bars(p)
    p.write_bytes(raw[:-3])
    with pytest.raises(ValueError, match="truncated"):
        load_bars(p)


@pytest.mark.parametrize("alias,name", [("original", "red-horizontal"), ("transposed", "red-vertical"),
                                        ("channel-switch", "green-horizontal"), ("new-channel", "green-horizontal")])
def test_variant_aliases(alias, name):
    assert canonical_variant(alias) == name
    with pytest.raises(ValueError):
        canonical_variant("blue-diagonal")
