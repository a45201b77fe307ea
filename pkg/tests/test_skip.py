import numpy as np
import pytest

from oracles import randomize
from scunetpp.skip import (
    DEPTH,
    FuseNode,
    build_grid,
    canonical_shape,
    fuse_node,
    node_inputs,
    node_schedule,
)
from scunetpp.tensor import DimensionError, Tensor

IMG, C = 64, 24


def _level(i, rng, b=1):
    return Tensor(rng.normal(size=(b, *canonical_shape(i, IMG, C))))


def _setup(dense, seed=0, b=1):
    rng = np.random.default_rng(seed)
    fuse = {}
    for i, j in node_schedule(dense):
        node = FuseNode(C * 2**i, len(node_inputs(i, j, dense)[0]), rng)
        randomize(node, rng)
        fuse[(i, j)] = node
    feats = [_level(i, rng, b) for i in range(DEPTH)]
    return feats, _level(DEPTH, rng, b), fuse


def test_fuse_node_shapes():
    rng = np.random.default_rng(0)
    out = fuse_node([_level(0, rng)], _level(1, rng), FuseNode(24, 1, rng))
    assert out.shape == (1, 16, 16, 24)
    node = FuseNode(48, 2, rng)
    assert node.conv.weight.shape == (48, 144, 3, 3)
    assert node([_level(1, rng), _level(1, rng)], _level(2, rng)).shape == (1, 8, 8, 48)


def test_fuse_node_shape_errors():
    rng = np.random.default_rng(0)
    node = FuseNode(24, 1, rng)
    with pytest.raises(DimensionError):
        node([_level(0, rng)], _level(0, rng))
    with pytest.raises(DimensionError):
        node([_level(0, rng), _level(0, rng)], _level(1, rng))
    with pytest.raises(DimensionError):
        node([], _level(1, rng))


def test_fuse_node_zero_conv_gives_zero():
    rng = np.random.default_rng(0)
    node = FuseNode(24, 1, rng)
    node.conv.weight.data[:] = 0.0
    out = node([_level(0, rng)], _level(1, rng)).data
    assert not out.any()


def test_fuse_node_concat_order():
    # only the upsampled input feeds the conv: zeroing the same-level slice must not matter
    rng = np.random.default_rng(1)
    node = FuseNode(4, 1, rng)
    node.conv.weight.data[:, :4] = 0.0
    below = Tensor(rng.normal(size=(2, 2, 2, 8)))
    a = node([Tensor(rng.normal(size=(2, 4, 4, 4)))], below).data
    b = node([Tensor(rng.normal(size=(2, 4, 4, 4)))], below).data
    assert np.array_equal(a, b)


def test_dense_grid_has_ten_nodes_with_canonical_shapes():
    feats, bott, fuse = _setup(True)
    grid = build_grid(feats, bott, fuse, IMG, C, dense=True)
    assert len(grid) == 10
    expected = {0: (16, 16, 24), 1: (8, 8, 48), 2: (4, 4, 96), 3: (2, 2, 192)}
    counts = {0: 4, 1: 3, 2: 2, 3: 1}
    for (i, j), t in grid.nodes.items():
        assert i + j <= DEPTH
        assert t.shape[1:] == expected[i]
    for i, n in counts.items():
        assert sum(1 for k in grid.nodes if k[0] == i) == n


def test_plain_grid_has_seven_nodes():
    feats, bott, fuse = _setup(False)
    grid = build_grid(feats, bott, fuse, IMG, C, dense=False)
    assert len(grid) == 7
    assert sorted(k for k in grid.nodes if k[1] == 1) == [(0, 1), (1, 1), (2, 1)]
    assert node_inputs(0, 1, False) == ([(0, 0)], (1, 1))
    assert node_inputs(2, 1, False) == ([(2, 0)], (3, 0))


def test_dense_node_inputs():
    assert node_inputs(0, 3, True) == ([(0, 0), (0, 1), (0, 2)], (1, 2))
    assert node_inputs(1, 2, True) == ([(1, 0), (1, 1)], (2, 1))


@pytest.mark.parametrize("dense", [True, False])
def test_column_and_diagonal_orders_agree(dense):
    feats, bott, fuse = _setup(dense, seed=3, b=2)
    a = build_grid(feats, bott, fuse, IMG, C, dense, order="column")
    b = build_grid(feats, bott, fuse, IMG, C, dense, order="diagonal")
    assert node_schedule(dense, "column") != node_schedule(dense, "diagonal") or not dense
    for k in a.nodes:
        assert np.array_equal(a[k].data, b[k].data)


def test_long_connection_reaches_last_column():
    feats, bott, fuse = _setup(True, seed=4)
    for node in fuse.values():
        node.eval()
    base = build_grid(feats, bott, fuse, IMG, C, True)
    moved = [Tensor(feats[0].data + np.random.default_rng(5).normal(size=feats[0].shape)), *feats[1:]]
    pert = build_grid(moved, bott, fuse, IMG, C, True)
    assert not np.allclose(base[(0, 3)].data, pert[(0, 3)].data)
    # the deeper nodes never see level 0
    assert np.array_equal(base[(1, 2)].data, pert[(1, 2)].data)


def test_grid_rejects_wrong_shapes():
    feats, bott, fuse = _setup(True)
    with pytest.raises(DimensionError):
        build_grid([feats[1], feats[1], feats[2]], bott, fuse, IMG, C)
    with pytest.raises(DimensionError):
        build_grid(feats[:2], bott, fuse, IMG, C)


def test_decoder_hook_runs_on_terminal_nodes():
    feats, bott, fuse = _setup(True)
    seen = []

    def hook(level):
        def run(x):
            seen.append(level)
            return x * 0.0
        return run

    grid = build_grid(feats, bott, fuse, IMG, C, True, decoder={i: hook(i) for i in range(DEPTH)})
    assert seen == [2, 1, 0]
    assert not grid.output(0).data.any()
