import math
from dataclasses import replace

import numpy as np
import pytest

from blockrepair.archsearch import (NUM_OPS, OperationKind, RepairConfig, SearchConfig, alternate_optimize, choose_ops,
                                    discretize, finetune, install_block, mixed_edge_forward, one_hot_superblock,
                                    relax_block, repair, superblock_forward, supernet_forward)
from blockrepair.data import Dataset, gen_synthetic
from blockrepair.engine import Tensor
from blockrepair.errors import ConfigError, DegenerateArchitecture, DimensionError, UnsupportedError
from blockrepair.network import Network, ParamStore, build_mini_resnet, run_block

from conftest import fd_check, random_superblock


@pytest.fixture
def net8():
    return build_mini_resnet(4, 3, (3, 8, 8), seed=3)


def _x(net, index, n=3, seed=0):
    from blockrepair.archsearch import block_input
    imgs = np.random.default_rng(seed).random((n,) + net.spec.input_shape).astype(np.float32)
    return Tensor(block_input(net, index, imgs))


def _with_alphas(sb, rows):
    sb = sb.copy()
    sb.alphas = Tensor(np.asarray(rows, np.float32))
    return sb


# relaxation -------------------------------------------------------------------------

def test_k2_has_three_edges(net8):
    sb = relax_block(net8, 2)
    assert sb.num_nodes == 3 and sb.edge_pairs == [(0, 1), (0, 2), (1, 2)]
    assert all(len(e.candidates) == NUM_OPS for e in sb.edges)
    assert sb.alphas.shape == (3, NUM_OPS)


def test_initial_alphas(net8):
    sb = relax_block(net8, 3)
    a = sb.alphas.data
    assert a[0, OperationKind.SEP_CONV] == 1 and a[2, OperationKind.SEP_CONV] == 1
    assert a[1, OperationKind.NONE] == 1 and a.sum() == 3


@pytest.mark.parametrize("index", [2, 3, 4])
def test_low_temperature_recovers_original_block(net8, index):
    sb = relax_block(net8, index)
    sb.temperature = 1e-3
    x = _x(net8, index)
    got = superblock_forward(sb, x, net8).data
    ref = run_block(net8.spec.block(index), x, net8.store).data
    np.testing.assert_allclose(got, ref, atol=1e-5)
    sb.temperature = 1.0
    assert np.abs(superblock_forward(sb, x, net8).data - ref).max() > 1e-3


def test_inherited_weights_copied(net8):
    sb = relax_block(net8, 3)
    for me in (sb.edges[0], sb.edges[2]):
        cand = me.candidates[OperationKind.SEP_CONV]
        assert cand.op == "conv" and me.inherited == OperationKind.SEP_CONV
        for layer in cand.layers:
            for k in layer.keys:
                assert sb.store[k].data.tobytes() == net8.store[k].data.tobytes()
                assert sb.store[k] is not net8.store[k]
    sb.store["b3.e0_1.conv.weight"].data += 1
    assert not np.array_equal(sb.store["b3.e0_1.conv.weight"].data, net8.store["b3.e0_1.conv.weight"].data)


def test_fresh_ops_do_not_collide(net8):
    sb = relax_block(net8, 2)
    fresh = set(sb.store) - set(net8.store)
    assert fresh and len(fresh) + len(set(sb.store) & set(net8.store)) == len(sb.store)


def test_unsearchable_blocks(net8):
    for index in (1, 5):
        with pytest.raises(UnsupportedError):
            relax_block(net8, index)


def test_layer_region(net8):
    sb = relax_block(net8, 4, region=(1, 1))
    assert sb.edge_pairs == [(0, 1)] and [(e.src, e.dst) for e in sb.fixed] == [(0, 1)]
    sb.temperature = 1e-3
    x = _x(net8, 4)
    np.testing.assert_allclose(superblock_forward(sb, x, net8).data,
                               run_block(net8.spec.block(4), x, net8.store).data, atol=1e-5)


# mixed edges -------------------------------------------------------------------------

def _edge_outputs(sb, e, x):
    from blockrepair.network import run_edge
    return [np.zeros_like(x.data) if c.op == "none" else run_edge(c, x, sb.store).data for c in sb.edges[e].candidates]


def test_uniform_alphas_average(net8):
    sb = relax_block(net8, 2)
    x = _x(net8, 2)
    ys = _edge_outputs(sb, 1, x)
    got = mixed_edge_forward(x, Tensor(np.zeros(NUM_OPS, np.float32)), sb.edges[1].candidates, sb.store).data
    np.testing.assert_allclose(got, sum(ys) / 6, rtol=1e-5, atol=1e-6)


def test_hand_softmax_weights(net8):
    from blockrepair.engine import ops
    w = ops.softmax(Tensor(np.array([math.log(2), 0, 0, 0, 0, 0])), axis=-1).data
    np.testing.assert_allclose(w, [2 / 7] + [1 / 7] * 5, atol=1e-7)


@pytest.mark.parametrize("kind,expect", [(OperationKind.SKIP, "x"), (OperationKind.NONE, "zero")])
def test_one_hot_skip_and_none(net8, kind, expect):
    sb = relax_block(net8, 2)
    x = _x(net8, 2)
    w = np.zeros(NUM_OPS, np.float32)
    w[kind] = 1
    y = mixed_edge_forward(x, None, sb.edges[0].candidates, sb.store, weights=Tensor(w)).data
    np.testing.assert_array_equal(y, x.data if expect == "x" else np.zeros_like(x.data))


def test_candidate_count_mismatch(net8):
    sb = relax_block(net8, 2)
    with pytest.raises(DimensionError):
        mixed_edge_forward(_x(net8, 2), Tensor(np.zeros(4)), sb.edges[0].candidates, sb.store)


# graph semantics ------------------------------------------------------------------------

def _forced(sb, kinds, residual=None):
    out = one_hot_superblock(sb, kinds)
    if residual is not None:
        out.block = replace(out.block, residual=residual)
    return out


def test_zero_graph(net8):
    sb = relax_block(net8, 2)
    x = _x(net8, 2)
    nones = [OperationKind.NONE] * 3
    np.testing.assert_array_equal(superblock_forward(_forced(sb, nones), x, net8).data, x.data)
    assert not superblock_forward(_forced(sb, nones, residual=False), x, net8).data.any()


def test_identity_chain(net8):
    sb = relax_block(net8, 2)
    x = _x(net8, 2)
    kinds = [OperationKind.SKIP, OperationKind.NONE, OperationKind.SKIP]
    np.testing.assert_array_equal(superblock_forward(_forced(sb, kinds, residual=False), x, net8).data, x.data)


def test_node_sums_inputs(net8):
    sb = relax_block(net8, 2)
    x = _x(net8, 2)
    kinds = [OperationKind.NONE, OperationKind.SKIP, OperationKind.NONE]
    one = superblock_forward(_forced(sb, kinds, residual=False), x, net8).data
    both = superblock_forward(_forced(sb, [OperationKind.SKIP] * 3, residual=False), x, net8).data
    np.testing.assert_array_equal(one, x.data)
    np.testing.assert_allclose(both, 2 * x.data, rtol=1e-6)


# alternating optimization -------------------------------------------------------------

@pytest.fixture(scope="module")
def small_task():
    ds = gen_synthetic("shapes", 40, 3, seed=5, image_size=8)
    return ds.subset(np.arange(32)), ds.subset(np.arange(32, 40))


def _cfg(**kw):
    base = dict(epochs=2, patience=2, batch_size=16, finetune_epochs=2, finetune_patience=2, seed=0)
    base.update(kw)
    return SearchConfig(**base)


def test_frozen_alpha_lr(net8, small_task):
    sb = relax_block(net8, 2)
    before = sb.alphas.data.copy()
    alternate_optimize(net8, sb, *small_task, _cfg(alpha_lr=0.0))
    assert sb.alphas.data.tobytes() == before.tobytes()


def test_frozen_weight_lr(net8, small_task):
    sb = relax_block(net8, 2)
    before = {k: v.data.copy() for k, v in sb.store.items()}
    outside = {k: v.data.copy() for k, v in net8.store.items()}
    alternate_optimize(net8, sb, *small_task, _cfg(weight_lr=0.0))
    assert all(sb.store[k].data.tobytes() == before[k].tobytes() for k in before)
    assert all(net8.store[k].data.tobytes() == outside[k].tobytes() for k in outside)


def test_overfit_single_batch(net8):
    ds = gen_synthetic("shapes", 16, 3, seed=6, image_size=8)
    sb = relax_block(net8, 3)
    hist = alternate_optimize(net8, sb, ds, ds, _cfg(epochs=50, patience=50, batch_size=16, alpha_lr=0.01))
    assert hist.train_loss[-1] < hist.train_loss[0]
    assert hist.epochs_run >= 1 and len(sb.history) == hist.epochs_run


def test_search_deterministic(net8, small_task):
    runs = []
    for _ in range(2):
        sb = relax_block(net8, 2)
        alternate_optimize(net8, sb, *small_task, _cfg(alpha_lr=0.05))
        runs.append(sb.alphas.data.tobytes())
    assert runs[0] == runs[1]


def test_search_config_validation():
    for kw in (dict(weight_lr=-1), dict(finetune_lr=-1), dict(epochs=-1), dict(patience=0), dict(split_ratio=1.0)):
        with pytest.raises(ConfigError):
            SearchConfig(**kw)


def test_alpha_gradients_finite_differences(net8, rng):
    net64 = Network(net8.spec, ParamStore({k: Tensor(v.data, name=k, dtype=np.float64) for k, v in net8.store.items()}))
    sb = relax_block(net64, 2, dtype=np.float64)
    x = Tensor(rng.random((2, 4, 8, 8)), dtype=np.float64)

    def f(alphas):
        sb.alphas = alphas
        return superblock_forward(sb, x, net64)

    assert fd_check(f, [rng.normal(size=sb.alphas.shape)], rng) < 1e-3


# discretization --------------------------------------------------------------------------

@pytest.mark.parametrize("index", [2, 3, 4])
def test_discretization_fixed_point(net8, index):
    sb = relax_block(net8, index)
    disc = discretize(sb, net8)
    assert disc.block == net8.spec.block(index)
    new = install_block(net8, disc.block, disc.store)
    assert all(new.store[k].data.tobytes() == net8.store[k].data.tobytes() for k in net8.store)


def test_all_tied_chooses_none(net8):
    sb = _with_alphas(relax_block(net8, 2), np.zeros((3, NUM_OPS)))
    assert choose_ops(sb) == [OperationKind.NONE] * 3


def test_degenerate_raises(net8):
    sb = relax_block(net8, 2)
    with pytest.raises(DegenerateArchitecture):
        discretize(sb, net8, [OperationKind.NONE] * 3)
    with pytest.raises(DegenerateArchitecture):
        discretize(sb, net8, [OperationKind.NONE, OperationKind.NONE, OperationKind.SEP_CONV])


def test_pruning_renumbers(net8):
    sb = relax_block(net8, 2)
    disc = discretize(sb, net8, [OperationKind.NONE, OperationKind.DIL_CONV, OperationKind.SEP_CONV])
    assert disc.block.num_nodes == 2
    assert [(e.src, e.dst, e.op) for e in disc.block.edges] == [(0, 1, "dil_conv")]
    assert disc.chosen == {(0, 1): "none", (0, 2): "dil_conv", (1, 2): "conv"}


def test_one_hot_oracle(rng):
    for trial in range(4):
        net, sb, x = random_superblock(rng)
        disc = discretize(sb, net)
        new = install_block(net, disc.block, disc.store)
        ref = superblock_forward(one_hot_superblock(sb), x, net).data
        got = new.run_blocks(x, sb.index, sb.index).data
        np.testing.assert_allclose(got, ref, atol=1e-5)


@pytest.mark.parametrize("index", [2, 3, 4])
def test_one_hot_oracle_dead_node(net8, index):
    # node 1 gets no input; its outgoing edge is pruned rather than fed op(0)
    sb = relax_block(net8, index)
    for k, t in sb.store.items():
        if k.endswith("shift"):
            t.data = (t.data + 0.5).astype(t.dtype)
    kinds = [OperationKind.NONE, OperationKind.SEP_CONV, OperationKind.DIL_CONV]
    x = _x(net8, index)
    disc = discretize(sb, net8, kinds)
    new = install_block(net8, disc.block, disc.store)
    ref = superblock_forward(one_hot_superblock(sb, kinds), x, net8).data
    np.testing.assert_allclose(new.run_blocks(x, index, index).data, ref, atol=1e-5)


def test_supernet_forward_full(net8):
    sb = relax_block(net8, 3)
    sb.temperature = 1e-3
    imgs = np.random.default_rng(0).random((2, 3, 8, 8)).astype(np.float32)
    np.testing.assert_allclose(supernet_forward(net8, sb, imgs).data, net8.forward(imgs).data, atol=1e-5)


# fine-tuning ---------------------------------------------------------------------------

def _snapshot(net):
    return {k: v.data.tobytes() for k, v in net.store.items()}


def test_finetune_zero_epochs(net8, small_task):
    before = _snapshot(net8)
    hist = finetune(net8, 3, *small_task, _cfg(finetune_epochs=0))
    assert hist.epochs_run == 0 and _snapshot(net8) == before


def test_finetune_zero_lr(net8, small_task):
    before = _snapshot(net8)
    finetune(net8, 3, *small_task, _cfg(finetune_lr=0.0, finetune_epochs=3, finetune_patience=3))
    assert _snapshot(net8) == before


def test_finetune_touches_only_target(net8, small_task):
    before = _snapshot(net8)
    finetune(net8, 3, *small_task, _cfg(finetune_epochs=3, finetune_patience=3, finetune_lr=0.5))
    block3 = {k for layer in net8.spec.block(3).layers for k in layer.keys}
    after = _snapshot(net8)
    assert all(after[k] == before[k] for k in before if k not in block3)
    assert any(after[k] != before[k] for k in block3)


def test_finetune_keys_subset(net8, small_task):
    before = _snapshot(net8)
    keys = ["b3.e0_1.conv.weight"]
    finetune(net8, 3, *small_task, _cfg(finetune_epochs=3, finetune_patience=3, finetune_lr=0.5), keys=keys)
    after = _snapshot(net8)
    assert [k for k in before if after[k] != before[k]] == keys


# repair pipeline ---------------------------------------------------------------------------

def _mini_repair_cfg(level="block", **kw):
    return RepairConfig(level=level, k=5, fail_cap=20, train_cap=40, search=_cfg(epochs=1, patience=1,
                                                                                   finetune_epochs=1, finetune_patience=1), **kw)


def test_repair_no_failures_is_noop(trained_small):
    net, ds = trained_small
    ok = np.flatnonzero(net.predict(ds.images) == ds.labels)
    with pytest.warns(UserWarning):
        out, rep = repair(net, ds.subset(ok), ds, _mini_repair_cfg())
    assert rep.noop and rep.target_block is None and _snapshot(out) == _snapshot(net)


@pytest.mark.parametrize("level", ["block", "layer"])
def test_repair_levels(trained_small, level):
    net, ds = trained_small
    flipped = Dataset(ds.images[:20], (net.predict(ds.images[:20]) + 1) % 3, 3, name="wrong")
    before = _snapshot(net)
    out, rep = repair(net, flipped, ds, _mini_repair_cfg(level), evals={"clean": ds})
    d = rep.to_dict()
    assert d["level"] == level and rep.target_block in (2, 3, 4)
    assert len(rep.target_edges) == (3 if level == "block" else 1)
    assert _snapshot(net) == before  # input untouched
    assert rep.pre_clean_accuracy is not None and rep.post_clean_accuracy is not None
    assert isinstance(out, Network)


def test_repair_explicit_block(trained_small):
    net, ds = trained_small
    flipped = Dataset(ds.images[:20], (net.predict(ds.images[:20]) + 1) % 3, 3)
    _, rep = repair(net, flipped, ds, _mini_repair_cfg(), block=4)
    assert rep.target_block == 4 and rep.localization is None
    with pytest.raises(ConfigError):
        repair(net, flipped, ds, _mini_repair_cfg(), block=1)


def test_repair_config_validation():
    with pytest.raises(ConfigError):
        RepairConfig(level="neuron")
    with pytest.raises(ConfigError):
        RepairConfig(k=0)
