import numpy as np
import pytest
from hypothesis import given, strategies as st

from stigcn.blocks import (DataDependentBias, SpatialInception, STInceptionBlock, TemporalInception,
                           split_channels)
from stigcn.graph import basis_for, build_topology
from stigcn.nn import BatchNorm, PointwiseConv, TemporalConv
from stigcn.ops import ShapeError

import oracles

F64 = np.float64


def _path2():
    return basis_for(build_topology([(0, 1)], joint_count=2), 4)


def _randomize_bn(module, rng):
    for m in module.modules():
        if isinstance(m, BatchNorm):
            m.gamma.value = rng.uniform(0.5, 1.5, m.gamma.shape)
            m.beta.value = rng.standard_normal(m.beta.shape)


def _conv_bn_relu_ref(x, cbr, relu=True):
    conv = cbr.conv
    if isinstance(conv, TemporalConv):
        y = oracles.temporal_conv_loops(x, conv.weight.value, conv.bias.value)
    else:
        y = oracles.conv1x1_loops(x, conv.weight.value, conv.bias.value)
    y = oracles.bn_channels_train(y, cbr.bn.gamma.value, cbr.bn.beta.value)
    return oracles.relu(y) if relu else y


def _spatial_ref(x, si, basis):
    outs = []
    for r, br in enumerate(si._branches(), start=1):
        m = basis[r] + br.layer_bias.value
        z = oracles.graph_mix_loops(x, m)
        pre = oracles.conv1x1_loops(z, br.weight.value, br.bias.value)
        outs.append(oracles.relu(oracles.bn_channels_train(pre, br.bn.gamma.value, br.bn.beta.value)))
    y = np.concatenate(outs, axis=1)
    return _conv_bn_relu_ref(y, si.fusion) if si.fusion is not None else y


def _temporal_ref(x, ti):
    pos = _conv_bn_relu_ref(x, ti.position)
    mot = _conv_bn_relu_ref(oracles.motion_loops(x), ti.motion)
    y = np.concatenate([pos, mot], axis=1)
    return _conv_bn_relu_ref(y, ti.fusion)


def test_split_channels():
    assert split_channels(64, 4) == [16] * 4
    assert split_channels(64, 3) == [22, 21, 21]
    assert sum(split_channels(13, 5)) == 13


@pytest.mark.parametrize("c_in,c_out", [(4, 4), (4, 8), (8, 4)])
def test_spatial_inception_matches_loop_reference(c_in, c_out):
    rng = np.random.default_rng(0)
    basis = _path2()
    si = SpatialInception(c_in, c_out, basis, rng, dtype=F64)
    _randomize_bn(si, rng)
    for br in si._branches():
        br.layer_bias.value = rng.standard_normal((2, 2)) * 0.1
        br.bias.value = rng.standard_normal(br.bias.shape)
    x = rng.standard_normal((2, c_in, 3, 2))
    assert np.abs(si.forward(x) - _spatial_ref(x, si, basis)).max() <= 1e-6


def test_spatial_inception_float32_matches_reference_to_single_precision():
    rng = np.random.default_rng(1)
    basis = _path2()
    si = SpatialInception(4, 4, basis, rng, dtype=np.float32)
    x = rng.standard_normal((2, 4, 3, 2)).astype(np.float32)
    ref = _spatial_ref(x.astype(F64), si, basis)
    assert np.abs(si.forward(x) - ref).max() <= 1e-5


def test_temporal_inception_matches_loop_reference():
    rng = np.random.default_rng(2)
    ti = TemporalInception(3, 8, rng, dtype=F64)
    _randomize_bn(ti, rng)
    x = rng.standard_normal((2, 3, 5, 4))
    y = ti.forward(x)
    assert y.shape == (2, 8, 5, 4) and ti.width == 4
    assert np.abs(y - _temporal_ref(x, ti)).max() <= 1e-6


def test_st_block_matches_loop_reference():
    rng = np.random.default_rng(3)
    basis = basis_for(build_topology("mini5"), 4)
    blk = STInceptionBlock(3, 8, basis, rng, dtype=F64)
    _randomize_bn(blk, rng)
    x = rng.standard_normal((2, 3, 4, 5))
    ref = (_spatial_ref(x, blk.spatial, basis) + _temporal_ref(x, blk.temporal)
           + _conv_bn_relu_ref(x, blk.residual.proj, relu=False))
    assert np.abs(blk.forward(x) - ref).max() <= 1e-6


def test_zero_weights_give_zero_spatial_output():
    rng = np.random.default_rng(4)
    si = SpatialInception(3, 8, basis_for(build_topology("mini5"), 4), rng, dtype=F64)
    for m in si.modules():
        if isinstance(m, PointwiseConv):
            m.weight.value[:] = 0
    for br in si._branches():
        br.weight.value[:] = 0
    for m in si.modules():
        if isinstance(m, BatchNorm):
            m.has_stats = True
    si.eval()
    assert np.array_equal(si.forward(rng.standard_normal((2, 3, 4, 5))), np.zeros((2, 8, 4, 5)))


def test_block_reduces_to_residual_when_fusions_are_zeroed():
    rng = np.random.default_rng(5)
    blk = STInceptionBlock(3, 8, basis_for(build_topology("mini5"), 4), rng, dtype=F64)
    for fusion in (blk.spatial.fusion, blk.temporal.fusion):
        fusion.conv.weight.value[:] = 0
    for m in blk.modules():
        if isinstance(m, BatchNorm):
            m.beta.value[:] = 0
            m.has_stats = True
    blk.eval()
    x = rng.standard_normal((2, 3, 4, 5))
    assert np.array_equal(blk.forward(x), blk.residual.forward(x))


def test_motion_branch_is_silent_on_static_input():
    rng = np.random.default_rng(6)
    ti = TemporalInception(3, 8, rng, dtype=F64)
    for m in ti.modules():
        if isinstance(m, BatchNorm):
            m.has_stats = True
    ti.eval()
    x = np.repeat(rng.standard_normal((2, 3, 1, 4)), 6, axis=2)
    assert np.array_equal(ti.motion.forward(ti.sampling.forward(x)), np.zeros((2, 4, 6, 4)))


def test_stage_one_width():
    rng = np.random.default_rng(7)
    basis = basis_for(build_topology("ntu25"), 4)
    blk = STInceptionBlock(3, 64, basis, rng)
    assert blk.residual.proj is not None
    assert [b.c_out for b in blk.spatial._branches()] == [16] * 4
    assert blk.temporal.width == 32
    y = blk.forward(np.zeros((1, 3, 6, 25), dtype=np.float32))
    assert y.shape == (1, 64, 6, 25)


def test_branch_mixing_equals_chebyshev_term_without_biases():
    basis = basis_for(build_topology("mini5"), 4)
    si = SpatialInception(4, 8, basis, np.random.default_rng(8), dtype=F64)
    for r, br in enumerate(si._branches(), start=1):
        assert br.order == r
        assert np.array_equal(br.mixing_matrix(), basis[r])


def test_branch_count_must_divide_width_unless_uneven():
    basis = basis_for(build_topology("mini5"), 4)
    with pytest.raises(ValueError):
        SpatialInception(4, 8, basis, np.random.default_rng(0), branches=3)
    si = SpatialInception(4, 8, basis, np.random.default_rng(0), branches=3, uneven=True)
    assert [b.c_out for b in si._branches()] == [3, 3, 2]


def test_block_rejects_wrong_channel_count():
    blk = STInceptionBlock(3, 8, basis_for(build_topology("mini5"), 4), np.random.default_rng(0))
    with pytest.raises(ShapeError):
        blk.forward(np.zeros((1, 4, 4, 5), dtype=np.float32))


@given(st.integers(1, 4), st.integers(1, 6), st.booleans(), st.booleans(), st.booleans())
def test_path_shapes_agree(batch, frames, motion, s_fusion, t_fusion):
    rng = np.random.default_rng(batch)
    blk = STInceptionBlock(3, 8, basis_for(build_topology("mini5"), 4), rng, motion=motion,
                           spatial_fusion=s_fusion, temporal_fusion=t_fusion)
    x = rng.standard_normal((batch, 3, frames, 5)).astype(np.float32)
    if batch * frames * 5 < 2:
        return
    assert blk.forward(x).shape == (batch, 8, frames, 5)


def test_data_dependent_bias_rows_are_stochastic():
    rng = np.random.default_rng(9)
    db = DataDependentBias(4, 2, rng, dtype=F64)
    p = db.forward(rng.standard_normal((3, 4, 5, 6)))
    assert p.shape == (3, 6, 6)
    assert (p >= 0).all() and np.allclose(p.sum(axis=-1), 1, atol=1e-12)


def test_data_dependent_bias_degenerate_cases():
    rng = np.random.default_rng(10)
    db = DataDependentBias(2, 2, rng, dtype=F64)
    same = np.repeat(rng.standard_normal((1, 2, 3, 1)), 4, axis=3)
    assert np.allclose(db.forward(same), np.full((1, 4, 4), 0.25), atol=1e-12)
    assert np.array_equal(db.forward(rng.standard_normal((2, 2, 3, 1))), np.ones((2, 1, 1)))


def test_data_dependent_bias_gradient():
    rng = np.random.default_rng(11)
    db = DataDependentBias(3, 2, rng, dtype=F64)
    x = rng.standard_normal((2, 3, 4, 5))
    dp = rng.standard_normal((2, 5, 5))
    db.forward(x)
    dx = db.backward(dp)

    def f():
        return float(np.sum(db.forward(x) * dp))

    assert np.abs(dx - oracles.numeric_grad(f, x)).max() <= 1e-6
    db.zero_grad()
    db.forward(x)
    db.backward(dp)
    w = db.theta.weight
    assert np.abs(w.grad - oracles.numeric_grad(f, w.value)).max() <= 1e-6


def test_shared_layer_bias_accumulates_from_every_branch():
    rng = np.random.default_rng(12)
    basis = basis_for(build_topology("mini5"), 4)
    si = SpatialInception(4, 8, basis, rng, share_layer_bias=True, dtype=F64)
    shared = [br.layer_bias for br in si._branches()]
    assert all(p is shared[0] for p in shared)
    names = [n for n, _ in si.named_parameters()]
    assert sum("layer_bias" in n for n in names) == 1
    x = rng.standard_normal((2, 4, 3, 5))
    dy = rng.standard_normal((2, 8, 3, 5))
    si.forward(x)
    si.backward(dy)

    def f():
        return float(np.sum(si.forward(x) * dy))

    assert np.abs(shared[0].grad - oracles.numeric_grad(f, shared[0].value)).max() <= 1e-6
