"""Spatial/temporal inception paths and the residual-summed ST block."""
from __future__ import annotations

import numpy as np

from . import ops
from .graph import ChebyshevBasis
from .nn import BatchNorm, ConvBNReLU, Module, Param, PointwiseConv, ReLU

__all__ = [
    "split_channels", "DataDependentBias", "SpatialBranch", "SpatialInception",
    "MotionSampling", "TemporalInception", "Residual", "STInceptionBlock",
]


def split_channels(total, parts):
    """Split ``total`` channels into ``parts`` widths differing by at most one."""
    base, extra = divmod(total, parts)
    return [base + (i < extra) for i in range(parts)]


class DataDependentBias(Module):
    """Per-sample row-stochastic vertex affinity.

    Two 1x1 embeddings of the input are contracted over channels and time,
    and each row of the resulting V x V similarity is softmax-normalized.
    """

    def __init__(self, c_in, embed_dim, rng, dtype=np.float32):
        super().__init__()
        self.embed_dim = embed_dim
        self.theta = PointwiseConv(c_in, embed_dim, rng, dtype)
        self.phi = PointwiseConv(c_in, embed_dim, rng, dtype)

    def forward(self, x):
        a = self.theta(x)
        b = self.phi(x)
        s = np.einsum("nctu,nctv->nuv", a, b, optimize=True)
        p = ops.softmax(s, axis=-1)
        self._cache = (a, b, p)
        return p

    def backward(self, dp):
        a, b, p = self._pop_cache()
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        da = np.einsum("nuv,nctv->nctu", ds, b, optimize=True)
        db = np.einsum("nuv,nctu->nctv", ds, a, optimize=True)
        return self.theta.backward(da) + self.phi.backward(db)

    def flops(self, shape):
        n, c, t, v = shape
        _, m1, _ = self.theta.flops(shape)
        _, m2, _ = self.phi.flops(shape)
        return (n, v, v), m1 + m2 + n * self.embed_dim * t * v * v, 3 * n * v * v


class SpatialBranch(Module):
    """One adjacency-sampling branch: vertex mixing by ``T_r`` plus adaptive
    biases, a 1x1 convolution, BN and ReLU.

    Mixing and the channel projection commute, so the mixing is applied on
    whichever side has fewer channels; the bias is added after both.
    """

    def __init__(self, c_in, c_out, order, basis: ChebyshevBasis, rng, layer_bias=None,
                 data_bias_dim=None, dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out, self.order = c_in, c_out, order
        object.__setattr__(self, "cheb", np.asarray(basis[order], dtype=dtype))
        v = basis.size
        if layer_bias is None:
            self.layer_bias = Param(np.zeros((v, v), dtype=dtype))
        else:
            # shared with sibling branches; owned by the parent path
            object.__setattr__(self, "layer_bias", layer_bias)
        bound = 1.0 / np.sqrt(c_in)
        self.weight = Param(rng.uniform(-bound, bound, (c_out, c_in)).astype(dtype))
        self.bias = Param(np.zeros(c_out, dtype=dtype))
        self.data_bias = DataDependentBias(c_in, data_bias_dim, rng, dtype) if data_bias_dim else None
        self.bn = BatchNorm(c_out, dtype=dtype)
        self.relu = ReLU()
        self.mix_first = c_in <= c_out

    def mixing_matrix(self, x=None):
        m = self.cheb + self.layer_bias.value
        if self.data_bias is not None:
            m = m[None] + self.data_bias(x)
        return m

    def forward(self, x):
        m = self.mixing_matrix(x)
        w, b = self.weight.value, self.bias.value
        if self.mix_first:
            z = ops.graph_apply(x, m)
            pre = ops.pointwise_conv(z, w, b)
        else:
            z = ops.pointwise_conv(x, w)
            pre = ops.graph_apply(z, m) + b[None, :, None, None]
        self._cache = (x, z, m)
        return self.relu(self.bn(pre))

    def backward(self, dy):
        x, z, m = self._pop_cache()
        dpre = self.bn.backward(self.relu.backward(dy))
        w = self.weight.value
        if self.mix_first:
            dz, dw, db = ops.pointwise_conv_backward(dpre, z, w)
            dx, dm = ops.graph_apply_backward(dz, x, m)
        else:
            db = dpre.sum(axis=(0, 2, 3))
            dz, dm = ops.graph_apply_backward(dpre, z, m)
            dx, dw, _ = ops.pointwise_conv_backward(dz, x, w)
        self.weight.grad += dw
        self.bias.grad += db
        if m.ndim == 3:
            self.layer_bias.grad += dm.sum(axis=0)
            dx = dx + self.data_bias.backward(dm)
        else:
            self.layer_bias.grad += dm
        return dx

    def flops(self, shape):
        n, c, t, v = shape
        out = (n, self.c_out, t, v)
        mix_channels = self.c_in if self.mix_first else self.c_out
        mac = n * t * v * self.c_in * self.c_out + n * mix_channels * t * v * v
        aux = v * v + 2 * int(np.prod(out)) + int(np.prod(out))  # bias add, BN, ReLU
        if self.data_bias is not None:
            _, m2, a2 = self.data_bias.flops(shape)
            mac += m2
            aux += a2 + n * v * v
        return out, mac, aux


class SpatialInception(Module):
    """``S`` branches using Chebyshev orders 1..S, concatenated and fused."""

    def __init__(self, c_in, c_out, basis: ChebyshevBasis, rng, branches=4, fusion=True,
                 data_bias_dim=None, share_layer_bias=False, uneven=False, dtype=np.float32):
        super().__init__()
        if c_out % branches and not uneven:
            raise ValueError(f"{branches} spatial branches do not divide {c_out} channels")
        if basis.order < branches:
            raise ValueError(f"Chebyshev order {basis.order} < {branches} spatial branches")
        self.branches = branches
        self.widths = split_channels(c_out, branches)
        shared = None
        if share_layer_bias:
            self.layer_bias = Param(np.zeros((basis.size, basis.size), dtype=dtype))
            shared = self.layer_bias
        for r, w in enumerate(self.widths, start=1):
            setattr(self, f"branch{r}", SpatialBranch(c_in, w, r, basis, rng, shared,
                                                      data_bias_dim, dtype))
        self.fusion = ConvBNReLU(c_out, c_out, rng, dtype=dtype) if fusion else None

    def _branches(self):
        return [getattr(self, f"branch{r}") for r in range(1, self.branches + 1)]

    def forward(self, x):
        y = np.concatenate([br(x) for br in self._branches()], axis=1)
        return self.fusion(y) if self.fusion is not None else y

    def backward(self, dy):
        if self.fusion is not None:
            dy = self.fusion.backward(dy)
        dx = None
        start = 0
        for br in self._branches():
            g = br.backward(dy[:, start:start + br.c_out])
            start += br.c_out
            dx = g if dx is None else dx + g
        return dx

    def flops(self, shape):
        mac = aux = 0
        for br in self._branches():
            out, m, a = br.flops(shape)
            mac, aux = mac + m, aux + a
        out = (shape[0], sum(self.widths), shape[2], shape[3])
        if self.fusion is not None:
            out, m, a = self.fusion.flops(out)
            mac, aux = mac + m, aux + a
        return out, mac, aux


class MotionSampling(Module):
    def forward(self, x):
        self._cache = True
        return ops.motion_sampling(x)

    def backward(self, dy):
        self._pop_cache()
        return ops.motion_sampling_backward(dy)

    def flops(self, shape):
        return shape, 0, int(np.prod(shape))


class TemporalInception(Module):
    """Position branch and (optionally) motion branch, each a length-``k``
    temporal convolution with BN and ReLU, then an optional fusion module."""

    def __init__(self, c_in, c_out, rng, kernel=3, motion=True, fusion=True, dtype=np.float32):
        super().__init__()
        nb = 2 if motion else 1
        if c_out % nb:
            raise ValueError(f"{nb} temporal branches do not divide {c_out} channels")
        self.width = c_out // nb
        self.position = ConvBNReLU(c_in, self.width, rng, kernel=kernel, dtype=dtype)
        if motion:
            self.sampling = MotionSampling()
            self.motion = ConvBNReLU(c_in, self.width, rng, kernel=kernel, dtype=dtype)
        else:
            self.motion = None
        self.fusion = ConvBNReLU(c_out, c_out, rng, dtype=dtype) if fusion else None

    def forward(self, x):
        y = self.position(x)
        if self.motion is not None:
            y = np.concatenate([y, self.motion(self.sampling(x))], axis=1)
        return self.fusion(y) if self.fusion is not None else y

    def backward(self, dy):
        if self.fusion is not None:
            dy = self.fusion.backward(dy)
        w = self.width
        dx = self.position.backward(dy[:, :w])
        if self.motion is not None:
            dx = dx + self.sampling.backward(self.motion.backward(dy[:, w:]))
        return dx

    def flops(self, shape):
        out, mac, aux = self.position.flops(shape)
        if self.motion is not None:
            _, m, a = self.motion.flops(shape)
            mac, aux = mac + m, aux + a + self.sampling.flops(shape)[2]
            out = (out[0], 2 * self.width, out[2], out[3])
        if self.fusion is not None:
            out, m, a = self.fusion.flops(out)
            mac, aux = mac + m, aux + a
        return out, mac, aux


class Residual(Module):
    """Identity, or a 1x1 projection with BN (no ReLU) when channels change."""

    def __init__(self, c_in, c_out, rng, dtype=np.float32):
        super().__init__()
        self.proj = ConvBNReLU(c_in, c_out, rng, relu=False, dtype=dtype) if c_in != c_out else None

    def forward(self, x):
        return x if self.proj is None else self.proj(x)

    def backward(self, dy):
        return dy if self.proj is None else self.proj.backward(dy)

    def flops(self, shape):
        if self.proj is None:
            return shape, 0, 0
        return self.proj.flops(shape)


class STInceptionBlock(Module):
    """Spatial, temporal and residual paths over the same input, summed."""

    def __init__(self, c_in, c_out, basis: ChebyshevBasis, rng, spatial_branches=4,
                 motion=True, spatial_fusion=True, temporal_fusion=True, temporal_kernel=3,
                 data_bias_dim=None, share_layer_bias=False, uneven_branches=False,
                 dtype=np.float32):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.spatial = SpatialInception(c_in, c_out, basis, rng, spatial_branches, spatial_fusion,
                                        data_bias_dim, share_layer_bias, uneven_branches, dtype)
        self.temporal = TemporalInception(c_in, c_out, rng, temporal_kernel, motion,
                                          temporal_fusion, dtype)
        self.residual = Residual(c_in, c_out, rng, dtype)

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ops.ShapeError(f"block expects {self.c_in} channels, got {x.shape[1]}")
        s, t, r = self.spatial(x), self.temporal(x), self.residual(x)
        if not (s.shape == t.shape == r.shape):
            raise ops.ShapeError(f"path shapes disagree: spatial {s.shape}, temporal {t.shape}, "
                                 f"residual {r.shape}")
        self._cache = True
        return s + t + r

    def backward(self, dy):
        self._pop_cache()
        return self.spatial.backward(dy) + self.temporal.backward(dy) + self.residual.backward(dy)

    def flops(self, shape):
        out, mac, aux = self.spatial.flops(shape)
        for path in (self.temporal, self.residual):
            _, m, a = path.flops(shape)
            mac, aux = mac + m, aux + a
        return out, mac, aux + 2 * int(np.prod(out))
