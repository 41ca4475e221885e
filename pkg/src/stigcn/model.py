"""Network assembly, inference, and analytic parameter/FLOP accounting."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .blocks import STInceptionBlock
from .graph import PRESETS, SkeletonTopology, basis_for, build_topology
from .nn import BatchNorm, Dropout, GlobalAvgPool, Linear, MaxPoolTime, Module, ModuleList
from .ops import ShapeError, softmax

__all__ = [
    "StageSpec", "NetworkConfig", "STIGCN", "build_stigcn", "preset_config",
    "ablation_config", "ABLATION_SETTINGS", "count_params", "count_flops",
    "block_param_formula", "closed_form_params", "profile", "shape_trace",
    "FLOP_CONVENTION",
]


@dataclass(frozen=True)
class StageSpec:
    block_count: int
    channels: int
    pool_after: bool = True


@dataclass(frozen=True)
class NetworkConfig:
    """Declarative description of an STIGCN network.

    ``temporal_branches`` is 2 for position + motion, 1 for position only.
    ``uneven_branches`` lets the spatial channel width be split unevenly when
    the branch count does not divide it.
    """

    topology: SkeletonTopology = field(default_factory=lambda: build_topology("ntu25"))
    input_channels: int = 3
    frames: int = 300
    bodies: int = 2
    class_count: int = 60
    stages: tuple[StageSpec, ...] = (
        StageSpec(1, 64), StageSpec(3, 64), StageSpec(3, 128), StageSpec(3, 256, False))
    spatial_branches: int = 4
    temporal_branches: int = 2
    spatial_fusion: bool = True
    temporal_fusion: bool = True
    chebyshev_order: int = 4
    lambda_mode: str = "fixed_two"
    temporal_kernel: int = 3
    dropout: float = 0.5
    data_bias: bool = False
    data_bias_embed_dim: int | None = None
    share_layer_bias: bool = False
    uneven_branches: bool = False

    def __post_init__(self):
        if isinstance(self.topology, str):
            object.__setattr__(self, "topology", build_topology(self.topology))
        elif isinstance(self.topology, dict):
            object.__setattr__(self, "topology", SkeletonTopology.from_dict(self.topology))
        stages = tuple(s if isinstance(s, StageSpec) else StageSpec(**s) if isinstance(s, dict)
                       else StageSpec(*s) for s in self.stages)
        object.__setattr__(self, "stages", stages)
        if not stages:
            raise ValueError("at least one stage is required")
        if self.chebyshev_order < self.spatial_branches:
            raise ValueError(f"Chebyshev order {self.chebyshev_order} is below the "
                             f"{self.spatial_branches} spatial branches")
        if self.temporal_branches not in (1, 2):
            raise ValueError(f"temporal_branches must be 1 or 2, got {self.temporal_branches}")
        for s in stages:
            if s.block_count < 1:
                raise ValueError(f"stage block_count must be >= 1, got {s.block_count}")
            if s.channels % self.spatial_branches and not self.uneven_branches:
                raise ValueError(f"{self.spatial_branches} spatial branches do not divide "
                                 f"{s.channels} channels")
            if s.channels % self.temporal_branches:
                raise ValueError(f"{self.temporal_branches} temporal branches do not divide "
                                 f"{s.channels} channels")

    @property
    def block_channels(self) -> tuple[int, ...]:
        return tuple(c for s in self.stages for c in [s.channels] * s.block_count)

    def block_embed_dim(self, c_out):
        if not self.data_bias:
            return None
        return self.data_bias_embed_dim or max(1, c_out // 4)

    def to_dict(self) -> dict:
        d = asdict(self)
        topo = self.topology
        d["topology"] = topo.name if _is_preset(topo) else topo.to_dict()
        d["stages"] = [asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        d = dict(d)
        base = d.pop("preset", None)
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown network config fields: {sorted(unknown)}")
        if base is not None:
            return replace(preset_config(base), **d)
        return cls(**d)

    def digest(self) -> bytes:
        text = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).digest()


def _is_preset(topo: SkeletonTopology) -> bool:
    p = PRESETS.get(topo.name)
    return p is not None and build_topology(topo.name) == topo


def preset_config(name: str, **overrides) -> NetworkConfig:
    """Named configurations.

    ``ntu``/``kinetics`` follow the full architecture; ``toy`` and ``tiny``
    are small instances for tests; ``curriculum`` is the synthetic-training
    network.
    """
    if name == "ntu":
        cfg = NetworkConfig()
    elif name == "kinetics":
        cfg = NetworkConfig(topology=build_topology("kinetics18"), bodies=1, class_count=400)
    elif name == "toy":
        cfg = NetworkConfig(topology=build_topology("mini5"), frames=8, bodies=1, class_count=4,
                            stages=(StageSpec(1, 8), StageSpec(1, 16, False)))
    elif name == "tiny":
        cfg = NetworkConfig(topology=build_topology("mini5"), frames=8, bodies=1, class_count=3,
                            stages=(StageSpec(1, 8), StageSpec(1, 8, False)), dropout=0.0)
    elif name == "curriculum":
        cfg = NetworkConfig(frames=64, bodies=1, class_count=4,
                            stages=(StageSpec(1, 16), StageSpec(1, 16), StageSpec(1, 32),
                                    StageSpec(1, 64, False)))
    else:
        raise ValueError(f"unknown network preset {name!r}")
    return replace(cfg, **overrides) if overrides else cfg


# Branch counts, motion and fusion switches; channel widths stay fixed.
ABLATION_SETTINGS = {
    "a": dict(spatial_branches=1, temporal_branches=1, spatial_fusion=False, temporal_fusion=False),
    "b": dict(spatial_branches=2, temporal_branches=1, spatial_fusion=False, temporal_fusion=False),
    "c": dict(spatial_branches=3, temporal_branches=1, spatial_fusion=False, temporal_fusion=False,
              uneven_branches=True),
    "d": dict(spatial_branches=4, temporal_branches=1, spatial_fusion=False, temporal_fusion=False),
    "e": dict(spatial_branches=4, temporal_branches=2, spatial_fusion=False, temporal_fusion=True),
    "f": dict(spatial_branches=4, temporal_branches=2, spatial_fusion=True, temporal_fusion=True),
}


def ablation_config(base: NetworkConfig, setting: str) -> NetworkConfig:
    return replace(base, **{"uneven_branches": False, **ABLATION_SETTINGS[setting]})


class STIGCN(Module):
    """Data BN, a stack of ST inception blocks with temporal pooling between
    stages, global average pooling, body averaging, dropout, linear classifier.

    Input is ``(N, C, T, V, M)``; a rank-4 ``(N, C, T, V)`` input is treated as
    a single body.
    """

    def __init__(self, config: NetworkConfig, seed=0, dtype=np.float32):
        super().__init__()
        object.__setattr__(self, "config", config)
        object.__setattr__(self, "dtype", np.dtype(dtype))
        rng = np.random.default_rng(seed)
        v = config.topology.joint_count
        basis = basis_for(config.topology, config.chebyshev_order, config.lambda_mode)
        self.data_bn = BatchNorm(config.input_channels * v, feature_axes=(1, 3), dtype=dtype)
        self.blocks = ModuleList()
        c_in = config.input_channels
        for c_out in config.block_channels:
            self.blocks.append(STInceptionBlock(
                c_in, c_out, basis, rng,
                spatial_branches=config.spatial_branches,
                motion=config.temporal_branches == 2,
                spatial_fusion=config.spatial_fusion,
                temporal_fusion=config.temporal_fusion,
                temporal_kernel=config.temporal_kernel,
                data_bias_dim=config.block_embed_dim(c_out),
                share_layer_bias=config.share_layer_bias,
                uneven_branches=config.uneven_branches,
                dtype=dtype))
            c_in = c_out
        self.pools = ModuleList(MaxPoolTime(2) for s in config.stages if s.pool_after)
        self.gap = GlobalAvgPool()
        self.dropout = Dropout(config.dropout, np.random.default_rng([seed, 1]))
        self.fc = Linear(c_in, config.class_count, rng, dtype)
        object.__setattr__(self, "last_trace", [])
        object.__setattr__(self, "_plan", None)

    def _layout(self):
        """Yield ("pool", module), ("block", module) and ("stage_end", index) in order."""
        stages = self.config.stages
        blocks, pools = iter(self.blocks), iter(self.pools)
        for i, s in enumerate(stages):
            if i > 0 and stages[i - 1].pool_after:
                yield "pool", next(pools)
            for _ in range(s.block_count):
                yield "block", next(blocks)
            yield "stage_end", i
        if stages[-1].pool_after:
            yield "pool", next(pools)

    def _to_bodies(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 4:
            x = x[..., None]
        if x.ndim != 5:
            raise ShapeError(f"expected input (N, C, T, V, M), got shape {x.shape}")
        n, c, t, v, m = x.shape
        if v != self.config.topology.joint_count:
            raise ShapeError(f"model built for {self.config.topology.joint_count} joints, "
                             f"input has {v}")
        if c != self.config.input_channels:
            raise ShapeError(f"model expects {self.config.input_channels} input channels, got {c}")
        return x.transpose(0, 4, 1, 2, 3).reshape(n * m, c, t, v), n, m

    def _backbone(self, x):
        h, n, m = self._to_bodies(x)
        h = self.data_bn(h)
        trace = [h.shape[1:]]
        for kind, mod in self._layout():
            if kind == "stage_end":
                trace.append(h.shape[1:])
            else:
                h = mod(h)
        object.__setattr__(self, "last_trace", trace)
        self._cache = (n, m)
        return self.gap(h).reshape(n, m, -1).mean(axis=1)

    def features(self, x):
        """Pooled, body-averaged features ahead of dropout and the classifier."""
        return self._backbone(x)

    def forward(self, x):
        f = self._backbone(x)
        return self.fc(self.dropout(f))

    def backward(self, dlogits):
        df = self.dropout.backward(self.fc.backward(dlogits))
        n, m = self._pop_cache()
        dh = np.repeat(df[:, None, :] / m, m, axis=1).reshape(n * m, -1)
        dh = self.gap.backward(dh)
        for kind, mod in reversed(list(self._layout())):
            if kind != "stage_end":
                dh = mod.backward(dh)
        dx = self.data_bn.backward(dh)
        c, t, v = dx.shape[1:]
        return dx.reshape(n, m, c, t, v).transpose(0, 2, 3, 4, 1)

    def init_running_stats(self):
        """Mark default running statistics (mean 0, var 1) as usable for eval."""
        for mod in self.modules():
            if isinstance(mod, BatchNorm):
                mod.has_stats = True
        return self

    def predict_proba(self, x):
        return softmax(self.forward(x), axis=1)


def build_stigcn(config: NetworkConfig, seed=0, dtype=np.float32) -> STIGCN:
    """Deterministically initialized network for ``config``."""
    return STIGCN(config, seed=seed, dtype=dtype)


def shape_trace(model: STIGCN, frames=None, batch=1):
    """Dry-run forward on zeros; returns per-stage ``(C, T, V)`` shapes plus the
    feature width and class count. Model state is left untouched."""
    cfg = model.config
    frames = frames or cfg.frames
    probe = copy.deepcopy(model)
    probe.train()
    x = np.zeros((batch, cfg.input_channels, frames, cfg.topology.joint_count, cfg.bodies),
                 dtype=model.dtype)
    logits = probe.forward(x)
    stages = [tuple(int(d) for d in s) for s in probe.last_trace]
    return {"input": stages[0], "stages": stages[1:],
            "features": int(probe.fc.c_in), "logits": tuple(logits.shape[1:])}


# -- parameter accounting -------------------------------------------------

def count_params(model: STIGCN) -> dict:
    """Exact learnable-scalar count, grouped by top-level layer and block."""
    rows = [{"name": "data_bn", "params": _psum(model.data_bn)}]
    for i, blk in enumerate(model.blocks):
        rows.append({"name": f"blocks.{i}", "params": _psum(blk),
                     "c_in": blk.c_in, "c_out": blk.c_out})
    rows.append({"name": "fc", "params": _psum(model.fc)})
    return {"total": sum(r["params"] for r in rows), "layers": rows,
            "formula": BLOCK_FORMULA}


def _psum(mod):
    return int(sum(p.size for p in mod.parameters()))


BLOCK_FORMULA = (
    "block(Ci, Co) = SI branches [Ci*Co + 3*Co] + layer biases [S*V^2, or V^2 if shared]"
    " + data bias [S*2*(Ci*d + d)] + SI fusion [Co^2 + 3*Co]"
    " + TI branches [k*Ci*Co + 3*Co] + TI fusion [Co^2 + 3*Co]"
    " + residual projection if Ci != Co [Ci*Co + 3*Co];"
    " data_bn = 2*C*V; fc = Clast*Nc + Nc"
)


def block_param_formula(c_in, c_out, cfg: NetworkConfig) -> int:
    """Closed-form parameter count of one block (see ``BLOCK_FORMULA``)."""
    v = cfg.topology.joint_count
    s = cfg.spatial_branches
    total = c_in * c_out + 3 * c_out
    total += (1 if cfg.share_layer_bias else s) * v * v
    d = cfg.block_embed_dim(c_out)
    if d:
        total += s * 2 * (c_in * d + d)
    if cfg.spatial_fusion:
        total += c_out * c_out + 3 * c_out
    total += cfg.temporal_kernel * c_in * c_out + 3 * c_out
    if cfg.temporal_fusion:
        total += c_out * c_out + 3 * c_out
    if c_in != c_out:
        total += c_in * c_out + 3 * c_out
    return total


def closed_form_params(cfg: NetworkConfig) -> int:
    v = cfg.topology.joint_count
    total = 2 * cfg.input_channels * v
    c_in = cfg.input_channels
    for c_out in cfg.block_channels:
        total += block_param_formula(c_in, c_out, cfg)
        c_in = c_out
    return total + c_in * cfg.class_count + cfg.class_count


# -- FLOP accounting --------------------------------------------------------

FLOP_CONVENTION = (
    "1 multiply-accumulate = 2 FLOPs; headline counts convolutions, graph vertex mixing "
    "(including data-dependent bias embeddings) and the classifier; backbone cost "
    "multiplied by the body count M; BN, ReLU, pooling, bias adds and motion differences "
    "are reported as aux_flops and excluded from the headline"
)


def count_flops(model: STIGCN, frames=None, bodies=None, batch=1) -> dict:
    """Analytic FLOPs for one ``(C, T, V, M)`` input (times ``batch``)."""
    cfg = model.config
    frames = frames or cfg.frames
    bodies = bodies or cfg.bodies
    v = cfg.topology.joint_count
    nb = batch * bodies
    shape = (nb, cfg.input_channels, frames, v)
    rows = [{"name": "data_bn", "stage": 0, "flops": 0, "aux_flops": 2 * int(np.prod(shape))}]
    stage = 0
    blocks_iter = iter(range(len(model.blocks)))
    for kind, mod in model._layout():
        if kind == "pool":
            out, _, aux = mod.flops(shape)
            rows.append({"name": "pool", "stage": stage + 1, "flops": 0, "aux_flops": aux})
            shape = out
        elif kind == "block":
            i = next(blocks_iter)
            out, mac, aux = mod.flops(shape)
            rows.append({"name": f"blocks.{i}", "stage": stage + 1, "flops": 2 * mac,
                         "aux_flops": aux, "output": [int(d) for d in out[1:]]})
            shape = out
        else:
            stage += 1
    _, _, aux = model.gap.flops(shape)
    rows.append({"name": "gap", "stage": stage, "flops": 0, "aux_flops": aux + nb * shape[1]})
    _, mac, _ = model.fc.flops((batch, shape[1]))
    rows.append({"name": "fc", "stage": stage, "flops": 2 * mac, "aux_flops": batch * cfg.class_count})
    headline = sum(r["flops"] for r in rows)
    per_stage = {}
    for r in rows:
        if r["name"].startswith("blocks."):
            per_stage[r["stage"]] = per_stage.get(r["stage"], 0) + r["flops"]
    return {
        "headline_flops": int(headline),
        "headline_gflops": headline / 1e9,
        "aux_flops": int(sum(r["aux_flops"] for r in rows)),
        "per_stage_flops": per_stage,
        "input_shape": [cfg.input_channels, frames, v, bodies],
        "convention": FLOP_CONVENTION,
        "layers": rows,
    }


def profile(model: STIGCN, frames=None, bodies=None) -> dict:
    """Parameter and FLOP report in the ``inspect`` JSON schema."""
    params = count_params(model)
    flops = count_flops(model, frames, bodies)
    pmap = {r["name"]: r["params"] for r in params["layers"]}
    layers = [{"name": r["name"], "params": pmap.get(r["name"], 0), "flops": r["flops"],
               "aux_flops": r["aux_flops"]} for r in flops["layers"]]
    cfg = model.config
    other = replace(cfg, data_bias=not cfg.data_bias)
    return {
        "total_params": params["total"],
        "total_params_by_data_bias": {
            str(cfg.data_bias).lower(): params["total"],
            str(other.data_bias).lower(): closed_form_params(other),
        },
        "headline_gflops": flops["headline_gflops"],
        "convention": flops["convention"],
        "input_shape": flops["input_shape"],
        "param_formula": params["formula"],
        "layers": layers,
    }
