"""Searchable single-path SR network: head, body blocks with ADQ, upsample, tail.

Layer layout for ``K`` body repeats (channels ``C``, scale ``r``)::

    head.0      3 -> C
    head.1      C -> C
    body.2k     C -> C  \\
    body.2k+1   C -> C   }  inner(z) = body.2k+1(body.2k(z)) + skip.k(z)
    skip.k      C -> C  /   wrapped by ADQ, plus the identity residual
    upsample.0  C -> C*r^2, then pixel shuffle
    tail.0      C -> 3      (high resolution)
    tail.1      3 -> 3      output = tail.0 + tail.1(tail.0)
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .bitmixer import MixedEdge
from .data import bicubic_upscale
from .nn import BatchNorm2d, Module, Parameter
from .ops import canonical_name, parse_op
from .tensor import ConfigurationError, ContractError, Tensor, pixel_shuffle, sum_tensors

SPACE_VERSION = "basic-small-b/1"

SMALL_B_CATALOG: Dict[str, List[str]] = {
    "head": ["simple_3x3", "simple_5x5", "simple_3x3_g3", "simple_5x5_g3"],
    "body": ["conv_5x1_1x5", "conv_3x1_1x3", "simple_3x3", "simple_5x5"],
    "skip": ["simple_1x1", "simple_3x3", "simple_5x5"],
    "upsample": ["conv_5x1_1x5", "conv_3x1_1x3", "simple_3x3", "simple_5x5"],
    "tail": ["simple_1x1", "simple_3x3", "simple_5x5"],
}
BLOCKS = tuple(SMALL_B_CATALOG)
RESIDUALS = ("none", "bicubic")
# With a bicubic skip the tail starts damped, so the untrained network is
# close to plain bicubic upscaling instead of adding a large random residual.
RESIDUAL_TAIL_INIT = 0.1


@dataclass(frozen=True)
class LayerSpec:
    block: str
    index: int
    cin: int
    cout: int
    ops: Tuple[str, ...]
    bits: Tuple[int, ...]
    high_res: bool = False

    @property
    def layer_id(self) -> str:
        return f"{self.block}.{self.index}"


def _structure(channels: int, body_repeats: int, scale: int) -> List[Tuple[str, int, int, int, bool]]:
    c = channels
    rows = [("head", 0, 3, c, False), ("head", 1, c, c, False)]
    for k in range(body_repeats):
        rows += [("body", 2 * k, c, c, False), ("body", 2 * k + 1, c, c, False), ("skip", k, c, c, False)]
    rows += [("upsample", 0, c, c * scale * scale, False), ("tail", 0, c, 3, True), ("tail", 1, 3, 3, True)]
    return rows


@dataclass
class SearchSpaceSpec:
    """Search space: per-block catalogs, channel width, body repeats, scale, bits."""

    channels: int = 8
    body_repeats: int = 1
    scale: int = 2
    bits: Tuple[int, ...] = (4, 8)
    catalogs: Dict[str, List[str]] = field(default_factory=lambda: {k: list(v) for k, v in SMALL_B_CATALOG.items()})
    adq: bool = True
    adq_bn: bool = True
    exempt_first_last: bool = False
    global_residual: str = "none"

    def validate(self) -> None:
        if self.channels < 1 or self.body_repeats < 0 or self.scale < 1:
            raise ConfigurationError("channels, body_repeats and scale must be positive")
        if not self.bits:
            raise ConfigurationError("bits list is empty")
        if self.global_residual not in RESIDUALS:
            raise ConfigurationError(f"global_residual must be one of {RESIDUALS}, got {self.global_residual!r}")
        for b in self.bits:
            if not 2 <= int(b) <= 8:
                raise ConfigurationError(f"bits must be in 2..8, got {b}")
        missing = [blk for blk in BLOCKS if blk not in self.catalogs]
        if missing:
            raise ConfigurationError(f"missing catalog for blocks {missing}")
        unknown = [blk for blk in self.catalogs if blk not in BLOCKS]
        if unknown:
            raise ConfigurationError(f"unknown blocks {unknown}")
        for blk, ops in self.catalogs.items():
            if not ops:
                raise ConfigurationError(f"block {blk!r} has an empty catalog")

    def layer_specs(self) -> List[LayerSpec]:
        self.validate()
        rows = _structure(self.channels, self.body_repeats, self.scale)
        specs = []
        for i, (block, index, cin, cout, hr) in enumerate(rows):
            ops = tuple(canonical_name(o) for o in self.catalogs[block])
            for o in ops:
                parse_op(o, cin, cout)
            bits = tuple(int(b) for b in self.bits)
            if self.exempt_first_last and (i == 0 or i == len(rows) - 1):
                bits = (8,)
            specs.append(LayerSpec(block, index, cin, cout, ops, bits, hr))
        return specs


# -- genotype -------------------------------------------------------------------

@dataclass
class LayerChoice:
    block: str
    index: int
    op: str
    bits: int

    @property
    def layer_id(self) -> str:
        return f"{self.block}.{self.index}"


@dataclass
class Genotype:
    """One (operation, bits) choice per searchable layer plus space metadata."""

    channels: int
    K: int
    scale: int
    layers: List[LayerChoice]
    alpha_margins: List[float] = field(default_factory=list)
    space_version: str = SPACE_VERSION
    global_residual: str = "none"

    def to_dict(self) -> dict:
        return {
            "space_version": self.space_version,
            "global_residual": self.global_residual,
            "channels": self.channels,
            "K": self.K,
            "scale": self.scale,
            "layers": [asdict(layer) for layer in self.layers],
            "alpha_margins": [float(m) for m in self.alpha_margins],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Genotype":
        try:
            layers = [LayerChoice(str(l["block"]), int(l["index"]), str(l["op"]), int(l["bits"])) for l in d["layers"]]
            g = cls(
                channels=int(d["channels"]),
                K=int(d["K"]),
                scale=int(d["scale"]),
                layers=layers,
                alpha_margins=[float(m) for m in d.get("alpha_margins", [])],
                space_version=str(d.get("space_version", SPACE_VERSION)),
                global_residual=str(d.get("global_residual", "none")),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"malformed genotype: {exc}") from exc
        if g.global_residual not in RESIDUALS:
            raise ConfigurationError(f"unknown global_residual {g.global_residual!r}")
        g.layer_specs()
        return g

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Genotype":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def layer_specs(self) -> List[LayerSpec]:
        rows = _structure(self.channels, self.K, self.scale)
        if len(rows) != len(self.layers):
            raise ConfigurationError(f"genotype has {len(self.layers)} layers, structure needs {len(rows)}")
        specs = []
        for (block, index, cin, cout, hr), choice in zip(rows, self.layers):
            if (choice.block, choice.index) != (block, index):
                raise ConfigurationError(f"layer {choice.layer_id} out of order, expected {block}.{index}")
            parse_op(choice.op, cin, cout)
            if not 2 <= choice.bits <= 8:
                raise ConfigurationError(f"layer {choice.layer_id}: bits {choice.bits} outside 2..8")
            specs.append(LayerSpec(block, index, cin, cout, (canonical_name(choice.op),), (choice.bits,), hr))
        return specs


# -- network pieces -------------------------------------------------------------

class SupernetLayer(Module):
    """All (operation x bits) edges of one layer and their importance logits.

    ``alpha = softmax(logits)`` over the flat (op, bit) vector, op-major.
    ``alpha_override`` replaces it with a fixed vector (used for collapse tests
    and forced one-hot evaluation).
    """

    def __init__(self, spec: LayerSpec, strategy: str, rng: np.random.Generator, **edge_kw) -> None:
        self.spec = spec
        self.edges: List[MixedEdge] = [
            MixedEdge(op, spec.cin, spec.cout, spec.bits, strategy, rng, **edge_kw) for op in spec.ops
        ]
        self.logits = Parameter(np.zeros(len(spec.ops) * len(spec.bits)))
        self.alpha_override: Optional[np.ndarray] = None

    @property
    def n_bits(self) -> int:
        return len(self.spec.bits)

    def alpha(self) -> Tensor:
        if self.alpha_override is not None:
            return Tensor(self.alpha_override)
        return self.logits.softmax()

    def alpha_values(self) -> np.ndarray:
        return self.alpha().data.copy()

    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        a = self.alpha()
        nb = self.n_bits
        outs = []
        for i, edge in enumerate(self.edges):
            row = [a[i * nb + j] for j in range(nb)]
            out = edge(x, row, rng)
            if not edge.dead:
                outs.append(out)
        if not outs:
            n, _, h, w = x.shape
            return Tensor(np.zeros((n, self.spec.cout, h, w)))
        return sum_tensors(outs)


class ADQBlock(Module):
    """Input batch norm plus output rescaling by the input's per-sample std.

    ``y = inner(bn(x)) * (gamma * std(x) + beta) + x``. There is no
    normalization after the inner block.
    """

    def __init__(self, channels: int, use_bn: bool = True, gamma: float = 1.0, beta: float = 0.0) -> None:
        self.bn = BatchNorm2d(channels) if use_bn else None
        self.gamma = Parameter(gamma)
        self.beta = Parameter(beta)

    def input_std(self, x: Tensor) -> Tensor:
        if x.shape[2] * x.shape[3] < 2:
            raise ContractError("ADQ needs at least two spatial elements")
        return x.std(axis=(1, 2, 3))

    def forward(self, x: Tensor, inner) -> Tensor:
        z = self.bn(x) if self.bn is not None else x
        scale = self.gamma * self.input_std(x) + self.beta
        return inner(z) * scale + x


class Supernet(Module):
    """Forward-capable searchable network built from a list of layer specs."""

    def __init__(
        self,
        specs: Sequence[LayerSpec],
        channels: int,
        body_repeats: int,
        scale: int,
        strategy: str = "san",
        seed: int = 0,
        adq: bool = True,
        adq_bn: bool = True,
        global_residual: str = "none",
        **edge_kw,
    ) -> None:
        if global_residual not in RESIDUALS:
            raise ConfigurationError(f"unknown global_residual {global_residual!r}")
        rng = np.random.default_rng(seed)
        self.global_residual = global_residual
        self.channels = channels
        self.body_repeats = body_repeats
        self.scale = scale
        self.strategy = strategy
        self.use_adq = adq
        self.layers: Dict[str, SupernetLayer] = {}
        for spec in specs:
            self.layers[spec.layer_id] = SupernetLayer(spec, strategy, rng, **edge_kw)
        self.adq_blocks: List[ADQBlock] = [ADQBlock(channels, use_bn=adq_bn) for _ in range(body_repeats)] if adq else []
        if global_residual == "bicubic":
            for name, layer in self.layers.items():
                if name.startswith("tail."):
                    for edge in layer.edges:
                        for op in edge.ops:
                            for w in op.weights:
                                w.data = w.data * RESIDUAL_TAIL_INIT

    @classmethod
    def from_space(cls, space: SearchSpaceSpec, strategy: str = "san", seed: int = 0, **edge_kw) -> "Supernet":
        return cls(
            space.layer_specs(), space.channels, space.body_repeats, space.scale, strategy, seed,
            adq=space.adq, adq_bn=space.adq_bn, global_residual=space.global_residual, **edge_kw,
        )

    # -- parameter groups ----------------------------------------------------
    def alpha_parameters(self) -> List[Parameter]:
        return [layer.logits for layer in self.layers.values()]

    def weight_parameters(self) -> List[Parameter]:
        alphas = {id(p) for p in self.alpha_parameters()}
        return [p for p in self.parameters() if id(p) not in alphas]

    def set_pass(self, alpha: bool, weights: bool) -> None:
        """Choose which parameter group records gradients."""
        for p in self.alpha_parameters():
            p.requires_grad = alpha
        for p in self.weight_parameters():
            p.requires_grad = weights

    def set_bn_update(self, update: bool) -> None:
        for m in self.modules():
            if isinstance(m, BatchNorm2d):
                m.update_stats = update

    def set_noise(self, enabled: bool) -> None:
        for layer in self.layers.values():
            for edge in layer.edges:
                edge.noise_enabled = enabled

    def alphas(self) -> Dict[str, np.ndarray]:
        return {name: layer.alpha_values() for name, layer in self.layers.items()}

    # -- forward -------------------------------------------------------------
    def forward(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ContractError(f"expected N x 3 x H x W input, got {x.shape}")
        L = self.layers
        h = L["head.1"](L["head.0"](x, rng), rng)
        for k in range(self.body_repeats):
            def inner(z, k=k):
                seq = L[f"body.{2 * k + 1}"](L[f"body.{2 * k}"](z, rng), rng)
                return seq + L[f"skip.{k}"](z, rng)

            if self.use_adq:
                h = self.adq_blocks[k](h, inner)
            else:
                h = inner(h) + h
        u = pixel_shuffle(L["upsample.0"](h, rng), self.scale)
        t0 = L["tail.0"](u, rng)
        out = t0 + L["tail.1"](t0, rng)
        if self.global_residual == "bicubic":
            out = out + Tensor(bicubic_upscale(x.data, self.scale))
        return out


def build_supernet(space: SearchSpaceSpec, strategy: str = "san", seed: int = 0, **edge_kw) -> Supernet:
    return Supernet.from_space(space, strategy, seed, **edge_kw)


def instantiate(genotype: Genotype, strategy: str = "direct-quantized", seed: int = 0, adq: bool = True, adq_bn: bool = True) -> Supernet:
    """Fixed single-path network for a genotype, with fake quantization at its bits.

    ``direct-quantized`` evaluates o(G(x, b), Q(W, b)) per layer (a shared-weight
    edge with a single bit width and alpha fixed to 1).
    """
    if strategy != "direct-quantized":
        raise ConfigurationError(f"unsupported instantiate strategy {strategy!r}")
    net = Supernet(
        genotype.layer_specs(), genotype.channels, genotype.K, genotype.scale, "shared", seed,
        adq=adq, adq_bn=adq_bn, global_residual=genotype.global_residual,
    )
    for layer in net.layers.values():
        layer.alpha_override = np.ones(1)
    return net


# -- discretization --------------------------------------------------------------

def discretize(supernet: Supernet, image_hw: Tuple[int, int] = (32, 32), tie_tol: float = 1e-12) -> Genotype:
    """Per layer, keep the (op, bits) edge with the largest alpha.

    Ties (within ``tie_tol``) go to the lowest BitOps edge, then catalog order.
    """
    from .objective import layer_cost_matrix

    choices: List[LayerChoice] = []
    margins: List[float] = []
    for layer in supernet.layers.values():
        spec = layer.spec
        a = layer.alpha_values()
        costs = layer_cost_matrix(spec, image_hw, supernet.scale).ravel()
        top = a.max()
        tied = [k for k in range(a.size) if a[k] >= top - tie_tol]
        best = min(tied, key=lambda k: (costs[k], k))
        rest = np.delete(a, best)
        margins.append(float(top - (rest.max() if rest.size else 0.0)))
        op_i, bit_i = divmod(best, len(spec.bits))
        choices.append(LayerChoice(spec.block, spec.index, spec.ops[op_i], int(spec.bits[bit_i])))
    return Genotype(
        supernet.channels, supernet.body_repeats, supernet.scale, choices, margins,
        global_residual=supernet.global_residual,
    )


def copy_path_weights(supernet: Supernet, net: Supernet, genotype: Genotype) -> None:
    """Copy the genotype's chosen edge weights/steps from a supernet into ``net``."""
    for choice, (name, dst_layer) in zip(genotype.layers, net.layers.items()):
        src_layer = supernet.layers[name]
        op_i = src_layer.spec.ops.index(canonical_name(choice.op))
        bit_i = src_layer.spec.bits.index(choice.bits)
        src_edge, dst_edge = src_layer.edges[op_i], dst_layer.edges[0]
        src_op = src_edge.ops[bit_i] if src_edge.strategy == "independent" else src_edge.ops[0]
        for ws, wd in zip(src_op.weights, dst_edge.ops[0].weights):
            wd.data = ws.data.copy()
        for bs, bd in zip(src_op.biases, dst_edge.ops[0].biases):
            bd.data = bs.data.copy()
        n_w = len(src_op.weights)
        for j in range(n_w):
            s_spec, d_spec = src_edge._w_spec(bit_i, j), dst_edge._w_spec(0, j)
            if s_spec.initialized:
                d_spec.set_step(float(s_spec.step.data))
        a_src = src_edge.a_specs[bit_i]
        if a_src.initialized:
            dst_edge.a_specs[0].set_step(float(a_src.step.data))
    for src_blk, dst_blk in zip(supernet.adq_blocks, net.adq_blocks):
        dst_blk.load_state_dict(src_blk.state_dict())
