"""Search losses and the static FLOPs/BitOps cost model.

FLOPs are counted as multiply-accumulates of convolutions only; BitOps of a
layer quantized to ``b`` bits (weights and activations alike) are
``b**2 * FLOPs``.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple, Union

import numpy as np

from .ops import ConvDesc, parse_op
from .tensor import ContractError, Tensor

DEFAULT_BITOPS_HW = (32, 32)
DEFAULT_FLOPS_HW = (256, 256)


def l1_loss(pred: Tensor, target: Union[Tensor, np.ndarray]) -> Tensor:
    """Mean absolute error over every element."""
    target_data = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if pred.shape != target_data.shape:
        raise ContractError(f"prediction {pred.shape} and target {target_data.shape} differ")
    return (pred - Tensor(target_data)).abs().mean()


# -- cost model ------------------------------------------------------------------

def flops_of(op: Union[ConvDesc, Sequence[ConvDesc]], input_hw: Tuple[int, int], macs_per_flop: int = 1) -> float:
    """Multiply-accumulate count of a convolution (or chain) at ``input_hw``.

    Spatial size is preserved by 'same' padding; strided descriptors divide it.
    ``macs_per_flop=2`` switches to the two-operations-per-MAC convention.
    """
    descs = [op] if isinstance(op, ConvDesc) else list(op)
    h, w = input_hw
    total = 0.0
    for d in descs:
        h_out = (h + 2 * (d.kh // 2) - d.kh) // d.stride + 1
        w_out = (w + 2 * (d.kw // 2) - d.kw) // d.stride + 1
        per_pixel = sum(ci * co for ci, co in d.group_sizes()) * d.kh * d.kw
        total += per_pixel * h_out * w_out
        h, w = h_out, w_out
    return float(total * macs_per_flop)


def layer_input_hw(spec, image_hw: Tuple[int, int], scale: int) -> Tuple[int, int]:
    h, w = image_hw
    return (h * scale, w * scale) if spec.high_res else (h, w)


def layer_cost_matrix(spec, image_hw: Tuple[int, int], scale: int) -> np.ndarray:
    """b^2 * FLOPs for every (op, bit) edge of a layer, shape (ops, bits)."""
    hw = layer_input_hw(spec, image_hw, scale)
    flops = np.array([flops_of(parse_op(op, spec.cin, spec.cout), hw) for op in spec.ops])
    bits = np.array(spec.bits, dtype=np.float64)
    return flops[:, None] * bits[None, :] ** 2


def soft_bitops_inner(supernet, image_hw: Tuple[int, int] = DEFAULT_BITOPS_HW) -> Tensor:
    """Unnormalized sum_l sum_i sum_b alpha_ib^l b^2 F(o_i^l, x_l)."""
    terms = []
    for layer in supernet.layers.values():
        costs = layer_cost_matrix(layer.spec, image_hw, supernet.scale).ravel()
        terms.append((layer.alpha() * Tensor(costs)).sum())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def soft_bitops_init(supernet, image_hw: Tuple[int, int] = DEFAULT_BITOPS_HW) -> float:
    """Value of the inner sum under uniform alpha in every layer."""
    # same summation order as soft_bitops_inner so uniform alpha gives exactly 1
    total = None
    for layer in supernet.layers.values():
        costs = layer_cost_matrix(layer.spec, image_hw, supernet.scale).ravel()
        term = (np.full(costs.size, 1.0 / costs.size) * costs).sum()
        total = term if total is None else total + term
    return float(total)


def soft_bitops_loss(supernet, image_hw: Tuple[int, int] = DEFAULT_BITOPS_HW) -> Tensor:
    """Hardware penalty normalized to 1 at uniform alpha."""
    return soft_bitops_inner(supernet, image_hw) / soft_bitops_init(supernet, image_hw)


def entropy(alpha: Tensor, floor: float = 1e-12) -> Tensor:
    """Shannon entropy (natural log); entries below ``floor`` contribute 0."""
    a = alpha.data
    live = a >= floor
    safe = np.where(live, a, 1.0)
    logs = np.log(safe)
    h = -float(np.sum(np.where(live, a * logs, 0.0)))

    def backward(g):
        return (g * np.where(live, -(logs + 1.0), 0.0),)

    return Tensor._make(np.asarray(h), (alpha,), backward, "entropy")


def entropy_loss(supernet) -> Tensor:
    terms = [entropy(layer.alpha()) for layer in supernet.layers.values()]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


@dataclass
class ScheduleState:
    epoch: int
    total_epochs: int
    mu0: float = 1e-4
    eta: float = 0.0
    warmup_epochs: int = 2

    @property
    def mu(self) -> float:
        return mu_schedule(self.epoch, self.total_epochs, self.mu0, self.warmup_epochs)


def mu_schedule(epoch: int, total_epochs: int, mu0: float, warmup_epochs: int = 2) -> float:
    """Entropy coefficient: zero during warm-up, then mu0 * (t/T) * log(1 + t)."""
    if epoch < warmup_epochs or total_epochs <= 0:
        return 0.0
    return mu0 * (epoch / total_epochs) * math.log1p(epoch)


def total_alpha_loss(l1: Tensor, cq: Tensor, e: Tensor, eta: float, mu: float) -> Tensor:
    return l1 + cq.scalar_mul(eta) + e.scalar_mul(mu)


# -- reports -----------------------------------------------------------------------

@dataclass
class CostRow:
    layer_id: str
    block: str
    op: str
    bits: int
    flops: float
    bitops: float


@dataclass
class CostReport:
    rows: List[CostRow] = field(default_factory=list)
    image_hw: Tuple[int, int] = DEFAULT_BITOPS_HW

    @property
    def total_flops(self) -> float:
        return float(sum(r.flops for r in self.rows))

    @property
    def total_bitops(self) -> float:
        return float(sum(r.bitops for r in self.rows))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer_id", "block", "op", "bits", "flops", "bitops"])
        for r in self.rows:
            writer.writerow([r.layer_id, r.block, r.op, r.bits, repr(r.flops), repr(r.bitops)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, image_hw: Tuple[int, int] = DEFAULT_BITOPS_HW) -> "CostReport":
        reader = csv.DictReader(io.StringIO(text))
        rows = [
            CostRow(d["layer_id"], d["block"], d["op"], int(d["bits"]), float(d["flops"]), float(d["bitops"]))
            for d in reader
        ]
        return cls(rows, image_hw)


def cost_report(genotype, image_hw: Tuple[int, int] = DEFAULT_BITOPS_HW) -> CostReport:
    rows = []
    for spec in genotype.layer_specs():
        hw = layer_input_hw(spec, image_hw, genotype.scale)
        flops = flops_of(parse_op(spec.ops[0], spec.cin, spec.cout), hw)
        b = spec.bits[0]
        rows.append(CostRow(spec.layer_id, spec.block, spec.ops[0], b, flops, b * b * flops))
    return CostReport(rows, tuple(image_hw))


def espcn_layers(scale: int = 4, channels: int = 3) -> List[ConvDesc]:
    """ESPCN: 5x5 3->64, 3x3 64->32, 3x3 32->3 r^2 (pixel shuffle follows)."""
    return [
        ConvDesc(5, 5, channels, 64),
        ConvDesc(3, 3, 64, 32),
        ConvDesc(3, 3, 32, channels * scale * scale),
    ]


def espcn_report(bits: int = 8, image_hw: Tuple[int, int] = DEFAULT_BITOPS_HW, scale: int = 4) -> CostReport:
    rows = []
    for i, d in enumerate(espcn_layers(scale)):
        f = flops_of(d, image_hw)
        rows.append(CostRow(f"espcn.{i}", "espcn", f"conv_{d.kh}x{d.kw}_{d.cin}to{d.cout}", bits, f, bits * bits * f))
    return CostReport(rows, tuple(image_hw))
