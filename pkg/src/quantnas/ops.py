"""Candidate convolution operations of the search space.

Catalog names:

* ``simple_KxK``            one KxK convolution
* ``simple_KxK_g3``         KxK convolution with 3 channel groups
* ``conv_Kx1_1xK``          spatially separable pair: Kx1 then 1xK

Grouping by 3 uses a genuine grouped convolution when both channel counts
divide by 3; otherwise channels are split into 3 near-equal groups and the
dense kernel is masked block-diagonally, which has the same cost and
connectivity as an uneven grouped convolution.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .nn import Module, Parameter
from .tensor import ConfigurationError, Tensor, conv2d

_SIMPLE = re.compile(r"^simple_(\d+)x(\d+)(?:_g(\d+))?$")
_SEPARABLE = re.compile(r"^conv_(\d+)x1_1x(\d+)$")

# Aliases matching the human-readable catalog spelling ("simple 3x3 grouped 3").
_ALIASES = {
    "simple 1x1": "simple_1x1",
    "simple 3x3": "simple_3x3",
    "simple 5x5": "simple_5x5",
    "simple 3x3 grouped 3": "simple_3x3_g3",
    "simple 5x5 grouped 3": "simple_5x5_g3",
    "conv 5x1 1x5": "conv_5x1_1x5",
    "conv 3x1 1x3": "conv_3x1_1x3",
}


def canonical_name(name: str) -> str:
    name = name.strip()
    return _ALIASES.get(name, name)


@dataclass(frozen=True)
class ConvDesc:
    """Static description of one convolution, enough for cost accounting."""

    kh: int
    kw: int
    cin: int
    cout: int
    groups: int = 1
    stride: int = 1

    def group_sizes(self) -> List[Tuple[int, int]]:
        """(cin, cout) per group; uneven splits when channels do not divide."""
        if self.cin % self.groups == 0 and self.cout % self.groups == 0:
            return [(self.cin // self.groups, self.cout // self.groups)] * self.groups
        ins = [len(a) for a in np.array_split(np.arange(self.cin), self.groups)]
        outs = [len(a) for a in np.array_split(np.arange(self.cout), self.groups)]
        return list(zip(ins, outs))


def parse_op(name: str, cin: int, cout: int) -> List[ConvDesc]:
    """Convolution descriptors for a catalog operation."""
    name = canonical_name(name)
    m = _SIMPLE.match(name)
    if m:
        kh, kw = int(m.group(1)), int(m.group(2))
        groups = int(m.group(3) or 1)
        if groups > min(cin, cout):
            raise ConfigurationError(f"{name}: {groups} groups exceed channels {cin}->{cout}")
        return [ConvDesc(kh, kw, cin, cout, groups)]
    m = _SEPARABLE.match(name)
    if m:
        k1, k2 = int(m.group(1)), int(m.group(2))
        return [ConvDesc(k1, 1, cin, cout), ConvDesc(1, k2, cout, cout)]
    raise ConfigurationError(f"unknown operation {name!r}")


def _group_mask(desc: ConvDesc) -> Optional[np.ndarray]:
    if desc.groups == 1 or (desc.cin % desc.groups == 0 and desc.cout % desc.groups == 0):
        return None
    mask = np.zeros((desc.cout, desc.cin, 1, 1))
    i0 = o0 = 0
    for ci, co in desc.group_sizes():
        mask[o0 : o0 + co, i0 : i0 + ci] = 1.0
        i0 += ci
        o0 += co
    return mask


class ConvOp(Module):
    """A catalog operation: a short chain of (possibly grouped) convolutions.

    Weights are exposed through :attr:`weights` so a BitMixer can substitute
    quantized or noisy versions before the chain is evaluated.
    """

    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator, bias: bool = True) -> None:
        self.name = canonical_name(name)
        self.cin = cin
        self.cout = cout
        self.descs = parse_op(self.name, cin, cout)
        self._frozen_masks = [_group_mask(d) for d in self.descs]
        self.weights: List[Parameter] = []
        self.biases: List[Parameter] = []
        for desc, mask in zip(self.descs, self._frozen_masks):
            native = mask is None
            cin_k = desc.cin // desc.groups if native else desc.cin
            fan_in = desc.kh * desc.kw * max(ci for ci, _ in desc.group_sizes())
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(desc.cout, cin_k, desc.kh, desc.kw))
            if mask is not None:
                w = w * mask
            self.weights.append(Parameter(w))
            self.biases.append(Parameter(np.zeros(desc.cout)) if bias else None)
        if not bias:
            self.biases = []

    def effective_weights(self) -> List[Tensor]:
        """Weights with the uneven-group mask applied (identity when native)."""
        out = []
        for w, mask in zip(self.weights, self._frozen_masks):
            out.append(w if mask is None else w * mask)
        return out

    def run(self, x: Tensor, weights: Sequence[Tensor]) -> Tensor:
        h = x
        for i, (desc, w, mask) in enumerate(zip(self.descs, weights, self._frozen_masks)):
            b = self.biases[i] if self.biases else None
            groups = desc.groups if mask is None else 1
            if mask is not None:
                w = w * mask
            h = conv2d(h, w, b, stride=desc.stride, padding=(desc.kh // 2, desc.kw // 2), groups=groups)
        return h

    def forward(self, x: Tensor) -> Tensor:
        return self.run(x, self.weights)
