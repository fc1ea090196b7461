"""Blending one operation's bit-width variants into a single differentiable edge.

Three strategies are supported:

``independent``
    sum_b alpha_b * o(G(x, b), Q(W_b, b)) with a separate weight copy per bit.
``shared``
    (sum alpha) * o(sum_b ahat_b G(x, b), sum_b ahat_b Q(W, b)) with a single
    weight tensor and one evaluation of ``o``.
``san``
    Same structure as ``shared`` but quantization is replaced by additive
    zero-mean noise, so nothing is rounded and every path is differentiable.

``ahat_b = alpha_b / sum alpha``; the leading ``sum alpha`` restores the signal
magnitude when an edge holds only part of the layer's probability mass.
"""

from __future__ import annotations

from typing import List, Optional, Sequence, Union

import numpy as np

from .nn import Module
from .ops import ConvOp
from .quant import (
    ACT_HWGQ,
    WEIGHT_LSQ,
    QuantSpec,
    ensure_initialized,
    hwgq_quantize_acts,
    hwgq_step_table,
    lsq_quantize_weights,
    qnoise_sample,
    step_init,
)
from .tensor import ConfigurationError, Tensor, sum_tensors

STRATEGIES = ("independent", "shared", "san")
DEAD_ALPHA = 1e-6

AlphaLike = Union[Tensor, float]


class MixedEdge(Module):
    """One candidate operation together with all of its bit-width variants.

    Args:
        op_name: catalog name of the operation.
        cin, cout: channel counts.
        bits: candidate bit widths, in the order used by the alpha vector.
        strategy: one of :data:`STRATEGIES`.
        rng: generator for weight initialization.
        noise_dist: ``gaussian`` or ``uniform`` noise for ``san``.
        san_noise_scaling: ``range`` scales the unit-range noise by the current
            quantization range of the tensor; ``raw`` uses it as is.
        act_noise: ``post`` adds activation noise after the half-wave
            rectifier, ``pre`` before it.
    """

    def __init__(
        self,
        op_name: str,
        cin: int,
        cout: int,
        bits: Sequence[int],
        strategy: str,
        rng: np.random.Generator,
        noise_dist: str = "gaussian",
        san_noise_scaling: str = "range",
        act_noise: str = "post",
    ) -> None:
        if strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {strategy!r}")
        if san_noise_scaling not in ("range", "raw"):
            raise ConfigurationError(f"unknown san_noise_scaling {san_noise_scaling!r}")
        if act_noise not in ("pre", "post"):
            raise ConfigurationError(f"unknown act_noise {act_noise!r}")
        if not bits:
            raise ConfigurationError("an edge needs at least one bit width")
        self.op_name = op_name
        self.bits = [int(b) for b in bits]
        self.strategy = strategy
        self.noise_dist = noise_dist
        self.san_noise_scaling = san_noise_scaling
        self.act_noise = act_noise
        n_ops = len(self.bits) if strategy == "independent" else 1
        self.ops: List[ConvOp] = [ConvOp(op_name, cin, cout, rng) for _ in range(n_ops)]
        n_w = len(self.ops[0].weights)
        self.w_specs: List[QuantSpec] = [QuantSpec(b, WEIGHT_LSQ) for b in self.bits for _ in range(n_w)]
        self.a_specs: List[QuantSpec] = [QuantSpec(b, ACT_HWGQ) for b in self.bits]
        self.noise_enabled = True
        self.dead = False
        self.cout = cout

    @property
    def descs(self):
        return self.ops[0].descs

    def _w_spec(self, bit_idx: int, w_idx: int) -> QuantSpec:
        return self.w_specs[bit_idx * len(self.ops[0].weights) + w_idx]

    # -- quantized building blocks ---------------------------------------------
    def quant_act(self, x: Tensor, bit_idx: int) -> Tensor:
        spec = self.a_specs[bit_idx]
        ensure_initialized(spec, x.data)
        return hwgq_quantize_acts(x, spec)

    def quant_weights(self, op: ConvOp, bit_idx: int) -> List[Tensor]:
        out = []
        for i, w in enumerate(op.effective_weights()):
            spec = self._w_spec(bit_idx, i)
            ensure_initialized(spec, w.data)
            out.append(lsq_quantize_weights(w, spec))
        return out

    def single_bit_path(self, x: Tensor, bit_idx: int) -> Tensor:
        """o(G(x, b), Q(W_b, b)) for one bit width, without mixing."""
        op = self.ops[bit_idx] if self.strategy == "independent" else self.ops[0]
        return op.run(self.quant_act(x, bit_idx), self.quant_weights(op, bit_idx))

    # -- noise scales -------------------------------------------------------------
    def _act_noise_scale(self, x: np.ndarray, bit_idx: int) -> float:
        if self.san_noise_scaling == "raw":
            return 1.0
        b = self.bits[bit_idx]
        sigma = float(np.std(x))
        return hwgq_step_table(b) * sigma * (2**b - 1)

    def _weight_noise_scale(self, w: np.ndarray, bit_idx: int, w_idx: int) -> float:
        if self.san_noise_scaling == "raw":
            return 1.0
        spec = self._w_spec(bit_idx, w_idx)
        return step_init(w, spec) * spec.q_pos

    # -- mixing -------------------------------------------------------------------
    def forward(self, x: Tensor, alpha: Sequence[AlphaLike], rng: Optional[np.random.Generator] = None) -> Tensor:
        if len(alpha) != len(self.bits):
            raise ConfigurationError(f"expected {len(self.bits)} alpha values, got {len(alpha)}")
        alpha = [a if isinstance(a, Tensor) else Tensor(a) for a in alpha]
        if sum(float(a.data) for a in alpha) < DEAD_ALPHA:
            self.dead = True
            n, _, h, w = x.shape
            return Tensor(np.zeros((n, self.cout, h, w)))
        self.dead = False
        if self.strategy == "independent":
            return self.mix_independent(x, alpha)
        if self.strategy == "shared":
            return self.mix_shared(x, alpha)
        return self.mix_san(x, alpha, rng)

    def mix_independent(self, x: Tensor, alpha: Sequence[Tensor]) -> Tensor:
        return sum_tensors([a * self.single_bit_path(x, i) for i, a in enumerate(alpha)])

    def mix_shared(self, x: Tensor, alpha: Sequence[Tensor]) -> Tensor:
        total = sum_tensors(alpha)
        ahat = [a / total for a in alpha]
        op = self.ops[0]
        x_mix = sum_tensors([ah * self.quant_act(x, i) for i, ah in enumerate(ahat)])
        per_bit = [self.quant_weights(op, i) for i in range(len(self.bits))]
        w_mix = [sum_tensors([ah * per_bit[i][j] for i, ah in enumerate(ahat)]) for j in range(len(op.weights))]
        return total * op.run(x_mix, w_mix)

    def mix_san(self, x: Tensor, alpha: Sequence[Tensor], rng: Optional[np.random.Generator]) -> Tensor:
        total = sum_tensors(alpha)
        ahat = [a / total for a in alpha]
        op = self.ops[0]
        weights = op.effective_weights()
        if not self.noise_enabled:
            return total * op.run(x.relu(), weights)
        if rng is None:
            raise ConfigurationError("san strategy needs an rng for noise sampling")

        act_noise = []
        for i, ah in enumerate(ahat):
            z = qnoise_sample(x.shape, self.bits[i], rng, self.noise_dist)
            act_noise.append(ah * Tensor(z.data * self._act_noise_scale(x.data, i)))
        if self.act_noise == "post":
            x_in = x.relu() + sum_tensors(act_noise)
        else:
            x_in = (x + sum_tensors(act_noise)).relu()

        w_in = []
        for j, w in enumerate(weights):
            terms = []
            for i, ah in enumerate(ahat):
                z = qnoise_sample(w.shape, self.bits[i], rng, self.noise_dist)
                terms.append(ah * Tensor(z.data * self._weight_noise_scale(w.data, i, j)))
            w_in.append(w + sum_tensors(terms))
        return total * op.run(x_in, w_in)
