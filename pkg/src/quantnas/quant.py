"""Fake quantizers for weights (LSQ) and activations (half-wave uniform),
straight-through gradients, and additive quantization-noise sampling."""

from __future__ import annotations

import functools
import logging
import math
from typing import Optional, Sequence, Union

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import ndtr

from .nn import Module, Parameter
from .tensor import ConfigurationError, ContractError, Tensor

logger = logging.getLogger(__name__)

WEIGHT_LSQ = "weight-lsq"
ACT_HWGQ = "act-hwgq"
MIN_STEP = 1e-8
ZERO_WEIGHT_STEP = 1e-3


class QuantSpec(Module):
    """Bit width, learnable step and quantizer kind for one tensor.

    The step starts uninitialized; the first quantized forward sets it from
    the data with :func:`step_init`.
    """

    def __init__(self, bits: int, kind: str = WEIGHT_LSQ, step: float = 1.0) -> None:
        if kind not in (WEIGHT_LSQ, ACT_HWGQ):
            raise ConfigurationError(f"unknown quantizer kind {kind!r}")
        if not 2 <= bits <= 8:
            raise ConfigurationError(f"bits must be in 2..8, got {bits}")
        self.bits = int(bits)
        self.kind = kind
        self.step = Parameter(float(step))
        self.initialized = False
        self._warned = False

    def __repr__(self) -> str:
        return f"QuantSpec(bits={self.bits}, kind={self.kind!r}, step={float(self.step.data):.4g})"

    @property
    def q_neg(self) -> int:
        return 2 ** (self.bits - 1) if self.kind == WEIGHT_LSQ else 0

    @property
    def q_pos(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.kind == WEIGHT_LSQ else 2**self.bits - 1

    def set_step(self, value: float) -> None:
        self.step.data = np.array(float(value))
        self.initialized = True

    def clamp_step(self) -> float:
        s = float(self.step.data)
        if not s > MIN_STEP:
            if not self._warned:
                logger.warning("quantizer step %.3g clamped to %.0e", s, MIN_STEP)
                self._warned = True
            s = MIN_STEP
            self.step.data = np.array(s)
        return s

    def buffers(self):
        return {"initialized": np.array(float(self.initialized))}

    def load_buffers(self, buffers) -> None:
        self.initialized = bool(buffers["initialized"])


def noise_delta(bits: float) -> float:
    """Quantization interval on the unit range, 1 / (2^b - 1)."""
    return 1.0 / (2.0**bits - 1.0)


def lsq_quantize_weights(w: Tensor, spec: QuantSpec) -> Tensor:
    """clamp(round(W/s), -Q_N, Q_P) * s with LSQ gradients for W and s."""
    if spec.kind != WEIGHT_LSQ:
        raise ContractError(f"expected a {WEIGHT_LSQ} spec, got {spec.kind}")
    s = spec.clamp_step()
    qn, qp = spec.q_neg, spec.q_pos
    v = w.data / s
    q = np.clip(np.round(v), -qn, qp)
    inside = (v >= -qn) & (v <= qp)
    grad_scale = 1.0 / math.sqrt(w.data.size * qp)
    step = spec.step

    def backward(g):
        gw = g * inside if w.requires_grad else None
        gs = None
        if step.requires_grad:
            gs = np.asarray(np.sum(g * np.where(inside, q - v, q)) * grad_scale)
        return gw, gs

    return Tensor._make(q * s, (w, step), backward, "lsq")


def hwgq_quantize_acts(x: Tensor, spec: QuantSpec) -> Tensor:
    """Half-wave uniform quantizer: levels {0, s, ..., (2^b - 1) s}.

    Negative inputs map to zero. The input gradient is straight-through on
    (0, (2^b - 1) s] and zero elsewhere; the step gets the LSQ gradient.
    """
    if spec.kind != ACT_HWGQ:
        raise ContractError(f"expected an {ACT_HWGQ} spec, got {spec.kind}")
    s = spec.clamp_step()
    qp = spec.q_pos
    v = x.data / s
    q = np.clip(np.round(v), 0, qp)
    inside = (v > 0) & (v <= qp)
    above = v > qp
    grad_scale = 1.0 / math.sqrt(x.data.size * qp)
    step = spec.step

    def backward(g):
        gx = g * inside if x.requires_grad else None
        gs = None
        if step.requires_grad:
            gs = np.asarray(np.sum(g * (inside * (q - v) + above * qp)) * grad_scale)
        return gx, gs

    return Tensor._make(q * s, (x, step), backward, "hwgq")


def qnoise_sample(
    shape: Sequence[int],
    bits: float,
    rng: np.random.Generator,
    dist: str = "gaussian",
) -> Tensor:
    """Quantization noise with scale Delta/2, Delta = 1/(2^b - 1).

    ``gaussian`` draws Delta/2 * z with z ~ N(0, 1); ``uniform`` draws from
    [-Delta/2, Delta/2]. The result is a constant (no graph).
    """
    if bits < 2:
        raise ConfigurationError(f"bits must be >= 2, got {bits}")
    half = 0.5 * noise_delta(bits)
    if dist == "gaussian":
        return Tensor(half * rng.standard_normal(tuple(shape)))
    if dist == "uniform":
        return Tensor(rng.uniform(-half, half, size=tuple(shape)))
    raise ConfigurationError(f"unknown noise distribution {dist!r}")


# -- half-wave Gaussian step table ------------------------------------------

def _phi(x: float) -> float:
    return math.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)


def _segment_sq_error(a: float, b: float, c: float) -> float:
    """E[(X - c)^2 ; a < X <= b] for X ~ N(0, 1)."""

    def moment2(t):  # integral of x^2 phi
        if math.isinf(t):
            return 1.0 if t > 0 else 0.0
        return ndtr(t) - t * _phi(t)

    def moment1(t):  # integral of x phi
        return 0.0 if math.isinf(t) else -_phi(t)

    def moment0(t):
        return 1.0 if t == math.inf else float(ndtr(t))

    m2 = moment2(b) - moment2(a)
    m1 = moment1(b) - moment1(a)
    m0 = moment0(b) - moment0(a)
    return m2 - 2.0 * c * m1 + c * c * m0


def halfwave_mse(step: float, bits: int) -> float:
    """MSE between relu(X) and its half-wave uniform quantization, X ~ N(0, 1)."""
    top = 2**bits - 1
    total = 0.0
    for k in range(top + 1):
        lo = 0.0 if k == 0 else (k - 0.5) * step
        hi = math.inf if k == top else (k + 0.5) * step
        total += _segment_sq_error(lo, hi, k * step)
    return total


@functools.lru_cache(maxsize=None)
def hwgq_step_table(bits: int) -> float:
    """MSE-optimal uniform step of the half-wave quantizer for N(0, 1) inputs."""
    top = 2**bits - 1
    # the optimum clips near a few sigma; bracket generously
    res = minimize_scalar(
        halfwave_mse, bounds=(1e-4, 8.0 / top + 1e-3), args=(bits,), method="bounded",
        options={"xatol": 1e-12, "maxiter": 500},
    )
    return float(res.x)


def step_init(w_or_stats: Union[np.ndarray, Tensor, float], spec: QuantSpec) -> float:
    """Initial step size.

    weight-lsq: 2 * mean|W| / sqrt(Q_P), falling back to 1e-3 for all-zero W.
    act-hwgq: table step for N(0, 1) scaled by the input standard deviation,
    given either as a float or as a sample array.
    """
    if isinstance(w_or_stats, Tensor):
        w_or_stats = w_or_stats.data
    if spec.kind == WEIGHT_LSQ:
        mean_abs = float(np.mean(np.abs(w_or_stats)))
        if mean_abs == 0.0:
            return ZERO_WEIGHT_STEP
        return 2.0 * mean_abs / math.sqrt(spec.q_pos)
    sigma = float(w_or_stats) if np.ndim(w_or_stats) == 0 else float(np.std(w_or_stats))
    if sigma <= 0.0:
        return ZERO_WEIGHT_STEP
    return hwgq_step_table(spec.bits) * sigma


def ensure_initialized(spec: QuantSpec, sample: Optional[np.ndarray]) -> None:
    if not spec.initialized and sample is not None:
        spec.set_step(step_init(sample, spec))
