"""Alternating architecture/weight search, retraining, evaluation and sweeps."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .data import SRPairs, ToyTask, bicubic_upscale
from .nn import SGD, Adam, Module, cosine_lr
from .objective import (
    cost_report,
    entropy_loss,
    l1_loss,
    mu_schedule,
    soft_bitops_loss,
    total_alpha_loss,
)
from .supernet import (
    Genotype,
    LayerChoice,
    SearchSpaceSpec,
    Supernet,
    build_supernet,
    discretize,
    instantiate,
)
from .tensor import ConfigurationError, Tensor, conv_counter, no_grad

logger = logging.getLogger(__name__)

Y_WEIGHTS = np.array([0.299, 0.587, 0.114])


class SearchAborted(RuntimeError):
    """A loss or gradient became non-finite; ``snapshot`` holds diagnostics."""

    def __init__(self, message: str, snapshot: dict) -> None:
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class SearchConfig:
    epochs: int = 20
    batch_size: int = 16
    w_lr: float = 1e-3
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-7
    w_optimizer: str = "sgd"
    alpha_lr: float = 3e-4
    eta: float = 0.0
    mu0: float = 1e-4
    warmup_epochs: int = 2
    step_lr_scale: float = 1.0
    seed: int = 0
    strategy: str = "san"
    bitops_hw: Tuple[int, int] = (32, 32)
    max_iters_per_epoch: Optional[int] = None

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.w_optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown w_optimizer {self.w_optimizer!r}")
        if self.step_lr_scale < 0:
            raise ConfigurationError("step_lr_scale must be non-negative")
        if self.eta < 0 or self.mu0 < 0:
            raise ConfigurationError("eta and mu0 must be non-negative")


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    w_lr: float = 1e-3
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-7
    w_optimizer: str = "sgd"
    step_lr_scale: float = 1.0
    seed: int = 0
    max_iters_per_epoch: Optional[int] = None
    eval_crop: Optional[int] = None

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if self.w_optimizer not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown w_optimizer {self.w_optimizer!r}")
        if self.step_lr_scale < 0:
            raise ConfigurationError("step_lr_scale must be non-negative")


# -- helpers ------------------------------------------------------------------------

def _streams(seed: int, n: int) -> List[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _batches(n: int, batch_size: int, rng: np.random.Generator, limit: Optional[int]) -> Iterator[np.ndarray]:
    order = rng.permutation(n)
    count = max(1, n // batch_size)
    if limit is not None:
        count = min(count, limit)
    for k in range(count):
        yield np.sort(order[k * batch_size : (k + 1) * batch_size])


def _cycle_batches(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    while True:
        yield from _batches(n, batch_size, rng, None)


class _WeightOptimizer:
    """Network weights and quantizer steps as two groups sharing one schedule.

    Steps are tiny (about 1e-3 for 8-bit activations), so they get their own
    learning rate ``lr * step_lr_scale`` and no weight decay.
    """

    def __init__(self, module: Module, cfg) -> None:
        steps = {id(p) for name, p in module.named_parameters() if name.endswith(".step")}
        params = module.weight_parameters() if hasattr(module, "weight_parameters") else module.parameters()
        main = [p for p in params if id(p) not in steps]
        quant = [p for p in params if id(p) in steps]
        self.step_lr_scale = cfg.step_lr_scale
        if cfg.w_optimizer == "adam":
            self._main = Adam(main, lr=cfg.w_lr, weight_decay=cfg.w_weight_decay)
            self._steps = Adam(quant, lr=cfg.w_lr * cfg.step_lr_scale)
        else:
            self._main = SGD(main, lr=cfg.w_lr, momentum=cfg.w_momentum, weight_decay=cfg.w_weight_decay)
            self._steps = SGD(quant, lr=cfg.w_lr * cfg.step_lr_scale, momentum=cfg.w_momentum)

    @property
    def lr(self) -> float:
        return self._main.lr

    @lr.setter
    def lr(self, value: float) -> None:
        self._main.lr = value
        self._steps.lr = value * self.step_lr_scale

    def step(self) -> None:
        self._main.step()
        self._steps.step()

    def zero_grad(self) -> None:
        self._main.zero_grad()
        self._steps.zero_grad()


def _check_finite(value: float, what: str, snapshot: Callable[[], dict]) -> None:
    if not math.isfinite(value):
        snap = snapshot()
        snap["failed"] = what
        raise SearchAborted(f"non-finite {what} at epoch {snap.get('epoch')}", snap)


def _backward_or_abort(loss: Tensor, snapshot: Callable[[], dict]) -> None:
    try:
        loss.backward()
    except FloatingPointError as exc:
        snap = snapshot()
        snap["failed"] = "gradient"
        raise SearchAborted(str(exc), snap) from exc


# -- search ---------------------------------------------------------------------------

HISTORY_FIELDS = ("epoch", "l1", "l_cq", "l_e", "mu", "lr_w")


def search(
    supernet: Supernet,
    alpha_data: SRPairs,
    weight_data: SRPairs,
    cfg: SearchConfig,
) -> Tuple[Genotype, List[dict]]:
    """Alternate one alpha step (split A) and one weight step (split B) per iteration.

    Returns the discretized genotype and one history row per epoch holding
    epoch means of the losses, the entropy coefficient and every layer's
    largest alpha (``max_alpha.<layer>``).
    """
    cfg.validate()
    if alpha_data is weight_data:
        raise ConfigurationError("alpha and weight updates need disjoint data splits")
    data_rng, noise_rng = _streams(cfg.seed, 2)
    alpha_opt = Adam(supernet.alpha_parameters(), lr=cfg.alpha_lr, weight_decay=0.0)
    w_opt = _WeightOptimizer(supernet, cfg)
    batches_a = _cycle_batches(len(alpha_data), cfg.batch_size, data_rng)
    history: List[dict] = []
    state = {"epoch": 0, "iteration": 0}

    def snapshot() -> dict:
        return {**state, "alphas": {k: v.tolist() for k, v in supernet.alphas().items()}}

    supernet.train()
    for epoch in range(cfg.epochs):
        state["epoch"] = epoch
        mu = mu_schedule(epoch, cfg.epochs, cfg.mu0, cfg.warmup_epochs)
        w_opt.lr = cosine_lr(cfg.w_lr, epoch, cfg.epochs)
        sums = {"l1": 0.0, "l_cq": 0.0, "l_e": 0.0}
        n_iter = 0
        for idx_b in _batches(len(weight_data), cfg.batch_size, data_rng, cfg.max_iters_per_epoch):
            state["iteration"] += 1
            idx_a = next(batches_a)

            # architecture step on split A
            supernet.set_pass(alpha=True, weights=False)
            supernet.set_bn_update(False)
            batch = alpha_data.subset(idx_a)
            pred = supernet(Tensor(batch.lr), noise_rng)
            l1 = l1_loss(pred, batch.hr)
            cq = soft_bitops_loss(supernet, cfg.bitops_hw)
            ent = entropy_loss(supernet)
            loss = total_alpha_loss(l1, cq, ent, cfg.eta, mu)
            _check_finite(loss.item(), "alpha loss", snapshot)
            alpha_opt.zero_grad()
            _backward_or_abort(loss, snapshot)
            alpha_opt.step()
            sums["l_cq"] += cq.item()
            sums["l_e"] += ent.item()

            # weight step on split B with fresh noise
            supernet.set_pass(alpha=False, weights=True)
            supernet.set_bn_update(True)
            batch = weight_data.subset(idx_b)
            w_loss = l1_loss(supernet(Tensor(batch.lr), noise_rng), batch.hr)
            _check_finite(w_loss.item(), "weight loss", snapshot)
            w_opt.zero_grad()
            _backward_or_abort(w_loss, snapshot)
            w_opt.step()
            sums["l1"] += w_loss.item()
            n_iter += 1

        row = {
            "epoch": epoch,
            "l1": sums["l1"] / n_iter,
            "l_cq": sums["l_cq"] / n_iter,
            "l_e": sums["l_e"] / n_iter,
            "mu": mu,
            "lr_w": w_opt.lr,
        }
        for name, a in supernet.alphas().items():
            row[f"max_alpha.{name}"] = float(a.max())
        history.append(row)
        logger.info("epoch %d l1 %.5f cq %.4f ent %.4f", epoch, row["l1"], row["l_cq"], row["l_e"])

    supernet.set_pass(alpha=True, weights=True)
    supernet.set_bn_update(True)
    return discretize(supernet, cfg.bitops_hw), history


def history_to_csv(history: Sequence[dict]) -> str:
    buf = io.StringIO()
    if not history:
        return ""
    keys = list(history[0].keys())
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(keys)
    for row in history:
        writer.writerow([repr(row[k]) if isinstance(row[k], float) else row[k] for k in keys])
    return buf.getvalue()


def history_from_csv(text: str) -> List[dict]:
    rows = []
    for d in csv.DictReader(io.StringIO(text)):
        rows.append({k: (int(v) if k == "epoch" else float(v)) for k, v in d.items()})
    return rows


def final_max_alpha(history: Sequence[dict]) -> float:
    """Mean over layers of the largest alpha in the last epoch."""
    last = history[-1]
    vals = [v for k, v in last.items() if k.startswith("max_alpha.")]
    return float(np.mean(vals))


# -- evaluation -----------------------------------------------------------------------

def rgb_to_y(images: np.ndarray) -> np.ndarray:
    """BT.601 luma of (..., 3, H, W) images in [0, 1]."""
    return np.tensordot(Y_WEIGHTS, images, axes=([0], [-3]))


def psnr(pred: np.ndarray, target: np.ndarray, crop: int = 0) -> float:
    """PSNR in dB on the Y channel; +inf when the images are identical."""
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ConfigurationError(f"shape mismatch {pred.shape} vs {target.shape}")
    y_p, y_t = rgb_to_y(pred), rgb_to_y(target)
    if crop:
        y_p = y_p[..., crop:-crop, crop:-crop]
        y_t = y_t[..., crop:-crop, crop:-crop]
    mse = float(np.mean((y_p - y_t) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def predict(net: Module, lr: np.ndarray, batch_size: int = 8) -> np.ndarray:
    net.eval()
    outs = []
    with no_grad():
        for i in range(0, lr.shape[0], batch_size):
            outs.append(net(Tensor(lr[i : i + batch_size])).data)
    net.train()
    return np.clip(np.concatenate(outs), 0.0, 1.0)


def evaluate(net: Module, pairs: SRPairs, crop: Optional[int] = None) -> float:
    crop = pairs.scale if crop is None else crop
    return psnr(predict(net, pairs.lr), pairs.hr, crop)


def bicubic_psnr(pairs: SRPairs, crop: Optional[int] = None) -> float:
    crop = pairs.scale if crop is None else crop
    return psnr(np.clip(bicubic_upscale(pairs.lr, pairs.scale), 0.0, 1.0), pairs.hr, crop)


# -- retraining -----------------------------------------------------------------------

def retrain(
    genotype: Genotype,
    train_data: SRPairs,
    test_data: SRPairs,
    cfg: TrainConfig,
    adq: bool = True,
    adq_bn: bool = True,
) -> Tuple[Supernet, dict]:
    """Train the genotype's fixed network from scratch with fake quantization."""
    cfg.validate()
    net = instantiate(genotype, seed=cfg.seed, adq=adq, adq_bn=adq_bn)
    (data_rng,) = _streams(cfg.seed + 1_000_003, 1)
    opt = _WeightOptimizer(net, cfg)
    state = {"epoch": 0, "iteration": 0}
    losses = []

    def snapshot() -> dict:
        return dict(state)

    net.train()
    for epoch in range(cfg.epochs):
        state["epoch"] = epoch
        opt.lr = cosine_lr(cfg.w_lr, epoch, cfg.epochs)
        total, n_iter = 0.0, 0
        for idx in _batches(len(train_data), cfg.batch_size, data_rng, cfg.max_iters_per_epoch):
            state["iteration"] += 1
            batch = train_data.subset(idx)
            loss = l1_loss(net(Tensor(batch.lr)), batch.hr)
            _check_finite(loss.item(), "training loss", snapshot)
            opt.zero_grad()
            _backward_or_abort(loss, snapshot)
            opt.step()
            total += loss.item()
            n_iter += 1
        losses.append(total / n_iter)
    report = cost_report(genotype)
    metrics = {
        "psnr": evaluate(net, test_data, cfg.eval_crop),
        "bicubic_psnr": bicubic_psnr(test_data, cfg.eval_crop),
        "final_l1": losses[-1],
        "bitops": report.total_bitops,
        "flops": report.total_flops,
    }
    return net, metrics


def random_genotype(space: SearchSpaceSpec, rng: np.random.Generator) -> Genotype:
    """Uniformly random (op, bits) per layer."""
    choices = []
    for spec in space.layer_specs():
        op = spec.ops[int(rng.integers(len(spec.ops)))]
        bits = spec.bits[int(rng.integers(len(spec.bits)))]
        choices.append(LayerChoice(spec.block, spec.index, op, int(bits)))
    return Genotype(
        space.channels, space.body_repeats, space.scale, choices, [0.0] * len(choices),
        global_residual=space.global_residual,
    )


def uniform_genotype(space: SearchSpaceSpec, op_index: int, bits: int) -> Genotype:
    """Same catalog position and bit width in every layer (clamped to catalog size)."""
    choices = [
        LayerChoice(s.block, s.index, s.ops[min(op_index, len(s.ops) - 1)], bits) for s in space.layer_specs()
    ]
    return Genotype(
        space.channels, space.body_repeats, space.scale, choices, [0.0] * len(choices),
        global_residual=space.global_residual,
    )


# -- end-to-end runs ------------------------------------------------------------------

@dataclass
class RunResult:
    eta: float
    seed: int
    genotype: Optional[Genotype]
    history: List[dict]
    bitops: float = math.nan
    psnr: float = math.nan
    error: str = ""


def search_and_retrain(
    space: SearchSpaceSpec,
    task: ToyTask,
    search_cfg: SearchConfig,
    train_cfg: Optional[TrainConfig] = None,
    **edge_kw,
) -> RunResult:
    net = build_supernet(space, search_cfg.strategy, search_cfg.seed, **edge_kw)
    geno, history = search(net, task.alpha_split, task.weight_split, search_cfg)
    result = RunResult(search_cfg.eta, search_cfg.seed, geno, history, bitops=cost_report(geno).total_bitops)
    if train_cfg is not None:
        _, metrics = retrain(geno, task.train, task.test, replace(train_cfg, seed=search_cfg.seed), space.adq, space.adq_bn)
        result.psnr = metrics["psnr"]
    return result


def non_dominated(points: Sequence[Tuple[float, float]]) -> List[int]:
    """Indices of (bitops, psnr) points no other point dominates.

    A point dominates another when its bitops is no larger and its psnr no
    smaller, with at least one strict inequality.
    """
    keep = []
    for i, (b_i, p_i) in enumerate(points):
        dominated = any(
            (b_j <= b_i and p_j >= p_i) and (b_j < b_i or p_j > p_i)
            for j, (b_j, p_j) in enumerate(points)
            if j != i
        )
        if not dominated:
            keep.append(i)
    return keep


def pareto_sweep(
    space: SearchSpaceSpec,
    task: ToyTask,
    etas: Sequence[float],
    search_cfg: SearchConfig,
    train_cfg: TrainConfig,
    out_dir: Optional[Path] = None,
    **edge_kw,
) -> Tuple[List[RunResult], List[int]]:
    """Search and retrain once per eta; failed runs are kept with their error."""
    results: List[RunResult] = []
    for k, eta in enumerate(etas):
        cfg = replace(search_cfg, eta=float(eta))
        try:
            res = search_and_retrain(space, task, cfg, train_cfg, **edge_kw)
        except (SearchAborted, FloatingPointError, ConfigurationError) as exc:
            logger.warning("sweep run eta=%g failed: %s", eta, exc)
            res = RunResult(float(eta), cfg.seed, None, [], error=str(exc))
        if out_dir is not None and res.genotype is not None:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            res.genotype.save(Path(out_dir) / f"genotype_{k:02d}.json")
        results.append(res)
    ok = [i for i, r in enumerate(results) if r.genotype is not None]
    front = non_dominated([(results[i].bitops, results[i].psnr) for i in ok])
    return results, [ok[i] for i in front]


def sweep_to_csv(results: Sequence[RunResult], front: Sequence[int]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["eta", "seed", "bitops", "psnr", "pareto", "error"])
    for i, r in enumerate(results):
        writer.writerow([repr(r.eta), r.seed, repr(r.bitops), repr(r.psnr), int(i in front), r.error])
    return buf.getvalue()


def sweep_from_csv(text: str) -> List[dict]:
    rows = []
    for d in csv.DictReader(io.StringIO(text)):
        rows.append(
            {
                "eta": float(d["eta"]),
                "seed": int(d["seed"]),
                "bitops": float(d["bitops"]),
                "psnr": float(d["psnr"]),
                "pareto": bool(int(d["pareto"])),
                "error": d["error"],
            }
        )
    return rows


# -- timing ---------------------------------------------------------------------------

BIT_SETS = {1: (8,), 2: (4, 8), 3: (2, 4, 8)}


@dataclass
class TimingRow:
    strategy: str
    n_bits: int
    iterations: int
    seconds: float
    conv_calls: int


def timing_bench(
    strategies: Sequence[str] = ("independent", "shared", "san"),
    bit_counts: Sequence[int] = (1, 2, 3),
    iterations: int = 60,
    batch_size: int = 16,
    lr_hw: Tuple[int, int] = (16, 16),
    space: Optional[SearchSpaceSpec] = None,
    seed: int = 0,
    repeats: int = 1,
) -> List[TimingRow]:
    """Wall-clock of ``iterations`` weight-update steps per strategy and |B|.

    Each step is a forward, an L1 backward and an SGD update of the supernet.
    With ``repeats > 1`` the fastest repeat is reported.
    """
    space = space or SearchSpaceSpec()
    rows = []
    for n_bits in bit_counts:
        bits = BIT_SETS.get(n_bits)
        if bits is None:
            raise ConfigurationError(f"no bit set defined for |B|={n_bits}")
        sp = replace(space, bits=bits)
        data_rng = np.random.default_rng(seed)
        lr = data_rng.random((batch_size, 3) + tuple(lr_hw))
        hr = data_rng.random((batch_size, 3, lr_hw[0] * sp.scale, lr_hw[1] * sp.scale))
        for strategy in strategies:
            best, calls = math.inf, 0
            for _ in range(repeats):
                net = build_supernet(sp, strategy, seed)
                net.set_pass(alpha=False, weights=True)
                opt = SGD(net.weight_parameters(), lr=1e-3, momentum=0.9)
                noise_rng = np.random.default_rng(seed)
                conv_counter.reset()
                start = time.perf_counter()
                for _ in range(iterations):
                    loss = l1_loss(net(Tensor(lr), noise_rng), hr)
                    opt.zero_grad()
                    loss.backward()
                    opt.step()
                elapsed = time.perf_counter() - start
                best = min(best, elapsed)
                calls = conv_counter.calls
            rows.append(TimingRow(strategy, n_bits, iterations, best, calls))
    return rows


def timing_ratios(rows: Sequence[TimingRow]) -> Dict[int, Dict[str, float]]:
    by = {(r.strategy, r.n_bits): r.seconds for r in rows}
    out: Dict[int, Dict[str, float]] = {}
    for n in sorted({r.n_bits for r in rows}):
        ratios = {}
        if ("san", n) in by and ("shared", n) in by:
            ratios["san/shared"] = by[("san", n)] / by[("shared", n)]
        if ("shared", n) in by and ("independent", n) in by:
            ratios["shared/independent"] = by[("shared", n)] / by[("independent", n)]
        if ("san", n) in by and ("independent", n) in by:
            ratios["san/independent"] = by[("san", n)] / by[("independent", n)]
        out[n] = ratios
    return out


def timing_to_csv(rows: Sequence[TimingRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["strategy", "n_bits", "iterations", "seconds", "conv_calls"])
    for r in rows:
        writer.writerow([r.strategy, r.n_bits, r.iterations, repr(r.seconds), r.conv_calls])
    return buf.getvalue()


def timing_from_csv(text: str) -> List[TimingRow]:
    return [
        TimingRow(d["strategy"], int(d["n_bits"]), int(d["iterations"]), float(d["seconds"]), int(d["conv_calls"]))
        for d in csv.DictReader(io.StringIO(text))
    ]
