"""Finite-difference suites behind ``amc gradcheck``: per-op, whole-model, and
second order through GradCAM."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import autograd as ag
from .autograd.gradcheck import check_op, relative_error
from .microvlm import ModelConfig, ModelParams, init_params
from .objectives import Batch, LossConfig, downsample_mask, gradcam, loss_amc, total_loss

OP_TOL = 1e-5
MODEL_TOL = 1e-4
AMC_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < self.tol

    def line(self) -> str:
        status = "ok  " if self.passed else "FAIL"
        return f"{status} {self.name:<28} max rel err {self.error:.3e} (tol {self.tol:.0e})"


# ---------------------------------------------------------------------------
# per-op
# ---------------------------------------------------------------------------

def _away_from_zero(rng, shape, lo=0.2, hi=2.0):
    return rng.uniform(lo, hi, shape) * rng.choice([-1.0, 1.0], shape)


def _distinct(rng, shape):
    # values spaced well apart so a finite step never changes the argmax
    n = int(np.prod(shape))
    return (rng.permutation(n).reshape(shape) * 0.1 + rng.uniform(-0.01, 0.01, shape))


def op_cases() -> dict[str, tuple[Callable, Callable]]:
    """name -> (fn over Tensors, input sampler ``rng -> list of arrays``)."""
    n = lambda rng, *s: rng.standard_normal(s)  # noqa: E731
    return {
        "add": (ag.add, lambda r: [n(r, 3, 4), n(r, 3, 4)]),
        "add_scalar": (lambda a: a + 1.5, lambda r: [n(r, 3, 4)]),
        "sub": (ag.sub, lambda r: [n(r, 3, 4), n(r, 3, 4)]),
        "mul": (ag.mul, lambda r: [n(r, 3, 4), n(r, 3, 4)]),
        "mul_scalar_tensor": (ag.mul, lambda r: [n(r), n(r, 2, 3)]),
        "div": (ag.div, lambda r: [n(r, 3, 4), _away_from_zero(r, (3, 4), 0.5)]),
        "neg": (ag.neg, lambda r: [n(r, 5)]),
        "power": (lambda a: ag.power(a, 3.0), lambda r: [n(r, 4, 3)]),
        "power_neg": (lambda a: ag.power(a, -0.5), lambda r: [r.uniform(0.5, 2.0, (4, 3))]),
        "exp": (ag.exp, lambda r: [n(r, 3, 4)]),
        "log": (ag.log, lambda r: [r.uniform(0.3, 3.0, (3, 4))]),
        "relu": (ag.relu, lambda r: [_away_from_zero(r, (4, 5))]),
        "tanh": (ag.tanh, lambda r: [n(r, 3, 4)]),
        "matmul": (ag.matmul, lambda r: [n(r, 3, 4), n(r, 4, 2)]),
        "matmul_batched": (ag.matmul, lambda r: [n(r, 2, 3, 4), n(r, 4, 5)]),
        "matmul_batch_batch": (ag.matmul, lambda r: [n(r, 2, 3, 4), n(r, 2, 4, 2)]),
        "sum": (lambda a: ag.tsum(a, axis=1), lambda r: [n(r, 3, 4, 2)]),
        "sum_all": (lambda a: ag.tsum(a), lambda r: [n(r, 3, 4)]),
        "mean": (lambda a: ag.mean(a, axis=(0, 2), keepdims=True), lambda r: [n(r, 3, 4, 2)]),
        "max": (lambda a: ag.tmax(a, axis=1), lambda r: [_distinct(r, (3, 5))]),
        "max_all": (lambda a: ag.tmax(a), lambda r: [_distinct(r, (3, 5))]),
        "reshape": (lambda a: ag.reshape(a, (4, 3)) * ag.tensor(np.arange(12.0).reshape(4, 3)),
                    lambda r: [n(r, 3, 4)]),
        "transpose": (lambda a: ag.transpose(a, (2, 0, 1)), lambda r: [n(r, 2, 3, 4)]),
        "broadcast_to": (lambda a: ag.broadcast_to(a, (3, 2, 4)), lambda r: [n(r, 2, 1)]),
        "sum_to": (lambda a: ag.sum_to(a, (1, 4)), lambda r: [n(r, 3, 4)]),
        "getitem": (lambda a: ag.getitem(a, (slice(None), [2, 0, 2])), lambda r: [n(r, 3, 4)]),
        "scatter": (lambda a: ag.scatter(a, (slice(1, 3),), (4, 2)), lambda r: [n(r, 2, 2)]),
        "concat": (lambda a, b: ag.concat([a, b], axis=1), lambda r: [n(r, 2, 3), n(r, 2, 1)]),
        "softmax": (lambda a: ag.softmax(a, axis=-1), lambda r: [n(r, 3, 5)]),
        "log_softmax": (lambda a: ag.log_softmax(a, axis=0), lambda r: [n(r, 4, 3)]),
        "cross_entropy": (lambda a: ag.cross_entropy(a, ag.one_hot([0, 2, 1], 3)), lambda r: [n(r, 3, 3)]),
        "layer_norm": (lambda a, g, b: ag.layer_norm(a, g, b),
                       lambda r: [n(r, 3, 6), n(r, 6), n(r, 6)]),
        "gelu": (ag.gelu, lambda r: [n(r, 4, 5) * 2]),
        "linear": (ag.linear, lambda r: [n(r, 2, 3, 4), n(r, 4, 5), n(r, 5)]),
        "l2_normalize": (ag.l2_normalize, lambda r: [n(r, 3, 4)]),
        "bilinear_resize": (lambda a: ag.bilinear_resize(a, 7, 5), lambda r: [n(r, 2, 3, 3)]),
    }


def op_suite(seeds: Iterable[int] = range(10)) -> list[CheckResult]:
    seeds = list(seeds)
    results = []
    for name, (fn, sample) in op_cases().items():
        t0 = time.perf_counter()
        worst = 0.0
        for seed in seeds:
            rng = np.random.default_rng(seed)
            worst = max(worst, check_op(fn, sample(rng), eps=1e-6, seed=seed))
        results.append(CheckResult(f"op:{name}", worst, OP_TOL, time.perf_counter() - t0))
    return results


# ---------------------------------------------------------------------------
# whole model
# ---------------------------------------------------------------------------

def micro_batch(config: ModelConfig, k: int, rng: np.random.Generator) -> Batch:
    images = rng.uniform(0.0, 1.0, (k, config.channels, config.image_size, config.image_size))
    length = config.max_text_len + 1
    ids = np.zeros((k, length), dtype=np.int64)
    ids[:, 0] = 1
    for i in range(k):
        used = int(rng.integers(2, length))  # at least one content token
        ids[i, 1:used + 1] = rng.integers(3, config.vocab_size, used)
    masks = np.zeros((k, config.image_size, config.image_size))
    for i in range(k):
        w, h = (int(v) for v in rng.integers(2, config.image_size // 2 + 2, 2))
        x = int(rng.integers(0, config.image_size - w + 1))
        y = int(rng.integers(0, config.image_size - h + 1))
        masks[i, y:y + h, x:x + w] = 1.0
    return Batch(images, ids, downsample_mask(masks, config.grid), np.ones(k, dtype=bool))


def _compare(params: ModelParams, scalar: Callable[[], ag.Tensor], rng,
             eps: float) -> tuple[float, float]:
    """Directional derivatives, one random direction per parameter tensor.

    Returns the max relative error over tensors and the largest analytic
    gradient entry. Tensors the scalar does not reach are skipped.
    """
    with ag.set_grad_enabled(True):
        loss = scalar()
        tape = ag.GradientTape(loss)
        on_tape = {id(n) for n in tape.nodes}
        names = [k for k, t in params.items() if id(t) in on_tape]
        analytic = dict(zip(names, tape.gradient([params[k] for k in names])))
    a, n = [], []
    for k in names:
        arr = params[k].data
        u = rng.standard_normal(arr.shape)
        base = arr.copy()
        arr += eps * u
        fp = scalar().item()
        arr[...] = base - eps * u
        fm = scalar().item()
        arr[...] = base
        a.append(float(np.sum(analytic[k].data * u)))
        n.append((fp - fm) / (2 * eps))
    scale = max(float(np.abs(g.data).max()) for g in analytic.values())
    return relative_error(np.array(a), np.array(n)), scale


def model_suite(seeds: Iterable[int] = range(10)) -> list[CheckResult]:
    """Total pretraining loss (MLM + ITM + ITC) against every parameter tensor."""
    results = []
    for seed in seeds:
        t0 = time.perf_counter()
        config = ModelConfig.micro(seed=seed)
        params = init_params(config)
        rng = np.random.default_rng(seed)
        batch = micro_batch(config, 3, rng)
        cfg = LossConfig(w_amc=0.0, mlm_mask_prob=0.5)

        def scalar():
            return total_loss(params, batch, cfg, np.random.default_rng([seed, 7])).total

        err, _ = _compare(params, scalar, rng, eps=1e-6)
        results.append(CheckResult(f"model:seed{seed}", err, MODEL_TOL, time.perf_counter() - t0))
    return results


# ---------------------------------------------------------------------------
# second order through GradCAM
# ---------------------------------------------------------------------------

def amc_scalar(params: ModelParams, batch: Batch, cfg: LossConfig) -> ag.Tensor:
    """``lambda1 * L_mean + lambda2 * L_max`` of the training-mode heatmap, batch mean."""
    trace = gradcam(params, batch.images, batch.ids, train_mode=True)
    return loss_amc(trace.a_patch, batch.masks, cfg).mean()


def amc_suite(seeds: Iterable[int] = range(3), fusion_layers: int = 1) -> list[CheckResult]:
    """Double backward: d(mask loss over GradCAM)/d(params) against central differences.

    With a single fusion layer the tapped text rows cannot reach the CLS state,
    the heatmap is identically zero and so is this gradient; the name records
    the gradient scale so a vacuous pass is visible.
    """
    results = []
    for seed in seeds:
        t0 = time.perf_counter()
        config = ModelConfig.micro(seed=seed, fusion_layers=fusion_layers)
        params = init_params(config)
        rng = np.random.default_rng(seed)
        batch = micro_batch(config, 3, rng)
        cfg = LossConfig()
        err, scale = _compare(params, lambda: amc_scalar(params, batch, cfg), rng, eps=1e-6)
        results.append(CheckResult(f"amc:L{fusion_layers}:seed{seed}:|g|={scale:.1e}",
                                   err, AMC_TOL, time.perf_counter() - t0))
    return results


def amc_gradient_scale(seed: int = 0, fusion_layers: int = 2) -> float:
    config = ModelConfig.micro(seed=seed, fusion_layers=fusion_layers)
    params = init_params(config)
    batch = micro_batch(config, 3, np.random.default_rng(seed))
    with ag.set_grad_enabled(True):
        loss = amc_scalar(params, batch, LossConfig())
        tape = ag.GradientTape(loss)
        on_tape = {id(n) for n in tape.nodes}
        grads = tape.gradient([t for t in params.values() if id(t) in on_tape])
    return max(float(np.abs(g.data).max()) for g in grads)


SUITES = {
    "ops": lambda: op_suite(),
    "model": lambda: model_suite(),
    "amc": lambda: amc_suite(fusion_layers=1) + amc_suite(fusion_layers=2),
}


def run(scale: str) -> list[CheckResult]:
    if scale not in SUITES:
        raise ValueError(f"unknown gradcheck scale {scale!r}")
    return SUITES[scale]()
