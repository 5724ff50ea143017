"""Training: configuration files, Adam, the epoch loop and pointing evaluation."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import GradientTape
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .errors import NumericError, ParseError, ValidationError
from .evalkit import EvalReport, PointingAccumulator
from .groundata import GroundedTriplet, load_dataset, stack_images, stack_token_ids
from .microvlm import ModelConfig, ModelParams, init_params
from .objectives import Batch, LossConfig, downsample_mask, gradcam, total_loss

log = logging.getLogger(__name__)

TERMS = ("l_mlm", "l_itm", "l_itc", "l_amc")
PATH_KEYS = ("train_data", "val_data", "checkpoint", "metrics", "init_checkpoint", "resume")


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-5
    epochs: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    dtype: str = "float64"
    train_data: str = ""
    val_data: str = ""
    checkpoint: str = ""
    metrics: str = ""
    eval_every: int = 0  # epochs between validation passes; 0 disables
    init_checkpoint: str = ""  # weights only, fresh optimizer
    resume: str = ""  # full training state
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValidationError("batch_size must be at least 2 (contrastive loss needs negatives)")
        if not self.lr > 0:
            raise ValidationError("lr must be positive")
        if self.epochs < 0 or self.eval_every < 0:
            raise ValidationError("epochs and eval_every must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValidationError("Adam needs 0 <= beta < 1 and eps > 0")
        if self.dtype not in ("float64", "float32"):
            raise ValidationError(f"dtype must be float64 or float32, got {self.dtype!r}")

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        out["loss"] = self.loss.to_dict()
        out["model"] = self.model.to_dict()
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        loss = LossConfig(**d.pop("loss", {}))
        model = ModelConfig(**d.pop("model", {}))
        return cls(loss=loss, model=model, **d)


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def config_keys() -> dict[str, type]:
    """Every key accepted in a config file, with its value type."""
    keys = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name in ("loss", "model"):
            continue
        keys[f.name] = type(getattr(TrainConfig(), f.name))
    for prefix, klass in (("loss", LossConfig), ("model", ModelConfig)):
        default = klass()
        for f in dataclasses.fields(klass):
            value = getattr(default, f.name)
            keys[f"{prefix}.{f.name}"] = int if f.name == "tap_layer" else type(value)
    return keys


def _convert(raw: str, kind: type, key: str, lineno: int):
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        return kind(raw)
    except ValueError:
        raise ParseError(f"{key}: cannot read {raw!r} as {kind.__name__}", f"line {lineno}") from None


def parse_config(text: str) -> TrainConfig:
    """Flat ``key = value`` lines; ``#`` starts a comment; unknown keys are errors.

    Nested settings use dotted keys such as ``loss.w_amc`` or ``model.embed_dim``.
    """
    keys = config_keys()
    top: dict = {}
    nested: dict[str, dict] = {"loss": {}, "model": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", f"line {lineno}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in keys:
            raise ParseError(f"unknown config key {key!r}", f"line {lineno}")
        value = _convert(raw, keys[key], key, lineno)
        if "." in key:
            prefix, name = key.split(".", 1)
            nested[prefix][name] = value
        else:
            top[key] = value
    return TrainConfig(loss=LossConfig(**nested["loss"]), model=ModelConfig(**nested["model"]), **top)


def load_config(path) -> TrainConfig:
    cfg = parse_config(Path(path).read_text(encoding="utf-8"))
    base = Path(path).resolve().parent
    for name in PATH_KEYS:
        value = getattr(cfg, name)
        if value and not Path(value).is_absolute():
            setattr(cfg, name, str(base / value))
    return cfg


def format_config(cfg: TrainConfig) -> str:
    """Inverse of :func:`parse_config` (every key written explicitly)."""
    flat = cfg.to_dict()
    lines = []
    for key in config_keys():
        if "." in key:
            prefix, name = key.split(".", 1)
            value = flat[prefix][name]
        else:
            value = flat[key]
        if value is None:
            continue
        lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              m: Mapping[str, np.ndarray], v: Mapping[str, np.ndarray], lr: float, t: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update at step ``t`` (1-based).

    Returns new ``(params, m, v)`` dicts; inputs are left untouched.
    """
    if set(grads) != set(params) or set(m) != set(params) or set(v) != set(params):
        raise ValidationError("params, grads and moments must share the same keys")
    if t < 1:
        raise ValidationError("Adam step counter starts at 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k in params:
        g = grads[k]
        mk = beta1 * m[k] + (1.0 - beta1) * g
        vk = beta2 * v[k] + (1.0 - beta2) * g * g
        new_p[k] = params[k] - lr * (mk / c1) / (np.sqrt(vk / c2) + eps)
        new_m[k], new_v[k] = mk, vk
    return new_p, new_m, new_v


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def make_batch(triplets: Sequence[GroundedTriplet], config: ModelConfig, dtype=np.float64) -> Batch:
    images = stack_images(triplets).astype(dtype)
    ids = stack_token_ids(triplets, config.max_text_len)
    masks = downsample_mask(np.stack([t.mask for t in triplets]), config.grid).astype(dtype)
    has_mask = np.array([t.mask.any() for t in triplets])
    return Batch(images, ids, masks, has_mask)


def batches(n: int, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Seeded shuffle into batches of ``k``; a trailing batch of one is dropped."""
    order = rng.permutation(n)
    out = [order[i:i + k] for i in range(0, n, k)]
    return [b for b in out if len(b) >= 2]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def heatmaps(params: ModelParams, triplets: Sequence[GroundedTriplet], batch_size: int = 64) -> np.ndarray:
    """Pixel-resolution GradCAM maps ``[N, H, W]`` (inference mode)."""
    out = []
    dtype = next(iter(params.values())).dtype
    for i in range(0, len(triplets), batch_size):
        chunk = triplets[i:i + batch_size]
        images = stack_images(chunk).astype(dtype)
        ids = stack_token_ids(chunk, params.config.max_text_len)
        out.append(gradcam(params, images, ids, train_mode=False).a_full.data)
    if not out:
        return np.zeros((0, params.config.image_size, params.config.image_size))
    return np.concatenate(out)


def pointing_accuracy(params: ModelParams, triplets: Sequence[GroundedTriplet],
                      batch_size: int = 64) -> EvalReport:
    acc = PointingAccumulator()
    maps = heatmaps(params, triplets, batch_size)
    for t, a in zip(triplets, maps):
        acc.add(a, [t.box], t.category)
    return acc.report()


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    params: ModelParams
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int
    epoch: int
    rng: np.random.Generator

    def to_checkpoint(self, cfg: TrainConfig) -> Checkpoint:
        # file locations are left out so the bytes depend only on the run itself
        echo = {k: v for k, v in cfg.to_dict().items() if k not in PATH_KEYS}
        return Checkpoint(echo, self.params.arrays(), dict(self.m), dict(self.v),
                          self.step, self.epoch, self.rng.bit_generator.state)


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


def initial_state(cfg: TrainConfig) -> TrainState:
    dtype = np.dtype(cfg.dtype)
    if cfg.resume:
        ckpt = load_checkpoint(cfg.resume)
        model = ModelConfig(**ckpt.config["model"])
        if model != cfg.model:
            raise ValidationError("resume checkpoint was trained with a different model config")
        params = init_params(model, dtype)
        params.load_arrays(ckpt.params)
        return TrainState(params, ckpt.m, ckpt.v, ckpt.step, ckpt.epoch, _rng_from_state(ckpt.rng_state))
    params = init_params(cfg.model, dtype)
    if cfg.init_checkpoint:
        ckpt = load_checkpoint(cfg.init_checkpoint)
        if ModelConfig(**ckpt.config["model"]) != cfg.model:
            raise ValidationError("init checkpoint was trained with a different model config")
        params.load_arrays(ckpt.params)
    zeros = {k: np.zeros_like(a) for k, a in params.arrays().items()}
    return TrainState(params, zeros, {k: a.copy() for k, a in zeros.items()}, 0,
                      0, np.random.default_rng(cfg.seed))


def parameter_grads(loss, params: ModelParams) -> dict[str, np.ndarray]:
    """Gradient for every parameter; those the loss does not reach get zeros."""
    tape = GradientTape(loss)
    on_tape = {id(n) for n in tape.nodes}
    names = [k for k, t in params.items() if id(t) in on_tape]
    grads = dict(zip(names, (g.data for g in tape.gradient([params[k] for k in names]))))
    for k, t in params.items():
        if k not in grads:
            grads[k] = np.zeros_like(t.data)
    return grads


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> dict:
    state.step += 1
    try:
        out = total_loss(state.params, batch, cfg.loss, state.rng)
    except NumericError as exc:
        raise NumericError(f"{exc} at step {state.step}") from exc
    for name in TERMS + ("total",):
        value = out.terms[name] if name != "total" else out.total.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite {name} ({value}) at step {state.step}")
    grads = parameter_grads(out.total, state.params)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k} at step {state.step}")
    new_p, state.m, state.v = adam_step(state.params.arrays(), grads, state.m, state.v,
                                        cfg.lr, state.step, cfg.beta1, cfg.beta2, cfg.eps)
    for k, t in state.params.items():
        t.data = new_p[k]
    return {"step": state.step, "epoch": state.epoch, **out.terms, "total": out.total.item()}


@dataclass
class TrainResult:
    state: TrainState
    metrics: list[dict]
    evals: list[dict]

    @property
    def params(self) -> ModelParams:
        return self.state.params


def train(cfg: TrainConfig, train_set: Sequence[GroundedTriplet] | None = None,
          val_set: Sequence[GroundedTriplet] | None = None, until_epoch: int | None = None,
          on_step: Callable[[dict], None] | None = None,
          initial_params: Mapping[str, np.ndarray] | None = None) -> TrainResult:
    """Run (or continue) training to ``until_epoch`` (default ``cfg.epochs``).

    Datasets are read from ``cfg.train_data``/``cfg.val_data`` unless passed
    in, and ``initial_params`` plays the role of ``cfg.init_checkpoint``.
    When ``cfg.checkpoint`` is set the final state is written there; when
    ``cfg.metrics`` is set, step records are appended as JSONL and validation
    records go to a sibling ``*.eval.jsonl`` file.
    """
    if train_set is None:
        if not cfg.train_data:
            raise ValidationError("no training data given")
        train_set = load_dataset(cfg.train_data)
    if val_set is None and cfg.val_data:
        val_set = load_dataset(cfg.val_data)
    if len(train_set) < 2:
        raise ValidationError("training set needs at least two triplets")
    for t in train_set:
        t.validate()

    state = initial_state(cfg)
    if initial_params is not None:
        if cfg.resume:
            raise ValidationError("initial_params cannot be combined with resume")
        state.params.load_arrays(initial_params)
    dtype = np.dtype(cfg.dtype)
    end = cfg.epochs if until_epoch is None else until_epoch
    metrics_fh = eval_fh = None
    if cfg.metrics:
        mode = "a" if cfg.resume else "w"
        metrics_fh = open(cfg.metrics, mode, encoding="utf-8")
        eval_fh = open(Path(cfg.metrics).with_suffix(".eval.jsonl"), mode, encoding="utf-8")
    records, evals = [], []
    try:
        with ag.set_grad_enabled(True):
            while state.epoch < end:
                for idx in batches(len(train_set), cfg.batch_size, state.rng):
                    batch = make_batch([train_set[i] for i in idx], cfg.model, dtype)
                    rec = train_step(state, batch, cfg)
                    records.append(rec)
                    if metrics_fh:
                        metrics_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                    if on_step:
                        on_step(rec)
                state.epoch += 1
                if val_set and cfg.eval_every and state.epoch % cfg.eval_every == 0:
                    report = pointing_accuracy(state.params, val_set)
                    ev = {"epoch": state.epoch, "step": state.step, "pointing": report.overall}
                    evals.append(ev)
                    log.info("epoch %d pointing %.4f", state.epoch, report.overall)
                    if eval_fh:
                        eval_fh.write(json.dumps(ev, sort_keys=True) + "\n")
    finally:
        if metrics_fh:
            metrics_fh.close()
            eval_fh.close()
    if cfg.checkpoint:
        save_checkpoint(cfg.checkpoint, state.to_checkpoint(cfg))
    return TrainResult(state, records, evals)


def params_from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    model = ModelConfig(**ckpt.config["model"])
    dtype = next(iter(ckpt.params.values())).dtype if ckpt.params else np.float64
    params = init_params(model, dtype)
    params.load_arrays(ckpt.params)
    return params
