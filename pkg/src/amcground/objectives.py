"""Training losses: MLM, ITM, ITC, the GradCAM trace and the mask-consistency margins."""
from __future__ import annotations

import dataclasses
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import DimensionError, EmptyDomainError, NumericError, ValidationError
from .microvlm import (
    CLS_ID,
    MASK_ID,
    PAD_ID,
    SPECIAL_IDS,
    FusionActivations,
    ModelParams,
    encode_image,
    encode_text,
    fuse,
    itc_project,
    itm_head,
    mlm_head,
)

AMC_VARIANTS = ("amc", "mean", "max", "cosine")


@dataclass(frozen=True)
class LossConfig:
    delta1: float = 0.1
    delta2: float = 0.5
    lambda1: float = 0.2
    lambda2: float = 0.8
    tau: float = 0.07
    mlm_mask_prob: float = 0.15
    w_mlm: float = 1.0
    w_itm: float = 1.0
    w_itc: float = 1.0
    w_amc: float = 1.0
    amc_variant: str = "amc"

    def __post_init__(self):
        if self.delta1 < 0 or self.delta2 < 0:
            raise ValidationError("margins must be non-negative")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValidationError("lambda weights must be non-negative")
        if self.tau <= 0:
            raise ValidationError("tau must be positive")
        if not 0 < self.mlm_mask_prob < 1:
            raise ValidationError("mlm_mask_prob must lie in (0, 1)")
        if min(self.w_mlm, self.w_itm, self.w_itc, self.w_amc) < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.amc_variant not in AMC_VARIANTS:
            raise ValidationError(f"amc_variant must be one of {AMC_VARIANTS}")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "LossConfig":
        return dataclasses.replace(self, **changes)


class MaskedText(NamedTuple):
    ids: np.ndarray  # [B, L] original
    corrupted: np.ndarray  # [B, L] with MASK_ID at masked positions
    positions: tuple  # (batch_idx, token_idx) arrays
    targets: np.ndarray  # [K, vocab] one-hot of the original ids


class GradCamTrace(NamedTuple):
    fz: Tensor  # [B, heads, m+1, n] tapped cross-attention probabilities
    gz: Tensor  # same shape, d(matching loss)/d fz
    a_patch: Tensor  # [B, g, g]
    a_full: Tensor  # [B, H, W]


# ---------------------------------------------------------------------------
# pretraining objectives
# ---------------------------------------------------------------------------

def mask_tokens(ids, rng: np.random.Generator, prob: float, vocab_size: int) -> MaskedText:
    """Replace each non-special token by MASK with probability ``prob``."""
    ids = np.atleast_2d(np.asarray(ids))
    eligible = ~np.isin(ids, SPECIAL_IDS)
    draws = rng.random(ids.shape)
    chosen = eligible & (draws < prob)
    corrupted = np.where(chosen, MASK_ID, ids)
    rows, cols = np.nonzero(chosen)
    targets = ag.one_hot(ids[rows, cols], vocab_size)
    return MaskedText(ids, corrupted, (rows, cols), targets)


def loss_mlm(params: ModelParams, images, masked: MaskedText, visual: Tensor | None = None) -> Tensor:
    """Mean cross-entropy over masked positions, predicted from the fused pair."""
    if len(masked.positions[0]) == 0:
        raise EmptyDomainError("no masked positions")
    if visual is None:
        visual = encode_image(params, images)
    fusion = fuse(params, visual, encode_text(params, masked.corrupted))
    logits = mlm_head(params, fusion, masked.positions)
    return ag.cross_entropy(logits, masked.targets, reduction="mean")


def itm_targets(y) -> np.ndarray:
    """One-hot ``[y, 1 - y]`` rows."""
    y = np.atleast_1d(np.asarray(y))
    if not np.isin(y, (0, 1)).all():
        raise ValidationError("ITM labels must be 0 or 1")
    return np.stack([y, 1 - y], axis=-1).astype(np.float64)


def loss_itm(params: ModelParams, images, ids, y, fusion: FusionActivations | None = None,
             reduction: str = "mean") -> Tensor:
    if fusion is None:
        fusion = fuse(params, encode_image(params, images), encode_text(params, ids))
    logits = itm_head(params, fusion)
    target = itm_targets(y)
    if target.shape[0] != logits.shape[0]:
        target = np.broadcast_to(target, logits.shape).copy()
    return ag.cross_entropy(logits, target, reduction=reduction)


def itc_scores(image_proj: Tensor, text_proj: Tensor, tau: float) -> Tensor:
    """``[K, K]`` logits ``dot(v_i, t_j) / tau``; exp of these are the scores."""
    return ag.matmul(image_proj, text_proj.T) * (1.0 / tau)


def loss_itc(params: ModelParams, images=None, ids=None, tau: float = 0.07,
             image_cls: Tensor | None = None, text_cls: Tensor | None = None) -> Tensor:
    """Symmetric InfoNCE; row ``k`` of images matches row ``k`` of texts."""
    if image_cls is None:
        image_cls = encode_image(params, images)[:, 0, :]
    if text_cls is None:
        text_cls = encode_text(params, ids).states[:, 0, :]
    k = image_cls.shape[0]
    if k < 2:
        raise ValidationError("ITC needs at least two pairs in the batch")
    return itc_from_projections(itc_project(params, image_cls, "vision"),
                                itc_project(params, text_cls, "text"), tau)


def itc_from_projections(image_proj: Tensor, text_proj: Tensor, tau: float) -> Tensor:
    k = image_proj.shape[0]
    if k < 2:
        raise ValidationError("ITC needs at least two pairs in the batch")
    logits = itc_scores(image_proj, text_proj, tau)
    target = np.eye(k)
    i2t = ag.cross_entropy(logits, target, reduction="mean")
    t2i = ag.cross_entropy(logits.T, target, reduction="mean")
    return (i2t + t2i) * 0.5


# ---------------------------------------------------------------------------
# GradCAM
# ---------------------------------------------------------------------------

def token_row_weights(valid: np.ndarray, ids: np.ndarray | None = None) -> np.ndarray:
    """Averaging weights over text query rows, skipping CLS and PAD."""
    rows = valid.copy()
    rows[:, 0] = False
    if ids is not None:
        rows &= ~np.isin(ids, (CLS_ID, PAD_ID))
    counts = rows.sum(axis=1)
    if np.any(counts == 0):
        raise EmptyDomainError("phrase has no non-special tokens")
    return rows / counts[:, None]


def gradcam(params: ModelParams, images=None, ids=None, train_mode: bool = False,
            fusion: FusionActivations | None = None) -> GradCamTrace:
    """Gradient-weighted map of the tapped cross-attention for the match label.

    ``A = relu(F * dL/dF)`` is averaged over heads, then over the phrase's
    content tokens, reshaped to the patch grid and upsampled to pixels. In
    ``train_mode`` the gradient is built as a graph so losses on the heatmap
    reach the parameters.
    """
    cfg = params.config
    if fusion is None:
        with ag.set_grad_enabled(True):
            fusion = fuse(params, encode_image(params, images), encode_text(params, ids))
    weights = token_row_weights(fusion.valid)
    fz = fusion.cross_attn[cfg.tap_layer]
    if not fz.requires_grad:
        raise ValidationError("gradcam needs a recorded forward pass")
    b = fz.shape[0]
    with ag.set_grad_enabled(True):
        match = loss_itm(params, None, None, np.ones(b, dtype=int), fusion=fusion, reduction="sum")
    (gz,) = ag.grad(match, [fz], create_graph=train_mode)
    if not train_mode:
        fz, gz = fz.detach(), gz.detach()
    raw = ag.relu(fz * gz)
    per_token = raw.mean(axis=1)  # [B, m+1, n]
    w = Tensor(np.broadcast_to(weights[:, :, None], per_token.shape).astype(per_token.dtype))
    patch = (per_token * w).sum(axis=1)  # [B, n]
    a_patch = patch.reshape(b, cfg.grid, cfg.grid)
    a_full = ag.bilinear_resize(a_patch, cfg.image_size, cfg.image_size)
    return GradCamTrace(fz, gz, a_patch, a_full)


# ---------------------------------------------------------------------------
# heatmap-mask consistency
# ---------------------------------------------------------------------------

def _check_pair(a: Tensor, m) -> np.ndarray:
    m = np.asarray(m, dtype=a.dtype)
    if m.shape != a.shape:
        raise DimensionError(f"heatmap shape {a.shape} != mask shape {m.shape}")
    if a.ndim not in (2, 3):
        raise DimensionError("heatmaps are [H, W] or [B, H, W]")
    if np.any(m < 0) or np.any(m > 1):
        raise ValidationError("mask weights must lie in [0, 1]")
    return m


def _flat(a: Tensor) -> Tensor:
    return a.reshape(-1) if a.ndim == 2 else a.reshape(a.shape[0], -1)


def _region_sizes(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = m.reshape(-1) if m.ndim == 2 else m.reshape(m.shape[0], -1)
    inside = flat.sum(axis=-1)
    if np.any(inside == 0):
        raise EmptyDomainError("mask has an empty region (sum of M is 0)")
    return inside, (1.0 - flat).sum(axis=-1)


def loss_mean(a: Tensor, m, delta1: float) -> Tensor:
    """``max(0, mean outside - mean inside + delta1)`` with weighted means.

    Batched input ``[B, H, W]`` yields one loss per sample.
    """
    m = _check_pair(a, m)
    n_in, n_out = _region_sizes(m)
    mf = _flat(Tensor(m))
    af = _flat(a)
    axis = -1
    inside = (af * mf).sum(axis=axis) / Tensor(n_in.astype(a.dtype))
    safe_out = np.where(n_out > 0, n_out, 1.0).astype(a.dtype)
    has_out = Tensor((n_out > 0).astype(a.dtype))
    outside = (af * (1.0 - mf)).sum(axis=axis) / Tensor(safe_out) * has_out
    return ag.relu(outside - inside + delta1)


def loss_max(a: Tensor, m, delta2: float) -> Tensor:
    """``max(0, max((1-M) A) - max(M A) + delta2)``."""
    m = _check_pair(a, m)
    _, n_out = _region_sizes(m)
    mf = _flat(Tensor(m))
    af = _flat(a)
    inside = (af * mf).max(axis=-1)
    has_out = Tensor((n_out > 0).astype(a.dtype))
    outside = (af * (1.0 - mf)).max(axis=-1) * has_out
    return ag.relu(outside - inside + delta2)


def loss_amc(a: Tensor, m, cfg: LossConfig) -> Tensor:
    return loss_mean(a, m, cfg.delta1) * cfg.lambda1 + loss_max(a, m, cfg.delta2) * cfg.lambda2


def loss_cosine(a: Tensor, m) -> Tensor:
    """Cosine distance ``1 - <A, M> / (|A| |M|)`` over flattened maps."""
    m = _check_pair(a, m)
    af = _flat(a)
    mf = _flat(Tensor(m))
    a_sq = (af * af).sum(axis=-1)
    m_norm = np.sqrt((mf.data * mf.data).sum(axis=-1))
    if np.any(a_sq.data == 0) or np.any(m_norm == 0):
        raise NumericError("cosine distance of a zero-norm map")
    dot = (af * mf).sum(axis=-1)
    return 1.0 - dot * ag.power(a_sq, -0.5) / Tensor(m_norm)


def heatmap_loss(a: Tensor, m, cfg: LossConfig) -> Tensor:
    """The configured mask-consistency variant (``cfg.amc_variant``)."""
    if cfg.amc_variant == "amc":
        return loss_amc(a, m, cfg)
    if cfg.amc_variant == "mean":
        return loss_mean(a, m, cfg.delta1)
    if cfg.amc_variant == "max":
        return loss_max(a, m, cfg.delta2)
    return loss_cosine(a, m)


def downsample_mask(mask_full, grid: int) -> np.ndarray:
    """Fraction of each grid cell's pixels inside the mask (``[..., grid, grid]``)."""
    mask_full = np.asarray(mask_full, dtype=np.float64)
    h, w = mask_full.shape[-2:]
    if grid < 1 or h % grid or w % grid:
        raise ValidationError(f"mask size {h}x{w} not divisible by grid {grid}")
    ch, cw = h // grid, w // grid
    lead = mask_full.shape[:-2]
    blocks = mask_full.reshape(lead + (grid, ch, grid, cw))
    return blocks.mean(axis=(-3, -1))


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------

class Batch(NamedTuple):
    images: np.ndarray  # [K, C, H, W]
    ids: np.ndarray  # [K, m+1]
    masks: np.ndarray | None  # [K, g, g] fractional masks or None
    has_mask: np.ndarray  # [K] bool, triplets eligible for the heatmap loss


class LossBreakdown(NamedTuple):
    total: Tensor
    terms: dict  # name -> float, unweighted
    skipped: int


def derangement(k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform in-batch shuffle without fixed points (one negative per positive)."""
    while True:
        perm = rng.permutation(k)
        if not np.any(perm == np.arange(k)):
            return perm


def total_loss(params: ModelParams, batch: Batch, cfg: LossConfig,
               rng: np.random.Generator) -> LossBreakdown:
    """Weighted MLM + ITM + ITC (+ mask consistency when ``w_amc > 0``).

    ``rng`` is consumed identically whether or not the heatmap term is active,
    so a zero ``w_amc`` run follows the baseline trajectory exactly.
    """
    k = batch.images.shape[0]
    if k < 2:
        raise ValidationError("batch needs at least two pairs")
    negatives = derangement(k, rng)
    masked = mask_tokens(batch.ids, rng, cfg.mlm_mask_prob, params.config.vocab_size)

    with _term("encoders"):
        visual = encode_image(params, batch.images)
        text = encode_text(params, batch.ids)
        neg_text = text._replace(
            states=text.states[negatives], valid=text.valid[negatives],
            degenerate=text.degenerate[negatives],
        )
        pos_fusion = fuse(params, visual, text)
        neg_fusion = fuse(params, visual, neg_text)
    with _term("l_itm"):
        pos_itm = loss_itm(params, None, None, np.ones(k, dtype=int), fusion=pos_fusion, reduction="sum")
        neg_itm = loss_itm(params, None, None, np.zeros(k, dtype=int), fusion=neg_fusion, reduction="sum")
        l_itm = (pos_itm + neg_itm) * (1.0 / (2 * k))

    with _term("l_itc"):
        l_itc = itc_from_projections(itc_project(params, visual[:, 0, :], "vision"),
                                     itc_project(params, text.states[:, 0, :], "text"), cfg.tau)

    with _term("l_mlm"):
        if len(masked.positions[0]):
            l_mlm = loss_mlm(params, None, masked, visual=visual)
        else:
            l_mlm = Tensor(0.0)

    total = l_mlm * cfg.w_mlm + l_itm * cfg.w_itm + l_itc * cfg.w_itc
    terms = {"l_mlm": l_mlm.item(), "l_itm": l_itm.item(), "l_itc": l_itc.item(), "l_amc": 0.0}
    skipped = 0
    if cfg.w_amc > 0 and batch.masks is not None:
        with _term("l_amc"):
            l_amc, skipped = _heatmap_term(params, batch, cfg, pos_fusion)
        if l_amc is not None:
            total = total + l_amc * cfg.w_amc
            terms["l_amc"] = l_amc.item()
    return LossBreakdown(total, terms, skipped)


@contextmanager
def _term(name: str):
    """Tag numeric failures with the loss term being computed."""
    try:
        yield
    except NumericError as exc:
        if getattr(exc, "term", None):
            raise
        err = NumericError(f"{name}: {exc}")
        err.term = name
        raise err from exc


def _heatmap_term(params, batch: Batch, cfg: LossConfig, fusion: FusionActivations):
    masks = np.asarray(batch.masks)
    eligible = np.asarray(batch.has_mask, dtype=bool) & (masks.reshape(len(masks), -1).sum(axis=1) > 0)
    trace = gradcam(params, train_mode=True, fusion=fusion)
    if cfg.amc_variant == "cosine":
        norms = (trace.a_patch.data.reshape(len(masks), -1) ** 2).sum(axis=1)
        eligible &= norms > 0
    skipped = int(len(masks) - eligible.sum())
    if not eligible.any():
        return None, skipped
    idx = np.nonzero(eligible)[0]
    a = trace.a_patch[idx]
    per_sample = heatmap_loss(a, masks[idx], cfg)
    return per_sample.mean(), skipped

