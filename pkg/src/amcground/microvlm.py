"""Three-encoder vision-language transformer at desk scale.

Image encoder, text encoder and a fusion encoder whose text queries
cross-attend over image patches. Every forward function is batched: images
are ``[B, C, H, W]`` arrays and token ids ``[B, m + 1]``; a single sample
(``[C, H, W]`` / ``[m + 1]``) is promoted to a batch of one.
"""
from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import NumericError, ValidationError

PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
SPECIAL_IDS = (PAD_ID, CLS_ID, MASK_ID)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 64
    heads: int = 4
    vision_layers: int = 2
    text_layers: int = 2
    fusion_layers: int = 2
    vocab_size: int = 64
    max_text_len: int = 12
    itc_proj_dim: int = 32
    tap_layer: int | None = None
    mlp_ratio: int = 4
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        if self.tap_layer is None:
            # text rows of the last layer never reach the CLS state, so their
            # gradient is zero there; tap one layer earlier when possible
            object.__setattr__(self, "tap_layer", max(0, self.fusion_layers - 2))
        self.validate()

    def validate(self) -> None:
        positive = ("image_size", "channels", "patch_size", "embed_dim", "heads",
                    "vocab_size", "max_text_len", "itc_proj_dim", "mlp_ratio")
        for name in positive:
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        for name in ("vision_layers", "text_layers", "fusion_layers"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be at least 1")
        if self.image_size % self.patch_size:
            raise ValidationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ValidationError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if not 0 <= self.tap_layer < self.fusion_layers:
            raise ValidationError(
                f"tap_layer {self.tap_layer} outside [0, {self.fusion_layers})"
            )
        if self.vocab_size <= max(SPECIAL_IDS):
            raise ValidationError("vocab_size too small for the special tokens")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        """Smallest configuration keeping every architectural role (gradient checks)."""
        base = dict(image_size=16, patch_size=8, embed_dim=8, heads=2, vision_layers=1,
                    text_layers=1, fusion_layers=1, vocab_size=24, max_text_len=6,
                    itc_proj_dim=4, mlp_ratio=2)
        base.update(overrides)
        return cls(**base)


@dataclass
class ModelParams(Mapping):
    """Named parameter tensors; the name set is fixed at construction."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def load_arrays(self, arrays: Mapping[str, np.ndarray]) -> None:
        if set(arrays) != set(self.tensors):
            raise ValidationError("parameter names do not match the model")
        for k, t in self.tensors.items():
            arr = np.asarray(arrays[k], dtype=t.dtype)
            if arr.shape != t.shape:
                raise ValidationError(f"parameter {k}: shape {arr.shape} != {t.shape}")
            t.data = arr.copy()

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.tensors.items()},
        )


class TextStates(NamedTuple):
    states: Tensor  # [B, m+1, d]
    valid: np.ndarray  # [B, m+1] bool, False at PAD
    degenerate: np.ndarray  # [B] bool, True when only CLS is present


class FusionActivations(NamedTuple):
    states: Tensor  # [B, m+1, d]
    cross_attn: list  # per layer Tensor [B, heads, m+1, n]
    cls: Tensor  # [B, d]
    valid: np.ndarray  # [B, m+1]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _block_shapes(prefix: str, d: int, hidden: int, cross: bool) -> dict[str, tuple]:
    shapes = {}

    def attn(name):
        for p in ("q", "k", "v", "o"):
            shapes[f"{prefix}.{name}.w{p}"] = (d, d)
            shapes[f"{prefix}.{name}.b{p}"] = (d,)

    def ln(name):
        shapes[f"{prefix}.{name}.g"] = (d,)
        shapes[f"{prefix}.{name}.b"] = (d,)

    ln("ln1")
    attn("attn")
    if cross:
        ln("ln_cross")
        attn("cross")
    ln("ln2")
    shapes[f"{prefix}.mlp.w1"] = (d, hidden)
    shapes[f"{prefix}.mlp.b1"] = (hidden,)
    shapes[f"{prefix}.mlp.w2"] = (hidden, d)
    shapes[f"{prefix}.mlp.b2"] = (d,)
    return shapes


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    d = config.embed_dim
    hidden = d * config.mlp_ratio
    m1 = config.max_text_len + 1
    shapes: dict[str, tuple] = {
        "vision.patch.w": (config.patch_dim, d),
        "vision.patch.b": (d,),
        "vision.cls": (d,),
        "vision.pos": (config.n_patches + 1, d),
    }
    for i in range(config.vision_layers):
        shapes.update(_block_shapes(f"vision.block{i}", d, hidden, cross=False))
    shapes["vision.ln_f.g"] = (d,)
    shapes["vision.ln_f.b"] = (d,)
    shapes["text.tok"] = (config.vocab_size, d)
    shapes["text.pos"] = (m1, d)
    for i in range(config.text_layers):
        shapes.update(_block_shapes(f"text.block{i}", d, hidden, cross=False))
    shapes["text.ln_f.g"] = (d,)
    shapes["text.ln_f.b"] = (d,)
    for i in range(config.fusion_layers):
        shapes.update(_block_shapes(f"fusion.block{i}", d, hidden, cross=True))
    shapes["fusion.ln_f.g"] = (d,)
    shapes["fusion.ln_f.b"] = (d,)
    shapes["itm.w"] = (d, 2)
    shapes["itm.b"] = (2,)
    shapes["mlm.w"] = (d, config.vocab_size)
    shapes["mlm.b"] = (config.vocab_size,)
    shapes["itc.vision.w"] = (d, config.itc_proj_dim)
    shapes["itc.vision.b"] = (config.itc_proj_dim,)
    shapes["itc.text.w"] = (d, config.itc_proj_dim)
    shapes["itc.text.b"] = (config.itc_proj_dim,)
    return shapes


def init_params(config: ModelConfig, dtype=np.float64) -> ModelParams:
    """Deterministic init from ``config.seed``.

    Weight matrices ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); embeddings
    (tokens, positions, CLS) use fan_in = embed_dim; biases zero; layer-norm
    gains one.
    """
    if not isinstance(config, ModelConfig):
        raise ValidationError("init_params needs a ModelConfig")
    config.validate()
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        is_ln = ".ln" in name
        if is_ln and leaf == "g":
            arr = np.ones(shape)
        elif len(shape) == 1 and name not in ("vision.cls",):
            arr = np.zeros(shape)
        else:
            fan_in = config.embed_dim if name in ("vision.cls", "vision.pos", "text.tok", "text.pos") else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        tensors[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _ln(p: ModelParams, name: str, x: Tensor) -> Tensor:
    return ag.layer_norm(x, p[f"{name}.g"], p[f"{name}.b"], p.config.ln_eps)


def _attention(p: ModelParams, name: str, xq: Tensor, xkv: Tensor,
               key_valid: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """Multi-head attention; returns (output, probabilities [B, H, Lq, Lk])."""
    cfg = p.config
    b, lq, d = xq.shape
    lk = xkv.shape[1]
    h = cfg.heads
    hd = d // h
    q = ag.linear(xq, p[f"{name}.wq"], p[f"{name}.bq"]).reshape(b, lq, h, hd).transpose(0, 2, 1, 3)
    k = ag.linear(xkv, p[f"{name}.wk"], p[f"{name}.bk"]).reshape(b, lk, h, hd).transpose(0, 2, 3, 1)
    v = ag.linear(xkv, p[f"{name}.wv"], p[f"{name}.bv"]).reshape(b, lk, h, hd).transpose(0, 2, 1, 3)
    scores = ag.matmul(q, k) * (1.0 / math.sqrt(hd))
    if key_valid is not None:
        scores = scores + ag.key_padding_mask(key_valid, lq, h, scores.dtype)
    probs = ag.softmax(scores, axis=-1)
    ctx = ag.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, lq, d)
    return ag.linear(ctx, p[f"{name}.wo"], p[f"{name}.bo"]), probs


def _mlp(p: ModelParams, name: str, x: Tensor) -> Tensor:
    hidden = ag.gelu(ag.linear(x, p[f"{name}.w1"], p[f"{name}.b1"]))
    return ag.linear(hidden, p[f"{name}.w2"], p[f"{name}.b2"])


def _encoder_block(p: ModelParams, name: str, x: Tensor, key_valid=None) -> Tensor:
    h = _ln(p, f"{name}.ln1", x)
    attn, _ = _attention(p, f"{name}.attn", h, h, key_valid)
    x = x + attn
    return x + _mlp(p, f"{name}.mlp", _ln(p, f"{name}.ln2", x))


def _as_batch(arr: np.ndarray, rank: int) -> np.ndarray:
    arr = np.asarray(arr)
    return arr[None] if arr.ndim == rank - 1 else arr


# ---------------------------------------------------------------------------
# encoders
# ---------------------------------------------------------------------------

def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``[B, C, H, W]`` -> ``[B, n, C * patch * patch]`` in row-major patch order."""
    b, c, hgt, wid = images.shape
    gh, gw = hgt // patch, wid // patch
    x = images.reshape(b, c, gh, patch, gw, patch)
    return x.transpose(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * patch * patch)


def encode_image(p: ModelParams, images) -> Tensor:
    """Visual token states ``[B, n + 1, d]``; position 0 is the CLS token."""
    cfg = p.config
    images = _as_batch(images, 4)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ValidationError(f"image shape {images.shape[1:]} != expected {expected}")
    b = images.shape[0]
    d = cfg.embed_dim
    dtype = p["vision.pos"].dtype
    patches = Tensor(patchify(images, cfg.patch_size).astype(dtype))
    emb = ag.linear(patches, p["vision.patch.w"], p["vision.patch.b"])
    cls = ag.broadcast_to(p["vision.cls"].reshape(1, 1, d), (b, 1, d))
    x = ag.concat([cls, emb], axis=1)
    x = x + ag.broadcast_to(p["vision.pos"], x.shape)
    for i in range(cfg.vision_layers):
        x = _encoder_block(p, f"vision.block{i}", x)
    return _ln(p, "vision.ln_f", x)


def check_token_ids(config: ModelConfig, ids) -> np.ndarray:
    ids = _as_batch(np.asarray(ids), 2)
    if ids.ndim != 2:
        raise ValidationError(f"token ids must be [B, L], got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise ValidationError("token ids must be integers")
    if ids.shape[1] > config.max_text_len + 1:
        raise ValidationError(
            f"text length {ids.shape[1] - 1} exceeds max_text_len {config.max_text_len}"
        )
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise ValidationError(f"token id outside [0, {config.vocab_size})")
    if ids.shape[1] < config.max_text_len + 1:
        pad = np.full((ids.shape[0], config.max_text_len + 1 - ids.shape[1]), PAD_ID, dtype=ids.dtype)
        ids = np.concatenate([ids, pad], axis=1)
    return ids


def encode_text(p: ModelParams, ids) -> TextStates:
    """Text token states ``[B, m + 1, d]``; PAD keys are masked out of attention."""
    cfg = p.config
    ids = check_token_ids(cfg, ids)
    valid = ids != PAD_ID
    b, length = ids.shape
    x = p["text.tok"][ids] + ag.broadcast_to(p["text.pos"], (b, length, cfg.embed_dim))
    for i in range(cfg.text_layers):
        x = _encoder_block(p, f"text.block{i}", x, key_valid=valid)
    states = _ln(p, "text.ln_f", x)
    content = valid & ~np.isin(ids, SPECIAL_IDS)
    return TextStates(states, valid, ~content.any(axis=1))


def fuse(p: ModelParams, visual: Tensor, text: TextStates) -> FusionActivations:
    """Text self-attention, cross-attention over image patches (CLS excluded), MLP."""
    cfg = p.config
    if visual.shape[0] != text.states.shape[0]:
        raise ValidationError("visual and text batches differ in size")
    if visual.shape[-1] != cfg.embed_dim or text.states.shape[-1] != cfg.embed_dim:
        raise ValidationError("state width does not match embed_dim")
    patches = visual[:, 1:, :]
    x = text.states
    maps = []
    for i in range(cfg.fusion_layers):
        name = f"fusion.block{i}"
        h = _ln(p, f"{name}.ln1", x)
        attn, _ = _attention(p, f"{name}.attn", h, h, text.valid)
        x = x + attn
        cross, probs = _attention(p, f"{name}.cross", _ln(p, f"{name}.ln_cross", x), patches)
        maps.append(probs)
        x = x + cross
        x = x + _mlp(p, f"{name}.mlp", _ln(p, f"{name}.ln2", x))
    states = _ln(p, "fusion.ln_f", x)
    return FusionActivations(states, maps, states[:, 0, :], text.valid)


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

def itm_head(p: ModelParams, fusion: FusionActivations) -> Tensor:
    """Logits ``[B, 2]`` ordered ``[match, no-match]`` from the pooled CLS state."""
    return ag.linear(fusion.cls, p["itm.w"], p["itm.b"])


def mlm_head(p: ModelParams, fusion: FusionActivations, positions) -> Tensor:
    """Vocabulary logits at ``positions``.

    ``positions`` is either one index (applied to every sample) or an
    ``(batch_idx, token_idx)`` pair of index arrays selecting rows.
    """
    length = fusion.states.shape[1]
    if isinstance(positions, tuple):
        rows, cols = (np.asarray(a) for a in positions)
    else:
        cols = np.full(fusion.states.shape[0], int(positions))
        rows = np.arange(fusion.states.shape[0])
    if cols.size and (cols.min() < 1 or cols.max() >= length):
        raise ValidationError(f"MLM position outside the text positions [1, {length})")
    picked = fusion.states[rows, cols]
    return ag.linear(picked, p["mlm.w"], p["mlm.b"])


def itc_project(p: ModelParams, cls_state: Tensor, side: str) -> Tensor:
    """Unit-norm projection of a unimodal CLS state (``side`` is vision or text)."""
    if side not in ("vision", "text"):
        raise ValidationError(f"side must be 'vision' or 'text', got {side!r}")
    proj = ag.linear(cls_state, p[f"itc.{side}.w"], p[f"itc.{side}.b"])
    try:
        return ag.l2_normalize(proj, -1)
    except NumericError as exc:
        raise NumericError(f"ITC {side} projection is the zero vector") from exc


def forward_pair(p: ModelParams, images, ids) -> tuple[Tensor, TextStates, FusionActivations]:
    visual = encode_image(p, images)
    text = encode_text(p, ids)
    return visual, text, fuse(p, visual, text)
