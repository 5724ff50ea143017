"""scikit-learn style facade over training, heatmaps and the pointing game."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .errors import ValidationError
from .evalkit import argmax_point, pointing_game
from .groundata import GroundedTriplet, load_dataset
from .microvlm import ModelConfig, ModelParams
from .objectives import LossConfig
from .train import TrainConfig, heatmaps, train


def check_triplets(X) -> list[GroundedTriplet]:
    """Accept a dataset directory or a sequence of triplets; validate each one."""
    if isinstance(X, (str, Path)):
        X = load_dataset(X)
    if isinstance(X, GroundedTriplet):
        X = [X]
    X = list(X)
    if not X:
        raise ValidationError("expected at least one triplet")
    for t in X:
        if not isinstance(t, GroundedTriplet):
            raise ValidationError(f"expected GroundedTriplet, got {type(t).__name__}")
        t.validate()
    return X


def check_heatmaps(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim == 2:
        A = A[None]
    if A.ndim != 3 or A.shape[1] == 0 or A.shape[2] == 0:
        raise ValidationError(f"heatmaps must be [N, H, W], got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValidationError("heatmaps contain non-finite values")
    return A


class GroundingModel(BaseEstimator):
    """Micro vision-language model trained with optional mask consistency.

    ``fit`` optionally pretrains on captions alone (``pretrain_epochs``), then
    fine-tunes with the heatmap loss weighted by ``w_amc``. ``transform``
    returns pixel heatmaps, ``predict`` their peak ``(row, col)``, and
    ``score`` the pointing-game accuracy.
    """

    def __init__(self, embed_dim=64, heads=4, layers=2, patch_size=8, lr=1e-3, epochs=10,
                 pretrain_epochs=0, batch_size=32, w_amc=1.0, amc_variant="amc", delta1=0.1,
                 delta2=0.5, lambda1=0.2, lambda2=0.8, tau=0.07, dtype="float32", seed=0):
        self.embed_dim = embed_dim
        self.heads = heads
        self.layers = layers
        self.patch_size = patch_size
        self.lr = lr
        self.epochs = epochs
        self.pretrain_epochs = pretrain_epochs
        self.batch_size = batch_size
        self.w_amc = w_amc
        self.amc_variant = amc_variant
        self.delta1 = delta1
        self.delta2 = delta2
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.tau = tau
        self.dtype = dtype
        self.seed = seed

    def _configs(self) -> tuple[ModelConfig, LossConfig]:
        model = ModelConfig(embed_dim=self.embed_dim, heads=self.heads, patch_size=self.patch_size,
                            vision_layers=self.layers, text_layers=self.layers,
                            fusion_layers=self.layers, seed=self.seed)
        loss = LossConfig(delta1=self.delta1, delta2=self.delta2, lambda1=self.lambda1,
                          lambda2=self.lambda2, tau=self.tau, w_amc=self.w_amc,
                          amc_variant=self.amc_variant)
        return model, loss

    def fit(self, X, y=None):
        X = check_triplets(X)
        model, loss = self._configs()
        base = dict(batch_size=self.batch_size, lr=self.lr, seed=self.seed, dtype=self.dtype,
                    model=model)
        history = []
        state = None
        if self.pretrain_epochs:
            pre = train(TrainConfig(epochs=self.pretrain_epochs, loss=loss.replace(w_amc=0.0), **base), X)
            history += pre.metrics
            state = pre.state.params.arrays()
        result = train(TrainConfig(epochs=self.epochs, loss=loss, **base), X,
                       initial_params=state)
        history += result.metrics
        self.params_: ModelParams = result.params
        self.history_ = history
        self.n_steps_ = len(history)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        return heatmaps(self.params_, check_triplets(X))

    def predict(self, X) -> np.ndarray:
        maps = self.transform(X)
        return np.array([argmax_point(a) for a in maps], dtype=np.int64).reshape(-1, 2)

    def score(self, X, y=None) -> float:
        X = check_triplets(X)
        maps = self.transform(X)
        return pointing_game((a, [t.box], t.category, t.id) for a, t in zip(maps, X)).overall
