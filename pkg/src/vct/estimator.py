"""scikit-learn facade: images in, concept tokens out."""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import ExperimentConfig
from .model import to_images, to_tensor
from .train import Trainer, array_batches


def check_images(X, image_size: int | None = None) -> np.ndarray:
    """Validate an ``(n, H, W, 3)`` image stack; uint8 is rescaled to [0, 1]."""
    X = np.asarray(X)
    if X.ndim == 3 and X.shape[-1] == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 3 or X.shape[1] != X.shape[2]:
        raise ValueError(f"expected square RGB images of shape (n, H, W, 3), got {X.shape}")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or inf")
    if image_size is not None and X.shape[1] != image_size:
        raise ValueError(f"model was fitted on {image_size}px images, got {X.shape[1]}px")
    return X


class VisualConceptTokenizer(TransformerMixin, BaseEstimator):
    """Unsupervised concept tokenizer with a swap-based disentangling loss.

    ``fit`` trains on an image stack, ``transform`` returns concept tokens of
    shape ``(n, num_concepts, dim)`` and ``inverse_transform`` decodes tokens
    back to images. Hyper-parameters mirror :class:`ExperimentConfig`.

    Example:
        >>> vct = VisualConceptTokenizer(num_concepts=4, dim=32, steps=10)
        >>> tokens = vct.fit_transform(images)        # doctest: +SKIP
        >>> recon = vct.inverse_transform(tokens)     # doctest: +SKIP
    """

    def __init__(self, num_concepts=10, dim=64, enc_depth=2, dec_depth=2, heads=4, patch=8,
                 codec="patch", steps=3000, batch_size=32, lr=1e-3, warmup_steps=100,
                 lambda_dis=1.0, rec_weight=1000.0, detach=True, concept_self_attention=False,
                 random_state=0):
        self.num_concepts = num_concepts
        self.dim = dim
        self.enc_depth = enc_depth
        self.dec_depth = dec_depth
        self.heads = heads
        self.patch = patch
        self.codec = codec
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.warmup_steps = warmup_steps
        self.lambda_dis = lambda_dis
        self.rec_weight = rec_weight
        self.detach = detach
        self.concept_self_attention = concept_self_attention
        self.random_state = random_state

    def _config(self, image_size: int) -> ExperimentConfig:
        return ExperimentConfig(
            image_size=image_size, codec=self.codec, patch=self.patch, num_concepts=self.num_concepts,
            dim=self.dim, enc_depth=self.enc_depth, dec_depth=self.dec_depth, heads=self.heads,
            batch_size=self.batch_size, steps=self.steps, lr=self.lr, warmup_steps=self.warmup_steps,
            lambda_dis=self.lambda_dis, rec_weight=self.rec_weight, no_detach=not self.detach,
            concept_self_attention=self.concept_self_attention, seed=int(self.random_state or 0),
        )

    def fit(self, X, y=None):
        X = check_images(X)
        cfg = self._config(X.shape[1])
        trainer = Trainer(cfg, batches=array_batches(X, cfg.batch_size, cfg.seed))
        trainer.run()
        self.config_ = cfg
        self.model_ = trainer.model.eval()
        self.history_ = list(trainer.history)
        self.image_size_ = X.shape[1]
        return self

    @torch.no_grad()
    def transform(self, X, batch_size: int = 256) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X, self.image_size_)
        out = [self.model_.encode(to_tensor(X[i:i + batch_size])).numpy() for i in range(0, len(X), batch_size)]
        return np.concatenate(out)

    @torch.no_grad()
    def inverse_transform(self, tokens, batch_size: int = 256) -> np.ndarray:
        check_is_fitted(self, "model_")
        tokens = np.asarray(tokens, dtype=np.float32)
        if tokens.ndim == 2:
            tokens = tokens[None]
        if tokens.shape[1:] != (self.num_concepts, self.dim):
            raise ValueError(f"expected tokens of shape (n, {self.num_concepts}, {self.dim}), got {tokens.shape}")
        out = [to_images(self.model_.decode_image(torch.from_numpy(tokens[i:i + batch_size])))
               for i in range(0, len(tokens), batch_size)]
        return np.concatenate(out)

    def score(self, X, y=None) -> float:
        """Negative mean squared reconstruction error."""
        X = check_images(X, getattr(self, "image_size_", None))
        return -float(np.mean((self.inverse_transform(self.transform(X)) - X) ** 2))
