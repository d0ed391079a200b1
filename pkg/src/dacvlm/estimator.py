"""scikit-learn style wrappers around the patch tokenizer and the staged VLM."""
from __future__ import annotations

from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .checkpoint import Checkpoint
from .model import ModelConfig, init_vlm_from_base, pretrain_base_lm
from .patch_embed import MODES, PatchEmbedParams, apply_policy, embed_image
from .tokenizer import Tokenizer
from .training import STAGES, StageConfig, StageData, run_pipeline
from .validation import check_choice, check_images, check_positive_int, check_samples


class PatchTokenizer(TransformerMixin, BaseEstimator):
    """Turn images into vision-token embeddings.

    ``transform`` returns one ``(n_tokens, d)`` array per image, laid out as
    ``<CLS>``, patch rows each closed by ``<SPL>``.
    """

    def __init__(self, mode: str = "AnyRatio_HD", d1: int = 64, d: int = 128, seed: int = 0):
        self.mode = mode
        self.d1 = d1
        self.d = d
        self.seed = seed

    def fit(self, X=None, y=None):
        check_choice(self.mode, "mode", MODES)
        check_positive_int(self.d1, "d1")
        check_positive_int(self.d, "d")
        self.params_ = PatchEmbedParams.init(self.d1, self.d, self.seed)
        return self

    def transform(self, X) -> List[np.ndarray]:
        check_is_fitted(self, "params_")
        return [embed_image(apply_policy(img, self.mode), self.params_).vision_embeds.data for img in check_images(X)]


class DaCVisionLanguageModel(BaseEstimator):
    """Base LM pretraining plus the four-stage pipeline behind ``fit``.

    ``fit`` takes a list of corpus samples; text-only samples pretrain the
    base LM (unless ``base`` is given) and all kinds feed the stages.
    ``predict`` returns greedy answers, ``score`` exact-match accuracy.
    Defaults follow the calibrated pilot recipe in :mod:`dacvlm.pilot`.
    """

    def __init__(
        self,
        variant: str = "dac",
        n_layers: int = 4,
        d: int = 128,
        d_ff: int = 512,
        n_heads: int = 4,
        base_steps: int = 300,
        base_lr: float = 3e-3,
        stage_steps=(100, 300, 7000, 300),
        stage_lrs=(5e-4, 5e-4, 5e-4, 2e-4),
        batch_size: int = 16,
        patch_lr_scale: float = 0.2,
        seed: int = 0,
        base: Optional[Checkpoint] = None,
    ):
        self.variant = variant
        self.n_layers = n_layers
        self.d = d
        self.d_ff = d_ff
        self.n_heads = n_heads
        self.base_steps = base_steps
        self.base_lr = base_lr
        self.stage_steps = stage_steps
        self.stage_lrs = stage_lrs
        self.batch_size = batch_size
        self.patch_lr_scale = patch_lr_scale
        self.seed = seed
        self.base = base

    def _stage_configs(self) -> List[StageConfig]:
        if len(self.stage_steps) != len(STAGES) or len(self.stage_lrs) != len(STAGES):
            raise ValueError(f"stage_steps and stage_lrs need {len(STAGES)} entries each")
        return [
            StageConfig.for_stage(
                s,
                steps=check_positive_int(n, "stage_steps", allow_zero=True),
                peak_lr=lr,
                batch_size=self.batch_size,
                patch_lr_scale=self.patch_lr_scale,
            )
            for s, n, lr in zip(STAGES, self.stage_steps, self.stage_lrs)
        ]

    def fit(self, X, y=None):
        samples = check_samples(X)
        tok = Tokenizer()
        base = self.base
        if base is None:
            texts = [s.target for s in samples if s.kind == "text_only"]
            if not texts:
                raise ValueError("no text_only samples to pretrain the base LM on")
            cfg = ModelConfig(n_layers=self.n_layers, d=self.d, d_ff=self.d_ff, n_heads=self.n_heads)
            base = pretrain_base_lm(cfg, texts, self.base_steps, seed=self.seed, lr=self.base_lr, tokenizer=tok)
        data = StageData.from_samples(samples)
        model = init_vlm_from_base(base, self.variant, seed=self.seed)
        res = run_pipeline(base, self._stage_configs(), data, seed=self.seed, tokenizer=tok, model=model)
        self.base_ = base
        self.model_ = res.model
        self.metrics_ = res.metrics
        return self

    def predict(self, X) -> List[str]:
        from .analysis import answer

        check_is_fitted(self, "model_")
        tok = Tokenizer()
        return [tok.decode(answer(self.model_, s, tok)) for s in check_samples(X)]

    def score(self, X, y=None) -> float:
        samples = check_samples(X)
        targets = [s.target for s in samples] if y is None else list(y)
        if len(targets) != len(samples):
            raise ValueError("X and y differ in length")
        preds = self.predict(samples)
        return float(np.mean([p == t for p, t in zip(preds, targets)]))
