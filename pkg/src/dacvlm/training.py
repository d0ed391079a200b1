"""Staged training: freeze masks, warm-up + cosine schedule, data mixing and
the four-stage pipeline."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np

from . import autodiff as ad
from .blocks import ConfigError
from .checkpoint import Checkpoint
from .model import (
    EMBED_GROUP,
    GROUPS,
    PATCH_GROUP,
    TEXT_GROUP,
    VISION_GROUP,
    TrainingError,
    VLModel,
    init_vlm_from_base,
    make_batch,
    text_perplexity,
)
from .optim import AdamW, clip_grad_norm, warmup_cosine
from .tokenizer import Tokenizer

STAGES = ("1", "2.1", "2.2", "3")

# peak learning rates of the reference 7B recipe
PAPER_PEAK_LR = {"1": 2e-4, "2.1": 1e-4, "2.2": 2e-5, "3": 1e-5}
PAPER_BATCH = {"1": 1024, "2.1": 1024, "2.2": 512, "3": 512}
# maximum patch tokens per image (start, end) within each stage
IMAGE_TOKEN_CAP = {"1": (625, 625), "2.1": (625, 2500), "2.2": (2500, 2500), "3": (2500, 2500)}
# fraction of stage 2.1 spent at the low-resolution cap (29M of 77M samples)
RESOLUTION_SWITCH = 29 / 77
DEFAULT_STEPS = {"1": 500, "2.1": 2000, "2.2": 1000, "3": 1000}
DEFAULT_SYNTH = {"1": ("caption",), "2.1": ("caption",), "2.2": ("qa",), "3": ("instruction", "qa")}
WARMUP_RATIO = 0.03

SOURCES = ("synthesized", "language", "web")


def normalize_stage(stage) -> str:
    s = str(stage).strip()
    if s not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return s


@dataclass(frozen=True)
class FreezeMask:
    """Parameter groups that may change during a stage."""

    trainable: frozenset

    def __post_init__(self):
        unknown = set(self.trainable) - set(GROUPS)
        if unknown or not self.trainable:
            raise ConfigError(f"bad trainable groups {sorted(self.trainable)}")

    def is_trainable(self, group: str) -> bool:
        return group in self.trainable


def freeze_mask_for(stage) -> FreezeMask:
    """Stage 1 trains the patch embedding, 2.1 adds the vision branches of
    the decoder, 2.2 and 3 train everything."""
    s = normalize_stage(stage)
    if s == "1":
        return FreezeMask(frozenset({PATCH_GROUP}))
    if s == "2.1":
        return FreezeMask(frozenset({PATCH_GROUP, VISION_GROUP}))
    return FreezeMask(frozenset(GROUPS))


STAGE_SCHEMA = {
    "type": "object",
    "properties": {
        "stage": {"type": ["string", "number"]},
        "trainable": {"type": "array", "items": {"enum": list(GROUPS)}, "minItems": 1},
        "peak_lr": {"type": "number", "minimum": 0},
        "warmup_ratio": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "batch_size": {"type": "integer", "minimum": 1},
        "steps": {"type": "integer", "minimum": 0},
        "mix": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
        "max_image_tokens": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2},
        "synth_kinds": {"type": "array", "items": {"enum": ["caption", "qa", "instruction"]}, "minItems": 1},
        "probe_every": {"type": "integer", "minimum": 0},
        "grad_clip": {"type": "number", "minimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "betas": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        "eps": {"type": "number", "exclusiveMinimum": 0},
        "patch_lr_scale": {"type": "number", "minimum": 0},
    },
    "additionalProperties": False,
}

RUN_SCHEMA = {
    "type": "object",
    "properties": {
        "variant": {"enum": ["dense", "rep", "moe_ffn", "ln_only", "dac"]},
        "model": {"type": "object"},
        "seed": {"type": "integer"},
        "base_steps": {"type": "integer", "minimum": 0},
        "base_lr": {"type": "number", "minimum": 0},
        "canvas": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
        "stages": {"type": "object", "additionalProperties": STAGE_SCHEMA},
    },
    "additionalProperties": False,
}


def validate_config(doc: dict, schema: dict = RUN_SCHEMA) -> None:
    """Raise ConfigError naming the offending field."""
    try:
        jsonschema.validate(doc, schema)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from None


@dataclass
class StageConfig:
    stage: str
    trainable: Tuple[str, ...] = ()
    peak_lr: float = 0.0
    warmup_ratio: float = WARMUP_RATIO
    batch_size: int = 16
    steps: int = 0
    mix: Tuple[float, float, float] = (1.0, 0.0, 0.0)
    max_image_tokens: Tuple[int, int] = (2500, 2500)
    synth_kinds: Tuple[str, ...] = ("caption",)
    probe_every: int = 0
    grad_clip: float = 1.0
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    patch_lr_scale: float = 1.0

    def __post_init__(self):
        self.stage = normalize_stage(self.stage)
        if not self.trainable:
            self.trainable = tuple(sorted(freeze_mask_for(self.stage).trainable))
        self.trainable = tuple(self.trainable)
        FreezeMask(frozenset(self.trainable))
        if not 0 < self.warmup_ratio < 1:
            raise ConfigError(f"warmup_ratio must lie in (0, 1), got {self.warmup_ratio}")
        self.mix = tuple(float(r) for r in self.mix)
        if len(self.mix) != 3 or min(self.mix) < 0 or sum(self.mix) == 0:
            raise ConfigError(f"mix ratios must be three non-negative numbers, not all zero: {self.mix}")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        self.max_image_tokens = tuple(int(x) for x in self.max_image_tokens)
        self.synth_kinds = tuple(self.synth_kinds)
        self.betas = tuple(self.betas)

    @classmethod
    def for_stage(cls, stage, **overrides) -> "StageConfig":
        """Defaults for ``stage``: reference peak LR, token caps and freeze mask."""
        s = normalize_stage(stage)
        kw = dict(
            stage=s,
            peak_lr=PAPER_PEAK_LR[s],
            steps=DEFAULT_STEPS[s],
            max_image_tokens=IMAGE_TOKEN_CAP[s],
            synth_kinds=DEFAULT_SYNTH[s],
        )
        kw.update(overrides)
        return cls(**kw)

    @classmethod
    def from_dict(cls, doc: dict, stage=None) -> "StageConfig":
        validate_config(doc, STAGE_SCHEMA)
        doc = dict(doc)
        s = doc.pop("stage", stage)
        if s is None:
            raise ConfigError("config field stage: missing")
        return cls.for_stage(s, **doc)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @property
    def mask(self) -> FreezeMask:
        return FreezeMask(frozenset(self.trainable))

    def image_token_cap(self, step: int) -> int:
        lo, hi = self.max_image_tokens
        if lo == hi or self.steps == 0:
            return lo
        return lo if step < RESOLUTION_SWITCH * self.steps else hi


def default_stage_configs(**overrides) -> List[StageConfig]:
    return [StageConfig.for_stage(s, **overrides) for s in STAGES]


def lr_at(step: float, total_steps: int, cfg: StageConfig) -> float:
    """Learning rate at ``step`` of ``total_steps`` for this stage."""
    return warmup_cosine(step, total_steps, cfg.peak_lr, cfg.warmup_ratio)


# ---------------------------------------------------------------------------
# Data mixing
# ---------------------------------------------------------------------------
def _block_counts(ratios: np.ndarray, block: int) -> np.ndarray:
    raw = ratios / ratios.sum() * block
    counts = np.floor(raw).astype(np.int64)
    rem = block - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rem]] += 1
    return counts


def mix_stream(datasets: Sequence[Sequence], ratios: Sequence[float], seed: int = 0, block: int = 100) -> Iterator[tuple]:
    """Endless ``(source_index, item)`` stream with proportions ``ratios``.

    Draws come in blocks of ``block`` whose per-source counts follow the
    ratios exactly (largest remainder), shuffled with the seeded generator;
    each source is walked through reshuffled epochs.
    """
    ratios = np.asarray(ratios, dtype=np.float64)
    if ratios.shape != (len(datasets),) or ratios.min() < 0 or ratios.sum() == 0:
        raise ConfigError(f"invalid mix ratios {ratios.tolist()}")
    for i, (ds, r) in enumerate(zip(datasets, ratios)):
        if r > 0 and len(ds) == 0:
            raise ConfigError(f"source {i} is empty but has mix ratio {r}")
    rng = np.random.default_rng(seed)
    counts = _block_counts(ratios, block)
    orders = [rng.permutation(len(ds)) if len(ds) else None for ds in datasets]
    cursor = [0] * len(datasets)
    while True:
        slots = np.repeat(np.arange(len(datasets)), counts)
        rng.shuffle(slots)
        for src in slots:
            src = int(src)
            if cursor[src] == len(datasets[src]):
                orders[src] = rng.permutation(len(datasets[src]))
                cursor[src] = 0
            item = datasets[src][orders[src][cursor[src]]]
            cursor[src] += 1
            yield src, item


# ---------------------------------------------------------------------------
# Stage execution
# ---------------------------------------------------------------------------
@dataclass
class StageData:
    """Per-kind sample pools used to build each stage's three mix sources."""

    pools: Dict[str, list]
    probe_texts: List[str] = field(default_factory=list)

    @classmethod
    def from_samples(cls, samples, probe_texts=()) -> "StageData":
        pools: Dict[str, list] = {}
        for s in samples:
            pools.setdefault(s.kind, []).append(s)
        return cls(pools, list(probe_texts))

    def sources(self, cfg: StageConfig) -> list:
        synth = [s for k in cfg.synth_kinds for s in self.pools.get(k, [])]
        return [synth, self.pools.get("text_only", []), self.pools.get("web", [])]


def run_stage(
    model: VLModel,
    cfg: StageConfig,
    data: StageData,
    seed: int = 0,
    tokenizer: Optional[Tokenizer] = None,
    log_path=None,
) -> Tuple[VLModel, List[dict]]:
    """Train ``model`` in place for one stage; returns it with the metrics rows.

    Only the groups in ``cfg.trainable`` receive gradients or updates.
    Optimizer moments start fresh each stage.
    """
    tok = tokenizer or Tokenizer()
    model.set_trainable(cfg.trainable)
    metrics: List[dict] = []
    fh = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(log_path, "a", encoding="utf-8")
    try:
        if cfg.steps == 0:
            return model, metrics
        named = [(n, p) for n, p in model.named_parameters().items() if p.requires_grad]
        params = [p for _, p in named]
        scales = [cfg.patch_lr_scale if model.group_of(n) == PATCH_GROUP else 1.0 for n, _ in named]
        opt = AdamW(params, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay, lr_scales=scales)
        stream = mix_stream(data.sources(cfg), cfg.mix, seed)
        for step in range(cfg.steps):
            batch_samples = [next(stream)[1] for _ in range(cfg.batch_size)]
            batch = make_batch(batch_samples, tok, image_token_cap=cfg.image_token_cap(step), context=model.config.context)
            loss = model.loss(batch)
            if not np.isfinite(loss.data):
                raise TrainingError(
                    f"stage {cfg.stage}: loss became {float(loss.data)} at step {step}",
                    step,
                    model.to_checkpoint(cfg.stage, step, seed),
                )
            opt.zero_grad()
            ad.backward(loss)
            norm = clip_grad_norm(params, cfg.grad_clip)
            lr = lr_at(step + 1, cfg.steps, cfg)
            opt.step(lr)
            row = {"step": step, "stage": cfg.stage, "loss": float(loss.data), "lr": lr, "grad_norm": norm}
            if cfg.probe_every and data.probe_texts and (step + 1) % cfg.probe_every == 0:
                row["text_ppl"] = text_perplexity(model, data.probe_texts, tok)
            metrics.append(row)
            if fh is not None:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        opt.zero_grad()
        return model, metrics
    finally:
        if fh is not None:
            fh.close()


@dataclass
class PipelineResult:
    model: VLModel
    checkpoints: Dict[str, Checkpoint]
    metrics: List[dict]


def run_pipeline(
    base: Checkpoint,
    configs: Sequence[StageConfig],
    data: StageData,
    seed: int = 0,
    variant="dac",
    tokenizer: Optional[Tokenizer] = None,
    metrics_dir=None,
    model: Optional[VLModel] = None,
) -> PipelineResult:
    """Initialise from ``base`` (unless ``model`` is given) and run the stages in order."""
    order = [normalize_stage(c.stage) for c in configs]
    if order != sorted(order, key=STAGES.index):
        raise ConfigError(f"stages must run in order, got {order}")
    if model is None:
        model = init_vlm_from_base(base, variant, seed=seed)
    checkpoints: Dict[str, Checkpoint] = {}
    metrics: List[dict] = []
    for i, cfg in enumerate(configs):
        log = None if metrics_dir is None else Path(metrics_dir) / f"stage_{cfg.stage}.jsonl"
        model, rows = run_stage(model, cfg, data, seed=seed * 1000 + i, tokenizer=tokenizer, log_path=log)
        metrics.extend(rows)
        checkpoints[cfg.stage] = model.to_checkpoint(
            cfg.stage, cfg.steps, seed, stage_config=cfg.to_dict(), optimizer_moments="reset per stage"
        )
    return PipelineResult(model, checkpoints, metrics)
