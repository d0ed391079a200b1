"""Decoder-only vision-language model: embeddings, stacked modality-aware
blocks, tied output head, greedy decoding and checkpoint conversion."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor
from .blocks import (
    BlockParams,
    ConfigError,
    Router,
    VariantKind,
    active_flops_per_token,
    block_forward_rows,
    build_variant,
    decoupled_names,
    param_names,
)
from .checkpoint import Checkpoint, CheckpointError, read_checkpoint, write_checkpoint
from .optim import AdamW, clip_grad_norm, warmup_cosine
from .patch_embed import (
    PATCH,
    TEXT,
    VISION,
    LengthError,
    PatchEmbedParams,
    TokenSequence,
    embed_images,
    fit_token_budget,
    image_layout,
)
from .tokenizer import Tokenizer

PATCH_GROUP = "patch_embed"
VISION_GROUP = "vision_layers"
TEXT_GROUP = "text_layers"
EMBED_GROUP = "word_embed"
GROUPS = (PATCH_GROUP, VISION_GROUP, TEXT_GROUP, EMBED_GROUP)


class VocabError(ValueError):
    """Token id outside the vocabulary."""


class TrainingError(RuntimeError):
    """Training diverged; carries the step and the last good checkpoint."""

    def __init__(self, message: str, step: int, checkpoint: Optional[Checkpoint] = None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


def _default_vocab() -> int:
    return Tokenizer().vocab_size


@dataclass
class ModelConfig:
    n_layers: int = 4
    d: int = 128
    d_ff: int = 512
    n_heads: int = 4
    vocab_size: int = field(default_factory=_default_vocab)
    context: int = 1024
    variant: str = "dense"
    d1: int = 64
    ln_eps: float = 1e-5
    rope_base: float = 10000.0
    dispatch: str = "gather"

    def __post_init__(self):
        self.variant = VariantKind.parse(self.variant).value
        for name in ("n_layers", "d", "d_ff", "n_heads", "vocab_size", "context", "d1"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d % self.n_heads or (self.d // self.n_heads) % 2:
            raise ConfigError(f"d={self.d} must split into an even head dim over {self.n_heads} heads")
        if self.dispatch not in ("gather", "select"):
            raise ConfigError(f"dispatch must be 'gather' or 'select', got {self.dispatch!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config fields {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# Batches
# ---------------------------------------------------------------------------
@dataclass
class Batch:
    """Right-padded batch. Every row is ``[image segment] + text``."""

    token_ids: np.ndarray  # B x n, -1 at vision positions
    modality: np.ndarray  # B x n of "v"/"t"
    loss_mask: np.ndarray  # B x n, True where the token is a supervised target
    images: Dict[int, np.ndarray] = field(default_factory=dict)  # row -> 3 x H x W

    @property
    def shape(self) -> tuple:
        return self.token_ids.shape


def sample_text(sample, tok: Tokenizer) -> tuple:
    """Token ids ``<bos> prompt target <eos>`` and the target mask."""
    prompt = tok.encode(sample.prompt) if sample.prompt else []
    target = tok.encode(sample.target)
    ids = [tok.bos_id] + prompt + target + [tok.eos_id]
    mask = [False] * (1 + len(prompt)) + [True] * (len(target) + 1)
    return ids, mask


def make_batch(samples, tok: Tokenizer, image_token_cap: Optional[int] = None, context: Optional[int] = None) -> Batch:
    """Collate samples (objects with ``prompt``/``target``/``image``) into a Batch."""
    rows = []
    for s in samples:
        ids, mask = sample_text(s, tok)
        img = s.image
        if img is not None and image_token_cap is not None:
            img = fit_token_budget(img, image_token_cap)
        nv = 0
        if img is not None:
            nv = image_layout(img.height // PATCH, img.width // PATCH).size
        rows.append((img, nv, ids, mask))
    n = max(nv + len(ids) for _, nv, ids, _ in rows)
    if context is not None and n > context:
        raise LengthError(f"batch row of {n} tokens exceeds context {context}")
    B = len(rows)
    token_ids = np.full((B, n), tok.pad_id, dtype=np.int64)
    modality = np.full((B, n), TEXT)
    loss_mask = np.zeros((B, n), dtype=bool)
    images = {}
    for b, (img, nv, ids, mask) in enumerate(rows):
        if img is not None:
            images[b] = img.pixels
            token_ids[b, :nv] = -1
            modality[b, :nv] = VISION
        token_ids[b, nv : nv + len(ids)] = ids
        loss_mask[b, nv : nv + len(ids)] = mask
    return Batch(token_ids, modality, loss_mask, images)


def _next_token_targets(token_ids: np.ndarray, loss_mask: np.ndarray):
    B = token_ids.shape[0]
    targets = np.concatenate([token_ids[:, 1:], np.zeros((B, 1), dtype=np.int64)], axis=1)
    mask = np.concatenate([loss_mask[:, 1:], np.zeros((B, 1), dtype=bool)], axis=1)
    return targets, mask


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------
class VLModel:
    """Parameter store plus forward passes for one :class:`ModelConfig`.

    Names are hierarchical (``layers.3.attn.wq.v``); the output head reuses
    ``embed.tokens``.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.embed = Tensor(rng.normal(0.0, 0.02, (c.vocab_size, c.d)), requires_grad=True)
        self.patch = PatchEmbedParams.init(c.d1, c.d, seed=int(rng.integers(2**31)))
        self.blocks: List[BlockParams] = [
            build_variant(c.variant, c.d, c.d_ff, c.n_heads, seed=int(rng.integers(2**31)), ln_eps=c.ln_eps)
            for _ in range(c.n_layers)
        ]
        self.final_gain = Tensor(np.ones(c.d), requires_grad=True)
        self.final_bias = Tensor(np.zeros(c.d), requires_grad=True)

    # -- parameter bookkeeping ---------------------------------------------
    @property
    def kind(self) -> VariantKind:
        return VariantKind(self.config.variant)

    def named_parameters(self) -> Dict[str, Tensor]:
        out = {"embed.tokens": self.embed}
        for k, t in self.patch.named().items():
            out[f"patch_embed.{k}"] = t
        for i, blk in enumerate(self.blocks):
            for k in param_names(blk.kind):
                out[f"layers.{i}.{k}"] = blk.tensors[k]
        out["final_ln.gain"] = self.final_gain
        out["final_ln.bias"] = self.final_bias
        return out

    def parameters(self) -> List[Tensor]:
        return list(self.named_parameters().values())

    def param_count(self, layers_only: bool = False) -> int:
        named = self.named_parameters()
        if layers_only:
            return sum(t.size for n, t in named.items() if n.startswith("layers."))
        return sum(t.size for t in named.values())

    @staticmethod
    def group_of(name: str) -> str:
        """Freeze-mask group of a parameter name."""
        if name.startswith("patch_embed."):
            return PATCH_GROUP
        if name.startswith("embed."):
            return EMBED_GROUP
        if name.startswith("layers.") and (name.endswith(f".{VISION}") or name.endswith(".delta")):
            return VISION_GROUP
        return TEXT_GROUP

    def groups(self) -> Dict[str, List[str]]:
        out = {g: [] for g in GROUPS}
        for n in self.named_parameters():
            out[self.group_of(n)].append(n)
        return out

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters().items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        named = self.named_parameters()
        missing = sorted(set(named) - set(state))
        unknown = sorted(set(state) - set(named))
        if missing or unknown:
            raise CheckpointError(f"tensor names differ from the model: missing={missing} unknown={unknown}")
        for n, t in named.items():
            arr = np.asarray(state[n], dtype=np.float64)
            if arr.shape != t.shape:
                raise CheckpointError(f"{n}: shape {arr.shape} does not match model shape {t.shape}")
            t.data = arr.copy()

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        for n, t in self.named_parameters().items():
            t.requires_grad = self.group_of(n) in groups
            t.grad = None

    def copy(self) -> "VLModel":
        m = VLModel.__new__(VLModel)
        m.config = self.config
        m.embed = Tensor(self.embed.data.copy(), True)
        m.patch = PatchEmbedParams(*(Tensor(t.data.copy(), True) for t in self.patch.named().values()))
        m.blocks = [
            BlockParams(b.kind, b.d, b.d_ff, b.n_heads, {k: Tensor(v.data.copy(), True) for k, v in b.tensors.items()}, b.ln_eps)
            for b in self.blocks
        ]
        m.final_gain = Tensor(self.final_gain.data.copy(), True)
        m.final_bias = Tensor(self.final_bias.data.copy(), True)
        return m

    def to_checkpoint(self, stage="init", step: int = 0, seed: int = 0, **metadata) -> Checkpoint:
        return Checkpoint(
            self.config.to_dict(),
            self.state_dict(),
            {"stage": str(stage), "step": int(step), "seed": int(seed)},
            dict(metadata),
        )

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "VLModel":
        m = cls(ModelConfig.from_dict(ckpt.config))
        m.load_state_dict(ckpt.tensors)
        return m

    # -- forward passes ----------------------------------------------------
    def _check_ids(self, ids: np.ndarray) -> None:
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            bad = ids[(ids < 0) | (ids >= self.config.vocab_size)]
            raise VocabError(f"token ids {bad[:5].tolist()} outside vocabulary of size {self.config.vocab_size}")

    def _trunk(self, x: Tensor, modality: np.ndarray, B: int, n: int, positions, caches=None) -> Tensor:
        c = self.config
        router = Router(modality, c.dispatch)
        for i, blk in enumerate(self.blocks):
            cache = None if caches is None else caches[i]
            x = block_forward_rows(x, router, blk, B, n, positions, cache=cache, rope_base=c.rope_base)
        return ad.layer_norm(x, self.final_gain, self.final_bias, c.ln_eps)

    def _head(self, h: Tensor) -> Tensor:
        return ad.matmul(h, ad.transpose(self.embed, (1, 0)))

    def _embed_flat(self, token_ids: np.ndarray, modality: np.ndarray, vision_parts) -> Tensor:
        """Rows for a flattened sequence. ``vision_parts`` is a list of
        ``(flat_positions, Tensor)`` covering every vision position."""
        flat_ids = token_ids.reshape(-1)
        flat_mod = modality.reshape(-1)
        text_pos = np.flatnonzero(flat_mod == TEXT)
        self._check_ids(flat_ids[text_pos])
        parts = [ad.embedding(self.embed, flat_ids[text_pos])]
        idx = [text_pos]
        for pos, rows in vision_parts:
            parts.append(rows)
            idx.append(pos)
        return ad.interleave_rows(parts, idx, flat_ids.size)

    def _batch_hidden(self, batch: Batch) -> Tensor:
        B, n = batch.shape
        if n > self.config.context:
            raise LengthError(f"sequence of {n} tokens exceeds context {self.config.context}")
        by_shape: Dict[tuple, List[int]] = {}
        for b, px in sorted(batch.images.items()):
            by_shape.setdefault(px.shape, []).append(b)
        vision_parts = []
        for shape, rows in by_shape.items():
            L = image_layout(shape[1] // PATCH, shape[2] // PATCH).size
            emb = embed_images(np.stack([batch.images[b] for b in rows]), self.patch)
            pos = (np.asarray(rows)[:, None] * n + np.arange(L)[None, :]).reshape(-1)
            vision_parts.append((pos, emb))
        x = self._embed_flat(batch.token_ids, batch.modality, vision_parts)
        return self._trunk(x, batch.modality.reshape(-1), B, n, np.arange(n))

    def forward_batch(self, batch: Batch) -> Tensor:
        """Logits ``B x n x V``."""
        B, n = batch.shape
        return ad.reshape(self._head(self._batch_hidden(batch)), (B, n, self.config.vocab_size))

    def loss(self, batch: Batch) -> Tensor:
        """Next-token cross-entropy over supervised targets only."""
        targets, mask = _next_token_targets(batch.token_ids, batch.loss_mask)
        rows = np.flatnonzero(mask.reshape(-1))
        if rows.size == 0:
            raise ad.DegenerateBatchError("batch has no supervised targets")
        h = ad.gather_rows(self._batch_hidden(batch), rows)
        return ad.cross_entropy(self._head(h), targets.reshape(-1)[rows])

    def forward(self, seq: TokenSequence) -> Tensor:
        """Logits ``n x V`` for one :class:`TokenSequence`."""
        n = len(seq)
        if n > self.config.context:
            raise LengthError(f"sequence of {n} tokens exceeds context {self.config.context}")
        parts = []
        if seq.vision_embeds is not None:
            parts.append((np.flatnonzero(seq.modality == VISION), seq.vision_embeds))
        x = self._embed_flat(seq.token_ids, seq.modality, parts)
        return self._head(self._trunk(x, seq.modality, 1, n, np.arange(n)))

    def sequence_loss(self, seq: TokenSequence) -> Tensor:
        targets, mask = _next_token_targets(seq.token_ids[None], seq.loss_mask[None])
        return ad.cross_entropy(self.forward(seq), targets[0], mask[0])

    def embed_image(self, img):
        from .patch_embed import embed_image

        return embed_image(img, self.patch)

    # -- decoding ----------------------------------------------------------
    def generate(self, seq: TokenSequence, max_new: int, eos_id: Optional[int] = None, use_cache: bool = True) -> List[int]:
        """Greedy continuation of ``seq``; stops at ``eos_id`` (not returned)."""
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        if len(seq) + max_new > self.config.context:
            raise LengthError(f"{len(seq)} prompt + {max_new} new tokens exceed context {self.config.context}")
        out: List[int] = []
        with ad.no_grad():
            if not use_cache:
                cur = seq
                for _ in range(max_new):
                    nxt = int(np.argmax(self.forward(cur).data[-1]))
                    if nxt == eos_id:
                        break
                    out.append(nxt)
                    cur = _append_text(cur, nxt)
                return out
            caches = [dict() for _ in self.blocks]
            n = len(seq)
            parts = []
            if seq.vision_embeds is not None:
                parts.append((np.flatnonzero(seq.modality == VISION), seq.vision_embeds))
            x = self._embed_flat(seq.token_ids, seq.modality, parts)
            h = self._trunk(x, seq.modality, 1, n, np.arange(n), caches)
            logits = self._head(ad.gather_rows(h, [n - 1])).data[0]
            pos = n
            for _ in range(max_new):
                nxt = int(np.argmax(logits))
                if nxt == eos_id:
                    break
                out.append(nxt)
                if len(out) == max_new:
                    break
                x = ad.embedding(self.embed, np.array([nxt]))
                h = self._trunk(x, np.array([TEXT]), 1, 1, np.array([pos]), caches)
                logits = self._head(h).data[0]
                pos += 1
        return out

    # -- accounting --------------------------------------------------------
    def active_flops_per_token(self, n: int) -> int:
        """Multiplies per text token for the whole stack plus the output head."""
        c = self.config
        return c.n_layers * active_flops_per_token(c.variant, c.d, c.d_ff, n, c.n_heads) + c.d * c.vocab_size


def _append_text(seq: TokenSequence, tok_id: int) -> TokenSequence:
    return TokenSequence(
        token_ids=np.append(seq.token_ids, tok_id),
        modality=np.append(seq.modality, TEXT),
        slots=np.append(seq.slots, "text"),
        loss_mask=np.append(seq.loss_mask, False),
        vision_embeds=seq.vision_embeds,
        image_grid=seq.image_grid,
    )


def forward(model: VLModel, seq: TokenSequence) -> Tensor:
    return model.forward(seq)


def generate(model: VLModel, seq: TokenSequence, max_new: int, eos_id: Optional[int] = None, use_cache: bool = True) -> List[int]:
    return model.generate(seq, max_new, eos_id, use_cache)


# ---------------------------------------------------------------------------
# Base LM and VLM initialisation
# ---------------------------------------------------------------------------
def text_perplexity(model: VLModel, texts: Sequence[str], tok: Tokenizer, batch_size: int = 64) -> float:
    """exp(mean next-token NLL) over ``<bos> text <eos>`` sequences."""
    from .synth import Sample

    total, count = 0.0, 0
    with ad.no_grad():
        for i in range(0, len(texts), batch_size):
            chunk = [Sample("text_only", "", t) for t in texts[i : i + batch_size]]
            batch = make_batch(chunk, tok)
            k = int(_next_token_targets(batch.token_ids, batch.loss_mask)[1].sum())
            total += float(model.loss(batch).data) * k
            count += k
    return math.exp(total / count)


def pretrain_base_lm(
    config: ModelConfig,
    text_corpus: Sequence[str],
    steps: int,
    seed: int = 0,
    lr: float = 3e-3,
    batch_size: int = 16,
    warmup_ratio: float = 0.03,
    heldout: Optional[Sequence[str]] = None,
    tokenizer: Optional[Tokenizer] = None,
) -> Checkpoint:
    """Train a dense text-only LM that stands in for the pretrained LLM."""
    from .synth import Sample

    if VariantKind(config.variant) is not VariantKind.DENSE:
        raise ConfigError("the base LM must use the dense variant")
    tok = tokenizer or Tokenizer()
    model = VLModel(config, seed=seed)
    model.set_trainable((TEXT_GROUP, EMBED_GROUP))
    params = [p for p in model.parameters() if p.requires_grad]
    opt = AdamW(params)
    rng = np.random.default_rng(seed)
    samples = [Sample("text_only", "", t) for t in text_corpus]
    losses = []
    for step in range(steps):
        pick = rng.integers(len(samples), size=batch_size)
        loss = model.loss(make_batch([samples[i] for i in pick], tok))
        if not np.isfinite(loss.data):
            raise TrainingError(f"base LM loss is {loss.data} at step {step}", step, model.to_checkpoint("base", step, seed))
        opt.zero_grad()
        ad.backward(loss)
        clip_grad_norm(params, 1.0)
        opt.step(warmup_cosine(step + 1, steps, lr, warmup_ratio))
        losses.append(float(loss.data))
    meta = {"train_loss": losses}
    if heldout:
        meta["heldout_ppl"] = text_perplexity(model, heldout, tok)
    return model.to_checkpoint("base", steps, seed, **meta)


def init_vlm_from_base(base: Checkpoint, variant, seed: int = 0, **overrides) -> VLModel:
    """Sparse VLM whose every modality branch starts as a copy of the base LM.

    The patch embedding is freshly initialised from ``seed``; ``rep`` deltas
    start at zero.
    """
    base_cfg = ModelConfig.from_dict(base.config)
    if VariantKind(base_cfg.variant) is not VariantKind.DENSE:
        raise ConfigError(f"base checkpoint must be a dense LM, got {base_cfg.variant!r}")
    dims = ("n_layers", "d", "d_ff", "n_heads", "vocab_size")
    clash = {k: v for k, v in overrides.items() if k in dims and v != getattr(base_cfg, k)}
    if clash:
        raise ConfigError(f"dims {clash} differ from the base LM")
    cfg = base_cfg.replace(variant=VariantKind.parse(variant).value, **overrides)
    model = VLModel(cfg, seed=seed)
    for name, arr in base.tensors.items():
        if name.startswith("patch_embed."):
            continue
        expected = {
            "embed.tokens": model.embed.shape,
            "final_ln.gain": model.final_gain.shape,
            "final_ln.bias": model.final_bias.shape,
        }
        if name in expected and arr.shape != expected[name]:
            raise ConfigError(f"{name}: base shape {arr.shape} vs model {expected[name]}")
    model.embed.data = base.tensors["embed.tokens"].copy()
    model.final_gain.data = base.tensors["final_ln.gain"].copy()
    model.final_bias.data = base.tensors["final_ln.bias"].copy()
    dec = set(decoupled_names(cfg.variant))
    for i, blk in enumerate(model.blocks):
        for local in param_names(VariantKind.DENSE):
            src = base.tensors.get(f"layers.{i}.{local}")
            if src is None:
                raise CheckpointError(f"base checkpoint lacks layers.{i}.{local}")
            targets = [f"{local}.{TEXT}", f"{local}.{VISION}"] if local in dec else [local]
            for t in targets:
                if blk.tensors[t].shape != src.shape:
                    raise ConfigError(f"layers.{i}.{t}: base shape {src.shape} vs model {blk.tensors[t].shape}")
                blk.tensors[t].data = src.copy()
    return model


# ---------------------------------------------------------------------------
# Checkpoint files
# ---------------------------------------------------------------------------
def save_checkpoint(model: VLModel, path, stage="init", step: int = 0, seed: int = 0, **metadata) -> Path:
    return write_checkpoint(model.to_checkpoint(stage, step, seed, **metadata), path)


def load_checkpoint(path, variant=None) -> VLModel:
    """Read a checkpoint file into a model; ``variant`` (if given) must match."""
    ckpt = read_checkpoint(path)
    if variant is not None and VariantKind.parse(variant).value != ckpt.variant:
        raise ConfigError(f"checkpoint holds a {ckpt.variant!r} model, expected {VariantKind.parse(variant).value!r}")
    return VLModel.from_checkpoint(ckpt)
