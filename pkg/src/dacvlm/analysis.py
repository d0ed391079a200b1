"""Diagnostics: weight drift between checkpoints, exact-match evaluation,
parameter/FLOP accounting and side-by-side variant comparison."""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .blocks import FFN_WEIGHTS, VariantKind, param_count
from .checkpoint import Checkpoint
from .model import VLModel, sample_text, text_perplexity
from .patch_embed import TEXT, VISION, concat_multimodal
from .tokenizer import Tokenizer

LAYER_TYPES = ("attention", "norm", "ffn", "embedding")
NON_LAYER = "non_layer"
_LAYER_RE = re.compile(r"^layers\.(\d+)\.")


class ComparisonError(ValueError):
    """Checkpoints or configurations cannot be compared."""


def layer_type(name: str) -> str:
    if ".attn." in name:
        return "attention"
    if ".ln1." in name or ".ln2." in name or name.startswith("final_ln."):
        return "norm"
    if ".ffn." in name:
        return "ffn"
    return "embedding"


def layer_index(name: str) -> str:
    m = _LAYER_RE.match(name)
    return m.group(1) if m else NON_LAYER


def _tensors(x) -> Dict[str, np.ndarray]:
    if isinstance(x, Checkpoint):
        return x.tensors
    if isinstance(x, VLModel):
        return x.state_dict()
    return dict(x)


def text_branch_view(tensors: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """The weights text tokens actually use, under dense-LM names.

    Vision branches and the patch embedding are dropped, ``.t`` suffixes are
    stripped and ``rep`` deltas are folded into their base weights.
    """
    out = {}
    for name, arr in tensors.items():
        if name.startswith("patch_embed.") or name.endswith(f".{VISION}") or name.endswith(".delta"):
            continue
        key = name[: -len(TEXT) - 1] if name.endswith(f".{TEXT}") else name
        delta = tensors.get(f"{name}.delta")
        out[key] = arr if delta is None else arr + delta
    return out


@dataclass
class DriftReport:
    """Per-group mean absolute weight change (per scalar)."""

    grouping: str
    mean_abs: Dict[str, float]
    counts: Dict[str, int]
    before_id: str = "before"
    after_id: str = "after"

    def rows(self) -> List[dict]:
        return [
            {
                "grouping": self.grouping,
                "group": g,
                "mean_abs_delta": self.mean_abs[g],
                "n_params": self.counts[g],
                "normalization": "per_scalar_mean",
                "before": self.before_id,
                "after": self.after_id,
            }
            for g in self.mean_abs
        ]

    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.mean_abs.values())

    def write_csv(self, path) -> Path:
        return write_rows_csv(self.rows(), path)

    def write_jsonl(self, path) -> Path:
        return write_rows_jsonl(self.rows(), path)


def weight_drift(before, after, grouping: str = "layer_type", text_branch: Optional[bool] = None,
                 before_id: str = "before", after_id: str = "after") -> DriftReport:
    """Mean ``|after - before|`` over all scalars of each group.

    ``grouping`` is ``"layer_type"`` (attention / norm / ffn / embedding) or
    ``"layer_index"``. When the two checkpoints use different variants the
    comparison runs on their text-branch views (set ``text_branch`` to force
    either behaviour).
    """
    if grouping not in ("layer_type", "layer_index"):
        raise ValueError(f"unknown grouping {grouping!r}")
    a, b = _tensors(before), _tensors(after)
    if text_branch is None:
        text_branch = set(a) != set(b)
    if text_branch:
        a, b = text_branch_view(a), text_branch_view(b)
    only_a, only_b = sorted(set(a) - set(b)), sorted(set(b) - set(a))
    if only_a or only_b:
        raise ComparisonError(f"tensor names differ: only in before={only_a}, only in after={only_b}")
    bad = sorted(n for n in a if a[n].shape != b[n].shape)
    if bad:
        raise ComparisonError(f"tensor shapes differ for {bad}")
    key = layer_type if grouping == "layer_type" else layer_index
    sums: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    for name in sorted(a):
        g = key(name)
        sums[g] = sums.get(g, 0.0) + float(np.abs(b[name] - a[name]).sum())
        counts[g] = counts.get(g, 0) + int(a[name].size)
    order = sorted(sums, key=lambda g: (g == NON_LAYER, int(g) if g.isdigit() else 0, g))
    if grouping == "layer_type":
        order = [g for g in LAYER_TYPES if g in sums]
    return DriftReport(grouping, {g: sums[g] / counts[g] for g in order}, {g: counts[g] for g in order}, before_id, after_id)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------
def question_type(prompt: str) -> str:
    if "what color is" in prompt:
        return "color"
    if "how many" in prompt:
        return "count"
    if prompt.startswith(("question: is", "user: is")):
        return "relation"
    if "describe" in prompt:
        return "describe"
    return "other"


@dataclass
class EvalReport:
    accuracy: Dict[str, float]
    counts: Dict[str, int]
    text_ppl: Optional[float] = None
    n_text: int = 0
    by_question: Dict[str, float] = field(default_factory=dict)
    label: str = "model"

    def rows(self) -> List[dict]:
        out = [{"model": self.label, "metric": f"accuracy_{k}", "value": v, "n": self.counts[k]} for k, v in self.accuracy.items()]
        out += [{"model": self.label, "metric": f"accuracy_q_{k}", "value": v, "n": None} for k, v in self.by_question.items()]
        if self.text_ppl is not None:
            out.append({"model": self.label, "metric": "text_ppl", "value": self.text_ppl, "n": self.n_text})
        return out

    def write_csv(self, path) -> Path:
        return write_rows_csv(self.rows(), path)

    def write_jsonl(self, path) -> Path:
        return write_rows_jsonl(self.rows(), path)


def prompt_sequence(model: VLModel, sample, tok: Tokenizer):
    """The model input for answering ``sample``: image segment + ``<bos> prompt``."""
    ids, mask = sample_text(sample, tok)
    prompt_ids = ids[: mask.index(True)]
    img = sample.image
    seg = None if img is None else model.embed_image(img)
    return concat_multimodal(seg, prompt_ids, model.config.context)


def answer(model: VLModel, sample, tok: Optional[Tokenizer] = None, max_new: Optional[int] = None) -> List[int]:
    """Greedy answer token ids for ``sample`` (without the end token)."""
    tok = tok or Tokenizer()
    seq = prompt_sequence(model, sample, tok)
    limit = max_new or len(tok.encode(sample.target)) + 2
    limit = min(limit, model.config.context - len(seq))
    return model.generate(seq, limit, tok.eos_id)


def eval_model(model: VLModel, corpus: Sequence, kinds: Sequence[str] = ("qa",), tokenizer: Optional[Tokenizer] = None,
               label: str = "model") -> EvalReport:
    """Exact-match accuracy per sample kind and perplexity on text-only samples."""
    if not corpus:
        raise ValueError("empty evaluation corpus")
    tok = tokenizer or Tokenizer()
    hits: Dict[str, List[bool]] = {}
    per_q: Dict[str, List[bool]] = {}
    for s in corpus:
        if s.kind not in kinds or s.kind == "text_only":
            continue
        ok = answer(model, s, tok) == tok.encode(s.target)
        hits.setdefault(s.kind, []).append(ok)
        per_q.setdefault(question_type(s.prompt), []).append(ok)
    texts = [s.target for s in corpus if s.kind == "text_only"]
    ppl = text_perplexity(model, texts, tok) if texts else None
    return EvalReport(
        accuracy={k: float(np.mean(v)) for k, v in hits.items()},
        counts={k: len(v) for k, v in hits.items()},
        text_ppl=ppl,
        n_text=len(texts),
        by_question={k: float(np.mean(v)) for k, v in sorted(per_q.items())},
        label=label,
    )


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------
def flops_table(n_layers: int, d: int, d_ff: int, n_heads: int, n: int, vocab_size: int) -> List[dict]:
    """Parameter and per-token multiply counts of the decoder stack per variant."""
    from .blocks import active_flops_per_token

    rows = []
    for kind in VariantKind:
        rows.append(
            {
                "variant": kind.value,
                "layer_params": n_layers * param_count(kind, d, d_ff, n_heads),
                "active_flops_per_token": n_layers * active_flops_per_token(kind, d, d_ff, n, n_heads) + d * vocab_size,
            }
        )
    return rows


# ---------------------------------------------------------------------------
# Variant comparison
# ---------------------------------------------------------------------------
@dataclass
class ComparisonResult:
    rows: List[dict]
    loss_curves: List[dict]
    drift: Dict[str, DriftReport]

    def variants(self) -> List[str]:
        return list(dict.fromkeys(r["variant"] for r in self.rows))

    def write(self, out_dir) -> Dict[str, Path]:
        out_dir = Path(out_dir)
        drift_rows = [dict(r, variant=v) for v, rep in self.drift.items() for r in rep.rows()]
        return {
            "table_csv": write_rows_csv(self.rows, out_dir / "comparison.csv"),
            "table_jsonl": write_rows_jsonl(self.rows, out_dir / "comparison.jsonl"),
            "loss_curves": write_rows_jsonl(self.loss_curves, out_dir / "loss_curves.jsonl"),
            "drift_csv": write_rows_csv(drift_rows, out_dir / "drift.csv"),
            "drift_jsonl": write_rows_jsonl(drift_rows, out_dir / "drift.jsonl"),
        }


def compare_variants(variants: Sequence, base: Checkpoint, data, configs: Sequence, seed: int = 0,
                     eval_samples: Sequence = (), tokenizer: Optional[Tokenizer] = None) -> ComparisonResult:
    """Train every variant from the same base with identical data, stages and
    seed, then tabulate loss, accuracy, text perplexity and text-branch drift."""
    from .training import run_pipeline

    kinds = [VariantKind.parse(v).value for v in variants]
    if len(set(kinds)) != len(kinds) or not kinds:
        raise ComparisonError(f"variants must be distinct and non-empty, got {kinds}")
    if base.variant != VariantKind.DENSE.value:
        raise ComparisonError("variants are compared from a dense base LM")
    tok = tokenizer or Tokenizer()
    rows, curves, drift = [], [], {}
    for kind in kinds:
        res = run_pipeline(base, configs, data, seed=seed, variant=kind, tokenizer=tok)
        losses = [m["loss"] for m in res.metrics]
        tail = losses[-10:]
        for m in res.metrics:
            curves.append({"variant": kind, "stage": m["stage"], "step": m["step"], "loss": m["loss"]})
        metrics = {
            "final_loss": float(np.mean(tail)) if tail else float("nan"),
            "layer_params": res.model.param_count(layers_only=True),
        }
        if eval_samples:
            rep = eval_model(res.model, eval_samples, kinds=("qa", "instruction", "caption"), tokenizer=tok, label=kind)
            for k, v in rep.accuracy.items():
                metrics[f"accuracy_{k}"] = v
            if rep.text_ppl is not None:
                metrics["text_ppl"] = rep.text_ppl
        dr = weight_drift(base, res.model.to_checkpoint(), "layer_type", text_branch=True, before_id="base", after_id=kind)
        drift[kind] = dr
        for g, v in dr.mean_abs.items():
            metrics[f"text_drift_{g}"] = v
        rows += [{"variant": kind, "metric": k, "value": v} for k, v in metrics.items()]
    return ComparisonResult(rows, curves, drift)


# ---------------------------------------------------------------------------
# Report files
# ---------------------------------------------------------------------------
def write_rows_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(dict.fromkeys(k for r in rows for k in r)) if rows else ["empty"]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path


def write_rows_jsonl(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return path
