"""``dacvlm`` command line: datagen, pretrain, train, eval, drift, compare.

Exit codes: 0 success, 2 usage or config error, 3 numeric failure, 4 I/O error.
Every command writes a ``manifest.json`` into its ``--out`` directory.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

from .analysis import compare_variants, eval_model, weight_drift
from .autodiff import NumericError
from .blocks import ConfigError
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .model import ModelConfig, TrainingError, VLModel, load_checkpoint, pretrain_base_lm
from .synth import DEFAULT_MIX, KINDS, make_corpus, read_corpus, write_corpus
from .training import STAGES, StageConfig, StageData, normalize_stage, run_pipeline, validate_config

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "DAC_VLM_THREADS"


class UsageError(Exception):
    pass


def git_blob_hash(raw: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(raw) + raw).hexdigest()


def _input_hashes(paths) -> Dict[str, str]:
    out = {}
    for p in paths:
        if p is None:
            continue
        p = Path(p)
        if p.is_dir():
            p = p / "corpus.jsonl"
        out[str(p)] = git_blob_hash(p.read_bytes())
    return out


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    started: str = ""
    finished: str = ""

    @property
    def content_hash(self) -> str:
        doc = {"command": self.command, "config": self.config, "seed": self.seed, "inputs": self.inputs}
        return git_blob_hash(json.dumps(doc, sort_keys=True).encode("utf-8"))

    def write(self, out_dir) -> Path:
        doc = asdict(self)
        doc["content_hash"] = self.content_hash
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _rel(paths, out: Path) -> List[str]:
    return [str(Path(p).relative_to(out)) for p in paths]


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg})") from None
    validate_config(doc)
    return doc


def _canvas(values) -> tuple:
    h, w = values
    if h <= 0 or w <= 0 or h % 32 or w % 32:
        raise ConfigError(f"canvas {h}x{w} must be positive multiples of 32")
    return (h, w)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------
def cmd_datagen(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be >= 0")
    out = _out_dir(args)
    mix = json.loads(args.mix) if args.mix else dict(DEFAULT_MIX)
    bad = sorted(set(mix) - set(KINDS))
    if bad:
        raise ConfigError(f"unknown sample kinds in --mix: {bad}")
    m = RunManifest("datagen", {"n": args.n, "mix": mix, "canvas": list(args.canvas), "inline": args.inline}, args.seed, started=_now())
    samples = make_corpus(args.n, args.seed, mix, _canvas(args.canvas))
    path = write_corpus(samples, out, inline=args.inline)
    m.outputs = _rel([path], out) + (["images/"] if (out / "images").exists() else [])
    m.finished = _now()
    m.write(out)
    print(path)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    out = _out_dir(args)
    doc = _load_config(args.config)
    cfg = ModelConfig.from_dict(doc.get("model", {})) if doc.get("model") else ModelConfig()
    steps = args.steps if args.steps is not None else doc.get("base_steps", 400)
    lr = args.lr if args.lr is not None else doc.get("base_lr", 3e-3)
    samples = read_corpus(args.data)
    texts = [s.target for s in samples if s.kind == "text_only"]
    if not texts:
        raise ConfigError(f"{args.data}: corpus has no text_only samples")
    held = texts[: max(1, len(texts) // 10)]
    seed = _seed(args, doc)
    m = RunManifest("pretrain", {"model": cfg.to_dict(), "steps": steps, "lr": lr}, seed, _input_hashes([args.data]), started=_now())
    ckpt = pretrain_base_lm(cfg, texts, steps, seed=seed, lr=lr, heldout=held)
    path = write_checkpoint(ckpt, out / "checkpoints" / "base.ckpt")
    mpath = out / "metrics" / "base.jsonl"
    mpath.parent.mkdir(parents=True, exist_ok=True)
    mpath.write_text("".join(json.dumps({"step": i, "loss": v}) + "\n" for i, v in enumerate(ckpt.metadata["train_loss"])))
    m.outputs = _rel([path, mpath], out)
    m.finished = _now()
    m.write(out)
    print(f"{path} heldout_ppl={ckpt.metadata['heldout_ppl']:.4f}")
    return EXIT_OK


def _seed(args, doc: dict) -> int:
    return args.seed if args.seed is not None else int(doc.get("seed", 0))


def _stage_configs(doc: dict, stages: List[str], args) -> List[StageConfig]:
    given = {normalize_stage(k): v for k, v in doc.get("stages", {}).items()}
    cfgs = []
    for s in stages:
        kw = dict(given.get(s, {}))
        kw.pop("stage", None)
        if args.steps is not None:
            kw["steps"] = args.steps
        if args.lr is not None:
            kw["peak_lr"] = args.lr
        if args.batch_size is not None:
            kw["batch_size"] = args.batch_size
        cfgs.append(StageConfig.from_dict(kw, stage=s))
    return cfgs


def cmd_train(args) -> int:
    doc = _load_config(args.config)
    if args.stage == "all":
        stages = list(STAGES)
    else:
        try:
            stages = [normalize_stage(args.stage)]
        except ConfigError as exc:
            raise ConfigError(f"--stage: {exc}") from None
    variant = args.variant or doc.get("variant", "dac")
    out = _out_dir(args)
    base = read_checkpoint(args.base_ckpt)
    model: Optional[VLModel] = None
    if args.init_ckpt:
        model = load_checkpoint(args.init_ckpt, variant)
    configs = _stage_configs(doc, stages, args)
    data = StageData.from_samples(read_corpus(args.data))
    resolved = {"variant": variant, "stages": {c.stage: c.to_dict() for c in configs}}
    seed = _seed(args, doc)
    m = RunManifest("train", resolved, seed, _input_hashes([args.data, args.base_ckpt, args.init_ckpt]), started=_now())
    for c in configs:
        (out / "metrics" / f"stage_{c.stage}.jsonl").unlink(missing_ok=True)
    try:
        res = run_pipeline(base, configs, data, seed=seed, variant=variant, metrics_dir=out / "metrics", model=model)
    except TrainingError as exc:
        path = out / "checkpoints" / "last_good.ckpt"
        if exc.checkpoint is not None:
            write_checkpoint(exc.checkpoint, path)
        m.outputs = _rel([path], out)
        m.finished = _now()
        m.write(out)
        print(f"error: {exc}; last good checkpoint: {path}", file=sys.stderr)
        return EXIT_NUMERIC
    paths = [write_checkpoint(ck, out / "checkpoints" / f"stage_{s}.ckpt") for s, ck in res.checkpoints.items()]
    paths += [out / "metrics" / f"stage_{c.stage}.jsonl" for c in configs]
    m.outputs = _rel(paths, out)
    m.finished = _now()
    m.write(out)
    for p in paths:
        print(p)
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    samples = read_corpus(args.data)
    kinds = tuple(args.kinds.split(","))
    if args.limit is not None:
        picked, seen = [], {}
        for s in samples:
            if seen.get(s.kind, 0) < args.limit:
                picked.append(s)
                seen[s.kind] = seen.get(s.kind, 0) + 1
        samples = picked
    out = _out_dir(args)
    m = RunManifest("eval", {"kinds": list(kinds), "limit": args.limit}, 0, _input_hashes([args.ckpt, args.data]), started=_now())
    rep = eval_model(model, samples, kinds, label=Path(args.ckpt).stem)
    paths = [rep.write_csv(out / "reports" / "eval.csv"), rep.write_jsonl(out / "reports" / "eval.jsonl")]
    m.outputs = _rel(paths, out)
    m.finished = _now()
    m.write(out)
    for r in rep.rows():
        print(f"{r['metric']}\t{r['value']:.6g}")
    return EXIT_OK


def cmd_drift(args) -> int:
    before, after = read_checkpoint(args.before), read_checkpoint(args.after)
    out = _out_dir(args)
    m = RunManifest("drift", {"grouping": args.grouping}, 0, _input_hashes([args.before, args.after]), started=_now())
    text_branch = True if args.text_branch else None
    rep = weight_drift(before, after, args.grouping, text_branch, Path(args.before).name, Path(args.after).name)
    paths = [rep.write_csv(out / "reports" / "drift.csv"), rep.write_jsonl(out / "reports" / "drift.jsonl")]
    m.outputs = _rel(paths, out)
    m.finished = _now()
    m.write(out)
    for g, v in rep.mean_abs.items():
        print(f"{g}\t{v:.6g}")
    return EXIT_OK


def cmd_compare(args) -> int:
    doc = _load_config(args.config)
    variants = [v for v in args.variants.split(",") if v]
    base = read_checkpoint(args.base_ckpt)
    samples = read_corpus(args.data)
    configs = _stage_configs(doc, [normalize_stage(s) for s in args.stages.split(",")], args)
    held = read_corpus(args.eval_data)[: args.eval_n] if args.eval_data else []
    out = _out_dir(args)
    resolved = {"variants": variants, "stages": {c.stage: c.to_dict() for c in configs}, "eval_n": len(held)}
    seed = _seed(args, doc)
    m = RunManifest("compare", resolved, seed, _input_hashes([args.base_ckpt, args.data, args.eval_data]), started=_now())
    res = compare_variants(variants, base, StageData.from_samples(samples), configs, seed, held)
    paths = res.write(out / "reports")
    m.outputs = _rel(paths.values(), out)
    m.finished = _now()
    m.write(out)
    for r in res.rows:
        print(f"{r['variant']}\t{r['metric']}\t{r['value']:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dacvlm", description="Desk-scale encoder-free vision-language model toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="generate a synthetic shapes corpus")
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)
    d.add_argument("--canvas", type=int, nargs=2, default=[128, 128], metavar=("H", "W"))
    d.add_argument("--mix", help='JSON object of kind -> weight, e.g. \'{"qa": 1}\'')
    d.add_argument("--inline", action="store_true", help="embed images as hex in the JSONL")
    d.set_defaults(func=cmd_datagen)

    pt = sub.add_parser("pretrain", help="train the dense text-only base LM")
    pt.add_argument("--data", required=True)
    pt.add_argument("--config")
    pt.add_argument("--steps", type=int)
    pt.add_argument("--lr", type=float)
    pt.add_argument("--seed", type=int)
    pt.add_argument("--out", required=True)
    pt.set_defaults(func=cmd_pretrain)

    def stage_overrides(sp):
        sp.add_argument("--config")
        sp.add_argument("--steps", type=int, help="override steps for every stage")
        sp.add_argument("--lr", type=float, help="override peak_lr for every stage")
        sp.add_argument("--batch-size", type=int)
        sp.add_argument("--seed", type=int, help="overrides the config file's seed")
        sp.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run one stage or the whole pipeline")
    t.add_argument("--stage", required=True, help="1, 2.1, 2.2, 3 or all")
    t.add_argument("--base-ckpt", required=True)
    t.add_argument("--init-ckpt", help="continue from this checkpoint instead of the base LM")
    t.add_argument("--data", required=True)
    t.add_argument("--variant")
    stage_overrides(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="exact-match accuracy and text perplexity")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--kinds", default="qa")
    e.add_argument("--limit", type=int, help="at most this many samples per kind")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    dr = sub.add_parser("drift", help="mean absolute weight change between checkpoints")
    dr.add_argument("--before", required=True)
    dr.add_argument("--after", required=True)
    dr.add_argument("--grouping", choices=("layer_type", "layer_index"), default="layer_type")
    dr.add_argument("--text-branch", action="store_true", help="compare text-branch views")
    dr.add_argument("--out", required=True)
    dr.set_defaults(func=cmd_drift)

    c = sub.add_parser("compare", help="train several variants identically and tabulate")
    c.add_argument("--variants", required=True, help="comma separated, e.g. dense,moe_ffn,dac")
    c.add_argument("--base-ckpt", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--stages", default="1,2.1,2.2,3")
    c.add_argument("--eval-data")
    c.add_argument("--eval-n", type=int, default=200)
    stage_overrides(c)
    c.set_defaults(func=cmd_compare)
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, n))


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        with _thread_limit():
            return args.func(args)
    except (OSError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
