import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dacvlm.blocks import ConfigError
from dacvlm.model import GROUPS, TrainingError, VLModel, init_vlm_from_base
from dacvlm.optim import AdamW
from dacvlm.synth import make_corpus, text_only
from dacvlm.training import (
    PAPER_PEAK_LR,
    StageConfig,
    StageData,
    freeze_mask_for,
    lr_at,
    mix_stream,
    run_pipeline,
    run_stage,
    validate_config,
)


@pytest.fixture(scope="module")
def data():
    corpus = make_corpus(240, seed=2, canvas=(64, 64))
    return StageData.from_samples(corpus, [text_only(10**6 + i) for i in range(10)])


def snapshot(model):
    return {n: t.data.copy() for n, t in model.named_parameters().items()}


def changed_groups(model, before):
    after = snapshot(model)
    return {VLModel.group_of(n) for n in before if not np.array_equal(before[n], after[n])}


# -- freeze masks -----------------------------------------------------------
def test_freeze_mask_examples():
    assert freeze_mask_for("1").trainable == {"patch_embed"}
    assert freeze_mask_for(2.1).trainable == {"patch_embed", "vision_layers"}
    assert freeze_mask_for("2.2").trainable == set(GROUPS)
    assert freeze_mask_for("3").trainable == set(GROUPS)
    with pytest.raises(ConfigError):
        freeze_mask_for("4")


@pytest.mark.parametrize("stage", ["1", "2.1", "2.2"])
def test_only_unmasked_groups_change(tiny_base, data, stage):
    model = init_vlm_from_base(tiny_base, "dac", seed=0)
    before = snapshot(model)
    cfg = StageConfig.for_stage(stage, steps=100, peak_lr=1e-3, batch_size=4, synth_kinds=("caption", "qa"))
    model, rows = run_stage(model, cfg, data, seed=1)
    assert len(rows) == 100
    assert changed_groups(model, before) == set(cfg.trainable)


def test_zero_steps_leave_model_unchanged(tiny_base, data, tmp_path):
    model = init_vlm_from_base(tiny_base, "dac", seed=0)
    before = snapshot(model)
    log = tmp_path / "m.jsonl"
    _, rows = run_stage(model, StageConfig.for_stage("3", steps=0), data, log_path=log)
    assert rows == [] and changed_groups(model, before) == set()
    assert not log.exists() or log.read_text() == ""


def test_zero_lr_is_a_no_op(tiny_base, data):
    model = init_vlm_from_base(tiny_base, "dac", seed=0)
    before = snapshot(model)
    run_stage(model, StageConfig.for_stage("3", steps=5, peak_lr=0.0, batch_size=2), data)
    assert changed_groups(model, before) == set()


def test_adamw_zero_lr_updates_moments_only():
    from dacvlm.autodiff import Tensor

    p = Tensor(np.ones(3), requires_grad=True)
    p.grad = np.array([1.0, -2.0, 0.5])
    opt = AdamW([p])
    opt.step(0.0)
    assert np.array_equal(p.data, np.ones(3))


def test_adamw_lr_scales_match_separate_optimizers():
    from dacvlm.autodiff import Tensor

    g = np.array([0.3, -1.0, 2.0])
    a, b = Tensor(np.zeros(3), requires_grad=True), Tensor(np.zeros(3), requires_grad=True)
    ref = Tensor(np.zeros(3), requires_grad=True)
    opt, solo = AdamW([a, b], lr_scales=[1.0, 0.25]), AdamW([ref])
    for _ in range(3):
        a.grad, b.grad, ref.grad = g.copy(), g.copy(), g.copy()
        opt.step(1e-2)
        solo.step(0.25e-2)
    assert np.array_equal(b.data, ref.data)
    assert np.allclose(a.data, 4 * b.data)
    with pytest.raises(ValueError):
        AdamW([a, b], lr_scales=[1.0])


def test_patch_lr_scale_zero_freezes_patch_embedding(tiny_base, data):
    model = init_vlm_from_base(tiny_base, "dac", seed=0)
    before = snapshot(model)
    run_stage(model, StageConfig.for_stage("2.1", steps=5, peak_lr=1e-2, batch_size=2, patch_lr_scale=0.0), data)
    assert changed_groups(model, before) == {"vision_layers"}


def test_metrics_rows_and_probe(tiny_base, data, tmp_path):
    import json

    model = init_vlm_from_base(tiny_base, "dac", seed=0)
    cfg = StageConfig.for_stage("1", steps=6, peak_lr=1e-3, batch_size=2, probe_every=3)
    log = tmp_path / "stage_1.jsonl"
    _, rows = run_stage(model, cfg, data, log_path=log)
    on_disk = [json.loads(line) for line in log.read_text().splitlines()]
    assert on_disk == rows
    assert [r["step"] for r in rows] == list(range(6))
    assert {"step", "stage", "loss", "lr", "grad_norm"} <= set(rows[0])
    assert [("text_ppl" in r) for r in rows] == [False, False, True, False, False, True]


def test_caption_loss_decreases(tiny_base, data):
    model = init_vlm_from_base(tiny_base, "dac", seed=0)
    cfg = StageConfig.for_stage("2.2", steps=200, peak_lr=3e-3, batch_size=8, synth_kinds=("caption",))
    _, rows = run_stage(model, cfg, data, seed=0)
    windows = np.array([r["loss"] for r in rows]).reshape(4, 50).mean(axis=1)
    assert np.all(np.diff(windows) < 0)


def test_nan_loss_aborts_with_last_good_checkpoint(tiny_base, data):
    model = init_vlm_from_base(tiny_base, "dac", seed=0)
    model.named_parameters()["final_ln.gain"].data[0] = np.nan
    with pytest.raises(TrainingError) as info:
        run_stage(model, StageConfig.for_stage("1", steps=3, batch_size=2), data)
    assert info.value.step == 0
    assert info.value.checkpoint is not None


# -- learning-rate schedule -------------------------------------------------
def test_lr_examples():
    cfg = StageConfig.for_stage("1")
    assert lr_at(0, 1000, cfg) == 0.0
    assert lr_at(30, 1000, cfg) == pytest.approx(2e-4, abs=1e-18)
    assert abs(lr_at(1000, 1000, cfg)) <= 1e-12
    assert {s: StageConfig.for_stage(s).peak_lr for s in PAPER_PEAK_LR} == {
        "1": 2e-4, "2.1": 1e-4, "2.2": 2e-5, "3": 1e-5
    }
    assert StageConfig.for_stage("3").warmup_ratio == 0.03
    with pytest.raises(ValueError):
        lr_at(1001, 1000, cfg)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5000), st.floats(1e-6, 1.0), st.floats(0.01, 0.5))
def test_lr_matches_closed_form(total, peak, warm):
    cfg = StageConfig.for_stage("1", peak_lr=peak, warmup_ratio=warm)
    w = warm * total
    for step in np.linspace(0, total, 17):
        if step < w:
            ref = peak * step / w
        else:
            ref = peak * 0.5 * (1 + math.cos(math.pi * (step - w) / (total - w))) if total > w else peak
        assert lr_at(step, total, cfg) == pytest.approx(ref, rel=1e-12, abs=1e-18)
        assert 0 <= lr_at(step, total, cfg) <= peak * (1 + 1e-12)


# -- data mixing --------------------------------------------------------------
def take(stream, n):
    return [next(stream) for _ in range(n)]


def test_mix_only_synth():
    draws = take(mix_stream([list(range(5)), [], []], (1, 0, 0), seed=0), 300)
    assert {src for src, _ in draws} == {0}


def test_mix_half_half_counts():
    draws = take(mix_stream([list(range(37)), list(range(11)), []], (1, 1, 0), seed=3), 10_000)
    counts = Counter(src for src, _ in draws)
    assert abs(counts[0] - 5000) <= 100 and abs(counts[1] - 5000) <= 100


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=3, max_size=3).filter(any), st.integers(0, 1000))
def test_mix_proportions_converge(ratios, seed):
    sources = [list(range(7)), list(range(13)), list(range(3))]
    draws = take(mix_stream(sources, ratios, seed=seed), 10_000)
    counts = Counter(src for src, _ in draws)
    total = sum(ratios)
    for i, r in enumerate(ratios):
        assert abs(counts[i] / 10_000 - r / total) <= 0.01


def test_mix_seeded_order():
    src = [list(range(20)), list(range(20, 30)), list(range(30, 35))]
    a = take(mix_stream(src, (2, 1, 1), seed=7), 500)
    b = take(mix_stream(src, (2, 1, 1), seed=7), 500)
    c = take(mix_stream(src, (2, 1, 1), seed=8), 500)
    assert a == b and a != c


def test_mix_empty_source_rejected():
    with pytest.raises(ConfigError):
        next(mix_stream([[1], [], []], (1, 1, 0)))
    with pytest.raises(ConfigError):
        next(mix_stream([[1], [2], [3]], (0, 0, 0)))


# -- configs -----------------------------------------------------------------
def test_stage_config_invariants():
    with pytest.raises(ConfigError):
        StageConfig.for_stage("1", warmup_ratio=0.0)
    with pytest.raises(ConfigError):
        StageConfig.for_stage("1", mix=(0, 0, 0))
    with pytest.raises(ConfigError):
        StageConfig.for_stage("1", mix=(1, -1, 0))
    with pytest.raises(ConfigError):
        StageConfig.for_stage("1", trainable=("gears",))


def test_config_schema_names_field():
    with pytest.raises(ConfigError, match="stages.1.peak_lr"):
        validate_config({"stages": {"1": {"peak_lr": "fast"}}})
    with pytest.raises(ConfigError, match="variant"):
        validate_config({"variant": "huge"})
    cfg = StageConfig.from_dict({"stage": "2.1", "steps": 7})
    assert cfg.steps == 7 and cfg.trainable == ("patch_embed", "vision_layers")
    assert StageConfig.from_dict(cfg.to_dict()) == cfg


# -- pipeline ----------------------------------------------------------------
def short_configs(stages=("1", "2.1", "2.2", "3"), steps=4):
    return [StageConfig.for_stage(s, steps=steps, peak_lr=1e-3, batch_size=2, synth_kinds=("caption", "qa")) for s in stages]


def test_pipeline_early_stages_keep_text_branch(tiny_base, data):
    from dacvlm.analysis import text_branch_view

    res = run_pipeline(tiny_base, short_configs(("1", "2.1")), data, seed=0)
    view = text_branch_view(res.checkpoints["2.1"].tensors)
    for name, arr in tiny_base.tensors.items():
        if not name.startswith("patch_embed."):
            assert np.array_equal(view[name], arr), name


def test_pipeline_rejects_out_of_order(tiny_base, data):
    with pytest.raises(ConfigError):
        run_pipeline(tiny_base, short_configs(("2.1", "1")), data)


def test_resolution_schedule():
    cfg = StageConfig.for_stage("2.1", steps=77)
    assert cfg.image_token_cap(0) == 625
    assert cfg.image_token_cap(76) == 2500
    assert StageConfig.for_stage("1", steps=10).image_token_cap(9) == 625
    assert StageConfig.for_stage("3", steps=10).image_token_cap(0) == 2500


def test_pipeline_is_deterministic(tiny_base, data):
    a = run_pipeline(tiny_base, short_configs(), data, seed=4)
    b = run_pipeline(tiny_base, short_configs(), data, seed=4)
    assert a.metrics == b.metrics
    for s in a.checkpoints:
        ta, tb = a.checkpoints[s].tensors, b.checkpoints[s].tensors
        assert all(np.array_equal(ta[n], tb[n]) for n in ta)
