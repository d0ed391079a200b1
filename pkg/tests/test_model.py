import numpy as np
import pytest
from conftest import TINY, perturbed
from reference import naive_logits

from dacvlm import autodiff as ad
from dacvlm.blocks import ConfigError, VariantKind
from dacvlm.checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from dacvlm.model import (
    ModelConfig,
    VLModel,
    VocabError,
    init_vlm_from_base,
    load_checkpoint,
    make_batch,
    pretrain_base_lm,
    sample_text,
    save_checkpoint,
    text_perplexity,
)
from dacvlm.patch_embed import ImageInput, LengthError, concat_multimodal
from dacvlm.synth import Sample, caption_of, make_sample, random_scene, text_only

SPARSE = [k for k in VariantKind if k is not VariantKind.DENSE]


def mixed_seq(model, rng, text_len=6, hw=(64, 96)):
    img = ImageInput(rng.random((3, *hw)))
    ids = rng.integers(3, model.config.vocab_size, text_len)
    return concat_multimodal(model.embed_image(img), ids, model.config.context)


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(d=10, n_heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(variant="bogus")
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"d": 16, "colour": 1})


def test_dense_text_forward_matches_reference(tiny_config, rng):
    model = perturbed(VLModel(tiny_config, seed=1), seed=2)
    ids = rng.integers(0, tiny_config.vocab_size, 7)
    seq = concat_multimodal(None, ids)
    np.testing.assert_allclose(model.forward(seq).data, naive_logits(model, ids), atol=1e-12)


def test_mixed_sequence_logit_shape():
    cfg = ModelConfig(**dict(TINY, context=1024))
    model = VLModel(cfg)
    rng = np.random.default_rng(0)
    seq = mixed_seq(model, rng, text_len=20, hw=(800, 800))
    assert len(seq) == 671
    assert model.forward(seq).shape == (671, cfg.vocab_size)


def test_forward_is_deterministic(tiny_config, rng):
    model = VLModel(tiny_config, seed=3)
    seq = mixed_seq(model, rng)
    assert np.array_equal(model.forward(seq).data, model.forward(seq).data)
    again = VLModel(tiny_config, seed=3)
    assert np.array_equal(model.forward(seq).data, again.forward(seq).data)


def test_unknown_token_rejected(tiny_config):
    model = VLModel(tiny_config)
    with pytest.raises(VocabError):
        model.forward(concat_multimodal(None, [1, tiny_config.vocab_size]))


def test_context_overflow(tiny_config):
    model = VLModel(tiny_config)
    with pytest.raises(LengthError):
        model.forward(concat_multimodal(None, [1] * 300, context_limit=1000))


def test_batch_forward_matches_single_sequences(tiny_config, tok):
    model = perturbed(VLModel(tiny_config.replace(variant="dac")), seed=1)
    samples = [make_sample("qa", s, canvas=(64, 64)) for s in range(3)] + [make_sample("text_only", 9)]
    batch = make_batch(samples, tok)
    logits = model.forward_batch(batch).data
    for b, s in enumerate(samples):
        ids, mask = sample_text(s, tok)
        seg = None if s.image is None else model.embed_image(s.image)
        seq = concat_multimodal(seg, ids, loss_mask=mask)
        single = model.forward(seq).data
        np.testing.assert_allclose(logits[b, : len(seq)], single, atol=1e-12)


# -- base LM --------------------------------------------------------------
def test_zero_step_pretrain_equals_init(tiny_config):
    ckpt = pretrain_base_lm(tiny_config, ["one plus one equals two"], steps=0, seed=5)
    init = VLModel(tiny_config, seed=5).state_dict()
    assert all(np.array_equal(ckpt.tensors[n], init[n]) for n in init)


def test_pretrain_loss_decreases(tiny_base):
    losses = np.array(tiny_base.metadata["train_loss"])
    windows = losses.reshape(-1, 10).mean(axis=1)
    assert np.all(np.diff(windows) < 0)


def test_pretrain_overfits_small_corpus(tok):
    # long sentences, so memorising which of the 100 is being read is cheap per token
    texts = [caption_of(random_scene(np.random.default_rng(i), min_objects=3)) for i in range(100)]
    cfg = ModelConfig(n_layers=2, d=32, d_ff=64, n_heads=2, d1=8, context=64)
    ckpt = pretrain_base_lm(cfg, texts, steps=1000, seed=0, lr=1e-2, batch_size=32, heldout=texts)
    assert ckpt.metadata["heldout_ppl"] < 1.5


def test_pretrain_beats_fresh_init(tiny_base, tiny_config, tok):
    texts = [text_only(i) for i in range(200)]
    trained = text_perplexity(VLModel.from_checkpoint(tiny_base), texts, tok)
    fresh = text_perplexity(VLModel(tiny_config, seed=0), texts, tok)
    assert trained < fresh


def test_pretrain_rejects_sparse_variant(tiny_config):
    with pytest.raises(ConfigError):
        pretrain_base_lm(tiny_config.replace(variant="dac"), ["a"], steps=1)


# -- initialisation from the base LM ---------------------------------------
@pytest.mark.parametrize("kind", SPARSE)
def test_init_equivalence(tiny_base, kind):
    rng = np.random.default_rng(7)
    vlm = init_vlm_from_base(tiny_base, kind, seed=1)
    dense = init_vlm_from_base(tiny_base, "dense", seed=1)
    for _ in range(5):
        seq = mixed_seq(vlm, rng)
        diff = np.abs(vlm.forward(seq).data - dense.forward(seq).data).max()
        assert diff <= 1e-9


def test_text_branch_bitwise_equals_base(tiny_base):
    vlm = init_vlm_from_base(tiny_base, "dac", seed=0)
    named = vlm.named_parameters()
    for name, arr in tiny_base.tensors.items():
        if name.startswith("patch_embed."):
            continue
        if name.startswith("layers."):
            for b in ("t", "v"):
                assert np.array_equal(named[f"{name}.{b}"].data, arr)
        else:
            assert np.array_equal(named[name].data, arr)


def test_rep_deltas_start_at_zero(tiny_base):
    vlm = init_vlm_from_base(tiny_base, "rep")
    for name, t in vlm.named_parameters().items():
        if name.endswith(".delta"):
            assert not t.data.any()


def test_branches_diverge_after_one_vision_step(tiny_base, tok):
    from dacvlm.optim import AdamW

    vlm = init_vlm_from_base(tiny_base, "dac", seed=0)
    vlm.set_trainable(["vision_layers", "patch_embed"])
    params = [p for p in vlm.parameters() if p.requires_grad]
    opt = AdamW(params)
    batch = make_batch([make_sample("caption", 3, canvas=(64, 64))], tok)
    ad.backward(vlm.loss(batch))
    opt.step(1e-3)
    named = vlm.named_parameters()
    wq_t, wq_v = named["layers.0.attn.wq.t"].data, named["layers.0.attn.wq.v"].data
    assert not np.array_equal(wq_t, wq_v)
    assert np.array_equal(wq_t, tiny_base.tensors["layers.0.attn.wq"])


def test_init_dim_mismatch(tiny_base):
    with pytest.raises(ConfigError):
        init_vlm_from_base(tiny_base, "dac", d=32)


def test_init_from_sparse_base_rejected(tiny_base):
    sparse = init_vlm_from_base(tiny_base, "dac").to_checkpoint()
    with pytest.raises(ConfigError):
        init_vlm_from_base(sparse, "dac")


def test_text_preservation(tiny_base, rng):
    vlm = init_vlm_from_base(tiny_base, "dac", seed=0)
    for name, t in vlm.named_parameters().items():
        if name.endswith(".v") or name.startswith("patch_embed."):
            t.data = t.data + rng.normal(size=t.shape)
    base = VLModel.from_checkpoint(tiny_base)
    seq = concat_multimodal(None, rng.integers(3, 100, 9))
    assert np.array_equal(vlm.forward(seq).data, base.forward(seq).data)


def test_weight_tying_accumulates_both_uses(tiny_config, tok):
    model = VLModel(tiny_config)
    batch = make_batch([Sample("text_only", "", "one plus one equals two")], tok)
    ad.backward(model.loss(batch))
    g_full = model.embed.grad.copy()
    # rows never looked up as inputs still get gradient from the output head
    used = set(batch.token_ids.ravel().tolist())
    unused = [i for i in range(tiny_config.vocab_size) if i not in used]
    assert np.abs(g_full[unused]).max() > 0


# -- generation ------------------------------------------------------------
def test_cached_decode_matches_recompute(tiny_base, rng):
    vlm = perturbed(init_vlm_from_base(tiny_base, "dac", seed=0), seed=4, scale=0.2)
    for _ in range(3):
        seq = mixed_seq(vlm, rng)
        a = vlm.generate(seq, 12, use_cache=True)
        b = vlm.generate(seq, 12, use_cache=False)
        assert a == b and len(a) == 12
        assert vlm.generate(seq, 12) == a


def test_generate_respects_context(tiny_config):
    model = VLModel(tiny_config)
    with pytest.raises(LengthError):
        model.generate(concat_multimodal(None, [1] * 250), 10)
    with pytest.raises(ValueError):
        model.generate(concat_multimodal(None, [1]), 0)


def test_overfit_single_pair_reproduces_caption(tiny_config, tok):
    from dacvlm.optim import AdamW

    model = VLModel(tiny_config.replace(variant="dac", d=32, d_ff=64), seed=0)
    s = make_sample("caption", 11, canvas=(64, 64))
    batch = make_batch([s], tok)
    opt = AdamW(model.parameters())
    for _ in range(150):
        opt.zero_grad()
        ad.backward(model.loss(batch))
        opt.step(3e-3)
    ids, mask = sample_text(s, tok)
    seq = concat_multimodal(model.embed_image(s.image), ids[:1])
    out = model.generate(seq, len(ids), tok.eos_id)
    assert tok.decode(out) == s.target


# -- checkpoints -----------------------------------------------------------
def test_save_load_roundtrip_bitwise(tiny_base, tmp_path, rng):
    vlm = perturbed(init_vlm_from_base(tiny_base, "dac"), seed=3)
    path = save_checkpoint(vlm, tmp_path / "m.ckpt", stage="2.1", step=5, seed=1)
    back = load_checkpoint(path)
    seq = mixed_seq(vlm, rng)
    assert np.array_equal(vlm.forward(seq).data, back.forward(seq).data)
    again = save_checkpoint(back, tmp_path / "m2.ckpt", stage="2.1", step=5, seed=1)
    assert path.read_bytes() == again.read_bytes()


def test_truncated_checkpoint_rejected(tiny_base, tmp_path):
    path = write_checkpoint(tiny_base, tmp_path / "b.ckpt")
    raw = path.read_bytes()
    (tmp_path / "t.ckpt").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "t.ckpt")
    (tmp_path / "h.ckpt").write_bytes(raw[:20])
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "h.ckpt")


def test_direct_load_rejects_kind_mismatch(tiny_base, tmp_path):
    path = write_checkpoint(tiny_base, tmp_path / "b.ckpt")
    with pytest.raises(ConfigError):
        load_checkpoint(path, variant="dac")
    assert init_vlm_from_base(read_checkpoint(path), "dac").kind is VariantKind.DAC


def test_unknown_tensor_names_rejected(tiny_base):
    ck = read_checkpoint.__globals__["Checkpoint"](tiny_base.config, dict(tiny_base.tensors, extra=np.zeros(2)))
    with pytest.raises(CheckpointError):
        VLModel.from_checkpoint(ck)


def test_active_flops_same_for_all_variants(tiny_config):
    counts = {k: VLModel(tiny_config.replace(variant=k.value)).active_flops_per_token(64) for k in VariantKind}
    assert len(set(counts.values())) == 1
