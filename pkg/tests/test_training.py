import math

import numpy as np
import pytest

from minimt.autograd import Tensor, no_grad
from minimt.corpus import BundleSizes, Language, generate_bundle
from minimt.model import ModelConfig, ModelParams, forward_logits
from minimt.tokenizer import EOS, LANG_TGT, PAD, build_vocab, decode, encode
from minimt.training import (Adam, AdvConfig, Discriminator, MetricsLog,
                             TrainConfig, TrainingDivergedError,
                             adversarial_step, bce_with_logits, crosslt_step,
                             denoise_step, finetune, format_train_config,
                             grad_check, label_smoothed_ce,
                             one_time_backtranslate_train, parse_train_config,
                             pretrain_supervised, synthesize_backtranslations,
                             train_adapt, _teacher_batch, _encode_lines,
                             _train_step)
from minimt.noise import NoiseKind


@pytest.fixture(scope="module")
def tiny():
    bundle = generate_bundle(5, BundleSizes(pretrain=60, mono_src=80, mono_tgt=80,
                                            validation=16, test=16, finetune=12))
    vocab = build_vocab(bundle.training_lines())
    mcfg = ModelConfig(vocab_size=len(vocab), d_model=32, n_heads=4,
                       n_enc_layers=1, n_dec_layers=1, d_ff=48, max_len=32)
    params = ModelParams.init(mcfg, seed=2)
    return bundle, vocab, mcfg, params


# -- config -----------------------------------------------------------------------

def test_config_round_trip():
    cfg = TrainConfig(lr=1e-3, batch_size=8, objectives=("crosslt",),
                      noise=("dropchar",), max_updates=123,
                      adv=AdvConfig(disc_lr=5e-4, disc_hidden=32))
    parsed = parse_train_config(format_train_config(cfg))
    assert parsed == cfg


def test_config_defaults_and_overrides():
    cfg = parse_train_config("lr = 0.01\n# comment\n\npatience = 5\n")
    assert cfg.lr == 0.01 and cfg.patience == 5
    assert cfg.label_smoothing == 0.1 and cfg.beam == 3 and cfg.batch_size == 16


def test_config_unknown_key_rejected():
    with pytest.raises(ValueError, match="unknown key"):
        parse_train_config("nonsense = 3\n")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(objectives=("bogus",))
    with pytest.raises(ValueError):
        TrainConfig(label_smoothing=1.0)
    with pytest.raises(ValueError):
        AdvConfig(soft_label_high=0.9, soft_label_low=0.2)


# -- label smoothed CE ---------------------------------------------------------------

def test_ce_uniform_logits_is_log_v():
    logits = Tensor(np.zeros((1, 1, 4)), requires_grad=True)
    for s in (0.0, 0.1, 0.5):
        loss = label_smoothed_ce(logits, np.array([[2]]), s, pad_id=-1)
        assert loss.item() == pytest.approx(math.log(4), rel=1e-12)


def test_ce_hand_computed_examples():
    logits = Tensor(np.array([[[math.log(2), 0.0, 0.0]]]), requires_grad=True)
    plain = label_smoothed_ce(logits, np.array([[0]]), 0.0, pad_id=-1)
    assert plain.item() == pytest.approx(-math.log(0.5), rel=1e-12)
    smoothed = label_smoothed_ce(logits, np.array([[0]]), 0.1, pad_id=-1)
    want = -(0.9 * math.log(0.5) + 0.05 * math.log(0.25) + 0.05 * math.log(0.25))
    assert smoothed.item() == pytest.approx(want, rel=1e-12)


def test_ce_pad_positions_contribute_nothing():
    rng = np.random.default_rng(0)
    logits = Tensor(rng.normal(size=(2, 3, 5)), requires_grad=True)
    targets = np.array([[3, 4, PAD], [2, PAD, PAD]])
    loss = label_smoothed_ce(logits, targets, 0.1)
    loss.backward()
    assert np.allclose(logits.grad[0, 2], 0.0)
    assert np.allclose(logits.grad[1, 1:], 0.0)
    # value equals the mean over only the three real positions
    full = Tensor(logits.data[:1, :2])
    ref = label_smoothed_ce(Tensor(logits.data[0:1, 0:2]), targets[0:1, 0:2], 0.1)
    ref2 = label_smoothed_ce(Tensor(logits.data[1:2, 0:1]), targets[1:2, 0:1], 0.1)
    assert loss.item() == pytest.approx((2 * ref.item() + ref2.item()) / 3)


def test_ce_all_pad_rejected():
    logits = Tensor(np.zeros((1, 2, 4)))
    with pytest.raises(ValueError, match="PAD"):
        label_smoothed_ce(logits, np.array([[PAD, PAD]]), 0.1)


def test_ce_gradient_matches_finite_difference():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(2, 2, 6)), requires_grad=True)
    targets = np.array([[3, 5], [4, PAD]])
    loss = label_smoothed_ce(logits, targets, 0.1)
    loss.backward()
    eps = 1e-6
    for idx in ((0, 0, 3), (0, 1, 1), (1, 0, 4)):
        orig = logits.data[idx]
        logits.data[idx] = orig + eps
        hi = label_smoothed_ce(logits, targets, 0.1).item()
        logits.data[idx] = orig - eps
        lo = label_smoothed_ce(logits, targets, 0.1).item()
        logits.data[idx] = orig
        assert (hi - lo) / (2 * eps) == pytest.approx(logits.grad[idx], abs=1e-8)


def test_bce_at_chance_with_soft_labels():
    logits = Tensor(np.zeros(20))
    y = np.array([0.9] * 10 + [0.1] * 10)
    assert bce_with_logits(logits, y).item() == pytest.approx(math.log(2), rel=1e-9)


# -- optimizer -----------------------------------------------------------------------

def test_adam_lr_zero_is_identity(tiny):
    bundle, vocab, mcfg, params = tiny
    p = params.clone()
    opt = Adam(p.tensors, lr=0.0)
    lines = bundle.mono_src[:8]
    before = {n: t.data.copy() for n, t in p.tensors.items()}
    denoise_step(p, lines, Language.SRC, NoiseKind.MASK, vocab, opt, TrainConfig(),
                 np.random.default_rng(0))
    for n, t in p.tensors.items():
        assert np.array_equal(before[n], t.data), n


def test_adam_skips_tensors_without_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    opt = Adam({"a": a, "b": b}, lr=0.1)
    a.grad = np.array([1.0, 0.0, 2.0])
    b.grad = np.zeros(3)
    opt.step()
    assert not np.array_equal(a.data, np.ones(3))
    assert np.array_equal(b.data, np.ones(3))
    assert opt.steps == {"a": 1, "b": 0}


def test_adam_updates_reduce_loss(tiny):
    bundle, vocab, mcfg, params = tiny
    p = params.clone()
    opt = Adam(p.tensors, lr=1e-3)
    cfg = TrainConfig()
    rng = np.random.default_rng(0)
    lines = bundle.mono_src[:16]
    src = _encode_lines(lines, Language.SRC, vocab)
    batch = _teacher_batch(src, src, Language.SRC)
    first = _train_step(p, opt, batch, cfg, rng)
    for _ in range(60):
        last = _train_step(p, opt, batch, cfg, rng)
    assert last < first


# -- objective steps -------------------------------------------------------------------

def test_denoise_step_decreases_loss_on_fixed_batch(tiny):
    bundle, vocab, mcfg, params = tiny
    p = params.clone()
    opt = Adam(p.tensors, lr=1e-3)
    cfg = TrainConfig()
    lines = bundle.mono_src[:16]
    losses = [denoise_step(p, lines, Language.SRC, NoiseKind.MASK, vocab, opt, cfg,
                           np.random.default_rng(i)) for i in range(200)]
    assert np.mean(losses[-20:]) < np.mean(losses[:20]) * 0.7


def test_mask_noise_targets_are_clean_lines(tiny):
    # On single-word lines the mask replaces the whole query and the target
    # must still be the original word.
    bundle, vocab, mcfg, params = tiny
    from minimt.noise import apply_mask
    line = "shirt"
    assert apply_mask(line, np.random.default_rng(0)) == "[MASK]"


def test_crosslt_step_equals_supervised_step_on_synthetic_pairs(tiny):
    # Stage 1 runs without gradient, so the update must be bit-identical to a
    # supervised step whose inputs are the frozen synthetic translations.
    bundle, vocab, mcfg, params = tiny
    cfg = TrainConfig(lr=1e-3)
    lines = bundle.mono_src[:8]

    p1 = params.clone()
    opt1 = Adam(p1.tensors, lr=cfg.lr)
    loss1 = crosslt_step(p1, lines, Language.SRC, vocab, opt1, cfg,
                         np.random.default_rng(99))

    p2 = params.clone()
    opt2 = Adam(p2.tensors, lr=cfg.lr)
    from minimt import model as M
    original = _encode_lines(lines, Language.SRC, vocab)
    with no_grad():
        synthetic = M.greedy_decode_batch(p2, original, Language.TGT)
    synthetic = [ids if ids else [3] for ids in synthetic]
    batch = _teacher_batch(synthetic, original, Language.SRC)
    loss2 = _train_step(p2, opt2, batch, cfg, np.random.default_rng(99))

    assert loss1 == loss2
    for n in p1.tensors:
        assert np.array_equal(p1.tensors[n].data, p2.tensors[n].data), n


def test_adversarial_gradient_isolation(tiny):
    bundle, vocab, mcfg, params = tiny
    p = params.clone()
    cfg = TrainConfig()
    disc = Discriminator(mcfg.d_model, cfg.adv.disc_hidden, lr=1e-3, seed=0)
    opt = Adam(p.tensors, lr=1e-3)

    model_before = {n: t.data.copy() for n, t in p.tensors.items()}
    disc_before = {n: t.data.copy() for n, t in disc.tensors.items()}
    disc_loss, gen_loss = adversarial_step(p, disc, bundle.mono_src[:8],
                                           bundle.mono_tgt[:8], vocab, opt, cfg,
                                           np.random.default_rng(0))
    # discriminator moved, generator moved, but only via their own updates
    assert any(not np.array_equal(disc_before[n], t.data) for n, t in disc.tensors.items())
    enc_changed = [n for n, t in p.tensors.items()
                   if not np.array_equal(model_before[n], t.data)]
    assert enc_changed
    assert all(n.startswith(("enc", "embed", "pos")) for n in enc_changed), enc_changed
    assert math.isfinite(disc_loss) and math.isfinite(gen_loss)


def test_adversarial_disc_update_never_touches_model(tiny):
    bundle, vocab, mcfg, params = tiny
    p = params.clone()
    cfg = TrainConfig()
    disc = Discriminator(mcfg.d_model, cfg.adv.disc_hidden, lr=1e-3, seed=0)
    # freeze the generator by a zero-lr model optimizer: any model change
    # would then have to come from the discriminator update path
    opt = Adam(p.tensors, lr=0.0)
    before = {n: t.data.copy() for n, t in p.tensors.items()}
    adversarial_step(p, disc, bundle.mono_src[:8], bundle.mono_tgt[:8],
                     vocab, opt, cfg, np.random.default_rng(0))
    for n, t in p.tensors.items():
        assert np.array_equal(before[n], t.data), n


def test_untrained_disc_loss_near_chance(tiny):
    bundle, vocab, mcfg, params = tiny
    cfg = TrainConfig()
    disc = Discriminator(mcfg.d_model, cfg.adv.disc_hidden, lr=1e-3, seed=0)
    disc.tensors["w2"].data[:] = 0.0  # zero logits: exactly chance
    opt = Adam(params.clone().tensors, lr=0.0)
    disc_loss, _ = adversarial_step(params.clone(), disc, bundle.mono_src[:8],
                                    bundle.mono_tgt[:8], vocab, opt, cfg,
                                    np.random.default_rng(0))
    assert disc_loss == pytest.approx(math.log(2), abs=1e-6)


# -- adaptation loop -------------------------------------------------------------------

def test_train_adapt_no_objectives_is_identity(tiny):
    bundle, vocab, mcfg, params = tiny
    cfg = TrainConfig(objectives=())
    out, report = train_adapt(params, bundle, vocab, cfg)
    assert out is params
    assert report.records == []


def test_train_adapt_deterministic_report(tiny):
    bundle, vocab, mcfg, params = tiny
    cfg = TrainConfig(lr=1e-3, batch_size=8, eval_interval_updates=8,
                      max_updates=16, beam=1, objectives=("denoise", "crosslt"),
                      seed=11)
    spec = None
    out1, rep1 = train_adapt(params.clone(), bundle, vocab, cfg, spec)
    out2, rep2 = train_adapt(params.clone(), bundle, vocab, cfg, spec)
    assert rep1.to_dicts() == rep2.to_dicts()
    for n in out1.tensors:
        assert np.array_equal(out1.tensors[n].data, out2.tensors[n].data)


def test_train_adapt_writes_metrics_log(tiny, tmp_path):
    import json
    bundle, vocab, mcfg, params = tiny
    cfg = TrainConfig(lr=1e-3, batch_size=8, eval_interval_updates=6,
                      max_updates=12, beam=1, objectives=("crosslt",), seed=1)
    log_path = tmp_path / "metrics.jsonl"
    log = MetricsLog(log_path)
    _, report = train_adapt(params.clone(), bundle, vocab, cfg, None, log)
    log.close()
    lines = log_path.read_text().splitlines()
    assert len(lines) == len(report.records) >= 2
    for line in lines:
        rec = json.loads(line)
        assert rec["phase"] == "adapt"
        assert "val_bleu" in rec and "update_count" in rec


def test_train_adapt_nan_aborts(tiny):
    bundle, vocab, mcfg, params = tiny
    p = params.clone()
    p.tensors["embed"].data[:] = np.nan
    cfg = TrainConfig(objectives=("crosslt",), max_updates=4, eval_interval_updates=100)
    with pytest.raises(TrainingDivergedError):
        train_adapt(p, bundle, vocab, cfg)


# -- supervised phases ------------------------------------------------------------------

def test_pretrain_runs_and_is_deterministic(tiny):
    bundle, vocab, mcfg, params = tiny
    cfg = TrainConfig(lr=1e-3, batch_size=8, eval_interval_updates=20,
                      max_updates=40, seed=4)
    a = pretrain_supervised(bundle.pretrain_parallel, vocab, mcfg, cfg)
    b = pretrain_supervised(bundle.pretrain_parallel, vocab, mcfg, cfg)
    for n in a.tensors:
        assert np.array_equal(a.tensors[n].data, b.tensors[n].data)


def test_backtranslation_pair_count(tiny):
    bundle, vocab, mcfg, params = tiny
    synth = synthesize_backtranslations(params, bundle.mono_src[:37], Language.SRC, vocab)
    assert len(synth) == 37
    assert all(len(s) >= 1 for s in synth)


def test_one_time_backtranslate_returns_new_params(tiny):
    bundle, vocab, mcfg, params = tiny
    cfg = TrainConfig(lr=1e-3, batch_size=8, eval_interval_updates=10,
                      max_updates=20, seed=4)
    out = one_time_backtranslate_train(params, bundle.mono_src[:40], vocab, cfg)
    assert out is not params
    changed = any(not np.array_equal(out.tensors[n].data, params.tensors[n].data)
                  for n in params.tensors)
    assert changed


def test_finetune_empty_set_unchanged(tiny):
    bundle, vocab, mcfg, params = tiny
    out = finetune(params, [], vocab, TrainConfig())
    for n in params.tensors:
        assert np.array_equal(out.tensors[n].data, params.tensors[n].data)


def test_finetune_improves_loss_on_labeled_pairs(tiny):
    bundle, vocab, mcfg, params = tiny
    cfg = TrainConfig(lr=1e-3, batch_size=8, eval_interval_updates=25,
                      max_updates=150, seed=4)
    tuned = finetune(params, bundle.finetune_parallel, vocab, cfg)
    def loss_of(p):
        pairs = bundle.finetune_parallel
        batch = _teacher_batch(_encode_lines([t for t, s in pairs], Language.TGT, vocab),
                               _encode_lines([s for t, s in pairs], Language.SRC, vocab),
                               Language.SRC)
        with no_grad():
            logits = forward_logits(p, batch[0], batch[1])
        return label_smoothed_ce(logits, batch[2], 0.1).item()
    assert loss_of(tuned) < loss_of(params)


# -- grad check ----------------------------------------------------------------------

def grad_check_fixture():
    cfg = ModelConfig(vocab_size=13, d_model=8, n_heads=2, n_enc_layers=1,
                      n_dec_layers=1, d_ff=12, max_len=8, dropout=0.0)
    params = ModelParams.init(cfg, seed=3).astype(np.float64)
    # Spread the embeddings: near init, layer norm sits in a sharply curved
    # region and the finite-difference oracle at step 1e-3 loses accuracy.
    params.tensors["embed"].data *= 10.0
    params.tensors["pos"].data *= 10.0
    src = np.array([[7, 8, 9, EOS], [10, 11, EOS, PAD]])
    tgt_in = np.array([[LANG_TGT, 12, 7], [LANG_TGT, 9, PAD]])
    tgt_out = np.array([[12, 7, EOS], [9, EOS, PAD]])

    def loss_fn(p):
        return label_smoothed_ce(forward_logits(p, src, tgt_in), tgt_out, 0.1)

    return params, loss_fn


def test_grad_check_passes_on_tiny_model():
    params, loss_fn = grad_check_fixture()
    results = grad_check(params, loss_fn, tolerance=1e-4,
                         tensor_names=["embed", "pos", "enc0.attn.wq",
                                       "dec0.cross.wv", "dec0.ff.w1", "enc.ln.g"])
    for name, res in results.items():
        assert res.passed, (name, res.max_rel_err)


def test_grad_check_detects_corrupted_gradient():
    params, loss_fn = grad_check_fixture()

    def corrupted_loss(p):
        loss = loss_fn(p)
        out = Tensor(loss.data)
        if loss.requires_grad:
            out = Tensor._make(loss.data, (loss,),
                               lambda g: loss._accumulate(g * 1.01))
        return out

    results = grad_check(params, corrupted_loss, tolerance=1e-4,
                         tensor_names=["enc0.attn.wq", "embed"])
    assert not all(r.passed for r in results.values())
