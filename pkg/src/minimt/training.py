"""Training: label-smoothed cross entropy, Adam, the three adaptation
objectives (denoising auto-encoding, cross-language training, adversarial
feature alignment), supervised pretraining / fine-tuning, the one-time
back-translation baseline, and finite-difference gradient verification.

The adaptation loop follows a sequential update schedule: per cycle, a
denoising step on a source batch then a target batch (with a freshly
sampled noise type per batch), a cross-language step on each side, then
one discriminator plus one generator adversarial step.  Validation is
round-trip BLEU on held-out source queries; the best-validation
parameters are returned.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import model as M
from .autograd import Tensor, no_grad
from .corpus import CipherSpec, CorpusBundle, Language
from .evaluation import early_stop_check, language_agreement, round_trip_details
from .model import ModelConfig, ModelParams, Translator, forward_logits, pad_batch
from .noise import ALL_NOISE_KINDS, NoiseKind, apply_noise, sample_noise_kind
from .tokenizer import EOS, PAD, UNK, Vocabulary, encode, lang_token

OBJECTIVES = ("denoise", "crosslt", "adv")


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, report: "TrainReport | None" = None):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AdvConfig:
    disc_lr: float = 1e-3
    soft_label_high: float = 0.9
    soft_label_low: float = 0.1
    disc_hidden: int = 64

    def __post_init__(self):
        if abs(self.soft_label_high + self.soft_label_low - 1.0) > 1e-9:
            raise ValueError("soft labels must sum to 1")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    batch_size: int = 16
    label_smoothing: float = 0.1
    eval_interval_updates: int = 500
    patience: int = 3
    objectives: tuple[str, ...] = OBJECTIVES
    noise: tuple[str, ...] = tuple(k.value for k in ALL_NOISE_KINDS)
    beam: int = 3
    seed: int = 0
    max_updates: int = 6000
    adv: AdvConfig = field(default_factory=AdvConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must be in [0, 1)")
        if self.beam < 1:
            raise ValueError("beam must be >= 1")
        for obj in self.objectives:
            if obj not in OBJECTIVES:
                raise ValueError(f"unknown objective {obj!r}; choose from {OBJECTIVES}")
        for kind in self.noise:
            if kind not in {k.value for k in ALL_NOISE_KINDS}:
                raise ValueError(f"unknown noise kind {kind!r}")

    def noise_kinds(self) -> tuple[NoiseKind, ...]:
        return tuple(NoiseKind(k) for k in self.noise)


def save_train_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(format_train_config(cfg), encoding="utf-8", newline="\n")


def format_train_config(cfg: TrainConfig) -> str:
    lines = [
        f"lr = {cfg.lr!r}",
        f"batch_size = {cfg.batch_size}",
        f"label_smoothing = {cfg.label_smoothing!r}",
        f"eval_interval_updates = {cfg.eval_interval_updates}",
        f"patience = {cfg.patience}",
        f"objectives = {','.join(cfg.objectives)}",
        f"noise = {','.join(cfg.noise)}",
        f"beam = {cfg.beam}",
        f"seed = {cfg.seed}",
        f"max_updates = {cfg.max_updates}",
        f"adv.disc_lr = {cfg.adv.disc_lr!r}",
        f"adv.soft_label_high = {cfg.adv.soft_label_high!r}",
        f"adv.soft_label_low = {cfg.adv.soft_label_low!r}",
        f"adv.disc_hidden = {cfg.adv.disc_hidden}",
    ]
    return "\n".join(lines) + "\n"


def parse_train_config(text: str) -> TrainConfig:
    """Parse the flat ``key = value`` config format; unknown keys are errors."""
    top: dict = {}
    adv: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key.startswith("adv."):
            sub = key[4:]
            if sub == "disc_hidden":
                adv[sub] = int(value)
            elif sub in ("disc_lr", "soft_label_high", "soft_label_low"):
                adv[sub] = float(value)
            else:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
        elif key in ("batch_size", "eval_interval_updates", "patience", "beam",
                     "seed", "max_updates"):
            top[key] = int(value)
        elif key in ("lr", "label_smoothing"):
            top[key] = float(value)
        elif key == "objectives":
            top[key] = tuple(v for v in value.split(",") if v)
        elif key == "noise":
            top[key] = tuple(v for v in value.split(",") if v)
        else:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
    if adv:
        top["adv"] = AdvConfig(**adv)
    return TrainConfig(**top)


def load_train_config(path) -> TrainConfig:
    return parse_train_config(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Loss functions
# ---------------------------------------------------------------------------

def label_smoothed_ce(logits: Tensor, targets: np.ndarray, smoothing: float,
                      pad_id: int = PAD) -> Tensor:
    """Mean label-smoothed cross entropy over non-PAD target positions.

    The smoothed target distribution puts 1-s on the gold class and
    s/(V-1) on every other class.  The gradient is the exact closed form
    softmax(logits) - target_distribution, masked and averaged.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must be in [0, 1)")
    targets = np.asarray(targets)
    mask = targets != pad_id
    n_valid = int(mask.sum())
    if n_valid == 0:
        raise ValueError("all target positions are PAD")

    x = logits.data
    vocab = x.shape[-1]
    z = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse

    off = smoothing / (vocab - 1)
    gold = 1.0 - smoothing
    logp_gold = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    per_pos = -((gold - off) * logp_gold + off * logp.sum(axis=-1))
    loss = float((per_pos * mask).sum() / n_valid)

    def backward(g):
        q = np.full_like(x, off)
        np.put_along_axis(q, targets[..., None], gold, axis=-1)
        p = np.exp(logp)
        grad = (p - q) * mask[..., None] / n_valid
        logits._accumulate(grad * g)

    out = Tensor._make(np.asarray(loss, dtype=x.dtype), (logits,), backward)
    return out


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross entropy on raw logits against (soft) targets."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if z.shape != y.shape:
        raise ValueError(f"shape mismatch: logits {z.shape} vs targets {y.shape}")
    # Stable form: max(z, 0) - z*y + log(1 + exp(-|z|))
    per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    loss = float(per.mean())

    def backward(g):
        p = 1.0 / (1.0 + np.exp(-z))
        logits._accumulate((p - y) / z.size * g)

    return Tensor._make(np.asarray(loss, dtype=z.dtype), (logits,), backward)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam with global-norm clipping.

    Tensors whose gradient is missing or identically zero are skipped
    entirely: their values, moments, and step counters stay untouched, so
    an update only ever changes tensors that actually received gradient.
    """

    def __init__(self, tensors: dict[str, Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = 1.0):
        self.tensors = tensors
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.m = {n: np.zeros_like(t.data) for n, t in tensors.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in tensors.items()}
        self.steps = {n: 0 for n in tensors}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def step(self) -> None:
        live = [n for n, t in self.tensors.items()
                if t.grad is not None and np.any(t.grad)]
        if not live:
            return
        scale = 1.0
        if self.clip_norm is not None:
            total = math.sqrt(sum(float((self.tensors[n].grad ** 2).sum()) for n in live))
            if total > self.clip_norm:
                scale = self.clip_norm / total
        for n in live:
            t = self.tensors[n]
            g = t.grad if scale == 1.0 else t.grad * scale
            self.steps[n] += 1
            k = self.steps[n]
            m, v = self.m[n], self.v[n]
            np.multiply(m, self.beta1, out=m)
            m += (1 - self.beta1) * g
            np.multiply(v, self.beta2, out=v)
            v += (1 - self.beta2) * (g * g)
            denom = np.sqrt(v / (1 - self.beta2 ** k))
            denom += self.eps
            t.data -= (self.lr / (1 - self.beta1 ** k)) * m / denom


# ---------------------------------------------------------------------------
# Batch assembly
# ---------------------------------------------------------------------------

def _teacher_batch(input_ids: list[list[int]], target_ids: list[list[int]],
                   target_lang: Language):
    """(encoder input, decoder input, decoder target) arrays for one step."""
    tag = lang_token(target_lang)
    src = pad_batch([ids + [EOS] for ids in input_ids])
    tgt_in = pad_batch([[tag] + ids for ids in target_ids])
    tgt_out = pad_batch([ids + [EOS] for ids in target_ids])
    return src, tgt_in, tgt_out


def _encode_lines(lines: list[str], lang: Language, vocab: Vocabulary) -> list[list[int]]:
    return [encode(line, lang, vocab).ids for line in lines]


def _loss_on_batch(params: ModelParams, batch, cfg: TrainConfig,
                   train: bool, rng=None) -> Tensor:
    src, tgt_in, tgt_out = batch
    logits = forward_logits(params, src, tgt_in, train=train, rng=rng)
    return label_smoothed_ce(logits, tgt_out, cfg.label_smoothing)


def _train_step(params: ModelParams, opt: Adam, batch, cfg: TrainConfig, rng) -> float:
    opt.zero_grad()
    loss = _loss_on_batch(params, batch, cfg, train=True, rng=rng)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(f"non-finite training loss: {value}")
    loss.backward()
    opt.step()
    return value


# ---------------------------------------------------------------------------
# Objective steps
# ---------------------------------------------------------------------------

def denoise_step(params: ModelParams, lines: list[str], lang: Language,
                 noise_kind: NoiseKind, vocab: Vocabulary, opt: Adam,
                 cfg: TrainConfig, rng: np.random.Generator) -> float:
    """One gradient step reconstructing clean lines from corrupted ones."""
    if not lines:
        raise ValueError("empty batch")
    noisy = [apply_noise(noise_kind, line, rng) for line in lines]
    batch = _teacher_batch(_encode_lines(noisy, lang, vocab),
                           _encode_lines(lines, lang, vocab), lang)
    return _train_step(params, opt, batch, cfg, rng)


def crosslt_step(params: ModelParams, lines: list[str], lang: Language,
                 vocab: Vocabulary, opt: Adam, cfg: TrainConfig,
                 rng: np.random.Generator) -> float:
    """Two-stage cross-language update.

    Stage 1 translates the batch to the other language with greedy decoding
    and no gradient; stage 2 takes one teacher-forced step predicting the
    original lines from their synthetic translations.
    """
    if not lines:
        raise ValueError("empty batch")
    original_ids = _encode_lines(lines, lang, vocab)
    synthetic = M.greedy_decode_batch(params, original_ids, lang.other())
    synthetic = [ids if ids else [UNK] for ids in synthetic]
    batch = _teacher_batch(synthetic, original_ids, lang)
    return _train_step(params, opt, batch, cfg, rng)


class Discriminator:
    """Two dense layers mapping a token feature to one language logit."""

    def __init__(self, d_model: int, hidden: int, lr: float, seed: int,
                 dtype=np.float32):
        rng = np.random.default_rng(seed)
        lim1 = math.sqrt(6.0 / (d_model + hidden))
        lim2 = math.sqrt(6.0 / (hidden + 1))
        self.tensors = {
            "w1": Tensor(rng.uniform(-lim1, lim1, (d_model, hidden)).astype(dtype), requires_grad=True),
            "b1": Tensor(np.zeros(hidden, dtype=dtype), requires_grad=True),
            "w2": Tensor(rng.uniform(-lim2, lim2, (hidden, 1)).astype(dtype), requires_grad=True),
            "b2": Tensor(np.zeros(1, dtype=dtype), requires_grad=True),
        }
        self.opt = Adam(self.tensors, lr=lr, clip_norm=1.0)

    def logits(self, features: Tensor) -> Tensor:
        h = ag.gelu(ag.add(ag.matmul(features, self.tensors["w1"]), self.tensors["b1"]))
        out = ag.add(ag.matmul(h, self.tensors["w2"]), self.tensors["b2"])
        return ag.reshape(out, (features.shape[0],))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def _valid_feature_rows(params: ModelParams, ids: list[list[int]], train: bool,
                        rng, with_grad: bool) -> Tensor:
    """Encoder features of non-PAD positions, stacked to (n_tokens, d_model)."""
    src = pad_batch([s + [EOS] for s in ids])
    if with_grad:
        states = M.encode_states(params, src, train=train, rng=rng)
    else:
        with no_grad():
            states = M.encode_states(params, src, train=False)
    valid = src != PAD
    b, l, d = states.shape
    flat = ag.reshape(states, (b * l, d))
    rows = np.nonzero(valid.reshape(-1))[0]
    # Row gather via a selection matrix would be wasteful; slice by advanced
    # indexing with a dedicated backward.
    out_data = flat.data[rows]

    def backward(g):
        gf = np.zeros_like(flat.data)
        gf[rows] = g
        flat._accumulate(gf)

    return Tensor._make(out_data, (flat,), backward)


def adversarial_step(params: ModelParams, disc: Discriminator,
                     src_lines: list[str], tgt_lines: list[str],
                     vocab: Vocabulary, model_opt: Adam, cfg: TrainConfig,
                     rng: np.random.Generator) -> tuple[float, float]:
    """Discriminator update on detached features, then a generator update
    that labels source-language features as target to confuse it."""
    if not src_lines or not tgt_lines:
        raise ValueError("adversarial step needs both language batches")
    src_ids = _encode_lines(src_lines, Language.SRC, vocab)
    tgt_ids = _encode_lines(tgt_lines, Language.TGT, vocab)
    high, low = cfg.adv.soft_label_high, cfg.adv.soft_label_low

    # (a) discriminator: true soft labels, encoder gradients off.
    disc.zero_grad()
    f_src = _valid_feature_rows(params, src_ids, train=False, rng=None, with_grad=False)
    f_tgt = _valid_feature_rows(params, tgt_ids, train=False, rng=None, with_grad=False)
    feats = Tensor(np.concatenate([f_src.data, f_tgt.data], axis=0))
    labels = np.concatenate([
        np.full(f_src.shape[0], low, dtype=feats.dtype),
        np.full(f_tgt.shape[0], high, dtype=feats.dtype),
    ])
    disc_loss = bce_with_logits(disc.logits(feats), labels)
    disc_loss.backward()
    disc.opt.step()

    # (b) generator: source features pushed toward the target label,
    # discriminator frozen.
    model_opt.zero_grad()
    disc.zero_grad()
    f_src = _valid_feature_rows(params, src_ids, train=True, rng=rng, with_grad=True)
    flipped = np.full(f_src.shape[0], high, dtype=f_src.dtype)
    gen_loss = bce_with_logits(disc.logits(f_src), flipped)
    gen_loss.backward()
    disc.zero_grad()  # generator update must not touch discriminator state
    model_opt.step()

    d, g = disc_loss.item(), gen_loss.item()
    if not (math.isfinite(d) and math.isfinite(g)):
        raise TrainingDivergedError(f"non-finite adversarial loss: disc={d} gen={g}")
    return d, g


# ---------------------------------------------------------------------------
# Reports and logging
# ---------------------------------------------------------------------------

@dataclass
class EvalRecord:
    update_count: int
    denoise_loss: float | None
    crosslt_loss: float | None
    disc_loss: float | None
    gen_loss: float | None
    val_bleu: float
    val_lang_agreement: float | None = None

    def to_dict(self) -> dict:
        return {
            "update_count": self.update_count,
            "denoise_loss": self.denoise_loss,
            "crosslt_loss": self.crosslt_loss,
            "disc_loss": self.disc_loss,
            "gen_loss": self.gen_loss,
            "val_bleu": self.val_bleu,
            "val_lang_agreement": self.val_lang_agreement,
        }


@dataclass
class TrainReport:
    records: list[EvalRecord] = field(default_factory=list)

    def to_dicts(self) -> list[dict]:
        return [r.to_dict() for r in self.records]


class MetricsLog:
    """JSON-lines metrics writer, flushed on every record."""

    def __init__(self, path=None):
        self._fh = open(path, "w", encoding="utf-8", newline="\n") if path else None

    def write(self, record: dict) -> None:
        if self._fh is None:
            return
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _sample_batch(rng: np.random.Generator, pool: list, size: int) -> list:
    take = min(size, len(pool))
    idx = rng.choice(len(pool), size=take, replace=False)
    return [pool[int(i)] for i in idx]


# ---------------------------------------------------------------------------
# Adaptation loop
# ---------------------------------------------------------------------------

def train_adapt(params: ModelParams, bundle: CorpusBundle, vocab: Vocabulary,
                cfg: TrainConfig, spec: CipherSpec | None = None,
                log: MetricsLog | None = None) -> tuple[ModelParams, TrainReport]:
    """Adapt pretrained parameters on monolingual corpora.

    Runs the sequential schedule over the enabled objectives until
    round-trip validation BLEU stops improving (patience evaluations) or
    ``max_updates`` gradient steps.  Returns the best-validation parameters.
    """
    report = TrainReport()
    if not cfg.objectives:
        return params, report
    log = log or MetricsLog()

    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    batch_rng = np.random.default_rng(seeds[0])
    noise_rng = np.random.default_rng(seeds[1])
    drop_rng = np.random.default_rng(seeds[2])
    disc = Discriminator(params.config.d_model, cfg.adv.disc_hidden,
                         lr=cfg.adv.disc_lr,
                         seed=int(seeds[3].generate_state(1)[0]))
    opt = Adam(params.tensors, lr=cfg.lr)

    best_bleu = -1.0
    best_params = params.clone()
    history: list[float] = []
    updates = 0
    last_eval = 0
    last: dict = {"denoise": None, "crosslt": None, "disc": None, "gen": None}

    def evaluate() -> None:
        nonlocal best_bleu, best_params
        translator = Translator(params, vocab)
        bleu_report, intermediates, _ = round_trip_details(
            translator, bundle.validation_mono_src, cfg.beam)
        agreement = (language_agreement(intermediates, spec, Language.TGT)
                     if spec is not None else None)
        rec = EvalRecord(
            update_count=updates,
            denoise_loss=last["denoise"], crosslt_loss=last["crosslt"],
            disc_loss=last["disc"], gen_loss=last["gen"],
            val_bleu=bleu_report.bleu, val_lang_agreement=agreement,
        )
        report.records.append(rec)
        log.write({"phase": "adapt", **rec.to_dict()})
        history.append(bleu_report.bleu)
        if bleu_report.bleu > best_bleu:
            best_bleu = bleu_report.bleu
            best_params = params.clone()

    try:
        while updates < cfg.max_updates:
            if "denoise" in cfg.objectives:
                for lang, pool in ((Language.SRC, bundle.mono_src),
                                   (Language.TGT, bundle.mono_tgt)):
                    kind = sample_noise_kind(noise_rng, cfg.noise_kinds())
                    lines = _sample_batch(batch_rng, pool, cfg.batch_size)
                    last["denoise"] = denoise_step(params, lines, lang, kind,
                                                   vocab, opt, cfg, drop_rng)
                    updates += 1
            if "crosslt" in cfg.objectives:
                for lang, pool in ((Language.SRC, bundle.mono_src),
                                   (Language.TGT, bundle.mono_tgt)):
                    lines = _sample_batch(batch_rng, pool, cfg.batch_size)
                    last["crosslt"] = crosslt_step(params, lines, lang, vocab,
                                                   opt, cfg, drop_rng)
                    updates += 1
            if "adv" in cfg.objectives:
                src_lines = _sample_batch(batch_rng, bundle.mono_src, cfg.batch_size)
                tgt_lines = _sample_batch(batch_rng, bundle.mono_tgt, cfg.batch_size)
                last["disc"], last["gen"] = adversarial_step(
                    params, disc, src_lines, tgt_lines, vocab, opt, cfg, drop_rng)
                updates += 1

            if updates - last_eval >= cfg.eval_interval_updates:
                last_eval = updates
                evaluate()
                if early_stop_check(history, cfg.patience):
                    break
    except TrainingDivergedError as err:
        raise TrainingDivergedError(str(err), report) from None

    if updates > last_eval or not history:
        evaluate()
    return best_params, report


# ---------------------------------------------------------------------------
# Supervised loops (pretraining, back-translation baseline, fine-tuning)
# ---------------------------------------------------------------------------

def _supervised_loop(params: ModelParams, train_pairs: list[tuple[list[int], list[int]]],
                     val_pairs: list[tuple[list[int], list[int]]],
                     directions: tuple[Language, ...], cfg: TrainConfig,
                     log: MetricsLog, phase: str) -> ModelParams:
    """Teacher-forced training until validation loss stops improving.

    ``train_pairs`` holds (source ids, target ids) in SRC->TGT orientation;
    each direction in ``directions`` trains with the pair flipped as needed
    (TGT means translate source->target).
    """
    opt = Adam(params.tensors, lr=cfg.lr)
    seeds = np.random.SeedSequence(cfg.seed).spawn(2)
    batch_rng = np.random.default_rng(seeds[0])
    drop_rng = np.random.default_rng(seeds[1])

    def oriented(pair, direction: Language):
        s, t = pair
        return (s, t) if direction is Language.TGT else (t, s)

    def val_loss() -> float:
        if not val_pairs:
            return float("nan")
        total, count = 0.0, 0
        with no_grad():
            for start in range(0, len(val_pairs), 64):
                chunk = val_pairs[start:start + 64]
                for direction in directions:
                    pairs = [oriented(p, direction) for p in chunk]
                    batch = _teacher_batch([p[0] for p in pairs],
                                           [p[1] for p in pairs], direction)
                    loss = _loss_on_batch(params, batch, cfg, train=False)
                    total += loss.item() * len(chunk)
                    count += len(chunk)
        return total / count

    best = params.clone()
    best_loss = float("inf")
    history: list[float] = []
    updates = 0
    last_train = float("nan")
    while updates < cfg.max_updates:
        direction = directions[updates % len(directions)]
        chosen = _sample_batch(batch_rng, train_pairs, cfg.batch_size)
        pairs = [oriented(p, direction) for p in chosen]
        batch = _teacher_batch([p[0] for p in pairs], [p[1] for p in pairs], direction)
        last_train = _train_step(params, opt, batch, cfg, drop_rng)
        updates += 1
        if updates % cfg.eval_interval_updates == 0 or updates == cfg.max_updates:
            v = val_loss()
            log.write({"phase": phase, "update_count": updates,
                       "train_loss": last_train, "val_loss": v})
            if math.isnan(v):
                continue
            history.append(-v)
            if v < best_loss:
                best_loss = v
                best = params.clone()
            if early_stop_check(history, cfg.patience):
                break
    return best if history else params


def pretrain_supervised(parallel: list[tuple[str, str]], vocab: Vocabulary,
                        model_config: ModelConfig, cfg: TrainConfig,
                        log: MetricsLog | None = None,
                        val_fraction: float = 0.05) -> ModelParams:
    """Train a fresh many-to-many model on the out-of-domain parallel split."""
    if not parallel:
        raise ValueError("empty parallel corpus")
    log = log or MetricsLog()
    params = ModelParams.init(model_config, seed=cfg.seed)
    encoded = [(encode(s, Language.SRC, vocab).ids, encode(t, Language.TGT, vocab).ids)
               for s, t in parallel]
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x9e37)).generate_state(1))
    order = rng.permutation(len(encoded))
    n_val = min(int(len(encoded) * val_fraction), 500)
    val = [encoded[int(i)] for i in order[:n_val]]
    train = [encoded[int(i)] for i in order[n_val:]] or encoded
    return _supervised_loop(params, train, val,
                            (Language.TGT, Language.SRC), cfg, log, "pretrain")


def synthesize_backtranslations(params: ModelParams, lines: list[str],
                                from_lang: Language, vocab: Vocabulary,
                                chunk_size: int = 64) -> list[list[int]]:
    """Greedy-translate every line to the other language; one output per input."""
    ids = _encode_lines(lines, from_lang, vocab)
    synthetic: list[list[int]] = []
    for start in range(0, len(ids), chunk_size):
        out = M.greedy_decode_batch(params, ids[start:start + chunk_size],
                                    from_lang.other())
        synthetic.extend(out_ids if out_ids else [UNK] for out_ids in out)
    return synthetic


def one_time_backtranslate_train(pretrained: ModelParams, mono_src: list[str],
                                 vocab: Vocabulary, cfg: TrainConfig,
                                 log: MetricsLog | None = None) -> ModelParams:
    """One-shot back-translation baseline.

    Translates the source monolingual set to the target language once with
    the frozen pretrained model, then trains a fresh copy of the pretrained
    model to map synthetic target back to the original source.
    """
    if not mono_src:
        raise ValueError("empty monolingual corpus")
    log = log or MetricsLog()
    src_ids = _encode_lines(mono_src, Language.SRC, vocab)
    synthetic = synthesize_backtranslations(pretrained, mono_src, Language.SRC, vocab)
    # Pairs oriented SRC->TGT so the shared loop can flip them; training runs
    # only the TGT->SRC direction (synthetic input, gold source output).
    pairs = list(zip(src_ids, synthetic))
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x517c)).generate_state(1))
    order = rng.permutation(len(pairs))
    n_val = min(int(len(pairs) * 0.05), 500)
    val = [pairs[int(i)] for i in order[:n_val]]
    train = [pairs[int(i)] for i in order[n_val:]] or pairs
    return _supervised_loop(pretrained.clone(), train, val,
                            (Language.SRC,), cfg, log, "backtranslate")


def finetune(params: ModelParams, labeled: list[tuple[str, str]],
             vocab: Vocabulary, cfg: TrainConfig,
             log: MetricsLog | None = None) -> ModelParams:
    """Supervised fine-tuning on (target, source) pairs with a 90/10 split."""
    if not labeled:
        return params.clone()
    log = log or MetricsLog()
    encoded = [(encode(s, Language.SRC, vocab).ids, encode(t, Language.TGT, vocab).ids)
               for t, s in labeled]
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0xf17e)).generate_state(1))
    order = rng.permutation(len(encoded))
    n_val = max(1, len(encoded) // 10) if len(encoded) > 1 else 0
    val = [encoded[int(i)] for i in order[:n_val]]
    train = [encoded[int(i)] for i in order[n_val:]] or encoded
    return _supervised_loop(params.clone(), train, val,
                            (Language.SRC,), cfg, log, "finetune")


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    passed: bool
    max_rel_err: float


def grad_check(params: ModelParams, loss_fn, tolerance: float = 1e-4,
               step: float = 1e-3, atol: float = 1e-5,
               tensor_names: list[str] | None = None) -> dict[str, GradCheckResult]:
    """Compare analytic gradients against central finite differences.

    ``loss_fn(params)`` must be a deterministic scalar functional of the
    parameters (eval mode, fixed batch).  An element passes when
    ``|analytic - fd| <= atol + tolerance * max(|analytic|, |fd|)``; the
    absolute floor absorbs finite-difference noise on near-zero entries.
    Intended for tiny models in float64.
    """
    params.zero_grad()
    loss = loss_fn(params)
    loss.backward()
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
                for n, t in params.tensors.items()}

    names = tensor_names or sorted(params.tensors)
    results: dict[str, GradCheckResult] = {}
    for name in names:
        t = params.tensors[name]
        fd = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        fd_flat = fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                hi = loss_fn(params).item()
            flat[i] = orig - step
            with no_grad():
                lo = loss_fn(params).item()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * step)
        a = analytic[name]
        err = np.abs(a - fd)
        bound = atol + tolerance * np.maximum(np.abs(a), np.abs(fd))
        rel = err / np.maximum(np.maximum(np.abs(a), np.abs(fd)), 1e-12)
        rel = np.where(err <= atol, 0.0, rel)
        results[name] = GradCheckResult(passed=bool(np.all(err <= bound)),
                                        max_rel_err=float(rel.max()) if rel.size else 0.0)
    return results
