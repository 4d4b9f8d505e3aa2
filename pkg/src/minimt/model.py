"""Small many-to-many encoder-decoder transformer.

One parameter set serves both translation directions; the output language
is controlled by forcing the first decoder token to a language tag.
Blocks are pre-layer-norm with tied input/output embeddings.  Everything
runs on the package's own autograd tensors, so the full backward pass is
verifiable against finite differences.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor, no_grad
from .corpus import Language
from .tokenizer import EOS, PAD, LANG_SRC, LANG_TGT, TokenSequence, lang_token

CHECKPOINT_MAGIC = b"MMTCKPT1"
CHECKPOINT_VERSION = 1

NEG_INF = -1e9


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    max_len: int = 32
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        for name in ("vocab_size", "d_model", "n_heads", "n_enc_layers",
                     "n_dec_layers", "d_ff", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: (float(v) if k == "dropout" else int(v)) for k, v in d.items()})


def _tensor_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    d, f = cfg.d_model, cfg.d_ff
    shapes: dict[str, tuple] = {
        "embed": (cfg.vocab_size, d),
        "pos": (cfg.max_len, d),
        "enc.ln.g": (d,), "enc.ln.b": (d,),
        "dec.ln.g": (d,), "dec.ln.b": (d,),
    }

    def attn(prefix: str):
        for m in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{m}"] = (d, d)
            shapes[f"{prefix}.b{m}"] = (d,)

    def block(prefix: str, n_norms: int):
        for i in range(1, n_norms + 1):
            shapes[f"{prefix}.ln{i}.g"] = (d,)
            shapes[f"{prefix}.ln{i}.b"] = (d,)
        shapes[f"{prefix}.ff.w1"] = (d, f)
        shapes[f"{prefix}.ff.b1"] = (f,)
        shapes[f"{prefix}.ff.w2"] = (f, d)
        shapes[f"{prefix}.ff.b2"] = (d,)

    for i in range(cfg.n_enc_layers):
        attn(f"enc{i}.attn")
        block(f"enc{i}", 2)
    for i in range(cfg.n_dec_layers):
        attn(f"dec{i}.self")
        attn(f"dec{i}.cross")
        block(f"dec{i}", 3)
    return shapes


class ModelParams:
    """Named parameter tensors for one model instance."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = _tensor_shapes(config)
        if set(tensors) != set(expected):
            missing = set(expected) ^ set(tensors)
            raise ValueError(f"parameter names do not match config: {sorted(missing)}")
        for name, t in tensors.items():
            if tuple(t.data.shape) != expected[name]:
                raise ValueError(
                    f"tensor {name} has shape {t.data.shape}, expected {expected[name]}"
                )
        self.config = config
        self.tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype=np.float32) -> "ModelParams":
        rng = np.random.default_rng(seed)
        tensors: dict[str, Tensor] = {}
        for name, shape in sorted(_tensor_shapes(config).items()):
            last = name.rsplit(".", 1)[-1]
            if last == "g":
                data = np.ones(shape, dtype=dtype)
            elif last in ("b", "bq", "bk", "bv", "bo", "b1", "b2"):
                data = np.zeros(shape, dtype=dtype)
            elif name in ("embed", "pos"):
                data = rng.normal(0.0, 0.02, size=shape).astype(dtype)
            else:
                fan_in, fan_out = shape[0], shape[-1]
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                data = rng.uniform(-limit, limit, size=shape).astype(dtype)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config, tensors)

    def t(self, name: str) -> Tensor:
        return self.tensors[name]

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, {
            n: Tensor(t.data.copy(), requires_grad=t.requires_grad)
            for n, t in self.tensors.items()
        })

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {
            n: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
            for n, t in self.tensors.items()
        })

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    @property
    def dtype(self):
        return self.tensors["embed"].data.dtype


@dataclass
class EncoderFeatures:
    """Final encoder-layer outputs with PAD positions flagged invalid."""
    vectors: np.ndarray   # (batch, seq_len, d_model)
    valid: np.ndarray     # (batch, seq_len) bool

    def stacked(self) -> np.ndarray:
        """All valid token vectors as one (n_tokens, d_model) matrix."""
        return self.vectors[self.valid]


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def pad_batch(id_lists: list[list[int]], dtype=np.int64) -> np.ndarray:
    width = max(len(ids) for ids in id_lists)
    out = np.full((len(id_lists), width), PAD, dtype=dtype)
    for i, ids in enumerate(id_lists):
        out[i, :len(ids)] = ids
    return out


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return ag.add(ag.matmul(x, w), b)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, d = x.shape
    return ag.transpose(ag.reshape(x, (b, l, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, l, dk = x.shape
    return ag.reshape(ag.transpose(x, (0, 2, 1, 3)), (b, l, h * dk))


def _attention(params: ModelParams, prefix: str, q_in: Tensor, kv_in: Tensor,
               mask: np.ndarray, train: bool, rng) -> Tensor:
    cfg = params.config
    q = _split_heads(_linear(q_in, params.t(f"{prefix}.wq"), params.t(f"{prefix}.bq")), cfg.n_heads)
    k = _split_heads(_linear(kv_in, params.t(f"{prefix}.wk"), params.t(f"{prefix}.bk")), cfg.n_heads)
    v = _split_heads(_linear(kv_in, params.t(f"{prefix}.wv"), params.t(f"{prefix}.bv")), cfg.n_heads)
    scale = 1.0 / math.sqrt(cfg.d_model // cfg.n_heads)
    scores = ag.mul(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), scale)
    scores = ag.masked_fill(scores, mask, NEG_INF)
    attn = ag.softmax(scores, axis=-1)
    if train and cfg.dropout > 0:
        attn = ag.dropout(attn, cfg.dropout, rng)
    ctx = _merge_heads(ag.matmul(attn, v))
    return _linear(ctx, params.t(f"{prefix}.wo"), params.t(f"{prefix}.bo"))


def _feed_forward(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    h = ag.gelu(_linear(x, params.t(f"{prefix}.ff.w1"), params.t(f"{prefix}.ff.b1")))
    return _linear(h, params.t(f"{prefix}.ff.w2"), params.t(f"{prefix}.ff.b2"))


def _ln(params: ModelParams, prefix: str, x: Tensor) -> Tensor:
    return ag.layer_norm(x, params.t(f"{prefix}.g"), params.t(f"{prefix}.b"))


def _maybe_drop(x: Tensor, cfg: ModelConfig, train: bool, rng) -> Tensor:
    if train and cfg.dropout > 0:
        return ag.dropout(x, cfg.dropout, rng)
    return x


def _embed(params: ModelParams, ids: np.ndarray, train: bool, rng) -> Tensor:
    cfg = params.config
    if ids.shape[-1] > cfg.max_len:
        raise ValueError(f"sequence length {ids.shape[-1]} exceeds max_len {cfg.max_len}")
    x = ag.mul(ag.embedding(params.t("embed"), ids), math.sqrt(cfg.d_model))
    x = ag.add(x, ag.embedding(params.t("pos"), np.arange(ids.shape[-1])))
    return _maybe_drop(x, cfg, train, rng)


def encode_states(params: ModelParams, src: np.ndarray,
                  train: bool = False, rng=None) -> Tensor:
    """Encoder stack output, (batch, src_len, d_model)."""
    cfg = params.config
    x = _embed(params, src, train, rng)
    key_pad = (src == PAD)[:, None, None, :]  # (B, 1, 1, Ls)
    for i in range(cfg.n_enc_layers):
        h = _ln(params, f"enc{i}.ln1", x)
        a = _attention(params, f"enc{i}.attn", h, h, key_pad, train, rng)
        x = ag.add(x, _maybe_drop(a, cfg, train, rng))
        f = _feed_forward(params, f"enc{i}", _ln(params, f"enc{i}.ln2", x))
        x = ag.add(x, _maybe_drop(f, cfg, train, rng))
    return _ln(params, "enc.ln", x)


def decode_states(params: ModelParams, enc_out: Tensor, src: np.ndarray,
                  tgt_in: np.ndarray, train: bool = False, rng=None) -> Tensor:
    cfg = params.config
    y = _embed(params, tgt_in, train, rng)
    lt = tgt_in.shape[-1]
    causal = np.triu(np.ones((lt, lt), dtype=bool), k=1)[None, None, :, :]
    tgt_pad = (tgt_in == PAD)[:, None, None, :]
    self_mask = causal | tgt_pad
    cross_mask = (src == PAD)[:, None, None, :]
    for i in range(cfg.n_dec_layers):
        h = _ln(params, f"dec{i}.ln1", y)
        a = _attention(params, f"dec{i}.self", h, h, self_mask, train, rng)
        y = ag.add(y, _maybe_drop(a, cfg, train, rng))
        c = _attention(params, f"dec{i}.cross", _ln(params, f"dec{i}.ln2", y),
                       enc_out, cross_mask, train, rng)
        y = ag.add(y, _maybe_drop(c, cfg, train, rng))
        f = _feed_forward(params, f"dec{i}", _ln(params, f"dec{i}.ln3", y))
        y = ag.add(y, _maybe_drop(f, cfg, train, rng))
    return _ln(params, "dec.ln", y)


def forward_logits(params: ModelParams, src: np.ndarray, tgt_in: np.ndarray,
                   train: bool = False, rng=None) -> Tensor:
    """Decoder logits, (batch, tgt_len, vocab_size).

    ``tgt_in`` must start with a language tag in every row; that tag is what
    forces the output language.
    """
    first = np.asarray(tgt_in)[:, 0]
    if not np.all((first == LANG_SRC) | (first == LANG_TGT)):
        raise ValueError("tgt_in must start with a language tag in every row")
    enc_out = encode_states(params, src, train, rng)
    dec_out = decode_states(params, enc_out, src, tgt_in, train, rng)
    return ag.matmul(dec_out, ag.transpose(params.t("embed"), (1, 0)))


def encode_features(params: ModelParams, src: np.ndarray) -> EncoderFeatures:
    """Token-level encoder features in eval mode; PAD rows flagged invalid."""
    with no_grad():
        out = encode_states(params, src, train=False)
    return EncoderFeatures(vectors=out.data, valid=(src != PAD))


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def default_max_new(src_len: int) -> int:
    return 2 * src_len + 5


def _decode_caps(params: ModelParams, src_lens: list[int], max_new) -> list[int]:
    # Decoder input is [LANG] + generated tokens, so at most max_len - 1 tokens.
    hard = params.config.max_len - 1
    if max_new is None:
        return [min(default_max_new(n), hard) for n in src_lens]
    return [min(max_new, hard)] * len(src_lens)


def greedy_decode_batch(params: ModelParams, srcs: list[list[int]],
                        target_lang: Language, max_new: int | None = None) -> list[list[int]]:
    """Greedy decoding for a batch of raw source id lists (no EOS appended yet).

    Returns generated content ids per row (no language tag, no EOS).
    Argmax ties break toward the lowest token id.
    """
    if not srcs:
        return []
    caps = _decode_caps(params, [len(s) for s in srcs], max_new)
    src = pad_batch([s + [EOS] for s in srcs])
    tag = lang_token(target_lang)
    n = len(srcs)
    with no_grad():
        enc_out = encode_states(params, src)
        done = np.zeros(n, dtype=bool)
        gen: list[list[int]] = [[] for _ in range(n)]
        for step in range(max(caps)):
            rows = [[tag] + g for g in gen]
            tgt_in = pad_batch(rows)
            dec = decode_states(params, enc_out, src, tgt_in)
            logits = dec.data[:, step, :] @ params.t("embed").data.T
            next_tokens = np.argmax(logits, axis=-1)
            for i in range(n):
                if done[i]:
                    continue
                tok = int(next_tokens[i])
                if tok == EOS:
                    done[i] = True
                else:
                    gen[i].append(tok)
                    if len(gen[i]) >= caps[i]:
                        done[i] = True
            if done.all():
                break
    return gen


def greedy_decode(params: ModelParams, src: TokenSequence, target_lang: Language,
                  max_new: int | None = None) -> TokenSequence:
    ids = greedy_decode_batch(params, [list(src.ids)], target_lang, max_new)[0]
    return TokenSequence(lang=target_lang, ids=ids)


def _beam_step(actives: list[tuple[list[int], float]],
               best: tuple[float, list[int]] | None,
               logprobs: np.ndarray, beam: int, eos_id: int):
    """Expand the active hypotheses by one token and keep the top ``beam``.

    Candidates are ranked by total log-probability with ties broken by
    token id, then hypothesis order.  An EOS candidate finishes its
    hypothesis (with the EOS log-probability included in the score).
    Returns ``(new_actives, best_finished, stop)``; the search stops when
    nothing stays active or the best active can no longer beat the best
    finished score (scores only decrease with length).
    """
    n, v = logprobs.shape
    totals = (np.array([s for _, s in actives])[:, None] + logprobs).reshape(-1)
    idx = np.arange(n * v)
    rows = idx // v
    toks = idx % v
    order = np.lexsort((rows, toks, -totals))
    new_actives: list[tuple[list[int], float]] = []
    for i in order[:beam]:
        row, tok, score = int(rows[i]), int(toks[i]), float(totals[i])
        if tok == eos_id:
            if best is None or score > best[0]:
                best = (score, list(actives[row][0]))
        else:
            new_actives.append((actives[row][0] + [tok], score))
    stop = (not new_actives) or (best is not None and new_actives[0][1] <= best[0])
    return new_actives, best, stop


def _beam_finalize(actives: list[tuple[list[int], float]],
                   best: tuple[float, list[int]] | None) -> tuple[list[int], float]:
    if best is not None:
        return best[1], best[0]
    top = max(range(len(actives)), key=lambda i: actives[i][1])
    return actives[top][0], actives[top][1]


def beam_search(logprob_fn, beam: int, max_new: int, eos_id: int = EOS):
    """Length-unnormalized beam search over a next-token log-probability oracle.

    ``logprob_fn(prefixes)`` maps a list of token-id prefixes (all the same
    length) to an array of next-token log-probabilities, one row per prefix.
    Returns ``(ids, score)`` of the best finished hypothesis, falling back
    to the best active one if nothing finished within ``max_new`` steps.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    actives: list[tuple[list[int], float]] = [([], 0.0)]
    best: tuple[float, list[int]] | None = None
    for _ in range(max_new):
        lps = np.asarray(logprob_fn([ids for ids, _ in actives]))
        actives_new, best, stop = _beam_step(actives, best, lps, beam, eos_id)
        if stop:
            actives = actives_new or actives
            break
        actives = actives_new
    return _beam_finalize(actives, best)


def _log_softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def beam_decode_batch(params: ModelParams, srcs: list[list[int]],
                      target_lang: Language, beam: int,
                      max_new: int | None = None) -> list[list[int]]:
    """Beam decoding for a batch of source id lists, searched in lockstep.

    Per-sentence results are identical to running :func:`beam_search` on
    each sentence alone; the lockstep layout just batches the decoder
    forward passes.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if not srcs:
        return []
    caps = _decode_caps(params, [len(s) for s in srcs], max_new)
    src = pad_batch([s + [EOS] for s in srcs])
    tag = lang_token(target_lang)
    n = len(srcs)
    embed_t = params.t("embed").data.T
    with no_grad():
        enc = encode_states(params, src).data

    actives: list[list[tuple[list[int], float]]] = [[([], 0.0)] for _ in range(n)]
    bests: list[tuple[float, list[int]] | None] = [None] * n
    results: list[list[int] | None] = [None if caps[i] > 0 else [] for i in range(n)]
    step = 0
    while True:
        live = [i for i in range(n) if results[i] is None]
        if not live:
            break
        row_sent: list[int] = []
        row_prefix: list[list[int]] = []
        for i in live:
            for ids, _ in actives[i]:
                row_sent.append(i)
                row_prefix.append(ids)
        tgt_in = pad_batch([[tag] + p for p in row_prefix])
        sent_idx = np.array(row_sent)
        with no_grad():
            dec = decode_states(params, Tensor(enc[sent_idx]), src[sent_idx], tgt_in)
        lps = _log_softmax_rows(dec.data[:, step, :] @ embed_t)
        offset = 0
        for i in live:
            k = len(actives[i])
            new_actives, best, stop = _beam_step(
                actives[i], bests[i], lps[offset:offset + k], beam, EOS)
            offset += k
            bests[i] = best
            if stop:
                ids, _ = _beam_finalize(new_actives or actives[i], best)
                results[i] = ids
            elif step + 1 >= caps[i]:
                ids, _ = _beam_finalize(new_actives, best)
                results[i] = ids
            else:
                actives[i] = new_actives
        step += 1
    return [ids if ids is not None else [] for ids in results]


def beam_decode(params: ModelParams, src: TokenSequence, target_lang: Language,
                beam: int, max_new: int | None = None) -> TokenSequence:
    ids = beam_decode_batch(params, [list(src.ids)], target_lang, beam, max_new)[0]
    return TokenSequence(lang=target_lang, ids=ids)


class Translator:
    """Batch translation front end over one parameter set and vocabulary."""

    def __init__(self, params: ModelParams, vocab, chunk_size: int = 64):
        self.params = params
        self.vocab = vocab
        self.chunk_size = chunk_size

    def translate_batch(self, lines: list[str], to_lang: Language, beam: int,
                        max_new: int | None = None) -> list[str]:
        from .tokenizer import decode as tok_decode
        from .tokenizer import encode as tok_encode

        out: list[str] = [""] * len(lines)
        todo = [(i, line) for i, line in enumerate(lines) if line.strip()]
        from_lang = to_lang.other()
        for start in range(0, len(todo), self.chunk_size):
            chunk = todo[start:start + self.chunk_size]
            seqs = [tok_encode(line, from_lang, self.vocab) for _, line in chunk]
            if beam == 1:
                decoded = greedy_decode_batch(
                    self.params, [s.ids for s in seqs], to_lang, max_new)
            else:
                decoded = beam_decode_batch(
                    self.params, [s.ids for s in seqs], to_lang, beam, max_new)
            for (i, _), ids in zip(chunk, decoded):
                out[i] = tok_decode(TokenSequence(lang=to_lang, ids=ids), self.vocab)
        return out


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, path, vocab_hash: str) -> None:
    names = sorted(params.tensors)
    index = []
    offset = 0
    blobs = []
    for name in names:
        data = np.ascontiguousarray(params.tensors[name].data, dtype="<f4")
        index.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += len(blobs[-1])
    header = json.dumps({
        "version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "vocab_hash": vocab_hash,
        "tensors": index,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path, expected_vocab_hash: str | None = None) -> tuple[ModelParams, str]:
    """Load a checkpoint, verifying version, shapes, and vocabulary hash."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    if header["version"] != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header['version']}")
    if expected_vocab_hash is not None and header["vocab_hash"] != expected_vocab_hash:
        raise CheckpointError(f"{path}: checkpoint was trained with a different vocabulary")
    config = ModelConfig.from_dict(header["config"])
    expected_shapes = _tensor_shapes(config)
    data = raw[12 + hlen:]
    tensors = {}
    for entry in header["tensors"]:
        name, shape, off = entry["name"], tuple(entry["shape"]), entry["offset"]
        if name not in expected_shapes or expected_shapes[name] != shape:
            raise CheckpointError(f"{path}: unexpected tensor {name} with shape {shape}")
        count = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(shape)
        tensors[name] = Tensor(arr.astype(np.float32), requires_grad=True)
    return ModelParams(config, tensors), header["vocab_hash"]
