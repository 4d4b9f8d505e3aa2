"""Shared vocabulary over both languages with character-level fallback.

Tokens are whole words.  A word missing from the vocabulary is spelled out
character by character: the first character is emitted as a bare token and
every following character carries the ``##`` continuation prefix, so word
boundaries stay unambiguous and corrupted words (e.g. after dropping a
character) remain representable without UNK.
"""

from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

from .corpus import Language

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK, MASK, LANG_SRC, LANG_TGT = range(7)

SPECIAL_STRINGS = ("<pad>", "<s>", "</s>", "<unk>", "[MASK]", "<src>", "<tgt>")
MASK_STRING = "[MASK]"
CONTINUATION = "##"

VOCAB_FORMAT = "minimt-vocab/1"


@dataclass
class TokenSequence:
    lang: Language
    ids: list[int]

    def __len__(self) -> int:
        return len(self.ids)


def lang_token(lang: Language) -> int:
    return LANG_SRC if lang is Language.SRC else LANG_TGT


class Vocabulary:
    """Bidirectional token/string map; immutable after construction."""

    def __init__(self, tokens: list[str], n_words: int, n_chars: int):
        if tuple(tokens[:7]) != SPECIAL_STRINGS:
            raise ValueError("vocabulary must start with the seven special tokens")
        if len(tokens) != 7 + n_words + n_chars:
            raise ValueError("token count does not match header counts")
        self.strings = list(tokens)
        self.ids = {s: i for i, s in enumerate(tokens)}
        if len(self.ids) != len(self.strings):
            raise ValueError("duplicate token strings in vocabulary")
        self.n_words = n_words
        self.n_chars = n_chars

    def __len__(self) -> int:
        return len(self.strings)

    def __contains__(self, token: str) -> bool:
        return token in self.ids

    def id_of(self, token: str) -> int:
        return self.ids[token]

    def string_of(self, idx: int) -> str:
        if not 0 <= idx < len(self.strings):
            raise KeyError(f"token id out of range: {idx}")
        return self.strings[idx]

    # -- serialization ---------------------------------------------------

    def serialize(self) -> str:
        header = f"{VOCAB_FORMAT} total={len(self.strings)} words={self.n_words} chars={self.n_chars}"
        return "\n".join([header] + self.strings) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.serialize(), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        header = lines[0].split()
        if not header or header[0] != VOCAB_FORMAT:
            raise ValueError(f"not a vocabulary file: {path}")
        fields = dict(kv.split("=") for kv in header[1:])
        vocab = cls(lines[1:], int(fields["words"]), int(fields["chars"]))
        if len(vocab) != int(fields["total"]):
            raise ValueError("vocabulary header total does not match token count")
        return vocab

    def content_hash(self) -> str:
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()


def build_vocab(corpora) -> Vocabulary:
    """Build the shared vocabulary from an iterable of text lines.

    Word tokens are ordered by frequency (descending) then lexicographically;
    character tokens come last, sorted lexicographically.  The result does
    not depend on the order of the input lines.
    """
    freq: Counter = Counter()
    chars: set[str] = set()
    for line in corpora:
        for word in line.split():
            freq[word] += 1
            chars.update(word)
    if not freq:
        raise ValueError("cannot build a vocabulary from empty corpora")

    words = sorted(freq, key=lambda w: (-freq[w], w))
    # Words that collide with special strings or look like continuation
    # tokens are left to the character fallback.
    words = [w for w in words if w not in SPECIAL_STRINGS and not w.startswith(CONTINUATION)]

    word_set = set(words)
    bare_chars = {c for c in chars if c not in word_set}
    char_tokens = sorted({CONTINUATION + c for c in chars} | bare_chars)
    tokens = list(SPECIAL_STRINGS) + words + char_tokens
    return Vocabulary(tokens, n_words=len(words), n_chars=len(char_tokens))


def encode(line: str, lang: Language, vocab: Vocabulary) -> TokenSequence:
    """Encode one line; out-of-vocabulary words fall back to characters."""
    words = line.split()
    if not words:
        raise ValueError("cannot encode an empty line")
    ids: list[int] = []
    for word in words:
        if word == MASK_STRING:
            ids.append(MASK)
            continue
        idx = vocab.ids.get(word)
        if idx is not None and idx >= 7:
            ids.append(idx)
            continue
        for pos, ch in enumerate(word):
            token = ch if pos == 0 else CONTINUATION + ch
            cid = vocab.ids.get(token)
            if cid is None:
                logger.debug("character %r not in vocabulary; emitting UNK", ch)
                cid = UNK
            ids.append(cid)
    return TokenSequence(lang=lang, ids=ids)


def decode(seq, vocab: Vocabulary) -> str:
    """Inverse of :func:`encode`; strips PAD/BOS/EOS and joins with spaces."""
    ids = seq.ids if isinstance(seq, TokenSequence) else list(seq)
    words: list[str] = []
    for idx in ids:
        s = vocab.string_of(int(idx))
        if idx in (PAD, BOS, EOS):
            continue
        if s.startswith(CONTINUATION) and len(s) > len(CONTINUATION):
            if words:
                words[-1] += s[len(CONTINUATION):]
            else:
                words.append(s[len(CONTINUATION):])
        else:
            words.append(s)
    return " ".join(words)
