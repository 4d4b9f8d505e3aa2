"""Synthetic cipher language pair: corpus generation, oracle translation,
and character-range language detection.

The source language is plain lowercase English words.  The target language
is produced by a word-level bijection (letters reversed, then shifted into
a non-Latin Unicode block), optionally followed by reversing the word order
of the whole line.  Because the mapping is an exact bijection there is a
ground-truth translator for every generated line, which makes every score
in the pipeline verifiable.

Two text distributions are generated:

* out-of-domain "sentences" (5-12 words, function words, templated prose)
  used as the parallel pretraining corpus, and
* in-domain "queries" (2-6 word noun phrases over category / attribute /
  brand / modifier slots) used as the monolingual adaptation corpora and
  the labeled test / fine-tune splits.

A slice of the query vocabulary never occurs in the sentences, so a model
pretrained on sentences genuinely has to adapt.
"""

from __future__ import annotations

import enum
import json
import random
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path


class Language(enum.Enum):
    SRC = "src"
    TGT = "tgt"

    def other(self) -> "Language":
        return Language.TGT if self is Language.SRC else Language.SRC


class CipherError(ValueError):
    pass


# Shift that maps ascii 'a'..'z' into the Greek block (U+03B1 ... U+03CA).
DEFAULT_CHAR_OFFSET = 0x3B1 - ord("a")


@dataclass(frozen=True)
class CipherSpec:
    """Word-level bijection plus a line-level reorder rule."""

    lexicon: dict[str, str]
    reorder_rule: str = "reverse"  # "identity" | "reverse"
    target_char_offset: int = DEFAULT_CHAR_OFFSET
    inverse: dict[str, str] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.reorder_rule not in ("identity", "reverse"):
            raise CipherError(f"unknown reorder rule: {self.reorder_rule!r}")
        lo = self.target_char_offset + ord("a")
        hi = self.target_char_offset + ord("z")
        inverse: dict[str, str] = {}
        for src, tgt in self.lexicon.items():
            if tgt in inverse:
                raise CipherError(
                    f"lexicon is not a bijection: {inverse[tgt]!r} and {src!r} "
                    f"both map to {tgt!r}"
                )
            if any(lo <= ord(c) <= hi for c in src):
                raise CipherError(f"source word {src!r} contains target-block characters")
            if not any(lo <= ord(c) <= hi for c in tgt):
                raise CipherError(f"target word {tgt!r} has no character in the target block")
            inverse[tgt] = src
        object.__setattr__(self, "inverse", inverse)

    def target_block(self) -> tuple[int, int]:
        return (self.target_char_offset + ord("a"), self.target_char_offset + ord("z"))

    def to_dict(self) -> dict:
        return {
            "reorder_rule": self.reorder_rule,
            "target_char_offset": self.target_char_offset,
            "lexicon": dict(sorted(self.lexicon.items())),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CipherSpec":
        return cls(
            lexicon=dict(d["lexicon"]),
            reorder_rule=d["reorder_rule"],
            target_char_offset=int(d["target_char_offset"]),
        )


def shift_word(word: str, offset: int) -> str:
    return "".join(chr(ord(c) + offset) for c in word)


def build_lexicon(words, offset: int = DEFAULT_CHAR_OFFSET) -> dict[str, str]:
    """Default cipher: reverse the letters, then shift into the target block."""
    return {w: shift_word(w[::-1], offset) for w in sorted(set(words))}


def oracle_translate(line: str, spec: CipherSpec, direction: Language = Language.TGT) -> str:
    """Exact translation of ``line``.

    ``direction`` names the output language: ``TGT`` translates source to
    target, ``SRC`` translates target back to source.
    """
    words = line.split()
    table = spec.lexicon if direction is Language.TGT else spec.inverse
    out = []
    for w in words:
        if w not in table:
            raise CipherError(f"word not in lexicon: {w!r}")
        out.append(table[w])
    if spec.reorder_rule == "reverse":
        out.reverse()
    return " ".join(out)


def detect_language(line: str, spec: CipherSpec) -> Language:
    """A line is target-language iff it contains at least one target-block char."""
    if not line.strip():
        raise ValueError("cannot detect language of an empty line")
    lo, hi = spec.target_block()
    if any(lo <= ord(c) <= hi for c in line):
        return Language.TGT
    return Language.SRC


# ---------------------------------------------------------------------------
# Template vocabulary
# ---------------------------------------------------------------------------

CATEGORIES = [
    "shirt", "shoes", "phone", "laptop", "watch", "jeans", "saree", "kurta",
    "fridge", "mixer", "headphones", "bag", "sofa", "lamp", "cream", "shampoo",
    "rice", "tea", "sandals", "blanket", "helmet", "bottle", "charger",
    "speaker", "towel", "toys", "heater", "lipstick",
]

ATTRIBUTES = [
    "red", "blue", "black", "white", "green", "yellow", "pink", "golden",
    "cotton", "silk", "leather", "woolen", "wireless", "smart", "slim",
    "large", "small", "cheap", "branded", "formal", "casual", "running",
]

BRANDS = [
    "nike", "adidas", "puma", "samsung", "apple", "sony", "titan", "boat",
    "levis", "raymond", "bata", "lakme", "dabur", "prestige", "milton",
    "campus", "zebronics", "wildcraft",
]

MODIFIERS = [
    "men", "women", "kids", "boys", "girls", "new", "latest", "best",
    "price", "offer", "online", "combo", "pack", "pro", "mini", "cover",
    "case", "set",
]

# Query-only vocabulary: never appears in the out-of-domain sentences, so the
# pretrained model has not seen these words at all.
QUERY_ONLY_WORDS = frozenset({
    "saree", "kurta", "mixer", "sandals", "helmet", "charger", "lipstick",
    "boat", "lakme", "prestige", "milton", "campus", "zebronics", "wildcraft",
    "combo", "pack", "offer", "woolen",
})

PERSONS = ["brother", "sister", "friend", "mother", "father", "cousin"]
OCCASIONS = ["wedding", "birthday", "party", "festival"]
PLACES = ["market", "shop", "store", "city"]

FUNCTION_WORDS = [
    "i", "want", "to", "buy", "a", "the", "for", "my", "please", "show",
    "me", "find", "good", "very", "this", "is", "in", "and", "order",
    "need", "with", "looking", "some", "will", "she", "he", "bought",
    "wants", "am", "we", "today", "from", "can", "you", "ordered",
    "online", "but", "not",
]

SENTENCE_TEMPLATES = [
    "i want to buy a {attr} {cat}",
    "please show me the {attr} {cat}",
    "i am looking for a {attr} {cat} for my {person}",
    "the {person} wants a {brand} {cat} for the {occasion}",
    "my {person} ordered a {attr} {cat} online today",
    "we need to find a good {cat} for the {occasion}",
    "this {brand} {cat} is very {attr} and very {attr2}",
    "i will buy the {cat} and the {cat2} today",
    "she wants to order a {attr} {cat} from the {place}",
    "can you show me some {attr} {cat2} for my {person}",
    "i need a {attr} {cat}",
    "show me the {brand} {cat}",
    "he bought a {attr} {cat} from the {place} for my {person}",
    "the {brand} {cat} in the {place} is not {attr} but very {attr2}",
    "my {person} wants this {attr} {cat} and a {attr2} {cat2}",
]

QUERY_TEMPLATES = [
    ("attr", "cat"),
    ("brand", "cat"),
    ("cat", "mod"),
    ("attr", "cat", "mod"),
    ("brand", "attr", "cat"),
    ("brand", "cat", "mod"),
    ("attr", "attr2", "cat"),
    ("brand", "attr", "cat", "mod"),
    ("attr", "cat", "mod", "mod2"),
    ("brand", "attr", "attr2", "cat", "mod"),
    ("brand", "attr", "attr2", "cat", "mod", "mod2"),
]


def all_source_words() -> list[str]:
    words = set(CATEGORIES) | set(ATTRIBUTES) | set(BRANDS) | set(MODIFIERS)
    words |= set(PERSONS) | set(OCCASIONS) | set(PLACES) | set(FUNCTION_WORDS)
    return sorted(words)


def default_cipher(reorder_rule: str = "reverse",
                   offset: int = DEFAULT_CHAR_OFFSET) -> CipherSpec:
    return CipherSpec(lexicon=build_lexicon(all_source_words(), offset),
                      reorder_rule=reorder_rule, target_char_offset=offset)


# ---------------------------------------------------------------------------
# Bundle generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BundleSizes:
    pretrain: int = 5000
    mono_src: int = 20000
    mono_tgt: int = 20000
    validation: int = 1000
    test: int = 1000
    finetune: int = 500

    def __post_init__(self):
        for name, n in self.to_dict().items():
            if n < 1:
                raise ValueError(f"size {name} must be >= 1, got {n}")

    def to_dict(self) -> dict[str, int]:
        return {
            "pretrain": self.pretrain, "mono_src": self.mono_src,
            "mono_tgt": self.mono_tgt, "validation": self.validation,
            "test": self.test, "finetune": self.finetune,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BundleSizes":
        return cls(**{k: int(v) for k, v in d.items()})


@dataclass
class CorpusBundle:
    pretrain_parallel: list[tuple[str, str]]   # (src, tgt)
    mono_src: list[str]
    mono_tgt: list[str]
    test_parallel: list[tuple[str, str]]       # (tgt, src): input, reference
    finetune_parallel: list[tuple[str, str]]   # (tgt, src)
    validation_mono_src: list[str]

    def training_lines(self) -> list[str]:
        """Every line the tokenizer may be trained on (no test labels)."""
        lines = []
        for s, t in self.pretrain_parallel:
            lines.append(s)
            lines.append(t)
        lines.extend(self.mono_src)
        lines.extend(self.mono_tgt)
        lines.extend(self.validation_mono_src)
        return lines


def _zipf_weights(n: int, s: float) -> list[float]:
    return [1.0 / (i + 1) ** s for i in range(n)]


class _SlotSampler:
    """Draws slot words with a Zipf-like frequency profile.

    Each sampler owns a seeded shuffle of its word list, so the in-domain
    and out-of-domain distributions rank the shared vocabulary differently.
    """

    def __init__(self, words: list[str], rng: random.Random, s: float):
        self.words = list(words)
        rng.shuffle(self.words)
        self.weights = _zipf_weights(len(self.words), s)

    def draw(self, rng: random.Random, exclude: set | None = None) -> str:
        for _ in range(64):
            w = rng.choices(self.words, weights=self.weights, k=1)[0]
            if not exclude or w not in exclude:
                return w
        # Weighted draw kept colliding; fall back to the first legal word.
        for w in self.words:
            if not exclude or w not in exclude:
                return w
        raise RuntimeError("slot exhausted")


def _unique_lines(make_line, count: int, what: str) -> list[str]:
    lines: list[str] = []
    seen: set[str] = set()
    attempts = 0
    limit = 400 * count + 1000
    while len(lines) < count:
        attempts += 1
        if attempts > limit:
            raise RuntimeError(f"could not generate {count} unique {what} lines")
        line = unicodedata.normalize("NFC", make_line())
        if line not in seen:
            seen.add(line)
            lines.append(line)
    return lines


class _QueryGenerator:
    def __init__(self, rng: random.Random, zipf_s: float = 0.9):
        self.rng = rng
        self.cats = _SlotSampler(CATEGORIES, rng, zipf_s)
        self.attrs = _SlotSampler(ATTRIBUTES, rng, zipf_s)
        self.brands = _SlotSampler(BRANDS, rng, zipf_s)
        self.mods = _SlotSampler(MODIFIERS, rng, zipf_s)

    def line(self) -> str:
        rng = self.rng
        template = rng.choice(QUERY_TEMPLATES)
        words = []
        used: set[str] = set()
        for slot in template:
            if slot.startswith("attr"):
                w = self.attrs.draw(rng, used)
            elif slot.startswith("mod"):
                w = self.mods.draw(rng, used)
            elif slot == "brand":
                w = self.brands.draw(rng, used)
            else:
                w = self.cats.draw(rng, used)
            used.add(w)
            words.append(w)
        return " ".join(words)


class _SentenceGenerator:
    def __init__(self, rng: random.Random, zipf_s: float = 0.7):
        self.rng = rng
        allowed = lambda ws: [w for w in ws if w not in QUERY_ONLY_WORDS]
        self.cats = _SlotSampler(allowed(CATEGORIES), rng, zipf_s)
        self.attrs = _SlotSampler(allowed(ATTRIBUTES), rng, zipf_s)
        self.brands = _SlotSampler(allowed(BRANDS), rng, zipf_s)

    def line(self) -> str:
        rng = self.rng
        template = rng.choice(SENTENCE_TEMPLATES)
        cat = self.cats.draw(rng)
        attr = self.attrs.draw(rng)
        return template.format(
            cat=cat,
            cat2=self.cats.draw(rng, {cat}),
            attr=attr,
            attr2=self.attrs.draw(rng, {attr}),
            brand=self.brands.draw(rng),
            person=rng.choice(PERSONS),
            occasion=rng.choice(OCCASIONS),
            place=rng.choice(PLACES),
        )


def generate_bundle(seed: int, sizes: BundleSizes | None = None,
                    spec: CipherSpec | None = None) -> CorpusBundle:
    """Deterministically generate all corpus splits for one seed."""
    sizes = sizes or BundleSizes()
    spec = spec or default_cipher()

    def stream(name: str) -> random.Random:
        return random.Random(f"minimt-corpus:{seed}:{name}")

    sent = _SentenceGenerator(stream("pretrain"))
    pretrain_src = _unique_lines(sent.line, sizes.pretrain, "pretrain")
    pretrain = [(s, oracle_translate(s, spec, Language.TGT)) for s in pretrain_src]

    mono_src = _unique_lines(_QueryGenerator(stream("mono_src")).line,
                             sizes.mono_src, "mono_src")
    mono_tgt_src = _unique_lines(_QueryGenerator(stream("mono_tgt")).line,
                                 sizes.mono_tgt, "mono_tgt")
    mono_tgt = [oracle_translate(s, spec, Language.TGT) for s in mono_tgt_src]

    # The monolingual sides are independent samples; still, make sure no
    # index happens to line up with its own translation.
    n = len(mono_tgt)
    if n > 1:
        for i, s in enumerate(mono_src[:n]):
            if oracle_translate(s, spec, Language.TGT) == mono_tgt[i]:
                j = (i + 1) % n
                mono_tgt[i], mono_tgt[j] = mono_tgt[j], mono_tgt[i]

    validation = _unique_lines(_QueryGenerator(stream("validation")).line,
                               sizes.validation, "validation")

    test_src = _unique_lines(_QueryGenerator(stream("test")).line, sizes.test, "test")
    test = [(oracle_translate(s, spec, Language.TGT), s) for s in test_src]

    ft_src = _unique_lines(_QueryGenerator(stream("finetune")).line,
                           sizes.finetune, "finetune")
    finetune = [(oracle_translate(s, spec, Language.TGT), s) for s in ft_src]

    return CorpusBundle(
        pretrain_parallel=pretrain,
        mono_src=mono_src,
        mono_tgt=mono_tgt,
        test_parallel=test,
        finetune_parallel=finetune,
        validation_mono_src=validation,
    )


# ---------------------------------------------------------------------------
# On-disk layout
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.json"
BUNDLE_FORMAT = "minimt-bundle/1"

_FILES = {
    "pretrain": "pretrain.tsv",
    "mono_src": "mono.src.txt",
    "mono_tgt": "mono.tgt.txt",
    "validation": "valid.src.txt",
    "test": "test.tsv",
    "finetune": "finetune.tsv",
}


def _write_lines(path: Path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for line in lines:
            f.write(line + "\n")


def _read_lines(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.rstrip("\n") for line in f]


def save_bundle(bundle: CorpusBundle, out_dir, spec: CipherSpec,
                seed: int, sizes: BundleSizes) -> Path:
    """Write all split files plus the manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_lines(out / _FILES["pretrain"], (f"{s}\t{t}" for s, t in bundle.pretrain_parallel))
    _write_lines(out / _FILES["mono_src"], bundle.mono_src)
    _write_lines(out / _FILES["mono_tgt"], bundle.mono_tgt)
    _write_lines(out / _FILES["validation"], bundle.validation_mono_src)
    _write_lines(out / _FILES["test"], (f"{t}\t{s}" for t, s in bundle.test_parallel))
    _write_lines(out / _FILES["finetune"], (f"{t}\t{s}" for t, s in bundle.finetune_parallel))
    manifest = {
        "format": BUNDLE_FORMAT,
        "seed": seed,
        "sizes": sizes.to_dict(),
        "files": dict(_FILES),
        "cipher": spec.to_dict(),
    }
    path = out / MANIFEST_NAME
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _split_pairs(lines: list[str], path: Path) -> list[tuple[str, str]]:
    pairs = []
    for i, line in enumerate(lines):
        left, sep, right = line.partition("\t")
        if not sep:
            raise ValueError(f"{path}:{i + 1}: expected a TAB-separated pair")
        pairs.append((left, right))
    return pairs


def load_bundle(bundle_dir) -> tuple[CorpusBundle, CipherSpec, dict]:
    """Read a bundle directory written by :func:`save_bundle`."""
    d = Path(bundle_dir)
    with open(d / MANIFEST_NAME, encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != BUNDLE_FORMAT:
        raise ValueError(f"unsupported bundle format: {manifest.get('format')!r}")
    files = manifest["files"]
    spec = CipherSpec.from_dict(manifest["cipher"])
    pretrain = _split_pairs(_read_lines(d / files["pretrain"]), d / files["pretrain"])
    test = _split_pairs(_read_lines(d / files["test"]), d / files["test"])
    finetune = _split_pairs(_read_lines(d / files["finetune"]), d / files["finetune"])
    bundle = CorpusBundle(
        pretrain_parallel=pretrain,
        mono_src=_read_lines(d / files["mono_src"]),
        mono_tgt=_read_lines(d / files["mono_tgt"]),
        test_parallel=test,
        finetune_parallel=finetune,
        validation_mono_src=_read_lines(d / files["validation"]),
    )
    return bundle, spec, manifest
