"""Corpus BLEU, round-trip validation, and the early-stopping rule.

BLEU here is corpus-level modified n-gram precision for n=1..4 with
add-one smoothing on orders >= 2 that have zero matches, and the usual
brevity penalty.  Tokenization is whitespace splitting after NFC
normalization; the synthetic corpora are pre-tokenized, so scores are
fully determined by this module alone (no external tool mimicry).
"""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass

from .corpus import CipherSpec, Language, detect_language

MAX_ORDER = 4


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_dict(self) -> dict:
        return {
            "bleu": self.bleu,
            "precisions": list(self.precisions),
            "brevity_penalty": self.brevity_penalty,
            "hyp_len": self.hyp_len,
            "ref_len": self.ref_len,
        }


def _tokens(line: str) -> list[str]:
    return unicodedata.normalize("NFC", line).split()


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hypotheses: list[str], references: list[str]) -> BleuReport:
    """Corpus BLEU of ``hypotheses`` against line-aligned ``references``."""
    if len(hypotheses) != len(references):
        raise ValueError(
            f"hypothesis/reference length mismatch: {len(hypotheses)} vs {len(references)}"
        )
    if not hypotheses:
        raise ValueError("corpus_bleu requires at least one sentence pair")

    matched = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hypotheses, references):
        h = _tokens(hyp)
        r = _tokens(ref)
        hyp_len += len(h)
        ref_len += len(r)
        for n in range(1, MAX_ORDER + 1):
            hyp_counts = _ngrams(h, n)
            if not hyp_counts:
                continue
            ref_counts = _ngrams(r, n)
            total[n - 1] += sum(hyp_counts.values())
            matched[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())

    precisions = []
    for n in range(1, MAX_ORDER + 1):
        m, t = matched[n - 1], total[n - 1]
        if n >= 2 and m == 0:
            m, t = m + 1, t + 1
        precisions.append(m / t if t > 0 else 0.0)

    if hyp_len == 0:
        return BleuReport(0.0, tuple(precisions), 0.0, 0, ref_len)

    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    if min(precisions) > 0.0:
        bleu = bp * math.exp(sum(math.log(p) for p in precisions) / MAX_ORDER) * 100.0
    else:
        bleu = 0.0
    return BleuReport(bleu, tuple(precisions), bp, hyp_len, ref_len)


def early_stop_check(history: list[float], patience: int) -> bool:
    """True when training should stop.

    Stops when the last ``patience`` entries all failed to exceed the best
    value seen before them; an improvement must be strictly greater.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if len(history) <= patience:
        return False
    best_before = max(history[:-patience])
    return all(v <= best_before for v in history[-patience:])


def round_trip_validate(translator, validation_mono_src: list[str], beam: int) -> BleuReport:
    """BLEU of source lines against their translate-and-back reconstructions."""
    report, _, _ = round_trip_details(translator, validation_mono_src, beam)
    return report


def round_trip_details(translator, validation_mono_src: list[str], beam: int):
    """Round-trip BLEU plus the intermediate and reconstructed lines."""
    if not validation_mono_src:
        raise ValueError("validation set is empty")
    intermediates = translator.translate_batch(validation_mono_src, Language.TGT, beam)
    reconstructions = translator.translate_batch(intermediates, Language.SRC, beam)
    return corpus_bleu(reconstructions, validation_mono_src), intermediates, reconstructions


def language_agreement(lines: list[str], spec: CipherSpec, expected: Language) -> float:
    """Fraction of non-empty lines whose detected language matches ``expected``.

    Guards the round-trip score against the degenerate copy-through
    translator: a model that merely echoes its input scores a perfect
    round trip but near-zero agreement on the intermediate language.
    """
    scored = 0
    agree = 0
    for line in lines:
        if not line.strip():
            scored += 1
            continue
        scored += 1
        if detect_language(line, spec) is expected:
            agree += 1
    return agree / scored if scored else 0.0


def evaluate_testset(translator, test_parallel: list[tuple[str, str]], beam: int) -> BleuReport:
    """Translate the target-language inputs back to source and score BLEU."""
    if not test_parallel:
        raise ValueError("test set is empty")
    inputs = [t for t, _ in test_parallel]
    references = [s for _, s in test_parallel]
    hypotheses = translator.translate_batch(inputs, Language.SRC, beam)
    return corpus_bleu(hypotheses, references)
