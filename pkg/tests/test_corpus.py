import unicodedata

import pytest

from minimt.corpus import (BundleSizes, CipherSpec, CipherError, Language,
                           build_lexicon, default_cipher, detect_language,
                           generate_bundle, load_bundle, oracle_translate,
                           save_bundle, shift_word, DEFAULT_CHAR_OFFSET)

SMALL = BundleSizes(pretrain=120, mono_src=200, mono_tgt=200,
                    validation=40, test=60, finetune=30)


@pytest.fixture(scope="module")
def bundle():
    return generate_bundle(7, SMALL)


@pytest.fixture(scope="module")
def spec():
    return default_cipher()


def test_lexicon_is_bijection(spec):
    assert len(spec.inverse) == len(spec.lexicon)


def test_colliding_lexicon_rejected_with_names():
    with pytest.raises(CipherError, match="'ab'"):
        CipherSpec(lexicon={"ab": shift_word("xy", DEFAULT_CHAR_OFFSET),
                            "cd": shift_word("xy", DEFAULT_CHAR_OFFSET)})


def test_source_word_in_target_block_rejected():
    with pytest.raises(CipherError, match="target-block"):
        CipherSpec(lexicon={shift_word("a", DEFAULT_CHAR_OFFSET): shift_word("b", DEFAULT_CHAR_OFFSET)})


def test_oracle_translate_reverse_rule():
    spec = CipherSpec(lexicon=build_lexicon(["red", "shirt"]), reorder_rule="reverse")
    out = oracle_translate("red shirt", spec, Language.TGT)
    assert out.split() == [spec.lexicon["shirt"], spec.lexicon["red"]]


def test_oracle_round_trip(spec, bundle):
    for line in bundle.mono_src[:50]:
        there = oracle_translate(line, spec, Language.TGT)
        assert oracle_translate(there, spec, Language.SRC) == line


def test_oracle_unknown_word_names_it(spec):
    with pytest.raises(CipherError, match="'zzzq'"):
        oracle_translate("red zzzq", spec, Language.TGT)


def test_detect_language_rules(spec):
    assert detect_language("red shirt", spec) is Language.SRC
    tgt = oracle_translate("red shirt", spec, Language.TGT)
    assert detect_language(tgt, spec) is Language.TGT
    # one target-block character is enough
    assert detect_language("red " + tgt.split()[0], spec) is Language.TGT
    with pytest.raises(ValueError):
        detect_language("   ", spec)


def test_bundle_deterministic(bundle):
    again = generate_bundle(7, SMALL)
    assert again.pretrain_parallel == bundle.pretrain_parallel
    assert again.mono_src == bundle.mono_src
    assert again.mono_tgt == bundle.mono_tgt
    assert again.test_parallel == bundle.test_parallel


def test_bundle_sizes_counts(bundle):
    assert len(bundle.pretrain_parallel) == SMALL.pretrain
    assert len(bundle.mono_src) == SMALL.mono_src
    assert len(bundle.mono_tgt) == SMALL.mono_tgt
    assert len(bundle.validation_mono_src) == SMALL.validation
    assert len(bundle.test_parallel) == SMALL.test
    assert len(bundle.finetune_parallel) == SMALL.finetune


def test_all_parallel_pairs_satisfy_oracle(bundle, spec):
    for src, tgt in bundle.pretrain_parallel:
        assert oracle_translate(src, spec, Language.TGT) == tgt
    for tgt, src in bundle.test_parallel + bundle.finetune_parallel:
        assert oracle_translate(tgt, spec, Language.SRC) == src


def test_unique_lines_per_split(bundle):
    for lines in (bundle.mono_src, bundle.mono_tgt, bundle.validation_mono_src):
        assert len(set(lines)) == len(lines)
        assert all(line == unicodedata.normalize("NFC", line) for line in lines)
        assert all(line.strip() for line in lines)


def test_mono_splits_not_aligned(bundle, spec):
    for i, line in enumerate(bundle.mono_src[:len(bundle.mono_tgt)]):
        assert oracle_translate(line, spec, Language.TGT) != bundle.mono_tgt[i]


def test_language_purity(bundle, spec):
    for line in bundle.mono_src[:100]:
        assert detect_language(line, spec) is Language.SRC
    for line in bundle.mono_tgt[:100]:
        assert detect_language(line, spec) is Language.TGT


def test_query_and_sentence_lengths(bundle):
    for line in bundle.mono_src:
        assert 2 <= len(line.split()) <= 6
    for src, _ in bundle.pretrain_parallel:
        assert 5 <= len(src.split()) <= 12


def test_domain_gap_vocabulary(bundle):
    # Some query words must never occur in the pretraining sentences.
    pretrain_words = {w for s, _ in bundle.pretrain_parallel for w in s.split()}
    query_words = {w for line in bundle.mono_src for w in line.split()}
    assert query_words - pretrain_words, "query-only vocabulary is empty"


def test_invalid_sizes_rejected():
    with pytest.raises(ValueError):
        BundleSizes(pretrain=0)


def test_save_load_round_trip(tmp_path, bundle, spec):
    save_bundle(bundle, tmp_path, spec, seed=7, sizes=SMALL)
    loaded, spec2, manifest = load_bundle(tmp_path)
    assert loaded.pretrain_parallel == bundle.pretrain_parallel
    assert loaded.mono_src == bundle.mono_src
    assert loaded.test_parallel == bundle.test_parallel
    assert spec2.lexicon == spec.lexicon
    assert manifest["seed"] == 7
    assert manifest["sizes"]["mono_src"] == SMALL.mono_src


def test_saved_files_are_lf_utf8(tmp_path, bundle, spec):
    save_bundle(bundle, tmp_path, spec, seed=7, sizes=SMALL)
    raw = (tmp_path / "mono.src.txt").read_bytes()
    assert b"\r" not in raw
    assert raw.decode("utf-8").splitlines() == bundle.mono_src
