"""Desk-scale unsupervised domain adaptation for neural machine translation.

A synthetic cipher language pair with a ground-truth oracle stands in for
a real low-resource setting: pretrain a small encoder-decoder transformer
on out-of-domain parallel sentences, then adapt it to in-domain query
corpora using only monolingual text (denoising auto-encoding, iterative
cross-language back-translation, adversarial feature alignment), with
round-trip-BLEU early stopping, optional supervised fine-tuning, and MDS
feature analysis.
"""

from .corpus import (BundleSizes, CipherSpec, CorpusBundle, Language,
                     default_cipher, detect_language, generate_bundle,
                     load_bundle, oracle_translate, save_bundle)
from .evaluation import (BleuReport, corpus_bleu, early_stop_check,
                         evaluate_testset, round_trip_validate)
from .model import (ModelConfig, ModelParams, Translator, beam_decode,
                    encode_features, forward_logits, greedy_decode,
                    load_checkpoint, save_checkpoint)
from .noise import (NoiseKind, apply_dropchar, apply_mask, apply_shuffle,
                    sample_noise_kind)
from .tokenizer import TokenSequence, Vocabulary, build_vocab, decode, encode
from .training import (AdvConfig, TrainConfig, TrainReport, finetune,
                       grad_check, label_smoothed_ce,
                       one_time_backtranslate_train, pretrain_supervised,
                       train_adapt)

__version__ = "0.1.0"
