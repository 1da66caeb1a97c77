"""Shared data preparation: encode every view of an example once per run.

Training and evaluation both consume PreparedExample lists; the
recognition fader value is precomputed here because it is a constant
per (profile, response) pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corpus import (
    DialogueExample,
    EncodedSequence,
    Vocab,
    encode_for_decoder,
    encode_for_fader_prior,
    encode_for_posterior_zp,
    encode_for_prior_zp,
)
from .losses import TrainingBatch
from .metrics import EmbeddingTable, KeywordExtractor
from .model import pack, recognition_fader


@dataclass
class PreparedExample:
    example: DialogueExample
    prior: EncodedSequence
    posterior: EncodedSequence
    fader: EncodedSequence
    decoder: EncodedSequence
    alpha: float
    category: str | None


def prepare_examples(
    examples: list[DialogueExample],
    vocab: Vocab,
    extractor: KeywordExtractor,
    table: EmbeddingTable,
    window: int = 4,
) -> list[PreparedExample]:
    prepared = []
    for ex in examples:
        prepared.append(
            PreparedExample(
                example=ex,
                prior=encode_for_prior_zp(ex, vocab, window),
                posterior=encode_for_posterior_zp(ex, vocab),
                fader=encode_for_fader_prior(ex, vocab, window),
                decoder=encode_for_decoder(ex, vocab, window),
                alpha=recognition_fader(ex.profile, ex.response, extractor, table).alpha,
                category=ex.category,
            )
        )
    return prepared


def make_training_batch(prepared: list[PreparedExample], pad_id: int) -> TrainingBatch:
    return TrainingBatch(
        prior=pack([p.prior for p in prepared], pad_id),
        posterior=pack([p.posterior for p in prepared], pad_id),
        fader=pack([p.fader for p in prepared], pad_id),
        decoder=pack([p.decoder for p in prepared], pad_id),
        alphas=np.array([p.alpha for p in prepared], dtype=np.float64),
    )
