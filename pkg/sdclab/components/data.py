#!/usr/bin/env python3
"""
Synthetic token stream: seeded uniform token ids standing in for a corpus.
"""

import logging
from typing import Tuple

import numpy as np

from .tensor import Rng

logger = logging.getLogger(__name__)


class SyntheticTokenStream:
    """
    Random-access token batches keyed by (step, accum).

    Each batch holds MBS rows of L+1 tokens; inputs are the first L tokens and
    labels the last L (next-token targets). Different data ranks draw from
    different streams, so data-parallel replicas see different microbatches.
    """

    def __init__(self, seed: int, micro_batch: int, seq_len: int, vocab: int, data_rank: int = 0):
        self.seed = seed
        self.micro_batch = micro_batch
        self.seq_len = seq_len
        self.vocab = vocab
        self.data_rank = data_rank
        self._rng = Rng.for_stream(seed, "data", data_rank)

    @classmethod
    def for_model(cls, config, seed: int, data_rank: int = 0) -> "SyntheticTokenStream":
        return cls(seed, config.micro_batch, config.seq_len, config.vocab, data_rank)

    def batch(self, step: int, accum: int) -> Tuple[np.ndarray, np.ndarray]:
        tokens = self._rng.generator(step, accum).integers(
            0, self.vocab, size=(self.micro_batch, self.seq_len + 1), dtype=np.int64
        )
        return tokens[:, :-1].copy(), tokens[:, 1:].copy()
