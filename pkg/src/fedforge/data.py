"""Byte-level corpus handling: tokenization, IID equal-size sharding with a
held-out validation slice, deterministic wrapping batch iteration, and a
synthetic low-entropy corpus generator for desk-scale runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .params import ParamError


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class TokenizedCorpus:
    """A token stream chopped into fixed-length samples; the remainder is dropped."""

    tokens: np.ndarray
    vocab_size: int
    sequence_len: int

    def __post_init__(self):
        if self.sequence_len < 2:
            raise DataError(f"sequence_len must be >= 2, got {self.sequence_len}")
        if self.tokens.ndim != 1:
            raise DataError("token stream must be 1-D")
        if self.tokens.size and int(self.tokens.max()) >= self.vocab_size:
            raise DataError(
                f"token id {int(self.tokens.max())} >= vocab_size {self.vocab_size}"
            )

    @property
    def n_samples(self) -> int:
        return self.tokens.size // self.sequence_len

    def samples(self, indices: np.ndarray) -> np.ndarray:
        """Gather samples by index into an (len(indices), T) matrix."""
        t = self.sequence_len
        usable = self.tokens[: self.n_samples * t].reshape(self.n_samples, t)
        return usable[indices]


def tokenize_bytes(text: bytes, sequence_len: int, vocab_size: int = 256) -> TokenizedCorpus:
    """Byte-level tokenization: ids are the raw byte values."""
    if len(text) == 0:
        raise DataError("cannot tokenize empty text")
    if len(text) < sequence_len:
        raise DataError(
            f"text of {len(text)} bytes is shorter than one sample of {sequence_len}"
        )
    tokens = np.frombuffer(text, dtype=np.uint8).astype(np.uint16)
    return TokenizedCorpus(tokens, vocab_size, sequence_len)


def detokenize(corpus: TokenizedCorpus) -> bytes:
    """Inverse of tokenize_bytes up to the dropped remainder."""
    usable = corpus.n_samples * corpus.sequence_len
    return corpus.tokens[:usable].astype(np.uint8).tobytes()


@dataclass(frozen=True)
class ShardSpec:
    shard_id: int
    indices: np.ndarray

    @property
    def n_k(self) -> int:
        return int(self.indices.size)


@dataclass(frozen=True)
class DataSplit:
    """Validation indices plus client shards; all index sets are disjoint."""

    validation: np.ndarray
    shards: list[ShardSpec] = field(default_factory=list)


def split_corpus(
    corpus: TokenizedCorpus, n_clients: int, seed: int, validation_fraction: float = 0.0
) -> DataSplit:
    """Seeded permutation split: a validation slice carved first, the rest cut
    into n_clients equal blocks (remainder dropped)."""
    if n_clients == 0:
        raise DataError("n_clients must be >= 1")
    if not 0 <= validation_fraction < 1:
        raise DataError(f"validation_fraction must be in [0, 1), got {validation_fraction}")
    n = corpus.n_samples
    if n < n_clients:
        raise DataError(f"{n} samples cannot fill {n_clients} shards")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    n_val = int(validation_fraction * n)
    val = np.sort(perm[:n_val])
    rest = perm[n_val:]
    per_shard = rest.size // n_clients
    if per_shard == 0:
        raise DataError("validation slice leaves no training samples for the shards")
    shards = [
        ShardSpec(k, np.sort(rest[k * per_shard : (k + 1) * per_shard]))
        for k in range(n_clients)
    ]
    return DataSplit(val, shards)


def partition_iid(corpus: TokenizedCorpus, n_clients: int, seed: int) -> list[ShardSpec]:
    """Equal-size IID shards over the whole corpus (no validation slice)."""
    return split_corpus(corpus, n_clients, seed).shards


def shard_assignment_json(split: DataSplit) -> str:
    """Audit dump: {shard_id: [sample indices]}, plus the validation slice."""
    payload = {str(s.shard_id): s.indices.tolist() for s in split.shards}
    payload["validation"] = split.validation.tolist()
    return json.dumps(payload, sort_keys=True)


class BatchIterator:
    """Deterministic wrapping iterator over one shard.

    Walks a seeded fixed permutation of the shard's samples cyclically. The
    stream position is fully described by an absolute sample cursor, so a
    worker can reposition to any round boundary with seek().
    """

    def __init__(self, corpus: TokenizedCorpus, shard: ShardSpec, batch_size: int, seed: int):
        if shard.n_k == 0:
            raise DataError(f"shard {shard.shard_id} is empty")
        if batch_size < 1:
            raise DataError(f"batch_size must be >= 1, got {batch_size}")
        self.corpus = corpus
        self.shard = shard
        self.batch_size = batch_size
        self.seed = seed
        order = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, shard.shard_id]).permutation(
            shard.n_k
        )
        self._order = shard.indices[order]
        self.cursor = 0

    def seek(self, cursor: int) -> None:
        if cursor < 0:
            raise DataError(f"cursor must be >= 0, got {cursor}")
        self.cursor = cursor

    def next_batch(self) -> tuple[np.ndarray, np.ndarray]:
        """(inputs B x T, targets B x T) with targets[i, t] == inputs[i, t+1]
        for t < T-1; the final target column wraps to the row's first token and
        is never scored by the model's internal shift."""
        n = self._order.size
        rows = self._order[(self.cursor + np.arange(self.batch_size)) % n]
        self.cursor += self.batch_size
        inputs = self.corpus.samples(rows)
        targets = np.roll(inputs, -1, axis=1)
        return inputs, targets


_MARKOV_ALPHABET = np.arange(33, 97, dtype=np.uint8)  # 64 printable ASCII symbols
_PHRASES = [
    b"the server averages the client updates ",
    b"every round resets the local optimizer ",
    b"gradients are clipped to unit norm ",
    b"perplexity falls as the clients agree ",
    b"momentum smooths the aggregated deltas ",
    b"equally sized shards keep weights uniform ",
]


def synth_corpus(seed: int, n_bytes: int, structure: str = "markov") -> bytes:
    """Deterministic pseudo-text with learnable low-entropy structure.

    markov: order-1 chain over 64 printable symbols, 4 successors per symbol
    with skewed probabilities (entropy rate well below ln 64).
    repeated_phrases: a seeded stream of short fixed phrases.
    """
    if n_bytes < 1:
        raise DataError(f"n_bytes must be >= 1, got {n_bytes}")
    rng = np.random.default_rng(seed)
    if structure == "repeated_phrases":
        picks = rng.integers(0, len(_PHRASES), size=n_bytes // 8 + len(_PHRASES))
        blob = b"".join(_PHRASES[i] for i in picks)
        return blob[:n_bytes]
    if structure != "markov":
        raise DataError(f"unknown corpus structure {structure!r}")
    n_sym = _MARKOV_ALPHABET.size
    successors = np.empty((n_sym, 4), dtype=np.int64)
    for s in range(n_sym):
        successors[s] = rng.choice(n_sym, size=4, replace=False)
    cum = np.cumsum([0.55, 0.25, 0.15, 0.05])
    choices = np.searchsorted(cum, rng.random(n_bytes), side="left").tolist()
    succ = successors.tolist()
    state = int(rng.integers(0, n_sym))
    states = []
    for c in choices:
        states.append(state)
        state = succ[state][c]
    return _MARKOV_ALPHABET[np.array(states, dtype=np.int64)].tobytes()
