"""Word-level corpus handling: vocabulary, encoding, batching and BPTT windows.

Input files are UTF-8, whitespace tokenized, one sentence per line. Every line
ends with an ``<eos>`` token. PTB-style files already contain literal ``<unk>``.
"""
from __future__ import annotations

import hashlib
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

UNK = "<unk>"
EOS = "<eos>"


def _lines(text: str):
    return [line.split() for line in text.splitlines() if line.strip()]


@dataclass(frozen=True)
class Vocab:
    itos: tuple

    def __post_init__(self):
        if UNK not in self.itos or EOS not in self.itos:
            raise ValueError("vocabulary must contain <unk> and <eos>")
        if len(set(self.itos)) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "stoi", {t: i for i, t in enumerate(self.itos)})

    def __len__(self):
        return len(self.itos)

    @property
    def unk_id(self):
        return self.stoi[UNK]

    @property
    def eos_id(self):
        return self.stoi[EOS]

    @property
    def content_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def encode(self, text: str) -> np.ndarray:
        unk = self.unk_id
        ids = []
        for words in _lines(text):
            ids.extend(self.stoi.get(w, unk) for w in words)
            ids.append(self.eos_id)
        return np.array(ids, dtype=np.int64)

    def decode(self, ids) -> str:
        out, line = [], []
        for i in ids:
            tok = self.itos[int(i)]
            if tok == EOS:
                out.append(" ".join(line))
                line = []
            else:
                line.append(tok)
        if line:
            out.append(" ".join(line))
        return "\n".join(out) + ("\n" if out else "")

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.itos)

    def save(self, path):
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls(tuple(Path(path).read_text(encoding="utf-8").splitlines()))


def build_vocab(train_text: str) -> Vocab:
    """Vocabulary of the training text, ordered by frequency then lexicographically."""
    lines = _lines(train_text)
    if not lines:
        raise ValueError("empty corpus")
    counts = Counter(w for words in lines for w in words)
    counts[EOS] += len(lines)
    counts.setdefault(UNK, 0)
    itos = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocab(tuple(itos))


@dataclass(frozen=True)
class BatchedStream:
    data: np.ndarray  # (batch_size, stream_len)

    @property
    def batch_size(self):
        return self.data.shape[0]

    @property
    def stream_len(self):
        return self.data.shape[1]

    @property
    def n_targets(self):
        return self.batch_size * max(self.stream_len - 1, 0)


def batchify(ids, batch_size: int) -> BatchedStream:
    ids = np.asarray(ids, dtype=np.int64)
    if batch_size < 1 or len(ids) < batch_size:
        raise ValueError(f"corpus of {len(ids)} tokens is shorter than batch size {batch_size}")
    n = len(ids) // batch_size
    return BatchedStream(ids[: n * batch_size].reshape(batch_size, n))


def windows(stream: BatchedStream, bptt_len: int):
    """Yield ``(inputs, targets)`` pairs shaped ``(T, B)``; targets are inputs shifted by one."""
    data = stream.data
    L = data.shape[1]
    for i in range(0, L - 1, bptt_len):
        T = min(bptt_len, L - 1 - i)
        yield data[:, i:i + T].T, data[:, i + 1:i + 1 + T].T


@dataclass
class Corpus:
    vocab: Vocab
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray


def load_corpus(data_dir=None) -> Corpus:
    """Load ``train.txt``/``valid.txt``/``test.txt``; defaults to the bundled corpus."""
    if data_dir is None:
        root = resources.files("egru_lm") / "corpus"
        read = lambda name: (root / name).read_text(encoding="utf-8")
    else:
        d = Path(data_dir)
        for name in ("train.txt", "valid.txt", "test.txt"):
            if not (d / name).exists():
                raise FileNotFoundError(f"missing {d / name}")
        read = lambda name: (d / name).read_text(encoding="utf-8")
    train_text = read("train.txt")
    vocab = build_vocab(train_text)
    return Corpus(vocab, vocab.encode(train_text), vocab.encode(read("valid.txt")),
                  vocab.encode(read("test.txt")))


def unigram_perplexity(train_ids, eval_ids, vocab_size) -> float:
    """Perplexity of the add-one smoothed unigram model fit on ``train_ids``."""
    counts = np.bincount(train_ids, minlength=vocab_size).astype(np.float64) + 1.0
    logp = np.log(counts / counts.sum())
    return float(np.exp(-logp[eval_ids].mean()))
