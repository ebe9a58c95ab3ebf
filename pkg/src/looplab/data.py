"""Byte-level tokenizer and corpus handling."""

from __future__ import annotations

import hashlib
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

BOS, EOS, PAD = 256, 257, 258
VOCAB_SIZE = 259


def encode(text, bos=False, eos=False):
    """Token ids for a ``str`` (UTF-8) or ``bytes`` object."""
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    parts = ([np.array([BOS])] if bos else []) + [ids] + ([np.array([EOS])] if eos else [])
    return np.concatenate(parts) if len(parts) > 1 else ids


def decode(ids):
    """Bytes for ``ids``; special tokens are dropped."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise ValueError("token id outside the byte vocabulary")
    return ids[ids < 256].astype(np.uint8).tobytes()


def decode_text(ids):
    return decode(ids).decode("utf-8", errors="replace")


@dataclass
class Corpus:
    """A token stream split into train and validation parts.

    Documents are framed as ``BOS bytes EOS`` and concatenated. The last
    ``val_fraction`` of the stream is held out for validation.
    """

    tokens: np.ndarray
    doc_starts: np.ndarray
    val_fraction: float = 0.1

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if self.tokens.size < 4:
            raise ValueError("corpus is empty")
        cut = int(round(self.tokens.size * (1.0 - self.val_fraction)))
        self.train = self.tokens[:cut]
        self.val = self.tokens[cut:]

    @classmethod
    def from_documents(cls, docs, val_fraction=0.1):
        pieces, starts, pos = [], [], 0
        for doc in docs:
            ids = encode(doc, bos=True, eos=True)
            starts.append(pos)
            pieces.append(ids)
            pos += ids.size
        if not pieces:
            raise ValueError("corpus is empty")
        return cls(np.concatenate(pieces), np.array(starts, dtype=np.int64), val_fraction)

    @classmethod
    def from_path(cls, path, val_fraction=0.1):
        """A file is one document; a directory contributes every regular file, sorted."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"corpus path not found: {path}")
        files = [path] if path.is_file() else sorted(p for p in path.rglob("*") if p.is_file())
        return cls.from_documents([f.read_bytes() for f in files], val_fraction)

    def sha256(self):
        return hashlib.sha256(self.tokens.astype("<i8").tobytes()).hexdigest()

    def split(self, name):
        if name not in ("train", "val"):
            raise ValueError("split must be 'train' or 'val'")
        return self.train if name == "train" else self.val

    def sample_batch(self, batch_size, seq_len, rng, split="train"):
        """Random windows: inputs (batch, seq_len) and next-token targets."""
        data = self.split(split)
        if data.size < seq_len + 1:
            raise ValueError(f"{split} split shorter than one window of {seq_len + 1}")
        starts = rng.integers(0, data.size - seq_len, size=batch_size)
        idx = starts[:, None] + np.arange(seq_len + 1)[None, :]
        win = data[idx]
        return win[:, :-1], win[:, 1:]

    def eval_batches(self, batch_size, seq_len, max_batches=None, split="val"):
        """Deterministic non-overlapping windows over a split."""
        data = self.split(split)
        n_win = (data.size - 1) // seq_len
        if n_win < 1:
            raise ValueError(f"{split} split shorter than one window of {seq_len + 1}")
        starts = np.arange(n_win) * seq_len
        batches = []
        for b in range(0, n_win, batch_size):
            s = starts[b : b + batch_size]
            idx = s[:, None] + np.arange(seq_len + 1)[None, :]
            win = data[idx]
            batches.append((win[:, :-1], win[:, 1:]))
            if max_batches is not None and len(batches) >= max_batches:
                break
        return batches


def build_stdlib_corpus(out_path, target_bytes=2_000_000):
    """Concatenate the interpreter's own ``.py`` sources (sorted) into one file.

    Gives a reproducible code corpus of roughly ``target_bytes`` with no download.
    Returns the sha256 of the written bytes.
    """
    root = Path(os.path.dirname(os.__file__))
    chunks, total = [], 0
    for path in sorted(root.glob("*.py")):
        blob = path.read_bytes()
        chunks.append(blob)
        total += len(blob)
        if total >= target_bytes:
            break
    data = b"".join(chunks)[:target_bytes]
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def python_version_tag():
    return f"{sys.version_info.major}.{sys.version_info.minor}.{sys.version_info.micro}"
