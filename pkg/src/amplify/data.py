"""Corpus loading, tokenisation, batching, synthetic data and token-level noise."""
from __future__ import annotations

import hashlib
import json
import math
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

PAD, UNK, CLS = 0, 1, 2
RESERVED = ("<pad>", "<unk>", "<cls>")
_PUNCT = set(string.punctuation)

DELETE = "Delete"
SWAP = "Swap"


@dataclass
class Example:
    tokens: list[str]
    label: int


@dataclass
class Batch:
    token_ids: np.ndarray  # [l, L] int
    labels: np.ndarray  # [l] int
    pad_mask: np.ndarray  # [l, L] bool, True on real positions

    @property
    def size(self) -> int:
        return len(self.labels)

    def reordered(self, index_r) -> "Batch":
        index_r = np.asarray(index_r, dtype=np.intp)
        if index_r.shape != (self.size,):
            raise ValueError(f"reorder: index length {len(index_r)} vs batch size {self.size}")
        return Batch(self.token_ids[index_r], self.labels[index_r], self.pad_mask[index_r])


def tokenize(text: str) -> list[str]:
    tokens = []
    for chunk in text.lower().split():
        lead = []
        while chunk and chunk[0] in _PUNCT:
            lead.append(chunk[0])
            chunk = chunk[1:]
        trail = []
        while chunk and chunk[-1] in _PUNCT:
            trail.append(chunk[-1])
            chunk = chunk[:-1]
        tokens.extend(lead)
        if chunk:
            tokens.append(chunk)
        tokens.extend(reversed(trail))
    return tokens


@dataclass
class Vocab:
    itos: list[str] = field(default_factory=lambda: list(RESERVED))

    def __post_init__(self):
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(json.loads(Path(path).read_text()))


def build_vocab(corpus, min_count: int = 1) -> Vocab:
    """``corpus`` is an iterable of Examples or token lists; ids ordered by count desc then token."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter()
    for item in corpus:
        counts.update(item.tokens if isinstance(item, Example) else item)
    for tok in RESERVED:
        counts.pop(tok, None)
    kept = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    return Vocab(list(RESERVED) + kept)


def pad_batch(examples, vocab: Vocab, max_len: int, pad_to_longest: bool = False) -> Batch:
    """Truncate to ``max_len - 1`` tokens, prepend CLS and right-pad.

    Rows are padded to ``max_len`` unless ``pad_to_longest`` is set, in which
    case they are padded to the longest row of this batch.
    """
    if not examples:
        raise ValueError("pad_batch needs at least one example")
    rows = [[CLS] + vocab.encode(ex.tokens[: max_len - 1]) for ex in examples]
    width = max(map(len, rows)) if pad_to_longest else max_len
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, row in enumerate(rows):
        ids[i, : len(row)] = row
    mask = ids != PAD
    labels = np.array([ex.label for ex in examples], dtype=np.int64)
    return Batch(ids, labels, mask)


def load_corpus(path) -> list[Example]:
    """Read one JSON object per line with a string ``text`` and integer ``label``."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataError(f"{path}:{lineno}: expected an object")
            text, label = rec.get("text"), rec.get("label")
            if "text" not in rec or not isinstance(text, str):
                raise DataError(f"{path}:{lineno}: missing or non-string field 'text'")
            if "label" not in rec or not isinstance(label, int) or isinstance(label, bool):
                raise DataError(f"{path}:{lineno}: missing or non-integer field 'label'")
            out.append(Example(tokenize(text), label))
    return out


def save_corpus(examples, path) -> None:
    with open(path, "w") as fh:
        for ex in examples:
            fh.write(json.dumps({"text": " ".join(ex.tokens), "label": ex.label}) + "\n")


def check_labels(examples, n_classes: int) -> None:
    for i, ex in enumerate(examples):
        if not 0 <= ex.label < n_classes:
            raise DataError(f"example {i}: label {ex.label} outside [0, {n_classes})")


def dataset_hash(examples) -> str:
    h = hashlib.sha256()
    for ex in examples:
        h.update(json.dumps([ex.tokens, ex.label]).encode())
        h.update(b"\n")
    return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    n_classes: int = 2
    vocab_size: int = 200
    seq_len_range: tuple[int, int] = (8, 24)
    n_train: int = 2000
    n_test: int = 500
    signal_tokens_per_class: int = 5
    noise_rate: float = 0.05
    max_signal: int = 3


def signal_tokens(spec: SyntheticSpec) -> list[list[str]]:
    k = spec.signal_tokens_per_class
    return [[f"w{c * k + j}" for j in range(k)] for c in range(spec.n_classes)]


def gen_synthetic(spec: SyntheticSpec, seed: int) -> tuple[list[Example], list[Example]]:
    """Filler tokens plus 1..max_signal class-specific signal tokens per example.

    Label flips at ``noise_rate`` are applied to the train split only; the
    test split keeps its true labels.
    """
    k = spec.signal_tokens_per_class
    n_signal = spec.n_classes * k
    if k < 1 or spec.n_classes < 2:
        raise DataError("need >= 2 classes and >= 1 signal token per class")
    if spec.vocab_size <= n_signal:
        raise DataError(f"vocab_size={spec.vocab_size} too small for {n_signal} disjoint signal tokens plus filler")
    lo, hi = spec.seq_len_range
    if not 1 <= lo <= hi:
        raise DataError(f"bad seq_len_range {spec.seq_len_range}")
    if not 0.0 <= spec.noise_rate < 1.0:
        raise DataError("noise_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    signals = signal_tokens(spec)
    filler = [f"w{i}" for i in range(n_signal, spec.vocab_size)]

    def make(n):
        labels = rng.permutation(np.arange(n) % spec.n_classes)
        out = []
        for y in labels:
            length = int(rng.integers(lo, hi + 1))
            n_sig = int(rng.integers(1, min(spec.max_signal, length) + 1))
            toks = [filler[i] for i in rng.integers(0, len(filler), size=length)]
            pos = rng.choice(length, size=n_sig, replace=False)
            for p in pos:
                toks[p] = signals[y][int(rng.integers(0, k))]
            out.append(Example(toks, int(y)))
        return out

    train, test = make(spec.n_train), make(spec.n_test)
    for ex in train:
        if rng.random() < spec.noise_rate:
            other = int(rng.integers(0, spec.n_classes - 1))
            ex.label = other if other < ex.label else other + 1
    return train, test


def write_synthetic(spec: SyntheticSpec, seed: int, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train, test = gen_synthetic(spec, seed)
    save_corpus(train, out_dir / "train.jsonl")
    save_corpus(test, out_dir / "test.jsonl")
    meta = {"generator": "gen_synthetic", "spec": asdict(spec), "seed": seed,
            "train_hash": dataset_hash(train), "test_hash": dataset_hash(test)}
    text = json.dumps(meta, indent=2, sort_keys=True)
    (out_dir / "meta.json").write_text(text + "\n")
    return json.loads(text)


# --------------------------------------------------------------------------
# noise injection


@dataclass
class NoiseSpec:
    kind: str = DELETE
    proportion: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in (DELETE, SWAP):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if not 0.0 <= self.proportion < 1.0:
            raise ValueError(f"proportion must lie in [0, 1), got {self.proportion}")


def _count(p: float, n: float) -> int:
    return int(math.floor(p * n + 1e-9))


def perturb(examples, spec: NoiseSpec) -> list[Example]:
    """Token-level deletion or pairwise swapping within each example; labels untouched."""
    rng = np.random.default_rng(spec.seed)
    out = []
    for ex in examples:
        toks = list(ex.tokens)
        n = len(toks)
        if spec.kind == DELETE:
            k = _count(spec.proportion, n)
            if k:
                drop = set(rng.choice(n, size=k, replace=False).tolist())
                toks = [t for i, t in enumerate(toks) if i not in drop]
        else:
            m = _count(spec.proportion, n / 2)
            if m:
                pos = rng.choice(n, size=2 * m, replace=False)
                for a, b in pos.reshape(m, 2):
                    toks[a], toks[b] = toks[b], toks[a]
        out.append(Example(toks, ex.label))
    return out
