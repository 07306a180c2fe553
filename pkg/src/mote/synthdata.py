"""Synthetic two-modality sequence task.

Each example is ``visual span | instruction | answer``. The visual span is a
shuffled bag of ``k`` distinct symbols with distinct counts. The instruction
names a query kind and a rank; the answer names the symbol holding that rank
by count, its count, or both, followed by EOS. Answering requires attending
from the text back into the visual span.

Vocabulary layout (contiguous ranges)::

    [0, n_specials)                specials: PAD, BOS, SEP, EOS
    [n_specials, +visual_size)     visual alphabet; symbol s is token n_specials + s
    [text_start, vocab_size)       text alphabet: query words, ranks, digits, names
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidInputError

PAD, BOS, SEP, EOS = 0, 1, 2, 3
QUERIES = ("which", "count", "both")
VISUAL, TEXT = "visual", "text"


@dataclass(frozen=True)
class TaskSpec:
    vocab_size: int = 256
    n_specials: int = 4
    visual_size: int = 64
    n_symbols: int = 64
    k: int = 4
    visual_len: int = 32
    instr_len: int = 4
    rule: str = "rank_by_count"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.rule != "rank_by_count":
            raise ConfigError(f"unknown rule {self.rule!r}")
        if self.n_symbols > self.visual_size:
            raise ConfigError("n_symbols cannot exceed the visual alphabet")
        if not 1 <= self.k <= self.n_symbols:
            raise ConfigError("k must be in [1, n_symbols]")
        if self.k * (self.k + 1) // 2 > self.visual_len:
            raise ConfigError("visual span too short for k distinct counts")
        if self.instr_len != 4:
            raise ConfigError("instruction span is fixed at 4 tokens")
        if self.text_start + self.text_size_needed > self.vocab_size:
            raise ConfigError("vocabulary too small for the text alphabet")

    # token id helpers
    @property
    def text_start(self) -> int:
        return self.n_specials + self.visual_size

    @property
    def text_size_needed(self) -> int:
        return 2 + len(QUERIES) + self.k + 10 + self.n_symbols

    @property
    def q_token(self) -> int:
        return self.text_start

    @property
    def qmark_token(self) -> int:
        return self.text_start + 1

    def query_token(self, q: int) -> int:
        return self.text_start + 2 + q

    def rank_token(self, r: int) -> int:
        return self.text_start + 2 + len(QUERIES) + r

    def digit_token(self, d: int) -> int:
        return self.text_start + 2 + len(QUERIES) + self.k + d

    def name_token(self, s: int) -> int:
        return self.text_start + 2 + len(QUERIES) + self.k + 10 + s

    def visual_token(self, s: int) -> int:
        return self.n_specials + s

    def visual_ids(self) -> range:
        return range(self.n_specials, self.text_start)

    def text_ids(self) -> range:
        return range(self.text_start, self.vocab_size)

    @property
    def max_len(self) -> int:
        # answer: name + 2 digits + EOS at most
        return self.visual_len + self.instr_len + 4

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BatchExample:
    """One token sequence split into visual, instruction and answer spans."""

    tokens: np.ndarray
    visual_end: int
    instr_end: int
    example_id: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        if not 0 <= self.visual_end <= self.instr_end <= len(self.tokens):
            raise InvalidInputError("span markers must be ordered within the sequence")

    @property
    def answer(self) -> np.ndarray:
        return self.tokens[self.instr_end :]

    @property
    def loss_mask(self) -> np.ndarray:
        m = np.zeros(len(self.tokens), dtype=bool)
        m[self.instr_end :] = True
        return m

    @property
    def modality(self) -> np.ndarray:
        """Per-token tags: True for visual tokens."""
        m = np.zeros(len(self.tokens), dtype=bool)
        m[: self.visual_end] = True
        return m


def _digits(n: int) -> list[int]:
    return [int(c) for c in str(n)]


def _distinct_counts(rng: np.random.Generator, k: int, total: int) -> list[int]:
    while True:
        cuts = np.sort(rng.choice(np.arange(1, total), size=k - 1, replace=False)) if k > 1 else np.array([], int)
        counts = np.diff(np.concatenate([[0], cuts, [total]])).tolist()
        if len(set(counts)) == k:
            return counts


def answer_for(spec: TaskSpec, visual: np.ndarray, query: int, rank: int) -> list[int]:
    """Recompute the answer tokens from the visual span alone."""
    symbols, counts = np.unique(visual - spec.n_specials, return_counts=True)
    order = sorted(zip(counts.tolist(), symbols.tolist()), key=lambda cs: (-cs[0], cs[1]))
    count, sym = order[rank]
    name = [spec.name_token(sym)]
    digits = [spec.digit_token(d) for d in _digits(count)]
    body = {"which": name, "count": digits, "both": name + digits}[QUERIES[query]]
    return body + [EOS]


def _make_example(spec: TaskSpec, rng: np.random.Generator, example_id: int) -> BatchExample:
    syms = rng.choice(spec.n_symbols, size=spec.k, replace=False)
    counts = _distinct_counts(rng, spec.k, spec.visual_len)
    visual = np.repeat(syms, counts) + spec.n_specials
    rng.shuffle(visual)
    query = int(rng.integers(len(QUERIES)))
    rank = int(rng.integers(spec.k))
    instr = [spec.q_token, spec.query_token(query), spec.rank_token(rank), spec.qmark_token]
    ans = answer_for(spec, visual, query, rank)
    tokens = np.concatenate([visual, instr, ans])
    return BatchExample(
        tokens=tokens,
        visual_end=spec.visual_len,
        instr_end=spec.visual_len + spec.instr_len,
        example_id=example_id,
        meta={"query": query, "rank": rank},
    )


def gen_batch(spec: TaskSpec, n: int, seed: int | None = None, start_id: int = 0) -> list[BatchExample]:
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    return [_make_example(spec, rng, start_id + i) for i in range(n)]


def _digest(ex: BatchExample) -> bytes:
    return hashlib.sha1(ex.tokens.astype("<i4").tobytes()).digest()


def split(spec: TaskSpec, train_n: int, eval_n: int, max_rounds: int = 100) -> tuple[list[BatchExample], list[BatchExample]]:
    """Train and eval sets from independent streams with no shared sequence.

    Eval examples colliding with a training sequence (or each other) are
    regenerated from the eval stream.
    """
    train_ss, eval_ss = np.random.SeedSequence(spec.seed).spawn(2)
    train_rng = np.random.default_rng(train_ss)
    eval_rng = np.random.default_rng(eval_ss)
    train = [_make_example(spec, train_rng, i) for i in range(train_n)]
    seen = {_digest(ex) for ex in train}
    evals: list[BatchExample] = []
    rounds = 0
    while len(evals) < eval_n:
        ex = _make_example(spec, eval_rng, train_n + len(evals))
        h = _digest(ex)
        if h in seen:
            rounds += 1
            if rounds > max_rounds * max(eval_n, 1):
                raise InvalidInputError("could not draw enough distinct eval sequences")
            continue
        seen.add(h)
        evals.append(ex)
    return train, evals


def collate(batch: list[BatchExample], pad_to: int | None = None) -> dict[str, np.ndarray]:
    """Right-pad a list of examples into arrays ``tokens``, ``loss_mask``, ``valid``, ``visual``."""
    t = max(len(ex.tokens) for ex in batch)
    if pad_to is not None:
        t = max(t, pad_to)
    out = {
        "tokens": np.full((len(batch), t), PAD, dtype=np.int64),
        "loss_mask": np.zeros((len(batch), t), dtype=bool),
        "valid": np.zeros((len(batch), t), dtype=bool),
        "visual": np.zeros((len(batch), t), dtype=bool),
        "example_id": np.array([ex.example_id for ex in batch], dtype=np.int64),
    }
    for i, ex in enumerate(batch):
        n = len(ex.tokens)
        out["tokens"][i, :n] = ex.tokens
        out["loss_mask"][i, :n] = ex.loss_mask
        out["valid"][i, :n] = True
        out["visual"][i, :n] = ex.modality
    return out


# --- dataset files: length-prefixed binary + JSON sidecar ------------------


def save_dataset(examples: list[BatchExample], path, spec: TaskSpec | None = None) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        for ex in examples:
            f.write(struct.pack("<I", len(ex.tokens)))
            f.write(ex.tokens.astype("<u2").tobytes())
    sidecar = {
        "format": "mote-dataset/1",
        "count": len(examples),
        "task": spec.to_dict() if spec else None,
        "examples": [
            {"example_id": ex.example_id, "visual_end": ex.visual_end, "instr_end": ex.instr_end, "meta": ex.meta}
            for ex in examples
        ],
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1))


def load_dataset(path) -> list[BatchExample]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    buf = path.read_bytes()
    out, off = [], 0
    for info in sidecar["examples"]:
        if off + 4 > len(buf):
            raise InvalidInputError(f"dataset {path} is truncated")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        if off + 2 * n > len(buf):
            raise InvalidInputError(f"dataset {path} is truncated")
        tokens = np.frombuffer(buf, dtype="<u2", count=n, offset=off).astype(np.int64)
        off += 2 * n
        out.append(BatchExample(tokens, info["visual_end"], info["instr_end"], info["example_id"], info["meta"]))
    if off != len(buf) or len(out) != sidecar["count"]:
        raise InvalidInputError(f"dataset {path} does not match its sidecar")
    return out
