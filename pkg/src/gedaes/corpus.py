"""Essays, corpus files, vocabulary, pretrained embeddings and synthetic data.

Corpus file layout (UTF-8)::

    # id=essay-1 score=3.2
    I       c
    has     i
    a       c
    <blank line = sentence boundary>
    dog     c

``score`` is either an FCE exam grade (``"1.1"`` ... ``"5.3"``), an integer
1-20 used as-is, or ``0`` (the essay is dropped).  Unlabelled corpora omit the
score and the ``c``/``i`` column.  A missing word is annotated by labelling
the token that follows the gap as ``i``.
"""

from __future__ import annotations

import hashlib
import logging
import math
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

CORRECT, INCORRECT = 0, 1
UNK = "<unk>"
BOUNDARY = "</s>"
SCORE_MIN, SCORE_MAX = 1, 20

# interior rows 3.2 .. 5.2 continue in unit steps to the terminal 5.3 -> 20
EXAM_SCORE_MAP: dict[str, int] = {
    "1.1": 1, "1.2": 4, "1.3": 8,
    "2.1": 9, "2.2": 10, "2.3": 11,
    "3.1": 12, "3.2": 13, "3.3": 14,
    "4.1": 15, "4.2": 16, "4.3": 17,
    "5.1": 18, "5.2": 19, "5.3": 20,
}


class CorpusFormatError(ValueError):
    pass


def map_exam_score(exam_score: str) -> int | None:
    """Essay score on the 1-20 scale for an FCE exam grade; ``None`` for a removed (0) essay."""
    grade = exam_score.strip()
    if grade in ("0", "0.0"):
        return None
    try:
        return EXAM_SCORE_MAP[grade]
    except KeyError:
        raise CorpusFormatError(f"unknown exam grade {exam_score!r}") from None


@dataclass
class Essay:
    id: str
    tokens: list[str]
    labels: list[int] | None = None
    gold_score: int | None = None

    def __post_init__(self):
        if not self.tokens:
            raise CorpusFormatError(f"essay {self.id!r} has no tokens")
        if self.labels is not None:
            if len(self.labels) != len(self.tokens):
                raise CorpusFormatError(
                    f"essay {self.id!r}: {len(self.tokens)} tokens but {len(self.labels)} labels"
                )
            if any(lab not in (CORRECT, INCORRECT) for lab in self.labels):
                raise CorpusFormatError(f"essay {self.id!r}: labels must be 0/1")
        if self.gold_score is not None and not SCORE_MIN <= self.gold_score <= SCORE_MAX:
            raise CorpusFormatError(f"essay {self.id!r}: score {self.gold_score} outside 1-20")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None and self.gold_score is not None

    @property
    def error_fraction(self) -> float:
        return sum(self.labels) / len(self.labels)


def _parse_score(raw: str, lineno: int) -> int | None:
    if "." in raw:
        return map_exam_score(raw)
    try:
        value = int(raw)
    except ValueError:
        raise CorpusFormatError(f"line {lineno}: unreadable score {raw!r}") from None
    if value == 0:
        return None
    if not SCORE_MIN <= value <= SCORE_MAX:
        raise CorpusFormatError(f"line {lineno}: score {value} outside 1-20")
    return value


def _parse_header(line: str, lineno: int) -> tuple[str, str | None]:
    fields = {}
    for part in line[1:].split():
        key, sep, value = part.partition("=")
        if not sep:
            raise CorpusFormatError(f"line {lineno}: malformed header field {part!r}")
        fields[key] = value
    if "id" not in fields:
        raise CorpusFormatError(f"line {lineno}: header without id")
    return fields["id"], fields.get("score")


@dataclass
class _Draft:
    id: str
    score: str | None
    lineno: int
    tokens: list[str] = field(default_factory=list)
    labels: list[int] = field(default_factory=list)
    unlabeled: int = 0

    def finish(self) -> Essay | None:
        if self.labels and self.unlabeled:
            raise CorpusFormatError(
                f"line {self.lineno}: essay {self.id!r} has {len(self.tokens)} tokens "
                f"but {len(self.labels)} labels"
            )
        if not self.tokens:
            raise CorpusFormatError(f"line {self.lineno}: essay {self.id!r} has no tokens")
        score = _parse_score(self.score, self.lineno) if self.score is not None else None
        if self.score is not None and score is None:
            log.info("dropping essay %s with exam score 0", self.id)
            return None
        return Essay(self.id, self.tokens, self.labels if self.labels else None, score)


def parse_corpus_text(text: str) -> list[Essay]:
    essays: list[Essay] = []
    draft: _Draft | None = None
    pending_boundary = False

    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith("#") and "\t" not in line:
            if draft is not None and (essay := draft.finish()) is not None:
                essays.append(essay)
            draft = _Draft(*_parse_header(line, lineno), lineno)
            pending_boundary = False
            continue
        if not line.strip():
            pending_boundary = True
            continue
        if draft is None:
            raise CorpusFormatError(f"line {lineno}: token before any essay header")
        token, sep, label = line.rpartition("\t")
        if not sep:
            token, label = line, None
        if not token or any(ch.isspace() for ch in token):
            raise CorpusFormatError(f"line {lineno}: malformed token line {line!r}")
        if label is not None and label not in ("c", "i"):
            raise CorpusFormatError(f"line {lineno}: label {label!r} is not 'c' or 'i'")
        if pending_boundary and draft.tokens:
            draft.tokens.append(BOUNDARY)
            if label is None:
                draft.unlabeled += 1
            else:
                draft.labels.append(CORRECT)
        pending_boundary = False
        draft.tokens.append(token)
        if label is None:
            draft.unlabeled += 1
        else:
            draft.labels.append(INCORRECT if label == "i" else CORRECT)
    if draft is not None and (essay := draft.finish()) is not None:
        essays.append(essay)
    return essays


def parse_corpus(path) -> list[Essay]:
    """Read a corpus file; essays with exam score 0 are silently dropped."""
    return parse_corpus_text(Path(path).read_text(encoding="utf-8"))


def serialize_corpus(essays: Iterable[Essay]) -> str:
    out = []
    for essay in essays:
        header = f"# id={essay.id}"
        if essay.gold_score is not None:
            header += f" score={essay.gold_score}"
        out.append(header)
        for k, token in enumerate(essay.tokens):
            if token == BOUNDARY:
                out.append("")
                continue
            if essay.labels is None:
                out.append(token)
            else:
                out.append(f"{token}\t{'i' if essay.labels[k] else 'c'}")
    return "\n".join(out) + ("\n" if out else "")


def write_corpus(path, essays: Iterable[Essay]) -> None:
    Path(path).write_text(serialize_corpus(essays), encoding="utf-8")


# --- vocabulary ---------------------------------------------------------------


@dataclass
class Vocabulary:
    """Token <-> id map; id 0 is UNK, id 1 the sentence-boundary marker."""

    itos: list[str]
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self):
        if self.itos[:2] != [UNK, BOUNDARY]:
            raise ValueError("vocabulary must start with the reserved UNK and boundary tokens")
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.stoi.get(t, 0) for t in tokens], dtype=np.int64)

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


def build_vocabulary(essays: Sequence[Essay], min_count: int = 1) -> Vocabulary:
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = Counter(t for essay in essays for t in essay.tokens if t not in (UNK, BOUNDARY))
    if not essays or not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = sorted((tok for tok, n in counts.items() if n >= min_count), key=lambda t: (-counts[t], t))
    return Vocabulary([UNK, BOUNDARY] + kept)


# --- embeddings -----------------------------------------------------------------


@dataclass
class EmbeddingMatrix:
    matrix: np.ndarray
    pretrained: np.ndarray  # bool per row

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def load_embeddings(path, vocab: Vocabulary, dim: int = 300, seed: int = 0) -> EmbeddingMatrix:
    """Text-format embeddings (``token v1 .. vd`` per line) aligned to ``vocab``.

    Rows absent from the file are drawn uniformly from [-0.05, 0.05].  A leading
    word2vec-style ``count dim`` header line is skipped.
    """
    rng = np.random.default_rng(seed)
    matrix = rng.uniform(-0.05, 0.05, size=(len(vocab), dim))
    found = np.zeros(len(vocab), dtype=bool)
    file_dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip("\n").split(" ")
            parts = [p for p in parts if p]
            if not parts:
                continue
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            token, values = parts[0], parts[1:]
            if file_dim is None:
                file_dim = len(values)
                if file_dim != dim:
                    raise ValueError(f"{path}: embedding dim {file_dim} but model expects {dim}")
            elif len(values) != file_dim:
                raise ValueError(
                    f"{path}:{lineno}: {len(values)} values, expected {file_dim}"
                )
            idx = vocab.stoi.get(token)
            if idx is not None:
                matrix[idx] = np.array(values, dtype=np.float64)
                found[idx] = True
    if file_dim is None:
        log.warning("embedding file %s is empty; all rows randomly initialised", path)
    return EmbeddingMatrix(matrix, found)


# --- synthetic corpus -------------------------------------------------------------


@dataclass
class SyntheticConfig:
    vocab_size: int = 500
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    min_len: int = 20
    max_len: int = 60
    error_rate: tuple[float, float] = (0.0, 0.5)
    score_noise: float = 1.0
    zipf_exponent: float = 1.0
    variants_per_word: int = 3
    # 0 = context-free unigram model; K > 0 = words split into K classes
    # visited in a fixed cycle, so wrong-class substitutions are detectable
    # only from context
    word_classes: int = 0
    misspelling_share: float = 1.0  # share of errors that are misspellings
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.error_rate
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError(f"error_rate range {self.error_rate} must satisfy 0 <= lo <= hi <= 1")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if self.vocab_size < 2 or self.variants_per_word < 1:
            raise ValueError("vocab_size >= 2 and variants_per_word >= 1 required")
        if self.score_noise < 0:
            raise ValueError("score_noise must be nonnegative")
        if not 0.0 <= self.misspelling_share <= 1.0:
            raise ValueError("misspelling_share must lie in [0, 1]")
        if self.word_classes == 1 or self.word_classes < 0 or self.word_classes > self.vocab_size:
            raise ValueError("word_classes must be 0 or between 2 and vocab_size")
        if self.misspelling_share < 1.0 and not self.word_classes:
            raise ValueError("wrong-class substitutions need word_classes > 0")


def _make_words(n: int, rng: np.random.Generator) -> list[str]:
    consonants, vowels = "bcdfghklmnprstvz", "aeiou"
    words: list[str] = []
    seen = set()
    while len(words) < n:
        syllables = rng.integers(2, 4)
        w = "".join(consonants[rng.integers(16)] + vowels[rng.integers(5)] for _ in range(syllables))
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def _misspellings(word: str, k: int, rng: np.random.Generator, taken: set) -> list[str]:
    out: list[str] = []
    letters = string.ascii_lowercase
    while len(out) < k:
        pos = int(rng.integers(len(word)))
        op = rng.integers(3)
        if op == 0:  # doubled letter
            cand = word[: pos + 1] + word[pos] + word[pos + 1 :]
        elif op == 1 and len(word) > 3:  # dropped letter
            cand = word[:pos] + word[pos + 1 :]
        else:  # substituted letter
            cand = word[:pos] + letters[rng.integers(26)] + word[pos + 1 :]
        if cand not in taken:
            taken.add(cand)
            out.append(cand)
    return out


def generate_synthetic(config: SyntheticConfig) -> tuple[list[Essay], list[Essay], list[Essay]]:
    """Seeded train/dev/test corpora whose scores fall with error density.

    Tokens come from a Zipfian unigram model (or, with ``word_classes`` > 0,
    from Zipfian within-class distributions along a cyclic class chain).  Each
    essay draws an error rate r from the configured range and corrupts every
    token independently with probability r, labelling it ``i``.  A corruption
    is a misspelling of the word, or (with probability
    ``1 - misspelling_share``) a correctly spelled word from a wrong class.
    The gold score is ``round(20 - 19 * f)`` for the realised error fraction
    f, plus rounded Gaussian noise, clipped to 1-20.
    """
    rng = np.random.default_rng(config.seed)
    words = _make_words(config.vocab_size, rng)
    taken = set(words)
    variants = [_misspellings(w, config.variants_per_word, rng, taken) for w in words]
    k = config.word_classes or 1
    # class j holds words j, j + k, j + 2k, ...; rank order keeps Zipf inside each class
    members = [np.arange(j, config.vocab_size, k) for j in range(k)]
    probs = []
    for m in members:
        p = 1.0 / np.arange(1, m.size + 1) ** config.zipf_exponent
        probs.append(p / p.sum())
    lo, hi = config.error_rate

    def draw(cls: int) -> int:
        return int(members[cls][rng.choice(members[cls].size, p=probs[cls])])

    def essay(ident: str) -> Essay:
        n = int(rng.integers(config.min_len, config.max_len + 1))
        rate = float(rng.uniform(lo, hi)) if hi > lo else lo
        start = int(rng.integers(k))
        tokens, labels = [], []
        for t in range(n):
            cls = (start + t) % k
            w = draw(cls)
            if rng.random() >= rate:
                tokens.append(words[w])
                labels.append(CORRECT)
                continue
            if rng.random() < config.misspelling_share:
                tokens.append(variants[w][int(rng.integers(config.variants_per_word))])
            else:
                wrong = (cls + 1 + int(rng.integers(k - 1))) % k
                tokens.append(words[draw(wrong)])
            labels.append(INCORRECT)
        frac = sum(labels) / n
        noise = math.floor(rng.normal(0.0, config.score_noise) + 0.5) if config.score_noise else 0
        score = math.floor(20 - 19 * frac + 0.5) + noise
        return Essay(ident, tokens, labels, int(min(SCORE_MAX, max(SCORE_MIN, score))))

    splits = []
    for name, count in (("train", config.n_train), ("dev", config.n_dev), ("test", config.n_test)):
        splits.append([essay(f"{name}-{j:05d}") for j in range(count)])
    return splits[0], splits[1], splits[2]
