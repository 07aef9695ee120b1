"""Synthetic symbol streams, one-hot encoding and (input, target) windowing.

Three repeating patterns over the alphabet A..O:

    set A: ABCDE             (5-symbol alphabet)
    set B: ABCDEFGHIJKLMNO   (15)
    set C: ABCADEAFGAHIAJK   (15; 'A' is followed by five different symbols)

Each set comes in four subsets: ``clear`` (the pattern itself), ``noise``
(clear + Gaussian noise on every vector component), ``abnormal`` (random
symbol substitutions) and ``abnoise`` (abnormal + noise). Clear and noise
form the normal class.
"""

from __future__ import annotations

import enum
import hashlib
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import make_rng, rand_gaussian

LETTERS = "ABCDEFGHIJKLMNO"
PATTERNS = {"A": "ABCDE", "B": "ABCDEFGHIJKLMNO", "C": "ABCADEAFGAHIAJK"}
ALPHABET_SIZES = {"A": 5, "B": 15, "C": 15}

DEFAULT_LENGTH = 3000
NOISE_SIGMA = 0.2
CORRUPTION_PROB = 0.3
FORMAT_VERSION = 1


class Subset(str, enum.Enum):
    CLEAR = "clear"
    NOISE = "noise"
    ABNORMAL = "abnormal"
    ABNOISE = "abnoise"

    @classmethod
    def parse(cls, s: "str | Subset") -> "Subset":
        if isinstance(s, Subset):
            return s
        try:
            return cls(str(s).strip().lower())
        except ValueError:
            raise ValueError(f"unknown subset {s!r} (expected clear, noise, abnormal or abnoise)") from None

    @property
    def noisy(self) -> bool:
        return self in (Subset.NOISE, Subset.ABNOISE)

    @property
    def abnormal(self) -> bool:
        return self in (Subset.ABNORMAL, Subset.ABNOISE)


SUBSETS = tuple(Subset)
NORMAL_SUBSETS = (Subset.CLEAR, Subset.NOISE)
ABNORMAL_SUBSETS = (Subset.ABNORMAL, Subset.ABNOISE)


def parse_set(set_id: str) -> str:
    s = str(set_id).strip().upper().removeprefix("SET-").removeprefix("SET")
    if s not in PATTERNS:
        raise ValueError(f"unknown dataset {set_id!r} (expected A, B or C)")
    return s


@dataclass(frozen=True)
class SymbolStream:
    symbols: np.ndarray
    set_id: str
    subset: Subset
    seed: int

    @property
    def length(self) -> int:
        return len(self.symbols)


@dataclass(frozen=True)
class Corpus:
    stream: SymbolStream
    vectors: np.ndarray  # (length, alphabet_size)
    noise_sigma: float = NOISE_SIGMA
    corruption_prob: float = CORRUPTION_PROB

    @property
    def alphabet_size(self) -> int:
        return self.vectors.shape[1]

    @property
    def length(self) -> int:
        return self.stream.length


@dataclass(frozen=True)
class SequencePair:
    X: np.ndarray  # (L, alphabet) corpus vectors
    Y: np.ndarray  # (L, alphabet) clean one-hot targets
    start_index: int
    offset: int


def encode_symbol(idx: int, alphabet_size: int) -> np.ndarray:
    if not 0 <= idx < alphabet_size:
        raise ValueError(f"symbol index {idx} outside alphabet of size {alphabet_size}")
    v = np.zeros(alphabet_size)
    v[idx] = 1.0
    return v


def decode_argmax(v: np.ndarray) -> int | np.ndarray:
    """Index of the largest entry (lowest index on ties); maps over leading axes."""
    out = np.argmax(v, axis=-1)
    return int(out) if np.ndim(out) == 0 else out


def one_hot(symbols: np.ndarray, alphabet_size: int) -> np.ndarray:
    return np.eye(alphabet_size)[np.asarray(symbols)]


def to_string(symbols) -> str:
    return "".join(LETTERS[int(k)] for k in symbols)


def pattern_symbols(set_id: str) -> np.ndarray:
    return np.array([LETTERS.index(ch) for ch in PATTERNS[parse_set(set_id)]])


def is_synchronous(pattern_len: int, L: int) -> bool:
    if pattern_len < 1 or L < 1:
        raise ValueError("pattern length and L must be >= 1")
    return L % pattern_len == 0 or pattern_len % L == 0


def _noisy_vectors(rng, symbols: np.ndarray, alphabet_size: int, sigma: float) -> np.ndarray:
    """One-hot rows plus Gaussian noise, redrawing any row whose argmax moved."""
    clean = one_hot(symbols, alphabet_size)
    out = clean + rand_gaussian(rng, clean.shape, sigma)
    bad = np.flatnonzero(np.argmax(out, axis=1) != symbols)
    while bad.size:
        out[bad] = clean[bad] + rand_gaussian(rng, (bad.size, alphabet_size), sigma)
        bad = bad[np.argmax(out[bad], axis=1) != symbols[bad]]
    return out


def build_corpus(
    set_id: str,
    subset: str | Subset,
    length: int = DEFAULT_LENGTH,
    seed: int = 0,
    noise_sigma: float = NOISE_SIGMA,
    corruption_prob: float = CORRUPTION_PROB,
) -> Corpus:
    """Generate one subset of one dataset.

    The random stream is forked per (set, subset), so e.g. the abnormal and
    abnoise subsets of one seed are independent draws. Noisy rows whose
    argmax would differ from their symbol are redrawn.
    """
    set_id = parse_set(set_id)
    subset = Subset.parse(subset)
    pattern = pattern_symbols(set_id)
    if length < len(pattern):
        raise ValueError(f"length {length} is shorter than the set-{set_id} pattern")
    A = ALPHABET_SIZES[set_id]
    rng = make_rng(seed, "ABC".index(set_id), SUBSETS.index(subset))

    symbols = np.resize(pattern, length)
    if subset.abnormal:
        hit = rng.random(length) < corruption_prob
        draws = rng.integers(0, A, size=length)
        symbols = np.where(hit, draws, symbols)
    if subset.noisy:
        vectors = _noisy_vectors(rng, symbols, A, noise_sigma)
    else:
        vectors = one_hot(symbols, A)
    stream = SymbolStream(symbols, set_id, subset, int(seed))
    return Corpus(stream, vectors, noise_sigma, corruption_prob)


def make_windows(c: Corpus, L: int, stride: int, offset: int) -> list[SequencePair]:
    """Windows starting at ``k * stride``; targets are the clean symbols ``offset`` later."""
    if L < 1 or stride < 1 or offset < 0:
        raise ValueError("L and stride must be >= 1 and offset >= 0")
    n = c.length
    if L + offset > n:
        warnings.warn(f"window L={L} with offset {offset} does not fit a stream of {n}")
        return []
    count = (n - L - offset) // stride + 1
    A = c.alphabet_size
    pairs = []
    for k in range(count):
        s = k * stride
        X = c.vectors[s : s + L]
        Y = one_hot(c.stream.symbols[s + offset : s + offset + L], A)
        pairs.append(SequencePair(X, Y, s, offset))
    return pairs


def stack_windows(pairs: list[SequencePair]) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``(X, Y)`` of shape (n, L, alphabet)."""
    if not pairs:
        raise ValueError("no windows to stack")
    return np.stack([p.X for p in pairs]), np.stack([p.Y for p in pairs])


# -- file format ---------------------------------------------------------


def corpus_metadata(c: Corpus) -> dict[str, str]:
    meta = {
        "format_version": str(FORMAT_VERSION),
        "set": c.stream.set_id,
        "subset": c.stream.subset.value,
        "seed": str(c.stream.seed),
        "length": str(c.length),
        "alphabet_size": str(c.alphabet_size),
        "noise_sigma": repr(float(c.noise_sigma)),
        "corruption_prob": repr(float(c.corruption_prob)),
    }
    meta["config_hash"] = hashlib.sha256(repr(sorted(meta.items())).encode()).hexdigest()[:16]
    return meta


def corpus_filenames(set_id: str, subset: str | Subset, seed: int) -> tuple[str, str]:
    stem = f"set-{parse_set(set_id)}_{Subset.parse(subset).value}_seed{seed}"
    return stem + ".meta", stem + ".csv"


def write_corpus(c: Corpus, meta_path: str | Path, data_path: str | Path) -> None:
    meta = corpus_metadata(c)
    with open(meta_path, "w", newline="\n", encoding="utf-8") as fh:
        for k, v in meta.items():
            fh.write(f"{k}: {v}\n")
    with open(data_path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(",".join(["symbol"] + [f"x{k}" for k in range(c.alphabet_size)]) + "\n")
        for sym, row in zip(c.stream.symbols, c.vectors):
            fh.write(",".join([str(int(sym))] + [repr(float(v)) for v in row]) + "\n")


def read_metadata(path: str | Path) -> dict[str, str]:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition(":")
            if not sep:
                raise ValueError(f"{path}: malformed metadata line {line!r}")
            meta[key.strip()] = value.strip()
    return meta


def read_corpus(meta_path: str | Path, data_path: str | Path) -> Corpus:
    meta = read_metadata(meta_path)
    if meta.get("format_version") != str(FORMAT_VERSION):
        raise ValueError(f"{meta_path}: unsupported corpus format_version {meta.get('format_version')!r}")
    A = int(meta["alphabet_size"])
    data = np.loadtxt(data_path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape != (int(meta["length"]), A + 1):
        raise ValueError(f"{data_path}: shape {data.shape} disagrees with metadata")
    stream = SymbolStream(
        data[:, 0].astype(np.int64), parse_set(meta["set"]), Subset.parse(meta["subset"]), int(meta["seed"])
    )
    return Corpus(stream, data[:, 1:], float(meta["noise_sigma"]), float(meta["corruption_prob"]))
