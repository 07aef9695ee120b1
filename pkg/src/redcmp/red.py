"""LSTM encoder-decoder with a per-step softmax output layer.

The three variants share one architecture and one parameter shape; they
differ only in which window of the stream the decoder is trained to emit:

* Model-A predicts the next ``L`` symbols (offset ``L``),
* Model-B the window shifted by ``L // 2``,
* Model-C restores its own input (offset 0).

The encoder reads the input window from a zero state, both ``h`` and ``c``
are handed to the decoder, and the decoder is unrolled for ``L`` steps on
zero input vectors.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .lstm import LstmParams, LstmState, StepTrace, lstm_bptt, lstm_forward, lstm_init
from .numerics import Rng, cross_entropy, rand_matrix, softmax


class Variant(str, enum.Enum):
    A = "A"
    B = "B"
    C = "C"

    @classmethod
    def parse(cls, s: "str | Variant") -> "Variant":
        if isinstance(s, Variant):
            return s
        try:
            return cls(str(s).strip().upper().removeprefix("MODEL_").removeprefix("MODEL-"))
        except ValueError:
            raise ValueError(f"unknown model variant {s!r} (expected A, B or C)") from None


def target_offset(variant: Variant, L: int) -> int:
    if L < 1:
        raise ValueError("sequence length must be >= 1")
    variant = Variant.parse(variant)
    return {Variant.A: L, Variant.B: L // 2, Variant.C: 0}[variant]


@dataclass
class RedModel:
    encoder: LstmParams
    decoder: LstmParams
    proj_W: np.ndarray
    proj_b: np.ndarray
    variant: Variant
    seq_len: int
    alphabet_size: int

    def __post_init__(self):
        self.variant = Variant.parse(self.variant)
        A, H = self.alphabet_size, self.encoder.hidden_dim
        if self.encoder.input_dim != A or self.decoder.input_dim != A:
            raise ValueError("encoder/decoder input_dim must equal alphabet_size")
        if self.decoder.hidden_dim != H:
            raise ValueError("decoder hidden_dim must equal encoder hidden_dim")
        if self.proj_W.shape != (A, H) or self.proj_b.shape != (A,):
            raise ValueError(f"projection shape {self.proj_W.shape}/{self.proj_b.shape} != ({A}, {H})")

    @property
    def hidden_dim(self) -> int:
        return self.encoder.hidden_dim

    @property
    def offset(self) -> int:
        return target_offset(self.variant, self.seq_len)

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in a fixed order (optimizer view)."""
        return self.encoder.arrays() + self.decoder.arrays() + [self.proj_W, self.proj_b]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Per-gate named views (serialization view)."""
        out = [(f"encoder.{n}", a) for n, a in self.encoder.named_arrays()]
        out += [(f"decoder.{n}", a) for n, a in self.decoder.named_arrays()]
        out += [("proj.W", self.proj_W), ("proj.b", self.proj_b)]
        return out

    def copy(self) -> "RedModel":
        return RedModel(
            self.encoder.copy(),
            self.decoder.copy(),
            self.proj_W.copy(),
            self.proj_b.copy(),
            self.variant,
            self.seq_len,
            self.alphabet_size,
        )


@dataclass
class RedGrads:
    encoder: LstmParams
    decoder: LstmParams
    proj_W: np.ndarray
    proj_b: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return self.encoder.arrays() + self.decoder.arrays() + [self.proj_W, self.proj_b]


@dataclass
class RedTrace:
    """Forward intermediates. Per-step arrays are time-major: (L, [batch,] alphabet)."""

    encoder: list[StepTrace]
    decoder: list[StepTrace]
    logits: np.ndarray
    probs: np.ndarray
    batched: bool = field(default=False)


def red_init(alphabet_size: int, hidden_dim: int, L: int, variant: Variant, rng: Rng) -> RedModel:
    if alphabet_size < 1 or hidden_dim < 1 or L < 1:
        raise ValueError("alphabet_size, hidden_dim and L must be >= 1")
    encoder = lstm_init(alphabet_size, hidden_dim, rng)
    decoder = lstm_init(alphabet_size, hidden_dim, rng)
    proj_W = rand_matrix(rng, alphabet_size, hidden_dim, 1.0 / np.sqrt(hidden_dim))
    proj_b = np.zeros(alphabet_size)
    return RedModel(encoder, decoder, proj_W, proj_b, variant, L, alphabet_size)


def param_count(m: RedModel) -> int:
    return sum(a.size for a in m.arrays())


def _time_major(X: np.ndarray) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        return X, False
    if X.ndim == 3:
        return X.transpose(1, 0, 2), True
    raise ValueError(f"expected (L, A) or (batch, L, A) input, got shape {X.shape}")


def red_forward(m: RedModel, X: np.ndarray, L: int | None = None) -> RedTrace:
    """Encode ``X`` and decode ``L`` output distributions.

    ``X`` is (L, alphabet) for one window or (batch, L, alphabet).
    """
    L = m.seq_len if L is None else L
    xs, batched = _time_major(X)
    if xs.shape[0] != L or xs.shape[-1] != m.alphabet_size:
        raise ValueError(f"red_forward: input shape {np.shape(X)} does not match L={L}, A={m.alphabet_size}")
    enc, state = lstm_forward(m.encoder, xs)
    dec, _ = lstm_forward(m.decoder, [None] * L, LstmState(state.h, state.c))
    hs = np.stack([tr.h for tr in dec])
    logits = hs @ m.proj_W.T + m.proj_b
    return RedTrace(enc, dec, logits, softmax(logits), batched)


def red_loss(trace: RedTrace, Y: np.ndarray) -> float | np.ndarray:
    """Summed per-step cross-entropy; one value per window for a batched trace."""
    ys, _ = _time_major(Y)
    if ys.shape != trace.probs.shape:
        raise ValueError(f"red_loss: targets {np.shape(Y)} do not match outputs")
    per_step = cross_entropy(trace.probs, ys)
    return per_step.sum(axis=0) if trace.batched else float(np.sum(per_step))


def red_backward(m: RedModel, trace: RedTrace, Y: np.ndarray, weights: np.ndarray | None = None) -> RedGrads:
    """Gradient of ``red_loss``.

    For a batched trace the objective is the batch mean, or ``sum(weights *
    losses)`` when per-window ``weights`` are given.
    """
    ys, _ = _time_major(Y)
    if ys.shape != trace.probs.shape or len(trace.decoder) != ys.shape[0]:
        raise ValueError("red_backward: trace and targets disagree on shape")
    if trace.probs.shape[-1] != m.alphabet_size or trace.decoder[0].h.shape[-1] != m.hidden_dim:
        raise ValueError("red_backward: trace was not produced by this model")
    dlogits = trace.probs * ys.sum(axis=-1, keepdims=True) - ys
    if weights is not None:
        dlogits *= np.asarray(weights, dtype=np.float64)[:, None] if trace.batched else float(weights)
    elif trace.batched:
        dlogits /= ys.shape[1]
    H, A = m.hidden_dim, m.alphabet_size
    hs = np.stack([tr.h for tr in trace.decoder])
    dproj_W = dlogits.reshape(-1, A).T @ hs.reshape(-1, H)
    dproj_b = dlogits.reshape(-1, A).sum(axis=0)
    dh_dec = dlogits @ m.proj_W
    ddec, dstate = lstm_bptt(m.decoder, trace.decoder, dh_dec)
    denc, _ = lstm_bptt(m.encoder, trace.encoder, np.zeros((len(trace.encoder),) + dstate.h.shape), dstate)
    return RedGrads(denc, ddec, dproj_W, dproj_b)
