"""Single-layer LSTM cell with hand-written backpropagation through time.

Gate order in the fused parameter blocks is (i, o, f, c)::

    i_t = sigmoid(W_i x_t + U_i h_{t-1} + b_i)
    o_t = sigmoid(W_o x_t + U_o h_{t-1} + b_o)
    f_t = sigmoid(W_f x_t + U_f h_{t-1} + b_f)
    c_t = f_t * c_{t-1} + i_t * tanh(W_c x_t + U_c h_{t-1} + b_c)
    h_t = o_t * tanh(c_t)

All functions accept either single vectors or batches (batch on axis 0 of
each per-step array). An input of ``None`` stands for the zero vector and
skips the input matmul; the decoder runs on such inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Rng, affine, rand_matrix, sigmoid

GATES = ("i", "o", "f", "c")


@dataclass
class LstmParams:
    """Fused LSTM weights: ``W`` is (4H, input), ``U`` is (4H, H), ``b`` is (4H,)."""

    W: np.ndarray
    U: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        H4, _ = self.W.shape
        if H4 % 4 or self.U.shape != (H4, H4 // 4) or self.b.shape != (H4,):
            raise ValueError(
                f"inconsistent LSTM shapes W{self.W.shape} U{self.U.shape} b{self.b.shape}"
            )

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.U.shape[1]

    def gate(self, g: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Views ``(W_g, U_g, b_g)`` into the fused blocks."""
        k = GATES.index(g)
        H = self.hidden_dim
        sl = slice(k * H, (k + 1) * H)
        return self.W[sl], self.U[sl], self.b[sl]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for g in GATES:
            W, U, b = self.gate(g)
            out += [(f"W_{g}", W), (f"U_{g}", U), (f"b_{g}", b)]
        return out

    def arrays(self) -> list[np.ndarray]:
        return [self.W, self.U, self.b]

    def param_count(self) -> int:
        return self.W.size + self.U.size + self.b.size

    def copy(self) -> "LstmParams":
        return LstmParams(self.W.copy(), self.U.copy(), self.b.copy())

    @classmethod
    def zeros(cls, input_dim: int, hidden_dim: int) -> "LstmParams":
        H4 = 4 * hidden_dim
        return cls(np.zeros((H4, input_dim)), np.zeros((H4, hidden_dim)), np.zeros(H4))


@dataclass
class LstmState:
    h: np.ndarray
    c: np.ndarray

    @classmethod
    def zeros(cls, hidden_dim: int, batch: int | None = None) -> "LstmState":
        shape = (hidden_dim,) if batch is None else (batch, hidden_dim)
        return cls(np.zeros(shape), np.zeros(shape))


@dataclass
class StepTrace:
    """Intermediates of one step, cached for the backward pass."""

    x: np.ndarray | None
    h_prev: np.ndarray
    c_prev: np.ndarray
    i: np.ndarray
    o: np.ndarray
    f: np.ndarray
    candidate: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    h: np.ndarray


def lstm_init(input_dim: int, hidden_dim: int, rng: Rng) -> LstmParams:
    """Uniform init in ±1/sqrt(hidden); forget bias +1, other biases 0."""
    if input_dim < 1 or hidden_dim < 1:
        raise ValueError("LSTM dimensions must be >= 1")
    scale = 1.0 / np.sqrt(hidden_dim)
    W = rand_matrix(rng, 4 * hidden_dim, input_dim, scale)
    U = rand_matrix(rng, 4 * hidden_dim, hidden_dim, scale)
    b = np.zeros(4 * hidden_dim)
    b[2 * hidden_dim : 3 * hidden_dim] = 1.0
    return LstmParams(W, U, b)


def lstm_step(p: LstmParams, x: np.ndarray | None, s: LstmState) -> tuple[LstmState, StepTrace]:
    H = p.hidden_dim
    if (x is not None and x.shape[-1] != p.input_dim) or s.h.shape[-1] != H or s.c.shape != s.h.shape:
        raise ValueError(
            f"lstm_step: x{None if x is None else x.shape} h{s.h.shape} c{s.c.shape} vs "
            f"input_dim={p.input_dim} hidden_dim={H}"
        )
    if x is None:
        z = s.h @ p.U.T + p.b
    else:
        z = affine(p.W, x, p.U, s.h, p.b)
    gates = sigmoid(z[..., : 3 * H])
    i = gates[..., :H]
    o = gates[..., H : 2 * H]
    f = gates[..., 2 * H :]
    g = np.tanh(z[..., 3 * H :])
    c = f * s.c + i * g
    tc = np.tanh(c)
    h = o * tc
    return LstmState(h, c), StepTrace(x, s.h, s.c, i, o, f, g, c, tc, h)


def lstm_forward(
    p: LstmParams, xs: Sequence[np.ndarray] | np.ndarray, s0: LstmState | None = None
) -> tuple[list[StepTrace], LstmState]:
    """Run the recurrence over ``xs`` (time-major) from ``s0`` (zeros if omitted)."""
    if len(xs) == 0:
        raise ValueError("lstm_forward needs a non-empty sequence")
    if s0 is None:
        if xs[0] is None:
            raise ValueError("lstm_forward: zero inputs need an explicit initial state")
        batch = None if np.ndim(xs[0]) == 1 else xs[0].shape[0]
        s0 = LstmState.zeros(p.hidden_dim, batch)
    traces = []
    s = s0
    for x in xs:
        s, tr = lstm_step(p, x, s)
        traces.append(tr)
    return traces, s


def lstm_bptt(
    p: LstmParams,
    traces: Sequence[StepTrace],
    dh: Sequence[np.ndarray] | np.ndarray,
    dfinal: LstmState | None = None,
) -> tuple[LstmParams, LstmState]:
    """Backpropagate per-step hidden gradients ``dh`` (and a final-state gradient).

    Returns parameter gradients (as an ``LstmParams``) and the gradient with
    respect to the initial state.
    """
    if len(dh) != len(traces):
        raise ValueError(f"lstm_bptt: {len(dh)} hidden gradients for {len(traces)} steps")
    if not traces:
        raise ValueError("lstm_bptt needs at least one step")
    shape = traces[-1].h.shape
    if dfinal is None:
        dh_next, dc_next = np.zeros(shape), np.zeros(shape)
    else:
        dh_next, dc_next = dfinal.h, dfinal.c

    dzs = [None] * len(traces)
    for t in range(len(traces) - 1, -1, -1):
        tr = traces[t]
        dht = dh[t] + dh_next
        tc = tr.tanh_c
        do = dht * tc
        dc = dc_next + dht * tr.o * (1.0 - tc * tc)
        dz = np.concatenate(
            [
                dc * tr.candidate * tr.i * (1.0 - tr.i),
                do * tr.o * (1.0 - tr.o),
                dc * tr.c_prev * tr.f * (1.0 - tr.f),
                dc * tr.i * (1.0 - tr.candidate * tr.candidate),
            ],
            axis=-1,
        )
        dzs[t] = dz
        dc_next = dc * tr.f
        dh_next = dz @ p.U

    H4 = 4 * p.hidden_dim
    DZ = np.stack(dzs).reshape(-1, H4)
    Hp = np.stack([tr.h_prev for tr in traces]).reshape(-1, p.hidden_dim)
    if all(tr.x is None for tr in traces):
        dW = np.zeros_like(p.W)
    else:
        X = np.stack([np.zeros(tr.h.shape[:-1] + (p.input_dim,)) if tr.x is None else tr.x for tr in traces])
        dW = DZ.T @ X.reshape(-1, p.input_dim)
    grads = LstmParams(dW, DZ.T @ Hp, DZ.sum(axis=0))
    return grads, LstmState(dh_next, dc_next)
