"""Training loop, loss matrices, anomaly scoring and decode reports."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from .corpus import (
    ABNORMAL_SUBSETS,
    NORMAL_SUBSETS,
    Corpus,
    SequencePair,
    Subset,
    make_windows,
    stack_windows,
    to_string,
)
from .numerics import global_norm, make_rng
from .red import RedModel, Variant, red_backward, red_forward, red_loss, target_offset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 32
    grad_clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")


@dataclass
class LossCurve:
    losses: list[float]
    model: str = ""
    dataset: str = ""
    seq_len: int = 0


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient goes non-finite; carries the last good state."""

    def __init__(self, msg: str, model: RedModel | None = None, curve: LossCurve | None = None):
        super().__init__(msg)
        self.model = model
        self.curve = curve


def adam_step(
    params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState, hyper: HyperParams
) -> float:
    """One in-place Adam update with global-norm gradient clipping.

    Returns the pre-clip gradient norm.
    """
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("adam_step: parameter and gradient shapes differ")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite gradient")
    scale = hyper.grad_clip_norm / norm if norm > hyper.grad_clip_norm else 1.0
    state.t += 1
    b1, b2 = hyper.adam_beta1, hyper.adam_beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if scale != 1.0:
            g = g * scale
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= hyper.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + hyper.adam_eps)
    return norm


def _unique_windows(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deduplicate identical (X, Y) windows: returns unique X, unique Y, inverse index."""
    flat = np.concatenate([X.reshape(len(X), -1), Y.reshape(len(Y), -1)], axis=1)
    _, first, inverse = np.unique(flat, axis=0, return_index=True, return_inverse=True)
    return X[first], Y[first], inverse.reshape(-1)


def train(
    model: RedModel,
    pairs: Sequence[SequencePair],
    hyper: HyperParams,
    dataset: str = "",
) -> tuple[RedModel, LossCurve]:
    """Train a copy of ``model`` on ``pairs`` with shuffled minibatch Adam.

    The curve records the mean per-window loss of every epoch, measured on
    each minibatch before its update. Identical windows inside a minibatch
    are evaluated once and weighted by their multiplicity; this leaves the
    minibatch gradient unchanged and makes the repetitive clean corpora
    cheap to train on.
    """
    if not pairs:
        raise ValueError("train: no training windows")
    model = model.copy()
    curve = LossCurve([], model.variant.value, dataset, model.seq_len)
    if hyper.epochs == 0:
        return model, curve
    X, Y = stack_windows(pairs)
    Xu, Yu, inverse = _unique_windows(X, Y)
    n = len(X)
    rng = make_rng(hyper.seed)
    params = model.arrays()
    state = AdamState.zeros_like(params)
    last_good = model.copy()

    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, hyper.batch_size):
            ids, counts = np.unique(inverse[order[start : start + hyper.batch_size]], return_counts=True)
            trace = red_forward(model, Xu[ids])
            losses = red_loss(trace, Yu[ids])
            batch_total = float(np.dot(losses, counts))
            if not math.isfinite(batch_total):
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch + 1}", last_good, curve)
            total += batch_total
            grads = red_backward(model, trace, Yu[ids], counts / counts.sum())
            try:
                adam_step(params, grads.arrays(), state, hyper)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"{exc} in epoch {epoch + 1}", last_good, curve) from None
        curve.losses.append(total / n)
        last_good = model.copy()
        log.debug("%s/%s L=%d epoch %d loss %.6f", dataset, model.variant.value, model.seq_len, epoch + 1, total / n)
    return model, curve


# -- evaluation ----------------------------------------------------------


def window_losses(model: RedModel, pairs: Sequence[SequencePair], chunk: int = 512) -> np.ndarray:
    X, Y = stack_windows(pairs)
    out = [red_loss(red_forward(model, X[s : s + chunk]), Y[s : s + chunk]) for s in range(0, len(X), chunk)]
    return np.concatenate(out)


def decode_outputs(model: RedModel, pairs: Sequence[SequencePair], chunk: int = 512) -> np.ndarray:
    """Argmax symbols of the decoder outputs, shape (n, L)."""
    X, _ = stack_windows(pairs)
    out = [red_forward(model, X[s : s + chunk]).probs.argmax(axis=-1).T for s in range(0, len(X), chunk)]
    return np.concatenate(out)


def decode_accuracy(model: RedModel, pairs: Sequence[SequencePair]) -> float:
    """Fraction of output symbols whose argmax equals the target symbol."""
    _, Y = stack_windows(pairs)
    return float(np.mean(decode_outputs(model, pairs) == Y.argmax(axis=-1)))


@dataclass
class LossMatrix:
    """Rows keyed by (dataset, class), one mean per-window loss per variant."""

    rows: dict[tuple[str, str], dict[Variant, float]] = field(default_factory=dict)

    def to_csv_rows(self) -> list[list[str]]:
        out = []
        for (dataset, cls), cells in self.rows.items():
            out.append([dataset, cls] + [_fmt(cells.get(v, math.nan)) for v in Variant])
        return out


CSV_HEADER = ["dataset", "class", "model_a", "model_b", "model_c"]


def _fmt(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"


TEST_CLASSES = {"normal": NORMAL_SUBSETS, "abnormal": ABNORMAL_SUBSETS}


def evaluate_loss_matrix(
    models: Mapping[tuple[str, Variant], RedModel],
    corpora: Mapping[tuple[str, Subset], Corpus],
    L: int,
    stride: int,
    classes: Mapping[str, Sequence[Subset]] | None = None,
) -> LossMatrix:
    """Mean per-window loss of every model on every class of its dataset.

    Each model is windowed at its own variant's target offset. ``classes``
    maps a row label to the subsets pooled into it; the default is the
    normal/abnormal split of a test set.
    """
    classes = TEST_CLASSES if classes is None else classes
    datasets = sorted({d for d, _ in models})
    matrix = LossMatrix()
    for dataset in datasets:
        for cls, subsets in classes.items():
            cells = {}
            for variant in Variant:
                model = models.get((dataset, variant))
                if model is None:
                    continue
                offset = target_offset(variant, L)
                scores = [
                    window_losses(model, make_windows(corpora[(dataset, Subset.parse(s))], L, stride, offset))
                    for s in subsets
                ]
                cells[variant] = float(np.mean(np.concatenate(scores)))
            matrix.rows[(dataset, cls)] = cells
    return matrix


@dataclass
class AnomalyReport:
    threshold: float
    scores: np.ndarray
    labels: np.ndarray  # 1 = abnormal
    class_means: dict[str, float]
    precision: float
    recall: float
    f1: float
    auc: float | None

    def to_text(self) -> str:
        lines = [
            f"threshold: {self.threshold!r}",
            f"n_windows: {len(self.scores)}",
            f"n_abnormal: {int(self.labels.sum())}",
        ]
        lines += [f"mean_score_{k}: {v!r}" for k, v in self.class_means.items()]
        lines += [
            f"precision: {self.precision!r}",
            f"recall: {self.recall!r}",
            f"f1: {self.f1!r}",
            f"auc: {'absent' if self.auc is None else repr(self.auc)}",
        ]
        return "\n".join(lines) + "\n"


def anomaly_scores(model: RedModel, windows: Sequence[SequencePair]) -> np.ndarray:
    return window_losses(model, windows)


def calibrate_threshold(train_scores: np.ndarray, percentile: float = 99.0) -> float:
    if not 0 < percentile <= 100:
        raise ValueError("percentile must lie in (0, 100]")
    return float(np.percentile(np.asarray(train_scores), percentile))


def rank_auc(scores: np.ndarray, labels: np.ndarray) -> float | None:
    """Mann-Whitney AUC with average ranks for ties; ``None`` for one class."""
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classify(scores: np.ndarray, threshold: float, labels: np.ndarray) -> AnomalyReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    flagged = scores > threshold
    tp = int(np.sum(flagged & (labels == 1)))
    fp = int(np.sum(flagged & (labels == 0)))
    fn = int(np.sum(~flagged & (labels == 1)))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    means = {}
    for name, lab in (("normal", 0), ("abnormal", 1)):
        sel = scores[labels == lab]
        means[name] = float(sel.mean()) if sel.size else math.nan
    return AnomalyReport(threshold, scores, labels, means, precision, recall, f1, rank_auc(scores, labels))


@dataclass(frozen=True)
class DecodeRow:
    subset: str
    input: str
    output: str
    ground_truth: str
    loss: float

    def format(self) -> str:
        return f"{self.subset:<8}  {self.input}  {self.output}  {self.ground_truth}  {self.loss:.3f}"


def decode_report(
    model: RedModel, windows: Sequence[SequencePair], n_samples: int = 1, subset: str = ""
) -> list[DecodeRow]:
    """Argmax-decoded input/output/target strings for the first ``n_samples`` windows."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    chosen = list(windows[:n_samples])
    if not chosen:
        return []
    outputs = decode_outputs(model, chosen)
    losses = window_losses(model, chosen)
    return [
        DecodeRow(
            subset,
            to_string(w.X.argmax(axis=-1)),
            to_string(out),
            to_string(w.Y.argmax(axis=-1)),
            float(loss),
        )
        for w, out, loss in zip(chosen, outputs, losses)
    ]
