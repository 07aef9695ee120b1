"""Run configuration, checkpoints and the text/CSV/SVG artifact writers."""

from __future__ import annotations

import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import ALPHABET_SIZES, PATTERNS, SUBSETS, Subset, parse_set
from .lstm import GATES, LstmParams
from .red import RedModel, Variant
from .train import HyperParams

CHECKPOINT_VERSION = 1


def default_seq_lens(set_id: str) -> tuple[int, ...]:
    """Three synchronous lengths (1-3 pattern periods) and three asynchronous ones."""
    p = len(PATTERNS[set_id])
    asynchronous = (3, 7, 8) if set_id == "A" else (4, 8, 11)
    return tuple(sorted({p, 2 * p, 3 * p, *asynchronous}))


def _ints(value: str) -> tuple[int, ...]:
    return tuple(int(v) for v in value.split(",") if v.strip())


@dataclass(frozen=True)
class RunConfig:
    datasets: tuple[str, ...] = ("A", "B", "C")
    train_subsets: tuple[Subset, ...] = (Subset.CLEAR, Subset.NOISE)
    variants: tuple[Variant, ...] = (Variant.A, Variant.B, Variant.C)
    seq_lens: dict[str, tuple[int, ...]] = field(default_factory=dict)  # missing dataset -> default grid
    stride: int = 0  # 0 means stride = L
    hidden_dim: int = 64
    hyper: HyperParams = HyperParams()
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5)
    length: int = 3000
    noise_sigma: float = 0.2
    corruption_prob: float = 0.3
    percentile: float = 99.0
    decode_samples: int = 1
    test_seed_offset: int = 1000

    def __post_init__(self):
        if not self.datasets or not self.train_subsets or not self.variants or not self.seeds:
            raise ValueError("datasets, train_subsets, variants and seeds must be non-empty")
        for s in self.train_subsets:
            if s not in (Subset.CLEAR, Subset.NOISE):
                raise ValueError(f"training subset must be clear or noise, got {s.value}")
        if self.hidden_dim < 1 or self.stride < 0 or self.decode_samples < 1:
            raise ValueError("hidden_dim and decode_samples must be >= 1, stride >= 0")
        if not 0 < self.percentile <= 100:
            raise ValueError("percentile must lie in (0, 100]")
        if self.noise_sigma < 0 or not 0 <= self.corruption_prob <= 1:
            raise ValueError("noise_sigma must be >= 0 and corruption_prob in [0, 1]")
        for d in self.datasets:
            if self.length < len(PATTERNS[d]):
                raise ValueError(f"length {self.length} shorter than the set-{d} pattern")
            for L in self.lens_for(d):
                if L < 1 or 2 * L > self.length:
                    raise ValueError(f"sequence length {L} does not fit a stream of {self.length}")

    def lens_for(self, set_id: str) -> tuple[int, ...]:
        return self.seq_lens.get(set_id) or default_seq_lens(set_id)

    def stride_for(self, L: int) -> int:
        return self.stride or L

    def cells(self) -> list[tuple[int, Subset, str, int]]:
        """Every (seed, training subset, dataset, L) job, in a fixed order."""
        return [
            (seed, subset, d, L)
            for seed in self.seeds
            for subset in self.train_subsets
            for d in self.datasets
            for L in self.lens_for(d)
        ]

    # -- key=value text form ---------------------------------------------

    def to_text(self) -> str:
        h = self.hyper
        lines = [
            f"datasets = {','.join(self.datasets)}",
            f"train_subsets = {','.join(s.value for s in self.train_subsets)}",
            f"variants = {','.join(v.value for v in self.variants)}",
        ]
        lines += [f"seq_lens.{d} = {','.join(map(str, self.lens_for(d)))}" for d in self.datasets]
        lines += [
            f"stride = {self.stride}",
            f"hidden_dim = {self.hidden_dim}",
            f"learning_rate = {h.learning_rate!r}",
            f"adam_beta1 = {h.adam_beta1!r}",
            f"adam_beta2 = {h.adam_beta2!r}",
            f"adam_eps = {h.adam_eps!r}",
            f"epochs = {h.epochs}",
            f"batch_size = {h.batch_size}",
            f"grad_clip_norm = {h.grad_clip_norm!r}",
            f"seeds = {','.join(map(str, self.seeds))}",
            f"length = {self.length}",
            f"noise_sigma = {self.noise_sigma!r}",
            f"corruption_prob = {self.corruption_prob!r}",
            f"percentile = {self.percentile!r}",
            f"decode_samples = {self.decode_samples}",
            f"test_seed_offset = {self.test_seed_offset}",
        ]
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        kv = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"config line {n}: expected key = value, got {raw!r}")
            kv[key.strip()] = value.strip()
        return cls.from_mapping(kv)

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "RunConfig":
        kv = dict(kv)
        args: dict = {}
        hyper: dict = {}
        seq_lens: dict[str, tuple[int, ...]] = {}
        shared_lens = None
        try:
            for key, value in kv.items():
                if key == "datasets":
                    args[key] = tuple(parse_set(v) for v in value.split(","))
                elif key == "train_subsets":
                    args[key] = tuple(Subset.parse(v) for v in value.split(","))
                elif key == "variants":
                    args[key] = tuple(Variant.parse(v) for v in value.split(","))
                elif key == "seq_lens":
                    shared_lens = None if value.lower() == "auto" else _ints(value)
                elif key.startswith("seq_lens."):
                    seq_lens[parse_set(key.split(".", 1)[1])] = _ints(value)
                elif key == "seeds":
                    args[key] = _ints(value)
                elif key in ("stride", "hidden_dim", "length", "decode_samples", "test_seed_offset"):
                    args[key] = 0 if (key == "stride" and value.lower() == "auto") else int(value)
                elif key in ("noise_sigma", "corruption_prob", "percentile"):
                    args[key] = float(value)
                elif key in ("epochs", "batch_size"):
                    hyper[key] = int(value)
                elif key in ("learning_rate", "adam_beta1", "adam_beta2", "adam_eps", "grad_clip_norm"):
                    hyper[key] = float(value)
                else:
                    raise ValueError(f"unknown config key {key!r}")
        except (TypeError, KeyError) as exc:
            raise ValueError(f"bad config value: {exc}") from None
        datasets = args.get("datasets", cls.datasets)
        if shared_lens:
            for d in datasets:
                seq_lens.setdefault(d, shared_lens)
        args["seq_lens"] = {d: tuple(sorted(set(v))) for d, v in seq_lens.items() if d in datasets}
        args["hyper"] = HyperParams(**hyper)
        return cls(**args)

    def replace(self, **changes) -> "RunConfig":
        if "epochs" in changes:
            changes["hyper"] = dataclasses.replace(self.hyper, epochs=changes.pop("epochs"))
        return dataclasses.replace(self, **changes)


def cell_dir(root: Path, seed: int, subset: Subset, set_id: str, L: int) -> Path:
    return root / f"seed{seed}" / subset.value / f"set-{set_id}" / f"L{L:02d}"


def job_seeds(seed: int, subset: Subset, set_id: str, L: int) -> tuple[int, int]:
    """(init seed, shuffle seed) for a cell; shared by all variants of that cell."""
    key = [seed, SUBSETS.index(subset), "ABC".index(set_id), L]
    init, shuffle = np.random.SeedSequence(key).generate_state(2)
    return int(init), int(shuffle)


# -- checkpoints ---------------------------------------------------------


def save_checkpoint(path: str | Path, model: RedModel, meta: dict[str, object]) -> None:
    out = io.StringIO()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "variant": model.variant.value,
        "alphabet_size": model.alphabet_size,
        "hidden_dim": model.hidden_dim,
        "seq_len": model.seq_len,
        **meta,
    }
    for k, v in header.items():
        out.write(f"{k}: {v}\n")
    named = model.named_arrays()
    out.write(f"arrays: {len(named)}\n")
    for name, a in named:
        dims = "x".join(str(d) for d in a.shape)
        out.write(f"{name} {dims} {' '.join(repr(float(x)) for x in a.ravel())}\n")
    Path(path).write_text(out.getvalue(), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[RedModel, dict[str, str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    meta: dict[str, str] = {}
    k = 0
    while k < len(lines) and not lines[k].startswith("arrays:"):
        key, _, value = lines[k].partition(":")
        meta[key.strip()] = value.strip()
        k += 1
    if meta.get("format_version") != str(CHECKPOINT_VERSION):
        raise ValueError(f"{path}: unsupported checkpoint format_version {meta.get('format_version')!r}")
    if k == len(lines):
        raise ValueError(f"{path}: missing parameter block")
    arrays = {}
    for line in lines[k + 1 :]:
        name, dims, *vals = line.split(" ")
        shape = tuple(int(d) for d in dims.split("x"))
        arrays[name] = np.array([float(v) for v in vals]).reshape(shape)
    A, H = int(meta["alphabet_size"]), int(meta["hidden_dim"])

    def lstm(prefix: str) -> LstmParams:
        p = LstmParams.zeros(A, H)
        for g in GATES:
            W, U, b = p.gate(g)
            W[...] = arrays[f"{prefix}.W_{g}"]
            U[...] = arrays[f"{prefix}.U_{g}"]
            b[...] = arrays[f"{prefix}.b_{g}"]
        return p

    try:
        model = RedModel(
            lstm("encoder"), lstm("decoder"), arrays["proj.W"], arrays["proj.b"],
            Variant.parse(meta["variant"]), int(meta["seq_len"]), A,
        )
    except (KeyError, ValueError) as exc:
        raise ValueError(f"{path}: malformed checkpoint ({exc})") from None
    return model, meta


# -- CSV / text / SVG ----------------------------------------------------


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[object]], config_hash: str) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(f"# config_hash: {config_hash}\n")
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(str(x) for x in row) + "\n")


def read_csv(path: Path) -> tuple[str | None, list[dict[str, str]]]:
    """Return the embedded config hash and the rows as dicts."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    config_hash = None
    if lines and lines[0].startswith("#"):
        config_hash = lines[0].partition(":")[2].strip()
        lines = lines[1:]
    header = lines[0].split(",")
    return config_hash, [dict(zip(header, line.split(","))) for line in lines[1:] if line]


def read_hash(path: Path) -> str | None:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    return first.partition(":")[2].strip() if first.startswith("#") else None


COLORS = {"A": "#d62728", "B": "#1f77b4", "C": "#2ca02c"}


def curves_svg(curves: dict[str, Sequence[float]], title: str, config_hash: str) -> str:
    """Loss-vs-epoch polylines, one per model, on shared axes."""
    W, H, left, right, top, bottom = 640, 400, 70, 20, 40, 50
    pw, ph = W - left - right, H - top - bottom
    values = [v for c in curves.values() for v in c if math.isfinite(v)]
    n = max((len(c) for c in curves.values()), default=0)
    ymax = max(values) if values else 1.0
    ymax = ymax if ymax > 0 else 1.0

    def x(i: int) -> float:
        return left + (pw * i / (n - 1) if n > 1 else 0.0)

    def y(v: float) -> float:
        return top + ph * (1.0 - v / ymax)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f"<!-- config_hash: {config_hash} -->",
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-size="14">{title}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left + pw / 2:.1f}" y="{H - 12}" text-anchor="middle" font-size="12">epoch</text>',
        f'<text x="18" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 18 {top + ph / 2:.1f})">loss</text>',
        f'<text x="{left - 6}" y="{top + 4}" text-anchor="end" font-size="10">{ymax:.3g}</text>',
        f'<text x="{left - 6}" y="{top + ph + 4}" text-anchor="end" font-size="10">0</text>',
        f'<text x="{left + pw}" y="{top + ph + 16}" text-anchor="end" font-size="10">{n}</text>',
    ]
    for k, (name, c) in enumerate(curves.items()):
        color = COLORS.get(name, "black")
        pts = " ".join(f"{x(i):.2f},{y(v):.2f}" for i, v in enumerate(c) if math.isfinite(v))
        if pts:
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        out.append(
            f'<text x="{left + pw - 80}" y="{top + 14 + 14 * k}" font-size="11" fill="{color}">Model-{name}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def alphabet_size(set_id: str) -> int:
    return ALPHABET_SIZES[parse_set(set_id)]
