"""Fidelity metrics: F1, pixel-intensity histograms, KL divergence, memorization audit."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import jsonschema
import numpy as np
from scipy import stats

from .data import grayscale
from .errors import ContractError
from .rng import make_rng

KL_SMOOTHING = 1e-9
REPORT_VERSION = 1


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class F1Result:
    precision: float
    recall: float
    f1: float


def _binary(mask, name) -> np.ndarray:
    a = np.asarray(mask)
    if not np.all((a == 0) | (a == 1)):
        raise ContractError(f"{name} must be binary (0/1)")
    return a.astype(bool)


def confusion(pred, truth) -> ConfusionCounts:
    p, t = _binary(pred, "pred"), _binary(truth, "truth")
    if p.shape != t.shape:
        raise ContractError(f"pred {p.shape} and truth {t.shape} differ in shape")
    tp = int(np.count_nonzero(p & t))
    fp = int(np.count_nonzero(p & ~t))
    fn = int(np.count_nonzero(~p & t))
    return ConfusionCounts(tp, fp, fn, p.size - tp - fp - fn)


def f1_from_counts(c: ConfusionCounts) -> F1Result:
    """0/0 precision or recall counts as 0; two all-background masks agree perfectly."""
    if c.tp + c.fp + c.fn == 0:
        return F1Result(1.0, 1.0, 1.0)
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return F1Result(precision, recall, f1)


def f1_score(pred, truth) -> F1Result:
    return f1_from_counts(confusion(pred, truth))


def mean_f1(preds, truths) -> float:
    """Mean per-image F1 over aligned stacks of binary masks."""
    preds, truths = np.asarray(preds), np.asarray(truths)
    if len(preds) != len(truths) or len(preds) == 0:
        raise ContractError("need equally many, non-zero predictions and ground truths")
    return float(np.mean([f1_score(p, t).f1 for p, t in zip(preds, truths)]))


@dataclass(frozen=True)
class Histogram:
    probs: np.ndarray
    n_samples: int

    @property
    def bin_count(self) -> int:
        return len(self.probs)

    @property
    def bin_centers(self) -> np.ndarray:
        return (np.arange(self.bin_count) + 0.5) / self.bin_count

    def to_csv(self) -> str:
        rows = ["bin_center,probability"]
        rows += [f"{c:.6f},{p:.12e}" for c, p in zip(self.bin_centers, self.probs)]
        return "\n".join(rows) + "\n"


def pixel_histogram(images, bins: int = 256, gray: bool = True) -> Histogram:
    """Pooled, normalized histogram of pixel values over [0, 1] with uniform bins.

    Multi-channel images are converted to luma first when ``gray`` is set.
    Value 1.0 falls into the last bin.
    """
    images = list(images)
    if not images:
        raise ContractError("pixel_histogram needs at least one image")
    values = np.concatenate([
        (grayscale(im) if gray and np.ndim(im) == 3 else np.asarray(im, dtype=np.float64)).ravel()
        for im in images])
    if values.size == 0:
        raise ContractError("images contain no pixels")
    if np.any(values < 0) or np.any(values > 1) or not np.all(np.isfinite(values)):
        raise ContractError("pixel values must lie in [0, 1]")
    idx = np.minimum((values * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    return Histogram(counts / counts.sum(), int(values.size))


def smooth(probs, eps: float = KL_SMOOTHING) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64) + eps
    return p / p.sum()


def kl_divergence(p, q, eps: float = KL_SMOOTHING) -> float:
    """sum_i P_i ln(P_i / Q_i) after additive smoothing of both arguments; 0 ln 0 = 0."""
    p = p.probs if isinstance(p, Histogram) else np.asarray(p, dtype=np.float64)
    q = q.probs if isinstance(q, Histogram) else np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ContractError(f"bin counts differ: {p.shape} vs {q.shape}")
    if eps > 0:
        p, q = smooth(p, eps), smooth(q, eps)
    nz = p > 0
    return float(max(np.sum(p[nz] * np.log(p[nz] / q[nz])), 0.0))


@dataclass(frozen=True)
class NearestMatch:
    index: int
    distance: float


def nearest_training_mask(generated, training) -> NearestMatch:
    """Training mask with the smallest mean squared pixel distance; lowest index wins ties."""
    training = list(training)
    if not training:
        raise ContractError("training set is empty")
    g = np.asarray(generated, dtype=np.float64)
    stack = np.stack([np.asarray(t, dtype=np.float64) for t in training])
    if stack.shape[1:] != g.shape:
        raise ContractError(f"generated mask {g.shape} differs from training masks {stack.shape[1:]}")
    d = ((stack - g[None]) ** 2).reshape(len(stack), -1).mean(axis=1)
    i = int(np.argmin(d))
    return NearestMatch(i, float(d[i]))


def memorization_stats(generated, training) -> dict:
    """Novelty of binary generated masks with respect to the training masks."""
    generated = [np.asarray(g) for g in generated]
    training = [np.asarray(t) for t in training]
    matches = [nearest_training_mask(g, training) for g in generated]
    dists = np.array([m.distance for m in matches])
    exact = int(np.sum(dists == 0.0))
    fg_gen = np.array([g.mean() for g in generated])
    fg_train = np.array([t.mean() for t in training])
    ks = stats.ks_2samp(fg_gen, fg_train).statistic
    return {"n_generated": len(generated), "n_training": len(training), "exact_copies": exact,
            "min_nearest_distance": float(dists.min()), "mean_nearest_distance": float(dists.mean()),
            "foreground_ks": float(ks), "foreground_mean_generated": float(fg_gen.mean()),
            "foreground_mean_training": float(fg_train.mean())}


def split_halves(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise ContractError("need at least 2 items to split into halves")
    order = make_rng(seed, "kl-split").permutation(n)
    return np.sort(order[: n // 2]), np.sort(order[n // 2:])


REPORT_SCHEMA = {
    "type": "object",
    "required": ["report_version", "kl_syn_vs_real", "kl_real_split", "n_real", "n_synthetic",
                 "bins", "f1", "memorization"],
    "properties": {
        "report_version": {"const": REPORT_VERSION},
        "kl_syn_vs_real": {"type": "number", "minimum": 0},
        "kl_real_split": {"type": "number", "minimum": 0},
        "n_real": {"type": "integer", "minimum": 2},
        "n_synthetic": {"type": "integer", "minimum": 1},
        "bins": {"type": "integer", "minimum": 1},
        "f1": {"type": "object", "additionalProperties": {"type": "number"}},
        "memorization": {"type": ["object", "null"]},
        "extra": {"type": "object"},
    },
}


@dataclass
class DatasetReport:
    kl_syn_vs_real: float
    kl_real_split: float
    n_real: int
    n_synthetic: int
    bins: int
    f1: dict
    memorization: dict | None = None
    extra: dict | None = None
    report_version: int = REPORT_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["extra"] is None:
            d.pop("extra")
        return d

    def to_json(self) -> str:
        d = self.to_dict()
        jsonschema.validate(d, REPORT_SCHEMA)
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetReport":
        d = json.loads(text)
        jsonschema.validate(d, REPORT_SCHEMA)
        return cls(**d)

    def to_text(self) -> str:
        lines = [f"KL(synthetic || real)     {self.kl_syn_vs_real:.6g}",
                 f"KL(real half A || half B) {self.kl_real_split:.6g}",
                 f"images: real={self.n_real} synthetic={self.n_synthetic} bins={self.bins}"]
        for k, v in sorted(self.f1.items()):
            lines.append(f"{k:<26}{v:.4f}")
        if self.memorization:
            m = self.memorization
            lines.append(f"exact copies of training masks: {m['exact_copies']}/{m['n_generated']}")
            lines.append(f"nearest-mask distance min/mean: {m['min_nearest_distance']:.4g}/"
                         f"{m['mean_nearest_distance']:.4g}")
            lines.append(f"foreground-fraction KS: {m['foreground_ks']:.4f}")
        return "\n".join(lines) + "\n"


def dataset_report(real_images, synthetic_images, seed: int = 0, bins: int = 256, f1: dict | None = None,
                   memorization: dict | None = None, extra: dict | None = None,
                   halves: tuple | None = None) -> DatasetReport:
    """KL of synthetic vs real pixel histograms next to the real-vs-real control.

    The control compares two seeded random halves of the real images; pass
    ``halves`` (two index arrays) to override the split.
    """
    real = list(real_images)
    syn = list(synthetic_images)
    if len(real) < 2:
        raise ContractError("real dataset needs at least 2 images for the split control")
    if not syn:
        raise ContractError("synthetic dataset is empty")
    a, b = halves if halves is not None else split_halves(len(real), seed)
    h_real = pixel_histogram(real, bins)
    h_syn = pixel_histogram(syn, bins)
    kl_split = kl_divergence(pixel_histogram([real[i] for i in a], bins),
                             pixel_histogram([real[i] for i in b], bins))
    f1 = dict(f1 or {})
    if "f1_real_trained" in f1 and "f1_synthetic_trained" in f1:
        f1["f1_gap"] = f1["f1_real_trained"] - f1["f1_synthetic_trained"]
    return DatasetReport(kl_divergence(h_syn, h_real), kl_split, len(real), len(syn), bins, f1,
                         memorization, extra)
