"""Explanation quality metrics and the stability report.

Deletion scores are prediction drops in percentage points.  Stability is the
mean absolute pairwise difference of one method's deletion scores across
samples; consistency is the mean distance between one method's scores and
those of every other method on the same samples.  Lower is better for both.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .backends import Backend
from .errors import MissingRunError
from .explainers import DISPLAY_NAMES, METHODS, SaliencyMap
from .variation import mask_topk

VARIANTS = ("baseline", "cutmix", "saliency-mix")
VARIANT_LETTERS = {"baseline": "B", "cutmix": "C", "saliency-mix": "P"}


@dataclass(frozen=True)
class ExplanationSummary:
    method: str
    backend_id: str
    sample_ids: tuple[str, ...]
    deletion: tuple[float, ...]
    probe_fraction: float = 0.25
    variant: str = "baseline"

    def __post_init__(self):
        object.__setattr__(self, "sample_ids", tuple(self.sample_ids))
        object.__setattr__(self, "deletion", tuple(float(d) for d in self.deletion))
        if len(self.deletion) != len(self.sample_ids):
            raise ValueError("one deletion score per sample is required")
        if not all(math.isfinite(d) for d in self.deletion):
            raise ValueError("deletion scores must be finite")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "backend": self.backend_id,
            "variant": self.variant,
            "probe_fraction": self.probe_fraction,
            "sample_ids": list(self.sample_ids),
            "deletion": list(self.deletion),
        }


def deletion_score(backend: Backend, image, saliency: SaliencyMap | np.ndarray, p: float,
                   channel_mean, sample_id: str = "", clean=None) -> float:
    """Drop of the top class score, in percentage points, after masking.

    ``clean`` may carry an already computed score vector for ``image`` to
    save one backend call.
    """
    if clean is None:
        clean = backend.score(image, sample_id).scores
    clean = np.asarray(clean)
    top = int(np.argmax(clean))
    masked = backend.score(mask_topk(image, saliency, p, channel_mean), sample_id).scores
    return 100.0 * (float(clean[top]) - float(masked[top]))


def _scores_of(summary) -> list[float]:
    if isinstance(summary, ExplanationSummary):
        return list(summary.deletion)
    return [float(v) for v in summary]


def stability(summary: ExplanationSummary | Sequence[float]) -> float:
    """Mean of |d_i - d_j| over all unordered sample pairs.

    Uses the sorted-order identity sum_{i<j} |d_i - d_j| = sum_k (2k - m + 1) d_(k).
    """
    d = sorted(_scores_of(summary))
    m = len(d)
    if m < 2:
        raise ValueError("stability needs at least two summaries")
    pairs = m * (m - 1) // 2
    return math.fsum((2 * k - m + 1) * v for k, v in enumerate(d)) / pairs


def summary_distance(a: ExplanationSummary, b: ExplanationSummary) -> float:
    if a.sample_ids != b.sample_ids:
        raise ValueError(f"sample lists differ between {a.method} and {b.method}")
    return math.fsum(abs(x - y) for x, y in zip(a.deletion, b.deletion)) / len(a.deletion)


def consistency(summaries: Iterable[ExplanationSummary], method: str) -> float:
    """Mean distance between ``method``'s summary and each other summary."""
    summaries = list(summaries)
    target = [s for s in summaries if s.method == method]
    if not target:
        raise KeyError(f"method {method!r} is not among the summaries")
    if len(summaries) < 2:
        raise ValueError("consistency needs at least two summaries")
    ref = summaries[0].sample_ids
    if any(s.sample_ids != ref for s in summaries):
        raise ValueError("all summaries must share the same ordered sample list")
    x = target[0]
    others = [s for s in summaries if s is not x]
    return math.fsum(summary_distance(x, s) for s in others) / len(others)


def f1_score(predictions: Sequence[int], truths: Sequence[int], num_classes: int | None = None) -> float:
    """Macro F1.  A class that is never predicted and never true scores 0."""
    if len(predictions) != len(truths):
        raise ValueError(f"length mismatch: {len(predictions)} predictions, {len(truths)} truths")
    if not predictions:
        raise ValueError("f1 needs at least one sample")
    pred = np.asarray(predictions)
    true = np.asarray(truths)
    if num_classes is None:
        classes = np.union1d(pred, true)
    else:
        classes = np.arange(num_classes)
    f1s = []
    for c in classes:
        tp = int(np.sum((pred == c) & (true == c)))
        fp = int(np.sum((pred == c) & (true != c)))
        fn = int(np.sum((pred != c) & (true == c)))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


# ----------------------------------------------------------------------------
# Report
# ----------------------------------------------------------------------------


@dataclass
class ReportRow:
    backend: str
    variant: str
    f1: float
    stability: dict[str, float]
    consistency: dict[str, float] = field(default_factory=dict)
    samples: int = 0

    @property
    def pairs(self) -> int:
        return self.samples * (self.samples - 1) // 2

    @property
    def label(self) -> str:
        return f"{self.backend} ({VARIANT_LETTERS.get(self.variant, self.variant)})"


@dataclass
class MetricReport:
    methods: list[str]
    rows: list[ReportRow]
    probe_fraction: float | None = None

    def cell(self, backend: str, variant: str, method: str) -> float:
        for row in self.rows:
            if row.backend == backend and row.variant == variant:
                return row.stability[method]
        raise KeyError((backend, variant, method))

    def to_dict(self) -> dict:
        return {
            "methods": list(self.methods),
            "probe_fraction": self.probe_fraction,
            "rows": [
                {
                    "backend": r.backend,
                    "variant": r.variant,
                    "f1": r.f1,
                    "samples": r.samples,
                    "pairs": r.pairs,
                    "stability": {m: r.stability[m] for m in self.methods},
                    "consistency": {m: r.consistency[m] for m in self.methods if m in r.consistency},
                }
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricReport":
        rows = [
            ReportRow(
                backend=r["backend"],
                variant=r["variant"],
                f1=r["f1"],
                stability=dict(r["stability"]),
                consistency=dict(r.get("consistency", {})),
                samples=r.get("samples", 0),
            )
            for r in data["rows"]
        ]
        return cls(methods=list(data["methods"]), rows=rows, probe_fraction=data.get("probe_fraction"))

    def render_table(self, digits: int = 3) -> str:
        """Plain-text table laid out like the stability results table."""
        header = "  ".join(["Service", "F1-score"] + [DISPLAY_NAMES.get(m, m) for m in self.methods])
        lines = [header]
        for r in self.rows:
            cells = [f"{r.f1:.{digits}f}"] + [f"{r.stability[m]:.{digits}f}" for m in self.methods]
            lines.append(f"{r.label} " + " | ".join(cells))
        return "\n".join(lines) + "\n"


def _variant_key(v: str) -> tuple:
    return (VARIANTS.index(v), v) if v in VARIANTS else (len(VARIANTS), v)


def _method_key(m: str) -> tuple:
    return (METHODS.index(m), m) if m in METHODS else (len(METHODS), m)


def build_report(
    summaries: Iterable[ExplanationSummary],
    f1: Mapping[tuple[str, str], float],
    backends: Sequence[str] | None = None,
    variants: Sequence[str] | None = None,
    methods: Sequence[str] | None = None,
    with_consistency: bool = True,
) -> MetricReport:
    """Assemble the (backend, variant) x method stability matrix.

    ``f1`` maps ``(backend, variant)`` to the clean-input F1 score.  Rows are
    ordered by backend id, then variant (B, C, P); columns follow the fixed
    method order.  Every expected cell must be present.
    """
    table: dict[tuple[str, str, str], ExplanationSummary] = {}
    for s in summaries:
        table[(s.backend_id, s.variant, s.method)] = s
    backends = sorted(set(backends or {k[0] for k in table}))
    variants = sorted(set(variants or {k[1] for k in table}), key=_variant_key)
    methods = sorted(set(methods or {k[2] for k in table}), key=_method_key)
    missing = [(b, v, m) for b in backends for v in variants for m in methods if (b, v, m) not in table]
    missing += [(b, v, "f1") for b in backends for v in variants if (b, v) not in f1]
    if missing:
        raise MissingRunError(missing)
    rows = []
    probe = None
    for b in backends:
        for v in variants:
            cells = [table[(b, v, m)] for m in methods]
            if any(len(c.deletion) < 2 for c in cells):
                raise ValueError(f"run {b}/{v} has fewer than two samples")
            probe = cells[0].probe_fraction
            cons = {}
            if with_consistency and len(cells) >= 2:
                cons = {m: consistency(cells, m) for m in methods}
            rows.append(
                ReportRow(
                    backend=b,
                    variant=v,
                    f1=float(f1[(b, v)]),
                    stability={m: stability(c) for m, c in zip(methods, cells)},
                    consistency=cons,
                    samples=len(cells[0].deletion),
                )
            )
    return MetricReport(methods=list(methods), rows=rows, probe_fraction=probe)
