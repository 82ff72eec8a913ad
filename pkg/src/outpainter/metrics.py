"""Quantitative evaluation: Inception Score over pluggable classifier
probabilities and caption similarity over pooled encoder embeddings, plus a
small run-comparison table renderer.

There is deliberately no FID/KID here: outpainting has no ground-truth pixels
beyond the input window, so distribution distances against a reference set
are not computable for expanded canvases.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .canvas import mean_resize
from .validation import ValidationError, check_image, check_probabilities

KL_EPSILON = 1e-12


@dataclass(frozen=True)
class MetricReport:
    """One metric value with the context needed to compare it across runs."""

    metric: str
    value: float
    samples: int
    splits: int
    config_digest: str = ""

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValidationError(f"{self.metric} value must be finite, got {self.value!r}")
        if self.samples < 1:
            raise ValidationError(f"{self.metric} needs a positive sample count")

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "value": self.value,
            "samples": self.samples,
            "splits": self.splits,
            "config_digest": self.config_digest,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def inception_score(probs, splits: int = 10, config_digest: str = "") -> MetricReport:
    """exp(mean KL(p(y|x) || marginal)) averaged over contiguous splits.

    Zero probabilities are floored at 1e-12 inside the logs; identical
    distributions therefore score exactly 1.0.
    """
    p = check_probabilities(probs)
    n = p.shape[0]
    if splits < 1:
        raise ValidationError(f"splits must be >= 1, got {splits}")
    if n < splits:
        raise ValidationError(f"need at least {splits} samples for {splits} splits, got {n}")
    scores = []
    for part in np.array_split(np.arange(n), splits):
        block = p[part]
        marginal = block.mean(axis=0)
        log_ratio = np.log(np.maximum(block, KL_EPSILON)) - np.log(np.maximum(marginal, KL_EPSILON))
        kl = (block * log_ratio).sum(axis=1)
        scores.append(np.exp(kl.mean()))
    return MetricReport(
        metric="IS",
        value=float(np.mean(scores)),
        samples=n,
        splits=int(splits),
        config_digest=config_digest,
    )


def _pooled(embedding: np.ndarray) -> np.ndarray:
    return np.asarray(embedding, dtype=np.float64).mean(axis=0)


def clip_similarity(pairs, text_encoder, vision_encoder, config_digest: str = "") -> MetricReport:
    """Mean cosine similarity x 100 between pooled canvas and caption embeddings.

    The whole canvas goes through the vision encoder (which resizes it to its
    own input grid, squashing aspect ratio); both embeddings are mean-pooled
    over their token rows.  Zero-norm embeddings are excluded with a warning.
    """
    if not pairs:
        raise ValidationError("clip_similarity needs at least one (image, caption) pair")
    if text_encoder.dim != vision_encoder.dim:
        raise ValidationError(
            f"encoder dimensions differ: text {text_encoder.dim} vs vision {vision_encoder.dim}"
        )
    sims = []
    for index, (image, caption) in enumerate(pairs):
        text = getattr(caption, "text", caption)
        t = _pooled(text_encoder.encode(str(text)))
        v = _pooled(vision_encoder.encode(check_image(image, f"pair {index}")))
        tn, vn = np.linalg.norm(t), np.linalg.norm(v)
        if tn == 0.0 or vn == 0.0:
            warnings.warn(f"pair {index} has a zero-norm embedding; excluded from the mean")
            continue
        sims.append(100.0 * float(t @ v) / float(tn * vn))
    if not sims:
        raise ValidationError("every pair had a zero-norm embedding; nothing to average")
    return MetricReport(
        metric="CLIPSIM",
        value=float(np.mean(sims)),
        samples=len(sims),
        splits=1,
        config_digest=config_digest,
    )


class PixelClassifier:
    """Deterministic toy classifier: a fixed seeded linear map over
    downsampled pixels with a softmax head.  Stands in for a pretrained
    network wherever class probabilities are needed."""

    def __init__(self, classes: int = 4, grid: int = 4, seed: int = 11, sharpness: float = 24.0):
        if classes < 2:
            raise ValidationError(f"need at least 2 classes, got {classes}")
        self.classes = int(classes)
        self.grid = int(grid)
        self.seed = int(seed)
        self.sharpness = float(sharpness)
        rng = np.random.default_rng(seed)
        self.weights = rng.standard_normal((self.grid * self.grid * 3, self.classes))

    def predict_proba(self, images) -> np.ndarray:
        if len(images) == 0:
            raise ValidationError("no images to classify")
        feats = np.stack([
            mean_resize(check_image(img), self.grid, self.grid).reshape(-1) - 0.5
            for img in images
        ])
        logits = self.sharpness * (feats @ self.weights)
        logits -= logits.max(axis=1, keepdims=True)
        expd = np.exp(logits)
        return expd / expd.sum(axis=1, keepdims=True)


_TABLE_METRICS = ("IS", "CLIPSIM")


def _cell(row: dict, key: str) -> str:
    for candidate in (key, key.lower()):
        if candidate in row and row[candidate] is not None:
            value = row[candidate]
            if isinstance(value, MetricReport):
                value = value.value
            return f"{float(value):.2f}"
    return "—"


def compare_runs(rows, metrics=_TABLE_METRICS) -> str:
    """Aligned text table of metric values by run variant.

    Each row dict carries "variant" plus optional "dataset"/"factor" labels
    and metric values (floats or MetricReports) keyed by metric name; missing
    cells render as an em dash.  Metric columns keep IS ahead of CLIPSIM.
    """
    if not rows:
        raise ValidationError("compare_runs needs at least one row")
    header = ["variant", "dataset", "factor", *metrics]
    body = []
    for row in rows:
        body.append([
            str(row.get("variant", "—")),
            str(row.get("dataset", "—")),
            str(row.get("factor", "—")),
            *[_cell(row, metric) for metric in metrics],
        ])
    widths = [max(len(header[i]), *(len(r[i]) for r in body)) for i in range(len(header))]
    lines = [
        "  ".join(header[i].ljust(widths[i]) for i in range(len(header))).rstrip(),
        "  ".join("-" * widths[i] for i in range(len(header))).rstrip(),
    ]
    for r in body:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(header))).rstrip())
    return "\n".join(lines)
