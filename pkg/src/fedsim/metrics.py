"""Model evaluation: overall / per-label accuracy, label-accuracy spread,
group recall, and backdoor success rate."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fedsim import model
from fedsim.data import Dataset
from fedsim.fedval import mad
from fedsim.model import MlpSpec


@dataclass
class MetricRecord:
    """One evaluation snapshot; the CSV/JSON output schema mirrors these fields."""

    round: int
    overall_accuracy: float
    per_label_accuracy: list[float]
    label_accuracy_mad: float
    mean_validation_loss: float
    per_group_recall: dict[int, float] | None = None
    backdoor_accuracy: float | None = None

    FIELDS = (
        "round",
        "overall_accuracy",
        "per_label_accuracy",
        "label_accuracy_mad",
        "mean_validation_loss",
        "per_group_recall",
        "backdoor_accuracy",
    )


def _group_recall(labels: np.ndarray, preds: np.ndarray, groups: np.ndarray, k: int):
    """Recall per group: positive-class recall for binary tasks, macro
    recall over the classes present in the group otherwise."""
    out: dict[int, float] = {}
    for g in np.unique(groups):
        sel = groups == g
        y, p = labels[sel], preds[sel]
        if k == 2:
            pos = y == 1
            if not pos.any():
                continue
            out[int(g)] = float((p[pos] == 1).mean())
        else:
            per_class = [float((p[y == c] == c).mean()) for c in range(k) if (y == c).any()]
            if per_class:
                out[int(g)] = float(np.mean(per_class))
    return out or None


def evaluate(
    params: np.ndarray,
    spec: MlpSpec,
    test: Dataset,
    backdoor: tuple[int, int] | None = None,
    round_index: int = 0,
    validation_loss: float = float("nan"),
) -> MetricRecord:
    """Evaluate a model on a test set that covers every label.

    backdoor, when given as (source, target), reports the fraction of
    source-label samples predicted as the target label.
    """
    losses, preds = model.eval_losses(params, spec, test)
    labels = test.labels
    k = spec.num_classes
    per_label = []
    for c in range(k):
        sel = labels == c
        if not sel.any():
            raise ValueError(f"test set has no samples of label {c}")
        per_label.append(float((preds[sel] == c).mean()))

    backdoor_accuracy = None
    if backdoor is not None:
        source, target = backdoor
        sel = labels == source
        if not sel.any():
            raise ValueError(f"test set has no samples of backdoor source label {source}")
        backdoor_accuracy = float((preds[sel] == target).mean())

    recall = None
    if test.group_ids is not None:
        recall = _group_recall(labels, preds, test.group_ids, k)

    return MetricRecord(
        round=round_index,
        overall_accuracy=float((preds == labels).mean()),
        per_label_accuracy=per_label,
        label_accuracy_mad=mad(per_label),
        mean_validation_loss=validation_loss,
        per_group_recall=recall,
        backdoor_accuracy=backdoor_accuracy,
    )


def summarize(records: list[MetricRecord], window: int) -> dict[str, object]:
    """Arithmetic means of each metric over the trailing `window` records."""
    if window < 1:
        raise ValueError("window must be >= 1")
    if window > len(records):
        raise ValueError(f"window {window} exceeds {len(records)} records")
    tail = records[-window:]
    out: dict[str, object] = {
        "overall_accuracy": float(np.mean([r.overall_accuracy for r in tail])),
        "per_label_accuracy": np.mean([r.per_label_accuracy for r in tail], axis=0).tolist(),
        "label_accuracy_mad": float(np.mean([r.label_accuracy_mad for r in tail])),
        "mean_validation_loss": float(np.mean([r.mean_validation_loss for r in tail])),
    }
    if all(r.backdoor_accuracy is not None for r in tail):
        out["backdoor_accuracy"] = float(np.mean([r.backdoor_accuracy for r in tail]))
    if all(r.per_group_recall for r in tail):
        keys = set(tail[0].per_group_recall)
        for r in tail:
            keys &= set(r.per_group_recall)
        out["per_group_recall"] = {
            g: float(np.mean([r.per_group_recall[g] for r in tail])) for g in sorted(keys)
        }
    return out
