"""Chamfer distance, clean accuracy and attack success rate."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import as_cloud, make_rng
from .preprocess import PipelineSpec, run_pipeline


def chamfer_distance(a, b) -> float:
    """Sum of the two directed mean nearest-neighbour (unsquared) distances."""
    a = as_cloud(a)
    b = as_cloud(b)
    d_ab, _ = cKDTree(b).query(a, k=1)
    d_ba, _ = cKDTree(a).query(b, k=1)
    return float(d_ab.mean() + d_ba.mean())


def _predict_all(model, clouds) -> np.ndarray:
    return np.asarray([int(model.predict(c)) for c in clouds], dtype=np.int64)


def clean_accuracy(model, dataset) -> float:
    if len(dataset) == 0:
        raise ValueError("cannot compute accuracy on an empty dataset")
    pred = _predict_all(model, dataset.clouds)
    return float((pred == dataset.labels).mean())


def per_class_accuracy(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> list[float]:
    out = []
    for c in range(n_classes):
        m = labels == c
        out.append(float((pred[m] == c).mean()) if m.any() else float("nan"))
    return out


def triggered_test_clouds(dataset, trigger, target: int, seed: int = 0, pipeline: PipelineSpec | None = None):
    """Yield ``(index, clean, triggered)`` for every non-target sample.

    Sample ``i`` gets its own trigger stream keyed by ``(seed, i)``, so the
    result does not depend on iteration order.
    """
    for i, (cloud, label) in enumerate(zip(dataset.clouds, dataset.labels)):
        if label == target:
            continue
        poisoned = trigger.apply(cloud, make_rng(seed, i, 1))
        if pipeline is not None and len(pipeline):
            poisoned = run_pipeline(poisoned, pipeline, make_rng(seed, i, 2))
        yield i, cloud, poisoned


def attack_success_rate(
    model,
    dataset,
    trigger,
    target: int,
    inference_pipeline: PipelineSpec | None = None,
    seed: int = 0,
) -> float:
    """Fraction of triggered non-target samples the model assigns to ``target``."""
    hits = total = 0
    for _, _, poisoned in triggered_test_clouds(dataset, trigger, target, seed, inference_pipeline):
        total += 1
        hits += int(model.predict(poisoned)) == target
    if total == 0:
        raise ValueError("test set has no non-target samples")
    return hits / total


@dataclass
class EvalReport:
    acc: float
    asr: float
    per_class_acc: list[float]
    n_test: int
    n_nontarget: int
    cd_x100: float
    trigger: str = ""
    pipeline: str = "none"
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("acc", "asr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def evaluate(
    model,
    dataset,
    trigger,
    target: int,
    inference_pipeline: PipelineSpec | None = None,
    seed: int = 0,
) -> EvalReport:
    """ACC on clean samples, ASR and mean CD x 100 on triggered non-target samples."""
    pred = _predict_all(model, dataset.clouds)
    labels = np.asarray(dataset.labels)
    hits = total = 0
    cds = []
    for _, clean, poisoned in triggered_test_clouds(dataset, trigger, target, seed, inference_pipeline):
        total += 1
        hits += int(model.predict(poisoned)) == target
        cds.append(chamfer_distance(clean, poisoned))
    if total == 0:
        raise ValueError("test set has no non-target samples")
    return EvalReport(
        acc=float((pred == labels).mean()),
        asr=hits / total,
        per_class_acc=per_class_accuracy(pred, labels, len(dataset.class_names)),
        n_test=len(labels),
        n_nontarget=total,
        cd_x100=100.0 * float(np.mean(cds)),
        trigger=getattr(trigger, "kind", ""),
        pipeline=inference_pipeline.label() if inference_pipeline is not None else "none",
        seed=seed,
    )
