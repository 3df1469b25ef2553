import json

import numpy as np
import pytest

from pcbackdoor.dataset import LabeledDataset
from pcbackdoor.geometry import make_rng
from pcbackdoor.metrics import (
    EvalReport,
    attack_success_rate,
    chamfer_distance,
    clean_accuracy,
    evaluate,
    per_class_accuracy,
)
from pcbackdoor.preprocess import parse_pipeline
from pcbackdoor.trigger import RotationTrigger, make_trigger

from . import oracles


class ConstModel:
    def __init__(self, label):
        self.label = label

    def predict(self, cloud):
        return self.label


class SignModel:
    """Predicts 0 when the mean x is positive, else 1."""

    def predict(self, cloud):
        return 0 if np.mean(cloud[:, 0]) > 0 else 1


def _dataset(n=12, k=32):
    rng = make_rng(0)
    clouds = [rng.standard_normal((k, 3)) for _ in range(n)]
    return LabeledDataset(clouds, np.arange(n) % 3, ["a", "b", "c"], split="test")


def test_chamfer_identical_is_zero_and_symmetric():
    a = make_rng(1).standard_normal((40, 3))
    b = make_rng(2).standard_normal((30, 3))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), rel=1e-15)


def test_chamfer_by_hand():
    a = [[0, 0, 0], [1, 0, 0]]
    b = [[0, 0, 0]]
    # a->b: (0 + 1) / 2 ; b->a: 0
    assert chamfer_distance(a, b) == 0.5


def test_chamfer_translation():
    a = make_rng(3).standard_normal((50, 3)) * 10
    # a small shift is smaller than every nearest-neighbour gap, so CD = 2 * |t|
    t = np.array([1e-4, 0, 0])
    assert chamfer_distance(a, a + t) == pytest.approx(2e-4, rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_chamfer_matches_brute_force(seed):
    rng = make_rng(seed, 5)
    a = rng.standard_normal((int(rng.integers(10, 80)), 3))
    b = rng.standard_normal((int(rng.integers(10, 80)), 3))
    assert chamfer_distance(a, b) == pytest.approx(oracles.chamfer(a.tolist(), b.tolist()), rel=1e-12)


def test_accuracy_and_asr_with_stub_models():
    ds = _dataset()
    assert clean_accuracy(ConstModel(0), ds) == pytest.approx(1 / 3)
    trig = RotationTrigger()
    assert attack_success_rate(ConstModel(0), ds, trig, target=0) == 1.0
    assert attack_success_rate(ConstModel(1), ds, trig, target=0) == 0.0


def test_per_class_accuracy_handles_missing_class():
    pred = np.array([0, 0, 1])
    labels = np.array([0, 1, 1])
    out = per_class_accuracy(pred, labels, 3)
    assert out[:2] == [1.0, 0.5] and np.isnan(out[2])


def test_asr_counts_only_non_target_samples():
    ds = _dataset(n=6)
    report = evaluate(ConstModel(2), ds, make_trigger("ball"), target=2)
    assert report.n_nontarget == 4
    assert report.asr == 1.0
    assert report.acc == pytest.approx(2 / 6)


def test_evaluate_is_deterministic_and_json_roundtrips():
    ds = _dataset()
    trig = make_trigger("wlt")
    pipe = parse_pipeline("jitter")
    r1 = evaluate(SignModel(), ds, trig, target=0, inference_pipeline=pipe, seed=3)
    r2 = evaluate(SignModel(), ds, trig, target=0, inference_pipeline=pipe, seed=3)
    assert r1.to_json() == r2.to_json()
    back = EvalReport.from_json(r1.to_json())
    assert back == r1
    data = json.loads(r1.to_json())
    assert data["trigger"] == "wlt" and data["pipeline"] == "jitter"
    assert r1.cd_x100 > 0


def test_report_validation():
    with pytest.raises(ValueError):
        EvalReport(acc=1.5, asr=0.0, per_class_acc=[], n_test=0, n_nontarget=0, cd_x100=0.0)


def test_empty_inputs_raise():
    ds = LabeledDataset([np.zeros((4, 3))], [0], ["a"])
    with pytest.raises(ValueError):
        attack_success_rate(ConstModel(0), ds, RotationTrigger(), target=0)
    with pytest.raises(ValueError):
        clean_accuracy(ConstModel(0), LabeledDataset([], [], ["a"]))
