"""Acceptance suite: ten criteria at desk scale.

Training experiments use the synthetic 5-class corpus (200 train / 100 test
clouds of 512 points), 60 epochs, target class 0, seeds 0-2. Trained runs are
cached in-process and shared between criteria, so the whole module costs
about 36 training runs. Each criterion prints one PASS/FAIL line (also
repeated in the terminal summary).
"""

import functools
import math
import shutil

import numpy as np
import pytest

from pcbackdoor.cli import main as cli_main
from pcbackdoor.dataset import PoisonPlan, generate_synthetic_corpus, poison_dataset
from pcbackdoor.geometry import (
    composed_rotation,
    farthest_point_sampling,
    k_nearest_distances,
    make_rng,
    normalize_unit_ball,
)
from pcbackdoor.metrics import attack_success_rate, chamfer_distance, clean_accuracy
from pcbackdoor.model import PARAM_NAMES, TrainConfig, backward, forward, init_model, train
from pcbackdoor.preprocess import SorParams, parse_pipeline, sor_removed
from pcbackdoor.trigger import (
    BallTriggerParams,
    WltParams,
    anchor_transform,
    ball_point_count,
    make_trigger,
    smooth_aggregate,
    wlt_apply,
)

from . import oracles
from .conftest import record
from .test_model import StagedLoss, _rel_err

SEEDS = (0, 1, 2)
K = 512
TARGET = 0
SOR_ROT = "sor(k=30,n_remove=50),rotate_z(max_deg=20)"


# -- shared experiment runner ---------------------------------------------------


@functools.lru_cache(maxsize=None)
def corpus(seed):
    train_set = generate_synthetic_corpus(per_class=40, n_points=K, seed=seed, split="train")
    test_set = generate_synthetic_corpus(per_class=20, n_points=K, seed=seed, split="test")
    return train_set, test_set


@functools.lru_cache(maxsize=None)
def experiment(trigger_kind, pipeline, seed, rate=0.1):
    """Train once and return (acc, asr); trigger_kind=None trains on clean data."""
    train_set, test_set = corpus(seed)
    if trigger_kind is not None:
        trigger = make_trigger(trigger_kind)
        train_set = poison_dataset(train_set, PoisonPlan(rate, TARGET, trigger, seed)).dataset
    cfg = TrainConfig(epochs=60, batch_size=32, lr=1e-3, seed=seed, pipeline=parse_pipeline(pipeline))
    model, _, _ = train(train_set, cfg)
    acc = clean_accuracy(model, test_set)
    asr = attack_success_rate(model, test_set, trigger, TARGET, seed=seed) if trigger_kind else float("nan")
    print(f"  run trigger={trigger_kind} pipeline={pipeline or 'none'} seed={seed} rate={rate}: acc={acc:.3f} asr={asr:.3f}")
    return acc, asr


def mean_asr(kind, pipeline, rate=0.1):
    return float(np.mean([experiment(kind, pipeline, s, rate)[1] for s in SEEDS]))


def fifty_clouds(seed=0):
    return generate_synthetic_corpus(per_class=10, n_points=K, seed=seed, split="test").clouds


def inversions(series, increasing):
    """Per adjacent pair, the number of seeds where the trend is inverted."""
    out = []
    for i in range(len(series) - 1):
        a, b = np.asarray(series[i]), np.asarray(series[i + 1])
        bad = (b < a) if increasing else (b > a)
        out.append(int(bad.sum()))
    return out


# -- 1 ---------------------------------------------------------------------------


def _hull_contains(images, point):
    from scipy.optimize import linprog

    w = len(images)
    res = linprog(
        np.zeros(w),
        A_eq=np.vstack([images.T, np.ones((1, w))]),
        b_eq=np.append(point, 1.0),
        bounds=[(0, None)] * w,
        method="highs",
    )
    return res.status == 0


def test_criterion_01_exactness():
    notes = []
    ok = True

    worst_id = 0.0
    for seed in range(20):
        x = normalize_unit_ball(make_rng(seed, 1).standard_normal((128, 3)))
        for renorm in (False, True):
            out = wlt_apply(x, WltParams(alpha=0.0, scale=1.0, renormalize=renorm))
            worst_id = max(worst_id, float(np.abs(out - x).max()))
    ok &= worst_id <= 1e-12
    notes.append(f"identity max err {worst_id:.1e}")

    worst_w1 = 0.0
    rot = composed_rotation(math.radians(5))
    for seed in range(20):
        x = normalize_unit_ball(make_rng(seed, 2).standard_normal((128, 3)))
        a = x[int(make_rng(seed, 3).integers(128))]
        got = smooth_aggregate(x, a[None], rot, 5.0, 0.5)
        worst_w1 = max(worst_w1, float(np.abs(got - anchor_transform(x, a, rot, 5 * np.eye(3))).max()))
    ok &= worst_w1 <= 1e-12
    notes.append(f"W=1 max err {worst_w1:.1e}")

    hull_ok = True
    m = 5.0 * rot
    for seed in range(100):
        x = normalize_unit_ball(make_rng(seed, 4).standard_normal((64, 3)))
        anchors = x[farthest_point_sampling(x, 16, int(make_rng(seed, 5).integers(64)))]
        out = smooth_aggregate(x, anchors, rot, 5.0, 0.5)
        images = (x[:, None, :] - anchors[None]) @ m.T + anchors[None]
        hull_ok &= bool(np.all(out >= images.min(axis=1) - 1e-12) and np.all(out <= images.max(axis=1) + 1e-12))
        for i in range(0, 64, 16):
            hull_ok &= _hull_contains(images[i], out[i])
    ok &= hull_ok
    notes.append(f"convex containment on 100 clouds {'holds' if hull_ok else 'violated'}")

    # 3 points, 2 anchors, alpha = 90 deg, s = 2, h = 1; worked by hand
    pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 1.0]]
    anchors = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
    e, e1, e15 = math.exp(-0.5), math.exp(-1.0), math.exp(-1.5)
    expected = np.array([
        [e / (1 + e), 0.0, -2 * e / (1 + e)],
        [1 / (1 + e), 0.0, 2 * e / (1 + e)],
        [(2 * e1 + 3 * e15) / (e1 + e15), -2.0, -2 * e15 / (e1 + e15)],
    ])
    hand_err = float(np.abs(smooth_aggregate(pts, anchors, composed_rotation(math.pi / 2), 2.0, 1.0) - expected).max())
    ok &= hand_err <= 1e-9
    notes.append(f"hand case max err {hand_err:.1e}")

    assert record(1, "exactness properties", ok, "; ".join(notes))


# -- 2 ---------------------------------------------------------------------------


def test_criterion_02_oracle_equivalence():
    fps_bad = sor_bad = 0
    cd_worst = 0.0
    for inst in range(50):
        rng = make_rng(inst, 20)
        n = int(rng.integers(20, 129))
        pts = rng.standard_normal((n, 3))
        w = int(rng.integers(1, 17))
        start = int(rng.integers(n))
        fps_bad += farthest_point_sampling(pts, w, start).tolist() != oracles.greedy_fps(pts.tolist(), w, start)
        k = int(rng.integers(1, min(30, n - 1) + 1))
        n_remove = int(rng.integers(0, n // 4 + 1))
        knn_ok = np.allclose(k_nearest_distances(pts, k), oracles.knn_mean_distances(pts.tolist(), k), rtol=1e-12, atol=0)
        sor_ok = sor_removed(pts, SorParams(k, n_remove)).tolist() == oracles.sor_removed(pts.tolist(), k, n_remove)
        sor_bad += not (knn_ok and sor_ok)
        other = rng.standard_normal((int(rng.integers(20, 129)), 3))
        ref = oracles.chamfer(pts.tolist(), other.tolist())
        cd_worst = max(cd_worst, abs(chamfer_distance(pts, other) - ref) / ref)
    ok = fps_bad == 0 and sor_bad == 0 and cd_worst <= 1e-12
    detail = f"FPS mismatches {fps_bad}/50, kNN/SOR mismatches {sor_bad}/50, CD max rel err {cd_worst:.1e}"
    assert record(2, "oracle equivalence", ok, detail)


# -- 3 ---------------------------------------------------------------------------


def test_criterion_03_gradient_check():
    rng = make_rng(3, 30)
    model = init_model(3, rng)
    for name in PARAM_NAMES:
        if name.startswith("b"):
            model.params[name] += 0.05 * rng.standard_normal(model.params[name].shape)
    x = rng.standard_normal((10, 16, 3))
    y = rng.integers(0, 3, 10)
    _, cache = forward(model, x)
    grads, _ = backward(model, cache, y)
    staged = StagedLoss(model.params, x, y)
    worst = max(float(_rel_err(grads[n], staged.numeric(n)).max()) for n in PARAM_NAMES)
    n_weights = sum(v.size for v in model.params.values())
    assert record(3, "gradient check", worst < 1e-4, f"max rel err {worst:.2e} over {n_weights} weights")


# -- 4 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_04_rotation_augmentation_kill():
    asr = {deg: mean_asr("rotation", f"rotate_z(max_deg={deg})") for deg in (10, 20, 360)}
    decreasing = asr[10] > asr[20] > asr[360]
    ok = decreasing and asr[10] >= 0.7 and asr[360] <= 0.3
    detail = (f"mean ASR 10deg={asr[10]:.3f} 20deg={asr[20]:.3f} 360deg={asr[360]:.3f} "
              f"(need strictly decreasing, 10deg>=0.7, 360deg<=0.3)")
    assert record(4, "rotation-augmentation kill", ok, detail)


# -- 5 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_05_robustness():
    defended = {k: mean_asr(k, SOR_ROT) for k in ("wlt", "ball", "rotation")}
    plain = {k: mean_asr(k, "") for k in ("wlt", "ball", "rotation")}
    ok = (defended["wlt"] >= 0.7 and defended["ball"] <= 0.3 and defended["rotation"] <= 0.3
          and all(v >= 0.9 for v in plain.values()))
    detail = ("SOR+R mean ASR " + " ".join(f"{k}={v:.3f}" for k, v in defended.items())
              + " (need wlt>=0.7, ball/rotation<=0.3); no pipeline "
              + " ".join(f"{k}={v:.3f}" for k, v in plain.items()) + " (need all>=0.9)")
    assert record(5, "IRBA robustness", ok, detail)


# -- 6 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_06_clean_accuracy():
    backdoored = [experiment("wlt", "", s)[0] for s in SEEDS]
    clean = [experiment(None, "", s)[0] for s in SEEDS]
    gap = abs(float(np.mean(backdoored)) - float(np.mean(clean)))
    detail = f"mean ACC backdoored={np.mean(backdoored):.3f} clean={np.mean(clean):.3f} |gap|={gap:.3f} (need <=0.05)"
    assert record(6, "clean-accuracy preservation", gap <= 0.05, detail)


# -- 7 ---------------------------------------------------------------------------


def test_criterion_07_sor_removes_ball():
    params = BallTriggerParams()
    trig = make_trigger("ball", params)
    m = ball_point_count(params.ratio, K)
    sor = SorParams(k=30, n_remove=round(0.1 * K))
    removed = total = 0
    for i, cloud in enumerate(fifty_clouds()):
        poisoned = trig.apply(cloud, make_rng(0, i, 1))
        gone = set(sor_removed(poisoned, sor).tolist())
        ball_idx = range(K - m, K)          # ball points are appended last
        removed += sum(j in gone for j in ball_idx)
        total += m
    frac = removed / total
    detail = f"removed {removed}/{total} trigger points ({frac:.1%}) with k=30, n_remove={sor.n_remove} (need >=95%)"
    assert record(7, "SOR defense mechanics", frac >= 0.95, detail)


# -- 8 ---------------------------------------------------------------------------


def test_criterion_08_imperceptibility_ordering():
    ball, wlt = make_trigger("ball"), make_trigger("wlt")
    cd_ball, cd_wlt = [], []
    for i, cloud in enumerate(fifty_clouds()):
        cd_ball.append(100 * chamfer_distance(cloud, ball.apply(cloud, make_rng(0, i, 1))))
        cd_wlt.append(100 * chamfer_distance(cloud, wlt.apply(cloud, make_rng(0, i, 1))))
    b, w = float(np.mean(cd_ball)), float(np.mean(cd_wlt))
    detail = f"mean CDx100 ball={b:.3f} IRBA={w:.3f} (need ball > IRBA)"
    assert record(8, "imperceptibility ordering", b > w, detail)


# -- 9 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_09_hyperparameter_trends():
    rates = (0.02, 0.05, 0.1)
    asr = [[experiment("wlt", "", s, r)[1] for s in SEEDS] for r in rates]
    hs = (0.25, 0.5, 1.0)
    cds = []
    for h in hs:
        row = []
        for s in SEEDS:
            trig = make_trigger("wlt", WltParams(bandwidth=h, seed=s))
            clouds = fifty_clouds(s)
            row.append(100 * np.mean([chamfer_distance(c, trig.apply(c, make_rng(s, i, 1))) for i, c in enumerate(clouds)]))
        cds.append(row)
    inv_asr = inversions(asr, increasing=True)
    inv_cd = inversions(cds, increasing=False)
    ok = max(inv_asr) <= 1 and max(inv_cd) <= 1
    asr_txt = " ".join(f"{r}:{np.mean(a):.3f}" for r, a in zip(rates, asr))
    cd_txt = " ".join(f"{h}:{np.mean(c):.2f}" for h, c in zip(hs, cds))
    detail = (f"mean ASR by rate {asr_txt}, inverted seeds per pair {inv_asr}; "
              f"mean CDx100 by h {cd_txt}, inverted seeds per pair {inv_cd} (allow <=1 per pair)")
    assert record(9, "hyper-parameter trends", ok, detail)


# -- 10 --------------------------------------------------------------------------


DETERMINISM_CONFIG = """
seed = 7
out = "{out}"

[dataset]
per_class_train = 6
per_class_test = 3
points = 96

[poison]
rate = 0.2
trigger = "wlt"

[wlt]
anchors = 8

[train]
epochs = 3
batch_size = 8
pipeline = [{{kind = "sor", k = 10, n_remove = 8}}, {{kind = "rotate_z", max_deg = 20}}, {{kind = "jitter"}}]

[eval]
pipeline = [{{kind = "dropout"}}]
"""

COMMANDS = ("init-config", "gen-synthetic", "poison", "train", "eval", "export-features", "run")


def _snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_cli_determinism(tmp_path):
    work = tmp_path / "work"
    cfg_path = tmp_path / "exp.toml"
    cfg_path.write_text(DETERMINISM_CONFIG.format(out=(work / "run").as_posix()))

    def run_all():
        if work.exists():
            shutil.rmtree(work)
        work.mkdir()
        codes = []
        for cmd in COMMANDS:
            args = [cmd, "--config", str(cfg_path)]
            if cmd == "init-config":
                args += ["-o", str(work / "init.toml")]
            codes.append(cli_main(args))
        return codes, _snapshot(work)

    codes1, first = run_all()
    codes2, second = run_all()
    differing = sorted(k for k in set(first) | set(second) if first.get(k) != second.get(k))
    ok = codes1 == codes2 == [0] * len(COMMANDS) and not differing and len(first) > 10
    detail = f"{len(COMMANDS)} commands, {len(first)} output files, {len(differing)} differ on rerun"
    if differing:
        detail += f" ({differing[:3]})"
    assert record(10, "CLI determinism", ok, detail)
