"""Backdoor triggers: weighted local transformation (WLT) plus the ball and
rotation baselines.

Every trigger is a small frozen dataclass with an ``apply(cloud, rng)``
method, so callers (poisoning, ASR evaluation) can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import (
    as_cloud,
    composed_rotation,
    farthest_point_sampling,
    make_rng,
    normalize_unit_ball,
    rotation_matrix_axis,
)


def anchor_transform(x, anchor, rotation, scaling) -> np.ndarray:
    """Rotate and scale ``x`` about ``anchor``: ``R @ S @ (x - a) + a``.

    ``x`` may be a single point or an ``(N, 3)`` array of points.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(anchor, dtype=np.float64)
    m = np.asarray(rotation, dtype=np.float64) @ np.asarray(scaling, dtype=np.float64)
    return (x - a) @ m.T + a


def gaussian_weight(x, anchor, bandwidth: float):
    """``exp(-|x - a|^2 / (2 h^2))``; broadcasts over leading axes."""
    if not bandwidth > 0.0:
        raise ValueError(f"kernel bandwidth must be positive, got {bandwidth}")
    diff = np.asarray(x, dtype=np.float64) - np.asarray(anchor, dtype=np.float64)
    return np.exp(-(diff**2).sum(axis=-1) / (2.0 * bandwidth**2))


def local_transforms(points, anchors, matrix) -> np.ndarray:
    """Images of every point under every anchor transform, shape ``(K, W, 3)``."""
    diff = points[:, None, :] - anchors[None, :, :]
    return diff @ matrix.T + anchors[None, :, :]


def smooth_aggregate(points, anchors, rotation, scale: float, bandwidth: float) -> np.ndarray:
    """Kernel-weighted blend of the per-anchor transforms of each point.

    For each point, the output is the average of its W anchor images
    weighted by the Gaussian kernel between the point and each anchor.
    """
    pts = as_cloud(points)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    if not bandwidth > 0.0:
        raise ValueError(f"kernel bandwidth must be positive, got {bandwidth}")
    matrix = np.asarray(rotation, dtype=np.float64) @ np.diag([scale, scale, scale])
    images = local_transforms(pts, anchors, matrix)
    sq = ((pts[:, None, :] - anchors[None, :, :]) ** 2).sum(axis=-1)
    # Subtracting the row minimum keeps far-from-every-anchor points from
    # underflowing to 0/0; the common factor cancels in the ratio.
    logw = -(sq - sq.min(axis=1, keepdims=True)) / (2.0 * bandwidth**2)
    w = np.exp(logw)
    return (w[:, :, None] * images).sum(axis=1) / w.sum(axis=1)[:, None]


def average_aggregate(points, anchors, rotation, scale: float) -> np.ndarray:
    """Uniform-weight blend of the per-anchor transforms."""
    pts = as_cloud(points)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    matrix = np.asarray(rotation, dtype=np.float64) @ np.diag([scale, scale, scale])
    return local_transforms(pts, anchors, matrix).mean(axis=1)


@dataclass(frozen=True)
class WltParams:
    """Fixed attacker parameters of the WLT trigger.

    ``alpha`` is in radians. ``renormalize`` maps the transformed cloud back
    into the unit ball; without it a scale of 5 pushes most points far
    outside the ball.
    """

    n_anchors: int = 16
    alpha: float = math.radians(5.0)
    scale: float = 5.0
    bandwidth: float = 0.5
    seed: int = 0
    renormalize: bool = True

    def __post_init__(self):
        if int(self.n_anchors) < 1:
            raise ValueError("n_anchors must be >= 1")
        for name in ("alpha", "scale", "bandwidth"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not self.scale > 0:
            raise ValueError("scale must be > 0")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be > 0")


def wlt_apply(cloud, params: WltParams, start: int | None = None) -> np.ndarray:
    """Apply the weighted local transformation trigger.

    Anchors come from farthest point sampling starting at ``start``; when no
    start is given it is drawn from ``params.seed`` so the result is a pure
    function of the cloud.
    """
    pts = as_cloud(cloud)
    if params.n_anchors > len(pts):
        raise ValueError(f"n_anchors={params.n_anchors} exceeds cloud size {len(pts)}")
    if start is None:
        start = int(make_rng(params.seed).integers(len(pts)))
    anchors = pts[farthest_point_sampling(pts, params.n_anchors, start)]
    out = smooth_aggregate(pts, anchors, composed_rotation(params.alpha), params.scale, params.bandwidth)
    if params.renormalize:
        out = normalize_unit_ball(out)
    return out


@dataclass(frozen=True)
class BallTriggerParams:
    center: tuple[float, float, float] = (0.05, 0.05, 0.05)
    radius: float = 0.05
    ratio: float = 0.01

    def __post_init__(self):
        if len(self.center) != 3:
            raise ValueError("ball center must be a 3-vector")
        if not self.radius > 0:
            raise ValueError("ball radius must be > 0")
        if not 0 < self.ratio < 1:
            raise ValueError("ball ratio must be in (0, 1)")


def ball_point_count(ratio: float, n_points: int) -> int:
    # the epsilon keeps 0.01 * 100 from rounding up to 2
    return int(math.ceil(ratio * n_points - 1e-9))


def sample_in_ball(center, radius: float, n: int, rng: np.random.Generator) -> np.ndarray:
    direction = rng.standard_normal((n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / 3.0)
    return np.asarray(center, dtype=np.float64) + direction * r[:, None]


def ball_trigger_apply(cloud, params: BallTriggerParams, rng: np.random.Generator) -> np.ndarray:
    """Insert a small ball of points, dropping random originals to keep K fixed.

    Surviving original points keep their relative order; the ball points are
    appended at the end.
    """
    pts = as_cloud(cloud)
    n = len(pts)
    m = ball_point_count(params.ratio, n)
    if m < 1:
        raise ValueError(f"ratio {params.ratio} yields no trigger points for K={n}")
    if m >= n:
        raise ValueError(f"ball of {m} points would replace the whole cloud (K={n})")
    ball = sample_in_ball(params.center, params.radius, m, rng)
    keep = np.sort(rng.choice(n, size=n - m, replace=False))
    return np.concatenate([pts[keep], ball], axis=0)


@dataclass(frozen=True)
class RotationTriggerParams:
    angle_z: float = math.radians(10.0)

    def __post_init__(self):
        if not math.isfinite(self.angle_z):
            raise ValueError("rotation angle must be finite")


def rotation_trigger_apply(cloud, params: RotationTriggerParams) -> np.ndarray:
    pts = as_cloud(cloud)
    return pts @ rotation_matrix_axis("z", params.angle_z).T


# -- uniform trigger objects -------------------------------------------------


@dataclass(frozen=True)
class WltTrigger:
    params: WltParams = field(default_factory=WltParams)
    kind = "wlt"

    def apply(self, cloud, rng: np.random.Generator) -> np.ndarray:
        return self.apply_with_info(cloud, rng)[0]

    def apply_with_info(self, cloud, rng: np.random.Generator):
        """Also returns the per-sample FPS start so it can be recorded."""
        start = int(rng.integers(len(cloud)))
        return wlt_apply(cloud, self.params, start=start), {"fps_start": start}

    def describe(self) -> dict:
        return {"kind": self.kind, **asdict(self.params)}


@dataclass(frozen=True)
class BallTrigger:
    params: BallTriggerParams = field(default_factory=BallTriggerParams)
    kind = "ball"

    def apply(self, cloud, rng: np.random.Generator) -> np.ndarray:
        return ball_trigger_apply(cloud, self.params, rng)

    def apply_with_info(self, cloud, rng: np.random.Generator):
        return self.apply(cloud, rng), {}

    def describe(self) -> dict:
        return {"kind": self.kind, **asdict(self.params)}


@dataclass(frozen=True)
class RotationTrigger:
    params: RotationTriggerParams = field(default_factory=RotationTriggerParams)
    kind = "rotation"

    def apply(self, cloud, rng: np.random.Generator | None = None) -> np.ndarray:
        return rotation_trigger_apply(cloud, self.params)

    def apply_with_info(self, cloud, rng: np.random.Generator | None = None):
        return self.apply(cloud, rng), {}

    def describe(self) -> dict:
        return {"kind": self.kind, **asdict(self.params)}


TRIGGER_KINDS = ("wlt", "ball", "rotation")


def make_trigger(kind: str, params=None):
    if kind == "wlt":
        return WltTrigger(params or WltParams())
    if kind == "ball":
        return BallTrigger(params or BallTriggerParams())
    if kind == "rotation":
        return RotationTrigger(params or RotationTriggerParams())
    raise ValueError(f"unknown trigger kind {kind!r}; expected one of {TRIGGER_KINDS}")
