"""Defender-side pre-processing: outlier removal, subsampling, random
augmentations and the adaptive WLT defenses, composable into a pipeline.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    as_cloud,
    composed_rotation,
    euler_xyz,
    farthest_point_sampling,
    k_nearest_distances,
    make_rng,
    normalize_unit_ball,
    rotation_matrix_axis,
)
from .trigger import average_aggregate, smooth_aggregate


@dataclass(frozen=True)
class SorParams:
    k: int = 30
    n_remove: int = 100

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("SOR k must be >= 1")
        if self.n_remove < 0:
            raise ValueError("SOR n_remove must be >= 0")


def sor_removed(cloud, params: SorParams) -> np.ndarray:
    """Indices (sorted) of the points statistical outlier removal would drop."""
    pts = as_cloud(cloud)
    n = len(pts)
    if params.k + 1 > n:
        raise ValueError(f"SOR needs k + 1 <= K (k={params.k}, K={n})")
    if params.n_remove >= n:
        raise ValueError(f"SOR cannot remove {params.n_remove} of {n} points")
    if params.n_remove == 0:
        return np.empty(0, dtype=np.int64)
    score = k_nearest_distances(pts, params.k)
    idx = np.arange(n)
    # largest score first; among equal scores the higher index goes first
    order = np.lexsort((-idx, -score))
    return np.sort(order[: params.n_remove])


def sor(cloud, params: SorParams) -> np.ndarray:
    pts = as_cloud(cloud)
    mask = np.ones(len(pts), dtype=bool)
    mask[sor_removed(pts, params)] = False
    return pts[mask]


def srs(cloud, n_keep: int, rng: np.random.Generator) -> np.ndarray:
    """Simple random sampling without replacement, original order kept."""
    pts = as_cloud(cloud)
    if not 1 <= n_keep <= len(pts):
        raise ValueError(f"n_keep must be in [1, {len(pts)}], got {n_keep}")
    keep = np.sort(rng.choice(len(pts), size=int(n_keep), replace=False))
    return pts[keep]


# -- random augmentations ------------------------------------------------------


def rotate_z(cloud, rng, max_deg: float = 20.0):
    angle = rng.uniform(0.0, math.radians(max_deg))
    return as_cloud(cloud) @ rotation_matrix_axis("z", angle).T


def rotate_xyz(cloud, rng, max_deg: float = 360.0):
    ax, ay, az = rng.uniform(0.0, math.radians(max_deg), size=3)
    return as_cloud(cloud) @ euler_xyz(ax, ay, az).T


def scale(cloud, rng, low: float = 0.5, high: float = 1.5):
    return as_cloud(cloud) * rng.uniform(low, high)


def shift(cloud, rng, max_shift: float = 0.1):
    return as_cloud(cloud) + rng.uniform(-max_shift, max_shift, size=3)


def dropout(cloud, rng, max_ratio: float = 0.2):
    """Drop a random fraction of points, refilling with copies of the first kept point."""
    pts = as_cloud(cloud)
    ratio = rng.uniform(0.0, max_ratio)
    drop = rng.random(len(pts)) < ratio
    if drop.all():
        drop[0] = False
    out = pts.copy()
    if drop.any():
        first_kept = pts[np.flatnonzero(~drop)[0]]
        out[drop] = first_kept
    return out


def jitter(cloud, rng, sigma: float = 0.02, clip: float = 0.05):
    pts = as_cloud(cloud)
    noise = np.clip(sigma * rng.standard_normal(pts.shape), -clip, clip)
    return pts + noise


AUGMENTATIONS = {
    "rotate_z": (rotate_z, {"max_deg": 20.0}),
    "rotate_xyz": (rotate_xyz, {"max_deg": 360.0}),
    "scale": (scale, {"low": 0.5, "high": 1.5}),
    "shift": (shift, {"max_shift": 0.1}),
    "dropout": (dropout, {"max_ratio": 0.2}),
    "jitter": (jitter, {"sigma": 0.02, "clip": 0.05}),
}


def _check_aug_params(kind: str, p: dict):
    if kind in ("rotate_z", "rotate_xyz") and not (0 <= p["max_deg"] <= 360):
        raise ValueError(f"{kind}: max_deg must be in [0, 360]")
    if kind == "scale" and not (0 < p["low"] <= p["high"]):
        raise ValueError("scale: need 0 < low <= high")
    if kind == "shift" and p["max_shift"] < 0:
        raise ValueError("shift: max_shift must be >= 0")
    if kind == "dropout" and not (0 <= p["max_ratio"] < 1):
        raise ValueError("dropout: max_ratio must be in [0, 1)")
    if kind == "jitter" and (p["sigma"] < 0 or p["clip"] < 0):
        raise ValueError("jitter: sigma and clip must be >= 0")


def random_augment(cloud, kind: str, rng: np.random.Generator, **params) -> np.ndarray:
    try:
        fn, defaults = AUGMENTATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown augmentation {kind!r}") from None
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValueError(f"{kind}: unknown parameters {sorted(unknown)}")
    merged = {**defaults, **params}
    _check_aug_params(kind, merged)
    return fn(cloud, rng, **merged)


# -- adaptive defenses -----------------------------------------------------------


@dataclass(frozen=True)
class WltDefenseRanges:
    """Ranges the defender draws WLT parameters from (angles in degrees)."""

    alpha_deg: tuple[float, float] = (-10.0, 10.0)
    scale: tuple[float, float] = (1.0, 10.0)
    n_anchors: tuple[int, int] = (1, 32)
    bandwidth: tuple[float, float] = (0.1, 0.9)

    def __post_init__(self):
        for name in ("alpha_deg", "scale", "n_anchors", "bandwidth"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} range is empty: ({lo}, {hi})")
        if self.scale[0] <= 0:
            raise ValueError("scale range must be positive")
        if self.n_anchors[0] < 1:
            raise ValueError("anchor range must start at >= 1")
        if self.bandwidth[0] <= 0:
            raise ValueError("bandwidth range must be positive")


def draw_defense_params(ranges: WltDefenseRanges, rng: np.random.Generator, mode: str) -> dict:
    draws = {
        "alpha": math.radians(rng.uniform(*ranges.alpha_deg)),
        "scale": rng.uniform(*ranges.scale),
        "n_anchors": int(rng.integers(ranges.n_anchors[0], ranges.n_anchors[1] + 1)),
    }
    if mode == "smooth":
        draws["bandwidth"] = rng.uniform(*ranges.bandwidth)
    return draws


def adaptive_wlt_defense(
    cloud,
    mode: str,
    ranges: WltDefenseRanges,
    rng: np.random.Generator,
    renormalize: bool = True,
) -> np.ndarray:
    """Random multi-anchor transform used as augmentation by an informed defender.

    ``average`` blends the anchor transforms uniformly, ``smooth`` uses the
    Gaussian kernel with a drawn bandwidth.
    """
    if mode not in ("average", "smooth"):
        raise ValueError(f"mode must be 'average' or 'smooth', got {mode!r}")
    pts = as_cloud(cloud)
    p = draw_defense_params(ranges, rng, mode)
    if p["n_anchors"] > len(pts):
        raise ValueError(f"drawn anchor count {p['n_anchors']} exceeds cloud size {len(pts)}")
    start = int(rng.integers(len(pts)))
    anchors = pts[farthest_point_sampling(pts, p["n_anchors"], start)]
    rot = composed_rotation(p["alpha"])
    if mode == "average":
        out = average_aggregate(pts, anchors, rot, p["scale"])
    else:
        out = smooth_aggregate(pts, anchors, rot, p["scale"], p["bandwidth"])
    return normalize_unit_ball(out) if renormalize else out


# -- pipelines ------------------------------------------------------------------


STEP_KINDS = ("sor", "srs", *AUGMENTATIONS, "wlt_average", "wlt_smooth")
_DETERMINISTIC = {"sor"}


@dataclass(frozen=True)
class StepSpec:
    kind: str
    params: dict = field(default_factory=dict)
    per_epoch: bool = True

    def __post_init__(self):
        if self.kind not in STEP_KINDS:
            raise ValueError(f"unknown pipeline step {self.kind!r}; expected one of {STEP_KINDS}")
        validate_step(self)

    @property
    def deterministic(self) -> bool:
        return self.kind in _DETERMINISTIC

    def label(self) -> str:
        if not self.params:
            return self.kind
        inner = ",".join(f"{k}={v}" for k, v in self.params.items())
        return f"{self.kind}({inner})"


def _ranges_from(params: dict) -> WltDefenseRanges:
    kw = {k: tuple(v) for k, v in params.items() if k in ("alpha_deg", "scale", "n_anchors", "bandwidth")}
    return WltDefenseRanges(**kw)


def validate_step(step: StepSpec):
    p = step.params
    if step.kind == "sor":
        SorParams(**p)
    elif step.kind == "srs":
        if set(p) != {"n_keep"} or int(p["n_keep"]) < 1:
            raise ValueError("srs needs a positive n_keep")
    elif step.kind in AUGMENTATIONS:
        defaults = AUGMENTATIONS[step.kind][1]
        unknown = set(p) - set(defaults)
        if unknown:
            raise ValueError(f"{step.kind}: unknown parameters {sorted(unknown)}")
        _check_aug_params(step.kind, {**defaults, **p})
    else:
        unknown = set(p) - {"alpha_deg", "scale", "n_anchors", "bandwidth", "renormalize"}
        if unknown:
            raise ValueError(f"{step.kind}: unknown parameters {sorted(unknown)}")
        _ranges_from(p)


def apply_step(cloud, step: StepSpec, rng: np.random.Generator) -> np.ndarray:
    p = step.params
    if step.kind == "sor":
        return sor(cloud, SorParams(**p))
    if step.kind == "srs":
        return srs(cloud, int(p["n_keep"]), rng)
    if step.kind in AUGMENTATIONS:
        return random_augment(cloud, step.kind, rng, **p)
    mode = "average" if step.kind == "wlt_average" else "smooth"
    return adaptive_wlt_defense(cloud, mode, _ranges_from(p), rng, renormalize=p.get("renormalize", True))


@dataclass(frozen=True)
class PipelineSpec:
    steps: tuple[StepSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    def __len__(self):
        return len(self.steps)

    def label(self) -> str:
        return "+".join(s.label() for s in self.steps) or "none"

    def deterministic_prefix(self) -> int:
        """Number of leading steps that use no randomness (cacheable)."""
        n = 0
        for s in self.steps:
            if not s.deterministic:
                break
            n += 1
        return n

    def to_list(self) -> list[dict]:
        out = []
        for s in self.steps:
            d = {"kind": s.kind, **s.params}
            if not s.per_epoch:
                d["per_epoch"] = False
            out.append(d)
        return out

    @classmethod
    def from_list(cls, items) -> "PipelineSpec":
        steps = []
        for item in items:
            item = dict(item)
            kind = item.pop("kind")
            per_epoch = bool(item.pop("per_epoch", True))
            params = {k: (list(v) if isinstance(v, (list, tuple)) else v) for k, v in item.items()}
            steps.append(StepSpec(kind, params, per_epoch))
        return cls(tuple(steps))


_STEP_RE = re.compile(r"\s*([a-z_0-9]+)\s*(?:\((.*)\))?\s*$")


def _parse_value(text: str):
    text = text.strip()
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    if ":" in text:
        lo, hi = text.split(":", 1)
        return [_parse_value(lo), _parse_value(hi)]
    try:
        return int(text)
    except ValueError:
        return float(text)


def parse_pipeline(text: str) -> PipelineSpec:
    """Parse ``"sor(k=30,n_remove=50),rotate_z(max_deg=20)"``.

    Ranges for the adaptive defenses are written ``lo:hi``. An empty string
    or ``none`` is the identity pipeline.
    """
    text = text.strip()
    if not text or text == "none":
        return PipelineSpec()
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    parts.append(cur)
    steps = []
    for part in parts:
        m = _STEP_RE.match(part)
        if not m:
            raise ValueError(f"cannot parse pipeline step {part!r}")
        params = {}
        if m.group(2):
            for kv in m.group(2).split(","):
                if not kv.strip():
                    continue
                if "=" not in kv:
                    raise ValueError(f"expected key=value in {part!r}")
                k, v = kv.split("=", 1)
                params[k.strip()] = _parse_value(v)
        steps.append(StepSpec(m.group(1), params))
    return PipelineSpec(tuple(steps))


def run_pipeline(cloud, spec: PipelineSpec, rng: np.random.Generator, epoch: int = 0, skip: int = 0) -> np.ndarray:
    """Apply the steps of ``spec`` in order.

    One base value is drawn from ``rng``; step ``i`` then gets its own
    stream keyed by ``(base, i, epoch)``, or ``(base, i, 0)`` when the step is
    not re-drawn per epoch. ``skip`` lets a caller that cached the output of
    the first steps resume from there with identical streams.
    """
    out = as_cloud(cloud)
    base = int(rng.integers(2**63))
    for i, step in enumerate(spec.steps):
        if i < skip:
            continue
        step_rng = make_rng(base, i, epoch if step.per_epoch else 0)
        out = apply_step(out, step, step_rng)
    return out
