"""Labeled point-cloud datasets: file formats, the synthetic shape corpus and
poison-label dataset construction.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import TriangleMesh, as_cloud, make_rng, normalize_unit_ball, sample_mesh_surface
from .metrics import chamfer_distance

SYNTHETIC_CLASSES = ("sphere", "cube", "cylinder", "cone", "torus")
MANIFEST_HEADER = ["path", "label", "split"]


class ParseError(ValueError):
    def __init__(self, path, line: int, msg: str):
        super().__init__(f"{path}:{line}: {msg}")
        self.path = path
        self.line = line


@dataclass
class LabeledDataset:
    clouds: list
    labels: np.ndarray
    class_names: list
    poison_mask: np.ndarray | None = None
    split: str = "train"
    paths: list | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.clouds) != len(self.labels):
            raise ValueError("clouds and labels differ in length")
        if self.poison_mask is None:
            self.poison_mask = np.zeros(len(self.labels), dtype=bool)
        self.poison_mask = np.asarray(self.poison_mask, dtype=bool)
        if len(self.poison_mask) != len(self.labels):
            raise ValueError("poison mask length does not match sample count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label out of range for class list")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


# -- file formats ----------------------------------------------------------------


def _content_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield lineno, line


def load_off(path) -> TriangleMesh:
    """Parse an OFF mesh; polygons are fan-triangulated.

    Accepts both the standard header and the fused ``OFF<nv> <nf> <ne>``
    first line found in some ModelNet files.
    """
    lines = _content_lines(path)
    try:
        lineno, first = next(lines)
    except StopIteration:
        raise ParseError(path, 1, "empty file") from None
    if not first.startswith("OFF"):
        raise ParseError(path, lineno, f"expected OFF header, got {first[:20]!r}")
    rest = first[3:].strip()
    if rest:
        counts_line, counts_no = rest, lineno
    else:
        try:
            counts_no, counts_line = next(lines)
        except StopIteration:
            raise ParseError(path, lineno + 1, "missing vertex/face counts") from None
    try:
        counts = [int(t) for t in counts_line.split()]
        nv, nf = counts[0], counts[1]
    except (ValueError, IndexError):
        raise ParseError(path, counts_no, f"bad counts line {counts_line!r}") from None
    if nv < 0 or nf < 0:
        raise ParseError(path, counts_no, "negative vertex or face count")

    verts = np.empty((nv, 3))
    for i in range(nv):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise ParseError(path, counts_no, f"file ends after {i} of {nv} vertices") from None
        tok = line.split()
        try:
            verts[i] = [float(t) for t in tok[:3]]
        except ValueError:
            raise ParseError(path, lineno, f"bad vertex {line!r}") from None
        if len(tok) < 3:
            raise ParseError(path, lineno, f"vertex needs 3 coordinates, got {len(tok)}")

    faces = []
    for i in range(nf):
        try:
            lineno, line = next(lines)
        except StopIteration:
            raise ParseError(path, counts_no, f"file ends after {i} of {nf} faces") from None
        try:
            tok = [int(t) for t in line.split()]
        except ValueError:
            # trailing per-face colors may be floats; indices never are
            tok = line.split()
            try:
                n = int(tok[0])
                tok = [n] + [int(t) for t in tok[1 : n + 1]]
            except (ValueError, IndexError):
                raise ParseError(path, lineno, f"bad face {line!r}") from None
        n = tok[0]
        idx = tok[1 : n + 1]
        if n < 3 or len(idx) != n:
            raise ParseError(path, lineno, f"face declares {n} vertices but lists {len(idx)}")
        if min(idx) < 0 or max(idx) >= nv:
            raise ParseError(path, lineno, "face index out of range")
        for j in range(1, n - 1):
            faces.append((idx[0], idx[j], idx[j + 1]))
    return TriangleMesh(verts, np.asarray(faces, dtype=np.int64).reshape(-1, 3))


def load_xyz(path) -> np.ndarray:
    rows = []
    for lineno, line in _content_lines(path):
        tok = line.split()
        if len(tok) != 3:
            raise ParseError(path, lineno, f"expected 3 columns, got {len(tok)}")
        try:
            rows.append([float(t) for t in tok])
        except ValueError:
            raise ParseError(path, lineno, f"non-numeric value in {line!r}") from None
    if not rows:
        raise ParseError(path, 1, "no points")
    return as_cloud(rows)


def write_xyz(path, cloud):
    pts = as_cloud(cloud)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x, y, z in pts.tolist():
            fh.write(f"{x!r} {y!r} {z!r}\n")


def write_manifest(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        w.writerows(rows)


def read_manifest(path) -> list[tuple[str, str, str]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise ParseError(path, 1, f"manifest header must be {','.join(MANIFEST_HEADER)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(path, lineno, "manifest rows need path,label,split")
            rows.append((row[0], row[1], row[2]))
    return rows


def build_manifest(root, test_fraction: float = 0.2) -> list[tuple[str, str, str]]:
    """Index a ``root/<class>/<file>.{off,xyz}`` tree.

    Files that already sit under ``train``/``test`` directories keep that
    split; otherwise the last ``test_fraction`` of each class (by name) is
    assigned to test.
    """
    root = Path(root)
    rows = []
    for split in ("train", "test"):
        if (root / split).is_dir():
            for cls_dir in sorted(p for p in (root / split).iterdir() if p.is_dir()):
                for f in sorted(cls_dir.iterdir()):
                    if f.suffix.lower() in (".off", ".xyz"):
                        rows.append((f.relative_to(root).as_posix(), cls_dir.name, split))
    if rows:
        return rows
    for cls_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(f for f in cls_dir.iterdir() if f.suffix.lower() in (".off", ".xyz"))
        n_test = int(round(len(files) * test_fraction))
        for i, f in enumerate(files):
            split = "test" if i >= len(files) - n_test else "train"
            rows.append((f.relative_to(root).as_posix(), cls_dir.name, split))
    return rows


def load_manifest_datasets(path, n_points: int = 1024, seed: int = 0):
    """Load ``(train, test)`` datasets from a manifest CSV.

    OFF meshes are surface-sampled to ``n_points`` and normalized; XYZ files
    are used as stored. Class ids follow first appearance in the manifest.
    """
    path = Path(path)
    rows = read_manifest(path)
    class_names: list[str] = []
    for _, label, _ in rows:
        if label not in class_names:
            class_names.append(label)
    parts = {"train": ([], [], []), "test": ([], [], [])}
    for i, (rel, label, split) in enumerate(rows):
        if split not in parts:
            raise ParseError(path, i + 2, f"unknown split {split!r}")
        f = path.parent / rel
        if f.suffix.lower() == ".off":
            cloud = normalize_unit_ball(sample_mesh_surface(load_off(f), n_points, make_rng(seed, i)))
        else:
            cloud = load_xyz(f)
        clouds, labels, paths = parts[split]
        clouds.append(cloud)
        labels.append(class_names.index(label))
        paths.append(rel)
    out = []
    for split in ("train", "test"):
        clouds, labels, paths = parts[split]
        out.append(LabeledDataset(clouds, np.asarray(labels, dtype=np.int64), class_names, split=split, paths=paths))
    return tuple(out)


# -- synthetic corpus -------------------------------------------------------------


def _sample_sphere(n, rng):
    v = rng.standard_normal((n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def _sample_box(n, rng, half):
    half = np.asarray(half, dtype=np.float64)
    # face pairs perpendicular to x, y, z have areas proportional to these
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    pts[np.arange(n), axis] = sign * half[axis]
    return pts


def _sample_cylinder(n, rng, radius, half_height):
    """Cylinder around the x axis, caps included."""
    side = 2.0 * math.pi * radius * 2.0 * half_height
    cap = math.pi * radius**2
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    r = np.where(part == 0, radius, radius * np.sqrt(rng.random(n)))
    x = np.where(part == 0, rng.uniform(-half_height, half_height, n), np.where(part == 1, half_height, -half_height))
    return np.column_stack([x, r * np.cos(theta), r * np.sin(theta)])


def _sample_cone(n, rng, radius, height):
    """Cone around the y axis: base disk at y=0, apex at y=height."""
    slant = math.hypot(radius, height)
    side = math.pi * radius * slant
    base = math.pi * radius**2
    on_side = rng.random(n) < side / (side + base)
    theta = rng.uniform(0.0, 2.0 * math.pi, n)
    # on both parts the radial density grows linearly, so sqrt(u)
    t = np.sqrt(rng.random(n))
    r = radius * t
    y = np.where(on_side, height * (1.0 - t), 0.0)
    return np.column_stack([r * np.cos(theta), y, r * np.sin(theta)])


def _sample_torus(n, rng, major, minor):
    """Torus around the x axis, uniform in area via rejection on the tube angle."""
    out = np.empty((0, 2))
    while len(out) < n:
        m = 2 * (n - len(out)) + 16
        theta = rng.uniform(0.0, 2.0 * math.pi, m)
        phi = rng.uniform(0.0, 2.0 * math.pi, m)
        accept = rng.random(m) < (major + minor * np.cos(theta)) / (major + minor)
        out = np.concatenate([out, np.column_stack([theta, phi])[accept]])
    theta, phi = out[:n, 0], out[:n, 1]
    ring = major + minor * np.cos(theta)
    return np.column_stack([minor * np.sin(theta), ring * np.cos(phi), ring * np.sin(phi)])


def sample_shape(name: str, n: int, rng: np.random.Generator, vary: bool = True) -> np.ndarray:
    """Surface sample of one class in its canonical pose.

    With ``vary`` the proportions (box sides, cylinder length, cone height,
    torus tube radius) are drawn per sample; otherwise the mid value is used.
    Axes of revolution are chosen off the z axis so a rotation about z
    visibly changes every class except the sphere.
    """

    def draw(lo, hi, size=None):
        if vary:
            return rng.uniform(lo, hi, size)
        mid = 0.5 * (lo + hi)
        return mid if size is None else np.full(size, mid)

    if name == "sphere":
        return _sample_sphere(n, rng)
    if name == "cube":
        return _sample_box(n, rng, draw(0.85, 1.15, 3))
    if name == "cylinder":
        return _sample_cylinder(n, rng, 1.0, draw(0.8, 1.2))
    if name == "cone":
        return _sample_cone(n, rng, 1.0, draw(1.6, 2.4))
    if name == "torus":
        return _sample_torus(n, rng, 1.0, draw(0.25, 0.4))
    raise ValueError(f"unknown synthetic class {name!r}; expected one of {SYNTHETIC_CLASSES}")


def _small_rotation(rng, max_deg):
    if max_deg <= 0:
        return np.eye(3)
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    angle = math.radians(rng.uniform(-max_deg, max_deg))
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + math.sin(angle) * k + (1 - math.cos(angle)) * (k @ k)


def generate_synthetic_corpus(
    classes=SYNTHETIC_CLASSES,
    per_class: int = 40,
    n_points: int = 512,
    noise_sigma: float = 0.01,
    seed: int = 0,
    pose_jitter_deg: float = 0.0,
    split: str = "train",
    vary_proportions: bool = False,
) -> LabeledDataset:
    """Desk-scale stand-in for an object classification benchmark.

    Each sample: surface points of its shape, a random rigid pose (small
    rotation about a random axis plus translation), a uniform scale in
    [0.8, 1.2], Gaussian noise, then unit-ball normalization. Sample ``i``
    of class ``c`` draws from its own stream, so corpora of different sizes
    share their common prefix.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    classes = list(classes)
    split_key = {"train": 0, "test": 1}.get(split, 2)
    clouds, labels = [], []
    for c, name in enumerate(classes):
        for i in range(per_class):
            rng = make_rng(seed, split_key, c, i)
            pts = sample_shape(name, n_points, rng, vary_proportions)
            pts = pts @ _small_rotation(rng, pose_jitter_deg).T
            pts = pts * rng.uniform(0.8, 1.2) + rng.uniform(-0.5, 0.5, 3)
            if noise_sigma > 0:
                pts = pts + noise_sigma * rng.standard_normal(pts.shape)
            clouds.append(normalize_unit_ball(pts))
            labels.append(c)
    return LabeledDataset(clouds, np.asarray(labels), classes, split=split)


# -- poisoning ------------------------------------------------------------------------


@dataclass
class PoisonPlan:
    rate: float = 0.1
    target: int = 0
    trigger: object = None
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.rate < 1:
            raise ValueError(f"poison rate must be in (0, 1), got {self.rate}")
        if self.target < 0:
            raise ValueError("target label must be non-negative")


def poison_count(rate: float, n: int) -> int:
    return int(math.floor(rate * n + 1e-9))


@dataclass
class PoisonRecord:
    index: int
    original_label: int
    cd_x100: float
    info: dict = field(default_factory=dict)   # e.g. the WLT FPS start index


@dataclass
class PoisonResult:
    dataset: LabeledDataset
    records: list = field(default_factory=list)


def poison_dataset(train: LabeledDataset, plan: PoisonPlan) -> PoisonResult:
    """Replace ``floor(rate * N)`` random non-target samples with triggered,
    target-labelled copies.

    Sample ``i`` is triggered with its own stream keyed by ``(seed, i)``.
    """
    if plan.target >= train.n_classes:
        raise ValueError(f"target {plan.target} out of range for {train.n_classes} classes")
    n = len(train)
    m = poison_count(plan.rate, n)
    candidates = np.flatnonzero(train.labels != plan.target)
    if m > len(candidates):
        raise ValueError(f"need {m} non-target samples to poison, only {len(candidates)} available")
    clouds = list(train.clouds)
    labels = train.labels.copy()
    mask = train.poison_mask.copy()
    records = []
    if m:
        if plan.trigger is None:
            raise ValueError("poison plan has no trigger")
        chosen = np.sort(make_rng(plan.seed).choice(candidates, size=m, replace=False))
        for idx in chosen.tolist():
            poisoned, info = plan.trigger.apply_with_info(train.clouds[idx], make_rng(plan.seed, idx, 1))
            cd = 100.0 * chamfer_distance(train.clouds[idx], poisoned)
            records.append(PoisonRecord(idx, int(labels[idx]), cd, info))
            clouds[idx] = poisoned
            labels[idx] = plan.target
            mask[idx] = True
    out = replace(train, clouds=clouds, labels=labels, poison_mask=mask)
    return PoisonResult(out, records)
